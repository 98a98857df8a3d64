//! Visual scene generation: image prompt compilation and character
//! grounding.
//!
//! Character appearance is anchored once per character: a portrait is
//! generated (or the user's is used), analyzed by the vision backend, and
//! the resulting appearance, clothing, and key features are stored on the
//! profile. Every image prompt that shows the character then carries those
//! features verbatim.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Backends, ImageRef, Task, TextBackend, TextRequest};
use crate::graph::{relation, resolve_location, NodeId, NodeType, SceneGraph};
use crate::prompts::IMAGE_PROMPT_SYSTEM;

/// Visual text fields shorter than this count as generic.
pub const GENERIC_FIELD_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileSource {
    User,
    Generated,
    Enriched,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterProfile {
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub personality: String,
    #[serde(default)]
    pub appearance_details: String,
    #[serde(default)]
    pub consistent_clothing: String,
    #[serde(default)]
    pub key_visual_features: Vec<String>,
    #[serde(default)]
    pub portrait_ref: Option<ImageRef>,
    #[serde(default = "user_source")]
    pub profile_source: ProfileSource,
}

fn user_source() -> ProfileSource {
    ProfileSource::User
}

impl CharacterProfile {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            personality: String::new(),
            appearance_details: String::new(),
            consistent_clothing: String::new(),
            key_visual_features: Vec::new(),
            portrait_ref: None,
            profile_source: ProfileSource::User,
        }
    }

    /// A profile for a character the story introduced on its own.
    pub fn generated(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            profile_source: ProfileSource::Generated,
            ..Self::new(name, description)
        }
    }

    pub fn is_enriched(&self) -> bool {
        self.profile_source == ProfileSource::Enriched
    }

    /// True when any visual field is empty or too short to anchor an image.
    pub fn has_generic_visuals(&self) -> bool {
        self.appearance_details.trim().chars().count() < GENERIC_FIELD_LEN
            || self.consistent_clothing.trim().chars().count() < GENERIC_FIELD_LEN
            || self.key_visual_features.join(", ").trim().chars().count() < GENERIC_FIELD_LEN
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StylePreference {
    pub style_name: String,
    #[serde(default)]
    pub descriptors: Vec<String>,
}

impl StylePreference {
    pub fn new(style_name: impl Into<String>, descriptors: &[&str]) -> Self {
        Self {
            style_name: style_name.into(),
            descriptors: descriptors.iter().map(|d| d.to_string()).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), VisualError> {
        if self.style_name.trim().is_empty() {
            return Err(VisualError::InvalidStyle);
        }
        Ok(())
    }

    /// `name` or `name: descriptor, descriptor`.
    pub fn render(&self) -> String {
        if self.descriptors.is_empty() {
            self.style_name.clone()
        } else {
            format!("{}: {}", self.style_name, self.descriptors.join(", "))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePromptBundle {
    pub prompt_text: String,
    pub active_characters: Vec<String>,
    pub injected_cues: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VisualError {
    #[error("character `{0}` is active in the scene but has no grounded profile")]
    UnenrichedProfile(String),
    #[error("style name is empty")]
    InvalidStyle,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

fn mentions(text: &str, name: &str) -> Option<usize> {
    let lower_text = text.to_lowercase();
    let lower_name = name.to_lowercase();
    if lower_name.is_empty() {
        return None;
    }
    lower_text
        .match_indices(&lower_name)
        .map(|(i, _)| i)
        .find(|&i| {
            let before = lower_text[..i].chars().next_back();
            let after = lower_text[i + lower_name.len()..].chars().next();
            !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
        })
}

/// Characters visible in a scene: those named in the text, plus characters
/// whose `IS_AT` target lies on the location chain of a named character.
/// Ordered by first mention, then by name.
pub fn active_characters(
    scene_text: &str,
    graph: &SceneGraph,
    profiles: &[CharacterProfile],
) -> Vec<String> {
    let mut named: Vec<(usize, String)> = Vec::new();
    let mut seen = BTreeSet::new();
    let candidates = graph
        .characters()
        .map(|n| n.name.clone())
        .chain(profiles.iter().map(|p| p.name.clone()));
    for name in candidates {
        if let Some(pos) = mentions(scene_text, &name) {
            if seen.insert(name.to_lowercase()) {
                named.push((pos, name));
            }
        }
    }
    named.sort();
    let mut chain: BTreeSet<NodeId> = BTreeSet::new();
    for (_, name) in &named {
        for node in graph.find_by_name(name) {
            chain.extend(resolve_location(graph, &node.id, true).unwrap_or_default());
        }
    }
    let mut nearby: Vec<String> = graph
        .characters()
        .filter(|c| !seen.contains(&c.name.to_lowercase()))
        .filter(|c| {
            graph
                .outgoing(&c.id)
                .any(|e| e.relation == relation::IS_AT && chain.contains(&e.target_id))
        })
        .map(|c| c.name.clone())
        .collect();
    nearby.sort();
    named.into_iter().map(|(_, n)| n).chain(nearby).collect()
}

fn find_profile<'a>(profiles: &'a [CharacterProfile], name: &str) -> Option<&'a CharacterProfile> {
    profiles.iter().find(|p| p.name.eq_ignore_ascii_case(name))
}

/// The containment chain of the first active character that has one,
/// rendered as `Name (type; key: value) within Name (...)`.
fn describe_location(graph: &SceneGraph, active: &[String]) -> String {
    for name in active {
        let Some(node) = graph.find_by_name(name).into_iter().next() else {
            continue;
        };
        let chain = resolve_location(graph, &node.id, true).unwrap_or_default();
        if chain.is_empty() {
            continue;
        }
        return chain
            .iter()
            .filter_map(|id| graph.node(id))
            .map(|n| {
                let attrs: Vec<String> = n
                    .attributes
                    .iter()
                    .filter(|(k, _)| k.as_str() != crate::graph::CURRENT_LOCATION_ATTR)
                    .map(|(k, v)| format!("{k}: {v}"))
                    .collect();
                if attrs.is_empty() {
                    format!("{} ({})", n.name, n.node_type)
                } else {
                    format!("{} ({}; {})", n.name, n.node_type, attrs.join("; "))
                }
            })
            .collect::<Vec<_>>()
            .join(" within ");
    }
    graph
        .nodes()
        .find(|n| n.node_type == NodeType::Location)
        .map(|n| n.name.clone())
        .unwrap_or_default()
}

/// Request text for the image-prompt synthesis call.
pub fn image_prompt_request(
    scene_text: &str,
    graph: &SceneGraph,
    profiles: &[&CharacterProfile],
    active: &[String],
    style: &StylePreference,
    visual_cues: &[String],
) -> String {
    let characters: Vec<String> = profiles
        .iter()
        .map(|p| {
            format!(
                "- {} | {} | {} | features: {}",
                p.name,
                p.appearance_details,
                p.consistent_clothing,
                p.key_visual_features.join(", ")
            )
        })
        .collect();
    format!(
        "## SCENE TEXT\n{}\n\n## CHARACTERS\n{}\n\n## LOCATION\n{}\n\n## STYLE\n{}\n\n## MOOD\n{}\n",
        scene_text.trim(),
        characters.join("\n"),
        describe_location(graph, active),
        style.render(),
        visual_cues.join(", ")
    )
}

/// Builds the single image prompt for a scene. Whatever the backend writes,
/// every key feature of every active character and every visual cue ends
/// up in the prompt text.
pub fn compile_image_prompt(
    scene_text: &str,
    graph: &SceneGraph,
    profiles: &[CharacterProfile],
    style: &StylePreference,
    visual_cues: &[String],
    backend: &dyn TextBackend,
) -> Result<ImagePromptBundle, VisualError> {
    style.validate()?;
    let active = active_characters(scene_text, graph, profiles);
    let mut grounded = Vec::with_capacity(active.len());
    for name in &active {
        match find_profile(profiles, name) {
            Some(p) if p.is_enriched() => grounded.push(p),
            _ => return Err(VisualError::UnenrichedProfile(name.clone())),
        }
    }
    let request = image_prompt_request(scene_text, graph, &grounded, &active, style, visual_cues);
    let raw = backend.complete_text(&TextRequest::new(
        Task::ImagePrompt,
        IMAGE_PROMPT_SYSTEM,
        request,
    ))?;
    let mut prompt_text = raw.trim().to_string();
    if prompt_text.is_empty() {
        return Err(BackendError::BadResponse("image prompt is empty".into()).into());
    }
    for p in &grounded {
        let missing: Vec<&str> = p
            .key_visual_features
            .iter()
            .map(String::as_str)
            .filter(|f| !prompt_text.contains(f))
            .collect();
        if !missing.is_empty() {
            prompt_text.push_str(&format!(" {}: {}.", p.name, missing.join(", ")));
        }
    }
    let missing_cues: Vec<&str> = visual_cues
        .iter()
        .map(String::as_str)
        .filter(|c| !prompt_text.contains(c))
        .collect();
    if !missing_cues.is_empty() {
        prompt_text.push_str(&format!(" Visual mood: {}.", missing_cues.join(", ")));
    }
    Ok(ImagePromptBundle {
        prompt_text,
        active_characters: active,
        injected_cues: visual_cues.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grounding {
    pub profile: CharacterProfile,
    pub warning: Option<String>,
}

fn portrait_prompt(profile: &CharacterProfile) -> String {
    let mut p = format!(
        "Character reference sheet of {}: a full-body view and a close-up portrait. {}",
        profile.name,
        profile.description.trim()
    );
    for extra in [&profile.appearance_details, &profile.consistent_clothing] {
        if !extra.trim().is_empty() {
            p.push(' ');
            p.push_str(extra.trim());
        }
    }
    p
}

/// Anchors a character's look. Enriched profiles are returned unchanged.
/// Without a portrait one is generated from the description and style; a
/// portrait is then analyzed unless the profile's visual fields are already
/// specific. Backend failures leave the profile as it was and set
/// `warning`.
pub fn ground_character(
    profile: &CharacterProfile,
    backends: &Backends,
    style: &StylePreference,
) -> Grounding {
    if profile.is_enriched() {
        return Grounding {
            profile: profile.clone(),
            warning: None,
        };
    }
    let unchanged = |why: String| Grounding {
        profile: profile.clone(),
        warning: Some(format!("could not ground {}: {why}", profile.name)),
    };
    let mut next = profile.clone();
    let portrait = match &profile.portrait_ref {
        Some(r) => {
            if !profile.has_generic_visuals() {
                next.profile_source = ProfileSource::Enriched;
                return Grounding {
                    profile: next,
                    warning: None,
                };
            }
            r.clone()
        }
        None => match backends
            .image
            .generate_image(&portrait_prompt(profile), &style.render())
        {
            Ok(r) => r,
            Err(e) => return unchanged(e.to_string()),
        },
    };
    let description = match backends.vision.analyze_image(&portrait) {
        Ok(d) => d,
        Err(e) => return unchanged(e.to_string()),
    };
    let pick = |new: &str, old: &str| {
        if new.trim().is_empty() {
            old.to_string()
        } else {
            new.trim().to_string()
        }
    };
    next.appearance_details = pick(&description.appearance, &profile.appearance_details);
    next.consistent_clothing = pick(&description.clothing, &profile.consistent_clothing);
    let features: Vec<String> = description
        .key_features
        .iter()
        .map(|f| f.trim().to_string())
        .filter(|f| !f.is_empty())
        .collect();
    if !features.is_empty() {
        next.key_visual_features = features;
    }
    if next.appearance_details.is_empty()
        || next.consistent_clothing.is_empty()
        || next.key_visual_features.is_empty()
    {
        return unchanged("the vision analysis left a visual field empty".into());
    }
    next.portrait_ref = Some(portrait);
    next.profile_source = ProfileSource::Enriched;
    Grounding {
        profile: next,
        warning: None,
    }
}
