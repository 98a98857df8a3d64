//! Narrative arc controller.
//!
//! Arcs are declarative stage tables. Each stage has a goal sentence, the
//! affective cues it contributes to tone mapping, optional keywords, and the
//! minimum story progress at which it begins. Progress is
//! `scenes_generated / total_scenes`; the stage for a progress value is the
//! last stage whose threshold has been reached, and the first stage also
//! covers everything below the second stage's threshold.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tone::ToneSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageDefinition {
    pub name: String,
    pub goal: String,
    pub affective_cues: Vec<ToneSpec>,
    #[serde(default)]
    pub keywords: Vec<String>,
    pub min_progress: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArcDefinition {
    pub name: String,
    pub description: String,
    pub stages: Vec<StageDefinition>,
}

#[derive(Debug, Error)]
pub enum ArcError {
    #[error("invalid arc document: {0}")]
    Parse(String),
    #[error("arc validation failed: {0}")]
    Validation(String),
    #[error("story complete: all {0} scenes have been generated")]
    StoryComplete(u32),
    #[error("unknown arc `{0}`")]
    UnknownArc(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl ArcDefinition {
    pub fn validate(&self) -> Result<(), ArcError> {
        let fail = |msg: String| Err(ArcError::Validation(msg));
        if self.name.trim().is_empty() {
            return fail("arc name is empty".into());
        }
        if self.stages.is_empty() {
            return fail(format!("arc `{}` has no stages", self.name));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut previous: Option<f64> = None;
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.name.trim().is_empty() {
                return fail(format!("stage {i} has an empty name"));
            }
            if !seen.insert(stage.name.as_str()) {
                return fail(format!("stage name `{}` appears twice", stage.name));
            }
            if !(0.0..=1.0).contains(&stage.min_progress) {
                return fail(format!(
                    "stage `{}` min_progress {} is outside [0, 1]",
                    stage.name, stage.min_progress
                ));
            }
            if let Some(prev) = previous {
                if stage.min_progress <= prev {
                    return fail(format!(
                        "stage `{}` min_progress {} does not increase past {prev}",
                        stage.name, stage.min_progress
                    ));
                }
            }
            previous = Some(stage.min_progress);
        }
        Ok(())
    }

    pub fn stage_index(&self, name: &str) -> Option<usize> {
        self.stages.iter().position(|s| s.name == name)
    }
}

/// Parses and validates an arc document.
pub fn load_arc(document: &str) -> Result<ArcDefinition, ArcError> {
    let arc: ArcDefinition =
        serde_json::from_str(document).map_err(|e| ArcError::Parse(e.to_string()))?;
    arc.validate()?;
    Ok(arc)
}

pub fn encode_arc(arc: &ArcDefinition) -> String {
    serde_json::to_string_pretty(arc).expect("arc serializes")
}

/// Index of the last stage whose threshold is at most `progress`, or 0 when
/// `progress` is below every threshold. Out-of-range input is clamped.
pub fn stage_index_for_progress(arc: &ArcDefinition, progress: f64) -> usize {
    let p = if progress.is_nan() {
        0.0
    } else {
        progress.clamp(0.0, 1.0)
    };
    arc.stages
        .iter()
        .rposition(|s| s.min_progress <= p)
        .unwrap_or(0)
}

pub fn stage_for_progress(arc: &ArcDefinition, progress: f64) -> &StageDefinition {
    &arc.stages[stage_index_for_progress(arc, progress)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArcState {
    pub arc: ArcDefinition,
    pub total_scenes: u32,
    pub scenes_generated: u32,
}

impl ArcState {
    pub fn new(
        arc: ArcDefinition,
        total_scenes: u32,
        scenes_generated: u32,
    ) -> Result<Self, ArcError> {
        if total_scenes == 0 {
            return Err(ArcError::Validation(
                "total_scenes must be at least 1".into(),
            ));
        }
        if scenes_generated > total_scenes {
            return Err(ArcError::Validation(format!(
                "scenes_generated {scenes_generated} exceeds total_scenes {total_scenes}"
            )));
        }
        Ok(Self {
            arc,
            total_scenes,
            scenes_generated,
        })
    }

    pub fn progress(&self) -> f64 {
        f64::from(self.scenes_generated) / f64::from(self.total_scenes)
    }

    pub fn is_complete(&self) -> bool {
        self.scenes_generated >= self.total_scenes
    }
}

/// Chooses the current stage. Only ratio progression ships; event-triggered
/// or narrator-assessed progression would plug in here.
pub trait StageStrategy {
    fn stage_index(&self, state: &ArcState) -> usize;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RatioProgression;

impl StageStrategy for RatioProgression {
    fn stage_index(&self, state: &ArcState) -> usize {
        stage_index_for_progress(&state.arc, state.progress())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArcDirective {
    pub arc_name: String,
    pub stage_name: String,
    pub goal: String,
    pub keywords: Vec<String>,
    pub arc_cues: Vec<ToneSpec>,
}

impl ArcDirective {
    fn from_stage(arc: &ArcDefinition, stage: &StageDefinition) -> Self {
        Self {
            arc_name: arc.name.clone(),
            stage_name: stage.name.clone(),
            goal: stage.goal.clone(),
            keywords: stage.keywords.clone(),
            arc_cues: stage.affective_cues.clone(),
        }
    }
}

pub fn directive_for_scene(state: &ArcState) -> Result<ArcDirective, ArcError> {
    directive_with_strategy(state, &RatioProgression)
}

pub fn directive_with_strategy(
    state: &ArcState,
    strategy: &dyn StageStrategy,
) -> Result<ArcDirective, ArcError> {
    if state.is_complete() {
        return Err(ArcError::StoryComplete(state.total_scenes));
    }
    let stage = &state.arc.stages[strategy.stage_index(state)];
    Ok(ArcDirective::from_stage(&state.arc, stage))
}

const BUILTIN_ARCS: [&str; 6] = [
    include_str!("../assets/arcs/classic.json"),
    include_str!("../assets/arcs/tragedy.json"),
    include_str!("../assets/arcs/heros_journey.json"),
    include_str!("../assets/arcs/rags_to_riches.json"),
    include_str!("../assets/arcs/quest.json"),
    include_str!("../assets/arcs/character_arc.json"),
];

/// Arcs keyed by case-insensitive name.
#[derive(Debug, Clone, Default)]
pub struct ArcLibrary {
    arcs: BTreeMap<String, ArcDefinition>,
}

impl ArcLibrary {
    pub fn builtin() -> Self {
        let mut lib = Self::default();
        for doc in BUILTIN_ARCS {
            lib.insert(load_arc(doc).expect("bundled arc is valid"));
        }
        lib
    }

    pub fn classic() -> ArcDefinition {
        load_arc(BUILTIN_ARCS[0]).expect("bundled arc is valid")
    }

    pub fn insert(&mut self, arc: ArcDefinition) {
        self.arcs.insert(arc.name.to_lowercase(), arc);
    }

    pub fn get(&self, name: &str) -> Result<&ArcDefinition, ArcError> {
        self.arcs
            .get(&name.trim().to_lowercase())
            .ok_or_else(|| ArcError::UnknownArc(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.arcs.values().map(|a| a.name.as_str()).collect()
    }

    /// Adds every `*.json` arc in `dir`, replacing built-ins of the same name.
    pub fn load_dir(&mut self, dir: &Path) -> Result<usize, ArcError> {
        let io = |source| ArcError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for path in &paths {
            let text = std::fs::read_to_string(path).map_err(|source| ArcError::Io {
                path: path.display().to_string(),
                source,
            })?;
            self.insert(load_arc(&text)?);
        }
        Ok(paths.len())
    }
}
