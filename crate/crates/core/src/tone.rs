//! Affective tone mapping.
//!
//! A knowledge base maps tone names to modifiers and cue lists graded by
//! intensity. [`modulate`] folds the arc stage's cues into the user's tones,
//! and [`map_tones`] turns the resulting tones into a narrator directive plus
//! soundscape and visual cue lists.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Intensity {
    #[serde(alias = "low", alias = "LOW")]
    Low,
    #[serde(alias = "medium", alias = "MEDIUM")]
    Medium,
    #[serde(alias = "high", alias = "HIGH")]
    High,
}

impl Intensity {
    pub const ALL: [Intensity; 3] = [Intensity::Low, Intensity::Medium, Intensity::High];

    /// One level lower; `Low` stays `Low`.
    pub fn step_down(self) -> Self {
        match self {
            Intensity::High => Intensity::Medium,
            Intensity::Medium | Intensity::Low => Intensity::Low,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Intensity::Low => "Low",
            Intensity::Medium => "Medium",
            Intensity::High => "High",
        }
    }
}

impl fmt::Display for Intensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToneSpec {
    pub tone: String,
    pub intensity: Intensity,
}

impl ToneSpec {
    pub fn new(tone: impl Into<String>, intensity: Intensity) -> Self {
        Self {
            tone: tone.into(),
            intensity,
        }
    }
}

impl fmt::Display for ToneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.tone, self.intensity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Valence {
    Positive,
    Negative,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityCues {
    pub llm_keywords: Vec<String>,
    pub sound_keywords: Vec<String>,
    pub visual_keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensitySpecifics {
    #[serde(rename = "Low")]
    pub low: IntensityCues,
    #[serde(rename = "Medium")]
    pub medium: IntensityCues,
    #[serde(rename = "High")]
    pub high: IntensityCues,
}

impl IntensitySpecifics {
    pub fn get(&self, intensity: Intensity) -> &IntensityCues {
        match intensity {
            Intensity::Low => &self.low,
            Intensity::Medium => &self.medium,
            Intensity::High => &self.high,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToneEntry {
    pub name: String,
    pub description: String,
    pub valence: Valence,
    pub llm_modifiers: Vec<String>,
    pub general_sound_cues: Vec<String>,
    pub general_visual_cues: Vec<String>,
    pub intensity_specifics: IntensitySpecifics,
}

impl ToneEntry {
    pub fn validate(&self) -> Result<(), ToneError> {
        let bad = |why: String| Err(ToneError::Invalid(self.name.clone(), why));
        if self.name.trim().is_empty() {
            return bad("tone name is empty".into());
        }
        for level in Intensity::ALL {
            let cues = self.intensity_specifics.get(level);
            for (field, list) in [
                ("llm_keywords", &cues.llm_keywords),
                ("sound_keywords", &cues.sound_keywords),
                ("visual_keywords", &cues.visual_keywords),
            ] {
                if list.is_empty() || list.iter().any(|k| k.trim().is_empty()) {
                    return bad(format!(
                        "{level} {field} must be a nonempty list of nonempty strings"
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ToneError {
    #[error("unknown tone `{0}`")]
    UnknownTone(String),
    #[error("tone `{0}` is invalid: {1}")]
    Invalid(String, String),
    #[error("invalid tone document: {0}")]
    Parse(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub fn load_tone(document: &str) -> Result<ToneEntry, ToneError> {
    let entry: ToneEntry =
        serde_json::from_str(document).map_err(|e| ToneError::Parse(e.to_string()))?;
    entry.validate()?;
    Ok(entry)
}

const BUILTIN_TONES: [&str; 11] = [
    include_str!("../assets/tones/mystery.json"),
    include_str!("../assets/tones/hope.json"),
    include_str!("../assets/tones/suspense.json"),
    include_str!("../assets/tones/tension.json"),
    include_str!("../assets/tones/fear.json"),
    include_str!("../assets/tones/sadness.json"),
    include_str!("../assets/tones/peacefulness.json"),
    include_str!("../assets/tones/curiosity.json"),
    include_str!("../assets/tones/joy.json"),
    include_str!("../assets/tones/despair.json"),
    include_str!("../assets/tones/loneliness.json"),
];

/// Tone entries keyed by case-insensitive name.
#[derive(Debug, Clone, Default)]
pub struct ToneKnowledgeBase {
    tones: BTreeMap<String, ToneEntry>,
}

impl ToneKnowledgeBase {
    pub fn builtin() -> Self {
        let mut kb = Self::default();
        for doc in BUILTIN_TONES {
            kb.insert(load_tone(doc).expect("bundled tone is valid"));
        }
        kb
    }

    pub fn insert(&mut self, entry: ToneEntry) {
        self.tones.insert(entry.name.to_lowercase(), entry);
    }

    pub fn get(&self, name: &str) -> Result<&ToneEntry, ToneError> {
        self.tones
            .get(&name.trim().to_lowercase())
            .ok_or_else(|| ToneError::UnknownTone(name.to_string()))
    }

    pub fn entries(&self) -> impl Iterator<Item = &ToneEntry> {
        self.tones.values()
    }

    pub fn len(&self) -> usize {
        self.tones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tones.is_empty()
    }

    /// Adds every `*.json` tone file in `dir` (the `tones/` layout).
    pub fn load_dir(&mut self, dir: &Path) -> Result<usize, ToneError> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|source| ToneError::Io {
                path: dir.display().to_string(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for path in &paths {
            let text = std::fs::read_to_string(path).map_err(|source| ToneError::Io {
                path: path.display().to_string(),
                source,
            })?;
            self.insert(load_tone(&text)?);
        }
        Ok(paths.len())
    }

    pub fn check_all(&self, tones: &[ToneSpec]) -> Result<(), ToneError> {
        tones.iter().try_for_each(|t| self.get(&t.tone).map(|_| ()))
    }
}

/// Folds the arc stage's cues into the user's tones.
///
/// With `nac_influence` off the user's tones come back unchanged. With it on:
/// if any arc cue is a negative tone at `High`, every positive user tone
/// drops one intensity level (once, however many such cues there are); then
/// arc cues are appended, except that a cue naming a tone the user already
/// chose only lowers that tone's intensity to the cue's, never raises it.
/// Tone names in the output use the knowledge base's spelling.
pub fn modulate(
    user_tones: &[ToneSpec],
    arc_cues: &[ToneSpec],
    nac_influence: bool,
    kb: &ToneKnowledgeBase,
) -> Result<Vec<ToneSpec>, ToneError> {
    kb.check_all(user_tones)?;
    if !nac_influence {
        return Ok(user_tones.to_vec());
    }
    kb.check_all(arc_cues)?;

    let dominant_negative = arc_cues.iter().any(|cue| {
        cue.intensity == Intensity::High
            && kb.get(&cue.tone).map(|e| e.valence).ok() == Some(Valence::Negative)
    });

    let mut out: Vec<ToneSpec> = user_tones
        .iter()
        .map(|t| {
            let entry = kb.get(&t.tone).expect("checked");
            let intensity = if dominant_negative && entry.valence == Valence::Positive {
                t.intensity.step_down()
            } else {
                t.intensity
            };
            ToneSpec::new(entry.name.clone(), intensity)
        })
        .collect();
    let user_count = out.len();

    for cue in arc_cues {
        let name = &kb.get(&cue.tone).expect("checked").name;
        match out.iter().position(|t| &t.tone == name) {
            Some(i) if i < user_count => {
                out[i].intensity = out[i].intensity.min(cue.intensity);
            }
            Some(_) => {}
            None => out.push(ToneSpec::new(name.clone(), cue.intensity)),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct AffectiveDirective {
    pub narrator_directive: String,
    pub soundscape_cues: Vec<String>,
    pub visual_cues: Vec<String>,
    pub effective_tones: Vec<ToneSpec>,
}

pub const NEUTRAL_DIRECTIVE: &str =
    "No specific affective tone is requested; keep the emotional register neutral.";

fn push_unique(list: &mut Vec<String>, items: &[String]) {
    for item in items {
        if !list.contains(item) {
            list.push(item.clone());
        }
    }
}

/// Looks up each tone and assembles the directive and cue lists, in input
/// tone order. Cue lists are duplicate-free unions of each tone's general
/// cues followed by its intensity keywords.
pub fn map_tones(
    effective: &[ToneSpec],
    kb: &ToneKnowledgeBase,
) -> Result<AffectiveDirective, ToneError> {
    let mut lines = Vec::with_capacity(effective.len());
    let mut soundscape_cues = Vec::new();
    let mut visual_cues = Vec::new();
    for spec in effective {
        let entry = kb.get(&spec.tone)?;
        let cues = entry.intensity_specifics.get(spec.intensity);
        lines.push(format!(
            "{} ({} intensity): {} Keywords: {}.",
            entry.name,
            spec.intensity,
            entry.llm_modifiers.join(" "),
            cues.llm_keywords.join(", ")
        ));
        push_unique(&mut soundscape_cues, &entry.general_sound_cues);
        push_unique(&mut soundscape_cues, &cues.sound_keywords);
        push_unique(&mut visual_cues, &entry.general_visual_cues);
        push_unique(&mut visual_cues, &cues.visual_keywords);
    }
    let narrator_directive = if lines.is_empty() {
        NEUTRAL_DIRECTIVE.to_string()
    } else {
        lines.join("\n")
    };
    Ok(AffectiveDirective {
        narrator_directive,
        soundscape_cues,
        visual_cues,
        effective_tones: effective.to_vec(),
    })
}

/// [`modulate`] followed by [`map_tones`], with a note in the directive for
/// every user tone whose intensity the arc lowered.
pub fn plan_affect(
    user_tones: &[ToneSpec],
    arc_cues: &[ToneSpec],
    nac_influence: bool,
    kb: &ToneKnowledgeBase,
) -> Result<AffectiveDirective, ToneError> {
    let effective = modulate(user_tones, arc_cues, nac_influence, kb)?;
    let mut directive = map_tones(&effective, kb)?;
    let notes: Vec<String> = user_tones
        .iter()
        .zip(&effective)
        .filter(|(before, after)| before.intensity != after.intensity)
        .map(|(before, after)| {
            format!(
                "{} is tempered from {} to {} by the current story stage.",
                after.tone, before.intensity, after.intensity
            )
        })
        .collect();
    if !notes.is_empty() {
        directive.narrator_directive.push('\n');
        directive.narrator_directive.push_str(&notes.join("\n"));
    }
    Ok(directive)
}
