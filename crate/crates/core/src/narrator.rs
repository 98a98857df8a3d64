//! The co-generation loop.
//!
//! One scene runs: arc directive, tone modulation and mapping, prompt
//! assembly, narration, Director extraction (with bounded repair), image
//! prompt compilation, image generation, and a summary update. The cascade
//! baseline writes the whole story in one call and derives scenes from it
//! without a scene graph or affective guidance.

use std::sync::Arc;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arc::{
    directive_for_scene, ArcDefinition, ArcDirective, ArcError, ArcLibrary, ArcState,
};
use crate::backends::{
    extract_fenced, BackendError, Backends, ImageRef, Task, TextBackend, TextRequest,
};
use crate::director::{direct_scene_with_budget, DirectorError, RepairBudget};
use crate::graph::{
    apply_mutations, check_consistency, ConsistencyViolation, GraphMutation, NodeType, SceneGraph,
};
use crate::project::{StoryMode, StoryProject};
use crate::prompts::{BASELINE_SYSTEM, NARRATOR_SYSTEM, SUMMARY_SYSTEM, TWIST_SYSTEM};
use crate::tone::{
    map_tones, plan_affect, AffectiveDirective, ToneError, ToneKnowledgeBase, ToneSpec,
};
use crate::visual::{
    compile_image_prompt, ground_character, CharacterProfile, StylePreference, VisualError,
};

pub const DEFAULT_SUMMARY_CAP: usize = 1200;

fn default_summary_cap() -> usize {
    DEFAULT_SUMMARY_CAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoryConfig {
    pub premise: String,
    #[serde(default)]
    pub character_profiles: Vec<CharacterProfile>,
    #[serde(default)]
    pub setting: String,
    pub style: StylePreference,
    pub arc_name: String,
    #[serde(default)]
    pub user_tones: Vec<ToneSpec>,
    #[serde(default)]
    pub nac_influence: bool,
    pub total_scenes: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_summary_cap")]
    pub summary_cap: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_graph: Option<SceneGraph>,
}

impl StoryConfig {
    /// Checks the config against the loaded arcs and tones. Returns
    /// non-fatal warnings.
    pub fn validate(&self, engine: &Engine) -> Result<Vec<String>, NarratorError> {
        let invalid = |m: String| Err(NarratorError::InvalidConfig(m));
        if self.total_scenes == 0 {
            return invalid("total_scenes must be at least 1".into());
        }
        if self.summary_cap == 0 {
            return invalid("summary_cap must be positive".into());
        }
        self.style
            .validate()
            .map_err(|e| NarratorError::InvalidConfig(e.to_string()))?;
        let arc = engine.arcs.get(&self.arc_name)?;
        engine.tones.check_all(&self.user_tones)?;
        let mut names = std::collections::BTreeSet::new();
        for p in &self.character_profiles {
            if p.name.trim().is_empty() {
                return invalid("a character profile has an empty name".into());
            }
            if !names.insert(p.name.to_lowercase()) {
                return invalid(format!("character `{}` is listed twice", p.name));
            }
        }
        if let Some(g) = &self.initial_graph {
            let violations = check_consistency(g);
            if !violations.is_empty() {
                return Err(NarratorError::GraphRejected(violations));
            }
        }
        let mut warnings = Vec::new();
        if (self.total_scenes as usize) < arc.stages.len() {
            warnings.push(format!(
                "total_scenes {} is below the {} stages of `{}`; some stages will be skipped",
                self.total_scenes,
                arc.stages.len(),
                arc.name
            ));
        }
        Ok(warnings)
    }
}

/// Loaded knowledge: arcs and the tone knowledge base.
#[derive(Debug, Clone)]
pub struct Engine {
    pub arcs: ArcLibrary,
    pub tones: ToneKnowledgeBase,
}

impl Engine {
    pub fn builtin() -> Self {
        Self {
            arcs: ArcLibrary::builtin(),
            tones: ToneKnowledgeBase::builtin(),
        }
    }
}

impl Default for Engine {
    fn default() -> Self {
        Self::builtin()
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Always returns the same instant; used for reproducible project files.
#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub DateTime<Utc>);

impl FixedClock {
    pub fn epoch() -> Self {
        Self(Utc.timestamp_opt(0, 0).single().expect("valid timestamp"))
    }
}

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub index: u32,
    pub stage_name: String,
    /// Absent for cascade-baseline scenes.
    pub directive: Option<ArcDirective>,
    pub effective_tones: Vec<ToneSpec>,
    pub narrative_text: String,
    pub soundscape_cues: Vec<String>,
    /// Cues the Narrator proposed on its own, kept so cues can be
    /// recomputed after an edit.
    #[serde(default)]
    pub narrator_sound_cues: Vec<String>,
    #[serde(default)]
    pub visual_cues: Vec<String>,
    pub graph_snapshot: SceneGraph,
    pub image_prompt: String,
    #[serde(default)]
    pub active_characters: Vec<String>,
    pub image_ref: Option<ImageRef>,
    pub twist_applied: Option<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorySummary {
    pub text: String,
    pub cap: usize,
}

impl StorySummary {
    pub fn new(cap: usize) -> Self {
        Self {
            text: String::new(),
            cap,
        }
    }
}

/// Shortens `text` to at most `cap` characters: whole leading
/// `[Scene N]` entries are dropped first, then the remainder is cut.
pub fn fit_summary(text: &str, cap: usize) -> String {
    let text = text.trim();
    if text.chars().count() <= cap {
        return text.to_string();
    }
    let mut starts: Vec<usize> = text.match_indices("[Scene ").map(|(i, _)| i).collect();
    if starts.first() != Some(&0) {
        starts.insert(0, 0);
    }
    let mut rest = text;
    for &s in &starts[1..] {
        rest = text[s..].trim();
        if rest.chars().count() <= cap {
            return rest.to_string();
        }
    }
    rest.chars()
        .take(cap)
        .collect::<String>()
        .trim_end()
        .to_string()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UserInputs {
    pub premise: String,
    pub setting: String,
    pub style: String,
    /// `(name, description)` pairs.
    pub characters: Vec<(String, String)>,
}

impl UserInputs {
    pub fn from_config(config: &StoryConfig, profiles: &[CharacterProfile]) -> Self {
        Self {
            premise: config.premise.trim().to_string(),
            setting: config.setting.trim().to_string(),
            style: config.style.render(),
            characters: profiles
                .iter()
                .map(|p| (p.name.clone(), p.description.trim().to_string()))
                .collect(),
        }
    }

    fn render(&self) -> String {
        let mut lines = Vec::new();
        for (key, value) in [
            ("Premise", &self.premise),
            ("Setting", &self.setting),
            ("Style", &self.style),
        ] {
            if !value.is_empty() {
                lines.push(format!("{key}: {value}"));
            }
        }
        if !self.characters.is_empty() {
            lines.push("Characters:".into());
            for (name, description) in &self.characters {
                lines.push(format!("- {name}: {description}"));
            }
        }
        lines.join("\n")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub user_inputs: UserInputs,
    pub summary: String,
    pub arc_directive: ArcDirective,
    pub affective: AffectiveDirective,
    pub graph_digest: String,
    pub twist: Option<String>,
    pub correction: Option<String>,
}

fn arc_section(d: &ArcDirective) -> String {
    let mut lines = Vec::new();
    for (key, value) in [
        ("Arc", &d.arc_name),
        ("Stage", &d.stage_name),
        ("Goal", &d.goal),
    ] {
        if !value.is_empty() {
            lines.push(format!("{key}: {value}"));
        }
    }
    if !d.keywords.is_empty() {
        lines.push(format!("Keywords: {}", d.keywords.join(", ")));
    }
    lines.join("\n")
}

fn affective_section(a: &AffectiveDirective) -> String {
    let mut lines = Vec::new();
    if !a.narrator_directive.is_empty() {
        lines.push(a.narrator_directive.clone());
    }
    if !a.soundscape_cues.is_empty() {
        lines.push(format!("Soundscape cues: {}", a.soundscape_cues.join("; ")));
    }
    if !a.visual_cues.is_empty() {
        lines.push(format!("Visual cues: {}", a.visual_cues.join("; ")));
    }
    lines.join("\n")
}

fn render_sections(sections: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (name, body) in sections {
        out.push_str("## ");
        out.push_str(name);
        out.push('\n');
        if !body.is_empty() {
            out.push_str(body);
            out.push('\n');
        }
        out.push('\n');
    }
    out.truncate(out.trim_end().len());
    out.push('\n');
    out
}

/// The Narrator prompt: USER INPUTS, STORY SO FAR, NARRATIVE ARC, AFFECTIVE
/// GUIDANCE and SCENE GRAPH, in that order, then TWIST and CORRECTION when
/// present.
pub fn assemble_prompt(ctx: &PromptContext) -> String {
    let mut sections = vec![
        ("USER INPUTS", ctx.user_inputs.render()),
        ("STORY SO FAR", ctx.summary.trim().to_string()),
        ("NARRATIVE ARC", arc_section(&ctx.arc_directive)),
        ("AFFECTIVE GUIDANCE", affective_section(&ctx.affective)),
        ("SCENE GRAPH", ctx.graph_digest.clone()),
    ];
    if let Some(t) = &ctx.twist {
        sections.push(("TWIST", t.trim().to_string()));
    }
    if let Some(c) = &ctx.correction {
        sections.push(("CORRECTION", c.trim().to_string()));
    }
    render_sections(&sections)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NarratorPayload {
    pub narrative_text: String,
    #[serde(default)]
    pub soundscape_cues: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PayloadError {
    #[error("response contains no fenced JSON document")]
    Missing,
    #[error("invalid narrator payload: {0}")]
    Invalid(String),
}

pub fn parse_narrator_payload(raw: &str) -> Result<NarratorPayload, PayloadError> {
    let (_, body) = extract_fenced(raw).ok_or(PayloadError::Missing)?;
    let mut payload: NarratorPayload =
        serde_json::from_str(body).map_err(|e| PayloadError::Invalid(e.to_string()))?;
    payload.narrative_text = payload.narrative_text.trim().to_string();
    if payload.narrative_text.is_empty() {
        return Err(PayloadError::Invalid("narrative_text is empty".into()));
    }
    payload.soundscape_cues = payload
        .soundscape_cues
        .into_iter()
        .map(|c| c.trim().to_string())
        .filter(|c| !c.is_empty())
        .collect();
    Ok(payload)
}

#[derive(Debug, Error)]
pub enum NarratorError {
    #[error(transparent)]
    Arc(#[from] ArcError),
    #[error(transparent)]
    Tone(#[from] ToneError),
    #[error("scene {scene}: {source}")]
    Backend { scene: u32, source: BackendError },
    #[error("scene {scene}: {source}")]
    Visual { scene: u32, source: VisualError },
    #[error("invalid story config: {0}")]
    InvalidConfig(String),
    #[error("no scenes have been generated yet")]
    NoScenes,
    #[error("twist count must be at least 1")]
    InvalidTwistCount,
    #[error("twist text is empty")]
    EmptyTwist,
    #[error("scene {0} does not exist")]
    SceneOutOfRange(u32),
    #[error("graph rejected with {} violation(s)", .0.len())]
    GraphRejected(Vec<ConsistencyViolation>),
    #[error("bad twist response: {0}")]
    BadTwists(String),
}

impl NarratorError {
    fn backend(scene: u32) -> impl FnOnce(BackendError) -> Self {
        move |source| NarratorError::Backend { scene, source }
    }

    fn visual(scene: u32) -> impl FnOnce(VisualError) -> Self {
        move |source| match source {
            VisualError::Backend(source) => NarratorError::Backend { scene, source },
            source => NarratorError::Visual { scene, source },
        }
    }
}

/// A live story: the project state plus the knowledge and backends needed
/// to extend it. Scenes are generated strictly one after another.
pub struct StorySession {
    pub project: StoryProject,
    pub arc: ArcDefinition,
    pub tones: ToneKnowledgeBase,
    pub backends: Backends,
    clock: Arc<dyn Clock>,
    initial_graph: SceneGraph,
}

impl std::fmt::Debug for StorySession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StorySession")
            .field("scenes", &self.project.scenes.len())
            .field("arc", &self.arc.name)
            .finish()
    }
}

/// The graph a story starts from: the configured initial graph plus a node
/// for every profiled character.
pub fn seed_graph(config: &StoryConfig) -> Result<SceneGraph, NarratorError> {
    let base = config.initial_graph.clone().unwrap_or_default();
    let batch: Vec<GraphMutation> = config
        .character_profiles
        .iter()
        .filter(|p| base.find_by_name(&p.name).is_empty())
        .map(|p| GraphMutation::add_node(p.name.trim(), NodeType::Character))
        .collect();
    apply_mutations(&base, &batch)
        .map(|(g, _)| g)
        .map_err(|e| NarratorError::GraphRejected(e.violations()))
}

impl StorySession {
    pub fn new(
        config: StoryConfig,
        engine: &Engine,
        backends: Backends,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, NarratorError> {
        for w in config.validate(engine)? {
            log::warn!("{w}");
        }
        let now = clock.now();
        let project = StoryProject::new(config, StoryMode::Integrated, now);
        Self::resume(project, engine, backends, clock)
    }

    /// Reattaches a loaded project to knowledge and backends.
    pub fn resume(
        project: StoryProject,
        engine: &Engine,
        backends: Backends,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, NarratorError> {
        let arc = engine.arcs.get(&project.config.arc_name)?.clone();
        let initial_graph = seed_graph(&project.config)?;
        Ok(Self {
            project,
            arc,
            tones: engine.tones.clone(),
            backends,
            clock,
            initial_graph,
        })
    }

    pub fn config(&self) -> &StoryConfig {
        &self.project.config
    }

    pub fn scenes(&self) -> &[SceneRecord] {
        &self.project.scenes
    }

    /// World state after the latest scene.
    pub fn graph(&self) -> &SceneGraph {
        self.project
            .scenes
            .last()
            .map_or(&self.initial_graph, |s| &s.graph_snapshot)
    }

    /// World state before scene `index` (1-based) was generated.
    pub fn graph_before(&self, index: u32) -> &SceneGraph {
        if index <= 1 {
            &self.initial_graph
        } else {
            &self.project.scenes[index as usize - 2].graph_snapshot
        }
    }

    pub fn arc_state(&self) -> Result<ArcState, NarratorError> {
        Ok(ArcState::new(
            self.arc.clone(),
            self.project.config.total_scenes,
            self.project.scenes.len() as u32,
        )?)
    }

    pub fn is_complete(&self) -> bool {
        self.project.scenes.len() as u32 >= self.project.config.total_scenes
    }

    pub fn summary(&self) -> StorySummary {
        StorySummary {
            text: self.project.summary.clone(),
            cap: self.project.config.summary_cap,
        }
    }

    fn touch(&mut self) {
        self.project.modified_at = self.clock.now();
    }

    /// Adds generated profiles for characters the graph knows but the story
    /// has no profile for, then grounds every ungrounded profile.
    fn ensure_profiles(&mut self, graph: &SceneGraph, scene: u32, warnings: &mut Vec<String>) {
        for node in graph.characters() {
            let known = self
                .project
                .profiles
                .iter()
                .any(|p| p.name.eq_ignore_ascii_case(&node.name));
            if !known {
                let description = node
                    .attributes
                    .get("description")
                    .cloned()
                    .unwrap_or_else(|| format!("{} first appears in scene {scene}.", node.name));
                self.project
                    .profiles
                    .push(CharacterProfile::generated(node.name.clone(), description));
            }
        }
        let style = self.project.config.style.clone();
        for i in 0..self.project.profiles.len() {
            if self.project.profiles[i].is_enriched() {
                continue;
            }
            let g = ground_character(&self.project.profiles[i], &self.backends, &style);
            if let Some(w) = g.warning {
                warnings.push(w);
            }
            self.project.profiles[i] = g.profile;
        }
    }

    /// Records a twist for the next scene.
    pub fn select_twist(&mut self, twist: &str) -> Result<(), NarratorError> {
        let twist = twist.trim();
        if twist.is_empty() {
            return Err(NarratorError::EmptyTwist);
        }
        self.project.pending_twist = Some(twist.to_string());
        self.touch();
        Ok(())
    }

    /// Replaces the user's tones (and optionally the arc-influence flag)
    /// for subsequent scenes.
    pub fn set_tones(
        &mut self,
        tones: Vec<ToneSpec>,
        nac_influence: Option<bool>,
    ) -> Result<(), NarratorError> {
        self.tones.check_all(&tones)?;
        self.project.config.user_tones = tones;
        if let Some(flag) = nac_influence {
            self.project.config.nac_influence = flag;
        }
        self.touch();
        Ok(())
    }
}

fn merge_cues(base: &[String], extra: &[String]) -> Vec<String> {
    let mut out = base.to_vec();
    for c in extra {
        if !out.contains(c) {
            out.push(c.clone());
        }
    }
    out
}

/// Generates the next scene and appends it to the session.
pub fn generate_scene(session: &mut StorySession) -> Result<SceneRecord, NarratorError> {
    let index = session.project.scenes.len() as u32 + 1;
    let directive = directive_for_scene(&session.arc_state()?)?;
    let config = session.project.config.clone();
    let affective = plan_affect(
        &config.user_tones,
        &directive.arc_cues,
        config.nac_influence,
        &session.tones,
    )?;
    let graph = session.graph().clone();
    let mut warnings = Vec::new();
    session.ensure_profiles(&graph, index, &mut warnings);

    let twist = session.project.pending_twist.clone();
    let mut ctx = PromptContext {
        user_inputs: UserInputs::from_config(&config, &session.project.profiles),
        summary: session.project.summary.clone(),
        arc_directive: directive.clone(),
        affective: affective.clone(),
        graph_digest: graph.digest(),
        twist: twist.clone(),
        correction: None,
    };
    let text_backend = session.backends.text.clone();
    let mut budget = RepairBudget::default();
    let (payload, next_graph) = loop {
        let prompt = assemble_prompt(&ctx);
        let raw = text_backend
            .complete_text(&TextRequest::new(
                Task::NarrateScene,
                NARRATOR_SYSTEM,
                prompt,
            ))
            .map_err(NarratorError::backend(index))?;
        let payload = match parse_narrator_payload(&raw) {
            Ok(p) => p,
            Err(e) if budget.spend() => {
                ctx.correction = Some(format!(
                    "Your previous reply could not be used ({e}). Write the scene again and end with the fenced JSON document."
                ));
                continue;
            }
            Err(e) => {
                warnings.push(format!(
                    "narrator payload unusable after repairs ({e}); using the raw reply"
                ));
                NarratorPayload {
                    narrative_text: raw.trim().to_string(),
                    soundscape_cues: Vec::new(),
                }
            }
        };
        match direct_scene_with_budget(
            &payload.narrative_text,
            &graph,
            text_backend.as_ref(),
            index,
            &mut budget,
        ) {
            Ok(res) => match res.correction {
                None => break (payload, res.graph),
                Some(c) if budget.spend() => {
                    log::info!("scene {index}: asking the narrator for a revision");
                    ctx.correction = Some(c.corrective_prompt);
                }
                Some(c) => {
                    warnings.push(format!(
                        "graph updates dropped after {} repair(s): {}",
                        budget.used(),
                        c.violations
                            .iter()
                            .map(|v| v.to_string())
                            .collect::<Vec<_>>()
                            .join("; ")
                    ));
                    break (payload, graph.clone());
                }
            },
            Err(DirectorError::Backend(source)) => {
                return Err(NarratorError::Backend {
                    scene: index,
                    source,
                })
            }
            Err(e) => {
                warnings.push(format!("graph updates dropped: {e}"));
                break (payload, graph.clone());
            }
        }
    };

    session.ensure_profiles(&next_graph, index, &mut warnings);
    let bundle = compile_image_prompt(
        &payload.narrative_text,
        &next_graph,
        &session.project.profiles,
        &config.style,
        &affective.visual_cues,
        text_backend.as_ref(),
    )
    .map_err(NarratorError::visual(index))?;
    let image_ref = session
        .backends
        .image
        .generate_image(&bundle.prompt_text, &config.style.render())
        .map_err(NarratorError::backend(index))?;

    let record = SceneRecord {
        index,
        stage_name: directive.stage_name.clone(),
        effective_tones: affective.effective_tones.clone(),
        soundscape_cues: merge_cues(&affective.soundscape_cues, &payload.soundscape_cues),
        narrator_sound_cues: payload.soundscape_cues,
        visual_cues: bundle.injected_cues,
        narrative_text: payload.narrative_text,
        graph_snapshot: next_graph,
        image_prompt: bundle.prompt_text,
        active_characters: bundle.active_characters,
        image_ref: Some(image_ref),
        twist_applied: twist,
        directive: Some(directive),
        warnings,
    };
    let summary = update_summary(&session.summary(), &record, text_backend.as_ref());
    session.project.summary = summary.text;
    session.project.pending_twist = None;
    session.project.scenes.push(record.clone());
    session.touch();
    Ok(record)
}

fn append_entry(current: &str, record: &SceneRecord) -> String {
    let first = record
        .narrative_text
        .split_inclusive(". ")
        .next()
        .unwrap_or("")
        .trim();
    let entry = format!("[Scene {}] {first}", record.index);
    if current.trim().is_empty() {
        entry
    } else {
        format!("{} {entry}", current.trim())
    }
}

/// Asks the backend for an updated summary and enforces the cap. Backend
/// failures fall back to appending the scene's first sentence.
pub fn update_summary(
    summary: &StorySummary,
    record: &SceneRecord,
    backend: &dyn TextBackend,
) -> StorySummary {
    let prompt = format!(
        "## CURRENT SUMMARY\n{}\n\n## NEW SCENE\n[Scene {}] {}\n",
        summary.text.trim(),
        record.index,
        record.narrative_text.trim()
    );
    let text =
        match backend.complete_text(&TextRequest::new(Task::Summarize, SUMMARY_SYSTEM, prompt)) {
            Ok(t) if !t.trim().is_empty() => t,
            Ok(_) => append_entry(&summary.text, record),
            Err(e) => {
                log::warn!("summary update failed, appending instead: {e}");
                append_entry(&summary.text, record)
            }
        };
    StorySummary {
        text: fit_summary(&text, summary.cap),
        cap: summary.cap,
    }
}

/// Asks for `n` distinct plot twists grounded in the current story.
pub fn propose_twists(session: &StorySession, n: usize) -> Result<Vec<String>, NarratorError> {
    if n == 0 {
        return Err(NarratorError::InvalidTwistCount);
    }
    if session.project.scenes.is_empty() {
        return Err(NarratorError::NoScenes);
    }
    let scene = session.project.scenes.len() as u32;
    let prompt = format!(
        "Count: {n}\n\n## STORY SO FAR\n{}\n\n## SCENE GRAPH\n{}\n",
        session.project.summary.trim(),
        session.graph().digest()
    );
    let raw = session
        .backends
        .text
        .complete_text(&TextRequest::new(Task::PlotTwists, TWIST_SYSTEM, prompt))
        .map_err(NarratorError::backend(scene))?;
    parse_twists(&raw, n)
}

fn parse_twists(raw: &str, n: usize) -> Result<Vec<String>, NarratorError> {
    #[derive(Deserialize)]
    struct Doc {
        twists: Vec<String>,
    }
    let (_, body) =
        extract_fenced(raw).ok_or_else(|| NarratorError::BadTwists("no fenced document".into()))?;
    let doc: Doc =
        serde_json::from_str(body).map_err(|e| NarratorError::BadTwists(e.to_string()))?;
    let mut out: Vec<String> = Vec::with_capacity(n);
    for t in doc.twists {
        let t = t.trim().to_string();
        if !t.is_empty() && !out.contains(&t) {
            out.push(t);
        }
        if out.len() == n {
            return Ok(out);
        }
    }
    Err(NarratorError::BadTwists(format!(
        "asked for {n} distinct twists, got {}",
        out.len()
    )))
}

/// Injects `twist` into the next scene and generates it.
pub fn apply_twist(session: &mut StorySession, twist: &str) -> Result<SceneRecord, NarratorError> {
    session.select_twist(twist)?;
    generate_scene(session)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SceneEdit {
    Text(String),
    Graph(SceneGraph),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutcome {
    pub record: SceneRecord,
    /// Violations from re-extraction; the scene keeps the pre-scene graph
    /// when this is nonempty.
    pub violations: Vec<ConsistencyViolation>,
    pub warnings: Vec<String>,
}

/// Applies a user edit to scene `index`. A text edit re-runs extraction on
/// the new text against the graph as it was before the scene; a graph edit
/// replaces the snapshot after validation. Both regenerate the image
/// prompt. Later scenes are left as they are.
pub fn edit_scene(
    session: &mut StorySession,
    index: u32,
    edit: SceneEdit,
) -> Result<EditOutcome, NarratorError> {
    if index == 0 || index as usize > session.project.scenes.len() {
        return Err(NarratorError::SceneOutOfRange(index));
    }
    let slot = index as usize - 1;
    let mut record = session.project.scenes[slot].clone();
    let mut warnings = Vec::new();
    let mut violations = Vec::new();
    let text_backend = session.backends.text.clone();
    match edit {
        SceneEdit::Text(text) => {
            let text = text.trim().to_string();
            let before = session.graph_before(index).clone();
            let mut budget = RepairBudget::default();
            let graph = match direct_scene_with_budget(
                &text,
                &before,
                text_backend.as_ref(),
                index,
                &mut budget,
            ) {
                Ok(res) => match res.correction {
                    None => res.graph,
                    Some(c) => {
                        violations = c.violations;
                        before
                    }
                },
                Err(DirectorError::Backend(source)) => {
                    return Err(NarratorError::Backend {
                        scene: index,
                        source,
                    })
                }
                Err(e) => {
                    warnings.push(format!("graph updates dropped: {e}"));
                    before
                }
            };
            let affective = map_tones(&record.effective_tones, &session.tones)?;
            record.narrative_text = text;
            record.graph_snapshot = graph;
            record.soundscape_cues =
                merge_cues(&affective.soundscape_cues, &record.narrator_sound_cues);
            record.visual_cues = affective.visual_cues;
        }
        SceneEdit::Graph(mut graph) => {
            let found = check_consistency(&graph);
            if !found.is_empty() {
                return Err(NarratorError::GraphRejected(found));
            }
            if graph != record.graph_snapshot {
                graph.set_revision(record.graph_snapshot.revision().max(graph.revision()) + 1);
            }
            record.graph_snapshot = graph;
        }
    }
    let graph = record.graph_snapshot.clone();
    session.ensure_profiles(&graph, index, &mut warnings);
    let config = session.project.config.clone();
    let bundle = compile_image_prompt(
        &record.narrative_text,
        &record.graph_snapshot,
        &session.project.profiles,
        &config.style,
        &record.visual_cues,
        text_backend.as_ref(),
    )
    .map_err(NarratorError::visual(index))?;
    record.image_ref = Some(
        session
            .backends
            .image
            .generate_image(&bundle.prompt_text, &config.style.render())
            .map_err(NarratorError::backend(index))?,
    );
    record.image_prompt = bundle.prompt_text;
    record.active_characters = bundle.active_characters;
    record.warnings.extend(warnings.iter().cloned());
    session.project.scenes[slot] = record.clone();
    session.touch();
    Ok(EditOutcome {
        record,
        violations,
        warnings,
    })
}

/// A run that stopped early, with everything generated before the failure.
#[derive(Debug, Error)]
#[error("story run stopped after {} scene(s): {error}", .project.scenes.len())]
pub struct RunError {
    pub project: Box<StoryProject>,
    pub error: NarratorError,
}

/// Generates every remaining scene of a new story.
pub fn run_story(
    config: StoryConfig,
    engine: &Engine,
    backends: Backends,
    clock: Arc<dyn Clock>,
) -> Result<StoryProject, RunError> {
    let now = clock.now();
    let mut session = match StorySession::new(config.clone(), engine, backends, clock) {
        Ok(s) => s,
        Err(error) => {
            return Err(RunError {
                project: Box::new(StoryProject::new(config, StoryMode::Integrated, now)),
                error,
            })
        }
    };
    while !session.is_complete() {
        if let Err(error) = generate_scene(&mut session) {
            return Err(RunError {
                project: Box::new(session.project),
                error,
            });
        }
    }
    Ok(session.project)
}

/// Splits `text` into `parts` contiguous chunks at paragraph boundaries,
/// each boundary placed where the running length is nearest an equal
/// share. Paragraphs are split into sentences when there are too few.
pub fn segment_paragraphs(text: &str, parts: usize) -> Vec<String> {
    let parts = parts.max(1);
    let mut units: Vec<String> = text
        .split("\n\n")
        .map(|p| p.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|p| !p.is_empty())
        .collect();
    if units.len() < parts {
        units = units
            .iter()
            .flat_map(|p| {
                p.split_inclusive(". ")
                    .map(|s| s.trim().to_string())
                    .collect::<Vec<_>>()
            })
            .filter(|s| !s.is_empty())
            .collect();
    }
    let m = units.len();
    if m <= parts {
        let mut out = units;
        out.resize(parts, String::new());
        return out;
    }
    let mut cumulative = vec![0usize; m + 1];
    for (i, u) in units.iter().enumerate() {
        cumulative[i + 1] = cumulative[i] + u.chars().count();
    }
    let total = cumulative[m] as f64;
    let mut bounds = vec![0usize];
    for k in 1..parts {
        let target = total * k as f64 / parts as f64;
        let lo = bounds[k - 1] + 1;
        let hi = m - (parts - k);
        let best = (lo..=hi)
            .min_by(|&a, &b| {
                let da = (cumulative[a] as f64 - target).abs();
                let db = (cumulative[b] as f64 - target).abs();
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .unwrap_or(lo);
        bounds.push(best);
    }
    bounds.push(m);
    bounds
        .windows(2)
        .map(|w| units[w[0]..w[1]].join("\n\n"))
        .collect()
}

/// Keywords whose presence yields a generic `"<keyword> sounds"` cue.
pub const BASELINE_SOUND_KEYWORDS: [&str; 10] = [
    "ominous",
    "wind",
    "storm",
    "rain",
    "fire",
    "battle",
    "water",
    "footsteps",
    "bells",
    "silence",
];

pub fn baseline_sound_cues(segment: &str) -> Vec<String> {
    let lower = segment.to_lowercase();
    BASELINE_SOUND_KEYWORDS
        .iter()
        .filter(|k| lower.contains(*k))
        .map(|k| format!("{k} sounds"))
        .collect()
}

fn baseline_image_prompt(style: &StylePreference, segment: &str, names: &[String]) -> String {
    let lead = segment.split_inclusive(". ").next().unwrap_or("").trim();
    let mut p = format!("{} illustration of a story scene. {lead}", style.render());
    if !names.is_empty() {
        p.push_str(&format!(" Characters: {}.", names.join(", ")));
    }
    p
}

/// The sequential text-then-visuals pipeline: one full-story call, fixed
/// segmentation, name matching, a generic image template, and keyword
/// sound cues. No scene graph and no affective guidance.
pub fn run_cascade_baseline(
    config: StoryConfig,
    engine: &Engine,
    backends: Backends,
    clock: Arc<dyn Clock>,
) -> Result<StoryProject, RunError> {
    let now = clock.now();
    let mut project = StoryProject::new(config.clone(), StoryMode::Baseline, now);
    let fail = |project: StoryProject, error| {
        Err(RunError {
            project: Box::new(project),
            error,
        })
    };
    if let Err(error) = config.validate(engine) {
        return fail(project, error);
    }
    let inputs = UserInputs::from_config(&config, &config.character_profiles);
    let prompt = format!(
        "Scenes: {}\n\n{}",
        config.total_scenes,
        render_sections(&[("USER INPUTS", inputs.render())])
    );
    let story = match backends.text.complete_text(&TextRequest::new(
        Task::FullStory,
        BASELINE_SYSTEM,
        prompt,
    )) {
        Ok(s) => s,
        Err(source) => return fail(project, NarratorError::Backend { scene: 1, source }),
    };
    let segments = segment_paragraphs(&story, config.total_scenes as usize);
    for (i, segment) in segments.into_iter().enumerate() {
        let index = i as u32 + 1;
        let names: Vec<String> = config
            .character_profiles
            .iter()
            .filter(|p| segment.contains(p.name.as_str()))
            .map(|p| p.name.clone())
            .collect();
        let image_prompt = baseline_image_prompt(&config.style, &segment, &names);
        let image_ref = match backends
            .image
            .generate_image(&image_prompt, &config.style.render())
        {
            Ok(r) => r,
            Err(source) => {
                return fail(
                    project,
                    NarratorError::Backend {
                        scene: index,
                        source,
                    },
                )
            }
        };
        project.scenes.push(SceneRecord {
            index,
            stage_name: String::new(),
            directive: None,
            effective_tones: Vec::new(),
            soundscape_cues: baseline_sound_cues(&segment),
            narrator_sound_cues: Vec::new(),
            visual_cues: Vec::new(),
            narrative_text: segment,
            graph_snapshot: SceneGraph::new(),
            image_prompt,
            active_characters: names,
            image_ref: Some(image_ref),
            twist_applied: None,
            warnings: Vec::new(),
        });
    }
    project.profiles = config.character_profiles.clone();
    project.modified_at = clock.now();
    Ok(project)
}
