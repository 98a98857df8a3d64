//! Batch commands behind the `scenewright` binary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde_json::Value;

use scenewright::arc::load_arc;
use scenewright::graph::{decode_graph, elderwood_example};
use scenewright::narrator::{
    run_cascade_baseline, run_story, RunError, StoryConfig, DEFAULT_SUMMARY_CAP,
};
use scenewright::project::{
    decode_project, encode_project, images_dir, save_project, StoryProject,
};
use scenewright::tone::{load_tone, Intensity, ToneSpec};
use scenewright::visual::{CharacterProfile, StylePreference};

use crate::api::PROJECT_FILE;
use crate::Runtime;

/// A starter config the user is expected to edit.
pub fn scaffold_config(total_scenes: u32, arc_name: &str, seed: u64) -> StoryConfig {
    StoryConfig {
        premise: "A young ranger searches the old forest for the spirit that sleeps inside the great tree.".into(),
        character_profiles: vec![CharacterProfile::new(
            "Elara",
            "A young ranger bound to the forest, quiet and watchful.",
        )],
        setting: "The Whispering Woods".into(),
        style: StylePreference::new("Watercolor", &["soft edges"]),
        arc_name: arc_name.to_string(),
        user_tones: vec![ToneSpec::new("Mystery", Intensity::Medium)],
        nac_influence: true,
        total_scenes,
        seed,
        summary_cap: DEFAULT_SUMMARY_CAP,
        initial_graph: Some(elderwood_example()),
    }
}

pub fn write_config(config: &StoryConfig, path: &Path) -> anyhow::Result<()> {
    if path.exists() {
        bail!("{} already exists", path.display());
    }
    let mut text = serde_json::to_string_pretty(config)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_config(path: &Path) -> anyhow::Result<StoryConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pipeline {
    Integrated,
    Baseline,
}

/// Runs a whole story into `out_dir/story.json` (+ `images/`). A failed
/// run still saves the scenes generated before the failure.
pub fn run_to_dir(
    runtime: &Runtime,
    config: StoryConfig,
    out_dir: &Path,
    pipeline: Pipeline,
) -> anyhow::Result<(PathBuf, StoryProject)> {
    let path = out_dir.join(PROJECT_FILE);
    let backends = runtime.backends_for(&config, Some(images_dir(&path)))?;
    let result = match pipeline {
        Pipeline::Integrated => run_story(config, &runtime.engine, backends, runtime.clock.clone()),
        Pipeline::Baseline => {
            run_cascade_baseline(config, &runtime.engine, backends, runtime.clock.clone())
        }
    };
    match result {
        Ok(project) => {
            save_project(&project, &path)?;
            Ok((path, project))
        }
        Err(RunError { project, error }) => {
            save_project(&project, &path)?;
            Err(anyhow::Error::new(error).context(format!(
                "run stopped after {} scene(s); partial project saved to {}",
                project.scenes.len(),
                path.display()
            )))
        }
    }
}

/// Regenerates a story with mock backends, a fixed clock and the given
/// seed. With `golden`, the result must match that file byte for byte.
pub fn replay(
    config: StoryConfig,
    seed: u64,
    out_dir: &Path,
    golden: Option<&Path>,
) -> anyhow::Result<PathBuf> {
    let runtime = Runtime::mock().with_fixed_clock();
    let config = StoryConfig { seed, ..config };
    let (path, project) = run_to_dir(&runtime, config, out_dir, Pipeline::Integrated)?;
    if let Some(golden) = golden {
        let expected = fs::read(golden).with_context(|| format!("reading {}", golden.display()))?;
        if expected != encode_project(&project).into_bytes() {
            bail!("replay differs from golden file {}", golden.display());
        }
    }
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Project,
    Config,
    Arc,
    Tone,
    Graph,
}

impl FileKind {
    /// Guesses the kind from top-level keys.
    pub fn detect(value: &Value) -> Option<Self> {
        let obj = value.as_object()?;
        let has = |k: &str| obj.contains_key(k);
        if has("format_version") {
            Some(Self::Project)
        } else if has("premise") {
            Some(Self::Config)
        } else if has("stages") {
            Some(Self::Arc)
        } else if has("intensity_specifics") {
            Some(Self::Tone)
        } else if has("nodes") || has("edges") {
            Some(Self::Graph)
        } else {
            None
        }
    }
}

/// Checks one project, config, arc, tone or graph file.
pub fn validate_file(runtime: &Runtime, path: &Path) -> anyhow::Result<FileKind> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).context("invalid JSON")?;
    let kind = FileKind::detect(&value).context("unrecognized document")?;
    match kind {
        FileKind::Project => {
            let project = decode_project(&text)?;
            for w in project.config.validate(&runtime.engine)? {
                log::warn!("{w}");
            }
        }
        FileKind::Config => {
            let config: StoryConfig = serde_json::from_value(value)?;
            for w in config.validate(&runtime.engine)? {
                log::warn!("{w}");
            }
        }
        FileKind::Arc => {
            load_arc(&text)?;
        }
        FileKind::Tone => {
            load_tone(&text)?;
        }
        FileKind::Graph => {
            let graph = decode_graph(&text)?;
            let violations = scenewright::graph::check_consistency(&graph);
            if !violations.is_empty() {
                let lines: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
                bail!("graph is inconsistent:\n  {}", lines.join("\n  "));
            }
        }
    }
    Ok(kind)
}
