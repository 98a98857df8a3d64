//! Service layer over the `scenewright` engine: the HTTP session API and
//! the shared runtime used by the batch commands.

pub mod api;
pub mod commands;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use scenewright::backends::{BackendError, BackendSettings, Backends};
use scenewright::narrator::{Clock, Engine, FixedClock, StoryConfig, SystemClock};

/// Knowledge, backend settings and clock shared by every story.
pub struct Runtime {
    pub engine: Engine,
    /// `None` means seeded mocks, seeded from each story's config.
    pub backends: Option<BackendSettings>,
    pub clock: Arc<dyn Clock>,
}

impl Runtime {
    /// Built-in knowledge, mock backends, system clock.
    pub fn mock() -> Self {
        Self {
            engine: Engine::builtin(),
            backends: None,
            clock: Arc::new(SystemClock),
        }
    }

    pub fn with_fixed_clock(mut self) -> Self {
        self.clock = Arc::new(FixedClock::epoch());
        self
    }

    /// Adds arcs and tones from directories and reads backend settings
    /// from a JSON file.
    pub fn load(
        arcs_dir: Option<&Path>,
        tones_dir: Option<&Path>,
        backends_file: Option<&Path>,
    ) -> anyhow::Result<Self> {
        let mut rt = Self::mock();
        if let Some(dir) = arcs_dir {
            let n = rt.engine.arcs.load_dir(dir)?;
            log::info!("loaded {n} arc(s) from {}", dir.display());
        }
        if let Some(dir) = tones_dir {
            let n = rt.engine.tones.load_dir(dir)?;
            log::info!("loaded {n} tone(s) from {}", dir.display());
        }
        if let Some(file) = backends_file {
            let text = std::fs::read_to_string(file)
                .with_context(|| format!("reading {}", file.display()))?;
            let settings: BackendSettings = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", file.display()))?;
            rt.backends = Some(settings);
        }
        Ok(rt)
    }

    pub fn backends_for(
        &self,
        config: &StoryConfig,
        image_dir: Option<PathBuf>,
    ) -> Result<Backends, BackendError> {
        self.backends
            .clone()
            .unwrap_or_else(|| BackendSettings::mock(config.seed))
            .build(image_dir)
    }
}
