//! Project files and live session handles.
//!
//! A project is one JSON document plus an `images/` directory next to it.
//! Saves write a temporary sibling file and rename it over the target, so
//! the file on disk is always a complete document.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backends::Backends;
use crate::graph::{
    check_consistency, decode_value, ConsistencyViolation, SceneGraph, SchemaError,
};
use crate::narrator::{
    apply_twist, edit_scene, generate_scene, Clock, Engine, NarratorError, SceneEdit, SceneRecord,
    StoryConfig, StorySession,
};
use crate::tone::ToneSpec;
use crate::visual::CharacterProfile;

pub const FORMAT_VERSION: &str = "1";

/// Directory, relative to the project file, holding image artifacts.
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoryMode {
    Integrated,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoryProject {
    pub format_version: String,
    pub mode: StoryMode,
    pub config: StoryConfig,
    pub scenes: Vec<SceneRecord>,
    pub profiles: Vec<CharacterProfile>,
    #[serde(default)]
    pub summary: String,
    #[serde(default)]
    pub pending_twist: Option<String>,
    pub created_at: DateTime<Utc>,
    pub modified_at: DateTime<Utc>,
}

impl StoryProject {
    pub fn new(config: StoryConfig, mode: StoryMode, now: DateTime<Utc>) -> Self {
        Self {
            format_version: FORMAT_VERSION.to_string(),
            mode,
            profiles: config.character_profiles.clone(),
            config,
            scenes: Vec::new(),
            summary: String::new(),
            pending_twist: None,
            created_at: now,
            modified_at: now,
        }
    }

    /// Scene indices run 1..=n and every snapshot is consistent.
    pub fn validate(&self) -> Result<(), ProjectError> {
        for (i, scene) in self.scenes.iter().enumerate() {
            let expected = i as u32 + 1;
            if scene.index != expected {
                return Err(ProjectError::Invalid(format!(
                    "scene at position {i} has index {} (expected {expected})",
                    scene.index
                )));
            }
            let violations = check_consistency(&scene.graph_snapshot);
            if !violations.is_empty() {
                return Err(ProjectError::Inconsistent {
                    scene: scene.index,
                    violations,
                });
            }
        }
        if let Some(g) = &self.config.initial_graph {
            let violations = check_consistency(g);
            if !violations.is_empty() {
                return Err(ProjectError::Inconsistent {
                    scene: 0,
                    violations,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ProjectError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("unsupported project format_version `{0}`")]
    Version(String),
    #[error("scene {scene}: graph snapshot has {} consistency violation(s)", .violations.len())]
    Inconsistent {
        scene: u32,
        violations: Vec<ConsistencyViolation>,
    },
    #[error("invalid project: {0}")]
    Invalid(String),
    #[error("project {0} is already open in another session")]
    Locked(PathBuf),
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> ProjectError + '_ {
    move |source| ProjectError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Pretty JSON with a trailing newline. Field order is fixed, so equal
/// projects encode to equal bytes.
pub fn encode_project(project: &StoryProject) -> String {
    let mut s = serde_json::to_string_pretty(project).expect("project serializes");
    s.push('\n');
    s
}

pub fn decode_project(document: &str) -> Result<StoryProject, ProjectError> {
    let value: Value = serde_json::from_str(document)
        .map_err(|e| SchemaError::new("$", format!("invalid JSON: {e}")))?;
    let root = value
        .as_object()
        .ok_or_else(|| SchemaError::new("$", "expected an object"))?;
    match root.get("format_version") {
        Some(Value::String(v)) if v == FORMAT_VERSION => {}
        Some(Value::String(v)) => return Err(ProjectError::Version(v.clone())),
        Some(other) => return Err(ProjectError::Version(other.to_string())),
        None => return Err(SchemaError::new("$.format_version", "missing field").into()),
    }
    if let Some(Value::Array(scenes)) = root.get("scenes") {
        for (i, scene) in scenes.iter().enumerate() {
            if let Some(snapshot) = scene.get("graph_snapshot") {
                decode_value(snapshot)
                    .map_err(|e| e.nested(&format!("$.scenes[{i}].graph_snapshot")))?;
            }
        }
    }
    if let Some(g) = root.get("config").and_then(|c| c.get("initial_graph")) {
        decode_value(g).map_err(|e| e.nested("$.config.initial_graph"))?;
    }
    let project: StoryProject =
        serde_json::from_value(value).map_err(|e| SchemaError::new("$", e.to_string()))?;
    project.validate()?;
    Ok(project)
}

pub fn save_project(project: &StoryProject, path: &Path) -> Result<(), ProjectError> {
    let file_name = path
        .file_name()
        .ok_or_else(|| ProjectError::Invalid(format!("{} is not a file path", path.display())))?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(io_error(&dir))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut file = fs::File::create(&tmp).map_err(io_error(&tmp))?;
    file.write_all(encode_project(project).as_bytes())
        .and_then(|_| file.sync_all())
        .map_err(io_error(&tmp))?;
    drop(file);
    fs::rename(&tmp, path).map_err(io_error(path))
}

pub fn load_project(path: &Path) -> Result<StoryProject, ProjectError> {
    let document = fs::read_to_string(path).map_err(io_error(path))?;
    decode_project(&document)
}

/// Image directory for a project file.
pub fn images_dir(project_path: &Path) -> PathBuf {
    project_path
        .parent()
        .map_or_else(|| PathBuf::from(IMAGES_DIR), |p| p.join(IMAGES_DIR))
}

/// Advisory lock: a `<project>.lock` file that exists while a handle is
/// live. Removed on drop.
#[derive(Debug)]
pub struct ProjectLock {
    path: PathBuf,
}

impl ProjectLock {
    pub fn acquire(project_path: &Path) -> Result<Self, ProjectError> {
        let mut name = project_path.as_os_str().to_owned();
        name.push(".lock");
        let path = PathBuf::from(name);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_error(dir))?;
        }
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(ProjectError::Locked(project_path.to_path_buf()))
            }
            Err(e) => Err(io_error(&path)(e)),
        }
    }
}

impl Drop for ProjectLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// A live story bound to an optional project file.
#[derive(Debug)]
pub struct SessionHandle {
    pub id: String,
    pub session: StorySession,
    path: Option<PathBuf>,
    _lock: Option<ProjectLock>,
    dirty: bool,
}

impl SessionHandle {
    /// Binds `session` to `path` (taking the lock) and writes it out.
    pub fn create(
        id: impl Into<String>,
        session: StorySession,
        path: Option<PathBuf>,
    ) -> Result<Self, ProjectError> {
        let lock = path.as_deref().map(ProjectLock::acquire).transpose()?;
        let mut handle = Self {
            id: id.into(),
            session,
            path,
            _lock: lock,
            dirty: true,
        };
        handle.persist()?;
        Ok(handle)
    }

    /// Loads and resumes a saved project.
    pub fn open(
        id: impl Into<String>,
        path: &Path,
        engine: &Engine,
        backends: Backends,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, SessionError> {
        let lock = ProjectLock::acquire(path)?;
        let project = load_project(path)?;
        let session = StorySession::resume(project, engine, backends, clock)?;
        Ok(Self {
            id: id.into(),
            session,
            path: Some(path.to_path_buf()),
            _lock: Some(lock),
            dirty: false,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn is_dirty(&self) -> bool {
        self.dirty
    }

    pub fn project(&self) -> &StoryProject {
        &self.session.project
    }

    /// Writes the project if it has unsaved changes and a file.
    pub fn persist(&mut self) -> Result<(), ProjectError> {
        if let (true, Some(path)) = (self.dirty, &self.path) {
            save_project(&self.session.project, path)?;
        }
        if self.path.is_some() {
            self.dirty = false;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Narrator(#[from] NarratorError),
    #[error(transparent)]
    Project(#[from] ProjectError),
    /// The change is kept in memory but could not be written.
    #[error("change kept in memory but not saved: {source}")]
    Persist { source: ProjectError },
}

fn persist_after(handle: &mut SessionHandle) -> Result<(), SessionError> {
    handle.dirty = true;
    handle
        .persist()
        .map_err(|source| SessionError::Persist { source })
}

/// Generates the next scene and saves the project before returning.
pub fn step_session(handle: &mut SessionHandle) -> Result<SceneRecord, SessionError> {
    let record = generate_scene(&mut handle.session)?;
    persist_after(handle)?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditRequest {
    SceneText {
        index: u32,
        text: String,
    },
    SceneGraph {
        index: u32,
        graph: SceneGraph,
    },
    /// Records a twist for the next step.
    SelectTwist {
        twist: String,
    },
    /// Records a twist and generates the next scene with it.
    ApplyTwist {
        twist: String,
    },
    Tones {
        tones: Vec<ToneSpec>,
        #[serde(default)]
        nac_influence: Option<bool>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EditResponse {
    pub scene: Option<SceneRecord>,
    pub violations: Vec<ConsistencyViolation>,
    pub warnings: Vec<String>,
}

/// Dispatches a user edit. Rejected edits leave the session and the file
/// untouched.
pub fn handle_edit(
    handle: &mut SessionHandle,
    request: EditRequest,
) -> Result<EditResponse, SessionError> {
    let response = match request {
        EditRequest::SceneText { index, text } => {
            let out = edit_scene(&mut handle.session, index, SceneEdit::Text(text))?;
            EditResponse {
                scene: Some(out.record),
                violations: out.violations,
                warnings: out.warnings,
            }
        }
        EditRequest::SceneGraph { index, graph } => {
            let out = edit_scene(&mut handle.session, index, SceneEdit::Graph(graph))?;
            EditResponse {
                scene: Some(out.record),
                violations: out.violations,
                warnings: out.warnings,
            }
        }
        EditRequest::SelectTwist { twist } => {
            handle.session.select_twist(&twist)?;
            EditResponse::default()
        }
        EditRequest::ApplyTwist { twist } => {
            let record = apply_twist(&mut handle.session, &twist)?;
            EditResponse {
                warnings: record.warnings.clone(),
                scene: Some(record),
                violations: Vec::new(),
            }
        }
        EditRequest::Tones {
            tones,
            nac_influence,
        } => {
            handle.session.set_tones(tones, nac_influence)?;
            EditResponse::default()
        }
    };
    persist_after(handle)?;
    Ok(response)
}
