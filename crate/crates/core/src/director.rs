//! Director: turns a narrative segment into validated graph mutations.
//!
//! The backend is asked for a fenced JSON document listing entities,
//! relations, attribute changes, and optional removals. The lists are
//! normalized into a [`GraphMutation`] batch and applied atomically. A
//! rejected batch leaves the graph untouched and yields a
//! [`CorrectionRequest`] for the Narrator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{extract_fenced, BackendError, Task, TextBackend, TextRequest};
use crate::graph::{
    apply_mutations, normalize_relation, relation, ApplyError, ApplyReport, AttributeTarget,
    Attributes, ConsistencyViolation, EdgeRef, EntityRef, GraphMutation, NodeType, SceneGraph,
};
use crate::prompts::DIRECTOR_SYSTEM;

/// Repair round-trips allowed per scene, shared by parse re-asks and
/// corrective prompts.
pub const MAX_REPAIRS: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntitySpec {
    pub name: String,
    pub node_type: NodeType,
    #[serde(default)]
    pub attributes: Attributes,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationSpec {
    pub source: String,
    pub relation: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeChange {
    pub entity: String,
    pub key: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Removal {
    RemoveEntity {
        entity: String,
    },
    RemoveRelation {
        source: String,
        relation: String,
        target: String,
    },
    RemoveAttribute {
        entity: String,
        key: String,
    },
}

/// The wire document inside the fence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionPayload {
    pub entities: Vec<EntitySpec>,
    pub relations: Vec<RelationSpec>,
    pub attribute_changes: Vec<AttributeChange>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub removals: Vec<Removal>,
}

impl ExtractionPayload {
    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
            && self.relations.is_empty()
            && self.attribute_changes.is_empty()
            && self.removals.is_empty()
    }

    /// Renders the payload the way a well-behaved backend would.
    pub fn to_fenced(&self) -> String {
        format!(
            "```json\n{}\n```\n",
            serde_json::to_string_pretty(self).expect("payload serializes")
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectorOutput {
    pub entities: Vec<EntitySpec>,
    pub relations: Vec<RelationSpec>,
    pub attribute_changes: Vec<AttributeChange>,
    pub removals: Vec<Removal>,
    pub normalized_mutations: Vec<GraphMutation>,
}

impl DirectorOutput {
    pub fn from_payload(payload: ExtractionPayload) -> Self {
        let normalized_mutations = normalize(&payload);
        Self {
            entities: payload.entities,
            relations: payload.relations,
            attribute_changes: payload.attribute_changes,
            removals: payload.removals,
            normalized_mutations,
        }
    }

    pub fn payload(&self) -> ExtractionPayload {
        ExtractionPayload {
            entities: self.entities.clone(),
            relations: self.relations.clone(),
            attribute_changes: self.attribute_changes.clone(),
            removals: self.removals.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DirectorError {
    #[error("parse error at byte {position}: {reason}")]
    ParseError { position: usize, reason: String },
    #[error("response contains no fenced JSON document")]
    EmptyPayload,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl DirectorError {
    pub fn is_parse_failure(&self) -> bool {
        !matches!(self, DirectorError::Backend(_))
    }
}

/// Maps the three extraction lists (plus removals) to a mutation batch:
/// entities first, then relations, attribute changes, and removals, each
/// in input order. `IS_AT` relations become moves so a character never
/// ends up in two places.
pub fn normalize(payload: &ExtractionPayload) -> Vec<GraphMutation> {
    let name = |s: &str| EntityRef::name(s.trim());
    let mut out = Vec::new();
    for e in &payload.entities {
        out.push(GraphMutation::AddNode {
            name: e.name.trim().to_string(),
            node_type: e.node_type,
            attributes: e.attributes.clone(),
        });
    }
    for r in &payload.relations {
        let rel = normalize_relation(&r.relation).unwrap_or_default();
        if rel == relation::IS_AT {
            out.push(GraphMutation::MoveEntity {
                entity: name(&r.source),
                location: name(&r.target),
            });
        } else {
            out.push(GraphMutation::AddEdge {
                source: name(&r.source),
                target: name(&r.target),
                relation: rel,
                attributes: Attributes::new(),
            });
        }
    }
    for a in &payload.attribute_changes {
        out.push(GraphMutation::SetAttribute {
            target: AttributeTarget::Node(name(&a.entity)),
            key: a.key.trim().to_string(),
            value: a.value.clone(),
        });
    }
    for r in &payload.removals {
        out.push(match r {
            Removal::RemoveEntity { entity } => GraphMutation::RemoveNode {
                entity: name(entity),
            },
            Removal::RemoveRelation {
                source,
                relation,
                target,
            } => GraphMutation::RemoveEdge {
                edge: EdgeRef::Triple {
                    source: name(source),
                    relation: normalize_relation(relation).unwrap_or_default(),
                    target: name(target),
                },
            },
            Removal::RemoveAttribute { entity, key } => GraphMutation::RemoveAttribute {
                target: AttributeTarget::Node(name(entity)),
                key: key.trim().to_string(),
            },
        });
    }
    out
}

/// Parses a backend response. The payload is the first fenced block; text
/// around it is ignored. Positions in errors are byte offsets into `raw`.
pub fn parse_director_output(raw: &str) -> Result<DirectorOutput, DirectorError> {
    let (start, body) = extract_fenced(raw).ok_or(DirectorError::EmptyPayload)?;
    let payload: ExtractionPayload =
        serde_json::from_str(body).map_err(|e| DirectorError::ParseError {
            position: start + byte_offset(body, e.line(), e.column()),
            reason: e.to_string(),
        })?;
    validate_payload(&payload).map_err(|reason| DirectorError::ParseError {
        position: start,
        reason,
    })?;
    Ok(DirectorOutput::from_payload(payload))
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += l.len();
    }
    text.len()
}

fn validate_payload(p: &ExtractionPayload) -> Result<(), String> {
    let named = |what: &str, i: usize, s: &str| {
        if s.trim().is_empty() {
            Err(format!("{what}[{i}] has an empty name"))
        } else {
            Ok(())
        }
    };
    let token = |what: &str, i: usize, s: &str| {
        normalize_relation(s)
            .map(|_| ())
            .ok_or_else(|| format!("{what}[{i}] relation `{s}` is not a relation token"))
    };
    for (i, e) in p.entities.iter().enumerate() {
        named("entities", i, &e.name)?;
        if e.attributes.keys().any(|k| k.trim().is_empty()) {
            return Err(format!("entities[{i}] has an empty attribute key"));
        }
    }
    for (i, r) in p.relations.iter().enumerate() {
        named("relations", i, &r.source)?;
        named("relations", i, &r.target)?;
        token("relations", i, &r.relation)?;
    }
    for (i, a) in p.attribute_changes.iter().enumerate() {
        named("attribute_changes", i, &a.entity)?;
        if a.key.trim().is_empty() {
            return Err(format!("attribute_changes[{i}] has an empty key"));
        }
    }
    for (i, r) in p.removals.iter().enumerate() {
        match r {
            Removal::RemoveEntity { entity } => named("removals", i, entity)?,
            Removal::RemoveRelation {
                source,
                relation,
                target,
            } => {
                named("removals", i, source)?;
                named("removals", i, target)?;
                token("removals", i, relation)?;
            }
            Removal::RemoveAttribute { entity, key } => {
                named("removals", i, entity)?;
                if key.trim().is_empty() {
                    return Err(format!("removals[{i}] has an empty key"));
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractionRequest {
    pub narrative_text: String,
    pub graph_digest: String,
    pub scene_index: u32,
}

impl ExtractionRequest {
    pub fn new(narrative_text: &str, graph: &SceneGraph, scene_index: u32) -> Self {
        Self {
            narrative_text: narrative_text.to_string(),
            graph_digest: graph.digest(),
            scene_index,
        }
    }

    pub fn render(&self) -> String {
        format!(
            "Scene: {}\n\n## SCENE GRAPH\n{}\n\n## NARRATIVE TEXT\n{}",
            self.scene_index, self.graph_digest, self.narrative_text
        )
    }

    fn render_reask(&self, error: &DirectorError) -> String {
        format!(
            "{}\n\n## PARSE ERROR\nYour previous reply could not be used: {error}. Reply again with exactly one fenced JSON document in the documented format.",
            self.render()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRequest {
    pub violations: Vec<ConsistencyViolation>,
    pub corrective_prompt: String,
    pub attempt: u32,
}

/// Tracks repair round-trips for one scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RepairBudget {
    limit: u32,
    used: u32,
}

impl RepairBudget {
    pub fn new(limit: u32) -> Self {
        Self { limit, used: 0 }
    }

    pub fn used(&self) -> u32 {
        self.used
    }

    pub fn remaining(&self) -> u32 {
        self.limit - self.used
    }

    /// Takes one round-trip if any are left.
    pub fn spend(&mut self) -> bool {
        if self.used < self.limit {
            self.used += 1;
            true
        } else {
            false
        }
    }
}

impl Default for RepairBudget {
    fn default() -> Self {
        Self::new(MAX_REPAIRS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectorResult {
    pub graph: SceneGraph,
    pub output: DirectorOutput,
    pub correction: Option<CorrectionRequest>,
    pub report: Option<ApplyReport>,
}

/// Lists every violation with the entities involved and asks for a
/// revision. Deterministic for a given list.
pub fn build_corrective_prompt(violations: &[ConsistencyViolation]) -> String {
    let mut out = String::from(
        "Your previous draft of this scene contradicts the established world state.\n",
    );
    for (i, v) in violations.iter().enumerate() {
        let labels = v.entity_labels();
        out.push_str(&format!("{}. {:?}: {}", i + 1, v.kind, v.message));
        if !labels.is_empty() {
            out.push_str(&format!(" (entities: {})", labels.join(", ")));
        }
        out.push('\n');
    }
    out.push_str(
        "Revise the segment so none of these problems occur. Each character has exactly one location at a time, nothing may contain itself, and only entities that exist or are introduced in the text may be referenced.",
    );
    out
}

fn request_extraction(backend: &dyn TextBackend, prompt: String) -> Result<String, DirectorError> {
    let request = TextRequest::new(Task::ExtractScene, DIRECTOR_SYSTEM, prompt);
    Ok(backend.complete_text(&request)?)
}

/// Runs one extraction over a fresh budget.
pub fn direct_scene(
    text: &str,
    graph: &SceneGraph,
    backend: &dyn TextBackend,
    scene_index: u32,
) -> Result<DirectorResult, DirectorError> {
    direct_scene_with_budget(
        text,
        graph,
        backend,
        scene_index,
        &mut RepairBudget::default(),
    )
}

/// Extracts and applies the updates for `text`. Parse failures re-ask the
/// backend while `budget` allows; a consistency rejection returns the
/// unchanged graph plus a [`CorrectionRequest`] (the caller decides whether
/// to spend budget on it).
pub fn direct_scene_with_budget(
    text: &str,
    graph: &SceneGraph,
    backend: &dyn TextBackend,
    scene_index: u32,
    budget: &mut RepairBudget,
) -> Result<DirectorResult, DirectorError> {
    if text.trim().is_empty() {
        return Ok(DirectorResult {
            graph: graph.clone(),
            output: DirectorOutput::default(),
            correction: None,
            report: None,
        });
    }
    let request = ExtractionRequest::new(text, graph, scene_index);
    let mut prompt = request.render();
    loop {
        let raw = request_extraction(backend, prompt)?;
        let failure = match parse_director_output(&raw) {
            Ok(output) => match apply_mutations(graph, &output.normalized_mutations) {
                Ok((next, report)) => {
                    return Ok(DirectorResult {
                        graph: next,
                        output,
                        correction: None,
                        report: Some(report),
                    })
                }
                Err(ApplyError::InvalidMutation { index, reason }) => DirectorError::ParseError {
                    position: 0,
                    reason: format!("mutation {index}: {reason}"),
                },
                Err(rejection) => {
                    let violations = rejection.violations();
                    return Ok(DirectorResult {
                        graph: graph.clone(),
                        output,
                        correction: Some(CorrectionRequest {
                            corrective_prompt: build_corrective_prompt(&violations),
                            violations,
                            attempt: budget.used() + 1,
                        }),
                        report: None,
                    });
                }
            },
            Err(e @ DirectorError::Backend(_)) => return Err(e),
            Err(e) => e,
        };
        if !budget.spend() {
            return Err(failure);
        }
        log::warn!("scene {scene_index}: re-asking extraction after {failure}");
        prompt = request.render_reask(&failure);
    }
}
