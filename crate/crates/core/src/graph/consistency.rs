use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use serde::{Deserialize, Serialize};

use super::{relation, NodeId, NodeType, RelationEdge, SceneGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ViolationKind {
    DanglingEdge,
    DuplicateEdge,
    MultipleLocations,
    ContainmentCycle,
    UnknownEntityReference,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubjectRole {
    Node,
    Edge,
    Reference,
}

/// Something a violation is about. `label` is the display name: the node
/// name, an `A -(REL)-> B` rendering for edges, or the raw reference text.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Subject {
    pub role: SubjectRole,
    pub id: String,
    pub label: String,
}

/// Subjects populated per kind:
///
/// | kind | subjects |
/// |---|---|
/// | `DanglingEdge` | the edge, then each missing endpoint as a reference |
/// | `DuplicateEdge` | source node, target node, then every duplicate edge |
/// | `MultipleLocations` | the character, every location node, every `IS_AT` edge |
/// | `ContainmentCycle` | every node in the cycle, then the cycle's edges |
/// | `UnknownEntityReference` | the unresolved reference |
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyViolation {
    pub kind: ViolationKind,
    pub subjects: Vec<Subject>,
    pub message: String,
}

impl ConsistencyViolation {
    pub fn unknown_reference(reference: &str, context: &str) -> Self {
        Self {
            kind: ViolationKind::UnknownEntityReference,
            subjects: vec![Subject {
                role: SubjectRole::Reference,
                id: reference.to_string(),
                label: reference.to_string(),
            }],
            message: format!("`{reference}` does not name any entity in the scene ({context})"),
        }
    }

    /// Display names of every node or reference involved.
    pub fn entity_labels(&self) -> Vec<&str> {
        self.subjects
            .iter()
            .filter(|s| s.role != SubjectRole::Edge)
            .map(|s| s.label.as_str())
            .collect()
    }

    fn sort_key(&self) -> (ViolationKind, String) {
        let first = self
            .subjects
            .first()
            .map(|s| s.id.clone())
            .unwrap_or_default();
        (self.kind, first)
    }
}

impl fmt::Display for ConsistencyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

fn node_subject(graph: &SceneGraph, id: &NodeId) -> Subject {
    Subject {
        role: SubjectRole::Node,
        id: id.0.clone(),
        label: graph
            .node(id)
            .map_or_else(|| id.0.clone(), |n| n.name.clone()),
    }
}

fn edge_subject(graph: &SceneGraph, edge: &RelationEdge) -> Subject {
    Subject {
        role: SubjectRole::Edge,
        id: edge.id.0.clone(),
        label: edge_label(graph, edge),
    }
}

pub(crate) fn edge_label(graph: &SceneGraph, edge: &RelationEdge) -> String {
    let name = |id: &NodeId| {
        graph
            .node(id)
            .map_or_else(|| id.0.clone(), |n| n.name.clone())
    };
    format!(
        "{} -({})-> {}",
        name(&edge.source_id),
        edge.relation,
        name(&edge.target_id)
    )
}

/// Lists every invariant violation, ordered by kind and then by first
/// subject id. An empty list means the graph is consistent.
pub fn check_consistency(graph: &SceneGraph) -> Vec<ConsistencyViolation> {
    let mut out = Vec::new();
    dangling_edges(graph, &mut out);
    duplicate_edges(graph, &mut out);
    multiple_locations(graph, &mut out);
    containment_cycles(graph, &mut out);
    out.sort_by_key(ConsistencyViolation::sort_key);
    out
}

fn dangling_edges(graph: &SceneGraph, out: &mut Vec<ConsistencyViolation>) {
    for edge in graph.edges() {
        let missing: Vec<&NodeId> = [&edge.source_id, &edge.target_id]
            .into_iter()
            .filter(|id| graph.node(id).is_none())
            .collect();
        if missing.is_empty() {
            continue;
        }
        let mut subjects = vec![edge_subject(graph, edge)];
        subjects.extend(missing.iter().map(|id| Subject {
            role: SubjectRole::Reference,
            id: id.0.clone(),
            label: id.0.clone(),
        }));
        let list = missing
            .iter()
            .map(|id| id.0.as_str())
            .collect::<Vec<_>>()
            .join(", ");
        out.push(ConsistencyViolation {
            kind: ViolationKind::DanglingEdge,
            subjects,
            message: format!(
                "edge {} ({}) points at missing node(s) {list}",
                edge.id,
                edge_label(graph, edge)
            ),
        });
    }
}

fn duplicate_edges(graph: &SceneGraph, out: &mut Vec<ConsistencyViolation>) {
    let mut groups: BTreeMap<(NodeId, NodeId, String), Vec<&RelationEdge>> = BTreeMap::new();
    for edge in graph.edges() {
        groups.entry(edge.triple_key()).or_default().push(edge);
    }
    for ((source, target, rel), edges) in groups {
        if edges.len() < 2 {
            continue;
        }
        let mut subjects = vec![node_subject(graph, &source), node_subject(graph, &target)];
        subjects.extend(edges.iter().map(|e| edge_subject(graph, e)));
        out.push(ConsistencyViolation {
            kind: ViolationKind::DuplicateEdge,
            message: format!(
                "{} edges repeat the relation {} -({rel})-> {}",
                edges.len(),
                subjects[0].label,
                subjects[1].label
            ),
            subjects,
        });
    }
}

fn multiple_locations(graph: &SceneGraph, out: &mut Vec<ConsistencyViolation>) {
    for character in graph.nodes().filter(|n| n.node_type == NodeType::Character) {
        let at: Vec<&RelationEdge> = graph
            .outgoing(&character.id)
            .filter(|e| e.relation == relation::IS_AT)
            .collect();
        if at.len() < 2 {
            continue;
        }
        let mut subjects = vec![node_subject(graph, &character.id)];
        subjects.extend(at.iter().map(|e| node_subject(graph, &e.target_id)));
        let places = subjects[1..]
            .iter()
            .map(|s| s.label.as_str())
            .collect::<Vec<_>>()
            .join(", ");
        subjects.extend(at.iter().map(|e| edge_subject(graph, e)));
        out.push(ConsistencyViolation {
            kind: ViolationKind::MultipleLocations,
            message: format!(
                "{} is at more than one location at once ({places})",
                character.name
            ),
            subjects,
        });
    }
}

fn containment_cycles(graph: &SceneGraph, out: &mut Vec<ConsistencyViolation>) {
    let mut index: BTreeMap<&NodeId, NodeIndex> = BTreeMap::new();
    let mut pg: DiGraph<&NodeId, ()> = DiGraph::new();
    for node in graph.nodes() {
        index.insert(&node.id, pg.add_node(&node.id));
    }
    let containment: Vec<&RelationEdge> = graph
        .edges()
        .filter(|e| relation::is_containment(&e.relation))
        .filter(|e| index.contains_key(&e.source_id) && index.contains_key(&e.target_id))
        .collect();
    for e in &containment {
        pg.add_edge(index[&e.source_id], index[&e.target_id], ());
    }
    for scc in tarjan_scc(&pg) {
        let members: BTreeSet<&NodeId> = scc.iter().map(|ix| pg[*ix]).collect();
        let cycle_edges: Vec<&&RelationEdge> = containment
            .iter()
            .filter(|e| members.contains(&e.source_id) && members.contains(&e.target_id))
            .collect();
        let is_cycle = members.len() > 1 || !cycle_edges.is_empty();
        if !is_cycle {
            continue;
        }
        let mut subjects: Vec<Subject> = members.iter().map(|id| node_subject(graph, id)).collect();
        let names = subjects
            .iter()
            .map(|s| s.label.as_str())
            .collect::<Vec<_>>()
            .join(", ");
        subjects.extend(cycle_edges.iter().map(|e| edge_subject(graph, e)));
        out.push(ConsistencyViolation {
            kind: ViolationKind::ContainmentCycle,
            message: format!("containment relations form a cycle through {names}"),
            subjects,
        });
    }
}
