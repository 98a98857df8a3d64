//! Dynamic scene graph: the authoritative world state of a story.
//!
//! A [`SceneGraph`] is a directed attributed graph of entities (characters,
//! objects, locations, events) and relations between them. Graph values are
//! only changed through [`apply_mutations`], which applies a batch atomically
//! and returns a new value, so a graph handed to another thread never changes
//! underneath it.

mod codec;
mod consistency;
mod mutation;
mod spatial;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use codec::{decode_graph, decode_value, encode_graph, SchemaError};
pub use consistency::{check_consistency, ConsistencyViolation, Subject, ViolationKind};
pub use mutation::{
    apply_mutations, ApplyError, ApplyReport, AttributeTarget, EdgeRef, EntityRef, GraphMutation,
};
pub use spatial::{containment_targets, resolve_location, UnknownEntity};

/// Attribute maps are ordered so encodings are byte-stable.
pub type Attributes = BTreeMap<String, String>;

/// Attribute mirrored onto characters from their `IS_AT` edge.
pub const CURRENT_LOCATION_ATTR: &str = "current_location_id";

/// Reserved spatial relation vocabulary.
pub mod relation {
    pub const IS_AT: &str = "IS_AT";
    pub const INSIDE: &str = "INSIDE";
    pub const ON: &str = "ON";
    pub const NEAR: &str = "NEAR";
    pub const HOLDS: &str = "HOLDS";
    pub const PARTICIPATES_IN: &str = "PARTICIPATES_IN";

    /// Relations whose subgraph must stay acyclic.
    pub const CONTAINMENT: [&str; 3] = [IS_AT, INSIDE, ON];

    pub fn is_containment(relation: &str) -> bool {
        CONTAINMENT.contains(&relation)
    }
}

/// Normalizes a free-form relation label to the uppercase token form
/// (`"is at"` -> `IS_AT`). Returns `None` when nothing token-like remains.
pub fn normalize_relation(raw: &str) -> Option<String> {
    let mut out = String::with_capacity(raw.len());
    let mut pending_sep = false;
    for ch in raw.trim().chars() {
        if ch.is_ascii_alphanumeric() {
            if pending_sep && !out.is_empty() {
                out.push('_');
            }
            pending_sep = false;
            out.push(ch.to_ascii_uppercase());
        } else if ch == '_' || ch == '-' || ch.is_whitespace() {
            pending_sep = true;
        } else {
            return None;
        }
    }
    if out.is_empty() || out.starts_with(|c: char| c.is_ascii_digit()) {
        None
    } else {
        Some(out)
    }
}

macro_rules! string_id {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}

string_id!(NodeId);
string_id!(EdgeId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeType {
    Character,
    Object,
    Location,
    Event,
}

impl NodeType {
    pub const ALL: [NodeType; 4] = [
        NodeType::Character,
        NodeType::Object,
        NodeType::Location,
        NodeType::Event,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeType::Character => "character",
            NodeType::Object => "object",
            NodeType::Location => "location",
            NodeType::Event => "event",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for NodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityNode {
    pub id: NodeId,
    pub name: String,
    pub node_type: NodeType,
    pub attributes: Attributes,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationEdge {
    pub id: EdgeId,
    pub source_id: NodeId,
    pub target_id: NodeId,
    pub relation: String,
    pub attributes: Attributes,
}

impl RelationEdge {
    /// Identity of the edge for duplicate detection. `NEAR` is symmetric,
    /// so its endpoints are ordered.
    pub fn triple_key(&self) -> (NodeId, NodeId, String) {
        triple_key(&self.source_id, &self.target_id, &self.relation)
    }
}

pub(crate) fn triple_key(
    source: &NodeId,
    target: &NodeId,
    relation: &str,
) -> (NodeId, NodeId, String) {
    if relation == relation::NEAR && target < source {
        (target.clone(), source.clone(), relation.to_string())
    } else {
        (source.clone(), target.clone(), relation.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SceneGraph {
    nodes: BTreeMap<NodeId, EntityNode>,
    edges: BTreeMap<EdgeId, RelationEdge>,
    revision: u64,
}

impl SceneGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a graph from raw parts without any consistency checks. Later
    /// duplicates of an id replace earlier ones.
    pub fn from_parts(
        nodes: impl IntoIterator<Item = EntityNode>,
        edges: impl IntoIterator<Item = RelationEdge>,
        revision: u64,
    ) -> Self {
        Self {
            nodes: nodes.into_iter().map(|n| (n.id.clone(), n)).collect(),
            edges: edges.into_iter().map(|e| (e.id.clone(), e)).collect(),
            revision,
        }
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.edges.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Nodes in id order.
    pub fn nodes(&self) -> impl Iterator<Item = &EntityNode> {
        self.nodes.values()
    }

    /// Edges in id order.
    pub fn edges(&self) -> impl Iterator<Item = &RelationEdge> {
        self.edges.values()
    }

    pub fn node(&self, id: &NodeId) -> Option<&EntityNode> {
        self.nodes.get(id)
    }

    pub fn edge(&self, id: &EdgeId) -> Option<&RelationEdge> {
        self.edges.get(id)
    }

    /// Case-insensitive exact name lookup.
    pub fn find_by_name(&self, name: &str) -> Vec<&EntityNode> {
        let wanted = name.trim().to_lowercase();
        self.nodes
            .values()
            .filter(|n| n.name.to_lowercase() == wanted)
            .collect()
    }

    pub fn outgoing<'a>(&'a self, id: &'a NodeId) -> impl Iterator<Item = &'a RelationEdge> + 'a {
        self.edges.values().filter(move |e| &e.source_id == id)
    }

    pub fn incident<'a>(&'a self, id: &'a NodeId) -> impl Iterator<Item = &'a RelationEdge> + 'a {
        self.edges
            .values()
            .filter(move |e| &e.source_id == id || &e.target_id == id)
    }

    pub fn find_edge(
        &self,
        source: &NodeId,
        target: &NodeId,
        relation: &str,
    ) -> Option<&RelationEdge> {
        let key = triple_key(source, target, relation);
        self.edges.values().find(|e| e.triple_key() == key)
    }

    pub fn characters(&self) -> impl Iterator<Item = &EntityNode> {
        self.nodes
            .values()
            .filter(|n| n.node_type == NodeType::Character)
    }

    /// Compact single-line encoding used inside prompts.
    pub fn digest(&self) -> String {
        codec::encode_compact(self)
    }

    pub(crate) fn insert_node(&mut self, node: EntityNode) {
        self.nodes.insert(node.id.clone(), node);
    }

    pub(crate) fn insert_edge(&mut self, edge: RelationEdge) {
        self.edges.insert(edge.id.clone(), edge);
    }

    pub(crate) fn node_mut(&mut self, id: &NodeId) -> Option<&mut EntityNode> {
        self.nodes.get_mut(id)
    }

    pub(crate) fn edge_mut(&mut self, id: &EdgeId) -> Option<&mut RelationEdge> {
        self.edges.get_mut(id)
    }

    pub(crate) fn remove_node_raw(&mut self, id: &NodeId) -> Option<EntityNode> {
        self.nodes.remove(id)
    }

    pub(crate) fn remove_edge_raw(&mut self, id: &EdgeId) -> Option<RelationEdge> {
        self.edges.remove(id)
    }

    pub fn set_revision(&mut self, revision: u64) {
        self.revision = revision;
    }

    /// Fresh node id: 8 hex digits derived from the name and revision, bumped
    /// on collision.
    pub(crate) fn fresh_node_id(&self, name: &str) -> NodeId {
        let base = format!("node:{}:{}", name.to_lowercase(), self.revision);
        (0u32..)
            .map(|salt| NodeId(short_hash(&base, salt)))
            .find(|id| !self.nodes.contains_key(id))
            .expect("id space exhausted")
    }

    pub(crate) fn fresh_edge_id(&self, source: &NodeId, target: &NodeId, relation: &str) -> EdgeId {
        let base = format!("edge:{source}:{relation}:{target}:{}", self.revision);
        (0u32..)
            .map(|salt| EdgeId(short_hash(&base, salt)))
            .find(|id| !self.edges.contains_key(id))
            .expect("id space exhausted")
    }
}

fn short_hash(base: &str, salt: u32) -> String {
    let mut hasher = Sha256::new();
    hasher.update(base.as_bytes());
    hasher.update(salt.to_le_bytes());
    hex::encode(&hasher.finalize()[..4])
}

/// The worked example graph: a forest clearing with Elara at the Elderwood.
pub fn elderwood_example() -> SceneGraph {
    decode_graph(include_str!("../../assets/graphs/elderwood.json"))
        .expect("bundled example graph is valid")
}
