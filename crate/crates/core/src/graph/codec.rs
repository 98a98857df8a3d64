//! JSON graph document: `{"revision", "nodes": [...], "edges": [...]}`.
//!
//! Decoding walks a `serde_json::Value` by hand so that every schema error
//! carries the JSON path of the offending field.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::{Attributes, EdgeId, EntityNode, NodeId, NodeType, RelationEdge, SceneGraph};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("schema error at {path}: {reason}")]
pub struct SchemaError {
    pub path: String,
    pub reason: String,
}

impl SchemaError {
    pub fn new(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Prefixes the path, for documents embedded in larger documents.
    pub fn nested(self, prefix: &str) -> Self {
        let path = if self.path == "$" {
            prefix.to_string()
        } else {
            format!("{prefix}{}", self.path.trim_start_matches('$'))
        };
        Self { path, ..self }
    }
}

#[derive(Serialize)]
struct NodeDoc<'a> {
    id: &'a str,
    name: &'a str,
    node_type: &'static str,
    attributes: &'a Attributes,
}

#[derive(Serialize)]
struct EdgeDoc<'a> {
    id: &'a str,
    source_id: &'a str,
    target_id: &'a str,
    relation: &'a str,
    attributes: &'a Attributes,
}

#[derive(Serialize)]
struct GraphDoc<'a> {
    revision: u64,
    nodes: Vec<NodeDoc<'a>>,
    edges: Vec<EdgeDoc<'a>>,
}

fn to_doc(graph: &SceneGraph) -> GraphDoc<'_> {
    GraphDoc {
        revision: graph.revision(),
        nodes: graph
            .nodes()
            .map(|n| NodeDoc {
                id: n.id.as_str(),
                name: &n.name,
                node_type: n.node_type.as_str(),
                attributes: &n.attributes,
            })
            .collect(),
        edges: graph
            .edges()
            .map(|e| EdgeDoc {
                id: e.id.as_str(),
                source_id: e.source_id.as_str(),
                target_id: e.target_id.as_str(),
                relation: &e.relation,
                attributes: &e.attributes,
            })
            .collect(),
    }
}

/// Pretty-printed document; nodes and edges in id order.
pub fn encode_graph(graph: &SceneGraph) -> String {
    serde_json::to_string_pretty(&to_doc(graph)).expect("graph document serializes")
}

pub(crate) fn encode_compact(graph: &SceneGraph) -> String {
    serde_json::to_string(&to_doc(graph)).expect("graph document serializes")
}

impl Serialize for SceneGraph {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        to_doc(self).serialize(serializer)
    }
}

/// Embedded graphs use the same document schema, so errors carry the same
/// paths relative to the graph root.
impl<'de> Deserialize<'de> for SceneGraph {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        decode_value(&value).map_err(serde::de::Error::custom)
    }
}

pub fn decode_graph(document: &str) -> Result<SceneGraph, SchemaError> {
    let value: Value = serde_json::from_str(document)
        .map_err(|e| SchemaError::new("$", format!("invalid JSON: {e}")))?;
    decode_value(&value)
}

/// Decodes an already-parsed graph document.
pub fn decode_value(value: &Value) -> Result<SceneGraph, SchemaError> {
    let root = value
        .as_object()
        .ok_or_else(|| SchemaError::new("$", "expected an object"))?;
    reject_unknown(root, "$", &["revision", "nodes", "edges"])?;
    let revision = match root.get("revision") {
        None => 0,
        Some(v) => v
            .as_u64()
            .ok_or_else(|| SchemaError::new("$.revision", "expected a non-negative integer"))?,
    };
    let nodes = array(root, "$", "nodes")?;
    let edges = array(root, "$", "edges")?;

    let mut node_ids = BTreeSet::new();
    let mut decoded_nodes = Vec::with_capacity(nodes.len());
    for (i, raw) in nodes.iter().enumerate() {
        let path = format!("$.nodes[{i}]");
        let obj = raw
            .as_object()
            .ok_or_else(|| SchemaError::new(&path, "expected an object"))?;
        reject_unknown(obj, &path, &["id", "name", "node_type", "attributes"])?;
        let id = string(obj, &path, "id")?;
        if !node_ids.insert(id.clone()) {
            return Err(SchemaError::new(
                format!("{path}.id"),
                format!("duplicate node id `{id}`"),
            ));
        }
        let name = string(obj, &path, "name")?;
        if name.trim().is_empty() {
            return Err(SchemaError::new(
                format!("{path}.name"),
                "name must be nonempty",
            ));
        }
        let type_str = string(obj, &path, "node_type")?;
        let node_type = NodeType::parse(&type_str).ok_or_else(|| {
            SchemaError::new(
                format!("{path}.node_type"),
                format!("unknown node_type `{type_str}` (expected character, object, location or event)"),
            )
        })?;
        decoded_nodes.push(EntityNode {
            id: NodeId(id),
            name,
            node_type,
            attributes: attributes(obj, &path)?,
        });
    }

    let mut edge_ids = BTreeSet::new();
    let mut decoded_edges = Vec::with_capacity(edges.len());
    for (i, raw) in edges.iter().enumerate() {
        let path = format!("$.edges[{i}]");
        let obj = raw
            .as_object()
            .ok_or_else(|| SchemaError::new(&path, "expected an object"))?;
        reject_unknown(
            obj,
            &path,
            &["id", "source_id", "target_id", "relation", "attributes"],
        )?;
        let id = string(obj, &path, "id")?;
        if !edge_ids.insert(id.clone()) {
            return Err(SchemaError::new(
                format!("{path}.id"),
                format!("duplicate edge id `{id}`"),
            ));
        }
        let relation = string(obj, &path, "relation")?;
        if super::normalize_relation(&relation).as_deref() != Some(relation.as_str()) {
            return Err(SchemaError::new(
                format!("{path}.relation"),
                format!("relation `{relation}` is not an uppercase token"),
            ));
        }
        decoded_edges.push(RelationEdge {
            id: EdgeId(id),
            source_id: NodeId(string(obj, &path, "source_id")?),
            target_id: NodeId(string(obj, &path, "target_id")?),
            relation,
            attributes: attributes(obj, &path)?,
        });
    }

    Ok(SceneGraph::from_parts(
        decoded_nodes,
        decoded_edges,
        revision,
    ))
}

fn reject_unknown(
    obj: &Map<String, Value>,
    path: &str,
    allowed: &[&str],
) -> Result<(), SchemaError> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(SchemaError::new(format!("{path}.{k}"), "unknown field")),
        None => Ok(()),
    }
}

fn array<'a>(
    obj: &'a Map<String, Value>,
    path: &str,
    key: &str,
) -> Result<&'a Vec<Value>, SchemaError> {
    obj.get(key)
        .ok_or_else(|| SchemaError::new(format!("{path}.{key}"), "missing required field"))?
        .as_array()
        .ok_or_else(|| SchemaError::new(format!("{path}.{key}"), "expected an array"))
}

fn string(obj: &Map<String, Value>, path: &str, key: &str) -> Result<String, SchemaError> {
    obj.get(key)
        .ok_or_else(|| SchemaError::new(format!("{path}.{key}"), "missing required field"))?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| SchemaError::new(format!("{path}.{key}"), "expected a string"))
}

fn attributes(obj: &Map<String, Value>, path: &str) -> Result<Attributes, SchemaError> {
    let Some(raw) = obj.get("attributes") else {
        return Err(SchemaError::new(
            format!("{path}.attributes"),
            "missing required field",
        ));
    };
    let map = raw
        .as_object()
        .ok_or_else(|| SchemaError::new(format!("{path}.attributes"), "expected an object"))?;
    map.iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k.clone(), s.clone())),
            _ => Err(SchemaError::new(
                format!("{path}.attributes.{k}"),
                "attribute values must be strings",
            )),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::elderwood_example;

    #[test]
    fn example_round_trips() {
        let g = elderwood_example();
        let text = encode_graph(&g);
        let back = decode_graph(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(encode_graph(&back), text);
        let names: BTreeSet<_> = back.nodes().map(|n| n.name.as_str()).collect();
        assert_eq!(
            names,
            BTreeSet::from([
                "Whispering Woods",
                "Forgotten Shrine",
                "Elara",
                "Elderwood",
                "Spirit Revelation"
            ])
        );
        assert_eq!(back.edge_count(), 3);
    }

    #[test]
    fn empty_graph_round_trips() {
        let g = SceneGraph::new();
        assert_eq!(decode_graph(&encode_graph(&g)).unwrap(), g);
    }

    #[test]
    fn rejects_unknown_node_type() {
        let doc = r#"{"nodes":[{"id":"a","name":"Cart","node_type":"vehicle","attributes":{}}],"edges":[]}"#;
        let err = decode_graph(doc).unwrap_err();
        assert_eq!(err.path, "$.nodes[0].node_type");
        assert!(err.reason.contains("vehicle"));
    }

    #[test]
    fn rejects_missing_fields_and_duplicates() {
        let missing = r#"{"nodes":[{"id":"a","node_type":"object","attributes":{}}],"edges":[]}"#;
        assert_eq!(decode_graph(missing).unwrap_err().path, "$.nodes[0].name");

        let dup = r#"{"nodes":[
            {"id":"a","name":"x","node_type":"object","attributes":{}},
            {"id":"a","name":"y","node_type":"object","attributes":{}}],"edges":[]}"#;
        let err = decode_graph(dup).unwrap_err();
        assert_eq!(err.path, "$.nodes[1].id");

        let no_edges = r#"{"nodes":[]}"#;
        assert_eq!(decode_graph(no_edges).unwrap_err().path, "$.edges");

        let bad_attr = r#"{"nodes":[{"id":"a","name":"x","node_type":"object","attributes":{"n":3}}],"edges":[]}"#;
        assert_eq!(
            decode_graph(bad_attr).unwrap_err().path,
            "$.nodes[0].attributes.n"
        );
    }

    #[test]
    fn decode_keeps_dangling_edges_for_checking() {
        let doc = r#"{"nodes":[{"id":"a","name":"x","node_type":"object","attributes":{}}],
            "edges":[{"id":"e","source_id":"a","target_id":"zz","relation":"ON","attributes":{}}]}"#;
        let g = decode_graph(doc).unwrap();
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn nested_paths() {
        let e = SchemaError::new("$.nodes[0].id", "x").nested("$.scenes[2].graph_snapshot");
        assert_eq!(e.path, "$.scenes[2].graph_snapshot.nodes[0].id");
    }
}
