//! Mutation language and atomic batch application.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::consistency::edge_label;
use super::{
    check_consistency, normalize_relation, relation, Attributes, ConsistencyViolation, EdgeId,
    EntityNode, NodeId, NodeType, RelationEdge, SceneGraph, CURRENT_LOCATION_ATTR,
};

/// Addresses a node either by id or by (case-insensitive) name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityRef {
    Id(NodeId),
    Name(String),
}

impl EntityRef {
    pub fn name(name: impl Into<String>) -> Self {
        Self::Name(name.into())
    }
}

impl fmt::Display for EntityRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntityRef::Id(id) => write!(f, "#{id}"),
            EntityRef::Name(name) => f.write_str(name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeRef {
    Id(EdgeId),
    Triple {
        source: EntityRef,
        relation: String,
        target: EntityRef,
    },
}

impl fmt::Display for EdgeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EdgeRef::Id(id) => write!(f, "#{id}"),
            EdgeRef::Triple {
                source,
                relation,
                target,
            } => write!(f, "{source} -({relation})-> {target}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeTarget {
    Node(EntityRef),
    Edge(EdgeRef),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum GraphMutation {
    AddNode {
        name: String,
        node_type: NodeType,
        #[serde(default)]
        attributes: Attributes,
    },
    RemoveNode {
        entity: EntityRef,
    },
    AddEdge {
        source: EntityRef,
        target: EntityRef,
        relation: String,
        #[serde(default)]
        attributes: Attributes,
    },
    RemoveEdge {
        edge: EdgeRef,
    },
    SetAttribute {
        target: AttributeTarget,
        key: String,
        value: String,
    },
    RemoveAttribute {
        target: AttributeTarget,
        key: String,
    },
    /// Equivalent to removing the entity's `IS_AT` edge and adding a new one.
    MoveEntity {
        entity: EntityRef,
        location: EntityRef,
    },
}

impl GraphMutation {
    pub fn add_node(name: impl Into<String>, node_type: NodeType) -> Self {
        Self::AddNode {
            name: name.into(),
            node_type,
            attributes: Attributes::new(),
        }
    }

    pub fn add_edge(source: &str, target: &str, relation: &str) -> Self {
        Self::AddEdge {
            source: EntityRef::name(source),
            target: EntityRef::name(target),
            relation: relation.to_string(),
            attributes: Attributes::new(),
        }
    }

    pub fn remove_node(name: &str) -> Self {
        Self::RemoveNode {
            entity: EntityRef::name(name),
        }
    }

    pub fn move_entity(entity: &str, location: &str) -> Self {
        Self::MoveEntity {
            entity: EntityRef::name(entity),
            location: EntityRef::name(location),
        }
    }

    pub fn set_node_attribute(entity: &str, key: &str, value: &str) -> Self {
        Self::SetAttribute {
            target: AttributeTarget::Node(EntityRef::name(entity)),
            key: key.to_string(),
            value: value.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApplyError {
    #[error("mutation {index} is malformed: {reason}")]
    InvalidMutation { index: usize, reason: String },
    #[error("mutation {index} references unknown entity `{reference}`")]
    UnknownEntityReference { index: usize, reference: String },
    #[error("mutation {index}: name `{name}` matches {count} entities")]
    AmbiguousReference {
        index: usize,
        name: String,
        count: usize,
    },
    #[error("mutation {index}: no edge matches {edge}")]
    UnknownEdge { index: usize, edge: String },
    #[error("batch rejected with {} violation(s)", .0.len())]
    AtomicRejection(Vec<ConsistencyViolation>),
}

impl ApplyError {
    /// The rejection expressed as consistency violations. Malformed
    /// mutations have none; they are structural errors.
    pub fn violations(&self) -> Vec<ConsistencyViolation> {
        match self {
            ApplyError::InvalidMutation { .. } => Vec::new(),
            ApplyError::UnknownEntityReference { index, reference } => {
                vec![ConsistencyViolation::unknown_reference(
                    reference,
                    &format!("mutation {index}"),
                )]
            }
            ApplyError::AmbiguousReference { index, name, count } => {
                let mut v =
                    ConsistencyViolation::unknown_reference(name, &format!("mutation {index}"));
                v.message = format!("`{name}` is ambiguous: it matches {count} entities");
                vec![v]
            }
            ApplyError::UnknownEdge { index, edge } => {
                let mut v =
                    ConsistencyViolation::unknown_reference(edge, &format!("mutation {index}"));
                v.message = format!("no relation {edge} exists in the scene");
                vec![v]
            }
            ApplyError::AtomicRejection(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ApplyReport {
    pub revision: u64,
    pub applied: usize,
    pub added_nodes: Vec<NodeId>,
    pub removed_nodes: Vec<NodeId>,
    /// Coercions and skipped operations, in batch order.
    pub notes: Vec<String>,
}

/// Applies `batch` atomically. On success the returned graph satisfies every
/// invariant and its revision is one higher; on failure `graph` is untouched
/// (it is only borrowed) and the error says why. An empty batch returns an
/// identical graph with the same revision.
pub fn apply_mutations(
    graph: &SceneGraph,
    batch: &[GraphMutation],
) -> Result<(SceneGraph, ApplyReport), ApplyError> {
    let mut report = ApplyReport {
        revision: graph.revision(),
        ..ApplyReport::default()
    };
    if batch.is_empty() {
        return Ok((graph.clone(), report));
    }
    let mut work = graph.clone();
    for (index, mutation) in batch.iter().enumerate() {
        Applier {
            graph: &mut work,
            report: &mut report,
            index,
        }
        .apply(mutation)?;
        report.applied += 1;
    }
    sync_location_mirror(&mut work);
    let violations = check_consistency(&work);
    if !violations.is_empty() {
        return Err(ApplyError::AtomicRejection(violations));
    }
    work.set_revision(graph.revision() + 1);
    report.revision = work.revision();
    Ok((work, report))
}

/// Mirrors each character's single `IS_AT` target into `current_location_id`.
fn sync_location_mirror(graph: &mut SceneGraph) {
    let updates: Vec<(NodeId, Option<NodeId>)> = graph
        .characters()
        .filter_map(|c| {
            let targets: Vec<&NodeId> = graph
                .outgoing(&c.id)
                .filter(|e| e.relation == relation::IS_AT)
                .map(|e| &e.target_id)
                .collect();
            match targets.as_slice() {
                [] => Some((c.id.clone(), None)),
                [one] => Some((c.id.clone(), Some((*one).clone()))),
                _ => None,
            }
        })
        .collect();
    for (id, target) in updates {
        let node = graph.node_mut(&id).expect("character exists");
        match target {
            Some(t) => {
                node.attributes
                    .insert(CURRENT_LOCATION_ATTR.to_string(), t.0);
            }
            None => {
                node.attributes.remove(CURRENT_LOCATION_ATTR);
            }
        }
    }
}

struct Applier<'a> {
    graph: &'a mut SceneGraph,
    report: &'a mut ApplyReport,
    index: usize,
}

impl Applier<'_> {
    fn invalid(&self, reason: impl Into<String>) -> ApplyError {
        ApplyError::InvalidMutation {
            index: self.index,
            reason: reason.into(),
        }
    }

    fn resolve(&self, entity: &EntityRef) -> Result<NodeId, ApplyError> {
        match entity {
            EntityRef::Id(id) => {
                if self.graph.node(id).is_some() {
                    Ok(id.clone())
                } else {
                    Err(ApplyError::UnknownEntityReference {
                        index: self.index,
                        reference: id.0.clone(),
                    })
                }
            }
            EntityRef::Name(name) => {
                let found = self.graph.find_by_name(name);
                match found.as_slice() {
                    [] => Err(ApplyError::UnknownEntityReference {
                        index: self.index,
                        reference: name.clone(),
                    }),
                    [one] => Ok(one.id.clone()),
                    many => Err(ApplyError::AmbiguousReference {
                        index: self.index,
                        name: name.clone(),
                        count: many.len(),
                    }),
                }
            }
        }
    }

    fn resolve_edge(&self, edge: &EdgeRef) -> Result<EdgeId, ApplyError> {
        let missing = || ApplyError::UnknownEdge {
            index: self.index,
            edge: edge.to_string(),
        };
        match edge {
            EdgeRef::Id(id) => self
                .graph
                .edge(id)
                .map(|e| e.id.clone())
                .ok_or_else(missing),
            EdgeRef::Triple {
                source,
                relation,
                target,
            } => {
                let rel = normalize_relation(relation)
                    .ok_or_else(|| self.invalid(format!("`{relation}` is not a relation token")))?;
                let s = self.resolve(source)?;
                let t = self.resolve(target)?;
                self.graph
                    .find_edge(&s, &t, &rel)
                    .map(|e| e.id.clone())
                    .ok_or_else(missing)
            }
        }
    }

    fn attributes_mut(&mut self, target: &AttributeTarget) -> Result<&mut Attributes, ApplyError> {
        match target {
            AttributeTarget::Node(entity) => {
                let id = self.resolve(entity)?;
                Ok(&mut self.graph.node_mut(&id).expect("resolved").attributes)
            }
            AttributeTarget::Edge(edge) => {
                let id = self.resolve_edge(edge)?;
                Ok(&mut self.graph.edge_mut(&id).expect("resolved").attributes)
            }
        }
    }

    fn apply(&mut self, mutation: &GraphMutation) -> Result<(), ApplyError> {
        match mutation {
            GraphMutation::AddNode {
                name,
                node_type,
                attributes,
            } => self.add_node(name, *node_type, attributes),
            GraphMutation::RemoveNode { entity } => self.remove_node(entity),
            GraphMutation::AddEdge {
                source,
                target,
                relation,
                attributes,
            } => self.add_edge(source, target, relation, attributes),
            GraphMutation::RemoveEdge { edge } => {
                let id = self.resolve_edge(edge)?;
                self.graph.remove_edge_raw(&id);
                Ok(())
            }
            GraphMutation::SetAttribute { target, key, value } => {
                if key.trim().is_empty() {
                    return Err(self.invalid("attribute key is empty"));
                }
                self.attributes_mut(target)?
                    .insert(key.clone(), value.clone());
                Ok(())
            }
            GraphMutation::RemoveAttribute { target, key } => {
                self.attributes_mut(target)?.remove(key);
                Ok(())
            }
            GraphMutation::MoveEntity { entity, location } => self.move_entity(entity, location),
        }
    }

    fn add_node(
        &mut self,
        name: &str,
        node_type: NodeType,
        attributes: &Attributes,
    ) -> Result<(), ApplyError> {
        let name = name.trim();
        if name.is_empty() {
            return Err(self.invalid("node name is empty"));
        }
        let existing = self.graph.find_by_name(name);
        match existing.as_slice() {
            [] => {
                let id = self.graph.fresh_node_id(name);
                self.graph.insert_node(EntityNode {
                    id: id.clone(),
                    name: name.to_string(),
                    node_type,
                    attributes: attributes.clone(),
                });
                self.report.added_nodes.push(id);
            }
            [one] => {
                let id = one.id.clone();
                if one.node_type != node_type {
                    self.report.notes.push(format!(
                        "AddNode({name}): existing {} kept its type; {node_type} ignored",
                        one.node_type
                    ));
                }
                let node = self.graph.node_mut(&id).expect("found");
                node.attributes
                    .extend(attributes.iter().map(|(k, v)| (k.clone(), v.clone())));
                self.report
                    .notes
                    .push(format!("AddNode({name}) merged into existing node {id}"));
            }
            many => {
                return Err(ApplyError::AmbiguousReference {
                    index: self.index,
                    name: name.to_string(),
                    count: many.len(),
                })
            }
        }
        Ok(())
    }

    fn remove_node(&mut self, entity: &EntityRef) -> Result<(), ApplyError> {
        let id = self.resolve(entity)?;
        let node = self.graph.node(&id).expect("resolved");
        if node.node_type == NodeType::Event {
            self.report.notes.push(format!(
                "RemoveNode({}) skipped: events are append-only",
                node.name
            ));
            return Ok(());
        }
        let incident: Vec<EdgeId> = self.graph.incident(&id).map(|e| e.id.clone()).collect();
        for edge in incident {
            self.graph.remove_edge_raw(&edge);
        }
        self.graph.remove_node_raw(&id);
        self.report.added_nodes.retain(|n| n != &id);
        self.report.removed_nodes.push(id);
        Ok(())
    }

    fn add_edge(
        &mut self,
        source: &EntityRef,
        target: &EntityRef,
        relation: &str,
        attributes: &Attributes,
    ) -> Result<(), ApplyError> {
        let rel = normalize_relation(relation)
            .ok_or_else(|| self.invalid(format!("`{relation}` is not a relation token")))?;
        let mut s = self.resolve(source)?;
        let mut t = self.resolve(target)?;
        if rel == relation::NEAR && t < s {
            std::mem::swap(&mut s, &mut t);
        }
        if let Some(existing) = self.graph.find_edge(&s, &t, &rel) {
            let id = existing.id.clone();
            let label = edge_label(self.graph, existing);
            let edge = self.graph.edge_mut(&id).expect("found");
            edge.attributes
                .extend(attributes.iter().map(|(k, v)| (k.clone(), v.clone())));
            self.report
                .notes
                .push(format!("AddEdge({label}) merged into existing edge {id}"));
            return Ok(());
        }
        let id = self.graph.fresh_edge_id(&s, &t, &rel);
        self.graph.insert_edge(RelationEdge {
            id,
            source_id: s,
            target_id: t,
            relation: rel,
            attributes: attributes.clone(),
        });
        Ok(())
    }

    fn move_entity(&mut self, entity: &EntityRef, location: &EntityRef) -> Result<(), ApplyError> {
        let who = self.resolve(entity)?;
        let to = self.resolve(location)?;
        let previous: Vec<EdgeId> = self
            .graph
            .outgoing(&who)
            .filter(|e| e.relation == relation::IS_AT && e.target_id != to)
            .map(|e| e.id.clone())
            .collect();
        for id in previous {
            self.graph.remove_edge_raw(&id);
        }
        if self.graph.find_edge(&who, &to, relation::IS_AT).is_none() {
            let id = self.graph.fresh_edge_id(&who, &to, relation::IS_AT);
            self.graph.insert_edge(RelationEdge {
                id,
                source_id: who,
                target_id: to,
                relation: relation::IS_AT.to_string(),
                attributes: Attributes::new(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{elderwood_example, encode_graph, ViolationKind};

    fn is_at_targets(g: &SceneGraph, who: &str) -> Vec<String> {
        let id = g.find_by_name(who)[0].id.clone();
        g.outgoing(&id)
            .filter(|e| e.relation == "IS_AT")
            .map(|e| g.node(&e.target_id).unwrap().name.clone())
            .collect()
    }

    #[test]
    fn remove_node_prunes_incident_edges() {
        let g = elderwood_example();
        let (g2, report) = apply_mutations(&g, &[GraphMutation::remove_node("Elderwood")]).unwrap();
        assert!(g2.find_by_name("Elderwood").is_empty());
        assert!(g2.edge(&EdgeId::from("625524a2")).is_none());
        assert!(g2.edge(&EdgeId::from("aca05c17")).is_none());
        assert!(g2.edge(&EdgeId::from("7ea31f73")).is_some());
        assert_eq!(report.removed_nodes, vec![NodeId::from("cdbd9338")]);
        assert_eq!(g2.revision(), 1);
        let elara = &g2.find_by_name("Elara")[0];
        assert!(!elara.attributes.contains_key(CURRENT_LOCATION_ATTR));
    }

    #[test]
    fn empty_batch_is_identity() {
        let g = elderwood_example();
        let (g2, report) = apply_mutations(&g, &[]).unwrap();
        assert_eq!(g2, g);
        assert_eq!(report.revision, 0);
    }

    #[test]
    fn move_entity_replaces_location() {
        let g = elderwood_example();
        let (g2, _) = apply_mutations(
            &g,
            &[GraphMutation::move_entity("elara", "Forgotten Shrine")],
        )
        .unwrap();
        assert_eq!(is_at_targets(&g2, "Elara"), vec!["Forgotten Shrine"]);
        assert_eq!(
            g2.find_by_name("Elara")[0].attributes[CURRENT_LOCATION_ATTR],
            "afe85846"
        );
    }

    #[test]
    fn second_is_at_is_rejected_atomically() {
        let g = elderwood_example();
        let before = encode_graph(&g);
        let err = apply_mutations(
            &g,
            &[
                GraphMutation::add_node("Lantern", NodeType::Object),
                GraphMutation::add_edge("Elara", "Forgotten Shrine", "IS_AT"),
            ],
        )
        .unwrap_err();
        let ApplyError::AtomicRejection(v) = &err else {
            panic!("unexpected {err:?}")
        };
        assert_eq!(v[0].kind, ViolationKind::MultipleLocations);
        assert_eq!(encode_graph(&g), before);
    }

    #[test]
    fn unknown_reference_unless_added_earlier_in_batch() {
        let g = elderwood_example();
        let err = apply_mutations(&g, &[GraphMutation::add_edge("Elara", "datapad", "HOLDS")])
            .unwrap_err();
        assert_eq!(
            err,
            ApplyError::UnknownEntityReference {
                index: 0,
                reference: "datapad".into()
            }
        );
        assert_eq!(
            err.violations()[0].kind,
            ViolationKind::UnknownEntityReference
        );

        let (g2, report) = apply_mutations(
            &g,
            &[
                GraphMutation::add_node("datapad", NodeType::Object),
                GraphMutation::add_edge("Elara", "datapad", "holds"),
            ],
        )
        .unwrap();
        assert_eq!(report.added_nodes.len(), 1);
        let dp = &g2.find_by_name("Datapad")[0];
        assert!(g2
            .find_edge(&NodeId::from("de1cf932"), &dp.id, "HOLDS")
            .is_some());
    }

    #[test]
    fn duplicate_add_node_merges_attributes() {
        let g = elderwood_example();
        let mut attrs = Attributes::new();
        attrs.insert("mood".into(), "weary".into());
        let (g2, report) = apply_mutations(
            &g,
            &[GraphMutation::AddNode {
                name: "ELARA".into(),
                node_type: NodeType::Character,
                attributes: attrs,
            }],
        )
        .unwrap();
        assert_eq!(g2.node_count(), g.node_count());
        assert_eq!(g2.find_by_name("elara")[0].attributes["mood"], "weary");
        assert_eq!(report.notes.len(), 1);
    }

    #[test]
    fn near_is_stored_once() {
        let g = elderwood_example();
        let (g2, _) = apply_mutations(
            &g,
            &[
                GraphMutation::add_edge("Forgotten Shrine", "Elderwood", "NEAR"),
                GraphMutation::add_edge("Elderwood", "Forgotten Shrine", "near"),
            ],
        )
        .unwrap();
        let near: Vec<_> = g2.edges().filter(|e| e.relation == "NEAR").collect();
        assert_eq!(near.len(), 1);
        assert!(near[0].source_id < near[0].target_id);
    }

    #[test]
    fn events_are_not_removed() {
        let g = elderwood_example();
        let (g2, report) =
            apply_mutations(&g, &[GraphMutation::remove_node("Spirit Revelation")]).unwrap();
        assert_eq!(g2.node_count(), 5);
        assert!(report.notes[0].contains("append-only"));
    }

    #[test]
    fn containment_cycle_rejected() {
        let g = elderwood_example();
        let err = apply_mutations(
            &g,
            &[GraphMutation::add_edge(
                "Whispering Woods",
                "Elderwood",
                "INSIDE",
            )],
        )
        .unwrap_err();
        assert_eq!(err.violations()[0].kind, ViolationKind::ContainmentCycle);
    }

    #[test]
    fn edge_attributes_and_removal() {
        let g = elderwood_example();
        let triple = EdgeRef::Triple {
            source: EntityRef::name("Elderwood"),
            relation: "inside".into(),
            target: EntityRef::name("Whispering Woods"),
        };
        let (g2, _) = apply_mutations(
            &g,
            &[GraphMutation::SetAttribute {
                target: AttributeTarget::Edge(triple.clone()),
                key: "depth".into(),
                value: "heart".into(),
            }],
        )
        .unwrap();
        assert_eq!(
            g2.edge(&EdgeId::from("aca05c17")).unwrap().attributes["depth"],
            "heart"
        );
        let (g3, _) = apply_mutations(
            &g2,
            &[GraphMutation::RemoveEdge {
                edge: triple.clone(),
            }],
        )
        .unwrap();
        assert!(g3.edge(&EdgeId::from("aca05c17")).is_none());
        let err = apply_mutations(&g3, &[GraphMutation::RemoveEdge { edge: triple }]).unwrap_err();
        assert!(matches!(err, ApplyError::UnknownEdge { .. }));
    }

    #[test]
    fn ambiguous_names_are_errors() {
        let mut g = SceneGraph::new();
        for id in ["a", "b"] {
            g.insert_node(EntityNode {
                id: NodeId::from(id),
                name: "Twin".into(),
                node_type: NodeType::Character,
                attributes: Attributes::new(),
            });
        }
        let err = apply_mutations(&g, &[GraphMutation::remove_node("twin")]).unwrap_err();
        assert!(matches!(
            err,
            ApplyError::AmbiguousReference { count: 2, .. }
        ));
    }

    #[test]
    fn mutations_serialize_with_op_tags() {
        let m = GraphMutation::move_entity("Elara", "Shrine");
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(
            json,
            r#"{"op":"move_entity","entity":{"name":"Elara"},"location":{"name":"Shrine"}}"#
        );
        assert_eq!(serde_json::from_str::<GraphMutation>(&json).unwrap(), m);
    }
}
