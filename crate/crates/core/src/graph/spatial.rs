use std::collections::{BTreeSet, VecDeque};

use thiserror::Error;

use super::{relation, NodeId, SceneGraph};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown entity `{0}`")]
pub struct UnknownEntity(pub NodeId);

/// Direct containment parents of `id` (targets of its `IS_AT`, `INSIDE` and
/// `ON` edges), in edge-id order.
pub fn containment_targets<'a>(
    graph: &'a SceneGraph,
    id: &'a NodeId,
) -> impl Iterator<Item = &'a NodeId> + 'a {
    graph
        .outgoing(id)
        .filter(|e| relation::is_containment(&e.relation))
        .map(|e| &e.target_id)
}

/// Where an entity is.
///
/// Without `transitive` this is the direct `IS_AT` target (zero or one
/// element). With it, the whole containment chain is walked breadth-first
/// over `IS_AT`/`INSIDE`/`ON` edges, nearest container first, so
/// `D -ON-> E -INSIDE-> F` resolves to `[E, F]`.
pub fn resolve_location(
    graph: &SceneGraph,
    entity: &NodeId,
    transitive: bool,
) -> Result<Vec<NodeId>, UnknownEntity> {
    if graph.node(entity).is_none() {
        return Err(UnknownEntity(entity.clone()));
    }
    if !transitive {
        return Ok(graph
            .outgoing(entity)
            .find(|e| e.relation == relation::IS_AT)
            .map(|e| e.target_id.clone())
            .into_iter()
            .collect());
    }
    let mut seen = BTreeSet::from([entity.clone()]);
    let mut queue = VecDeque::from([entity.clone()]);
    let mut chain = Vec::new();
    while let Some(current) = queue.pop_front() {
        for next in containment_targets(graph, &current) {
            if graph.node(next).is_some() && seen.insert(next.clone()) {
                chain.push(next.clone());
                queue.push_back(next.clone());
            }
        }
    }
    Ok(chain)
}
