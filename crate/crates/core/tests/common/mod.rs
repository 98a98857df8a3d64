//! Shared generators and fixtures for integration tests.
#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scenewright::graph::{
    apply_mutations, elderwood_example, AttributeTarget, EdgeId, EdgeRef, EntityNode, EntityRef,
    GraphMutation, NodeId, NodeType, RelationEdge, SceneGraph,
};
use scenewright::narrator::{StoryConfig, DEFAULT_SUMMARY_CAP};
use scenewright::tone::{Intensity, ToneSpec};
use scenewright::visual::{CharacterProfile, StylePreference};

/// Up to 50 distinct names, so generated graphs stay within 50 nodes.
pub const NAME_POOL: usize = 50;

pub const RELATIONS: [&str; 8] = [
    "IS_AT",
    "INSIDE",
    "ON",
    "NEAR",
    "HOLDS",
    "PARTICIPATES_IN",
    "is at",
    "bad rel!",
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A name from the graph most of the time, otherwise from the pool.
fn name(rng: &mut ChaCha8Rng, graph: &SceneGraph) -> String {
    if graph.node_count() > 0 && rng.random_bool(0.8) {
        let i = rng.random_range(0..graph.node_count());
        graph.nodes().nth(i).expect("in range").name.clone()
    } else {
        format!("E{}", rng.random_range(0..NAME_POOL))
    }
}

fn node_type(rng: &mut ChaCha8Rng) -> NodeType {
    *NodeType::ALL.choose(rng).expect("nonempty")
}

pub fn random_mutation(rng: &mut ChaCha8Rng, graph: &SceneGraph) -> GraphMutation {
    match rng.random_range(0..10) {
        0..=2 => GraphMutation::add_node(
            format!("E{}", rng.random_range(0..NAME_POOL)),
            node_type(rng),
        ),
        3 => GraphMutation::remove_node(&name(rng, graph)),
        4..=5 => GraphMutation::add_edge(
            &name(rng, graph),
            &name(rng, graph),
            RELATIONS.choose(rng).expect("nonempty"),
        ),
        6 => GraphMutation::RemoveEdge {
            edge: EdgeRef::Triple {
                source: EntityRef::name(name(rng, graph)),
                relation: RELATIONS[rng.random_range(0..6)].to_string(),
                target: EntityRef::name(name(rng, graph)),
            },
        },
        7 => GraphMutation::set_node_attribute(
            &name(rng, graph),
            ["mood", "state", ""][rng.random_range(0..3)],
            "x",
        ),
        8 => GraphMutation::RemoveAttribute {
            target: AttributeTarget::Node(EntityRef::name(name(rng, graph))),
            key: "mood".into(),
        },
        _ => GraphMutation::move_entity(&name(rng, graph), &name(rng, graph)),
    }
}

pub fn random_batch(
    rng: &mut ChaCha8Rng,
    graph: &SceneGraph,
    max_len: usize,
) -> Vec<GraphMutation> {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| random_mutation(rng, graph)).collect()
}

/// A consistent graph grown from accepted random batches.
pub fn random_graph(rng: &mut ChaCha8Rng) -> SceneGraph {
    let mut g = if rng.random_bool(0.2) {
        elderwood_example()
    } else {
        SceneGraph::new()
    };
    let rounds = rng.random_range(0..40);
    for _ in 0..rounds {
        let batch = random_batch(rng, &g, 4);
        if let Ok((next, _)) = apply_mutations(&g, &batch) {
            g = next;
        }
    }
    g
}

/// An arbitrary graph with no consistency guarantees, for reachability
/// checks.
pub fn raw_graph(rng: &mut ChaCha8Rng) -> SceneGraph {
    let n = rng.random_range(1..=50);
    let nodes: Vec<EntityNode> = (0..n)
        .map(|i| EntityNode {
            id: NodeId(format!("n{i:02}")),
            name: format!("N{i}"),
            node_type: node_type(rng),
            attributes: Default::default(),
        })
        .collect();
    let m = rng.random_range(0..=n * 2);
    let edges: Vec<RelationEdge> = (0..m)
        .map(|j| RelationEdge {
            id: EdgeId(format!("e{j:03}")),
            source_id: NodeId(format!("n{:02}", rng.random_range(0..n))),
            target_id: NodeId(format!("n{:02}", rng.random_range(0..n))),
            relation: RELATIONS[rng.random_range(0..6)].to_string(),
            attributes: Default::default(),
        })
        .collect();
    SceneGraph::from_parts(nodes, edges, 0)
}

pub fn story_config(total_scenes: u32, seed: u64) -> StoryConfig {
    StoryConfig {
        premise: "A young ranger searches the old forest for the spirit that sleeps inside the great tree.".into(),
        character_profiles: vec![
            CharacterProfile::new("Elara", "A young ranger bound to the forest, quiet and watchful."),
            CharacterProfile::new("Captain Rook", "A privateer who lost his ship and kept his pride."),
        ],
        setting: "The Whispering Woods and the river towns around them".into(),
        style: StylePreference::new("Watercolor", &["soft edges", "muted palette"]),
        arc_name: "Classic Arc".into(),
        user_tones: vec![
            ToneSpec::new("Mystery", Intensity::High),
            ToneSpec::new("Hope", Intensity::Medium),
        ],
        nac_influence: true,
        total_scenes,
        seed,
        summary_cap: DEFAULT_SUMMARY_CAP,
        initial_graph: Some(elderwood_example()),
    }
}
