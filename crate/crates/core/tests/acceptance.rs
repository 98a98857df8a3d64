//! Acceptance suite for criteria 1 to 8. Runs without the libtest harness
//! so every criterion prints exactly one PASS/FAIL line.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;

use scenewright::arc::{stage_for_progress, stage_index_for_progress, ArcLibrary};
use scenewright::backends::fault::{Fault, FaultyText};
use scenewright::backends::mock::MockWorld;
use scenewright::backends::{
    BackendError, Backends, ImageRef, Task, TextBackend, TextRequest, VisualDescription,
};
use scenewright::director::{direct_scene, parse_director_output, MAX_REPAIRS};
use scenewright::graph::{
    apply_mutations, check_consistency, elderwood_example, encode_graph, relation,
    resolve_location, NodeId, NodeType, SceneGraph,
};
use scenewright::narrator::{
    generate_scene, run_cascade_baseline, run_story, Engine, FixedClock, StorySession,
};
use scenewright::project::{encode_project, images_dir, save_project, StoryProject};
use scenewright::tone::{map_tones, modulate, Intensity, ToneKnowledgeBase, ToneSpec, Valence};
use scenewright::visual::{ground_character, CharacterProfile, ProfileSource, StylePreference};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

struct Criterion {
    id: u8,
    title: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

const CRITERIA: [Criterion; 8] = [
    Criterion {
        id: 1,
        title: "scene-graph invariants over 1000 random batches",
        limit: Some(Duration::from_secs(10)),
        run: ac1_graph_invariants,
    },
    Criterion {
        id: 2,
        title: "transitive location equals brute-force reachability on 500 graphs",
        limit: Some(Duration::from_secs(5)),
        run: ac2_spatial_oracle,
    },
    Criterion {
        id: 3,
        title: "Classic Arc table and progress sweep",
        limit: None,
        run: ac3_arc_conformance,
    },
    Criterion {
        id: 4,
        title: "Mystery lookups and modulation oracle",
        limit: None,
        run: ac4_tone_conformance,
    },
    Criterion {
        id: 5,
        title: "deterministic 10-scene golden run",
        limit: Some(Duration::from_secs(30)),
        run: ac5_golden_run,
    },
    Criterion {
        id: 6,
        title: "cascade baseline divergence witness",
        limit: Some(Duration::from_secs(30)),
        run: ac6_baseline_divergence,
    },
    Criterion {
        id: 7,
        title: "director fuzzing and bounded repair loop",
        limit: Some(Duration::from_secs(60)),
        run: ac7_director_robustness,
    },
    Criterion {
        id: 8,
        title: "grounding idempotence and vision table fidelity",
        limit: None,
        run: ac8_grounding,
    },
];

fn main() {
    let mut failed = 0;
    for c in &CRITERIA {
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(c.run)) {
            Ok(o) => o,
            Err(p) => Err(format!(
                "panicked: {}",
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            )),
        };
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.limit) {
            (Ok(_), Some(limit)) if elapsed > limit => {
                Err(format!("took {elapsed:.2?}, limit {limit:?}"))
            }
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("AC{} PASS  {} [{elapsed:.2?}] {detail}", c.id, c.title),
            Err(why) => {
                failed += 1;
                println!("AC{} FAIL  {} [{elapsed:.2?}] {why}", c.id, c.title);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn ac1_graph_invariants() -> Outcome {
    let mut accepted = 0;
    let mut rejected = 0;
    let mut removals = 0;
    for case in 0..1000u64 {
        let mut rng = common::rng(case);
        let graph = common::random_graph(&mut rng);
        ensure!(
            graph.node_count() <= 50,
            "case {case}: {} nodes",
            graph.node_count()
        );
        let before = encode_graph(&graph);
        let batch = common::random_batch(&mut rng, &graph, 8);
        match apply_mutations(&graph, &batch) {
            Ok((next, report)) => {
                accepted += 1;
                let v = check_consistency(&next);
                ensure!(
                    v.is_empty(),
                    "case {case}: accepted batch left violations {v:?}"
                );
                for e in next.edges() {
                    ensure!(
                        next.node(&e.source_id).is_some() && next.node(&e.target_id).is_some(),
                        "case {case}: dangling edge {}",
                        e.id
                    );
                }
                for n in next.nodes().filter(|n| n.node_type == NodeType::Character) {
                    let is_at = next
                        .outgoing(&n.id)
                        .filter(|e| e.relation == relation::IS_AT)
                        .count();
                    ensure!(
                        is_at <= 1,
                        "case {case}: {} has {is_at} IS_AT edges",
                        n.name
                    );
                }
                for id in &report.removed_nodes {
                    removals += 1;
                    if next.node(id).is_none() {
                        ensure!(
                            next.edges()
                                .all(|e| &e.source_id != id && &e.target_id != id),
                            "case {case}: edges of removed {id} survive"
                        );
                    }
                }
                ensure!(
                    next.revision() == graph.revision() + 1,
                    "case {case}: revision not bumped"
                );
            }
            Err(_) => rejected += 1,
        }
        ensure!(
            encode_graph(&graph) == before,
            "case {case}: input graph changed"
        );
    }
    ensure!(
        accepted > 100 && rejected > 100,
        "unbalanced sample: {accepted} accepted, {rejected} rejected"
    );
    Ok(format!(
        "{accepted} accepted, {rejected} rejected, {removals} node removals"
    ))
}

fn reachable(graph: &SceneGraph, start: &NodeId) -> BTreeSet<NodeId> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![start.clone()];
    while let Some(n) = stack.pop() {
        for e in graph.edges() {
            if e.source_id == n
                && relation::is_containment(&e.relation)
                && graph.node(&e.target_id).is_some()
                && seen.insert(e.target_id.clone())
            {
                stack.push(e.target_id.clone());
            }
        }
    }
    seen.remove(start);
    seen
}

fn ac2_spatial_oracle() -> Outcome {
    let mut checks = 0;
    for case in 0..500u64 {
        let mut rng = common::rng(10_000 + case);
        let graph = if case % 2 == 0 {
            common::raw_graph(&mut rng)
        } else {
            common::random_graph(&mut rng)
        };
        for node in graph.nodes() {
            let chain = resolve_location(&graph, &node.id, true).map_err(|e| format!("{e:?}"))?;
            let as_set: BTreeSet<NodeId> = chain.iter().cloned().collect();
            ensure!(
                as_set.len() == chain.len(),
                "case {case}: duplicate in chain of {}",
                node.id
            );
            ensure!(
                as_set == reachable(&graph, &node.id),
                "case {case}: chain of {} differs from reachability",
                node.id
            );
            checks += 1;
        }
    }
    Ok(format!("{checks} entities checked"))
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn ac3_arc_conformance() -> Outcome {
    use Intensity::*;
    let arc = ArcLibrary::classic();
    let table: [(&str, &str, Vec<ToneSpec>, Vec<String>, f64); 5] = [
        (
            "Exposition",
            "Introduce the main character(s), setting, and initial status quo.",
            vec![ToneSpec::new("Peacefulness", Medium), ToneSpec::new("Curiosity", Low)],
            vec![],
            0.05,
        ),
        (
            "Rising Action",
            "Develop conflicts, introduce obstacles, and build tension towards the climax. Protagonist faces escalating challenges.",
            vec![
                ToneSpec::new("Suspense", High),
                ToneSpec::new("Tension", High),
                ToneSpec::new("Hope", Medium),
            ],
            strings(&["struggle", "fight", "discovery", "obstacle", "plan", "train"]),
            0.25,
        ),
        (
            "Climax",
            "Reach the peak of conflict and tension; the protagonist faces their greatest challenge and makes a decisive choice or action.",
            vec![
                ToneSpec::new("Tension", High),
                ToneSpec::new("Fear", Medium),
                ToneSpec::new("Hope", Low),
            ],
            strings(&[
                "final confrontation",
                "decisive action",
                "all or nothing",
                "showdown",
                "turning point",
                "revelation",
            ]),
            0.65,
        ),
        (
            "Falling Action",
            "Show the immediate aftermath of the climax. Conflicts begin to resolve, tension decreases.",
            vec![ToneSpec::new("Sadness", Low), ToneSpec::new("Peacefulness", Medium)],
            strings(&["aftermath", "consequences", "healing", "return", "winding down"]),
            0.80,
        ),
        (
            "Resolution",
            "Tie up loose ends. The new status quo is established. Character arcs conclude.",
            vec![ToneSpec::new("Peacefulness", High), ToneSpec::new("Hope", Medium)],
            strings(&["resolved", "new normal", "ends", "future", "legacy"]),
            0.90,
        ),
    ];
    ensure!(arc.name == "Classic Arc", "arc name {}", arc.name);
    ensure!(arc.stages.len() == 5, "{} stages", arc.stages.len());
    for (stage, (name, goal, cues, keywords, threshold)) in arc.stages.iter().zip(&table) {
        ensure!(stage.name == *name, "stage name {} != {name}", stage.name);
        ensure!(stage.goal == *goal, "{name}: goal differs");
        ensure!(
            stage.affective_cues == *cues,
            "{name}: cues {:?}",
            stage.affective_cues
        );
        ensure!(
            stage.keywords == *keywords,
            "{name}: keywords {:?}",
            stage.keywords
        );
        ensure!(
            stage.min_progress == *threshold,
            "{name}: threshold {}",
            stage.min_progress
        );
    }
    let mut last = 0;
    for pct in 0..=100u32 {
        let p = f64::from(pct) / 100.0;
        let expected = match pct {
            0..=24 => 0,
            25..=64 => 1,
            65..=79 => 2,
            80..=89 => 3,
            _ => 4,
        };
        let got = stage_index_for_progress(&arc, p);
        ensure!(got == expected, "p={p}: stage {got}, expected {expected}");
        ensure!(
            stage_for_progress(&arc, p).name == table[expected].0,
            "p={p}: stage name"
        );
        ensure!(got >= last, "p={p}: stage index decreased");
        last = got;
    }
    Ok("5 stages exact, 101 progress points".into())
}

fn ac4_tone_conformance() -> Outcome {
    use Intensity::*;
    let kb = ToneKnowledgeBase::builtin();
    let mystery = kb.get("Mystery").map_err(|e| e.to_string())?;
    let expected = [
        (
            Low,
            "curious, peculiar, subtle hint",
            "soft hum, distant rustle",
            "subtle shadows, selective focus",
        ),
        (
            Medium,
            "enigmatic, unexplained, hidden, clues",
            "eerie silence, unresolved chime, muffled whispers",
            "obscured figures, moody lighting, half-glimpsed objects",
        ),
        (
            High,
            "unfathomable, cryptic, dark truth, abyss",
            "rising dissonant drones, piercing stings, fragmented whispers",
            "impenetrable fog, silhouetted forms, extreme close-ups on obscured details",
        ),
    ];
    for (intensity, llm, sound, visual) in expected {
        let cues = mystery.intensity_specifics.get(intensity);
        ensure!(
            cues.llm_keywords.join(", ") == llm,
            "{intensity} llm keywords {:?}",
            cues.llm_keywords
        );
        ensure!(
            cues.sound_keywords.join(", ") == sound,
            "{intensity} sound keywords"
        );
        ensure!(
            cues.visual_keywords.join(", ") == visual,
            "{intensity} visual keywords"
        );
    }
    ensure!(
        mystery.description == "Evokes intrigue, curiosity, unknown, hidden truths.",
        "Mystery description"
    );

    let joy = modulate(
        &[ToneSpec::new("Joy", High)],
        &[ToneSpec::new("Despair", High)],
        true,
        &kb,
    )
    .map_err(|e| e.to_string())?;
    ensure!(
        joy[0] == ToneSpec::new("Joy", Medium),
        "Joy High + Despair High gave {joy:?}"
    );

    // Step-down oracle: a positive user tone drops one level iff influence
    // is on and some arc cue is a negative tone at High.
    let step = |i: Intensity| match i {
        High => Medium,
        _ => Low,
    };
    let by_valence = [
        (Valence::Positive, "Joy"),
        (Valence::Negative, "Fear"),
        (Valence::Neutral, "Mystery"),
    ];
    let arc_options: [(&str, Option<(&str, Intensity)>); 5] = [
        ("none", None),
        ("negative high", Some(("Despair", High))),
        ("negative medium", Some(("Despair", Medium))),
        ("positive high", Some(("Hope", High))),
        ("neutral high", Some(("Suspense", High))),
    ];
    let mut cases = 0;
    for (valence, tone) in by_valence {
        ensure!(
            kb.get(tone).ok().map(|e| e.valence) == Some(valence),
            "{tone} valence"
        );
        for intensity in Intensity::ALL {
            for influence in [false, true] {
                for (label, cue) in arc_options {
                    let cues: Vec<ToneSpec> =
                        cue.iter().map(|(t, i)| ToneSpec::new(*t, *i)).collect();
                    let out = modulate(&[ToneSpec::new(tone, intensity)], &cues, influence, &kb)
                        .map_err(|e| e.to_string())?;
                    let dominant = matches!(cue, Some((_, High)) if label == "negative high");
                    let want = if influence && dominant && valence == Valence::Positive {
                        step(intensity)
                    } else {
                        intensity
                    };
                    ensure!(
                        out[0] == ToneSpec::new(tone, want),
                        "{tone} {intensity} influence={influence} arc={label}: {:?}",
                        out[0]
                    );
                    let expected_len = if influence { 1 + cues.len() } else { 1 };
                    ensure!(out.len() == expected_len, "{tone}/{label}: {out:?}");
                    ensure!(out.iter().all(|t| t.intensity <= High), "raised intensity");
                    cases += 1;
                }
            }
        }
    }
    Ok(format!("3 intensities verbatim, {cases} modulation cases"))
}

fn run_golden(dir: &Path, seed: u64) -> Result<StoryProject, String> {
    let path = dir.join("story.json");
    let backends = Backends::mock(seed, Some(images_dir(&path)));
    let project = run_story(
        common::story_config(10, seed),
        &Engine::builtin(),
        backends,
        Arc::new(FixedClock::epoch()),
    )
    .map_err(|e| e.to_string())?;
    save_project(&project, &path).map_err(|e| e.to_string())?;
    Ok(project)
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(Result::ok)
                .map(|e| {
                    (
                        e.file_name().to_string_lossy().into_owned(),
                        std::fs::read(e.path()).unwrap_or_default(),
                    )
                })
                .collect()
        })
        .unwrap_or_default();
    out.sort();
    out
}

fn ac5_golden_run() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let project = run_golden(a.path(), 42)?;
    run_golden(b.path(), 42)?;

    let mut stages: Vec<&str> = project
        .scenes
        .iter()
        .map(|s| s.stage_name.as_str())
        .collect();
    stages.dedup();
    ensure!(
        stages
            == [
                "Exposition",
                "Rising Action",
                "Climax",
                "Falling Action",
                "Resolution"
            ],
        "stage sequence {stages:?}"
    );
    let kb = ToneKnowledgeBase::builtin();
    let mut feature_checks = 0;
    for s in &project.scenes {
        let v = check_consistency(&s.graph_snapshot);
        ensure!(v.is_empty(), "scene {}: {v:?}", s.index);
        let atm = map_tones(&s.effective_tones, &kb).map_err(|e| e.to_string())?;
        for cue in &atm.soundscape_cues {
            ensure!(
                s.soundscape_cues.contains(cue),
                "scene {}: missing cue {cue}",
                s.index
            );
        }
        for name in &s.active_characters {
            let profile = project
                .profiles
                .iter()
                .find(|p| &p.name == name)
                .ok_or(format!("scene {}: no profile for {name}", s.index))?;
            ensure!(profile.is_enriched(), "{name} not grounded");
            for f in &profile.key_visual_features {
                ensure!(
                    s.image_prompt.contains(f.as_str()),
                    "scene {}: {name}'s `{f}` missing",
                    s.index
                );
                feature_checks += 1;
            }
        }
    }
    let bytes_a = std::fs::read(a.path().join("story.json")).map_err(|e| e.to_string())?;
    let bytes_b = std::fs::read(b.path().join("story.json")).map_err(|e| e.to_string())?;
    ensure!(bytes_a == bytes_b, "project files differ between runs");
    ensure!(
        bytes_a == encode_project(&project).into_bytes(),
        "saved bytes differ from encoding"
    );
    let images_a = dir_bytes(&a.path().join("images"));
    ensure!(!images_a.is_empty(), "no image artifacts written");
    ensure!(
        images_a == dir_bytes(&b.path().join("images")),
        "image artifacts differ"
    );
    Ok(format!(
        "{} scenes, {} bytes, {feature_checks} feature checks",
        project.scenes.len(),
        bytes_a.len()
    ))
}

fn ac6_baseline_divergence() -> Outcome {
    let engine = Engine::builtin();
    let config = common::story_config(10, 42);
    let clock = Arc::new(FixedClock::epoch());
    let baseline = run_cascade_baseline(
        config.clone(),
        &engine,
        Backends::mock(42, None),
        clock.clone(),
    )
    .map_err(|e| e.to_string())?;
    let integrated =
        run_story(config, &engine, Backends::mock(42, None), clock).map_err(|e| e.to_string())?;
    ensure!(
        baseline.scenes.len() == 10,
        "{} baseline scenes",
        baseline.scenes.len()
    );
    let empty = baseline
        .scenes
        .iter()
        .filter(|s| s.graph_snapshot.is_empty())
        .count();
    ensure!(empty == 10, "{empty}/10 empty baseline snapshots");
    let mut ominous = 0;
    for s in &baseline.scenes {
        if s.narrative_text.to_lowercase().contains("ominous") {
            ominous += 1;
            ensure!(
                s.soundscape_cues.contains(&"ominous sounds".to_string()),
                "scene {} lacks the generic cue",
                s.index
            );
        }
    }
    ensure!(ominous > 0, "no baseline scene exercised the keyword cue");
    for s in &integrated.scenes {
        ensure!(
            !s.graph_snapshot.is_empty(),
            "integrated scene {} has an empty graph",
            s.index
        );
        ensure!(
            check_consistency(&s.graph_snapshot).is_empty(),
            "integrated scene {} inconsistent",
            s.index
        );
    }
    Ok(format!(
        "baseline 10/10 empty, {ominous} keyword cues; integrated 10/10 nonempty and consistent"
    ))
}

struct Fixed(String);

impl TextBackend for Fixed {
    fn complete_text(&self, _: &TextRequest) -> Result<String, BackendError> {
        Ok(self.0.clone())
    }
}

const FUZZ_CHARS: &[char] = &[
    '{', '}', '[', ']', '"', ':', ',', '`', '\n', ' ', 'a', 'e', '0', '1', '-', '.', '\\', 'é',
    '\u{0}', 'E',
];

fn fuzz_input(rng: &mut rand_chacha::ChaCha8Rng, world: &MockWorld, i: u64) -> String {
    let cap = match rng.random_range(0..100) {
        0 => 1 << 20,
        1..=9 => 64 << 10,
        _ => 4 << 10,
    };
    let len: usize = rng.random_range(0..=cap);
    let mut s = match i % 6 {
        0 => {
            let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            String::from_utf8_lossy(&bytes).into_owned()
        }
        1 => {
            let body: String = (0..len)
                .map(|_| FUZZ_CHARS[rng.random_range(0..FUZZ_CHARS.len())])
                .collect();
            format!("```json\n{body}\n```")
        }
        2 | 3 => {
            let mut chars: Vec<char> = world.sample_extraction(i).to_fenced().chars().collect();
            for _ in 0..rng.random_range(1..8) {
                let at = rng.random_range(0..=chars.len());
                match rng.random_range(0..3) {
                    0 if at < chars.len() => {
                        chars.remove(at);
                    }
                    1 => chars.insert(at, FUZZ_CHARS[rng.random_range(0..FUZZ_CHARS.len())]),
                    _ if at < chars.len() => {
                        chars[at] = FUZZ_CHARS[rng.random_range(0..FUZZ_CHARS.len())]
                    }
                    _ => {}
                }
            }
            chars.into_iter().collect()
        }
        4 => {
            let doc = grounded_payload(rng);
            let mut chars: Vec<char> = doc.chars().collect();
            if rng.random_bool(0.5) && !chars.is_empty() {
                let at = rng.random_range(0..chars.len());
                chars[at] = FUZZ_CHARS[rng.random_range(0..FUZZ_CHARS.len())];
            }
            chars.into_iter().collect()
        }
        _ => {
            let doc = world.sample_extraction(i).to_fenced();
            let padding = "x".repeat(len.saturating_sub(doc.len()));
            format!("{padding}\n{doc}")
        }
    };
    if s.len() > 1 << 20 {
        let mut end = 1 << 20;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        s.truncate(end);
    }
    s
}

/// An extraction over the example graph's entities plus a few new ones,
/// so most documents are applicable.
fn grounded_payload(rng: &mut rand_chacha::ChaCha8Rng) -> String {
    const KNOWN: [&str; 5] = [
        "Elara",
        "Elderwood",
        "Whispering Woods",
        "Forgotten Shrine",
        "Spirit Revelation",
    ];
    const FRESH: [(&str, &str); 4] = [
        ("Rook", "character"),
        ("Old Mill", "location"),
        ("lantern", "object"),
        ("Storm", "event"),
    ];
    const RELATIONS: [&str; 7] = [
        "IS_AT",
        "INSIDE",
        "ON",
        "NEAR",
        "HOLDS",
        "PARTICIPATES_IN",
        "FEARS",
    ];
    let fresh: Vec<(&str, &str)> = FRESH
        .iter()
        .copied()
        .filter(|_| rng.random_bool(0.5))
        .collect();
    let pool: Vec<&str> = KNOWN
        .iter()
        .copied()
        .chain(fresh.iter().map(|(n, _)| *n))
        .collect();
    let pick = |rng: &mut rand_chacha::ChaCha8Rng| pool[rng.random_range(0..pool.len())];
    let entities: Vec<serde_json::Value> = fresh
        .iter()
        .map(|(n, t)| serde_json::json!({"name": n, "node_type": t, "attributes": {}}))
        .collect();
    let relations: Vec<serde_json::Value> = (0..rng.random_range(0..4))
        .map(|_| {
            serde_json::json!({
                "source": pick(rng),
                "relation": RELATIONS[rng.random_range(0..RELATIONS.len())],
                "target": pick(rng),
            })
        })
        .collect();
    let changes: Vec<serde_json::Value> = (0..rng.random_range(0..3))
        .map(|_| serde_json::json!({"entity": pick(rng), "key": "mood", "value": "uneasy"}))
        .collect();
    let doc = serde_json::json!({"entities": entities, "relations": relations, "attribute_changes": changes});
    format!("Updates:\n```json\n{doc}\n```\n")
}

fn ac7_director_robustness() -> Outcome {
    let world = MockWorld::new(7);
    let base = elderwood_example();
    let base_bytes = encode_graph(&base);
    let mut rng = common::rng(777);
    let mut parsed = 0;
    let mut applied = 0;
    let mut max_len = 0;
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut panics = Vec::new();
    for i in 0..10_000u64 {
        let input = fuzz_input(&mut rng, &world, i);
        max_len = max_len.max(input.len());
        let result = catch_unwind(AssertUnwindSafe(|| -> Result<(bool, bool), String> {
            let ok = parse_director_output(&input).is_ok();
            let mut graph_changed = false;
            if ok {
                let res = direct_scene("Elara walks on.", &base, &Fixed(input.clone()), 1)
                    .map_err(|e| e.to_string())?;
                let v = check_consistency(&res.graph);
                if !v.is_empty() {
                    return Err(format!("corrupted graph: {v:?}"));
                }
                if res.correction.is_some() && res.graph != base {
                    return Err("rejected extraction changed the graph".into());
                }
                graph_changed = res.graph != base;
            }
            Ok((ok, graph_changed))
        }));
        match result {
            Ok(Ok((ok, changed))) => {
                parsed += ok as u32;
                applied += changed as u32;
            }
            Ok(Err(e)) => {
                std::panic::set_hook(hook);
                return Err(format!("input {i}: {e}"));
            }
            Err(_) => panics.push(i),
        }
    }
    std::panic::set_hook(hook);
    ensure!(
        panics.is_empty(),
        "{} panics, first at input {}",
        panics.len(),
        panics[0]
    );
    ensure!(encode_graph(&base) == base_bytes, "base graph changed");

    // Persistent consistency failures: one narration plus at most two
    // repairs, then the updates are dropped with a warning.
    let faulty = Arc::new(FaultyText::new(Arc::new(world.text())));
    faulty.always(
        Task::ExtractScene,
        Fault::containment_cycle("Old Mill", "Lantern Market"),
    );
    let backends = Backends::mock(7, None).with_text(faulty.clone());
    let mut session = StorySession::new(
        common::story_config(10, 7),
        &Engine::builtin(),
        backends,
        Arc::new(FixedClock::epoch()),
    )
    .map_err(|e| e.to_string())?;
    let before = session.graph().clone();
    let record = generate_scene(&mut session).map_err(|e| e.to_string())?;
    let narrations = faulty.calls_for(Task::NarrateScene);
    let extractions = faulty.calls_for(Task::ExtractScene);
    ensure!(narrations == 1 + MAX_REPAIRS, "{narrations} narrator calls");
    ensure!(
        extractions == 1 + MAX_REPAIRS,
        "{extractions} extraction calls"
    );
    ensure!(
        record.warnings.iter().any(|w| w.contains("dropped")),
        "no drop warning"
    );
    ensure!(
        record.graph_snapshot.nodes().count() >= before.nodes().count(),
        "graph shrank"
    );
    ensure!(
        record
            .graph_snapshot
            .find_by_name("Lantern Market")
            .is_empty(),
        "rejected updates were applied"
    );

    // Persistent parse failures share the same budget.
    let faulty = Arc::new(FaultyText::new(Arc::new(world.text())));
    faulty.always(Task::ExtractScene, Fault::garbage());
    let backends = Backends::mock(7, None).with_text(faulty.clone());
    let mut session = StorySession::new(
        common::story_config(10, 7),
        &Engine::builtin(),
        backends,
        Arc::new(FixedClock::epoch()),
    )
    .map_err(|e| e.to_string())?;
    let record = generate_scene(&mut session).map_err(|e| e.to_string())?;
    let round_trips = faulty.calls() - 3; // narration, image prompt, summary
    ensure!(
        faulty.calls_for(Task::ExtractScene) == 1 + MAX_REPAIRS,
        "{} extraction calls",
        faulty.calls_for(Task::ExtractScene)
    );
    ensure!(
        round_trips == 1 + MAX_REPAIRS,
        "{round_trips} director round-trips"
    );
    ensure!(
        record.warnings.iter().any(|w| w.contains("dropped")),
        "no drop warning"
    );

    Ok(format!(
        "10000 inputs (max {max_len} bytes), {parsed} parsed, {applied} applied, 0 panics; repairs capped at {MAX_REPAIRS}"
    ))
}

fn ac8_grounding() -> Outcome {
    let style = StylePreference::new("Watercolor", &["soft edges"]);
    let world = MockWorld::new(3).with_vision_entry(
        "portraits/mara.png",
        VisualDescription {
            appearance: "short, freckled, sharp grey eyes".into(),
            clothing: "patched green oilskin coat".into(),
            key_features: vec!["silver ear cuff".into(), "burn scar on left hand".into()],
        },
    );
    let backends = Backends {
        text: Arc::new(world.text()),
        image: Arc::new(world.image(None)),
        vision: Arc::new(world.vision()),
    };
    let rook = CharacterProfile {
        portrait_ref: Some(ImageRef("portraits/captain_rook.png".into())),
        ..CharacterProfile::new("Captain Rook", "A privateer.")
    };
    let mara = CharacterProfile {
        portrait_ref: Some(ImageRef("portraits/mara.png".into())),
        ..CharacterProfile::new("Mara", "A smuggler.")
    };
    let elara = CharacterProfile::new("Elara", "A young ranger bound to the forest.");
    let generated = CharacterProfile::generated("Vey", "A stranger from the coast.");

    for p in [&rook, &mara, &elara, &generated] {
        let once = ground_character(p, &backends, &style);
        ensure!(once.warning.is_none(), "{}: {:?}", p.name, once.warning);
        let twice = ground_character(&once.profile, &backends, &style);
        ensure!(
            twice.profile == once.profile,
            "{}: second grounding changed the profile",
            p.name
        );
        ensure!(
            twice.warning.is_none(),
            "{}: second grounding warned",
            p.name
        );
        ensure!(
            once.profile.profile_source == ProfileSource::Enriched,
            "{} not enriched",
            p.name
        );
        ensure!(
            once.profile.portrait_ref.is_some(),
            "{} has no portrait",
            p.name
        );
    }
    let r = ground_character(&rook, &backends, &style).profile;
    ensure!(
        r.appearance_details == "tall, scarred",
        "rook appearance {}",
        r.appearance_details
    );
    ensure!(
        r.consistent_clothing == "grey cloak",
        "rook clothing {}",
        r.consistent_clothing
    );
    ensure!(
        r.key_visual_features == ["eye patch"],
        "rook features {:?}",
        r.key_visual_features
    );
    let m = ground_character(&mara, &backends, &style).profile;
    ensure!(
        m.appearance_details == "short, freckled, sharp grey eyes",
        "mara appearance"
    );
    ensure!(
        m.consistent_clothing == "patched green oilskin coat",
        "mara clothing"
    );
    ensure!(
        m.key_visual_features == ["silver ear cuff", "burn scar on left hand"],
        "mara features {:?}",
        m.key_visual_features
    );
    Ok("4 profiles idempotent, 2 table entries exact".into())
}
