//! Seeded offline backends.
//!
//! Every output is a pure function of the world seed and the request bytes:
//! a ChaCha stream is keyed by `sha256(seed, task, system, prompt)`. The
//! narrator grammar writes short sentences from a fixed set of shapes, and
//! the extraction rule table recognizes exactly those shapes, so a full
//! story loop runs without a model.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{
    BackendError, ImageBackend, ImageRef, Task, TextBackend, TextRequest, VisionBackend,
    VisualDescription,
};
use crate::director::{AttributeChange, EntitySpec, ExtractionPayload, RelationSpec, Removal};
use crate::graph::{decode_graph, relation, Attributes, NodeType, SceneGraph};
use crate::prompts::{field, section};

const FALLBACK_HERO: &str = "Mara";

const LOCATIONS: [&str; 8] = [
    "Old Mill",
    "Lantern Market",
    "Sunken Archive",
    "Watchtower",
    "Glass Observatory",
    "Ferry Landing",
    "Salt Caves",
    "Hollow Chapel",
];

const REGIONS: [&str; 4] = ["Northern Vale", "Ashen Coast", "Silver Reach", "Deepwood"];

const OBJECTS: [&str; 8] = [
    "brass key",
    "datapad",
    "lantern",
    "old map",
    "silver compass",
    "sealed letter",
    "bone flute",
    "cracked mirror",
];

const ADJECTIVES: [&str; 8] = [
    "tarnished",
    "glowing",
    "broken",
    "warm",
    "humming",
    "cold",
    "cracked",
    "silent",
];

const EVENTS: [&str; 8] = [
    "Storm Omen",
    "Broken Seal",
    "Midnight Bargain",
    "Falling Star",
    "Silent Vigil",
    "Lantern Procession",
    "Tide Reversal",
    "Hidden Council",
];

const CAPTAINS: [&str; 6] = ["Rook", "Vey", "Marlow", "Ines", "Dace", "Orrin"];

const OPENERS: [&str; 5] = [
    "{P} pauses, sensing {K}.",
    "{P} studies the path ahead and thinks of {K}.",
    "A hush falls as {P} considers {K}.",
    "{P} breathes slowly; everything speaks of {K}.",
    "{P} cannot shake the feeling of {K}.",
];

const AMBIENCE: [&str; 5] = [
    "distant wind",
    "creaking timber",
    "soft footsteps",
    "crackling fire",
    "dripping water",
];

const TWISTS: [&str; 8] = [
    "{C} discovers that the {O} was a forgery all along",
    "A stranger named Captain {N} arrives claiming to know {C}'s past",
    "{C} is betrayed by a trusted ally",
    "The {L} collapses, cutting {C} off from escape",
    "{C} learns that the {L} is a prison for an ancient spirit",
    "A storm forces {C} to seek shelter with an old enemy",
    "{C} wakes with no memory of the previous day",
    "A letter arrives proving that {C} was thought dead for years",
];

const APPEARANCES: [&str; 5] = [
    "lean and weathered, with sharp grey eyes",
    "broad-shouldered, with a calm, lined face",
    "slight and quick, with ink-stained fingers",
    "tall and pale, with close-cropped dark hair",
    "sturdy, sun-browned, with a crooked smile",
];

const CLOTHING: [&str; 5] = [
    "a travel-stained green cloak over leather armor",
    "a long indigo coat with brass buttons",
    "a patched grey tunic and heavy boots",
    "layered white robes with a red sash",
    "a fur-lined hooded jerkin",
];

const FEATURES: [&str; 8] = [
    "silver circlet",
    "scar across the left cheek",
    "braided copper hair",
    "bone pendant",
    "mismatched eyes",
    "tattooed forearms",
    "raven feather earring",
    "burn-scarred hands",
];

/// Seed plus the fixed grammars and tables the mock backends draw from.
#[derive(Debug, Clone)]
pub struct MockWorld {
    seed: u64,
    vision_table: BTreeMap<String, VisualDescription>,
}

impl MockWorld {
    pub fn new(seed: u64) -> Self {
        let mut vision_table = BTreeMap::new();
        vision_table.insert(
            "portraits/captain_rook.png".to_string(),
            VisualDescription {
                appearance: "tall, scarred".into(),
                clothing: "grey cloak".into(),
                key_features: vec!["eye patch".into()],
            },
        );
        Self { seed, vision_table }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Adds or replaces a vision lookup entry.
    pub fn with_vision_entry(mut self, image: &str, description: VisualDescription) -> Self {
        self.vision_table.insert(image.to_string(), description);
        self
    }

    pub fn text(&self) -> MockText {
        MockText { seed: self.seed }
    }

    pub fn image(&self, dir: Option<PathBuf>) -> MockImage {
        MockImage {
            seed: self.seed,
            dir,
        }
    }

    pub fn vision(&self) -> MockVision {
        MockVision {
            seed: self.seed,
            table: self.vision_table.clone(),
        }
    }

    /// A random but well-formed extraction document, for generate-then-parse
    /// checks of the Director parser.
    pub fn sample_extraction(&self, index: u64) -> ExtractionPayload {
        let mut rng = rng_for(self.seed, &[b"sample", &index.to_le_bytes()]);
        let names: Vec<&str> = LOCATIONS
            .iter()
            .chain(&OBJECTS)
            .chain(&CAPTAINS)
            .copied()
            .collect();
        let pick = |rng: &mut ChaCha8Rng| names[rng.random_range(0..names.len())].to_string();
        let tokens = [
            "HOLDS",
            "NEAR",
            "INSIDE",
            "ON",
            "IS_AT",
            "PARTICIPATES_IN",
            "FEARS",
            "owes money to",
        ];
        let mut p = ExtractionPayload::default();
        for _ in 0..rng.random_range(0..5) {
            let mut attributes = Attributes::new();
            for _ in 0..rng.random_range(0..3) {
                attributes.insert(
                    format!("k{}", rng.random_range(0..9)),
                    ADJECTIVES[rng.random_range(0..ADJECTIVES.len())].to_string(),
                );
            }
            p.entities.push(EntitySpec {
                name: pick(&mut rng),
                node_type: NodeType::ALL[rng.random_range(0..4)],
                attributes,
            });
        }
        for _ in 0..rng.random_range(0..5) {
            p.relations.push(RelationSpec {
                source: pick(&mut rng),
                relation: tokens[rng.random_range(0..tokens.len())].to_string(),
                target: pick(&mut rng),
            });
        }
        for _ in 0..rng.random_range(0..4) {
            p.attribute_changes.push(AttributeChange {
                entity: pick(&mut rng),
                key: "state".into(),
                value: ADJECTIVES[rng.random_range(0..ADJECTIVES.len())].to_string(),
            });
        }
        for _ in 0..rng.random_range(0..3) {
            p.removals.push(match rng.random_range(0..3) {
                0 => Removal::RemoveEntity {
                    entity: pick(&mut rng),
                },
                1 => Removal::RemoveRelation {
                    source: pick(&mut rng),
                    relation: "HOLDS".into(),
                    target: pick(&mut rng),
                },
                _ => Removal::RemoveAttribute {
                    entity: pick(&mut rng),
                    key: "state".into(),
                },
            });
        }
        p
    }
}

fn rng_for(seed: u64, parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for part in parts {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn stable_index(text: &str, len: usize) -> usize {
    let digest = Sha256::digest(text.as_bytes());
    (u32::from_le_bytes([digest[0], digest[1], digest[2], digest[3]]) as usize) % len
}

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str]) -> &'a str {
    items[rng.random_range(0..items.len())]
}

fn first_sentence(text: &str) -> &str {
    let text = text.trim();
    match text.find(". ") {
        Some(i) => &text[..=i],
        None => text,
    }
}

/// Character names listed under `Characters:` in USER INPUTS.
fn user_characters(prompt: &str) -> Vec<String> {
    let Some(inputs) = section(prompt, "USER INPUTS") else {
        return Vec::new();
    };
    inputs
        .lines()
        .skip_while(|l| !l.starts_with("Characters:"))
        .skip(1)
        .map_while(|l| l.strip_prefix("- "))
        .filter_map(|l| l.split(':').next())
        .map(|n| n.trim().to_string())
        .filter(|n| !n.is_empty())
        .collect()
}

fn prompt_graph(prompt: &str) -> SceneGraph {
    section(prompt, "SCENE GRAPH")
        .and_then(|doc| decode_graph(doc.trim()).ok())
        .unwrap_or_default()
}

fn names_of(graph: &SceneGraph, node_type: NodeType) -> Vec<String> {
    graph
        .nodes()
        .filter(|n| n.node_type == node_type)
        .map(|n| n.name.clone())
        .collect()
}

fn push_unique(list: &mut Vec<String>, name: &str) {
    if !list.iter().any(|n| n.eq_ignore_ascii_case(name)) {
        list.push(name.to_string());
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MockText {
    seed: u64,
}

impl TextBackend for MockText {
    fn complete_text(&self, request: &TextRequest) -> Result<String, BackendError> {
        if request.prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("prompt is empty".into()));
        }
        let task = format!("{:?}", request.task);
        let mut rng = rng_for(
            self.seed,
            &[
                task.as_bytes(),
                request.system.as_bytes(),
                request.prompt.as_bytes(),
            ],
        );
        let prompt = request.prompt.as_str();
        Ok(match request.task {
            Task::NarrateScene => narrate(prompt, &mut rng),
            Task::ExtractScene => extract(prompt).to_fenced_with_prose(),
            Task::PlotTwists => twists(prompt, &mut rng),
            Task::Summarize => summarize(prompt),
            Task::ImagePrompt => image_prompt(prompt),
            Task::FullStory => full_story(prompt, &mut rng),
        })
    }
}

impl ExtractionPayload {
    fn to_fenced_with_prose(&self) -> String {
        format!("Scene graph updates:\n{}", self.to_fenced())
    }
}

fn narrate(prompt: &str, rng: &mut ChaCha8Rng) -> String {
    let graph = prompt_graph(prompt);
    let mut cast = user_characters(prompt);
    for c in names_of(&graph, NodeType::Character) {
        push_unique(&mut cast, &c);
    }
    if cast.is_empty() {
        cast.push(FALLBACK_HERO.to_string());
    }
    let hero = cast[rng.random_range(0..cast.len())].clone();
    let arc = section(prompt, "NARRATIVE ARC").unwrap_or("");
    let keywords: Vec<&str> = field(arc, "Keywords")
        .map(|k| k.split(", ").filter(|s| !s.is_empty()).collect())
        .unwrap_or_default();
    let keyword = if keywords.is_empty() {
        "a change in the air"
    } else {
        pick(rng, &keywords)
    };
    let correcting = section(prompt, "CORRECTION").is_some();

    let mut sentences = vec![pick(rng, &OPENERS)
        .replace("{P}", &hero)
        .replace("{K}", keyword)];
    if !correcting {
        world_sentences(&graph, &cast, &hero, rng, &mut sentences);
    }
    if rng.random_bool(0.25) {
        sentences.push("An ominous silence settles over everything.".into());
    }
    if let Some(twist) = section(prompt, "TWIST")
        .map(str::trim)
        .filter(|t| !t.is_empty())
    {
        sentences.push(format!("Suddenly, {}.", twist.trim_end_matches('.')));
    }
    let narrative_text = sentences.join(" ");

    let guidance = section(prompt, "AFFECTIVE GUIDANCE").unwrap_or("");
    let mut cues: Vec<String> = field(guidance, "Soundscape cues")
        .map(|c| c.split("; ").take(2).map(str::to_string).collect())
        .unwrap_or_default();
    push_unique(&mut cues, pick(rng, &AMBIENCE));
    let payload = json!({"narrative_text": narrative_text, "soundscape_cues": cues});
    format!(
        "Here is the next scene.\n\n{narrative_text}\n\n```json\n{}\n```\n",
        serde_json::to_string_pretty(&payload).expect("payload serializes")
    )
}

/// Movement, possession, state, and event sentences that keep the world
/// consistent: characters only enter locations, and only vocabulary
/// locations without a known container are placed in a region.
fn world_sentences(
    graph: &SceneGraph,
    cast: &[String],
    hero: &str,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<String>,
) {
    let mut places = names_of(graph, NodeType::Location);
    for l in LOCATIONS {
        push_unique(&mut places, l);
    }
    let hero_node = graph.find_by_name(hero).first().map(|n| n.id.clone());
    let here: Option<String> = hero_node.as_ref().and_then(|id| {
        graph
            .outgoing(id)
            .find(|e| e.relation == relation::IS_AT)
            .and_then(|e| graph.node(&e.target_id))
            .map(|n| n.name.clone())
    });
    let mut moved_to = None;
    if rng.random_bool(0.6) {
        let options: Vec<&str> = places
            .iter()
            .map(String::as_str)
            .filter(|p| here.as_deref().is_none_or(|h| !h.eq_ignore_ascii_case(p)))
            .collect();
        let place = pick(rng, &options).to_string();
        out.push(format!("{hero} enters the {place}."));
        let contained = graph.find_by_name(&place).first().is_some_and(|n| {
            graph
                .outgoing(&n.id)
                .any(|e| relation::is_containment(&e.relation))
        });
        let known = !graph.find_by_name(&place).is_empty();
        if LOCATIONS.contains(&place.as_str()) && !contained && (!known || rng.random_bool(0.5)) {
            let region = REGIONS[stable_index(&place, REGIONS.len())];
            out.push(format!("The {place} lies within the {region}."));
        }
        moved_to = Some(place);
    }
    let held: Vec<String> = hero_node
        .as_ref()
        .map(|id| {
            graph
                .outgoing(id)
                .filter(|e| e.relation == relation::HOLDS)
                .filter_map(|e| graph.node(&e.target_id))
                .map(|n| n.name.clone())
                .collect()
        })
        .unwrap_or_default();
    let mut touched = None;
    if !held.is_empty() && rng.random_bool(0.3) {
        let item = held[rng.random_range(0..held.len())].clone();
        out.push(format!("{hero} sets down the {item}."));
        touched = Some(item);
    } else if rng.random_bool(0.6) {
        let options: Vec<&str> = OBJECTS
            .iter()
            .copied()
            .filter(|o| !held.iter().any(|h| h.eq_ignore_ascii_case(o)))
            .collect();
        let item = pick(rng, &options).to_string();
        out.push(format!("{hero} picks up the {item}."));
        touched = Some(item);
    }
    if let Some(item) = touched.filter(|_| rng.random_bool(0.5)) {
        out.push(format!("The {item} is now {}.", pick(rng, &ADJECTIVES)));
    }
    let others: Vec<&str> = cast
        .iter()
        .map(String::as_str)
        .filter(|c| *c != hero)
        .collect();
    if !others.is_empty() && rng.random_bool(0.5) {
        let companion = pick(rng, &others);
        match &moved_to {
            Some(place) if rng.random_bool(0.5) => {
                out.push(format!("{companion} enters the {place}."))
            }
            _ => out.push(format!("{companion} watches from a distance.")),
        }
    }
    if rng.random_bool(0.3) {
        let fresh: Vec<&str> = EVENTS
            .iter()
            .copied()
            .filter(|e| graph.find_by_name(e).is_empty())
            .collect();
        if !fresh.is_empty() {
            out.push(format!("{hero} witnesses the {}.", pick(rng, &fresh)));
        }
    }
}

const NAME: &str = r"[A-Z][A-Za-z'-]*(?: [A-Z][A-Za-z'-]*)*";
const THING: &str = r"[A-Za-z][A-Za-z' -]*?";

struct Rules {
    picks_up: Regex,
    sets_down: Regex,
    enters: Regex,
    is_now: Regex,
    lies_within: Regex,
    witnesses: Regex,
    captain: Regex,
}

fn rules() -> &'static Rules {
    static RULES: OnceLock<Rules> = OnceLock::new();
    RULES.get_or_init(|| {
        let start = r"(?:^|[.!?]\s+)";
        let verb = |v: &str| {
            Regex::new(&format!(r"{start}(?P<a>{NAME}) {v} the (?P<b>{THING})\."))
                .expect("rule regex")
        };
        Rules {
            picks_up: verb("picks up"),
            sets_down: verb("sets down"),
            enters: verb("enters"),
            witnesses: verb("witnesses"),
            is_now: Regex::new(&format!(
                r"{start}The (?P<a>{THING}) is now (?P<b>[A-Za-z-]+)\."
            ))
            .expect("rule regex"),
            lies_within: Regex::new(&format!(
                r"{start}The (?P<a>{THING}) lies within the (?P<b>{THING})\."
            ))
            .expect("rule regex"),
            captain: Regex::new(r"\bCaptain (?P<a>[A-Z][a-z]+)\b").expect("rule regex"),
        }
    })
}

/// Builds the extraction lists for the narrative in an extraction prompt.
struct Extractor<'g> {
    graph: &'g SceneGraph,
    scene: String,
    payload: ExtractionPayload,
    declared: BTreeSet<String>,
}

impl Extractor<'_> {
    /// Declares `name`, reusing the known spelling and type when the graph
    /// already has it. Returns the name to use in relations.
    fn entity(&mut self, name: &str, fallback: NodeType) -> String {
        let known = self.graph.find_by_name(name);
        let (name, node_type) = match known.first() {
            Some(n) => (n.name.clone(), n.node_type),
            None => (name.trim().to_string(), fallback),
        };
        if self.declared.insert(name.to_lowercase()) {
            let mut attributes = Attributes::new();
            if node_type == NodeType::Event && known.is_empty() {
                attributes.insert("scene".into(), self.scene.clone());
            }
            self.payload.entities.push(EntitySpec {
                name: name.clone(),
                node_type,
                attributes,
            });
        }
        name
    }

    fn relate(&mut self, source: String, rel: &str, target: String) {
        self.payload.relations.push(RelationSpec {
            source,
            relation: rel.to_string(),
            target,
        });
    }

    fn holds(&self, holder: &str, item: &str) -> bool {
        let (Some(h), Some(i)) = (
            self.graph
                .find_by_name(holder)
                .first()
                .map(|n| n.id.clone()),
            self.graph.find_by_name(item).first().map(|n| n.id.clone()),
        ) else {
            return false;
        };
        self.graph.find_edge(&h, &i, relation::HOLDS).is_some()
    }
}

fn extract(prompt: &str) -> ExtractionPayload {
    let graph = prompt_graph(prompt);
    let text = section(prompt, "NARRATIVE TEXT").unwrap_or("");
    let scene = field(prompt, "Scene").unwrap_or("0").to_string();
    let mut x = Extractor {
        graph: &graph,
        scene,
        payload: ExtractionPayload::default(),
        declared: BTreeSet::new(),
    };
    let r = rules();

    // Matches are processed in text order so entity order follows the prose.
    let mut found: Vec<(usize, u8, String, String)> = Vec::new();
    let mut collect = |re: &Regex, tag: u8| {
        for c in re.captures_iter(text) {
            let b = c.name("b").map_or("", |m| m.as_str()).to_string();
            found.push((
                c.get(0).map_or(0, |m| m.start()),
                tag,
                c["a"].to_string(),
                b,
            ));
        }
    };
    collect(&r.captain, 0);
    collect(&r.enters, 1);
    collect(&r.lies_within, 2);
    collect(&r.picks_up, 3);
    collect(&r.sets_down, 4);
    collect(&r.is_now, 5);
    collect(&r.witnesses, 6);
    found.sort();

    for (_, tag, a, b) in found {
        match tag {
            0 => {
                x.entity(&format!("Captain {a}"), NodeType::Character);
            }
            1 => {
                let who = x.entity(&a, NodeType::Character);
                let place = x.entity(&b, NodeType::Location);
                x.relate(who, relation::IS_AT, place);
            }
            2 => {
                let inner = x.entity(&a, NodeType::Location);
                let outer = x.entity(&b, NodeType::Location);
                x.relate(inner, relation::INSIDE, outer);
            }
            3 => {
                let who = x.entity(&a, NodeType::Character);
                let item = x.entity(&b, NodeType::Object);
                x.relate(who, relation::HOLDS, item);
            }
            4 => {
                if x.holds(&a, &b) {
                    let who = x.entity(&a, NodeType::Character);
                    let item = x.entity(&b, NodeType::Object);
                    x.payload.removals.push(Removal::RemoveRelation {
                        source: who,
                        relation: relation::HOLDS.into(),
                        target: item,
                    });
                }
            }
            5 => {
                let item = x.entity(&a, NodeType::Object);
                x.payload.attribute_changes.push(AttributeChange {
                    entity: item,
                    key: "state".into(),
                    value: b,
                });
            }
            _ => {
                let who = x.entity(&a, NodeType::Character);
                let event = x.entity(&b, NodeType::Event);
                x.relate(who, relation::PARTICIPATES_IN, event);
            }
        }
    }
    // Known characters mentioned anywhere in the text.
    for name in names_of(&graph, NodeType::Character) {
        if contains_word(text, &name) {
            x.entity(&name, NodeType::Character);
        }
    }
    x.payload
}

fn contains_word(text: &str, word: &str) -> bool {
    text.match_indices(word).any(|(i, m)| {
        let before = text[..i].chars().next_back();
        let after = text[i + m.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

fn twists(prompt: &str, rng: &mut ChaCha8Rng) -> String {
    let n: usize = field(prompt, "Count")
        .and_then(|c| c.parse().ok())
        .unwrap_or(3);
    let graph = prompt_graph(prompt);
    let mut cast = names_of(&graph, NodeType::Character);
    if cast.is_empty() {
        cast = user_characters(prompt);
    }
    if cast.is_empty() {
        cast.push(FALLBACK_HERO.into());
    }
    let places = {
        let l = names_of(&graph, NodeType::Location);
        if l.is_empty() {
            vec![LOCATIONS[0].to_string()]
        } else {
            l
        }
    };
    let objects = {
        let o = names_of(&graph, NodeType::Object);
        if o.is_empty() {
            vec![OBJECTS[3].to_string()]
        } else {
            o
        }
    };
    let mut order: Vec<usize> = (0..TWISTS.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut out: Vec<String> = Vec::with_capacity(n);
    let mut round = 0;
    while out.len() < n {
        for &t in &order {
            if out.len() == n {
                break;
            }
            let mut twist = TWISTS[t]
                .replace("{C}", &cast[rng.random_range(0..cast.len())])
                .replace("{L}", &places[rng.random_range(0..places.len())])
                .replace("{O}", &objects[rng.random_range(0..objects.len())])
                .replace("{N}", CAPTAINS[rng.random_range(0..CAPTAINS.len())]);
            if round > 0 {
                twist = format!("{twist}, for the {} time", ordinal(round + 1));
            }
            if !out.contains(&twist) {
                out.push(twist);
            }
        }
        round += 1;
    }
    format!(
        "Some possible twists:\n```json\n{}\n```\n",
        serde_json::to_string_pretty(&json!({ "twists": out })).expect("twists serialize")
    )
}

fn ordinal(n: usize) -> String {
    let suffix = match (n % 10, n % 100) {
        (1, 11) | (2, 12) | (3, 13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

fn summarize(prompt: &str) -> String {
    let current = section(prompt, "CURRENT SUMMARY").unwrap_or("").trim();
    let scene = section(prompt, "NEW SCENE").unwrap_or("").trim();
    let (marker, body) = match scene.find(']') {
        Some(i) if scene.starts_with("[Scene ") => (&scene[..=i], scene[i + 1..].trim()),
        _ => ("[Scene ?]", scene),
    };
    let entry = format!("{marker} {}", first_sentence(body));
    if current.is_empty() {
        entry
    } else {
        format!("{current} {entry}")
    }
}

fn image_prompt(prompt: &str) -> String {
    let text = section(prompt, "SCENE TEXT").unwrap_or("");
    let style = section(prompt, "STYLE").unwrap_or("").trim();
    let location = section(prompt, "LOCATION").unwrap_or("").trim();
    let mood = section(prompt, "MOOD").unwrap_or("").trim();
    let mut parts = vec![format!(
        "{} illustration.",
        if style.is_empty() { "Digital" } else { style }
    )];
    let lead = first_sentence(text);
    if !lead.is_empty() {
        parts.push(lead.to_string());
    }
    for line in section(prompt, "CHARACTERS").unwrap_or("").lines() {
        let Some(rest) = line.strip_prefix("- ") else {
            continue;
        };
        let mut fields = rest.split(" | ");
        let name = fields.next().unwrap_or("").trim();
        let appearance = fields.next().unwrap_or("").trim();
        let clothing = fields.next().unwrap_or("").trim();
        parts.push(format!("{name}, {appearance}, wearing {clothing}."));
    }
    if let Some(place) = location.lines().next().filter(|l| !l.is_empty()) {
        parts.push(format!("Setting: {place}."));
    }
    if !mood.is_empty() {
        parts.push(format!("Mood: {mood}."));
    }
    parts.join(" ")
}

fn full_story(prompt: &str, rng: &mut ChaCha8Rng) -> String {
    let scenes: usize = field(prompt, "Scenes")
        .and_then(|s| s.parse().ok())
        .unwrap_or(5);
    let premise = field(prompt, "Premise").unwrap_or("a journey begins");
    let mut cast = user_characters(prompt);
    if cast.is_empty() {
        cast.push(FALLBACK_HERO.into());
    }
    let count = scenes + rng.random_range(0..=1usize);
    let mut paragraphs = Vec::with_capacity(count);
    for i in 0..count {
        let who = &cast[rng.random_range(0..cast.len())];
        let place = pick(rng, &LOCATIONS);
        let item = pick(rng, &OBJECTS);
        let mut p = if i == 0 {
            format!("It begins like this: {premise}. {who} sets out toward the {place}.")
        } else {
            format!("{who} reaches the {place} and finds the {item}.")
        };
        p.push_str(&format!(" The {item} feels {}.", pick(rng, &ADJECTIVES)));
        if i % 3 == 1 {
            p.push_str(" An ominous wind rises behind them.");
        }
        if rng.random_bool(0.3) {
            p.push_str(&format!(" {who} wonders what comes next."));
        }
        paragraphs.push(p);
    }
    paragraphs.join("\n\n")
}

/// Writes a small SVG placeholder per prompt and returns its relative path.
#[derive(Debug, Clone)]
pub struct MockImage {
    seed: u64,
    dir: Option<PathBuf>,
}

impl MockImage {
    pub fn file_name(&self, prompt: &str, style: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(style.as_bytes());
        h.update(b"\n");
        h.update(prompt.as_bytes());
        format!("{}.svg", &hex::encode(h.finalize())[..16])
    }
}

impl ImageBackend for MockImage {
    fn generate_image(&self, prompt: &str, style: &str) -> Result<ImageRef, BackendError> {
        if prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("image prompt is empty".into()));
        }
        let name = self.file_name(prompt, style);
        if let Some(dir) = &self.dir {
            let path = dir.join(&name);
            if !path.exists() {
                std::fs::create_dir_all(dir)
                    .and_then(|_| std::fs::write(&path, placeholder_svg(prompt)))
                    .map_err(|e| BackendError::Transport {
                        attempts: 1,
                        message: format!("writing {}: {e}", path.display()),
                    })?;
            }
        }
        Ok(ImageRef(format!("images/{name}")))
    }
}

fn placeholder_svg(prompt: &str) -> String {
    let escaped = prompt
        .replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;");
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"512\" height=\"512\">\
         <title>{escaped}</title><rect width=\"512\" height=\"512\" fill=\"#334\"/></svg>\n"
    )
}

#[derive(Debug, Clone)]
pub struct MockVision {
    seed: u64,
    table: BTreeMap<String, VisualDescription>,
}

impl VisionBackend for MockVision {
    fn analyze_image(&self, image: &ImageRef) -> Result<VisualDescription, BackendError> {
        if let Some(d) = self.table.get(&image.0) {
            return Ok(d.clone());
        }
        let mut rng = rng_for(self.seed, &[b"vision", image.0.as_bytes()]);
        let first = rng.random_range(0..FEATURES.len());
        let second = (first + 1 + rng.random_range(0..FEATURES.len() - 1)) % FEATURES.len();
        Ok(VisualDescription {
            appearance: pick(&mut rng, &APPEARANCES).into(),
            clothing: pick(&mut rng, &CLOTHING).into(),
            key_features: vec![FEATURES[first].into(), FEATURES[second].into()],
        })
    }
}
