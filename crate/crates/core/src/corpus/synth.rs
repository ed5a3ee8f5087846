//! Synthetic DuRecDial-format corpora.
//!
//! Each dialogue walks a keyword path (greeting, a small-talk turn, then one
//! or two domain turns ending at the target keyword). System utterances are
//! rendered from per-type templates that always mention the turn's topic, so
//! keyword → phrase correlations are planted by construction. Knowledge holds
//! the triples the templates draw on plus distractors; the profile names the
//! user's liked star and city.
//!
//! Targets in `train` come from an in-domain topic pool. Dev dialogues
//! alternate between in-domain targets and a held-out pool, and `test_ood`
//! re-renders the held-out dev paths, so `verify_ood` holds on every output.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    build_inventory, write_split_file, DatasetSplit, DialogueSample, KeywordInventory, RawKeyword,
    RawSample, Speaker, SplitName, SPLIT_FILES,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_dialogues: usize,
    pub dev_dialogues: usize,
    pub test_id_dialogues: usize,
    pub test_ood_dialogues: usize,
    /// Entities per domain (songs, movies, foods, places); held-out topics
    /// are carved from the same pools.
    pub entities_per_domain: usize,
    pub stars: usize,
    pub cities: usize,
    /// Fraction of each domain pool reserved for out-of-domain targets.
    pub ood_fraction: f64,
    pub distractor_triples: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train_dialogues: 40,
            dev_dialogues: 8,
            test_id_dialogues: 8,
            test_ood_dialogues: 8,
            entities_per_domain: 12,
            stars: 8,
            cities: 6,
            ood_fraction: 0.25,
            distractor_triples: 2,
        }
    }
}

const ADJECTIVES: [&str; 24] = [
    "blue",
    "silent",
    "golden",
    "broken",
    "distant",
    "quiet",
    "wild",
    "hidden",
    "bright",
    "lonely",
    "crimson",
    "frozen",
    "gentle",
    "hollow",
    "iron",
    "lucky",
    "midnight",
    "northern",
    "pale",
    "rapid",
    "secret",
    "velvet",
    "wandering",
    "young",
];
const NOUNS: [&str; 24] = [
    "river", "harbor", "piano", "garden", "mirror", "lantern", "meadow", "island", "thunder",
    "window", "forest", "letter", "summer", "shadow", "valley", "compass", "feather", "station",
    "ocean", "orchard", "canyon", "bridge", "candle", "sparrow",
];
const FOODS: [&str; 16] = [
    "noodles",
    "dumplings",
    "hotpot",
    "curry",
    "tofu",
    "pancakes",
    "risotto",
    "tacos",
    "ramen",
    "paella",
    "kebab",
    "sushi",
    "porridge",
    "goulash",
    "falafel",
    "bibimbap",
];
const FIRST: [&str; 12] = [
    "lin", "mara", "oscar", "yuki", "dario", "nadia", "theo", "ivy", "ruben", "sana", "felix",
    "greta",
];
const LAST: [&str; 12] = [
    "chen", "okafor", "moreau", "tanaka", "rossi", "petrov", "lund", "haddad", "silva", "kim",
    "novak", "berg",
];
const CITIES: [&str; 10] = [
    "harbin", "lisbon", "kyoto", "quito", "oslo", "tunis", "perth", "bergen", "hanoi", "lima",
];
const USERS: [&str; 8] = ["amy", "bo", "carl", "dina", "eli", "fay", "gus", "hana"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Domain {
    Music,
    Movie,
    Food,
    Poi,
}

const DOMAINS: [Domain; 4] = [Domain::Music, Domain::Movie, Domain::Food, Domain::Poi];

#[derive(Clone, Debug)]
struct World {
    stars: Vec<String>,
    cities: Vec<String>,
    /// Per domain: (in-domain pool, held-out pool).
    pools: Vec<(Vec<String>, Vec<String>)>,
    /// Star credited on each song/movie.
    credit: std::collections::HashMap<String, String>,
}

fn build_world(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<World> {
    if cfg.stars == 0 || cfg.cities == 0 || cfg.entities_per_domain < 2 {
        return Err(Error::Validation(
            "synthetic world needs stars, cities and at least 2 entities per domain".into(),
        ));
    }
    if cfg.stars > FIRST.len() * LAST.len() || cfg.cities > CITIES.len() {
        return Err(Error::Validation(
            "synthetic world is larger than its name pools".into(),
        ));
    }
    let mut names: Vec<String> = FIRST
        .iter()
        .flat_map(|f| LAST.iter().map(move |l| format!("{f} {l}")))
        .collect();
    names.shuffle(rng);
    let stars: Vec<String> = names.into_iter().take(cfg.stars).collect();
    let mut cities: Vec<String> = CITIES.iter().map(|s| s.to_string()).collect();
    cities.shuffle(rng);
    cities.truncate(cfg.cities);

    let mut phrases: Vec<String> = ADJECTIVES
        .iter()
        .flat_map(|a| NOUNS.iter().map(move |n| format!("{a} {n}")))
        .collect();
    phrases.shuffle(rng);
    let mut phrases = phrases.into_iter();
    let n = cfg.entities_per_domain;
    if n * 3 > ADJECTIVES.len() * NOUNS.len() {
        return Err(Error::Validation(
            "entities_per_domain exceeds the phrase pool".into(),
        ));
    }
    let n_ood = ((n as f64) * cfg.ood_fraction)
        .round()
        .clamp(1.0, (n - 1) as f64) as usize;
    let mut pools = Vec::new();
    let mut credit = std::collections::HashMap::new();
    for d in DOMAINS {
        let mut items: Vec<String> = match d {
            Domain::Music | Domain::Movie => phrases.by_ref().take(n).collect(),
            Domain::Food => {
                let mut v = Vec::new();
                for (i, f) in FOODS.iter().cycle().take(n).enumerate() {
                    v.push(format!(
                        "{} {f}",
                        ADJECTIVES[(i * 7 + 3) % ADJECTIVES.len()]
                    ));
                }
                v
            }
            Domain::Poi => phrases
                .by_ref()
                .take(n)
                .map(|p| format!("{p} park"))
                .collect(),
        };
        items.sort();
        items.dedup();
        items.shuffle(rng);
        if matches!(d, Domain::Music | Domain::Movie) {
            for it in &items {
                credit.insert(it.clone(), stars.choose(rng).expect("non-empty").clone());
            }
        }
        let held = items.split_off(items.len() - n_ood);
        pools.push((items, held));
    }
    Ok(World {
        stars,
        cities,
        pools,
        credit,
    })
}

/// One keyword-path step with the slot values its utterance needs.
#[derive(Clone, Debug)]
struct Step {
    kind: &'static str,
    topic: String,
    text: String,
}

#[derive(Clone, Debug)]
struct Plan {
    domain: Domain,
    target: String,
    star: String,
    city: String,
    user: String,
}

fn system_text(
    kind: &str,
    topic: &str,
    plan: &Plan,
    world: &World,
    rng: &mut ChaCha8Rng,
) -> String {
    let star = world
        .credit
        .get(topic)
        .cloned()
        .unwrap_or_else(|| plan.star.clone());
    let pick = |rng: &mut ChaCha8Rng, opts: &[String]| opts.choose(rng).expect("non-empty").clone();
    match kind {
        "greeting" => pick(
            rng,
            &[
                format!("hello {} , nice to see you again .", plan.user),
                format!("hi {} , how is your day going ?", plan.user),
            ],
        ),
        "chat about stars" => pick(
            rng,
            &[
                format!("do you know {topic} ? {topic} was born in {} .", plan.city),
                format!("have you heard of {topic} ? a star from {} .", plan.city),
            ],
        ),
        "weather notification" => pick(
            rng,
            &[
                format!("it is sunny in {topic} today , great for going out ."),
                format!("the weather in {topic} is mild today ."),
            ],
        ),
        "music recommendation" => pick(
            rng,
            &[
                format!("i recommend the song {topic} by {star} ."),
                format!("you may like {topic} , a song by {star} ."),
            ],
        ),
        "play music" => pick(
            rng,
            &[
                format!("ok , now playing {topic} for you ."),
                format!("sure , here is {topic} , enjoy ."),
            ],
        ),
        "movie recommendation" => pick(
            rng,
            &[
                format!("you should watch the movie {topic} starring {star} ."),
                format!("how about the film {topic} with {star} ?"),
            ],
        ),
        "food recommendation" => pick(
            rng,
            &[
                format!("try the {topic} in {} , it is delicious .", plan.city),
                format!("the {topic} here is very popular ."),
            ],
        ),
        "poi recommendation" => pick(
            rng,
            &[
                format!("you could visit {topic} in {} .", plan.city),
                format!("{topic} is a lovely place to relax ."),
            ],
        ),
        _ => unreachable!("unknown keyword type {kind}"),
    }
}

const USER_REPLIES: [&str; 8] = [
    "hi , i am fine .",
    "who is that ?",
    "tell me more .",
    "sounds good .",
    "really ? interesting .",
    "ok , what else ?",
    "i would like that .",
    "great , thanks .",
];

fn plan_steps(plan: &Plan, world: &World, rng: &mut ChaCha8Rng) -> Vec<Step> {
    let mut path: Vec<(&'static str, String)> = vec![("greeting", "none".to_string())];
    match plan.domain {
        Domain::Music | Domain::Movie => {
            let star = world
                .credit
                .get(&plan.target)
                .cloned()
                .unwrap_or_else(|| plan.star.clone());
            path.push(("chat about stars", star));
        }
        Domain::Food | Domain::Poi => path.push(("weather notification", plan.city.clone())),
    }
    match plan.domain {
        Domain::Music => {
            path.push(("music recommendation", plan.target.clone()));
            path.push(("play music", plan.target.clone()));
        }
        Domain::Movie => path.push(("movie recommendation", plan.target.clone())),
        Domain::Food => path.push(("food recommendation", plan.target.clone())),
        Domain::Poi => path.push(("poi recommendation", plan.target.clone())),
    }
    path.into_iter()
        .map(|(kind, topic)| {
            let text = system_text(kind, &topic, plan, world, rng);
            Step { kind, topic, text }
        })
        .collect()
}

fn render(plan: &Plan, world: &World, rng: &mut ChaCha8Rng, distractors: usize) -> Vec<RawSample> {
    let steps = plan_steps(plan, world, rng);
    let kw = |s: &Step| RawKeyword {
        kind: s.kind.to_string(),
        topic: s.topic.clone(),
    };
    let target = kw(steps.last().expect("non-empty path"));

    let mut knowledge: Vec<[String; 3]> = Vec::new();
    let star = world
        .credit
        .get(&plan.target)
        .cloned()
        .unwrap_or_else(|| plan.star.clone());
    knowledge.push([star.clone(), "born in".into(), plan.city.clone()]);
    match plan.domain {
        Domain::Music => knowledge.push([plan.target.clone(), "sung by".into(), star.clone()]),
        Domain::Movie => knowledge.push([plan.target.clone(), "starring".into(), star.clone()]),
        Domain::Food => {
            knowledge.push([plan.target.clone(), "served in".into(), plan.city.clone()])
        }
        Domain::Poi => {
            knowledge.push([plan.target.clone(), "located in".into(), plan.city.clone()])
        }
    }
    for _ in 0..distractors {
        let s = world.stars.choose(rng).expect("non-empty").clone();
        let c = world.cities.choose(rng).expect("non-empty").clone();
        knowledge.push([s, "born in".into(), c]);
    }
    knowledge.shuffle(rng);

    let mut profile = serde_json::Map::new();
    profile.insert("name".into(), plan.user.clone().into());
    profile.insert("residence".into(), plan.city.clone().into());
    profile.insert("liked star".into(), star.into());

    let mut history = vec![super::RawTurn {
        speaker: Speaker::User,
        text: "hello !".into(),
        keyword: None,
    }];
    let mut out = Vec::new();
    for (i, step) in steps.iter().enumerate() {
        out.push(RawSample {
            history: history.clone(),
            target: target.clone(),
            profile: profile.clone(),
            knowledge: knowledge.clone(),
            bridge: steps[i..].iter().map(kw).collect(),
            reference: step.text.clone(),
        });
        history.push(super::RawTurn {
            speaker: Speaker::System,
            text: step.text.clone(),
            keyword: Some(kw(step)),
        });
        history.push(super::RawTurn {
            speaker: Speaker::User,
            text: USER_REPLIES.choose(rng).expect("non-empty").to_string(),
            keyword: None,
        });
    }
    out
}

fn random_plan(world: &World, rng: &mut ChaCha8Rng, held_out: bool) -> Plan {
    let di = rng.random_range(0..DOMAINS.len());
    let (pool, held) = &world.pools[di];
    let target = if held_out { held } else { pool }
        .choose(rng)
        .expect("non-empty pool")
        .clone();
    Plan {
        domain: DOMAINS[di],
        target,
        star: world.stars.choose(rng).expect("non-empty").clone(),
        city: world.cities.choose(rng).expect("non-empty").clone(),
        user: USERS.choose(rng).expect("non-empty").to_string(),
    }
}

/// Generates a four-way split and the inventory built from its train and dev
/// keywords.
pub fn generate(cfg: &SynthConfig) -> Result<(DatasetSplit, KeywordInventory)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = build_world(cfg, &mut rng)?;
    let mut raws: [Vec<RawSample>; 4] = Default::default();

    let train_plans: Vec<Plan> = (0..cfg.train_dialogues)
        .map(|_| random_plan(&world, &mut rng, false))
        .collect();
    let dev_plans: Vec<Plan> = (0..cfg.dev_dialogues)
        .map(|i| random_plan(&world, &mut rng, i % 2 == 0))
        .collect();
    let ood_sources: Vec<&Plan> = dev_plans
        .iter()
        .filter(|p| world.pools.iter().any(|(_, held)| held.contains(&p.target)))
        .collect();

    for p in &train_plans {
        raws[0].extend(render(p, &world, &mut rng, cfg.distractor_triples));
    }
    for p in &dev_plans {
        raws[1].extend(render(p, &world, &mut rng, cfg.distractor_triples));
    }
    if !train_plans.is_empty() {
        for _ in 0..cfg.test_id_dialogues {
            let mut p = train_plans.choose(&mut rng).expect("non-empty").clone();
            p.user = USERS.choose(&mut rng).expect("non-empty").to_string();
            raws[2].extend(render(&p, &world, &mut rng, cfg.distractor_triples));
        }
    }
    if !ood_sources.is_empty() {
        for _ in 0..cfg.test_ood_dialogues {
            let mut p = (*ood_sources.choose(&mut rng).expect("non-empty")).clone();
            p.user = USERS.choose(&mut rng).expect("non-empty").to_string();
            raws[3].extend(render(&p, &world, &mut rng, cfg.distractor_triples));
        }
    }

    let seen: Vec<RawSample> = raws[0].iter().chain(raws[1].iter()).cloned().collect();
    let inventory = build_inventory(&seen)?;
    let mut split = DatasetSplit::default();
    for (name, raw) in SplitName::ALL.iter().zip(&raws) {
        *split.get_mut(*name) = raw
            .iter()
            .map(|r| r.resolve(&inventory))
            .collect::<Result<_>>()?;
    }
    Ok((split, inventory))
}

/// Keeps the first `counts[i]` samples of each split.
pub fn truncate_split(split: &mut DatasetSplit, counts: [usize; 4]) {
    for (name, n) in SplitName::ALL.iter().zip(counts) {
        split.get_mut(*name).truncate(n);
    }
}

/// Writes the four JSONL files plus `inventory.json` into `dir`.
pub fn write_dataset(dir: &Path, split: &DatasetSplit, inventory: &KeywordInventory) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for (name, file) in SplitName::ALL.iter().zip(SPLIT_FILES) {
        write_split_file(&dir.join(file), split.get(*name), inventory)?;
    }
    inventory.save(&dir.join(super::INVENTORY_FILE))
}

/// Distinct target topic ids of a split, for inspection.
pub fn target_topics(samples: &[DialogueSample]) -> BTreeSet<usize> {
    samples.iter().map(|s| s.target.topic_id).collect()
}
