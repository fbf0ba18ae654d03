//! Seeded generators for the toy corpus domains.
//!
//! Each domain has its own surface statistics so that a model trained on one
//! pair of domains sees the others as out of distribution.

use indexmap::IndexMap;

use crate::rng::SeededRng;

pub const ADJECTIVES: &[&str] = &[
    "small", "quiet", "green", "old", "bright", "heavy", "warm", "tall", "dark", "soft",
];
pub const NOUNS: &[&str] = &[
    "cat", "river", "house", "tree", "bird", "road", "stone", "boat", "field", "lamp", "door",
    "hill",
];
pub const VERBS: &[&str] = &[
    "sees", "finds", "passes", "follows", "holds", "leaves", "meets", "watches",
];
pub const PREPS: &[&str] = &["near", "under", "behind", "beside", "above", "past"];
pub const NAMES: &[&str] = &[
    "anna", "ben", "clara", "david", "ella", "felix", "grace", "hugo", "iris", "jonas", "kira",
    "leo",
];
pub const CITIES: &[&str] = &[
    "rome", "oslo", "lima", "kyiv", "bern", "cairo", "delhi", "quito",
];
pub const JOBS: &[&str] = &[
    "baker", "pilot", "nurse", "smith", "clerk", "miner", "tailor",
];

/// Record fields in the fixed order they appear in the `records` domain.
pub const RECORD_KEYS: &[&str] = &["name", "born", "city", "role"];

pub const DOMAINS: &[&str] = &["prose", "records", "dialog", "arith"];

fn pick<'a>(rng: &mut SeededRng, xs: &[&'a str]) -> &'a str {
    xs[rng.below(xs.len())]
}

fn sentence(rng: &mut SeededRng) -> String {
    format!(
        "the {} {} {} the {} {} the {}.",
        pick(rng, ADJECTIVES),
        pick(rng, NOUNS),
        pick(rng, VERBS),
        pick(rng, NOUNS),
        pick(rng, PREPS),
        pick(rng, NOUNS)
    )
}

pub fn record_line(rng: &mut SeededRng) -> String {
    format!(
        "name: {}; born: {}; city: {}; role: {}.",
        pick(rng, NAMES),
        1940 + rng.below(70),
        pick(rng, CITIES),
        pick(rng, JOBS)
    )
}

fn dialog_turn(rng: &mut SeededRng) -> String {
    let n = pick(rng, NOUNS);
    format!(
        "q: where is the {n}?\na: the {n} is {} the {}, {}.",
        pick(rng, PREPS),
        pick(rng, NOUNS),
        pick(rng, NAMES)
    )
}

fn arith_line(rng: &mut SeededRng) -> String {
    let a = rng.below(50);
    let b = rng.below(50);
    format!("{a} plus {b} is {}.", a + b)
}

/// One document of `domain`, or `None` for an unknown domain name.
pub fn document(domain: &str, rng: &mut SeededRng) -> Option<String> {
    let parts = 3 + rng.below(4);
    let (line, sep): (fn(&mut SeededRng) -> String, &str) = match domain {
        "prose" => (sentence, " "),
        "records" => (record_line, "\n"),
        "dialog" => (dialog_turn, "\n"),
        "arith" => (arith_line, " "),
        _ => return None,
    };
    Some((0..parts).map(|_| line(rng)).collect::<Vec<_>>().join(sep))
}

/// `n_docs` documents per named domain; unknown names are skipped.
pub fn generate(domains: &[&str], n_docs: usize, seed: u64) -> IndexMap<String, Vec<String>> {
    let base = SeededRng::new(seed, "synth");
    domains
        .iter()
        .filter_map(|&d| {
            let mut rng = base.substream(d);
            let docs: Option<Vec<String>> = (0..n_docs).map(|_| document(d, &mut rng)).collect();
            docs.map(|docs| (d.to_string(), docs))
        })
        .collect()
}
