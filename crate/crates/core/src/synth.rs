//! Seeded synthetic corpora for tests, benches and smoke runs.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::recycler::MultiPropertyRecord;

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ra", "ten", "vos", "dul", "pe", "shi", "nor", "bam", "el", "qui", "zo", "har", "tu",
];

fn word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(2..=3);
    (0..n).map(|_| *SYLLABLES.choose(rng).unwrap()).collect()
}

/// Articles with 1 to 6 properties drawn from `n_properties` names. The
/// property count per article is geometric (half the articles have one).
pub fn split_corpus(n_articles: usize, n_properties: usize, seed: u64) -> Vec<MultiPropertyRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = (0..n_properties).map(|i| format!("property {i:03}")).collect();
    (0..n_articles)
        .map(|a| {
            let mut k = 1;
            while k < 6.min(n_properties) && rng.random_bool(0.5) {
                k += 1;
            }
            let mut props = BTreeMap::new();
            for name in names.choose_multiple(&mut rng, k) {
                let nv = if rng.random_bool(0.8) { 1 } else { 2 };
                let mut vs: Vec<String> = (0..nv).map(|_| word(&mut rng)).collect();
                vs.sort();
                vs.dedup();
                props.insert(name.clone(), vs);
            }
            let text = props.values().flatten().cloned().collect::<Vec<_>>().join(" ");
            MultiPropertyRecord {
                id: format!("Q{a:06}"),
                text: format!("article {a} mentions {text}."),
                properties: props,
            }
        })
        .collect()
}

const FIRST: [&str; 10] = [
    "Anna", "Boris", "Clara", "Dmitri", "Elena", "Felix", "Greta", "Hugo", "Irena", "Jonas",
];
const LAST: [&str; 10] = [
    "Kowalski",
    "Lindqvist",
    "Moreau",
    "Novak",
    "Olsen",
    "Petrov",
    "Quint",
    "Rossi",
    "Schmidt",
    "Tanaka",
];
const CITIES: [(&str, &str); 8] = [
    ("Warsaw", "Poland"),
    ("Krakow", "Poland"),
    ("Lyon", "France"),
    ("Paris", "France"),
    ("Munich", "Germany"),
    ("Hamburg", "Germany"),
    ("Milan", "Italy"),
    ("Naples", "Italy"),
];
const JOBS: [&str; 8] = [
    "painter",
    "chemist",
    "architect",
    "composer",
    "lawyer",
    "poet",
    "engineer",
    "physician",
];

/// Biographical snippets with explicit (birthplace, occupation, birth year)
/// and inferable (citizenship, instance of) properties. Each article
/// queries a random subset of two to four properties.
pub fn extraction_fixture(n: usize, seed: u64) -> Vec<MultiPropertyRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let name = format!("{} {}", FIRST.choose(&mut rng).unwrap(), LAST.choose(&mut rng).unwrap());
            let (city, country) = *CITIES.choose(&mut rng).unwrap();
            let job = *JOBS.choose(&mut rng).unwrap();
            let year = rng.random_range(1850..1990).to_string();
            let text = match rng.random_range(0..3) {
                0 => format!("{name} was born in {city} in {year} and works as a {job}."),
                1 => format!("{name} ({year}) is a {job} from {city}."),
                _ => format!("Born in {year} in {city}, {name} became a {job}."),
            };
            let all: [(&str, String); 5] = [
                ("place of birth", city.to_string()),
                ("occupation", job.to_string()),
                ("date of birth", year),
                ("country of citizenship", country.to_string()),
                ("instance of", "human".to_string()),
            ];
            let k = rng.random_range(2..=4);
            let mut idx: Vec<usize> = (0..all.len()).collect();
            idx.shuffle(&mut rng);
            let properties = idx[..k]
                .iter()
                .map(|&j| (all[j].0.to_string(), vec![all[j].1.clone()]))
                .collect();
            MultiPropertyRecord {
                id: format!("F{i:03}"),
                text,
                properties,
            }
        })
        .collect()
}

/// Corpus for the property-name leakage check. Every article queries
/// `group` plus one of `alpha` / `beta`. When `correlated`, `group` is
/// `red` exactly when `alpha` is queried; otherwise it is a coin flip.
/// The `group` value always appears in the article.
pub fn leakage_corpus(n: usize, correlated: bool, seed: u64) -> Vec<MultiPropertyRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let alpha = rng.random_bool(0.5);
            let red = if correlated { alpha } else { rng.random_bool(0.5) };
            let colour = if red { "red" } else { "blue" };
            let thing = word(&mut rng);
            let filler = word(&mut rng);
            let key = if alpha { "alpha" } else { "beta" };
            let text = format!("the {thing} near {filler} is painted {colour}.");
            let properties = [
                (key.to_string(), vec![thing]),
                ("group".to_string(), vec![colour.to_string()]),
            ]
            .into_iter()
            .collect();
            MultiPropertyRecord {
                id: format!("L{i:03}"),
                text,
                properties,
            }
        })
        .collect()
}

/// Texts for tokenizer training: articles, property names and targets.
pub fn tokenizer_corpus(records: &[MultiPropertyRecord]) -> Vec<String> {
    let mut out = Vec::new();
    for r in records {
        out.push(r.text.clone());
        out.push(crate::model::serialize_target(&r.properties));
        out.push(crate::model::serialize_property_query(r.properties.keys()));
    }
    out
}
