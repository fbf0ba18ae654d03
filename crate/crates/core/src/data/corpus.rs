use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainRole {
    Train,
    Ood,
    /// Present on disk but not used.
    Unused,
}

/// Domain → role mapping plus split settings, as stored next to the text files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default = "default_dev_fraction")]
    pub dev_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    pub domains: IndexMap<String, DomainRole>,
}

fn default_dev_fraction() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    /// Held-out domains, by name.
    pub ood: IndexMap<String, Vec<String>>,
    pub train_domains: Vec<String>,
    pub seed: u64,
}

impl Corpus {
    pub fn all_texts(&self) -> impl Iterator<Item = &str> {
        self.train
            .iter()
            .chain(&self.dev)
            .chain(self.ood.values().flatten())
            .map(String::as_str)
    }
}

/// Documents are separated by one or more blank lines.
pub fn parse_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                docs.push(cur.join("\n"));
                cur.clear();
            }
        } else {
            cur.push(line);
        }
    }
    if !cur.is_empty() {
        docs.push(cur.join("\n"));
    }
    docs
}

pub fn write_documents(docs: &[String]) -> String {
    let mut s = docs.join("\n\n");
    s.push('\n');
    s
}

/// Moves `dev_fraction` of each train domain (rounded half up) into dev.
/// Document order within train and dev follows the input order.
pub fn split_domains(
    raw: &IndexMap<String, Vec<String>>,
    train_names: &[String],
    dev_fraction: f64,
    ood_names: &[String],
    seed: u64,
) -> Result<Corpus> {
    if let Some(both) = train_names.iter().find(|n| ood_names.contains(n)) {
        return Err(LabError::Invalid(format!(
            "domain {both:?} is both train and ood"
        )));
    }
    if !(0.0..1.0).contains(&dev_fraction) {
        return Err(LabError::Invalid(format!(
            "dev_fraction {dev_fraction} outside [0, 1)"
        )));
    }
    let get = |name: &String| {
        raw.get(name)
            .ok_or_else(|| LabError::Invalid(format!("unknown domain {name:?}")))
    };
    let rng = SeededRng::new(seed, "split");
    let mut train = Vec::new();
    let mut dev = Vec::new();
    for name in train_names {
        let docs = get(name)?;
        let n_dev = (dev_fraction * docs.len() as f64 + 0.5).floor() as usize;
        let mut chosen = rng.substream(name).sample_indices(docs.len(), n_dev);
        chosen.sort_unstable();
        let mut it = chosen.iter().peekable();
        for (i, d) in docs.iter().enumerate() {
            if it.peek() == Some(&&i) {
                it.next();
                dev.push(d.clone());
            } else {
                train.push(d.clone());
            }
        }
    }
    let mut ood = IndexMap::new();
    for name in ood_names {
        ood.insert(name.clone(), get(name)?.clone());
    }
    if train.is_empty() {
        return Err(LabError::Empty("no training documents".into()));
    }
    Ok(Corpus {
        train,
        dev,
        ood,
        train_domains: train_names.to_vec(),
        seed,
    })
}

/// Reads `manifest.toml` and one `<domain>.txt` per listed domain.
pub fn load_corpus_dir(dir: &Path) -> Result<(Manifest, Corpus)> {
    let text = std::fs::read_to_string(dir.join("manifest.toml"))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| LabError::Format(format!("manifest: {e}")))?;
    let mut raw = IndexMap::new();
    let mut train = Vec::new();
    let mut ood = Vec::new();
    for (name, role) in &manifest.domains {
        match role {
            DomainRole::Train => train.push(name.clone()),
            DomainRole::Ood => ood.push(name.clone()),
            DomainRole::Unused => continue,
        }
        let body = std::fs::read_to_string(dir.join(format!("{name}.txt")))?;
        raw.insert(name.clone(), parse_documents(&body));
    }
    let corpus = split_domains(&raw, &train, manifest.dev_fraction, &ood, manifest.seed)?;
    Ok((manifest, corpus))
}
