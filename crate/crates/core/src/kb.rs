//! Knowledge-base triples, distant-supervision weak labels, and per-example
//! KB slices.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::text::{tokenize, TokenId, Vocabulary};

/// `(subject, relation, object)` fact with tokenized fields.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triple {
    pub id: usize,
    pub subject: Vec<String>,
    pub relation: Vec<String>,
    pub object: Vec<String>,
}

impl Triple {
    /// Subject, relation, and object tokens concatenated.
    pub fn tokens(&self) -> impl Iterator<Item = &String> {
        self.subject.iter().chain(&self.relation).chain(&self.object)
    }

    pub fn entity_tokens(&self) -> impl Iterator<Item = &String> {
        self.subject.iter().chain(&self.object)
    }

    pub fn token_ids(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        self.tokens().map(|t| vocab.id(t)).collect()
    }

    /// Canonical surface forms `[subject, relation, object]`.
    pub fn surface(&self) -> [String; 3] {
        [self.subject.join(" "), self.relation.join(" "), self.object.join(" ")]
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [s, r, o] = self.surface();
        write!(f, "({s} | {r} | {o})")
    }
}

/// 1 iff some token of the subject or object occurs in `target`.
/// Relation tokens are not consulted.
pub fn weak_label<S: AsRef<str>>(triple: &Triple, target: &[S]) -> bool {
    let set: HashSet<&str> = target.iter().map(|t| t.as_ref()).collect();
    triple.entity_tokens().any(|t| set.contains(t.as_str()))
}

/// Mean of the embedding rows of the triple's tokens.
pub fn embed_triple<T: Real>(triple: &Triple, table: &Tensor<T>, vocab: &Vocabulary) -> Vec<T> {
    let ids = triple.token_ids(vocab);
    let d = table.cols();
    let mut out = vec![T::zero(); d];
    for &id in &ids {
        for (o, &v) in out.iter_mut().zip(table.row(id as usize)) {
            *o += v;
        }
    }
    let n = T::c(ids.len() as f64);
    out.iter_mut().for_each(|v| *v = *v / n);
    out
}

/// Immutable triple store with an entity-token index.
#[derive(Clone, Debug, Default)]
pub struct KnowledgeBase {
    triples: Vec<Triple>,
    by_entity_token: HashMap<String, Vec<usize>>,
    by_surface: HashMap<[String; 3], usize>,
}

impl KnowledgeBase {
    /// Builds the store from raw rows. Rows whose tokenized fields repeat an
    /// earlier row are dropped; the number dropped is returned.
    pub fn from_rows<I, S>(rows: I) -> Result<(Self, usize)>
    where
        I: IntoIterator<Item = [S; 3]>,
        S: AsRef<str>,
    {
        let mut kb = KnowledgeBase::default();
        let mut dups = 0;
        for (row, [s, r, o]) in rows.into_iter().enumerate() {
            let fields = [tokenize(s.as_ref()), tokenize(r.as_ref()), tokenize(o.as_ref())];
            for (name, f) in ["subject", "relation", "object"].iter().zip(&fields) {
                if f.is_empty() {
                    return Err(Error::invalid(format!("triple row {}: empty {name}", row + 1)));
                }
            }
            let [subject, relation, object] = fields;
            let triple = Triple {
                id: kb.triples.len(),
                subject,
                relation,
                object,
            };
            let key = triple.surface();
            if kb.by_surface.contains_key(&key) {
                dups += 1;
                continue;
            }
            kb.by_surface.insert(key, triple.id);
            let mut seen = HashSet::new();
            for t in triple.entity_tokens() {
                if seen.insert(t.clone()) {
                    kb.by_entity_token.entry(t.clone()).or_default().push(triple.id);
                }
            }
            kb.triples.push(triple);
        }
        Ok((kb, dups))
    }

    /// Loads a triple file: tab-separated rows, or JSON (array or one value
    /// per line) with rows as `[s, r, o]` or `{subject, relation, object}`.
    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = matches!(path.extension().and_then(|e| e.to_str()), Some("json" | "jsonl"))
            || body.trim_start().starts_with(['[', '{']);
        let rows = if is_json { json_rows(&body)? } else { tsv_rows(&body)? };
        let (kb, dups) = Self::from_rows(rows).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::invalid(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if dups > 0 {
            log::warn!("{}: dropped {dups} duplicate triples", path.display());
        }
        Ok(kb)
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for t in &self.triples {
            let [s, r, o] = t.surface();
            body.push_str(&format!("{s}\t{r}\t{o}\n"));
        }
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn get(&self, id: usize) -> Option<&Triple> {
        self.triples.get(id)
    }

    /// Id of the triple with these surface forms, after tokenization.
    pub fn find(&self, surface: &[String; 3]) -> Option<usize> {
        let key = [
            tokenize(&surface[0]).join(" "),
            tokenize(&surface[1]).join(" "),
            tokenize(&surface[2]).join(" "),
        ];
        self.by_surface.get(&key).copied()
    }

    /// Ids of all triples weakly labeled positive for `target`, ascending.
    pub fn weak_positives<S: AsRef<str>>(&self, target: &[S]) -> Vec<usize> {
        let mut ids: Vec<usize> = target
            .iter()
            .filter_map(|t| self.by_entity_token.get(t.as_ref()))
            .flatten()
            .copied()
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// All subject, relation, and object strings, for vocabulary building.
    pub fn surface_texts(&self) -> impl Iterator<Item = String> + '_ {
        self.triples.iter().flat_map(|t| t.surface())
    }

    /// Distinct subject and object surface forms.
    pub fn entity_surfaces(&self) -> Vec<Vec<String>> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for t in &self.triples {
            for e in [&t.subject, &t.object] {
                if seen.insert(e.clone()) {
                    out.push(e.clone());
                }
            }
        }
        out
    }
}

fn tsv_rows(body: &str) -> Result<Vec<[String; 3]>> {
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            match f.as_slice() {
                [s, r, o] => Ok([s.to_string(), r.to_string(), o.to_string()]),
                _ => Err(Error::invalid(format!("triple row {}: expected 3 tab-separated fields, got {}", n + 1, f.len()))),
            }
        })
        .collect()
}

fn json_rows(body: &str) -> Result<Vec<[String; 3]>> {
    let values: Vec<Value> = if body.trim_start().starts_with('[') && serde_json::from_str::<Vec<Value>>(body).is_ok() {
        serde_json::from_str(body)?
    } else {
        body.lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?
    };
    values
        .iter()
        .enumerate()
        .map(|(n, v)| {
            let field = |key: &str, idx: usize| -> Option<String> {
                match v {
                    Value::Array(a) if a.len() == 3 => a[idx].as_str().map(str::to_string),
                    Value::Object(o) => o.get(key).and_then(Value::as_str).map(str::to_string),
                    _ => None,
                }
            };
            match (field("subject", 0), field("relation", 1), field("object", 2)) {
                (Some(s), Some(r), Some(o)) => Ok([s, r, o]),
                _ => Err(Error::invalid(format!(
                    "triple row {}: expected [subject, relation, object] or an object with those keys",
                    n + 1
                ))),
            }
        })
        .collect()
}

/// How the KB slice for one example is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KbMode {
    /// No KB slots; the plain Transformer ablation.
    None,
    /// Gold relevant triples from the corpus annotations.
    Oracle,
    /// Exactly the weakly labeled positives.
    WeakPositive,
    /// Weak positives plus uniformly sampled negatives up to the given size.
    Sampled(usize),
    /// Every triple in the KB.
    Full,
}

impl fmt::Display for KbMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KbMode::None => f.write_str("none"),
            KbMode::Oracle => f.write_str("oracle"),
            KbMode::WeakPositive => f.write_str("weak"),
            KbMode::Sampled(s) => write!(f, "sampled:{s}"),
            KbMode::Full => f.write_str("full"),
        }
    }
}

impl FromStr for KbMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "none" => Ok(KbMode::None),
            "oracle" => Ok(KbMode::Oracle),
            "weak" | "weak-positive" => Ok(KbMode::WeakPositive),
            "full" => Ok(KbMode::Full),
            _ => {
                let n = s
                    .strip_prefix("sampled:")
                    .or_else(|| s.strip_prefix("sampled="))
                    .ok_or_else(|| Error::invalid(format!("unknown KB mode `{s}`")))?;
                let size: i64 = n.parse().map_err(|_| Error::invalid(format!("bad KB size `{n}`")))?;
                if size <= 0 {
                    return Err(Error::invalid(format!("KB size must be positive, got {size}")));
                }
                Ok(KbMode::Sampled(size as usize))
            }
        }
    }
}

impl Serialize for KbMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for KbMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Triples presented to the model for one example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KbSlice {
    pub triple_ids: Vec<usize>,
    /// Weak label per slot; empty in [`KbMode::None`].
    pub labels: Vec<bool>,
    pub mode: KbMode,
}

impl KbSlice {
    pub fn len(&self) -> usize {
        self.triple_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triple_ids.is_empty()
    }

    pub fn empty(mode: KbMode) -> Self {
        KbSlice {
            triple_ids: Vec::new(),
            labels: Vec::new(),
            mode,
        }
    }

    /// Token ids of each slot's triple.
    pub fn token_ids(&self, kb: &KnowledgeBase, vocab: &Vocabulary) -> Vec<Vec<TokenId>> {
        self.triple_ids.iter().map(|&id| kb.triples[id].token_ids(vocab)).collect()
    }
}

/// Builds the KB slice for one example.
///
/// `target` is the tokenized ground-truth target used for weak labels
/// (empty at serving time, when no labels exist); `gold` holds annotated
/// relevant triple ids for oracle mode.
pub fn build_slice<S: AsRef<str>>(
    kb: &KnowledgeBase,
    target: &[S],
    gold: Option<&[usize]>,
    mode: KbMode,
    seed: u64,
) -> Result<KbSlice> {
    let positives = kb.weak_positives(target);
    let ids: Vec<usize> = match mode {
        KbMode::None => return Ok(KbSlice::empty(mode)),
        KbMode::Full => (0..kb.len()).collect(),
        KbMode::WeakPositive => positives.clone(),
        KbMode::Oracle => match gold {
            Some(g) if !g.is_empty() => {
                let mut g = g.to_vec();
                g.sort_unstable();
                g.dedup();
                if let Some(&bad) = g.iter().find(|&&id| id >= kb.len()) {
                    return Err(Error::invalid(format!("gold triple id {bad} outside KB of {}", kb.len())));
                }
                g
            }
            _ => {
                log::warn!("oracle KB mode without gold triples; using weak positives");
                positives.clone()
            }
        },
        KbMode::Sampled(size) => {
            if size == 0 {
                return Err(Error::invalid("KB slice size must be positive"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ids = positives.clone();
            if positives.len() > size {
                log::warn!("{} weak positives exceed slice size {size}; keeping all", positives.len());
            }
            let want = size.saturating_sub(positives.len()).min(kb.len() - positives.len());
            if want > 0 {
                let pos: HashSet<usize> = positives.iter().copied().collect();
                let negatives: Vec<usize> = (0..kb.len()).filter(|i| !pos.contains(i)).collect();
                let picked = rand::seq::index::sample(&mut rng, negatives.len(), want);
                ids.extend(picked.iter().map(|i| negatives[i]));
            }
            ids.shuffle(&mut rng);
            ids
        }
    };
    let pos: HashSet<usize> = positives.into_iter().collect();
    let labels = ids.iter().map(|id| pos.contains(id)).collect();
    Ok(KbSlice {
        triple_ids: ids,
        labels,
        mode,
    })
}
