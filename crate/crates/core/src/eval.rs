//! Corpus metrics (BLEU, Entity F-1, Action F-1) and test-set evaluation.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decode::{decode, DecodeSettings};
use crate::error::{Error, Result};
use crate::kb::{KbMode, KnowledgeBase};
use crate::model::NeuralAssistant;
use crate::tensor::Real;
use crate::text::{parse_output, tokenize, ActionCall, Dialog, Vocabulary};
use crate::train::make_examples;

pub const BLEU_EPSILON: f64 = 1e-9;
pub const BLEU_VARIANT: &str = "corpus BLEU-4, uniform weights, brevity penalty, add-1e-9 smoothing of zero n-gram counts";
pub const ENTITY_MATCHING: &str = "greedy longest exact token match against KB subjects and objects; micro-averaged";
pub const ACTION_GRANULARITY: &str = "items {name} + {(name, slot, value)}; micro-averaged";

fn ngrams<S: AsRef<str>>(toks: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.iter().map(|t| t.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 over pre-tokenized sentences, on a 0-100 scale.
pub fn bleu_tokens<S: AsRef<str>>(references: &[Vec<S>], hypotheses: &[Vec<S>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::invalid("BLEU over an empty corpus"));
    }
    if references.len() != hypotheses.len() {
        return Err(Error::invalid(format!(
            "{} references for {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut ref_len, mut hyp_len) = (0usize, 0usize);
    for (r, h) in references.iter().zip(hypotheses) {
        ref_len += r.len();
        hyp_len += h.len();
        for n in 1..=4 {
            let rc = ngrams(r, n);
            let hc = ngrams(h, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let p = match (matches[n], totals[n]) {
            (_, 0) => BLEU_EPSILON,
            (0, t) => BLEU_EPSILON / t as f64,
            (m, t) => m as f64 / t as f64,
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / 4.0).exp())
}

/// Corpus BLEU-4 of raw texts, tokenized with the pipeline tokenizer.
pub fn bleu<S: AsRef<str>>(references: &[S], hypotheses: &[S]) -> Result<f64> {
    let r: Vec<Vec<String>> = references.iter().map(|s| tokenize(s.as_ref())).collect();
    let h: Vec<Vec<String>> = hypotheses.iter().map(|s| tokenize(s.as_ref())).collect();
    bleu_tokens(&r, &h)
}

/// Tokenized entity surface forms.
#[derive(Clone, Debug, Default)]
pub struct EntityLexicon {
    entries: HashSet<Vec<String>>,
    longest: usize,
}

impl EntityLexicon {
    pub fn new<I, S>(surfaces: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut lex = EntityLexicon::default();
        for s in surfaces {
            let toks = tokenize(s.as_ref());
            if !toks.is_empty() {
                lex.longest = lex.longest.max(toks.len());
                lex.entries.insert(toks);
            }
        }
        lex
    }

    /// Subjects and objects of every triple.
    pub fn from_kb(kb: &KnowledgeBase) -> Self {
        Self::new(kb.entity_surfaces().into_iter().map(|t| t.join(" ")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Greedy left-to-right longest match over the tokenized text.
pub fn extract_entities(text: &str, lexicon: &EntityLexicon) -> BTreeSet<String> {
    let toks = tokenize(text);
    let mut found = BTreeSet::new();
    let mut i = 0;
    while i < toks.len() {
        let max = lexicon.longest.min(toks.len() - i);
        let hit = (1..=max).rev().find(|&n| lexicon.entries.contains(&toks[i..i + n]));
        match hit {
            Some(n) => {
                found.insert(toks[i..i + n].join(" "));
                i += n;
            }
            None => i += 1,
        }
    }
    found
}

/// `2 * overlap / (|predicted| + |reference|)`, defined as 1 when both are empty.
fn f1(overlap: usize, predicted: usize, reference: usize) -> f64 {
    if predicted + reference == 0 {
        1.0
    } else {
        2.0 * overlap as f64 / (predicted + reference) as f64
    }
}

/// Micro-averaged F-1 between per-example entity sets.
pub fn entity_f1<S: AsRef<str>>(references: &[S], hypotheses: &[S], lexicon: &EntityLexicon) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::invalid("entity F-1 over an empty corpus"));
    }
    if references.len() != hypotheses.len() {
        return Err(Error::invalid("reference and hypothesis counts differ"));
    }
    let (mut tp, mut np, mut nr) = (0, 0, 0);
    for (r, h) in references.iter().zip(hypotheses) {
        let re = extract_entities(r.as_ref(), lexicon);
        let he = extract_entities(h.as_ref(), lexicon);
        tp += re.intersection(&he).count();
        np += he.len();
        nr += re.len();
    }
    Ok(f1(tp, np, nr))
}

/// `{name} + {(name, slot, value)}` items of an action.
pub fn action_items(a: &ActionCall) -> Vec<String> {
    let mut items = vec![a.name.clone()];
    items.extend(a.slots.iter().map(|(s, v)| format!("{}|{s}|{v}", a.name)));
    items
}

fn item_counts(actions: &[ActionCall]) -> HashMap<String, usize> {
    let mut m = HashMap::new();
    for a in actions {
        for it in action_items(a) {
            *m.entry(it).or_insert(0) += 1;
        }
    }
    m
}

/// Micro-averaged F-1 over action items; each example holds zero or more actions.
pub fn action_f1(references: &[Vec<ActionCall>], predictions: &[Vec<ActionCall>]) -> Result<f64> {
    if references.len() != predictions.len() {
        return Err(Error::invalid("reference and prediction counts differ"));
    }
    let (mut tp, mut np, mut nr) = (0, 0, 0);
    for (r, p) in references.iter().zip(predictions) {
        let rc = item_counts(r);
        let pc = item_counts(p);
        tp += pc.iter().map(|(k, &c)| c.min(rc.get(k).copied().unwrap_or(0))).sum::<usize>();
        np += pc.values().sum::<usize>();
        nr += rc.values().sum::<usize>();
    }
    Ok(f1(tp, np, nr))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub dialog_id: String,
    pub turn: usize,
    pub reference: String,
    pub hypothesis: String,
    pub reference_action: Option<String>,
    pub predicted_action: Option<String>,
    pub malformed_action: bool,
    pub matched_entities: Vec<String>,
    pub missed_entities: Vec<String>,
    pub spurious_entities: Vec<String>,
    pub missing_action_items: Vec<String>,
    pub spurious_action_items: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub action_f1: f64,
    pub entity_f1: f64,
    pub kb_mode: KbMode,
    pub decode: DecodeSettings,
    pub seed: u64,
    pub checkpoint_step: Option<u64>,
    pub vocab_hash: String,
    pub bleu_variant: String,
    pub entity_matching: String,
    pub action_granularity: String,
    pub examples: Vec<ExampleRecord>,
}

impl EvalReport {
    /// `S BLEU ActionF1 EntityF1`.
    pub fn summary_row(&self) -> String {
        let s = match self.kb_mode {
            KbMode::Sampled(n) => n.to_string(),
            other => other.to_string(),
        };
        format!("{s} {:.2} {:.4} {:.4}", self.bleu, self.action_f1, self.entity_f1)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub const SUMMARY_HEADER: &str = "S BLEU ActionF1 EntityF1";

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub kb_mode: KbMode,
    pub decode: DecodeSettings,
    pub seed: u64,
    pub max_history: usize,
    /// Hash of the vocabulary the data was prepared with, if known.
    pub expected_vocab_hash: Option<String>,
    pub checkpoint_step: Option<u64>,
}

fn diff(a: &BTreeSet<String>, b: &BTreeSet<String>) -> Vec<String> {
    a.difference(b).cloned().collect()
}

/// Turn-level evaluation: each assistant turn is decoded from its
/// ground-truth history and scored. KB slices are built as in training,
/// so weak positives for the reference are included.
pub fn evaluate<T: Real>(
    model: &NeuralAssistant<T>,
    vocab: &Vocabulary,
    dialogs: &[Dialog],
    kb: &KnowledgeBase,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if let Some(expected) = &opts.expected_vocab_hash {
        if *expected != vocab.hash() {
            return Err(Error::VocabMismatch {
                expected: expected.clone(),
                actual: vocab.hash(),
            });
        }
    }
    if vocab.len() != model.config().vocab_size {
        return Err(Error::VocabMismatch {
            expected: format!("{} entries", model.config().vocab_size),
            actual: format!("{} entries", vocab.len()),
        });
    }
    let kb_opt = if kb.is_empty() { None } else { Some(kb) };
    let examples = make_examples(dialogs, kb_opt, vocab, opts.kb_mode, opts.seed, opts.max_history)?;
    if examples.is_empty() {
        return Err(Error::invalid("no assistant turns to evaluate"));
    }
    let lexicon = EntityLexicon::from_kb(kb);
    let by_id: HashMap<&str, &Dialog> = dialogs.iter().map(|d| (d.id.as_str(), d)).collect();

    let mut refs = Vec::with_capacity(examples.len());
    let mut hyps = Vec::with_capacity(examples.len());
    let mut ref_actions = Vec::with_capacity(examples.len());
    let mut hyp_actions = Vec::with_capacity(examples.len());
    let mut records = Vec::with_capacity(examples.len());
    for ex in &examples {
        let turn = &by_id[ex.dialog_id.as_str()].turns[ex.turn];
        let tokens = decode(model, &ex.history, &ex.kb_triples, &opts.decode)?;
        let parsed = parse_output(&tokens, vocab);
        let reference = turn.text.clone();
        let re = extract_entities(&reference, &lexicon);
        let he = extract_entities(&parsed.response, &lexicon);
        let ra: Vec<ActionCall> = turn.action.iter().cloned().collect();
        let pa: Vec<ActionCall> = parsed.action.iter().cloned().collect();
        let ri: BTreeSet<String> = ra.iter().flat_map(action_items).collect();
        let pi: BTreeSet<String> = pa.iter().flat_map(action_items).collect();
        records.push(ExampleRecord {
            dialog_id: ex.dialog_id.clone(),
            turn: ex.turn,
            reference: reference.clone(),
            hypothesis: parsed.response.clone(),
            reference_action: turn.action.as_ref().map(ToString::to_string),
            predicted_action: parsed.raw_action.clone(),
            malformed_action: parsed.malformed_action,
            matched_entities: re.intersection(&he).cloned().collect(),
            missed_entities: diff(&re, &he),
            spurious_entities: diff(&he, &re),
            missing_action_items: diff(&ri, &pi),
            spurious_action_items: diff(&pi, &ri),
        });
        refs.push(reference);
        hyps.push(parsed.response);
        ref_actions.push(ra);
        hyp_actions.push(pa);
    }
    Ok(EvalReport {
        bleu: bleu(&refs, &hyps)?,
        action_f1: action_f1(&ref_actions, &hyp_actions)?,
        entity_f1: entity_f1(&refs, &hyps, &lexicon)?,
        kb_mode: opts.kb_mode,
        decode: opts.decode,
        seed: opts.seed,
        checkpoint_step: opts.checkpoint_step,
        vocab_hash: vocab.hash(),
        bleu_variant: BLEU_VARIANT.into(),
        entity_matching: ENTITY_MATCHING.into(),
        action_granularity: ACTION_GRANULARITY.into(),
        examples: records,
    })
}

/// Summary rows under a header, one per report.
pub fn summary_table(reports: &[EvalReport]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{}", r.summary_row());
    }
    out
}
