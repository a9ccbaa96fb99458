//! Greedy and beam decoding, and multi-turn sessions that feed the
//! model's own replies back into the history.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::{build_slice, KbMode, KnowledgeBase};
use crate::model::{Dropout, Memory, NeuralAssistant};
use crate::tensor::{Graph, Real};
use crate::text::{encode_history, parse_output, ActionCall, Provenance, TokenId, Turn, Vocabulary, BOS, EOS};

/// Text returned when decoding yields no response tokens.
pub const FALLBACK_RESPONSE: &str = "sorry , i did not catch that . could you rephrase ?";

/// Next-token log-probabilities given a generated prefix.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    fn log_probs(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

/// Appends the argmax token (lowest id on ties) until `<eos>` or `max_len`.
/// The returned sequence includes `<eos>` when it was produced.
pub fn greedy<M: StepModel>(model: &mut M, max_len: usize) -> Result<Vec<TokenId>> {
    if max_len == 0 {
        return Err(Error::invalid("max decode length must be at least 1"));
    }
    let mut out = Vec::new();
    while out.len() < max_len {
        let lp = model.log_probs(&out)?;
        let tok = crate::train::argmax(&lp) as TokenId;
        out.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok(out)
}

/// Length-normalized score `logp / len^penalty`.
pub fn normalized_score(log_prob: f64, len: usize, penalty: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(penalty)
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<TokenId>,
    log_prob: f64,
}

/// Beam search over log-probabilities. Returns the best finished
/// hypothesis by normalized score, else the best unfinished one at
/// `max_len`. The greedy path is always among the candidates, so the
/// result never scores below greedy.
pub fn beam<M: StepModel>(model: &mut M, width: usize, max_len: usize, penalty: f64) -> Result<Vec<TokenId>> {
    if width == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    if max_len == 0 {
        return Err(Error::invalid("max decode length must be at least 1"));
    }
    let mut live = vec![Hyp { tokens: Vec::new(), log_prob: 0.0 }];
    let mut finished: Vec<Hyp> = Vec::new();
    for _ in 0..max_len {
        let mut cands: Vec<Hyp> = Vec::new();
        for h in &live {
            let lp = model.log_probs(&h.tokens)?;
            let mut ids: Vec<usize> = (0..lp.len()).collect();
            ids.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &t in ids.iter().take(width) {
                let mut tokens = h.tokens.clone();
                tokens.push(t as TokenId);
                cands.push(Hyp {
                    tokens,
                    log_prob: h.log_prob + lp[t],
                });
            }
        }
        cands.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens)));
        live.clear();
        for c in cands {
            if live.len() >= width {
                break;
            }
            if c.tokens.last() == Some(&EOS) {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() || finished.len() >= width {
            break;
        }
    }
    let g = greedy(model, max_len)?;
    let g_lp = sequence_log_prob(model, &g)?;
    let greedy_hyp = Hyp { tokens: g, log_prob: g_lp };
    let pool = if finished.is_empty() { live } else { finished };
    let score = |h: &Hyp| normalized_score(h.log_prob, h.tokens.len(), penalty);
    let mut best = greedy_hyp;
    for h in pool {
        if score(&h) > score(&best) {
            best = h;
        }
    }
    Ok(best.tokens)
}

/// Sum of next-token log-probabilities of `tokens`.
pub fn sequence_log_prob<M: StepModel>(model: &mut M, tokens: &[TokenId]) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..tokens.len() {
        total += model.log_probs(&tokens[..i])?[tokens[i] as usize];
    }
    Ok(total)
}

/// [`StepModel`] over a trained model with a fixed history and KB slice.
/// The encoder output and memory projections are computed once; each
/// step reruns the decoder over the whole prefix.
pub struct NeuralStepper<'m, T: Real> {
    model: &'m NeuralAssistant<T>,
    graph: Graph<'m, T>,
    memory: Memory,
    mark: usize,
}

impl<'m, T: Real> NeuralStepper<'m, T> {
    pub fn new(model: &'m NeuralAssistant<T>, history: &[TokenId], kb_triples: &[Vec<TokenId>]) -> Result<Self> {
        let mut graph = model.graph();
        let h = model.encode(&mut graph, history, &mut Dropout::eval())?;
        let kb = if kb_triples.is_empty() {
            None
        } else {
            Some(model.embed_kb(&mut graph, kb_triples)?)
        };
        let memory = model.memory(&mut graph, h, kb)?;
        let mark = graph.len();
        Ok(NeuralStepper {
            model,
            graph,
            memory,
            mark,
        })
    }

    /// Longest prefix the position table allows.
    pub fn max_len(&self) -> usize {
        self.model.config().max_positions
    }
}

impl<T: Real> StepModel for NeuralStepper<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn log_probs(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.graph.truncate(self.mark);
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(prefix);
        let out = self.model.decode(&mut self.graph, &self.memory, &inputs, &mut Dropout::eval())?;
        let logits = self.graph.value(out.logits);
        let row: Vec<f64> = logits.row(inputs.len() - 1).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        Ok(log_softmax(&row))
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Greedy => f.write_str("greedy"),
            Strategy::Beam(w) => write!(f, "beam:{w}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "greedy" => Ok(Strategy::Greedy),
            other => match other.strip_prefix("beam:").map(str::parse::<usize>) {
                Some(Ok(w)) if w >= 1 => Ok(Strategy::Beam(w)),
                _ => Err(Error::invalid(format!("unknown decode strategy `{s}` (greedy | beam:N)"))),
            },
        }
    }
}

impl Serialize for Strategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeSettings {
    pub strategy: Strategy,
    pub max_len: usize,
    pub length_penalty: f64,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        DecodeSettings {
            strategy: Strategy::Greedy,
            max_len: 64,
            length_penalty: 0.6,
        }
    }
}

/// Decodes one target sequence for `history` against a KB slice.
pub fn decode<T: Real>(
    model: &NeuralAssistant<T>,
    history: &[TokenId],
    kb_triples: &[Vec<TokenId>],
    settings: &DecodeSettings,
) -> Result<Vec<TokenId>> {
    let mut stepper = NeuralStepper::new(model, history, kb_triples)?;
    let max_len = settings.max_len.min(stepper.max_len() - 1).max(1);
    match settings.strategy {
        Strategy::Greedy => greedy(&mut stepper, max_len),
        Strategy::Beam(w) => beam(&mut stepper, w, max_len, settings.length_penalty),
    }
}

pub fn greedy_decode<T: Real>(
    model: &NeuralAssistant<T>,
    history: &[TokenId],
    kb_triples: &[Vec<TokenId>],
    max_len: usize,
) -> Result<Vec<TokenId>> {
    let mut stepper = NeuralStepper::new(model, history, kb_triples)?;
    greedy(&mut stepper, max_len)
}

pub fn beam_decode<T: Real>(
    model: &NeuralAssistant<T>,
    history: &[TokenId],
    kb_triples: &[Vec<TokenId>],
    width: usize,
    max_len: usize,
) -> Result<Vec<TokenId>> {
    let mut stepper = NeuralStepper::new(model, history, kb_triples)?;
    beam(&mut stepper, width, max_len, DecodeSettings::default().length_penalty)
}

/// A trained model with its vocabulary and KB, ready to answer sessions.
/// Read-only; sessions hold all mutable state.
pub struct Assistant<T: Real> {
    pub model: NeuralAssistant<T>,
    pub vocab: Vocabulary,
    pub kb: KnowledgeBase,
    pub max_history: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub turns: Vec<Turn>,
    pub kb_mode: KbMode,
    pub kb_seed: u64,
    pub settings: DecodeSettings,
    /// Decode diagnostics aligned with `turns`; `None` for user turns.
    pub diagnostics: Vec<Option<TurnDiagnostics>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnDiagnostics {
    pub raw_action: Option<String>,
    pub malformed_action: bool,
    pub fallback: bool,
}

impl Session {
    pub fn new(id: impl Into<String>, kb_mode: KbMode, kb_seed: u64, settings: DecodeSettings) -> Self {
        Session {
            id: id.into(),
            turns: Vec::new(),
            kb_mode,
            kb_seed,
            settings,
            diagnostics: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Reply {
    pub response: String,
    pub action: Option<ActionCall>,
    /// Action text as generated, even when it failed to parse.
    pub raw_action: Option<String>,
    pub malformed_action: bool,
    /// The decoder produced no response text and the fallback was used.
    pub fallback: bool,
    /// Transcript index of the assistant turn.
    pub turn_index: usize,
}

impl<T: Real> Assistant<T> {
    /// Appends the user turn, decodes a reply, and appends it as a
    /// model-generated turn. On error the session is left unchanged.
    pub fn respond(&self, session: &mut Session, text: &str) -> Result<Reply> {
        if text.trim().is_empty() {
            return Err(Error::invalid("message text is empty"));
        }
        session.turns.push(Turn::user(text).with_provenance(Provenance::UserTyped));
        session.diagnostics.push(None);
        match self.reply(session) {
            Ok(r) => Ok(r),
            Err(e) => {
                session.turns.pop();
                session.diagnostics.pop();
                Err(e)
            }
        }
    }

    fn reply(&self, session: &mut Session) -> Result<Reply> {
        let history = encode_history(&session.turns, &self.vocab, self.max_history)?;
        let mode = if self.kb.is_empty() { KbMode::None } else { session.kb_mode };
        let seed = crate::train::example_seed(session.kb_seed, session.turns.len());
        let slice = build_slice(&self.kb, &[] as &[&str], None, mode, seed)?;
        let kb_triples = slice.token_ids(&self.kb, &self.vocab);
        let tokens = decode(&self.model, &history, &kb_triples, &session.settings)?;
        let parsed = parse_output(&tokens, &self.vocab);
        let fallback = parsed.response.trim().is_empty();
        if fallback {
            log::warn!("session {}: empty decoded response, using fallback", session.id);
        }
        let response = if fallback { FALLBACK_RESPONSE.to_string() } else { parsed.response };
        session.turns.push(
            Turn::assistant(response.clone(), parsed.action.clone()).with_provenance(Provenance::ModelGenerated),
        );
        session.diagnostics.push(Some(TurnDiagnostics {
            raw_action: parsed.raw_action.clone(),
            malformed_action: parsed.malformed_action,
            fallback,
        }));
        Ok(Reply {
            response,
            action: parsed.action,
            raw_action: parsed.raw_action,
            malformed_action: parsed.malformed_action,
            fallback,
            turn_index: session.turns.len() - 1,
        })
    }
}
