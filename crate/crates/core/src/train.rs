//! Turn-level example construction and teacher-forced training.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::kb::{build_slice, KbMode, KbSlice, KnowledgeBase};
use crate::model::{Dropout, ExampleRef, NeuralAssistant};
use crate::tensor::{Real, Tensor};
use crate::text::{
    encode_history, serialize_target, Dialog, Provenance, TokenId, Vocabulary, DEFAULT_MAX_HISTORY,
};

/// One assistant turn prepared for training or evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub dialog_id: String,
    /// Index of the assistant turn inside its dialog.
    pub turn: usize,
    pub history: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub slice: KbSlice,
    pub kb_triples: Vec<Vec<TokenId>>,
}

impl TrainingExample {
    pub fn as_ref(&self) -> ExampleRef<'_> {
        ExampleRef {
            history: &self.history,
            kb_triples: &self.kb_triples,
            labels: &self.slice.labels,
            target: &self.target,
        }
    }

    pub fn labels(&self) -> &[bool] {
        &self.slice.labels
    }

    fn tokens(&self) -> usize {
        self.history.len() + self.target.len()
    }
}

/// Per-example slice seed, independent of example order elsewhere.
pub fn example_seed(seed: u64, index: usize) -> u64 {
    mix(seed, index as u64)
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 over the pair
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Tokens the weak labels are computed against: the action string and the
/// response text of an assistant turn.
pub fn label_tokens(turn: &crate::text::Turn) -> Vec<String> {
    let mut toks = Vec::new();
    if let Some(a) = &turn.action {
        toks.extend(crate::text::tokenize(&a.to_string()));
    }
    toks.extend(crate::text::tokenize(&turn.text));
    toks
}

/// One example per assistant turn. The history holds the ground-truth
/// turns before it; a turn with model-generated provenance is rejected.
pub fn make_examples(
    dialogs: &[Dialog],
    kb: Option<&KnowledgeBase>,
    vocab: &Vocabulary,
    mode: KbMode,
    seed: u64,
    max_history: usize,
) -> Result<Vec<TrainingExample>> {
    let empty = KnowledgeBase::default();
    let kb = kb.unwrap_or(&empty);
    if kb.is_empty() && mode != KbMode::None {
        return Err(Error::invalid(format!("KB mode `{mode}` needs a nonempty KB")));
    }
    let mut out = Vec::new();
    for dialog in dialogs {
        dialog
            .validate()
            .map_err(|(field, msg)| Error::invalid(format!("dialog {}: {field}: {msg}", dialog.id)))?;
        for k in dialog.assistant_turns() {
            let history = &dialog.turns[..k];
            if let Some(t) = history.iter().find(|t| t.provenance != Provenance::GroundTruth) {
                return Err(Error::invalid(format!(
                    "dialog {}: history turn with {:?} provenance cannot be used for training",
                    dialog.id, t.provenance
                )));
            }
            let turn = &dialog.turns[k];
            let target = serialize_target(turn.action.as_ref(), &turn.text, vocab)?;
            let label_toks = label_tokens(turn);
            let gold: Vec<usize> = turn.relevant.iter().filter_map(|s| kb.find(s)).collect();
            let slice = build_slice(kb, &label_toks, Some(&gold), mode, example_seed(seed, out.len()))?;
            let kb_triples = slice.token_ids(kb, vocab);
            out.push(TrainingExample {
                dialog_id: dialog.id.clone(),
                turn: k,
                history: encode_history(history, vocab, max_history)?,
                target,
                slice,
                kb_triples,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    /// Token budget (history + target) per batch.
    pub batch_tokens: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub alpha: f64,
    pub kb_mode: KbMode,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: Option<f64>,
    pub max_history: usize,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Run dev evaluation every this many steps; 0 disables it.
    pub eval_every: u64,
    pub metrics_path: Option<PathBuf>,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 50_000,
            batch_tokens: 4096,
            learning_rate: 2e-3,
            warmup_steps: 4000,
            alpha: 0.5,
            kb_mode: KbMode::Sampled(100),
            seed: 0,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            grad_clip: None,
            max_history: DEFAULT_MAX_HISTORY,
            checkpoint_every: 0,
            checkpoint_dir: None,
            eval_every: 0,
            metrics_path: None,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be positive"));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::invalid(format!(
                "warmup {} exceeds total steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if self.batch_tokens == 0 {
            return Err(Error::invalid("batch token budget must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }

    pub fn from_toml(body: &str) -> Result<Self> {
        toml::from_str(body).map_err(|e| Error::invalid(format!("train config: {e}")))
    }
}

/// `base * min(step / warmup, sqrt(warmup / step))` for 1-based `step`;
/// constant when `warmup` is zero.
pub fn learning_rate(base: f64, warmup: u64, step: u64) -> f64 {
    let s = step.max(1) as f64;
    if warmup == 0 {
        return base;
    }
    let w = warmup as f64;
    base * (s / w).min((w / s).sqrt())
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        AdamState {
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64, b1: f64, b2: f64, eps: f64) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (b1, b2) = (T::c(b1), T::c(b2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step = T::c(lr / c1);
        let c2_sqrt = T::c(c2.sqrt());
        let eps = T::c(eps);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for ((w, &g), (mi, vi)) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                *w = *w - step * *mi / (vi.sqrt() / c2_sqrt + eps);
            }
        }
    }
}

/// Position in the data stream, enough to resume exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: u64,
    /// Batches of `epoch` already consumed.
    pub batch: usize,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub gen_loss: f64,
    pub kb_loss: f64,
    pub tokens_per_sec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DevMetrics {
    pub step: u64,
    pub gen_loss: f64,
    pub token_accuracy: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub steps: Vec<StepMetrics>,
    pub dev: Vec<DevMetrics>,
}

/// Batches for one epoch: a seeded shuffle packed greedily under the
/// token budget. An example larger than the budget forms its own batch.
pub fn epoch_batches(examples: &[TrainingExample], budget: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch)));
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut used = 0;
    for i in order {
        let n = examples[i].tokens();
        if !cur.is_empty() && used + n > budget {
            batches.push(std::mem::take(&mut cur));
            used = 0;
        }
        cur.push(i);
        used += n;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

/// Mean teacher-forced loss and argmax token accuracy, dropout off.
pub fn teacher_forced_metrics<T: Real>(model: &NeuralAssistant<T>, examples: &[TrainingExample]) -> Result<(f64, f64)> {
    let mut nll = 0.0;
    let mut correct = 0usize;
    let mut total = 0usize;
    for ex in examples {
        let mut g = model.graph();
        let out = model.forward_example(&mut g, &ex.as_ref(), &mut Dropout::eval())?;
        let targets: Vec<usize> = ex.target.iter().map(|&t| t as usize).collect();
        let loss = g.cross_entropy(out.logits, &targets, &vec![true; targets.len()])?;
        nll += g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN) * targets.len() as f64;
        let logits = g.value(out.logits);
        for (r, &t) in targets.iter().enumerate() {
            if argmax(logits.row(r)) == t {
                correct += 1;
            }
        }
        total += targets.len();
    }
    if total == 0 {
        return Err(Error::invalid("no examples"));
    }
    Ok((nll / total as f64, correct as f64 / total as f64))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub struct Trainer<T: Real> {
    pub model: NeuralAssistant<T>,
    pub vocab: Vocabulary,
    pub config: TrainConfig,
    pub optimizer: AdamState<T>,
    pub step: u64,
    epoch: u64,
    batch: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(mut model: NeuralAssistant<T>, vocab: Vocabulary, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if vocab.len() != model.config().vocab_size {
            return Err(Error::invalid(format!(
                "vocabulary of {} does not match model vocabulary of {}",
                vocab.len(),
                model.config().vocab_size
            )));
        }
        model.set_alpha(config.alpha)?;
        let optimizer = AdamState::new(model.params());
        Ok(Trainer {
            model,
            vocab,
            config,
            optimizer,
            step: 0,
            epoch: 0,
            batch: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    /// `steps`, if given, replaces the stored total step count.
    pub fn resume(ck: Checkpoint<T>, steps: Option<u64>) -> Result<Self> {
        let state = ck
            .train_state
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training state".into()))?;
        let optimizer = ck
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let mut config = state.config;
        if let Some(s) = steps {
            config.steps = s;
        }
        config.validate()?;
        Ok(Trainer {
            model: ck.model,
            vocab: ck.vocab,
            config,
            optimizer,
            step: ck.step,
            epoch: state.epoch,
            batch: state.batch,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            step: self.step,
            kb_mode: self.config.kb_mode,
            optimizer: Some(self.optimizer.clone()),
            train_state: Some(TrainState {
                epoch: self.epoch,
                batch: self.batch,
                config: self.config.clone(),
            }),
        }
    }

    fn save_checkpoint(&self, name: &str) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.config.checkpoint_dir else {
            return Ok(None);
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(name);
        self.checkpoint().save(&path)?;
        Ok(Some(path))
    }

    fn dump_batch(&self, examples: &[TrainingExample], batch: &[usize], detail: &str) -> String {
        let records: Vec<_> = batch
            .iter()
            .map(|&i| {
                let ex = &examples[i];
                json!({
                    "dialog": ex.dialog_id,
                    "turn": ex.turn,
                    "history": ex.history,
                    "target": ex.target,
                    "kb_triples": ex.slice.triple_ids,
                })
            })
            .collect();
        let body = json!({ "step": self.step + 1, "error": detail, "batch": records });
        let ids: Vec<String> = batch.iter().map(|&i| format!("{}#{}", examples[i].dialog_id, examples[i].turn)).collect();
        let mut msg = format!("{detail}; batch [{}]", ids.join(", "));
        if let Some(dir) = &self.config.checkpoint_dir {
            let path = dir.join(format!("diverged-step-{}.json", self.step + 1));
            if fs::create_dir_all(dir).is_ok() && fs::write(&path, body.to_string()).is_ok() {
                msg.push_str(&format!("; batch written to {}", path.display()));
            }
        }
        msg
    }

    /// One optimizer step over `batch`. Returns (total, generation, KB) losses.
    fn train_batch(&mut self, examples: &[TrainingExample], batch: &[usize]) -> Result<(f64, f64, f64)> {
        let alpha = self.config.alpha;
        let target_tokens: usize = batch.iter().map(|&i| examples[i].target.len()).sum();
        let with_kb = batch.iter().filter(|&&i| !examples[i].kb_triples.is_empty()).count();
        let kb_weight = if with_kb > 0 { (1.0 - alpha) / with_kb as f64 } else { 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed ^ 0x5eed, self.step + 1));
        let rate = self.model.config().dropout;

        let mut acc: Option<Vec<Tensor<T>>> = None;
        let mut gen_sum = 0.0;
        let mut kb_sum = 0.0;
        for &i in batch {
            let ex = &examples[i];
            let share = ex.target.len() as f64 / target_tokens as f64;
            let mut g = self.model.graph();
            let mut drop = Dropout::train(&mut rng, rate);
            let losses = self.model.example_losses(&mut g, &ex.as_ref(), alpha * share, kb_weight, &mut drop)?;
            gen_sum += g.value(losses.generation).data()[0].to_f64().unwrap_or(f64::NAN) * share;
            if let Some(k) = losses.kb {
                kb_sum += g.value(k).data()[0].to_f64().unwrap_or(f64::NAN);
            }
            let grads = g.backward(losses.total)?.into_params();
            match &mut acc {
                None => acc = Some(grads),
                Some(a) => {
                    for (s, gi) in a.iter_mut().zip(&grads) {
                        for (x, &y) in s.data_mut().iter_mut().zip(gi.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let mut grads = acc.ok_or_else(|| Error::invalid("empty batch"))?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "gradient" });
        }
        if let Some(max_norm) = self.config.grad_clip {
            let norm: f64 = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|&x| x.to_f64().unwrap_or(0.0).powi(2))
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                let s = T::c(max_norm / norm);
                grads.iter_mut().flat_map(|g| g.data_mut().iter_mut()).for_each(|x| *x *= s);
            }
        }
        let lr = learning_rate(self.config.learning_rate, self.config.warmup_steps, self.step + 1);
        let c = &self.config;
        self.optimizer
            .update(self.model.params_mut(), &grads, lr, c.beta1, c.beta2, c.adam_eps);
        let kb_loss = if with_kb > 0 { kb_sum / with_kb as f64 } else { 0.0 };
        let total = alpha * gen_sum + (1.0 - alpha) * kb_loss;
        Ok((total, gen_sum, kb_loss))
    }

    /// Trains until `config.steps`, optionally evaluating on `dev`.
    pub fn train(&mut self, examples: &[TrainingExample], dev: Option<&[TrainingExample]>) -> Result<TrainOutcome> {
        if examples.is_empty() {
            return Err(Error::invalid("no training examples"));
        }
        let mut log = match &self.config.metrics_path {
            Some(p) => Some(MetricsLog::open(p)?),
            None => None,
        };
        let mut outcome = TrainOutcome::default();
        let mut batches = epoch_batches(examples, self.config.batch_tokens, self.config.seed, self.epoch);
        while self.step < self.config.steps {
            if self.batch >= batches.len() {
                self.epoch += 1;
                self.batch = 0;
                batches = epoch_batches(examples, self.config.batch_tokens, self.config.seed, self.epoch);
            }
            let batch = &batches[self.batch];
            let started = Instant::now();
            let (total, gen, kb) = match self.train_batch(examples, batch) {
                Ok(v) if v.0.is_finite() => v,
                Ok(v) => {
                    let detail = self.dump_batch(examples, batch, &format!("loss {}", v.0));
                    return Err(Error::Diverged { step: self.step + 1, detail });
                }
                Err(e @ Error::NonFinite { .. }) => {
                    let detail = self.dump_batch(examples, batch, &e.to_string());
                    return Err(Error::Diverged { step: self.step + 1, detail });
                }
                Err(e) => return Err(e),
            };
            let tokens: usize = batch.iter().map(|&i| examples[i].tokens()).sum();
            self.step += 1;
            self.batch += 1;
            let m = StepMetrics {
                step: self.step,
                loss: total,
                gen_loss: gen,
                kb_loss: kb,
                tokens_per_sec: tokens as f64 / started.elapsed().as_secs_f64().max(1e-9),
            };
            if let Some(l) = &mut log {
                l.append(&m)?;
            }
            if self.config.log_every > 0 && self.step % self.config.log_every == 0 {
                log::info!(
                    "step {} loss {:.4} gen {:.4} kb {:.4} ({:.0} tok/s)",
                    m.step,
                    m.loss,
                    m.gen_loss,
                    m.kb_loss,
                    m.tokens_per_sec
                );
            }
            outcome.steps.push(m);
            if let Some(dev) = dev {
                if self.config.eval_every > 0 && self.step % self.config.eval_every == 0 && !dev.is_empty() {
                    let (loss, acc) = teacher_forced_metrics(&self.model, dev)?;
                    log::info!("step {} dev loss {loss:.4} token accuracy {acc:.4}", self.step);
                    outcome.dev.push(DevMetrics {
                        step: self.step,
                        gen_loss: loss,
                        token_accuracy: acc,
                    });
                }
            }
            if self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0 {
                self.save_checkpoint(&format!("step-{}.ckpt", self.step))?;
            }
        }
        self.save_checkpoint("final.ckpt")?;
        Ok(outcome)
    }
}

/// Append-only comma-separated metrics rows.
pub struct MetricsLog {
    file: fs::File,
}

pub const METRICS_HEADER: &str = "step,loss,gen_loss,kb_loss,tokens_per_sec";

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if fresh {
            writeln!(file, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
        }
        Ok(MetricsLog { file })
    }

    pub fn append(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(
            self.file,
            "{},{},{},{},{:.1}",
            m.step, m.loss, m.gen_loss, m.kb_loss, m.tokens_per_sec
        )
        .map_err(|e| Error::io(Path::new("metrics log"), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Turn;

    #[test]
    fn schedule_shape() {
        assert_eq!(learning_rate(2e-3, 4000, 4000), 2e-3);
        assert!((learning_rate(2e-3, 4000, 2000) - 1e-3).abs() < 1e-15);
        assert!((learning_rate(2e-3, 4000, 16000) - 1e-3).abs() < 1e-15);
        assert_eq!(learning_rate(1.0, 0, 7), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            steps: 10,
            warmup_steps: 20,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig { steps: 0, ..TrainConfig::default() }.validate().is_err());
        let c = TrainConfig::from_toml("steps = 12\nwarmup_steps = 3\nkb_mode = \"sampled:10\"\n").unwrap();
        assert_eq!((c.steps, c.warmup_steps, c.kb_mode), (12, 3, KbMode::Sampled(10)));
        assert!(TrainConfig::from_toml("stepz = 1").is_err());
    }

    fn dialog() -> Dialog {
        let mut turns = Vec::new();
        for i in 0..4 {
            turns.push(Turn::user(format!("user says {i}")));
            turns.push(Turn::assistant(format!("reply {i} ."), None));
        }
        Dialog { id: "d".into(), turns }
    }

    #[test]
    fn examples_grow_and_use_ground_truth() {
        let d = dialog();
        let vocab = crate::text::build_vocab(&[d.clone()], std::iter::empty::<&str>(), 1).unwrap();
        let ex = make_examples(&[d.clone()], None, &vocab, KbMode::None, 0, 512).unwrap();
        assert_eq!(ex.len(), 4);
        for w in ex.windows(2) {
            assert!(w[1].history.len() > w[0].history.len());
            assert_eq!(&w[1].history[..w[0].history.len()], &w[0].history[..]);
        }
        let mut bad = d;
        bad.turns[1].provenance = Provenance::ModelGenerated;
        assert!(make_examples(&[bad], None, &vocab, KbMode::None, 0, 512).is_err());
    }

    #[test]
    fn batches_respect_budget() {
        let d = dialog();
        let vocab = crate::text::build_vocab(&[d.clone()], std::iter::empty::<&str>(), 1).unwrap();
        let ex = make_examples(&[d], None, &vocab, KbMode::None, 0, 512).unwrap();
        let b = epoch_batches(&ex, 30, 1, 0);
        let mut seen: Vec<usize> = b.iter().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        for batch in &b {
            let n: usize = batch.iter().map(|&i| ex[i].tokens()).sum();
            assert!(batch.len() == 1 || n <= 30);
        }
        assert_eq!(b, epoch_batches(&ex, 30, 1, 0));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::from_f64(&[2], &[1.0, -1.0]).unwrap()];
        let g = vec![Tensor::<f64>::from_f64(&[2], &[0.5, -3.0]).unwrap()];
        let mut opt = AdamState::new(&p);
        opt.update(&mut p, &g, 0.1, 0.9, 0.98, 1e-12);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-9);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-9);
    }
}
