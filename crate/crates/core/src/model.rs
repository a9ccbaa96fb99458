//! Transformer encoder-decoder whose cross-attention ranges jointly over
//! the encoded history and the KB triple vectors, plus its training losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::text::{TokenId, BOS};

/// Lower/upper clamp applied to KB attention summaries.
pub const SUMMARY_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
    /// Weight of the generation loss; the KB attention loss gets `1 - alpha`.
    pub alpha: f64,
    pub layer_norm_eps: f64,
    /// Decoder layer whose cross-attention defines the KB attention
    /// summary; `None` means the last layer.
    pub summary_layer: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::tiny(0)
    }
}

impl ModelConfig {
    /// The "tiny" Transformer setting.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 128,
            layers: 2,
            heads: 4,
            d_ff: 512,
            vocab_size,
            max_positions: 512,
            dropout: 0.1,
            alpha: 0.5,
            layer_norm_eps: 1e-6,
            summary_layer: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model width {} must be a positive multiple of the head count {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.d_ff == 0 || self.max_positions == 0 {
            return Err(Error::invalid("layers, feed-forward width, and max positions must be positive"));
        }
        if self.vocab_size <= crate::text::SPECIALS.len() - 1 {
            return Err(Error::invalid(format!("vocabulary of {} is too small", self.vocab_size)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let Some(l) = self.summary_layer {
            if l >= self.layers {
                return Err(Error::invalid(format!("summary layer {l} of {} layers", self.layers)));
            }
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    attn_norm: Norm,
    attn: Attention,
    ff_norm: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    self_norm: Norm,
    self_attn: Attention,
    cross_norm: Norm,
    cross_attn: Attention,
    ff_norm: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    embedding: usize,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    output: Linear,
}

enum Init {
    Normal(f64),
    Xavier,
    Zeros,
    Ones,
}

struct LayoutBuilder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, init: Init) -> Linear {
        Linear {
            w: self.add(format!("{prefix}.weight"), vec![fan_in, fan_out], init),
            b: self.add(format!("{prefix}.bias"), vec![fan_out], Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.add(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{prefix}.q"), d, d, Init::Xavier),
            k: self.linear(&format!("{prefix}.k"), d, d, Init::Xavier),
            v: self.linear(&format!("{prefix}.v"), d, d, Init::Xavier),
            o: self.linear(&format!("{prefix}.o"), d, d, Init::Xavier),
        }
    }
}

fn build_layout(c: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let d = c.d_model;
    let mut b = LayoutBuilder { specs: Vec::new() };
    let embedding = b.add("embedding".into(), vec![c.vocab_size, d], Init::Normal(1.0));
    let encoder = (0..c.layers)
        .map(|l| {
            let p = format!("encoder.{l}");
            EncoderLayer {
                attn_norm: b.norm(&format!("{p}.attn_norm"), d),
                attn: b.attention(&format!("{p}.self_attn"), d),
                ff_norm: b.norm(&format!("{p}.ff_norm"), d),
                ff1: b.linear(&format!("{p}.ff1"), d, c.d_ff, Init::Xavier),
                ff2: b.linear(&format!("{p}.ff2"), c.d_ff, d, Init::Xavier),
            }
        })
        .collect();
    let encoder_norm = b.norm("encoder.final_norm", d);
    let decoder = (0..c.layers)
        .map(|l| {
            let p = format!("decoder.{l}");
            DecoderLayer {
                self_norm: b.norm(&format!("{p}.self_norm"), d),
                self_attn: b.attention(&format!("{p}.self_attn"), d),
                cross_norm: b.norm(&format!("{p}.cross_norm"), d),
                cross_attn: b.attention(&format!("{p}.cross_attn"), d),
                ff_norm: b.norm(&format!("{p}.ff_norm"), d),
                ff1: b.linear(&format!("{p}.ff1"), d, c.d_ff, Init::Xavier),
                ff2: b.linear(&format!("{p}.ff2"), c.d_ff, d, Init::Xavier),
            }
        })
        .collect();
    let decoder_norm = b.norm("decoder.final_norm", d);
    let output = b.linear("output", d, c.vocab_size, Init::Zeros);
    (
        Layout {
            embedding,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            output,
        },
        b.specs,
    )
}

/// Sinusoidal position table, `positions x d`.
fn sinusoid<T: Real>(positions: usize, d: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); positions * d];
    for pos in 0..positions {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = T::c(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![positions, d], data).expect("shape")
}

/// Dropout randomness for one forward pass; `None` means evaluation mode.
pub struct Dropout<'r> {
    rng: Option<&'r mut ChaCha8Rng>,
    rate: f64,
}

impl<'r> Dropout<'r> {
    pub fn eval() -> Self {
        Dropout { rng: None, rate: 0.0 }
    }

    pub fn train(rng: &'r mut ChaCha8Rng, rate: f64) -> Self {
        Dropout { rng: Some(rng), rate }
    }

    fn apply<T: Real>(&mut self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => g.dropout(x, self.rate, rng),
            _ => Ok(x),
        }
    }
}

/// Cross-attention keys and values over `[h_1..h_P, v_1..v_M]`, per decoder layer.
pub struct Memory {
    keys: Vec<Var>,
    values: Vec<Var>,
    pub history_len: usize,
    pub kb_len: usize,
}

/// Cross-attention probabilities `[layer][head]`, each `T x (P + M)`.
pub struct AttentionRecord {
    pub cross: Vec<Vec<Var>>,
    pub history_len: usize,
    pub kb_len: usize,
}

impl AttentionRecord {
    pub fn tensors<T: Real>(&self, g: &Graph<'_, T>) -> AttentionProbs<T> {
        AttentionProbs {
            layers: self
                .cross
                .iter()
                .map(|heads| heads.iter().map(|&v| g.value(v).clone()).collect())
                .collect(),
            history_len: self.history_len,
            kb_len: self.kb_len,
        }
    }
}

/// Materialized [`AttentionRecord`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProbs<T> {
    pub layers: Vec<Vec<Tensor<T>>>,
    pub history_len: usize,
    pub kb_len: usize,
}

pub struct DecoderOutput {
    /// `T x V`, row `t` predicting the token after input position `t`.
    pub logits: Var,
    pub attention: AttentionRecord,
}

/// Graph handles of one example's losses.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub generation: Var,
    pub kb: Option<Var>,
}

/// One training example in id form.
#[derive(Clone, Copy, Debug)]
pub struct ExampleRef<'a> {
    pub history: &'a [TokenId],
    pub kb_triples: &'a [Vec<TokenId>],
    pub labels: &'a [bool],
    pub target: &'a [TokenId],
}

/// Decoder input for teacher forcing: `<bos>` followed by all but the last target token.
pub fn shift_right(target: &[TokenId]) -> Vec<TokenId> {
    let mut input = Vec::with_capacity(target.len());
    input.push(BOS);
    input.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    input
}

#[derive(Clone, Debug)]
pub struct NeuralAssistant<T: Real> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    layout: Layout,
    positions: Tensor<T>,
}

impl<T: Real> NeuralAssistant<T> {
    /// Freshly initialized model. The output projection starts at zero so the
    /// first predictive distribution is uniform.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| T::c(dist.sample(&mut rng))).collect()
                }
                Init::Xavier => {
                    let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    (0..n).map(|_| T::c(rng.random_range(-a..a))).collect()
                }
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        let positions = sinusoid(config.max_positions, config.d_model);
        Ok(NeuralAssistant {
            config,
            names,
            params,
            layout,
            positions,
        })
    }

    /// Rebuilds a model from named tensors, checking every name and shape.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        if named.len() != specs.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {}", specs.len(), named.len())));
        }
        let mut by_name: std::collections::HashMap<String, Tensor<T>> = named.into_iter().collect();
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape, _) in specs {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape())));
            }
            names.push(name);
            params.push(t);
        }
        let positions = sinusoid(config.max_positions, config.d_model);
        Ok(NeuralAssistant {
            config,
            names,
            params,
            layout,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
        }
        self.config.alpha = alpha;
        Ok(())
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn embedding(&self) -> &Tensor<T> {
        &self.params[self.layout.embedding]
    }

    /// Element-type conversion of every parameter.
    pub fn cast<U: Real>(&self) -> NeuralAssistant<U> {
        NeuralAssistant {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            layout: self.layout.clone(),
            positions: sinusoid(self.config.max_positions, self.config.d_model),
        }
    }

    /// A tape whose parameter leaves borrow this model's tensors.
    pub fn graph(&self) -> Graph<'_, T> {
        Graph::with_params(&self.params)
    }

    fn linear(&self, g: &mut Graph<'_, T>, x: Var, l: Linear) -> Result<Var> {
        let w = g.param(l.w)?;
        let b = g.param(l.b)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph<'_, T>, x: Var, n: Norm) -> Result<Var> {
        let gain = g.param(n.gain)?;
        let bias = g.param(n.bias)?;
        g.layer_norm(x, gain, bias, self.config.layer_norm_eps)
    }

    fn embed_sequence(&self, g: &mut Graph<'_, T>, ids: &[TokenId], drop: &mut Dropout) -> Result<Var> {
        let n = ids.len();
        if n == 0 || n > self.config.max_positions {
            return Err(Error::invalid(format!(
                "sequence length {n} outside 1..={}",
                self.config.max_positions
            )));
        }
        let v = self.config.vocab_size;
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= v) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {v}")));
        }
        let table = g.param(self.layout.embedding)?;
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let tok = g.gather(table, &idx)?;
        let d = self.config.d_model;
        let pos = g.constant(Tensor::new(vec![n, d], self.positions.data()[..n * d].to_vec())?)?;
        let x = g.add(tok, pos)?;
        drop.apply(g, x)
    }

    /// Multi-head attention of `xq` over `xkv` (or over precomputed keys and values).
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        g: &mut Graph<'_, T>,
        xq: Var,
        kv: (Var, Var),
        a: &Attention,
        causal: bool,
        probs_out: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let q = self.linear(g, xq, a.q)?;
        let (k, v) = kv;
        let heads = self.config.heads;
        let hd = self.config.head_dim();
        let scale = T::c(1.0 / (hd as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        let mut probs_list = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let probs = g.softmax(scores, causal)?;
            probs_list.push(probs);
            outs.push(g.matmul(probs, vh)?);
        }
        if let Some(out) = probs_out {
            *out = probs_list;
        }
        let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.linear(g, merged, a.o)
    }

    fn self_attend(&self, g: &mut Graph<'_, T>, x: Var, a: &Attention, causal: bool) -> Result<Var> {
        let k = self.linear(g, x, a.k)?;
        let v = self.linear(g, x, a.v)?;
        self.attend(g, x, (k, v), a, causal, None)
    }

    fn feed_forward(&self, g: &mut Graph<'_, T>, x: Var, ff1: Linear, ff2: Linear, drop: &mut Dropout) -> Result<Var> {
        let h = self.linear(g, x, ff1)?;
        let h = g.relu(h)?;
        let h = drop.apply(g, h)?;
        self.linear(g, h, ff2)
    }

    /// Encoder states `h_1..h_P` of a history, `P x d`.
    pub fn encode(&self, g: &mut Graph<'_, T>, history: &[TokenId], drop: &mut Dropout) -> Result<Var> {
        let mut x = self.embed_sequence(g, history, drop)?;
        for layer in &self.layout.encoder {
            let n = self.norm(g, x, layer.attn_norm)?;
            let a = self.self_attend(g, n, &layer.attn, false)?;
            let a = drop.apply(g, a)?;
            x = g.add(x, a)?;
            let n = self.norm(g, x, layer.ff_norm)?;
            let f = self.feed_forward(g, n, layer.ff1, layer.ff2, drop)?;
            let f = drop.apply(g, f)?;
            x = g.add(x, f)?;
        }
        self.norm(g, x, self.layout.encoder_norm)
    }

    /// KB triple vectors `v_1..v_M`: the mean of each triple's token
    /// embeddings. No positional signal is added. `M` may be zero.
    pub fn embed_kb(&self, g: &mut Graph<'_, T>, triples: &[Vec<TokenId>]) -> Result<Var> {
        let v = self.config.vocab_size;
        let groups: Vec<Vec<usize>> = triples
            .iter()
            .map(|t| {
                if t.is_empty() {
                    return Err(Error::invalid("KB triple with no tokens"));
                }
                t.iter()
                    .map(|&id| {
                        if (id as usize) < v {
                            Ok(id as usize)
                        } else {
                            Err(Error::invalid(format!("token id {id} outside vocabulary of {v}")))
                        }
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let table = g.param(self.layout.embedding)?;
        g.gather_mean(table, &groups)
    }

    /// Projects `[H; Vkb]` into per-layer cross-attention keys and values.
    /// With `kb == None` the memory holds the encoder states alone.
    pub fn memory(&self, g: &mut Graph<'_, T>, h: Var, kb: Option<Var>) -> Result<Memory> {
        let d = self.config.d_model;
        if g.shape(h).len() != 2 || g.shape(h)[1] != d {
            return Err(Error::shape("decoder_forward", format!("encoder states {:?}, model width {d}", g.shape(h))));
        }
        let history_len = g.shape(h)[0];
        let (mem, kb_len) = match kb {
            Some(kv) => {
                if g.shape(kv).len() != 2 || g.shape(kv)[1] != d {
                    return Err(Error::shape("decoder_forward", format!("KB vectors {:?}, model width {d}", g.shape(kv))));
                }
                let m = g.shape(kv)[0];
                (g.concat_rows(&[h, kv])?, m)
            }
            None => (h, 0),
        };
        let mut keys = Vec::with_capacity(self.layout.decoder.len());
        let mut values = Vec::with_capacity(self.layout.decoder.len());
        for layer in &self.layout.decoder {
            keys.push(self.linear(g, mem, layer.cross_attn.k)?);
            values.push(self.linear(g, mem, layer.cross_attn.v)?);
        }
        Ok(Memory {
            keys,
            values,
            history_len,
            kb_len,
        })
    }

    /// Runs the decoder over `inputs` (starting with `<bos>`) with causal
    /// self-attention and joint cross-attention over the memory.
    pub fn decode(&self, g: &mut Graph<'_, T>, mem: &Memory, inputs: &[TokenId], drop: &mut Dropout) -> Result<DecoderOutput> {
        let mut y = self.embed_sequence(g, inputs, drop)?;
        let mut cross = Vec::with_capacity(self.layout.decoder.len());
        for (l, layer) in self.layout.decoder.iter().enumerate() {
            let n = self.norm(g, y, layer.self_norm)?;
            let a = self.self_attend(g, n, &layer.self_attn, true)?;
            let a = drop.apply(g, a)?;
            y = g.add(y, a)?;

            let n = self.norm(g, y, layer.cross_norm)?;
            let mut probs = Vec::new();
            let c = self.attend(g, n, (mem.keys[l], mem.values[l]), &layer.cross_attn, false, Some(&mut probs))?;
            cross.push(probs);
            let c = drop.apply(g, c)?;
            y = g.add(y, c)?;

            let n = self.norm(g, y, layer.ff_norm)?;
            let f = self.feed_forward(g, n, layer.ff1, layer.ff2, drop)?;
            let f = drop.apply(g, f)?;
            y = g.add(y, f)?;
        }
        let y = self.norm(g, y, self.layout.decoder_norm)?;
        let logits = self.linear(g, y, self.layout.output)?;
        Ok(DecoderOutput {
            logits,
            attention: AttentionRecord {
                cross,
                history_len: mem.history_len,
                kb_len: mem.kb_len,
            },
        })
    }

    /// Logits for decoder `inputs` given encoder states `h` and KB vectors.
    pub fn decoder_forward(
        &self,
        g: &mut Graph<'_, T>,
        h: Var,
        kb: Option<Var>,
        inputs: &[TokenId],
        drop: &mut Dropout,
    ) -> Result<DecoderOutput> {
        let mem = self.memory(g, h, kb)?;
        self.decode(g, &mem, inputs, drop)
    }

    /// Full forward pass for one example: encoder, KB vectors, teacher-forced decoder.
    pub fn forward_example(&self, g: &mut Graph<'_, T>, ex: &ExampleRef, drop: &mut Dropout) -> Result<DecoderOutput> {
        if ex.target.is_empty() {
            return Err(Error::invalid("empty target"));
        }
        let h = self.encode(g, ex.history, drop)?;
        let kb = self.embed_kb(g, ex.kb_triples)?;
        self.decoder_forward(g, h, Some(kb), &shift_right(ex.target), drop)
    }

    /// Generation and KB attention losses for one example, combined with
    /// weights `gen_weight` and `kb_weight`. The KB term is skipped when
    /// the slice is empty or its weight is zero.
    pub fn example_losses(
        &self,
        g: &mut Graph<'_, T>,
        ex: &ExampleRef,
        gen_weight: f64,
        kb_weight: f64,
        drop: &mut Dropout,
    ) -> Result<LossVars> {
        let out = self.forward_example(g, ex, drop)?;
        let targets: Vec<usize> = ex.target.iter().map(|&t| t as usize).collect();
        let mask = vec![true; targets.len()];
        let generation = generation_loss(g, out.logits, &targets, &mask)?;
        let kb = if out.attention.kb_len > 0 {
            if ex.labels.len() != out.attention.kb_len {
                return Err(Error::shape("distant_supervision_loss", format!(
                    "{} labels for {} KB slots",
                    ex.labels.len(),
                    out.attention.kb_len
                )));
            }
            let rows: Vec<usize> = (0..targets.len()).collect();
            let q = kb_attention_summary_var(g, &out.attention, &rows, self.config.summary_layer)?;
            Some(distant_supervision_loss(g, q, ex.labels)?)
        } else {
            None
        };
        let mut terms = Vec::with_capacity(2);
        if gen_weight != 0.0 {
            terms.push((generation, T::c(gen_weight)));
        }
        if let (Some(d), true) = (kb, kb_weight != 0.0) {
            terms.push((d, T::c(kb_weight)));
        }
        let total = match terms.as_slice() {
            [(v, w)] if *w == T::one() => *v,
            [] => g.scale(generation, T::zero())?,
            _ => g.lincomb(&terms)?,
        };
        Ok(LossVars { total, generation, kb })
    }
}

/// Mean token negative log-likelihood under teacher forcing.
pub fn generation_loss<T: Real>(g: &mut Graph<'_, T>, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    g.cross_entropy(logits, targets, mask)
}

/// Mean binary cross-entropy of the KB attention summary against weak labels.
pub fn distant_supervision_loss<T: Real>(g: &mut Graph<'_, T>, q: Var, labels: &[bool]) -> Result<Var> {
    g.bce(q, labels)
}

/// `alpha * generation + (1 - alpha) * kb`.
///
/// At `alpha == 1` the generation node itself is returned, so gradients
/// are exactly those of the generation loss; at `alpha == 0` likewise for
/// the KB loss.
pub fn total_loss<T: Real>(g: &mut Graph<'_, T>, generation: Var, kb: Option<Var>, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    match kb {
        _ if alpha == 1.0 => Ok(generation),
        None => g.scale(generation, T::c(alpha)),
        Some(d) if alpha == 0.0 => Ok(d),
        Some(d) => g.lincomb(&[(generation, T::c(alpha)), (d, T::c(1.0 - alpha))]),
    }
}

/// KB attention summary `q_1..q_M` on the tape.
///
/// Takes the chosen decoder layer (default last), averages attention over
/// heads and over the listed target positions, keeps the KB slots,
/// renormalizes them to sum to one, and clamps into `[eps, 1 - eps]`.
pub fn kb_attention_summary_var<T: Real>(
    g: &mut Graph<'_, T>,
    record: &AttentionRecord,
    positions: &[usize],
    layer: Option<usize>,
) -> Result<Var> {
    if record.kb_len == 0 {
        return Err(Error::invalid("KB attention summary needs at least one KB slot"));
    }
    let heads = match layer {
        Some(l) => record.cross.get(l),
        None => record.cross.last(),
    }
    .ok_or_else(|| Error::invalid("attention record has no such layer"))?;
    if heads.is_empty() {
        return Err(Error::invalid("attention record has no heads"));
    }
    let mut slots = Vec::with_capacity(heads.len());
    for &p in heads {
        slots.push(g.slice_cols(p, record.history_len, record.kb_len)?);
    }
    let w = T::c(1.0 / heads.len() as f64);
    let terms: Vec<(Var, T)> = slots.iter().map(|&s| (s, w)).collect();
    let avg = g.lincomb(&terms)?;
    let per_slot = g.mean_rows(avg, positions)?;
    let q = g.normalize_sum(per_slot)?;
    g.clamp(q, T::c(SUMMARY_EPS), T::one() - T::c(SUMMARY_EPS))
}

/// [`kb_attention_summary_var`] over materialized probabilities, using
/// every target position.
pub fn kb_attention_summary<T: Real>(probs: &AttentionProbs<T>, layer: Option<usize>) -> Result<Vec<T>> {
    if probs.kb_len == 0 {
        return Err(Error::invalid("KB attention summary needs at least one KB slot"));
    }
    let mut g = Graph::new();
    let mut cross = Vec::with_capacity(probs.layers.len());
    let mut rows = 0;
    for heads in &probs.layers {
        let mut vars = Vec::with_capacity(heads.len());
        for h in heads {
            if h.cols() != probs.history_len + probs.kb_len {
                return Err(Error::shape("kb_attention_summary", format!(
                    "{} columns for {} history + {} KB slots",
                    h.cols(),
                    probs.history_len,
                    probs.kb_len
                )));
            }
            rows = h.rows();
            vars.push(g.constant(h.clone())?);
        }
        cross.push(vars);
    }
    let record = AttentionRecord {
        cross,
        history_len: probs.history_len,
        kb_len: probs.kb_len,
    };
    let positions: Vec<usize> = (0..rows).collect();
    let q = kb_attention_summary_var(&mut g, &record, &positions, layer)?;
    Ok(g.value(q).data().to_vec())
}
