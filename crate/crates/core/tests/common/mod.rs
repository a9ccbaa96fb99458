#![allow(dead_code)]

pub mod gradcheck;

use std::collections::HashMap;

use neural_assistant::model::{ModelConfig, NeuralAssistant};
use neural_assistant::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Central differences of `f` with respect to every element of `inputs`.
pub fn numeric_gradients(inputs: &[Tensor<f64>], mut f: impl FnMut(&[Tensor<f64>]) -> f64) -> Vec<Vec<f64>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut gi = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + FD_STEP;
            let up = f(&work);
            work[i].data_mut()[j] = x - FD_STEP;
            let down = f(&work);
            work[i].data_mut()[j] = x;
            gi.push((up - down) / (2.0 * FD_STEP));
        }
        out.push(gi);
    }
    out
}

pub fn max_rel_err(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn small_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        layers: 2,
        heads: 2,
        d_ff: 16,
        max_positions: 32,
        dropout: 0.0,
        ..ModelConfig::tiny(vocab)
    }
}

/// Perturbs the zero output projection so logits depend on the input.
pub fn randomize_output<T: neural_assistant::tensor::Real>(model: &mut NeuralAssistant<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in ["output.weight", "output.bias"] {
        let i = model.param_index(name).unwrap();
        for v in model.params_mut()[i].data_mut() {
            *v = T::c(rng.random_range(-0.5..0.5));
        }
    }
}

type Mat = Vec<Vec<f64>>;

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| (0..n).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Plain pre-norm encoder-decoder Transformer written against the
/// named parameters, with no knowledge-base memory.
pub struct Reference {
    p: HashMap<String, Tensor<f64>>,
    c: ModelConfig,
}

impl Reference {
    pub fn new(model: &NeuralAssistant<f64>) -> Self {
        let p = model
            .param_names()
            .iter()
            .cloned()
            .zip(model.params().iter().cloned())
            .collect();
        Reference { p, c: model.config().clone() }
    }

    fn mat(&self, name: &str) -> Mat {
        let t = &self.p[name];
        (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
    }

    fn vec(&self, name: &str) -> Vec<f64> {
        self.p[name].data().to_vec()
    }

    fn linear(&self, x: &Mat, prefix: &str) -> Mat {
        let b = self.vec(&format!("{prefix}.bias"));
        matmul(x, &self.mat(&format!("{prefix}.weight")))
            .into_iter()
            .map(|r| r.iter().zip(&b).map(|(v, bb)| v + bb).collect())
            .collect()
    }

    fn norm(&self, x: &Mat, prefix: &str) -> Mat {
        let g = self.vec(&format!("{prefix}.gain"));
        let b = self.vec(&format!("{prefix}.bias"));
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let sd = (var + self.c.layer_norm_eps).sqrt();
                r.iter().enumerate().map(|(j, v)| (v - mean) / sd * g[j] + b[j]).collect()
            })
            .collect()
    }

    fn embed(&self, ids: &[u32]) -> Mat {
        let e = self.mat("embedding");
        let d = self.c.d_model;
        ids.iter()
            .enumerate()
            .map(|(pos, &id)| {
                (0..d)
                    .map(|i| {
                        let angle = pos as f64 / 10000f64.powf((i - i % 2) as f64 / d as f64);
                        e[id as usize][i] + if i % 2 == 0 { angle.sin() } else { angle.cos() }
                    })
                    .collect()
            })
            .collect()
    }

    fn attention(&self, xq: &Mat, xkv: &Mat, prefix: &str, causal: bool) -> Mat {
        let q = self.linear(xq, &format!("{prefix}.q"));
        let k = self.linear(xkv, &format!("{prefix}.k"));
        let v = self.linear(xkv, &format!("{prefix}.v"));
        let hd = self.c.d_model / self.c.heads;
        let mut merged = vec![vec![0.0; self.c.d_model]; xq.len()];
        for h in 0..self.c.heads {
            let cols = h * hd..(h + 1) * hd;
            for (t, out) in merged.iter_mut().enumerate() {
                let visible = if causal { t + 1 } else { k.len() };
                let scores: Vec<f64> = (0..visible)
                    .map(|s| q[t][cols.clone()].iter().zip(&k[s][cols.clone()]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let w = softmax_row(&scores);
                for (s, ws) in w.iter().enumerate() {
                    for c in cols.clone() {
                        out[c] += ws * v[s][c];
                    }
                }
            }
        }
        self.linear(&merged, &format!("{prefix}.o"))
    }

    fn ff(&self, x: &Mat, prefix: &str) -> Mat {
        let h: Mat = self
            .linear(x, &format!("{prefix}.ff1"))
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        self.linear(&h, &format!("{prefix}.ff2"))
    }

    pub fn logits(&self, history: &[u32], inputs: &[u32]) -> Mat {
        let mut x = self.embed(history);
        for l in 0..self.c.layers {
            let p = format!("encoder.{l}");
            let n = self.norm(&x, &format!("{p}.attn_norm"));
            x = add(&x, &self.attention(&n, &n, &format!("{p}.self_attn"), false));
            let n = self.norm(&x, &format!("{p}.ff_norm"));
            x = add(&x, &self.ff(&n, &p));
        }
        let h = self.norm(&x, "encoder.final_norm");
        let mut y = self.embed(inputs);
        for l in 0..self.c.layers {
            let p = format!("decoder.{l}");
            let n = self.norm(&y, &format!("{p}.self_norm"));
            y = add(&y, &self.attention(&n, &n, &format!("{p}.self_attn"), true));
            let n = self.norm(&y, &format!("{p}.cross_norm"));
            y = add(&y, &self.attention(&n, &h, &format!("{p}.cross_attn"), false));
            let n = self.norm(&y, &format!("{p}.ff_norm"));
            y = add(&y, &self.ff(&n, &p));
        }
        let y = self.norm(&y, "decoder.final_norm");
        self.linear(&y, "output")
    }
}

/// Small untrained assistant with a non-degenerate output layer.
pub fn toy_assistant(seed: u64) -> neural_assistant::decode::Assistant<f32> {
    use neural_assistant::kb::KnowledgeBase;
    use neural_assistant::text::Vocabulary;
    let (kb, _) = KnowledgeBase::from_rows([
        ["la mimosa", "area", "south"],
        ["la mimosa", "food", "italian"],
        ["pizza hut", "area", "north"],
        ["curry garden", "phone", "01223"],
    ])
    .unwrap();
    let words = "hello find me a restaurant please la mimosa pizza hut curry garden south north italian area food phone 01223 is in the . ? restaurant-find ( ) = , yes no";
    let vocab = Vocabulary::from_tokens(words.split_whitespace().map(String::from));
    let config = ModelConfig { max_positions: 128, ..small_config(vocab.len()) };
    let mut model = NeuralAssistant::<f32>::new(config, seed).unwrap();
    randomize_output(&mut model, seed);
    neural_assistant::decode::Assistant { model, vocab, kb, max_history: 100 }
}
