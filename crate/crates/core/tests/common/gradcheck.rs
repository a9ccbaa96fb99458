//! Backprop against central differences for every graph op and the full loss.

use neural_assistant::model::{Dropout, ExampleRef, NeuralAssistant};
use neural_assistant::tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

pub const SEEDS: u64 = 10;
pub const TOLERANCE: f64 = 1e-4;

pub type OpFn = fn(&mut Graph<'_, f64>, &[Var]) -> Var;
pub type Prepare = fn(usize, Tensor<f64>) -> Tensor<f64>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub prepare: Prepare,
    pub op: OpFn,
}

fn any(_: usize, t: Tensor<f64>) -> Tensor<f64> {
    t
}

fn positive(_: usize, t: Tensor<f64>) -> Tensor<f64> {
    let data = t.data().iter().map(|v| 0.2 + v.abs()).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn probability(_: usize, t: Tensor<f64>) -> Tensor<f64> {
    let data = t.data().iter().map(|v| 0.1 + 0.4 * (v + 1.0)).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn case(name: &'static str, shapes: &[&[usize]], prepare: Prepare, op: OpFn) -> OpCase {
    OpCase { name, shapes: shapes.iter().map(|s| s.to_vec()).collect(), prepare, op }
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("matmul", &[&[3, 4], &[4, 5]], any, |g, v| g.matmul(v[0], v[1]).unwrap()),
        case("matmul_t", &[&[3, 4], &[5, 4]], any, |g, v| g.matmul_t(v[0], v[1]).unwrap()),
        case("matmul_ex tn", &[&[4, 3], &[4, 5]], any, |g, v| g.matmul_ex(v[0], v[1], true, false).unwrap()),
        case("matmul_ex tt", &[&[4, 3], &[5, 4]], any, |g, v| g.matmul_ex(v[0], v[1], true, true).unwrap()),
        case("add", &[&[3, 4], &[3, 4]], any, |g, v| g.add(v[0], v[1]).unwrap()),
        case("add_row", &[&[3, 4], &[4]], any, |g, v| g.add_row(v[0], v[1]).unwrap()),
        case("mul", &[&[3, 4], &[3, 4]], any, |g, v| g.mul(v[0], v[1]).unwrap()),
        case("scale", &[&[3, 4]], any, |g, v| g.scale(v[0], -1.7).unwrap()),
        case("lincomb", &[&[2, 3], &[2, 3], &[2, 3]], any, |g, v| {
            g.lincomb(&[(v[0], 0.3), (v[1], -2.0), (v[2], 1.1)]).unwrap()
        }),
        case("relu", &[&[4, 6]], any, |g, v| g.relu(v[0]).unwrap()),
        case("sum", &[&[3, 5]], any, |g, v| g.sum(v[0]).unwrap()),
        case("softmax", &[&[3, 5]], any, |g, v| g.softmax(v[0], false).unwrap()),
        case("softmax causal", &[&[4, 4]], any, |g, v| g.softmax(v[0], true).unwrap()),
        case("layer_norm", &[&[3, 6], &[6], &[6]], any, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap()),
        case("gather", &[&[5, 3]], any, |g, v| g.gather(v[0], &[4, 0, 4, 2]).unwrap()),
        case("gather_mean", &[&[6, 3]], any, |g, v| g.gather_mean(v[0], &[vec![0, 1, 2], vec![5], vec![3, 3]]).unwrap()),
        case("concat_rows", &[&[2, 3], &[4, 3]], any, |g, v| g.concat_rows(&[v[0], v[1]]).unwrap()),
        case("concat_cols", &[&[3, 2], &[3, 4]], any, |g, v| g.concat_cols(&[v[0], v[1]]).unwrap()),
        case("slice_cols", &[&[3, 7]], any, |g, v| g.slice_cols(v[0], 2, 4).unwrap()),
        case("mean_rows", &[&[5, 3]], any, |g, v| g.mean_rows(v[0], &[0, 2, 2, 4]).unwrap()),
        case("normalize_sum", &[&[1, 6]], positive, |g, v| g.normalize_sum(v[0]).unwrap()),
        // bounds sit inside the sampled range, so both clamped and free entries occur
        case("clamp", &[&[2, 5]], probability, |g, v| g.clamp(v[0], 0.05, 0.55).unwrap()),
        case("cross_entropy", &[&[4, 6]], any, |g, v| {
            g.cross_entropy(v[0], &[1, 5, 0, 3], &[true, false, true, true]).unwrap()
        }),
        case("bce", &[&[1, 5]], probability, |g, v| g.bce(v[0], &[true, false, false, true, false]).unwrap()),
        case("dropout", &[&[4, 5]], any, |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            g.dropout(v[0], 0.3, &mut rng).unwrap()
        }),
    ]
}

/// Worst relative error over `SEEDS` random draws. The op output is
/// reduced to a scalar with fixed random weights.
pub fn check_op(c: &OpCase) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 1);
        let inputs: Vec<Tensor<f64>> = c
            .shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (c.prepare)(i, random_tensor(&mut rng, s)))
            .collect();
        let mut probe = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| probe.variable(t.clone()).unwrap()).collect();
        let probed = (c.op)(&mut probe, &vars);
        let out_shape = probe.shape(probed).to_vec();
        let weights = random_tensor(&mut rng, &out_shape);

        let scalar = |g: &mut Graph<'_, f64>, ts: &[Tensor<f64>]| {
            let vars: Vec<Var> = ts.iter().map(|t| g.variable(t.clone()).unwrap()).collect();
            let out = (c.op)(g, &vars);
            let w = g.constant(weights.clone()).unwrap();
            let prod = g.mul(out, w).unwrap();
            (g.sum(prod).unwrap(), vars)
        };
        let mut g = Graph::new();
        let (loss, vars) = scalar(&mut g, &inputs);
        let grads = g.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(&inputs)
            .map(|(&v, t)| grads.get(v).map(|x| x.data().to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        let numeric = numeric_gradients(&inputs, |ts| {
            let mut g = Graph::new();
            let (loss, _) = scalar(&mut g, ts);
            g.value(loss).data()[0]
        });
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

fn example_loss(model: &NeuralAssistant<f64>, ex: &ExampleRef, alpha: f64) -> (f64, Vec<Tensor<f64>>) {
    let mut g = model.graph();
    let l = model.example_losses(&mut g, ex, alpha, 1.0 - alpha, &mut Dropout::eval()).unwrap();
    let v = g.value(l.total).data()[0];
    (v, g.backward(l.total).unwrap().into_params())
}

/// Worst relative error of the combined loss over every parameter of a
/// tiny model, across `SEEDS` initializations.
pub fn check_full_loss() -> f64 {
    let history = [4u32, 9, 10, 11, 5];
    let target = [6u32, 12, 13, 7, 9, 2];
    let triples = vec![vec![12u32, 8, 9], vec![10, 11, 13], vec![13, 12, 10]];
    let labels = [true, false, true];
    let ex = ExampleRef { history: &history, kb_triples: &triples, labels: &labels, target: &target };
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut model = NeuralAssistant::<f64>::new(small_config(14), seed).unwrap();
        randomize_output(&mut model, seed + 100);
        let (_, grads) = example_loss(&model, &ex, 0.5);
        let analytic: Vec<Vec<f64>> = grads.iter().map(|t| t.data().to_vec()).collect();
        let params = model.params().to_vec();
        let numeric = numeric_gradients(&params, |ps| {
            for (dst, src) in model.params_mut().iter_mut().zip(ps) {
                dst.data_mut().copy_from_slice(src.data());
            }
            example_loss(&model, &ex, 0.5).0
        });
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}
