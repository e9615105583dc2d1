#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use signflow_autograd::{Graph, ParamStore, Tensor, Var};
use signflow_core::Config;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Largest relative gap between analytic and central-difference gradients
/// of `f` with respect to each input tensor.
pub fn fd_max_rel_err(store: &ParamStore, inputs: &[Tensor], f: impl Fn(&mut Graph<'_>, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::with_params(store);
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item().unwrap()
    };
    let mut g = Graph::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&g, *v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

pub fn assert_fd(store: &ParamStore, inputs: &[Tensor], f: impl Fn(&mut Graph<'_>, &[Var]) -> Var) {
    let e = fd_max_rel_err(store, inputs, f);
    assert!(e < FD_REL_TOL, "finite-difference mismatch: relative error {e}");
}

/// A few-second configuration: 3 joints, 6 words, an 8-wide model.
pub fn tiny_config() -> Config {
    let mut c = Config::default();
    c.data.num_samples = 40;
    c.data.vocab_size = 6;
    c.data.joints = 3;
    c.data.motif_len = 3;
    c.data.transition_frames = 1;
    c.data.min_tokens = 1;
    c.data.max_tokens = 3;
    c.model.dim = 8;
    c.model.text_feature_dim = 8;
    c.model.audio_feature_dim = 4;
    c.model.heads = 2;
    c.model.mlp_hidden = 12;
    c.model.encoder_blocks = 1;
    c.model.producer_blocks = 2;
    c.model.max_len = 16;
    c.diffusion.steps = 3;
    c.train.batch_size = 4;
    c.ecl.warmup_epochs = 0;
    c.eval.bt_dim = 8;
    c.eval.bt_hidden = 12;
    c.eval.bt_epochs = 2;
    c.eval.num_averaged = 2;
    c
}

/// `(hypothesis, reference, order, expected cumulative BLEU)` hand cases.
pub fn bleu_vectors() -> Vec<(Vec<usize>, Vec<usize>, usize, f64)> {
    let (a, b, c, d, e, f) = (0, 1, 2, 3, 4, 5);
    vec![
        (vec![a, b], vec![a, c], 1, 0.5),
        (vec![a], vec![a, b], 1, (-1f64).exp()),
        (vec![a, b, c, d], vec![a, b, c, d], 4, 1.0),
        (vec![a, b], vec![a, b], 4, 1.0),
        (vec![a, a, a, a], vec![a, b], 1, 0.25),
        (vec![a, b, c], vec![a, b, d], 2, (1.0f64 / 3.0).sqrt()),
        (vec![a, b, c], vec![a, b, d], 3, 0.0),
        (vec![a, b, c, d], vec![a, b, c, e, f], 3, (-0.25f64).exp() * 0.25f64.cbrt()),
        (vec![b, a], vec![a, b], 1, 1.0),
        (vec![b, a], vec![a, b], 2, 0.0),
        (vec![], vec![a, b], 1, 0.0),
    ]
}

/// `(hypothesis, reference, expected ROUGE-L F1)` hand cases.
pub fn rouge_vectors() -> Vec<(Vec<usize>, Vec<usize>, f64)> {
    vec![
        (vec![0, 1, 2], vec![0, 2], 0.8),
        (vec![3, 4, 5], vec![3, 4, 5], 1.0),
        (vec![0, 1], vec![2, 3], 0.0),
        (vec![0, 1, 2, 3], vec![1, 3, 0], 4.0 / 7.0),
        (vec![5], vec![5, 5, 5, 5], 0.4),
    ]
}
