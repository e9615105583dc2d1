//! Central finite-difference checks for every differentiable operation.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use signflow_autograd::nn::{causal_mask, scaled_dot_attention, AttentionBlock, CrossAttentionBlock, Mlp};
use signflow_autograd::{Graph, ParamStore, Tensor, Var};

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Compares analytic gradients of `f` against central differences for each input.
fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph<'_>, &[Var]) -> Var) {
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item().unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(&g, *v)
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            assert!(
                (a - numeric).abs() / denom < REL_TOL,
                "input {k} elem {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn weighted_sum(g: &mut Graph<'_>, y: Var, seed: u64) -> Var {
    // A fixed random projection makes the scalar depend on every output entry.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.shape(y), &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    let row = random(&[4], &mut rng);
    check(vec![a.clone(), b.clone(), row], |g, v| {
        let s = g.add(v[0], v[1]).unwrap();
        let d = g.sub(s, v[2]).unwrap();
        let m = g.mul(d, v[0]).unwrap();
        let n = g.neg(m);
        let t = g.tanh(n);
        let e = g.exp(t);
        let q = g.scale(e, 0.7);
        let q = g.add_scalar(q, 0.2);
        weighted_sum(g, q, 7)
    });
    let pos = a.map(|x| x.abs() + 0.5);
    check(vec![pos, b], |g, v| {
        let l = g.ln(v[0]);
        let r = g.sqrt(v[0]);
        let d = g.div(v[1], r).unwrap();
        let s = g.add(l, d).unwrap();
        let s = g.square(s);
        let s = g.gelu(s);
        weighted_sum(g, s, 8)
    });
}

#[test]
fn matrix_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[3, 5], &mut rng);
    let b = random(&[5, 2], &mut rng);
    let c = random(&[4, 5], &mut rng);
    check(vec![a, b, c], |g, v| {
        let ab = g.matmul(v[0], v[1]).unwrap();
        let act = g.matmul_t(v[0], v[2]).unwrap();
        let t = g.transpose(act).unwrap();
        let s1 = weighted_sum(g, ab, 1);
        let s2 = weighted_sum(g, t, 2);
        g.add(s1, s2).unwrap()
    });
}

#[test]
fn softmax_and_masking() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[4, 4], &mut rng);
    let mask = causal_mask(4).unwrap();
    check(vec![x.clone()], move |g, v| {
        let m = g.mask_fill(v[0], &mask).unwrap();
        let s = g.softmax(m, 1).unwrap();
        weighted_sum(g, s, 3)
    });
    let cube = random(&[2, 3, 2], &mut rng);
    check(vec![cube], |g, v| {
        let s = g.softmax(v[0], 1).unwrap();
        weighted_sum(g, s, 4)
    });
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[3, 6], &mut rng);
    let gain = random(&[6], &mut rng);
    let bias = random(&[6], &mut rng);
    check(vec![x, gain, bias], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        weighted_sum(g, y, 5)
    });
}

#[test]
fn attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = random(&[4, 3], &mut rng);
    let k = random(&[4, 3], &mut rng);
    let val = random(&[4, 2], &mut rng);
    let mask = causal_mask(4).unwrap();
    check(vec![q, k, val], move |g, v| {
        let o = scaled_dot_attention(g, v[0], v[1], v[2], Some(&mask)).unwrap();
        weighted_sum(g, o, 6)
    });
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let table = random(&[5, 3], &mut rng);
    check(vec![a, b, table], |g, v| {
        let rows = g.concat_rows(&[v[0], v[1]]).unwrap();
        let gathered = g.gather_rows(v[2], &[4, 0, 4]).unwrap();
        let both = g.concat_cols(&[rows, gathered]).unwrap();
        let part = g.slice_cols(both, 1, 4).unwrap();
        let part = g.slice_rows(part, 1, 2).unwrap();
        let flat = g.reshape(part, &[8]).unwrap();
        let pooled = g.mean_rows(both).unwrap();
        let s1 = weighted_sum(g, flat, 9);
        let s2 = weighted_sum(g, pooled, 10);
        let m = g.mean(both);
        let t = g.add(s1, s2).unwrap();
        g.add(t, m).unwrap()
    });
}

#[test]
fn loss_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = random(&[3, 5], &mut rng);
    let x = random(&[2, 4], &mut rng);
    let y = random(&[2, 4], &mut rng);
    check(vec![logits, x, y], |g, v| {
        let ce = g.cross_entropy(v[0], &[1, 4, 0]).unwrap();
        let mse = g.mse(v[1], v[2]).unwrap();
        let nrm = g.l2_norm(v[1]);
        let unit = g.normalize_rows(v[2]).unwrap();
        let u = weighted_sum(g, unit, 11);
        let s = g.add(ce, mse).unwrap();
        let s = g.add(s, nrm).unwrap();
        g.add(s, u).unwrap()
    });
}

#[test]
fn composite_blocks_through_params() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let block = AttentionBlock::new(&mut store, "blk", 8, 2, 12, &mut rng).unwrap();
    let cross = CrossAttentionBlock::new(&mut store, "x", 8, 2, 12, &mut rng).unwrap();
    let mlp = Mlp::new(&mut store, "mlp", 8, 6, 3, &mut rng).unwrap();
    let x = random(&[5, 8], &mut rng);
    let mem = random(&[3, 8], &mut rng);
    let mask = causal_mask(5).unwrap();

    let forward = |store: &ParamStore| {
        let mut g = Graph::with_params(store);
        let xv = g.constant(x.clone());
        let mv = g.constant(mem.clone());
        let h = block.forward(&mut g, xv, Some(&mask)).unwrap();
        let h = cross.forward(&mut g, h, mv, &mask).unwrap();
        let o = mlp.forward(&mut g, h).unwrap();
        let loss = weighted_sum(&mut g, o, 12);
        let val = g.value(loss).item().unwrap();
        let grads = g.backward(loss).unwrap().param_grads(&g);
        (val, grads)
    };
    let (_, grads) = forward(&store);
    for (id, name, t) in store.clone().iter() {
        let analytic = grads.get(id).unwrap_or_else(|| panic!("no grad for {name}"));
        // Probe a handful of entries per tensor to keep the runtime small.
        for i in (0..t.len()).step_by((t.len() / 4).max(1)) {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[i] += H;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[i] -= H;
            let numeric = (forward(&plus).0 - forward(&minus).0) / (2.0 * H);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            assert!((a - numeric).abs() / denom < REL_TOL, "{name}[{i}]: {a} vs {numeric}");
        }
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut store = ParamStore::new();
        let block = AttentionBlock::new(&mut store, "b", 8, 4, 16, &mut rng).unwrap();
        let x = random(&[6, 8], &mut rng);
        let mut g = Graph::with_params(&store);
        let xv = g.input(x);
        let mask = causal_mask(6).unwrap();
        let y = block.forward(&mut g, xv, Some(&mask)).unwrap();
        let loss = weighted_sum(&mut g, y, 1);
        let grads = g.backward(loss).unwrap();
        (g.value(y).clone(), grads.wrt(&g, xv).unwrap(), grads.param_grads(&g).global_norm())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
    assert_eq!(a.2.to_bits(), b.2.to_bits());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        row in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(row.clone()));
        let y = g.softmax(x, 0).unwrap();
        let shifted = g.constant(Tensor::vector(row.iter().map(|v| v + shift).collect()));
        let ys = g.softmax(shifted, 0).unwrap();
        let total: f64 = g.value(y).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(g.value(y).data().iter().all(|&p| p >= 0.0));
        for (a, b) in g.value(y).data().iter().zip(g.value(ys).data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn random_linear_chain_matches_finite_differences(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[2, 3], &mut rng);
        let b = random(&[3, 3], &mut rng);
        check(vec![a, b], |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            let y = g.gelu(y);
            let y = g.softmax(y, 1).unwrap();
            weighted_sum(g, y, seed)
        });
    }
}
