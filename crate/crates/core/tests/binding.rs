mod common;

use std::collections::BTreeMap;

use common::{assert_fd, random};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use signflow_autograd::nn::Linear;
use signflow_autograd::{Adam, Graph, ParamStore, Tensor};
use signflow_core::binding::{emergent_alignment_score, info_nce_loss, triadic_loss, Pair};

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn loss_of(a: &[Vec<f64>], p: &[Vec<f64>], tau: f64, symmetric: bool) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(a).unwrap());
    let p = g.constant(Tensor::from_rows(p).unwrap());
    let l = info_nce_loss(&mut g, a, p, tau, symmetric).unwrap();
    g.value(l).item().unwrap()
}

/// Direct softmax cross-entropy, one direction.
fn nce_oracle(a: &[Vec<f64>], p: &[Vec<f64>], tau: f64) -> f64 {
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>();
    let mut total = 0.0;
    for (m, am) in a.iter().enumerate() {
        let denom: f64 = p.iter().map(|pk| (dot(am, pk) / tau).exp()).sum();
        total -= ((dot(am, &p[m]) / tau).exp() / denom).ln();
    }
    total / a.len() as f64
}

#[test]
fn two_pair_closed_form() {
    let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let l = loss_of(&e, &e, 1.0, false);
    assert!((l - 0.31326).abs() < 1e-5);
    assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
}

#[test]
fn matches_softmax_oracle_both_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = unit_rows(5, 6, &mut rng);
    let p = unit_rows(5, 6, &mut rng);
    assert!((loss_of(&a, &p, 0.3, false) - nce_oracle(&a, &p, 0.3)).abs() < 1e-12);
    let sym = 0.5 * (nce_oracle(&a, &p, 0.3) + nce_oracle(&p, &a, 0.3));
    assert!((loss_of(&a, &p, 0.3, true) - sym).abs() < 1e-12);
}

#[test]
fn equal_similarities_give_log_batch_size() {
    for m in [2usize, 3, 7] {
        let e = vec![vec![0.6, 0.8]; m];
        for sym in [false, true] {
            assert!((loss_of(&e, &e, 0.07, sym) - (m as f64).ln()).abs() < 1e-12);
        }
    }
}

#[test]
fn joint_permutation_leaves_loss_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = unit_rows(6, 4, &mut rng);
    let p = unit_rows(6, 4, &mut rng);
    let perm = [3, 0, 5, 1, 4, 2];
    let pa: Vec<_> = perm.iter().map(|&i| a[i].clone()).collect();
    let pp: Vec<_> = perm.iter().map(|&i| p[i].clone()).collect();
    for sym in [false, true] {
        assert!((loss_of(&a, &p, 0.2, sym) - loss_of(&pa, &pp, 0.2, sym)).abs() < 1e-12);
    }
}

#[test]
fn rejects_bad_arguments() {
    let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&e).unwrap());
    assert!(info_nce_loss(&mut g, a, a, -0.1, true).is_err());
    let short = g.constant(Tensor::from_rows(&e[..1]).unwrap());
    assert!(info_nce_loss(&mut g, a, short, 1.0, true).is_err());
}

#[test]
fn gradient_through_normalization_and_similarity() {
    let store = ParamStore::new();
    for sym in [false, true] {
        assert_fd(&store, &[random(&[4, 5], 1), random(&[4, 5], 2)], |g, v| {
            let a = g.normalize_rows(v[0]).unwrap();
            let b = g.normalize_rows(v[1]).unwrap();
            info_nce_loss(g, a, b, 0.5, sym).unwrap()
        });
    }
}

#[test]
fn triadic_is_the_sum_of_active_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (t, a, s) = (unit_rows(4, 3, &mut rng), unit_rows(4, 3, &mut rng), unit_rows(4, 3, &mut rng));
    let mut g = Graph::new();
    let [tv, av, sv] = [&t, &a, &s].map(|r| g.constant(Tensor::from_rows(r).unwrap()));
    let ts = info_nce_loss(&mut g, tv, sv, 0.1, true).unwrap();
    let only = triadic_loss(&mut g, &BTreeMap::from([(Pair::TextSign, ts)])).unwrap();
    assert_eq!(g.value(only).item().unwrap(), g.value(ts).item().unwrap());
    let ta = info_nce_loss(&mut g, tv, av, 0.1, true).unwrap();
    let as_ = info_nce_loss(&mut g, av, sv, 0.1, true).unwrap();
    let all = triadic_loss(&mut g, &BTreeMap::from([(Pair::TextSign, ts), (Pair::TextAudio, ta), (Pair::AudioSign, as_)])).unwrap();
    let expect: f64 = [ts, ta, as_].iter().map(|&v| g.value(v).item().unwrap()).sum();
    assert!((g.value(all).item().unwrap() - expect).abs() < 1e-12);
}

#[test]
fn emergent_score_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let e = unit_rows(10, 5, &mut rng);
    let mut off = 0.0;
    for (i, x) in e.iter().enumerate() {
        for (j, y) in e.iter().enumerate() {
            if i != j {
                off += x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>();
            }
        }
    }
    let expect = 1.0 - off / 90.0;
    assert!((emergent_alignment_score(&e, &e).unwrap() - expect).abs() < 1e-12);

    let t = unit_rows(100, 64, &mut rng);
    let a = unit_rows(100, 64, &mut rng);
    assert!(emergent_alignment_score(&t, &a).unwrap().abs() < 0.1);
    assert!(emergent_alignment_score(&t, &a[..99]).is_err());
}

#[test]
fn loss_falls_on_a_separable_stream() {
    let (classes, d) = (8, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let protos: Vec<Vec<f64>> = (0..classes).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    let mut store = ParamStore::new();
    let fa = Linear::new(&mut store, "fa", d, 4, &mut rng).unwrap();
    let fb = Linear::new(&mut store, "fb", d, 4, &mut rng).unwrap();
    let ids: Vec<_> = store.ids().collect();
    let mut adam = Adam::new(&store, ids.clone(), 1e-2);
    let mut losses = Vec::new();
    for _ in 0..300 {
        let pick: Vec<usize> = rand::seq::index::sample(&mut rng, classes, 6).into_vec();
        let view = |rng: &mut ChaCha8Rng, flip: f64| -> Vec<Vec<f64>> {
            pick.iter()
                .map(|&c| protos[c].iter().map(|x| flip * x + 0.3 * rng.random_range(-1.0..1.0)).collect())
                .collect()
        };
        let (xa, xb) = (view(&mut rng, 1.0), view(&mut rng, -1.0));
        let mut g = Graph::with_params(&store);
        let a = g.constant(Tensor::from_rows(&xa).unwrap());
        let b = g.constant(Tensor::from_rows(&xb).unwrap());
        let a = fa.forward(&mut g, a).unwrap();
        let b = fb.forward(&mut g, b).unwrap();
        let a = g.normalize_rows(a).unwrap();
        let b = g.normalize_rows(b).unwrap();
        let l = info_nce_loss(&mut g, a, b, 0.2, true).unwrap();
        losses.push(g.value(l).item().unwrap());
        let mut grads = g.backward(l).unwrap().param_grads(&g);
        drop(g);
        grads.fill_missing(&store, &ids);
        adam.step(&mut store, &grads).unwrap();
    }
    let w: Vec<f64> = losses.chunks(100).map(|c| c.iter().sum::<f64>() / 100.0).collect();
    assert!(w[0] > w[1] && w[1] > w[2], "window means {w:?}");
}
