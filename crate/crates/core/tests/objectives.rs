use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vitask::numerics::{check_gradients, Graph, Tensor, Var};
use vitask::objectives::{
    crt_graph, crt_loss, margin_distribution, nll_graph, nll_loss, rda_graph, rda_loss, rda_star_loss, stage_loss,
    stage_total_graph, ObjectiveError,
};

fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn params(pairs: &[(&str, Tensor)]) -> BTreeMap<String, Tensor> {
    pairs.iter().map(|(k, t)| (k.to_string(), t.clone())).collect()
}

/// Direct log-sum-exp, independent of the library softmax.
fn log_softmax_row(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

#[test]
fn kl_two_point_oracle() {
    // KL((.5,.5) || (.9,.1)) = 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1)
    let plain = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
    let ep = Tensor::matrix(1, 2, vec![0.9f64.ln(), 0.1f64.ln()]).unwrap();
    let v = rda_loss(&plain, &ep).unwrap();
    assert!((v - 0.510_825_623_765_990_7).abs() < 1e-12, "{v}");
    assert_eq!(v, rda_star_loss(&plain, &ep).unwrap());
}

#[test]
fn margin_softmax_oracle() {
    let pos = Tensor::matrix(1, 3, vec![3.0, 2.0, 1.0]).unwrap();
    let neg = Tensor::matrix(1, 3, vec![2.0, 2.0, 2.0]).unwrap();
    let m = margin_distribution(&pos, &neg).unwrap();
    let want = [0.665_240_955_774_821_9, 0.244_728_471_054_797_64, 0.090_030_573_170_380_46];
    for (a, b) in m.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
}

#[test]
fn nll_and_crt_match_brute_force() {
    let pos = randn(5, 7, 1);
    let neg = randn(5, 7, 2);
    let targets = [3, 0, 6, 2, 2];
    let mut nll = 0.0;
    let mut crt = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        nll -= log_softmax_row(pos.row(t))[y];
        let d: Vec<f64> = pos.row(t).iter().zip(neg.row(t)).map(|(a, b)| a - b).collect();
        crt -= log_softmax_row(&d)[y];
    }
    assert!((nll_loss(&pos, &targets).unwrap() - nll / 5.0).abs() < 1e-12);
    assert!((crt_loss(&pos, &neg, &targets).unwrap() - crt / 5.0).abs() < 1e-12);
}

#[test]
fn batch_mean_is_mean_of_record_means() {
    let a = randn(2, 6, 3);
    let b = randn(4, 6, 4);
    let (ta, tb) = ([1, 5], [0, 0, 2, 3]);
    let mut packed = a.data().to_vec();
    packed.extend_from_slice(b.data());
    let packed = Tensor::matrix(6, 6, packed).unwrap();
    let targets: Vec<usize> = ta.iter().chain(&tb).copied().collect();
    let mut g = Graph::new();
    let l = g.constant(packed);
    let v = nll_graph(&mut g, l, &targets, &[2, 4]).unwrap();
    let want = 0.5 * (nll_loss(&a, &ta).unwrap() + nll_loss(&b, &tb).unwrap());
    assert!((g.scalar(v) - want).abs() < 1e-12);
}

#[test]
fn gradients_match_finite_differences() {
    let (pos, neg, ep) = (randn(4, 5, 10), randn(4, 5, 11), randn(4, 5, 12));
    let rows = [1usize, 3];
    let targets = [4, 0, 2, 1];
    type Build<'a> = Box<dyn Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var, ObjectiveError> + 'a>;
    // detached targets enter as constants: finite differences cannot see a stop-gradient
    let ep_const = |g: &mut Graph| g.constant(ep.clone());
    let cases: Vec<(&str, BTreeMap<String, Tensor>, Build)> = vec![
        ("nll", params(&[("pos", pos.clone())]), Box::new(|g, v| nll_graph(g, v["pos"], &targets, &rows))),
        (
            "rda",
            params(&[("pos", pos.clone())]),
            Box::new(|g, v| {
                let e = ep_const(g);
                rda_graph(g, v["pos"], e, &rows, true)
            }),
        ),
        (
            "rda*",
            params(&[("pos", pos.clone()), ("ep", ep.clone())]),
            Box::new(|g, v| rda_graph(g, v["pos"], v["ep"], &rows, false)),
        ),
        (
            "crt",
            params(&[("pos", pos.clone()), ("neg", neg.clone())]),
            Box::new(|g, v| crt_graph(g, v["pos"], v["neg"], &targets, &rows)),
        ),
        (
            "stage2",
            params(&[("pos", pos.clone()), ("neg", neg.clone())]),
            Box::new(|g, v| {
                let e = ep_const(g);
                let van = nll_graph(g, v["pos"], &targets, &rows)?;
                let epl = nll_graph(g, e, &targets, &rows)?;
                let rda = rda_graph(g, v["pos"], e, &rows, true)?;
                let crt = crt_graph(g, v["pos"], v["neg"], &targets, &rows)?;
                stage_total_graph(g, 2, van, Some(epl), Some(rda), Some(crt), 0.7, 1.3)
            }),
        ),
    ];
    for (name, p, build) in cases {
        let report = check_gradients(|g, v| build(g, v), &p, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-6, "{name}: {report:?}");
    }
}

#[test]
fn detach_equals_constant_target() {
    let plain = randn(3, 6, 20);
    let ep = randn(3, 6, 21);
    let grad_of = |detach_const: bool| {
        let mut g = Graph::new();
        let p = g.param("plain", plain.clone());
        let e = if detach_const { g.constant(ep.clone()) } else { g.param("ep", ep.clone()) };
        let v = rda_graph(&mut g, p, e, &[3], true).unwrap();
        let grads = g.backward(v).unwrap();
        (g.scalar(v), grads.param("plain").unwrap().clone(), grads.param("ep").cloned())
    };
    let (v1, g1, e1) = grad_of(false);
    let (v2, g2, _) = grad_of(true);
    assert_eq!(v1.to_bits(), v2.to_bits());
    assert_eq!(g1, g2);
    assert!(e1.is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
}

#[test]
fn rda_star_sends_gradient_to_exemplar_branch() {
    let mut g = Graph::new();
    let p = g.param("plain", randn(3, 6, 30));
    let e = g.param("ep", randn(3, 6, 31));
    let v = rda_graph(&mut g, p, e, &[3], false).unwrap();
    let grads = g.backward(v).unwrap();
    assert!(grads.param("ep").unwrap().data().iter().any(|&x| x.abs() > 1e-6));
}

#[test]
fn margin_is_invariant_to_shared_shift() {
    let pos = randn(3, 5, 40);
    let neg = randn(3, 5, 41);
    let shift = randn(3, 5, 42);
    let add = |a: &Tensor| {
        let mut a = a.clone();
        a.add_assign(&shift);
        a
    };
    let m1 = margin_distribution(&pos, &neg).unwrap();
    let m2 = margin_distribution(&add(&pos), &add(&neg)).unwrap();
    assert!(m1.max_abs_diff(&m2) < 1e-12);
}

#[test]
fn zero_beta_drops_contrastive_gradient() {
    let pos = randn(2, 4, 50);
    let neg = randn(2, 4, 51);
    let targets = [1, 3];
    let grads = |beta: f64, with_crt: bool| {
        let mut g = Graph::new();
        let p = g.param("pos", pos.clone());
        let n = g.constant(neg.clone());
        let van = nll_graph(&mut g, p, &targets, &[2]).unwrap();
        let crt = if with_crt { Some(crt_graph(&mut g, p, n, &targets, &[2]).unwrap()) } else { None };
        let total = stage_total_graph(&mut g, 2, van, None, None, crt, 1.0, beta).unwrap();
        g.backward(total).unwrap().param("pos").unwrap().clone()
    };
    assert_eq!(grads(0.0, true), grads(1.0, false));
    assert_ne!(grads(1.0, true), grads(1.0, false));
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(matches!(stage_loss(3, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0), Err(ObjectiveError::BadStage(3))));
    assert!(matches!(stage_loss(1, 0.0, 0.0, 0.0, 0.0, -1.0, 1.0), Err(ObjectiveError::NegativeWeight { .. })));
    assert!(crt_loss(&randn(2, 3, 0), &randn(2, 4, 0), &[0, 0]).is_err());
    assert!(rda_loss(&randn(2, 3, 0), &randn(3, 3, 0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rda_is_non_negative(seed in 0u64..10_000, rows in 1usize..5, cols in 2usize..9, scale in 0.1f64..20.0) {
        let mut a = randn(rows, cols, seed);
        a.scale_assign(scale);
        let b = randn(rows, cols, seed + 1);
        prop_assert!(rda_loss(&a, &b).unwrap() >= -1e-12);
        prop_assert!(rda_loss(&a, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn stage_total_is_linear(van in 0.0f64..5.0, ep in 0.0f64..5.0, rda in 0.0f64..5.0, crt in 0.0f64..5.0,
                             alpha in 0.0f64..3.0, beta in 0.0f64..3.0) {
        let s1 = stage_loss(1, van, ep, rda, crt, alpha, beta).unwrap();
        let s2 = stage_loss(2, van, ep, rda, crt, alpha, beta).unwrap();
        prop_assert_eq!(s1.crt, 0.0);
        prop_assert!((s1.total - (van + ep + alpha * rda)).abs() < 1e-12);
        prop_assert!((s2.total - s1.total - beta * crt).abs() < 1e-12);
    }
}
