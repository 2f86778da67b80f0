//! Randomized invariants, checked with proptest.

use proptest::prelude::*;

use certnet::autodual::Norm;
use certnet::certifier::{robust_objective, BallSpec, EvalMode};
use certnet::duallayers::{hardtanh_dual_coeffs, relu_dual_coeffs};
use certnet::netgraph::{argmax_rows, LayerKind, LayerSpec, NetworkGraph};
use certnet::projest::{median, plan_tail};
use certnet::tape::Tape;
use certnet::Tensor;

fn scalar_coeffs(l: f64, u: f64) -> (f64, f64, f64, f64, f64, f64) {
    let mut tape = Tape::new();
    let lv = tape.constant(Tensor::new(vec![1, 1], vec![l]).unwrap());
    let uv = tape.constant(Tensor::new(vec![1, 1], vec![u]).unwrap());
    let (d, c) = relu_dual_coeffs(&mut tape, lv, uv).unwrap();
    let (s, p, q, r) = hardtanh_dual_coeffs(&mut tape, lv, uv).unwrap();
    (
        tape.value(d).item(),
        tape.value(c).item(),
        tape.value(s).item(),
        tape.value(p).item(),
        tape.value(q).item(),
        tape.value(r).item(),
    )
}

fn grid_max(f: impl Fn(f64) -> f64, l: f64, u: f64, nu: f64, nu_in: f64) -> f64 {
    (0..=400)
        .map(|i| {
            let z = l + (u - l) * i as f64 / 400.0;
            nu * f(z) - nu_in * z
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Both activation relaxations have slopes in [0,1], a nonnegative relu
    /// coefficient, and terms that dominate the scalar conjugate.
    #[test]
    fn activation_relaxations_are_sound(
        a in -3.0..3.0f64,
        b in -3.0..3.0f64,
        nu in -4.0..4.0f64,
    ) {
        let (l, u) = (a.min(b), a.max(b));
        let (d, c, s, p, q, r) = scalar_coeffs(l, u);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!(c >= 0.0);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
        let h_relu = c * nu.max(0.0);
        prop_assert!(grid_max(|z| z.max(0.0), l, u, nu, d * nu) <= h_relu + 1e-9);
        let h_ht = (p * nu).max(q * nu).max(r * nu);
        prop_assert!(grid_max(|z| z.clamp(-1.0, 1.0), l, u, nu, s * nu) <= h_ht + 1e-9);
    }

    /// The affine bound is the closed form, and shrinking the radius can only
    /// raise it.
    #[test]
    fn affine_bound_closed_form_and_monotone(
        w in proptest::collection::vec(-2.0..2.0f64, 6),
        b in proptest::collection::vec(-1.0..1.0f64, 2),
        x in proptest::collection::vec(-1.0..1.0f64, 3),
        c in proptest::collection::vec(-1.0..1.0f64, 2),
        eps in 0.0..0.5f64,
    ) {
        let wt = Tensor::new(vec![2, 3], w.clone()).unwrap();
        let bt = Tensor::from_vec(b.clone());
        let net = NetworkGraph::new(
            vec![LayerSpec { id: 2, kind: LayerKind::Linear { w: wt, b: bt }, inputs: vec![1] }],
            vec![3],
            2,
        )
        .unwrap();
        let ct = Tensor::new(vec![1, 2], c.clone()).unwrap();
        let j_at = |e: f64| {
            let ball = BallSpec::new(Norm::Linf, e, Tensor::from_vec(x.clone())).unwrap();
            robust_objective(&net, &ball, &ct, &EvalMode::Exact).unwrap()[0]
        };
        let fx: Vec<f64> = (0..2)
            .map(|i| (0..3).map(|j| w[i * 3 + j] * x[j]).sum::<f64>() + b[i])
            .collect();
        let dual: f64 = (0..3)
            .map(|j| (0..2).map(|i| c[i] * w[i * 3 + j]).sum::<f64>().abs())
            .sum();
        let want = c.iter().zip(&fx).map(|(ci, fi)| ci * fi).sum::<f64>() - eps * dual;
        prop_assert!((j_at(eps) - want).abs() < 1e-9);
        prop_assert!(j_at(eps / 2.0) >= j_at(eps) - 1e-12);
    }

    /// The sample median is always one of the samples, whatever the order.
    #[test]
    fn median_is_an_element(mut v in proptest::collection::vec(-100.0..100.0f64, 1..20)) {
        let m = median(&mut v.clone());
        prop_assert!(v.iter().any(|&x| x == m));
        v.reverse();
        prop_assert_eq!(median(&mut v), m);
    }

    /// A feasible tail plan stays within its projection budget and meets the
    /// per-estimate failure target.
    #[test]
    fn tail_plans_meet_their_targets(
        delta in 1e-4..0.5f64,
        sizes in proptest::collection::vec(1usize..50, 1..4),
        m in 1usize..5,
    ) {
        if let Ok(plan) = plan_tail(delta, &sizes, m, 200) {
            prop_assert!(plan.k <= 200);
            prop_assert!(plan.eps_tail > 0.0 && plan.eps_tail < 1.0);
            prop_assert!(plan.replica_failure() <= plan.delta_hat + 1e-12);
        }
    }

    /// Row argmax picks the first maximal entry.
    #[test]
    fn argmax_prefers_the_lowest_index(v in proptest::collection::vec(-10.0..10.0f64, 4)) {
        let out = Tensor::new(vec![1, 4], v.clone()).unwrap();
        let got = argmax_rows(&out, 4)[0];
        let want = v
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
            .0;
        prop_assert_eq!(got, want);
    }
}
