use proptest::prelude::*;

use dartlab_core::attacks::{grid_points, pgd, AttackConfig};
use dartlab_core::autodiff::Graph;
use dartlab_core::divergence::{omega_value, CmdRange};
use dartlab_core::models::{init_params, Architecture, ModelParams};
use dartlab_core::theory::{
    adversarial_loss_exact, check_bound, empirical_hdh, random_instance, worst_case_sup,
    DiscretePerturbationSet, FiniteHypothesisClass,
};
use dartlab_core::{DivergenceKind, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

/// `sum(tanh-free smooth composite)` used for gradient checks.
fn composite(x: &Tensor, w: &Tensor) -> (f64, Tensor) {
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let wi = g.param(w.clone());
    let h = g.matmul(xi, wi).unwrap();
    let s = g.sigmoid(h).unwrap();
    let e = g.square(s).unwrap();
    let sm = g.softmax(e).unwrap();
    let l = g.mean(sm).unwrap();
    let l2 = g.mul(l, l).unwrap();
    let grads = g.backward(l2, &[xi]).unwrap();
    (g.value(l2).item(), grads.into_iter().next().unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reverse_mode_matches_central_differences(x in matrix(3, 4), w in matrix(4, 3)) {
        let (_, grad) = composite(&x, &w);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (composite(&xp, &w).0 - composite(&xm, &w).0) / (2.0 * h);
            let g = grad.data()[i];
            prop_assert!((fd - g).abs() <= 1e-6 + 1e-4 * fd.abs().max(g.abs()), "{fd} vs {g}");
        }
    }

    #[test]
    fn gradients_are_linear_in_the_loss(x in matrix(4, 3), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let sq = g.square(xi).unwrap();
        let f1 = g.mean(sq).unwrap();
        let ex = g.sigmoid(xi).unwrap();
        let f2 = g.sum(ex).unwrap();
        let s1 = g.scale(f1, a).unwrap();
        let s2 = g.scale(f2, b).unwrap();
        let comb = g.add(s1, s2).unwrap();
        let g1 = g.backward(f1, &[xi]).unwrap().remove(0);
        let g2 = g.backward(f2, &[xi]).unwrap().remove(0);
        let gc = g.backward(comb, &[xi]).unwrap().remove(0);
        for i in 0..x.len() {
            let expect = a * g1.data()[i] + b * g2.data()[i];
            prop_assert!((gc.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn divergences_are_symmetric_and_permutation_invariant(
        s in matrix(5, 3),
        t in matrix(5, 3),
        perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let kinds = [
            DivergenceKind::Mmd { sigma: 1.0 },
            DivergenceKind::Coral,
            DivergenceKind::Cmd { moments: 3, range: CmdRange::Fixed { a: -2.0, b: 2.0 } },
        ];
        for kind in &kinds {
            let st = omega_value(kind, &s, &t, None).unwrap();
            let ts = omega_value(kind, &t, &s, None).unwrap();
            let sp = omega_value(kind, &s.select_rows(&perm), &t, None).unwrap();
            prop_assert!((st - ts).abs() < 1e-9, "{} {st} {ts}", kind.name());
            prop_assert!((st - sp).abs() < 1e-9, "{} {st} {sp}", kind.name());
            prop_assert!(st >= -1e-12);
            prop_assert!(omega_value(kind, &s, &s, None).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn pgd_stays_in_the_ball_and_box(
        x in matrix(4, 2),
        alpha in 0.0f64..0.5,
        steps in 0usize..6,
        seed in any::<u64>(),
        random_start in any::<bool>(),
    ) {
        let params: ModelParams = init_params(&Architecture::desk_default(2, 2), seed % 7).unwrap();
        let cfg = AttackConfig {
            alpha,
            steps,
            step_size: 0.3,
            random_start,
            clamp: Some((-1.5, 1.5)),
            seed,
        };
        let adv = pgd(
            |g, xi| {
                let z = dartlab_core::attacks::frozen_logits(&params, g, xi)?;
                g.softmax_cross_entropy(z, &[0, 1, 0, 1])
            },
            &x,
            &cfg,
        )
        .unwrap();
        for (a, c) in adv.data().iter().zip(x.data()) {
            if alpha == 0.0 || steps == 0 {
                prop_assert_eq!(a, c);
            } else {
                prop_assert!((a - c).abs() <= alpha + 1e-12);
                let lo = (c - alpha).max(-1.5).min(*c);
                let hi = (c + alpha).min(1.5).max(*c);
                prop_assert!(*a >= lo - 1e-12 && *a <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn grid_points_lie_in_the_ball(x in prop::collection::vec(-1.0f64..1.0, 2), alpha in 0.0f64..1.0, p in 1usize..6) {
        let g = grid_points(&x, alpha, p).unwrap();
        prop_assert_eq!(g.row(0), x.as_slice());
        for i in 0..g.rows() {
            for (v, c) in g.row(i).iter().zip(&x) {
                prop_assert!((v - c).abs() <= alpha + 1e-12);
            }
        }
    }

    #[test]
    fn hdh_is_symmetric_for_complement_closed_classes(
        s in prop::collection::vec(0i32..8, 1..6),
        t_seed in prop::collection::vec(0i32..8, 6),
    ) {
        let n = s.len();
        let xs: Vec<Vec<f64>> = s.iter().map(|&v| vec![v as f64]).collect();
        let xt: Vec<Vec<f64>> = t_seed[..n].iter().map(|&v| vec![v as f64]).collect();
        let rs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let rt: Vec<&[f64]> = xt.iter().map(Vec::as_slice).collect();
        let class = FiniteHypothesisClass::thresholds(&(0..9).map(|v| v as f64 - 0.5).collect::<Vec<_>>());
        prop_assert_eq!(empirical_hdh(&rs, &rt, &class).unwrap(), empirical_hdh(&rt, &rs, &class).unwrap());
    }

    #[test]
    fn adding_candidates_never_lowers_worst_case_quantities(seed in any::<u64>(), extra in -2i32..3) {
        let inst = random_instance(seed, 1, 4, 3);
        let base = worst_case_sup(&inst.source, &inst.target, &inst.perturbations, &inst.class).unwrap();
        let mut bigger: DiscretePerturbationSet = inst.perturbations.clone();
        let last = bigger.sets.len() - 1;
        let x0 = inst.target[last].x[0];
        bigger.sets[last].push(vec![x0 + extra as f64]);
        let more = worst_case_sup(&inst.source, &inst.target, &bigger, &inst.class).unwrap();
        prop_assert!(more.value >= base.value);
        prop_assert!(more.max_divergence >= base.max_divergence);
        for h in &inst.class.hypotheses {
            let a = adversarial_loss_exact(h, &inst.target, &inst.perturbations).unwrap();
            let b = adversarial_loss_exact(h, &inst.target, &bigger).unwrap();
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn bound_holds_on_random_instances(seed in any::<u64>(), dims in 1usize..3) {
        let inst = random_instance(seed, dims, 5, 3);
        let report = check_bound(&inst).unwrap();
        prop_assert!(report.passed(), "{:?}", report.violations);
    }
}
