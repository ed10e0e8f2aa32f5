use dartlab_core::attacks::{
    dart_target_attack, grid_bruteforce, linear_worst_margin, pgd_cross_entropy,
};
use dartlab_core::data::gen_two_moons_shift;
use dartlab_core::divergence::omega_value;
use dartlab_core::models::FEATURES;
use dartlab_core::optim::{Adam, AdamConfig};
use dartlab_core::theory::{
    adversarial_divergence, check_bound, empirical_hdh, ideal_joint_loss, worst_case_sup,
    zero_one_loss, BoundInstance, DiscretePerturbationSet, FiniteHypothesisClass, Frac,
    LabeledPoint,
};
use dartlab_core::{
    init_params, Architecture, AttackConfig, DivergenceKind, Graph, LabeledSet, ModelParams, Tensor,
};

fn cfg(alpha: f64, steps: usize, step_size: f64, random_start: bool) -> AttackConfig {
    AttackConfig {
        alpha,
        steps,
        step_size,
        random_start,
        clamp: None,
        seed: 21,
    }
}

#[test]
fn dart_attack_without_divergence_is_plain_pseudo_label_pgd() {
    let params = init_params(&Architecture::desk_default(2, 2), 3).unwrap();
    let xt = Tensor::from_rows(&[vec![0.2, -0.1], vec![1.0, 0.4], vec![-0.6, 0.9]]).unwrap();
    let labels = [1, 0, 1];
    let fs = params.forward(FEATURES, &xt).unwrap();
    let c = cfg(0.2, 4, 0.07, true);
    let a = dart_target_attack(
        &params,
        &xt,
        &labels,
        &DivergenceKind::Dann,
        &fs,
        0.0,
        1.3,
        &c,
    )
    .unwrap();
    let b = pgd_cross_entropy(&params, &xt, &labels, &c).unwrap();
    assert_eq!(a, b);
    let zero = dart_target_attack(
        &params,
        &xt,
        &labels,
        &DivergenceKind::Coral,
        &fs,
        1.0,
        1.0,
        &cfg(0.0, 3, 0.1, true),
    )
    .unwrap();
    assert_eq!(zero, xt);
}

#[test]
fn coral_only_attack_steps_along_the_gradient_sign() {
    let params = init_params(&Architecture::desk_default(2, 2), 8).unwrap();
    let xs = Tensor::from_rows(&[
        vec![0.5, 0.1],
        vec![-0.3, 0.8],
        vec![1.1, -0.9],
        vec![0.0, 0.4],
    ])
    .unwrap();
    let xt = Tensor::from_rows(&[
        vec![0.9, 0.2],
        vec![-1.0, 0.3],
        vec![0.2, 0.2],
        vec![0.7, -0.5],
    ])
    .unwrap();
    let fs = params.forward(FEATURES, &xs).unwrap();
    let objective = |x: &Tensor| {
        let ft = params.forward(FEATURES, x).unwrap();
        omega_value(&DivergenceKind::Coral, &fs, &ft, None).unwrap()
    };
    let adv = dart_target_attack(
        &params,
        &xt,
        &[0; 4],
        &DivergenceKind::Coral,
        &fs,
        1.0,
        0.0,
        &cfg(0.1, 1, 0.1, false),
    )
    .unwrap();
    let h = 1e-6;
    let mut checked = 0;
    for i in 0..xt.len() {
        let mut p = xt.clone();
        p.data_mut()[i] += h;
        let mut m = xt.clone();
        m.data_mut()[i] -= h;
        let fd = (objective(&p) - objective(&m)) / (2.0 * h);
        if fd.abs() > 1e-6 {
            let moved = adv.data()[i] - xt.data()[i];
            assert!(
                (moved - 0.1 * fd.signum()).abs() < 1e-12,
                "coordinate {i}: {moved} vs {fd}"
            );
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn grid_oracle_matches_the_linear_margin_within_resolution() {
    let (w, b) = ([0.7, -1.8], 0.3);
    for (x, y, alpha, p) in [
        ([0.2, 0.5], 1.0, 0.1, 5usize),
        ([-1.0, 0.0], -1.0, 0.3, 7),
        ([0.0, 0.0], 1.0, 0.25, 2),
    ] {
        let (_, value) = grid_bruteforce(
            |cands| {
                Ok((0..cands.rows())
                    .map(|r| -y * (w[0] * cands.row(r)[0] + w[1] * cands.row(r)[1] + b))
                    .collect())
            },
            &x,
            alpha,
            p,
        )
        .unwrap();
        let exact = linear_worst_margin(&w, b, y, &x, alpha);
        let resolution = alpha * 2.0 / (p - 1) as f64 * (w[0].abs() + w[1].abs());
        assert!(
            (-value - exact).abs() <= resolution + 1e-12,
            "{} vs {exact}",
            -value
        );
    }
}

fn pts(xs: &[f64], ys: &[i64]) -> Vec<LabeledPoint> {
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| LabeledPoint::new(vec![x], y).unwrap())
        .collect()
}

fn rows(points: &[LabeledPoint]) -> Vec<&[f64]> {
    points.iter().map(|p| p.x.as_slice()).collect()
}

fn both_way_thresholds(lo: i32, hi: i32) -> FiniteHypothesisClass {
    FiniteHypothesisClass::thresholds(&(lo..=hi).map(|v| v as f64 + 0.5).collect::<Vec<_>>())
}

fn instance(
    source: Vec<LabeledPoint>,
    target: Vec<LabeledPoint>,
    class: FiniteHypothesisClass,
) -> BoundInstance {
    let perturbations = DiscretePerturbationSet::singletons(&rows(&target));
    BoundInstance {
        source,
        target,
        perturbations,
        class,
    }
}

#[test]
fn identical_domains_make_the_worst_case_exactly_twice_gamma() {
    let z = pts(&[0.0, 1.0, 2.0, 3.0], &[-1, 1, -1, 1]);
    let class = both_way_thresholds(-1, 3);
    let inst = instance(z.clone(), z.clone(), class.clone());
    let report = check_bound(&inst).unwrap();
    assert!(report.passed());
    let gamma = ideal_joint_loss(&z, &z, &class).unwrap();
    let single = class
        .hypotheses
        .iter()
        .map(|h| zero_one_loss(h, &z))
        .min()
        .unwrap();
    assert_eq!(gamma, single.scale(2));
    assert_eq!(report.worst_case.value, gamma.scale(2));
    assert_eq!(report.worst_case.max_divergence, Frac::zero());
    for h in &report.hypotheses {
        assert_eq!(h.lhs_exact, zero_one_loss(&class.hypotheses[h.index], &z));
    }
}

#[test]
fn separated_and_overlapping_domains() {
    let class = both_way_thresholds(-1, 4);
    let src = pts(&[0.0, 1.0], &[0, 0]);
    let far = pts(&[2.0, 3.0], &[1, 1]);
    let near = pts(&[1.0, 2.0], &[0, 1]);
    assert_eq!(
        empirical_hdh(&rows(&src), &rows(&far), &class).unwrap(),
        Frac::new(2, 1)
    );
    assert_eq!(
        empirical_hdh(&rows(&src), &rows(&near), &class).unwrap(),
        Frac::new(1, 1)
    );
    for target in [far, near] {
        let inst = instance(src.clone(), target.clone(), class.clone());
        let report = check_bound(&inst).unwrap();
        assert!(report.passed(), "{:?}", report.violations);
        // With singleton sets the adversarial divergence is the plain one.
        let d = empirical_hdh(&rows(&src), &rows(&target), &class).unwrap();
        assert_eq!(
            adversarial_divergence(&src, &target, &inst.perturbations, &class).unwrap(),
            d
        );
        assert_eq!(report.adversarial_divergence, report.max_divergence);
        let wc = worst_case_sup(&src, &target, &inst.perturbations, &class).unwrap();
        let gamma = ideal_joint_loss(&src, &target, &class).unwrap();
        assert_eq!(wc.value, d + gamma.scale(2));
    }
}

#[test]
fn opposite_labels_on_one_point_cost_one() {
    let class = both_way_thresholds(-2, 2);
    assert_eq!(
        ideal_joint_loss(&pts(&[0.0], &[1]), &pts(&[0.0], &[-1]), &class).unwrap(),
        Frac::new(1, 1)
    );
}

#[test]
fn source_only_linear_probe_loses_accuracy_on_the_rotated_target() {
    let (s, t) = gen_two_moons_shift(2000, 30.0, 0.1, 0).unwrap();
    let mut probe = ModelParams::new();
    probe.insert("probe", vec![dartlab_core::models::Layer::zeros(2, 2)]);
    let mut adam = Adam::new(AdamConfig {
        lr: 0.05,
        beta1: 0.9,
        weight_decay: 0.0,
    })
    .unwrap();
    for _ in 0..300 {
        let mut g = Graph::new();
        let bound = probe.bind(&mut g, &["probe"]).unwrap();
        let x = g.input(s.features().clone());
        let z = bound
            .component("probe")
            .unwrap()
            .forward(&mut g, x)
            .unwrap();
        let loss = g.softmax_cross_entropy(z, s.labels()).unwrap();
        let grads = bound.gradients(&g, loss).unwrap();
        adam.step(&mut probe, &grads).unwrap();
    }
    let acc = |set: &LabeledSet| {
        let z = probe.forward("probe", set.features()).unwrap();
        let hits = z
            .argmax_rows()
            .iter()
            .zip(set.labels())
            .filter(|(p, y)| p == y)
            .count();
        hits as f64 / set.len() as f64
    };
    let (src_acc, tgt_acc) = (acc(&s), acc(&t));
    assert!(tgt_acc < src_acc, "source {src_acc} target {tgt_acc}");
}
