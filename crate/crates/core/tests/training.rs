use dartlab_core::data::gen_two_moons_shift;
use dartlab_core::divergence::dann_omega;
use dartlab_core::harness::{prepare_data, pretrain, DatasetSpec, Seeds};
use dartlab_core::models::{CLASSIFIER, DISCRIMINATOR, FEATURES};
use dartlab_core::optim::Adam;
use dartlab_core::trainers::{
    accuracy, baseline_step, dart_step, train, EpochSampler, TrainData, TrainState,
};
use dartlab_core::{
    init_params, Algorithm, AlgorithmConfig, Architecture, ExperimentConfig, Graph, LabeledSet,
    ModelParams, Tensor, UnlabeledSet,
};

fn moons(n: usize, rotation: f64, seed: u64) -> (LabeledSet, UnlabeledSet, LabeledSet) {
    let (s, t) = gen_two_moons_shift(n, rotation, 0.1, seed).unwrap();
    let (tt, tv, _) = dartlab_core::data::split_target(&t, (0.6, 0.2, 0.2), seed).unwrap();
    (s, tt, tv)
}

/// Plain minibatch source cross-entropy with Adam, written out by hand.
fn source_only(
    cfg: &AlgorithmConfig,
    data: TrainData<'_>,
    mut params: ModelParams,
    seed: u64,
) -> ModelParams {
    let batch = cfg.batch_size.min(data.source.len()).min(data.target.len());
    let mut sampler = EpochSampler::new(data.source.len(), batch, seed, 1);
    let mut adam = Adam::new(cfg.optimizer.main()).unwrap();
    for _ in 0..cfg.iterations {
        let idx = sampler.next_batch();
        let xs = data.source.features().select_rows(&idx);
        let ys: Vec<usize> = idx.iter().map(|&i| data.source.labels()[i]).collect();
        let mut g = Graph::new();
        let bound = params.bind(&mut g, &[FEATURES, CLASSIFIER]).unwrap();
        let x = g.input(xs);
        let h = bound
            .component(FEATURES)
            .unwrap()
            .forward(&mut g, x)
            .unwrap();
        let z = bound
            .component(CLASSIFIER)
            .unwrap()
            .forward(&mut g, h)
            .unwrap();
        let loss = g.softmax_cross_entropy(z, &ys).unwrap();
        let grads = bound.gradients(&g, loss).unwrap();
        adam.step(&mut params, &grads).unwrap();
    }
    params
}

fn assert_same_model(a: &ModelParams, b: &ModelParams) {
    for name in [FEATURES, CLASSIFIER, DISCRIMINATOR] {
        let (la, lb) = (a.layers(name).unwrap(), b.layers(name).unwrap());
        for (x, y) in la.iter().zip(lb) {
            assert_eq!(x.weight.data(), y.weight.data(), "{name} weights");
            assert_eq!(x.bias.data(), y.bias.data(), "{name} biases");
        }
    }
}

#[test]
fn zero_divergence_weight_follows_the_source_only_trajectory() {
    let (s, tt, tv) = moons(300, 30.0, 1);
    let data = TrainData {
        source: &s,
        target: &tt,
        target_val: &tv,
    };
    let init = init_params(&Architecture::desk_default(2, 2), 4).unwrap();
    let mut cfg = AlgorithmConfig::new(Algorithm::NaturalUda);
    cfg.lambda1 = 0.0;
    cfg.iterations = 80;
    cfg.batch_size = 32;
    cfg.checkpoint_frequency = 20;
    let out = train(&cfg, data, init.clone(), 9, &mut |_| Ok(())).unwrap();
    let reference = source_only(&cfg, data, init, 9);
    assert_same_model(&out.final_params, &reference);
}

#[test]
fn dart_at_zero_radius_is_natural_step_plus_clean_pseudo_ce() {
    let (s, tt, _) = moons(200, 30.0, 2);
    let params = init_params(&Architecture::desk_default(2, 2), 1).unwrap();
    let rows: Vec<usize> = (0..40).collect();
    let xs = s.features().select_rows(&rows);
    let ys = s.labels()[..40].to_vec();
    let xt = tt.features().select_rows(&rows);
    let pseudo = params.predict(&xt).unwrap();

    let mut dart = AlgorithmConfig::new(Algorithm::Dart);
    dart.train_attack.alpha = 0.0;
    dart.lambda2 = 0.7;
    let mut a = TrainState::new(params.clone(), &dart).unwrap();
    let la = dart_step(&mut a, (&xs, &ys), (&xt, &pseudo), &dart, 3).unwrap();

    let nat = AlgorithmConfig {
        algorithm: Algorithm::NaturalUda,
        ..dart.clone()
    };
    let mut b = TrainState::new(params.clone(), &nat).unwrap();
    let lb = baseline_step(&mut b, (&xs, &ys), (&xt, None), &nat, 3).unwrap();

    // The divergence and source terms see the same inputs, so only the pseudo-label term differs.
    assert_eq!(la["source"], lb["source"]);
    assert_eq!(la["divergence"], lb["divergence"]);
    let mut g = Graph::new();
    let x = g.input(xt.clone());
    let bound = params.bind_frozen(&mut g, &[FEATURES, CLASSIFIER]).unwrap();
    let h = bound
        .component(FEATURES)
        .unwrap()
        .forward(&mut g, x)
        .unwrap();
    let z = bound
        .component(CLASSIFIER)
        .unwrap()
        .forward(&mut g, h)
        .unwrap();
    let ce = g.softmax_cross_entropy(z, &pseudo).unwrap();
    assert!((la["target_pseudo"] - g.value(ce).item()).abs() < 1e-12);
    assert!((la["total"] - (lb["total"] + 0.7 * la["target_pseudo"])).abs() < 1e-12);
}

#[test]
fn fixed_pseudo_labels_never_change_for_at_tgt_pseudo() {
    let (s, tt, tv) = moons(300, 30.0, 3);
    let data = TrainData {
        source: &s,
        target: &tt,
        target_val: &tv,
    };
    let init = init_params(&Architecture::desk_default(2, 2), 2).unwrap();
    let mut cfg = AlgorithmConfig::new(Algorithm::AtTgtPseudo);
    cfg.iterations = 60;
    cfg.checkpoint_frequency = 10;
    cfg.batch_size = 32;
    let out = train(&cfg, data, init, 5, &mut |_| Ok(())).unwrap();
    assert!(out.log.iter().all(|r| !r.pseudo_label_swap));
}

#[test]
fn identical_domains_leave_the_discriminator_at_chance() {
    let (s, _) = gen_two_moons_shift(600, 0.0, 0.1, 11).unwrap();
    let target = s.clone().into_unlabeled();
    let data = TrainData {
        source: &s,
        target: &target,
        target_val: &s,
    };
    let init = init_params(&Architecture::desk_default(2, 2), 11).unwrap();
    let mut cfg = AlgorithmConfig::new(Algorithm::NaturalUda);
    cfg.iterations = 400;
    let out = train(&cfg, data, init, 11, &mut |_| Ok(())).unwrap();

    let p = &out.final_params;
    let feats = p.forward(FEATURES, s.features()).unwrap();
    let mut g = Graph::new();
    let bound = p.bind_frozen(&mut g, &[DISCRIMINATOR]).unwrap();
    let fs = g.constant(feats.clone());
    let ft = g.constant(feats);
    let om = dann_omega(&mut g, fs, ft, bound.component(DISCRIMINATOR).unwrap()).unwrap();
    let omega = g.value(om).item();
    let floor = -2.0 * std::f64::consts::LN_2;
    assert!(omega <= floor + 1e-12, "{omega}");
    assert!(
        omega >= floor - 0.05,
        "discriminator advantage {}",
        floor - omega
    );
}

#[test]
fn pretraining_on_rotated_moons_reaches_the_target() {
    let results: Vec<f64> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..5u64)
            .map(|seed| {
                scope.spawn(move || {
                    let spec = DatasetSpec::TwoMoons {
                        n: 2000,
                        rotation_degrees: 30.0,
                        noise: 0.15,
                    };
                    let mut cfg =
                        ExperimentConfig::new(spec, AlgorithmConfig::new(Algorithm::NaturalUda));
                    cfg.seeds = Seeds {
                        data: seed,
                        init: seed,
                        train: seed,
                        attack: seed,
                        sweep: seed,
                    };
                    let data = prepare_data(&cfg.dataset, cfg.target_split, cfg.source_keep, seed)
                        .unwrap();
                    let pre = pretrain(&cfg, &data).unwrap();
                    accuracy(&pre.params, &data.target_test).unwrap()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let above = results.iter().filter(|&&a| a > 0.85).count();
    assert!(above >= 4, "target accuracies {results:?}");
}

#[test]
fn every_step_keeps_parameters_finite() {
    let (s, tt, tv) = moons(200, 30.0, 4);
    let data = TrainData {
        source: &s,
        target: &tt,
        target_val: &tv,
    };
    for alg in Algorithm::ALL {
        let mut cfg = AlgorithmConfig::new(alg);
        cfg.iterations = 15;
        cfg.checkpoint_frequency = 5;
        cfg.batch_size = 16;
        let init = init_params(&Architecture::desk_default(2, 2), 0).unwrap();
        train(&cfg, data, init, 1, &mut |ev| {
            assert!(ev.params.all_finite(), "{} at {}", alg.tag(), ev.iteration);
            Ok(())
        })
        .unwrap();
    }
}

#[test]
fn checkpoint_from_another_run_reproduces_logits() {
    let dir = tempfile::tempdir().unwrap();
    let arch = Architecture::desk_default(2, 3);
    let probe = Tensor::from_rows(&[vec![0.1, -0.4], vec![1.2, 0.3], vec![-2.0, 2.0]]).unwrap();
    let a = init_params(&arch, 77).unwrap();
    a.save_checkpoint(&dir.path().join("a.json")).unwrap();
    let b = init_params(&arch, 77).unwrap();
    let loaded = ModelParams::load_checkpoint(&dir.path().join("a.json")).unwrap();
    assert_eq!(loaded.logits(&probe).unwrap(), b.logits(&probe).unwrap());
}
