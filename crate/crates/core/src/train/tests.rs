use super::*;
use crate::gradcheck::numerical_grad;
use crate::norm::RunningStats;
use crate::tensor::Tensor;

fn blobs(classes: usize, dim: usize, sep: f64, per_class: usize, seed: u64) -> Dataset {
    make_synthetic_dataset(&DatasetSpec {
        classes,
        mode: DataMode::Vector { feature_dim: dim },
        samples_per_class: per_class,
        separation: sep,
        seed,
    })
    .unwrap()
}

fn images(classes: usize, seed: u64) -> Dataset {
    make_synthetic_dataset(&DatasetSpec {
        classes,
        mode: DataMode::Image {
            channels: 2,
            height: 4,
            width: 4,
        },
        samples_per_class: 20,
        separation: 3.0,
        seed,
    })
    .unwrap()
}

fn mlp(data: &Dataset, variant: NormVariant, policy: &ShrinkPolicy, seed: u64) -> ToyNet {
    let spec = NetSpec::mlp(vec![8], Some(NormKind::Bn), variant);
    ToyNet::build(&spec, data.sample_shape(), data.classes, policy, seed).unwrap()
}

fn total_loss(
    net: &ToyNet,
    x: &Tensor,
    labels: &[usize],
    penalty: Option<(PenaltyKind, f64)>,
) -> f64 {
    let mut net = net.clone();
    let (logits, caches) = net.forward_train(x).unwrap();
    let (loss, _) = softmax_cross_entropy(&logits, labels).unwrap();
    let extra = match penalty {
        Some((kind, lambda)) => {
            lambda
                * caches
                    .iter()
                    .filter_map(|c| c.js_caches())
                    .flatten()
                    .map(|c| c.penalty(kind))
                    .sum::<f64>()
        }
        None => 0.0,
    };
    loss + extra
}

fn assert_close(analytic: &[f64], numeric: &[f64], what: &str) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
        assert!(rel < 1e-6, "{what}[{i}]: analytic {a}, numeric {n}");
    }
}

fn check_network(net: &ToyNet, x: &Tensor, labels: &[usize], penalty: Option<(PenaltyKind, f64)>) {
    let mut work = net.clone();
    let (logits, caches) = work.forward_train(x).unwrap();
    let (_, grad_logits) = softmax_cross_entropy(&logits, labels).unwrap();
    let stat_grads: Vec<Option<Vec<StatGrads>>> = caches
        .iter()
        .map(|c| {
            let (kind, lambda) = penalty?;
            Some(
                c.js_caches()?
                    .iter()
                    .map(|g| StatGrads::from_penalty(g, kind, lambda))
                    .collect(),
            )
        })
        .collect();
    let (grads, grad_x) = net.backward(&caches, &grad_logits, &stat_grads).unwrap();

    let num_x = numerical_grad(|xp| Ok(total_loss(net, xp, labels, penalty)), x, 1e-5).unwrap();
    assert_close(grad_x.data(), num_x.data(), "input");

    for (li, g) in grads.iter().enumerate() {
        let Some((ga, gb)) = g else { continue };
        for (which, analytic) in [(0, ga), (1, gb)] {
            let mut numeric = vec![0.0; analytic.len()];
            for (k, slot) in numeric.iter_mut().enumerate() {
                let eval = |delta: f64| {
                    let mut p = net.clone();
                    let mut views = p.params_mut();
                    let (a, b) = views[li].take().unwrap();
                    if which == 0 {
                        a[k] += delta;
                    } else {
                        b[k] += delta;
                    }
                    total_loss(&p, x, labels, penalty)
                };
                *slot = (eval(1e-5) - eval(-1e-5)) / 2e-5;
            }
            assert_close(analytic, &numeric, &format!("layer {li} param {which}"));
        }
    }
}

fn random_input(shape: [usize; 4], seed: u64) -> Tensor {
    let mut rng = crate::random::seeded(seed);
    let mut normal = crate::random::PolarNormal::new();
    let mut v = vec![0.0; shape.iter().product()];
    normal.fill(&mut rng, &mut v);
    Tensor::from_vec(shape, v).unwrap()
}

#[test]
fn softmax_cross_entropy_values() {
    let logits = Tensor::from_vec([2, 3, 1, 1], vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
    let (loss, g) = softmax_cross_entropy(&logits, &[0, 2]).unwrap();
    let second = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
    assert!((loss - (3f64.ln() + second) / 2.0).abs() < 1e-14);
    assert!((g.data()[0] - (1.0 / 3.0 - 1.0) / 2.0).abs() < 1e-15);
    let num = numerical_grad(|l| Ok(softmax_cross_entropy(l, &[0, 2])?.0), &logits, 1e-5).unwrap();
    assert_close(g.data(), num.data(), "logits");
    assert!(softmax_cross_entropy(&logits, &[0, 3]).is_err());
    assert!(softmax_cross_entropy(&logits, &[0]).is_err());
}

#[test]
fn network_gradients_mlp_js_bn() {
    let data = blobs(3, 4, 2.0, 10, 1);
    let net = mlp(&data, NormVariant::Js, &ShrinkPolicy::default(), 3);
    let x = random_input([6, 4, 1, 1], 5);
    check_network(&net, &x, &[0, 1, 2, 0, 1, 2], None);
}

#[test]
fn network_gradients_with_penalties() {
    let data = blobs(3, 4, 2.0, 10, 1);
    let net = mlp(&data, NormVariant::Js, &ShrinkPolicy::default(), 3);
    let x = random_input([6, 4, 1, 1], 6);
    let labels = [2, 1, 0, 0, 1, 2];
    check_network(&net, &x, &labels, Some((PenaltyKind::Ridge, 0.3)));
    check_network(&net, &x, &labels, Some((PenaltyKind::Lasso, 0.3)));
}

#[test]
fn network_gradients_conv_variants() {
    let data = images(3, 2);
    let x = random_input([4, 2, 4, 4], 8);
    let labels = [0, 1, 2, 1];
    for (kind, variant) in [
        (NormKind::Bn, NormVariant::Js),
        (NormKind::Ln, NormVariant::Js),
        (NormKind::Bn, NormVariant::Standard),
        (NormKind::Ln, NormVariant::Standard),
    ] {
        let spec = NetSpec::conv(vec![4, 3], Some(kind), variant);
        let net =
            ToyNet::build(&spec, data.sample_shape(), 3, &ShrinkPolicy::default(), 4).unwrap();
        check_network(&net, &x, &labels, None);
    }
}

#[test]
fn build_validation() {
    let data = blobs(2, 3, 1.0, 10, 1);
    let ln_mlp = NetSpec::mlp(vec![4], Some(NormKind::Ln), NormVariant::Js);
    assert!(ToyNet::build(&ln_mlp, data.sample_shape(), 2, &ShrinkPolicy::default(), 0).is_err());

    let mut net = mlp(&data, NormVariant::Js, &ShrinkPolicy::default(), 0);
    net.classes = 3;
    assert!(net.validate().is_err());

    let net = mlp(&data, NormVariant::Js, &ShrinkPolicy::default(), 0);
    let cfg = TrainConfig::new(1, 1, 0.1, 0);
    assert!(cfg.validate_for(&net).is_err());
    assert!(TrainConfig::new(4, 1, 0.0, 0).validate().is_err());

    let mut cfg = TrainConfig::new(4, 1, 0.1, 0);
    cfg.penalty_kind = Some(PenaltyKind::Ridge);
    cfg.penalized_layers = Some(["norm7".to_string()].into());
    assert!(cfg.validate_for(&net).is_err());

    let std_net = mlp(&data, NormVariant::Standard, &ShrinkPolicy::default(), 0);
    cfg.penalized_layers = None;
    assert!(cfg.validate_for(&std_net).is_err());
    assert!(cfg.validate_for(&net).is_ok());
}

#[test]
fn separable_blobs_smoke() {
    let data = blobs(2, 2, 10.0, 100, 11);
    let mut net = mlp(&data, NormVariant::Js, &ShrinkPolicy::default(), 12);
    let metrics = train(&mut net, &data, &TrainConfig::new(16, 20, 0.05, 13)).unwrap();
    assert_eq!(metrics.epochs.len(), 20);
    assert!(
        metrics.final_test_acc().unwrap() >= 0.98,
        "{:?}",
        metrics.epochs.last()
    );
    for e in &metrics.epochs {
        assert!((0.0..=1.0).contains(&e.train_acc) && (0.0..=1.0).contains(&e.test_acc));
    }
}

#[test]
fn training_is_deterministic() {
    let data = blobs(3, 4, 3.0, 30, 2);
    let cfg = TrainConfig::new(8, 3, 0.05, 9);
    let run = || {
        let mut net = mlp(&data, NormVariant::Js, &ShrinkPolicy::default(), 1);
        let m = train(&mut net, &data, &cfg).unwrap();
        (m, net)
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_lambda_matches_penalty_free_run() {
    let data = blobs(3, 4, 3.0, 30, 2);
    let plain = TrainConfig::new(8, 3, 0.05, 9);
    let mut zero = plain.clone();
    zero.penalty_kind = Some(PenaltyKind::Ridge);
    zero.lambda_original = 0.0;

    let mut a = mlp(&data, NormVariant::Js, &ShrinkPolicy::default(), 1);
    let mut b = a.clone();
    let ma = train(&mut a, &data, &plain).unwrap();
    let mb = train(&mut b, &data, &zero).unwrap();
    assert_eq!(ma.epochs, mb.epochs);
    assert_eq!(ma.final_stats, mb.final_stats);
    assert_eq!(a, b);
    assert!(mb.penalty_steps.iter().all(|s| s.lambda == 0.0));
}

#[test]
fn policy_none_matches_standard_bn() {
    let data = blobs(4, 5, 2.0, 25, 3);
    let cfg = TrainConfig::new(10, 4, 0.05, 4);
    let mut js = mlp(&data, NormVariant::Js, &ShrinkPolicy::none(), 5);
    let mut std = mlp(&data, NormVariant::Standard, &ShrinkPolicy::none(), 5);
    let mj = train(&mut js, &data, &cfg).unwrap();
    let ms = train(&mut std, &data, &cfg).unwrap();
    assert_eq!(mj, ms);
    for (a, b) in js.layers.iter().zip(&std.layers) {
        match (a, b) {
            (Layer::Norm(x), Layer::Norm(y)) => {
                assert_eq!(x.params, y.params);
                assert_eq!(x.running, y.running);
            }
            _ => assert_eq!(a, b),
        }
    }
}

#[test]
fn penalty_weight_identity_each_step() {
    let data = blobs(3, 4, 2.0, 30, 6);
    for kind in [PenaltyKind::Ridge, PenaltyKind::Lasso] {
        let mut cfg = TrainConfig::new(8, 2, 0.05, 1);
        cfg.penalty_kind = Some(kind);
        cfg.lambda_original = 0.1;
        let mut net = mlp(&data, NormVariant::Js, &ShrinkPolicy::none(), 2);
        let m = train(&mut net, &data, &cfg).unwrap();
        assert_eq!(m.penalty_steps.len(), 2 * 9);
        for s in &m.penalty_steps {
            let lhs = s.lambda * s.penalty_sum;
            let rhs = 0.1 * s.loss_original;
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs(), "{s:?}");
        }
    }
}

#[test]
fn untrained_net_is_at_chance() {
    let data = blobs(4, 4, 3.0, 250, 7);
    let mut hits = 0.0;
    let mut total = 0.0;
    for seed in 0..10 {
        let mut net = mlp(&data, NormVariant::Js, &ShrinkPolicy::default(), seed);
        assert!(matches!(
            evaluate(&net, &data.train),
            Err(Error::NotCalibrated(_))
        ));
        calibrate(&mut net, &data.train, 32).unwrap();
        hits += evaluate(&net, &data.test).unwrap() * data.test.len() as f64;
        total += data.test.len() as f64;
    }
    let acc = hits / total;
    // Random nets are not independent of the data, so allow a wide band.
    let se = (0.25f64 * 0.75 / total).sqrt();
    assert!((acc - 0.25).abs() < 0.15 + 3.0 * se, "accuracy {acc}");
}

#[test]
fn overfits_ten_samples() {
    let data = blobs(2, 4, 0.5, 7, 8);
    let tiny = data.train.subset(&(0..10).collect::<Vec<_>>());
    let data = Dataset {
        classes: 2,
        test: tiny.clone(),
        train: tiny,
    };
    let spec = NetSpec::mlp(vec![32], Some(NormKind::Bn), NormVariant::Js);
    let mut net = ToyNet::build(&spec, [4, 1, 1], 2, &ShrinkPolicy::default(), 3).unwrap();
    let mut cfg = TrainConfig::new(10, 300, 0.1, 3);
    cfg.momentum = 0.9;
    train(&mut net, &data, &cfg).unwrap();
    assert_eq!(evaluate(&net, &data.train).unwrap(), 1.0);
}

#[test]
fn evaluation_is_pure() {
    let data = blobs(3, 4, 3.0, 20, 2);
    let mut net = mlp(&data, NormVariant::Js, &ShrinkPolicy::default(), 1);
    train(&mut net, &data, &TrainConfig::new(8, 1, 0.05, 0)).unwrap();
    let before = net.clone();
    let a = evaluate(&net, &data.test).unwrap();
    let b = evaluate(&net, &data.test).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(net, before);
    assert!(evaluate(&net, &data.test.subset(&[])).is_err());
}

#[test]
fn loss_decreases_for_every_variant() {
    let data = blobs(2, 2, 10.0, 50, 21);
    let cases = [
        (None, NormVariant::Js, ShrinkPolicy::default()),
        (
            Some(NormKind::Bn),
            NormVariant::Standard,
            ShrinkPolicy::none(),
        ),
        (Some(NormKind::Bn), NormVariant::Js, ShrinkPolicy::default()),
        (
            Some(NormKind::Bn),
            NormVariant::Js,
            ShrinkPolicy::positive_part(),
        ),
    ];
    for (norm, variant, policy) in cases {
        let spec = NetSpec::mlp(vec![8], norm, variant);
        let mut net = ToyNet::build(&spec, data.sample_shape(), 2, &policy, 2).unwrap();
        let m = train(&mut net, &data, &TrainConfig::new(16, 5, 0.02, 2)).unwrap();
        assert!(
            m.epochs[4].loss < m.epochs[0].loss,
            "{norm:?} {variant:?}: {:?}",
            m.epochs
        );
    }
}

#[test]
fn divergence_is_reported() {
    let data = blobs(2, 2, 10.0, 50, 21);
    let spec = NetSpec::mlp(vec![8], None, NormVariant::Js);
    let mut net =
        ToyNet::build(&spec, data.sample_shape(), 2, &ShrinkPolicy::default(), 2).unwrap();
    let mut cfg = TrainConfig::new(16, 50, 1e6, 2);
    cfg.momentum = 0.0;
    let err = train(&mut net, &data, &cfg).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
}

#[test]
fn lr_scaling_rule() {
    let mut cfg = TrainConfig::new(32, 1, 0.1, 0);
    assert_eq!(cfg.effective_lr(), 0.1);
    cfg.lr_scaling = true;
    assert_eq!(cfg.effective_lr(), 0.05);
    cfg.batch_size = 64;
    assert_eq!(cfg.effective_lr(), 0.1);
}

fn net_with_running(mean: Vec<f64>, var: Vec<f64>, count: u64) -> ToyNet {
    let data = blobs(2, 3, 1.0, 10, 1);
    let spec = NetSpec::mlp(vec![mean.len()], Some(NormKind::Bn), NormVariant::Js);
    let mut net =
        ToyNet::build(&spec, data.sample_shape(), 2, &ShrinkPolicy::default(), 0).unwrap();
    for layer in &mut net.layers {
        if let Layer::Norm(n) = layer {
            n.running = RunningStats {
                running_mean: mean.clone(),
                running_var: var.clone(),
                count,
                ..n.running.clone()
            };
        }
    }
    net
}

#[test]
fn histogram_spike_and_mass() {
    let net = net_with_running(vec![0.0; 5], vec![1.0, 2.0, 3.0, 4.0, 5.0], 1);
    let h = export_stats_histogram(&net, 4).unwrap();
    assert_eq!(h.len(), 1);
    let rm = &h[0].running_mean;
    assert_eq!(rm.edges, vec![-0.5, -0.25, 0.0, 0.25, 0.5]);
    assert_eq!(rm.counts, vec![0, 0, 5, 0]);
    assert_eq!(h[0].running_var.counts, vec![1, 1, 1, 2]);
    assert_eq!(h[0].mean_abs_running_mean, 0.0);
    assert_eq!(h[0].mean_running_var, 3.0);

    let one = export_stats_histogram(&net, 1).unwrap();
    assert_eq!(one[0].running_mean.counts, vec![5]);
    assert_eq!(one[0].running_var.counts, vec![5]);
    assert!(export_stats_histogram(&net, 0).is_err());
}

#[test]
fn histogram_needs_updates() {
    let net = net_with_running(vec![0.0; 3], vec![1.0; 3], 0);
    assert!(matches!(
        export_stats_histogram(&net, 3),
        Err(Error::NotCalibrated(_))
    ));
    let spec = NetSpec::mlp(vec![3], None, NormVariant::Js);
    let bare = ToyNet::build(&spec, [2, 1, 1], 2, &ShrinkPolicy::default(), 0).unwrap();
    assert!(export_stats_histogram(&bare, 3).is_err());
}

#[test]
fn csv_outputs() {
    let metrics = RunMetrics {
        epochs: vec![EpochMetrics {
            epoch: 1,
            loss: 0.5,
            train_acc: 0.75,
            test_acc: 1.0,
        }],
        penalty_steps: vec![],
        final_stats: vec![],
    };
    let mut buf = Vec::new();
    write_metrics_csv(&metrics, &mut buf).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "epoch,loss,train_acc,test_acc\n1,0.5,0.75,1\n"
    );

    let net = net_with_running(vec![0.0; 2], vec![1.0; 2], 1);
    let mut buf = Vec::new();
    write_histogram_csv(&export_stats_histogram(&net, 1).unwrap(), &mut buf).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "layer,kind,bin_lo,bin_hi,count\nnorm0,running_mean,-0.5,0.5,2\nnorm0,running_var,0.5,1.5,2\n"
    );
}
