use trevsnn_core::engine::{
    backward_masked, backward_reversible, backward_stbp, loss_cross_entropy, ActivationLedger,
    BackwardOptions, GradientSet, Sgd, TemporalMask,
};
use trevsnn_core::network::{
    forward_full, ModelWeights, NetworkConfig, StageConfig, TemporalLinks,
};
use trevsnn_core::neuron::{NeuronParams, SpikeFn};
use trevsnn_core::{Real, Tensor};

fn toy(links: TemporalLinks, seed: u64) -> NetworkConfig {
    NetworkConfig {
        timesteps: 2,
        in_channels: 1,
        in_height: 6,
        in_width: 6,
        stages: vec![
            StageConfig {
                blocks: 1,
                channels: 4,
            },
            StageConfig {
                blocks: 1,
                channels: 8,
            },
        ],
        num_classes: 3,
        neuron: NeuronParams {
            spike_fn: SpikeFn::Sigmoid,
            tau_per_stage: vec![2.0, 3.0],
            ..NeuronParams::default()
        },
        temporal_links: links,
        init_alpha: 0.6,
        gain_init: 3.0,
        seed,
        ..NetworkConfig::default()
    }
}

fn batch<R: Real>(n: usize, cfg: &NetworkConfig, phase: f64) -> (Tensor<R>, Vec<usize>) {
    let x = Tensor::from_fn(&[n, cfg.in_channels, cfg.in_height, cfg.in_width], |i| {
        R::lit(((i as f64 * 0.73 + phase).sin() + 1.0) * 1.3)
    });
    (
        x,
        (0..n)
            .map(|i| (i + phase as usize) % cfg.num_classes)
            .collect(),
    )
}

fn loss(w: &ModelWeights<f64>, x: &Tensor<f64>, y: &[usize], cfg: &NetworkConfig) -> f64 {
    let (logits, _) = forward_full(x, w, cfg).unwrap();
    loss_cross_entropy(&logits, y, 0.0).unwrap().0
}

/// Checks every parameter entry against a four-point central difference.
fn finite_difference_check(cfg: &NetworkConfig) {
    let w = ModelWeights::<f64>::init(cfg).unwrap();
    let (x, y) = batch::<f64>(2, cfg, 0.4);
    let analytic = backward_stbp(
        &x,
        &y,
        &w,
        cfg,
        &mut ActivationLedger::new(),
        &BackwardOptions::default(),
    )
    .unwrap()
    .grads
    .named();
    let h = 1e-3;
    let mut worst = (0.0f64, String::new());
    let mut classes = std::collections::BTreeSet::new();
    for (name, grad) in &analytic {
        for (i, &g) in grad.iter().enumerate() {
            let at = |delta: f64| {
                let mut p = w.clone();
                p.visit_mut(|n, _, d| {
                    if n == name {
                        d[i] += delta;
                    }
                });
                loss(&p, &x, &y, cfg)
            };
            let fd = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
            let rel = (g - fd).abs() / (fd.abs() + 1e-8);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]: analytic {g:e} fd {fd:e}"));
            }
        }
        classes.insert(name.rsplit('.').next().unwrap().to_string());
        let kind = name
            .split('.')
            .find(|p| ["encoder", "dw", "pw", "down", "head"].contains(p));
        if let Some(k) = kind {
            classes.insert(k.to_string());
        }
        if name.starts_with("turn_on") {
            classes.insert("turn_on".into());
        }
    }
    for c in [
        "encoder", "dw", "pw", "down", "alpha", "turn_on", "head", "gain",
    ] {
        assert!(classes.contains(c), "parameter class {c} not covered");
    }
    assert!(
        worst.0 < 1e-3,
        "worst relative error {:e} at {}",
        worst.0,
        worst.1
    );
}

#[test]
fn stbp_matches_finite_differences_boundary_links() {
    finite_difference_check(&toy(TemporalLinks::Boundary, 7));
}

#[test]
fn stbp_matches_finite_differences_all_links() {
    finite_difference_check(&NetworkConfig {
        share_weights: true,
        ..toy(TemporalLinks::All, 9)
    });
}

fn equivalence_configs() -> Vec<NetworkConfig> {
    let base = NetworkConfig {
        neuron: NeuronParams::default(),
        gain_init: 5.0,
        ..toy(TemporalLinks::Boundary, 0)
    };
    vec![
        NetworkConfig {
            timesteps: 4,
            ..base.clone()
        },
        NetworkConfig {
            timesteps: 3,
            multi_level: false,
            stages: vec![
                StageConfig {
                    blocks: 2,
                    channels: 6,
                },
                StageConfig {
                    blocks: 1,
                    channels: 6,
                },
            ],
            ..base.clone()
        },
        NetworkConfig {
            timesteps: 4,
            in_height: 8,
            in_width: 8,
            stages: vec![
                StageConfig {
                    blocks: 1,
                    channels: 8,
                },
                StageConfig {
                    blocks: 0,
                    channels: 16,
                },
                StageConfig {
                    blocks: 1,
                    channels: 16,
                },
            ],
            neuron: NeuronParams {
                tau_per_stage: vec![2.0, 4.0, 1.5],
                ..NeuronParams::default()
            },
            grouped_width: true,
            ..base
        },
    ]
}

#[test]
fn reversible_equals_stbp_across_configs_and_seeds() {
    let opts = BackwardOptions::default();
    for (c, base) in equivalence_configs().into_iter().enumerate() {
        for seed in 0..10u64 {
            let cfg = NetworkConfig {
                seed,
                ..base.clone()
            };
            let w = ModelWeights::<f32>::init(&cfg).unwrap();
            let (x, y) = batch::<f32>(2, &cfg, seed as f64);
            let a = backward_stbp(&x, &y, &w, &cfg, &mut ActivationLedger::new(), &opts).unwrap();
            let mut ledger = ActivationLedger::new();
            let b = backward_reversible(&x, &y, &w, &cfg, &mut ledger, &opts).unwrap();
            let err = b.grads.max_rel_error(&a.grads);
            assert!(err < 1e-4, "config {c} seed {seed}: {err:e}");
            assert_eq!(a.loss, b.loss);
            assert_eq!(ledger.max_live_timesteps(), 1);
        }
    }
}

#[test]
fn reversible_equals_stbp_in_soft_spike_mode() {
    let cfg = toy(TemporalLinks::Boundary, 3);
    let w = ModelWeights::<f64>::init(&cfg).unwrap();
    let (x, y) = batch::<f64>(2, &cfg, 1.0);
    let opts = BackwardOptions::default();
    let a = backward_stbp(&x, &y, &w, &cfg, &mut ActivationLedger::new(), &opts).unwrap();
    let b = backward_reversible(&x, &y, &w, &cfg, &mut ActivationLedger::new(), &opts).unwrap();
    assert!(b.grads.max_rel_error(&a.grads) < 1e-10);
}

#[test]
fn masks_differ_on_fully_temporal_network() {
    let cfg = NetworkConfig {
        share_weights: true,
        neuron: NeuronParams::default(),
        gain_init: 5.0,
        timesteps: 4,
        ..toy(TemporalLinks::All, 2)
    };
    let w = ModelWeights::<f32>::init(&cfg).unwrap();
    let (x, y) = batch::<f32>(4, &cfg, 0.0);
    let opts = BackwardOptions::default();
    let mut l = ActivationLedger::new();
    let full = backward_stbp(&x, &y, &w, &cfg, &mut l, &opts).unwrap();
    let c1 = backward_masked(&x, &y, &w, &cfg, &mut l, &opts, TemporalMask::CASE1).unwrap();
    let c2 = backward_masked(&x, &y, &w, &cfg, &mut l, &opts, TemporalMask::CASE2).unwrap();
    assert_ne!(c1.grads, c2.grads);
    assert_ne!(full.grads, c1.grads);
    assert_eq!(c1.loss, c2.loss);
}

#[test]
fn surrogate_corruption_is_detected() {
    let cfg = NetworkConfig {
        neuron: NeuronParams::default(),
        gain_init: 5.0,
        ..toy(TemporalLinks::Boundary, 1)
    };
    let w = ModelWeights::<f32>::init(&cfg).unwrap();
    let (x, y) = batch::<f32>(2, &cfg, 0.0);
    let good = backward_stbp(
        &x,
        &y,
        &w,
        &cfg,
        &mut ActivationLedger::new(),
        &BackwardOptions::default(),
    )
    .unwrap();
    let bad_opts = BackwardOptions {
        surrogate_scale: 1.5,
        ..BackwardOptions::default()
    };
    let bad =
        backward_reversible(&x, &y, &w, &cfg, &mut ActivationLedger::new(), &bad_opts).unwrap();
    assert!(bad.grads.max_rel_error(&good.grads) > 1e-2);
}

fn train_losses(steps: usize) -> Vec<f32> {
    let cfg = NetworkConfig {
        neuron: NeuronParams::default(),
        gain_init: 5.0,
        ..toy(TemporalLinks::Boundary, 11)
    };
    let mut w = ModelWeights::<f32>::init(&cfg).unwrap();
    let mut opt = Sgd::new(0.05, 0.9);
    let mut ledger = ActivationLedger::new();
    (0..steps)
        .map(|step| {
            let (x, y) = batch::<f32>(4, &cfg, (step % 7) as f64);
            let r = backward_reversible(&x, &y, &w, &cfg, &mut ledger, &BackwardOptions::default())
                .unwrap();
            opt.step(&mut w, &r.grads).unwrap();
            r.loss
        })
        .collect()
}

#[test]
fn training_is_deterministic_for_100_steps() {
    let a = train_losses(100);
    let b = train_losses(100);
    assert_eq!(a, b);
    assert!(a.iter().all(|l| l.is_finite()));
}

#[test]
fn gradient_set_is_complete() {
    let cfg = toy(TemporalLinks::Boundary, 5);
    let w = ModelWeights::<f64>::init(&cfg).unwrap();
    let (x, y) = batch::<f64>(1, &cfg, 0.0);
    let r = backward_stbp(
        &x,
        &y,
        &w,
        &cfg,
        &mut ActivationLedger::new(),
        &BackwardOptions::default(),
    )
    .unwrap();
    let names: Vec<String> = r.grads.named().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, w.param_names());
    let check: GradientSet<f64> = GradientSet {
        grads: w.zeros_like(),
    };
    assert!(check.check_finite().is_ok());
}
