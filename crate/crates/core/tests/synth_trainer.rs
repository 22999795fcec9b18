use dgselect::metrics::{accuracy, KernelConfig};
use dgselect::selection::SelectionConfig;
use dgselect::synth::{
    generate_domains, run_experiment, train_classifier, Dataset, Mlp, SyntheticConfig, TrainConfig,
};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn agreement_by_class(d: &Dataset) -> [f64; 2] {
    let mut hits = [0usize; 2];
    let mut totals = [0usize; 2];
    for (row, &y) in d.features.rows().into_iter().zip(&d.labels) {
        totals[y] += 1;
        if (row[1] > 0.0) == (y == 1) {
            hits[y] += 1;
        }
    }
    [
        hits[0] as f64 / totals[0] as f64,
        hits[1] as f64 / totals[1] as f64,
    ]
}

#[test]
fn spurious_agreement_matches_configured_correlation() {
    let cfg = SyntheticConfig {
        seed: 7,
        n_per_domain: 500,
        ..Default::default()
    };
    let d = generate_domains(&cfg).unwrap();
    let mut domains: Vec<(&Dataset, f64)> =
        d.seen.iter().zip(cfg.seen_corrs.iter().copied()).collect();
    domains.push((&d.unseen, cfg.unseen_corr));
    for (ds, corr) in domains {
        for rate in agreement_by_class(ds) {
            assert!(
                (rate - corr).abs() <= 0.05,
                "{}: rate {rate} vs {corr}",
                ds.domain_id
            );
        }
    }
}

#[test]
fn half_correlation_carries_no_label_information() {
    let cfg = SyntheticConfig {
        n_per_domain: 20_000,
        seen_corrs: vec![0.5, 0.5],
        unseen_corr: 0.5,
        ..Default::default()
    };
    let d = generate_domains(&cfg).unwrap();
    let ds = &d.seen[0];
    let mut joint = [[0.0f64; 2]; 2];
    for (row, &y) in ds.features.rows().into_iter().zip(&ds.labels) {
        joint[y][usize::from(row[1] > 0.0)] += 1.0 / ds.len() as f64;
    }
    let py = [joint[0][0] + joint[0][1], joint[1][0] + joint[1][1]];
    let ps = [joint[0][0] + joint[1][0], joint[0][1] + joint[1][1]];
    let mut mi = 0.0;
    for y in 0..2 {
        for s in 0..2 {
            if joint[y][s] > 0.0 {
                mi += joint[y][s] * (joint[y][s] / (py[y] * ps[s])).ln();
            }
        }
    }
    assert!(mi < 1e-3, "mutual information {mi}");
}

fn small_train(lr: f64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        steps: 200,
        checkpoint_every: 50,
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_freezes_checkpoints() {
    let d = generate_domains(&SyntheticConfig {
        n_per_domain: 100,
        ..Default::default()
    })
    .unwrap();
    let run = train_classifier("frozen", &d, &small_train(0.0)).unwrap();
    let cps = &run.archive.runs()[0].checkpoints;
    assert_eq!(cps.len(), 4);
    for cp in &cps[1..] {
        assert_eq!(cp.batches, cps[0].batches);
        assert_eq!(cp.test_acc, cps[0].test_acc);
    }
}

#[test]
fn separable_smoke_reaches_high_validation_accuracy() {
    let d = generate_domains(&SyntheticConfig::separable_smoke(3)).unwrap();
    let tc = TrainConfig {
        learning_rate: 0.5,
        ..Default::default()
    };
    let run = train_classifier("smoke", &d, &tc).unwrap();
    let last = run.archive.runs()[0].checkpoints.last().unwrap();
    for b in &last.batches {
        let acc = accuracy(b.logits().view(), b.labels()).unwrap();
        assert!(acc > 0.95, "{}: {acc}", b.domain_id());
    }
}

#[test]
fn windowed_median_training_loss_does_not_increase() {
    let d = generate_domains(&SyntheticConfig::separable_smoke(3)).unwrap();
    let tc = TrainConfig {
        learning_rate: 0.5,
        ..Default::default()
    };
    let run = train_classifier("trend", &d, &tc).unwrap();
    let losses: Vec<f64> = run.train_losses.iter().map(|&(_, l)| l).collect();
    assert_eq!(losses.len(), 20);
    let medians: Vec<f64> = losses
        .windows(10)
        .map(|w| {
            let mut w = w.to_vec();
            w.sort_by(f64::total_cmp);
            (w[4] + w[5]) / 2.0
        })
        .collect();
    for pair in medians.windows(2) {
        assert!(pair[1] <= pair[0], "{medians:?}");
    }
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = Mlp::init(2, 5, 2, &mut rng);
    let x = Array2::from_shape_fn((10, 2), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
    let y: Vec<usize> = (0..10).map(|i| i % 2).collect();
    let (_, grad) = model.loss_and_grad(x.view(), &y);
    let analytic: Vec<Vec<f64>> = grad.layers().iter().map(|l| l.to_vec()).collect();
    let h = 1e-5;
    for (layer, g) in analytic.iter().enumerate() {
        let len = g.len();
        for idx in [0, len / 2, len - 1] {
            let orig = model.layers_mut()[layer][idx];
            model.layers_mut()[layer][idx] = orig + h;
            let up = model.loss(x.view(), &y);
            model.layers_mut()[layer][idx] = orig - h;
            let down = model.loss(x.view(), &y);
            model.layers_mut()[layer][idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (numeric - g[idx]).abs() / numeric.abs().max(g[idx].abs()).max(1e-8);
            assert!(
                rel < 1e-4,
                "layer {layer} idx {idx}: {numeric} vs {}",
                g[idx]
            );
        }
    }
}

#[test]
fn divergence_is_reported() {
    let d = generate_domains(&SyntheticConfig {
        n_per_domain: 100,
        ..Default::default()
    })
    .unwrap();
    let err = train_classifier("boom", &d, &small_train(f64::MAX)).unwrap_err();
    assert!(err.to_string().contains("diverged"), "{err}");
}

#[test]
fn experiment_is_deterministic() {
    let scfg = SyntheticConfig {
        n_per_domain: 100,
        ..Default::default()
    };
    let tcfg = small_train(0.1);
    let run = || {
        let e = run_experiment(
            &scfg,
            &tcfg,
            3,
            &SelectionConfig::default(),
            &KernelConfig::default(),
        )
        .unwrap();
        serde_json::to_string(&e.report).unwrap()
    };
    let a = run();
    assert_eq!(a, run());
    let e = run_experiment(
        &scfg,
        &tcfg,
        3,
        &SelectionConfig::default(),
        &KernelConfig::default(),
    )
    .unwrap();
    assert_eq!(e.report.trials.len(), 3);
    assert_eq!(e.records.len(), 12);
    assert_eq!(e.archive.runs().len(), 3);
    assert!(e.report.ours.test_acc.is_some());
}
