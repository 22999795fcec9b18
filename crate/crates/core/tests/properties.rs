mod common;

use common::{naive_mmd, random_channel, random_matrix, random_problem, random_runs, rescale};
use dgselect::ingest::{self, ArchiveBuilder};
use dgselect::metrics::{self, FeatureBatch, KernelConfig};
use dgselect::selection::{
    self, percentile_filter, percentile_window, CheckpointRecord, SelectionConfig,
};
use dgselect::tradeoff::{
    self, classification_risk, discrepancy_kl, joint_yz, mix_channels, Domain,
};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ce_order(a: &CheckpointRecord, b: &CheckpointRecord) -> std::cmp::Ordering {
    a.ce.total_cmp(&b.ce)
        .then(a.step.cmp(&b.step))
        .then(a.run_id.cmp(&b.run_id))
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(128) })]

    #[test]
    fn mmd_of_a_batch_with_itself_is_zero(seed: u64, n in 1usize..30, d in 1usize..6) {
        let a = random_matrix(&mut rng(seed), n, d, 3.0);
        let v = metrics::mmd_features(a.view(), a.view(), &KernelConfig::default()).unwrap();
        prop_assert!(v.abs() <= 1e-9, "{}", v);
    }

    #[test]
    fn mmd_matches_double_loop_and_is_symmetric(seed: u64, n in 1usize..=4, m in 1usize..=4, d in 1usize..4) {
        let mut r = rng(seed);
        let a = random_matrix(&mut r, n, d, 2.0);
        let b = random_matrix(&mut r, m, d, 2.0);
        let cfg = KernelConfig::default();
        let ab = metrics::mmd_features(a.view(), b.view(), &cfg).unwrap();
        let ba = metrics::mmd_features(b.view(), a.view(), &cfg).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((ab - naive_mmd(a.view(), b.view(), cfg.gammas())).abs() <= 1e-12);
    }

    #[test]
    fn pairwise_mmd_ignores_domain_order(seed: u64, k in 2usize..5) {
        let mut r = rng(seed);
        let batches: Vec<FeatureBatch> = (0..k)
            .map(|i| {
                let n = r.random_range(1..8);
                FeatureBatch::new(
                    format!("d{i}"),
                    random_matrix(&mut r, n, 3, 1.0),
                    random_matrix(&mut r, n, 2, 1.0),
                    (0..n).map(|j| j % 2).collect(),
                )
                .unwrap()
            })
            .collect();
        let cfg = KernelConfig::default();
        let fwd = metrics::pairwise_domain_mmd(&batches, &cfg).unwrap();
        let rev: Vec<FeatureBatch> = batches.iter().rev().cloned().collect();
        prop_assert!((fwd - metrics::pairwise_domain_mmd(&rev, &cfg).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_row_shifts(seed: u64, n in 1usize..20, k in 2usize..8) {
        let mut r = rng(seed);
        let logits = random_matrix(&mut r, n, k, 10.0);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let mut shifted = logits.clone();
        for mut row in shifted.rows_mut() {
            let c = r.random_range(-100.0..100.0);
            row.mapv_inplace(|v| v + c);
        }
        let a = metrics::cross_entropy(logits.view(), &labels).unwrap();
        let b = metrics::cross_entropy(shifted.view(), &labels).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-9);
        let acc = metrics::accuracy(logits.view(), &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn percentile_filter_is_a_nonempty_ce_sorted_window(seed: u64, lo in 0.0f64..1.0, width in 0.0f64..1.0) {
        let runs = random_runs(&mut rng(seed));
        let cfg = SelectionConfig { pct_low: lo, pct_high: (lo + width).min(1.0), ..Default::default() };
        for run in &runs {
            let kept = percentile_filter(run.checkpoints(), &cfg).unwrap();
            let mut sorted = run.checkpoints().to_vec();
            sorted.sort_by(ce_order);
            let (a, b) = percentile_window(sorted.len(), cfg.pct_low, cfg.pct_high);
            prop_assert!(!kept.is_empty());
            prop_assert_eq!(&kept[..], &sorted[a - 1..b]);
        }
    }

    #[test]
    fn widening_the_window_keeps_survivors(seed: u64, lo in 0.0f64..0.5, hi in 0.5f64..1.0, extra in 0.0f64..0.5) {
        let runs = random_runs(&mut rng(seed));
        let narrow = SelectionConfig { pct_low: lo, pct_high: hi, ..Default::default() };
        let wide = SelectionConfig { pct_high: (hi + extra).min(1.0), ..narrow };
        for run in &runs {
            let a = percentile_filter(run.checkpoints(), &narrow).unwrap();
            let b = percentile_filter(run.checkpoints(), &wide).unwrap();
            for cp in &a {
                prop_assert!(b.contains(cp));
            }
        }
    }

    #[test]
    fn ours_picks_the_minimum_loss_survivor(seed: u64, alpha in 0.0f64..=1.0) {
        let runs = random_runs(&mut rng(seed));
        let cfg = SelectionConfig { alpha, ..Default::default() };
        let res = selection::select_ours(&runs, &cfg).unwrap();
        let chosen = res.chosen_record(&runs).unwrap();
        let mut best = f64::INFINITY;
        let mut survived = false;
        for run in &runs {
            for cp in percentile_filter(run.checkpoints(), &cfg).unwrap() {
                best = best.min(selection::validation_loss(cp.ce, cp.mmd, &cfg).unwrap());
                survived |= cp.key() == res.chosen;
            }
        }
        prop_assert!(survived);
        prop_assert_eq!(res.criterion_value, best);
        prop_assert_eq!(selection::validation_loss(chosen.ce, chosen.mmd, &cfg).unwrap(), best);
    }

    #[test]
    fn ce_only_full_window_is_argmin_ce(seed: u64) {
        let runs = random_runs(&mut rng(seed));
        let cfg = SelectionConfig::unfiltered(0.0, 1.0);
        let res = selection::select_ours(&runs, &cfg).unwrap();
        let best = runs.iter().flat_map(|r| r.checkpoints()).min_by(|a, b| ce_order(a, b)).unwrap();
        prop_assert_eq!(res.chosen, best.key());
    }

    #[test]
    fn power_of_two_rescaling_keeps_the_choice(seed: u64, k in -20i32..20) {
        let runs = random_runs(&mut rng(seed));
        let cfg = SelectionConfig::default();
        let a = selection::select_ours(&runs, &cfg).unwrap();
        let b = selection::select_ours(&rescale(&runs, 2f64.powi(k)), &cfg).unwrap();
        prop_assert_eq!(a.chosen, b.chosen);
    }

    #[test]
    fn traditional_is_argmax_accuracy(seed: u64) {
        let runs = random_runs(&mut rng(seed));
        let res = selection::select_traditional(&runs).unwrap();
        let best = runs.iter().flat_map(|r| r.checkpoints()).map(|c| c.acc).fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(res.chosen_record(&runs).unwrap().acc, best);
    }

    #[test]
    fn metrics_csv_round_trips_exactly(seed: u64) {
        let runs = random_runs(&mut rng(seed));
        let records: Vec<CheckpointRecord> = runs.iter().flat_map(|r| r.checkpoints().iter().cloned()).collect();
        let mut buf = Vec::new();
        ingest::write_metrics_csv_to(&records, &mut buf).unwrap();
        prop_assert_eq!(ingest::read_metrics_csv_from(&buf[..]).unwrap(), records);
    }

    #[test]
    fn jsonl_archive_round_trips_exactly(seed: u64, steps in 1u64..4, domains in 2usize..4) {
        let mut r = rng(seed);
        let mut b = ArchiveBuilder::new();
        for step in 1..=steps {
            for d in 0..domains {
                let n = r.random_range(1..6);
                let batch = FeatureBatch::new(
                    format!("dom-{d}"),
                    random_matrix(&mut r, n, 3, 1e3),
                    random_matrix(&mut r, n, 2, 1e-3),
                    (0..n).map(|_| r.random_range(0..2)).collect(),
                )
                .unwrap();
                b.push("run", step * 10, Some(0.5), batch).unwrap();
            }
        }
        let archive = b.finish().unwrap();
        let mut buf = Vec::new();
        archive.write_jsonl(&mut buf).unwrap();
        prop_assert_eq!(ingest::parse_checkpoint_jsonl(&buf[..]).unwrap(), archive);
    }

    #[test]
    fn risk_is_linear_and_discrepancy_convex_under_mixing(seed: u64, lambda in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let p = random_problem(&mut r);
        let q1 = random_channel(&mut r, p.n_x(), p.n_z());
        let q2 = random_channel(&mut r, p.n_x(), p.n_z());
        let mix = mix_channels(&q1, &q2, lambda).unwrap();
        let (r1, r2, rm) = (
            classification_risk(&p, &q1).unwrap(),
            classification_risk(&p, &q2).unwrap(),
            classification_risk(&p, &mix).unwrap(),
        );
        prop_assert!((rm - (lambda * r1 + (1.0 - lambda) * r2)).abs() <= 1e-12);
        let (d1, d2, dm) = (
            discrepancy_kl(&p, &q1).unwrap(),
            discrepancy_kl(&p, &q2).unwrap(),
            discrepancy_kl(&p, &mix).unwrap(),
        );
        prop_assert!(dm <= lambda * d1 + (1.0 - lambda) * d2 + 1e-9);
        prop_assert!(rm + 1e-12 >= p.min_risk());
    }

    #[test]
    fn joints_are_distributions(seed: u64) {
        let mut r = rng(seed);
        let p = random_problem(&mut r);
        let q = random_channel(&mut r, p.n_x(), p.n_z());
        for dom in [Domain::Seen, Domain::Unseen] {
            let j = joint_yz(&p, &q, dom).unwrap();
            let total: f64 = j.iter().flatten().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(j.iter().flatten().all(|&v| v >= 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(24) })]

    #[test]
    fn solver_curves_are_non_increasing_and_convex(seed: u64) {
        let mut r = rng(seed);
        let p = random_problem(&mut r);
        let lo = p.min_risk();
        let hi = classification_risk(&p, &tradeoff::Channel::uniform(p.n_x(), p.n_z())).unwrap();
        prop_assume!(hi - lo > 1e-3);
        let deltas: Vec<f64> = (1..=8).map(|k| lo + (hi - lo) * k as f64 / 8.0).collect();
        let curve = tradeoff::tradeoff_solver(&p, &deltas).unwrap();
        let report = tradeoff::check_monotone_convex(&curve, 1e-9, 1e-6).unwrap();
        prop_assert!(report.passed(), "{:?}", report);
        for pt in &curve.points {
            let ch = pt.achieving_channel.as_ref().unwrap();
            prop_assert!(classification_risk(&p, ch).unwrap() <= pt.delta + 1e-9);
            prop_assert!((discrepancy_kl(&p, ch).unwrap() - pt.t_value).abs() <= 1e-12);
        }
    }

    #[test]
    fn solver_is_never_worse_than_the_lattice(seed: u64) {
        let mut r = rng(seed);
        let mut def = random_problem(&mut r).definition().clone();
        def.n_x = 2;
        def.n_z = 2;
        def.p_s_x.truncate(2);
        def.p_u_x.truncate(2);
        let (s, u) = (def.p_s_x.iter().sum::<f64>(), def.p_u_x.iter().sum::<f64>());
        def.p_s_x.iter_mut().for_each(|v| *v /= s);
        def.p_u_x.iter_mut().for_each(|v| *v /= u);
        def.label_s.truncate(2);
        def.label_u.truncate(2);
        def.classifier_g.truncate(2);
        let p = tradeoff::DiscreteDGProblem::new(def).unwrap();
        let lo = p.min_risk();
        let hi = classification_risk(&p, &tradeoff::Channel::uniform(2, 2)).unwrap();
        prop_assume!(hi - lo > 1e-2);
        let deltas: Vec<f64> = (1..=5).map(|k| lo + (hi - lo) * k as f64 / 5.0).collect();
        let brute = tradeoff::tradeoff_bruteforce(&p, &deltas, 0.005).unwrap();
        let solved = tradeoff::tradeoff_solver(&p, &deltas).unwrap();
        for (b, s) in brute.points.iter().zip(&solved.points) {
            prop_assert!(s.t_value <= b.t_value + 1e-9, "delta {}: solver {} lattice {}", b.delta, s.t_value, b.t_value);
            prop_assert!(b.t_value - s.t_value <= 5e-2, "delta {}: solver {} lattice {}", b.delta, s.t_value, b.t_value);
        }
    }
}

#[test]
fn uniform_logits_give_log_k() {
    for k in 2..=10 {
        let logits = Array2::from_elem((3, k), 0.7);
        let ce = metrics::cross_entropy(logits.view(), &[0, k - 1, 1]).unwrap();
        assert!((ce - (k as f64).ln()).abs() <= 1e-9);
    }
}
