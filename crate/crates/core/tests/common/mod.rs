#![allow(dead_code)]

use std::collections::BTreeMap;

use dgselect::selection::{CheckpointRecord, RunRecord};
use dgselect::tradeoff::{Channel, DiscreteDGProblem, ProblemDefinition};
use ndarray::{Array2, ArrayView2};
use rand::Rng;

/// Textbook double loop over every sample pair.
pub fn naive_mmd(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, gammas: &[f64]) -> f64 {
    let k = |x: ndarray::ArrayView1<'_, f64>, y: ndarray::ArrayView1<'_, f64>| {
        let d: f64 = x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
        gammas.iter().map(|g| (-g * d).exp()).sum::<f64>()
    };
    let mean = |p: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>| {
        let mut s = 0.0;
        for i in 0..p.nrows() {
            for j in 0..q.nrows() {
                s += k(p.row(i), q.row(j));
            }
        }
        s / (p.nrows() * q.nrows()) as f64
    };
    (mean(a, a) + mean(b, b) - 2.0 * mean(a, b)).max(0.0)
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..scale))
}

pub fn random_simplex<R: Rng>(rng: &mut R, n: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| floor + rng.random::<f64>()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Small problem with strictly positive distributions, so the discrepancy is always finite.
pub fn random_problem<R: Rng>(rng: &mut R) -> DiscreteDGProblem {
    let n_x = rng.random_range(2..=4);
    let n_z = rng.random_range(2..=3);
    let n_y = rng.random_range(2..=3);
    let def = ProblemDefinition {
        n_x,
        n_z,
        n_y,
        p_s_x: random_simplex(rng, n_x, 0.05),
        p_u_x: random_simplex(rng, n_x, 0.05),
        label_s: (0..n_x).map(|_| random_simplex(rng, n_y, 0.05)).collect(),
        label_u: (0..n_x).map(|_| random_simplex(rng, n_y, 0.05)).collect(),
        classifier_g: (0..n_z).map(|_| rng.random_range(0..n_y)).collect(),
        loss_l: (0..n_y)
            .map(|i| {
                (0..n_y)
                    .map(|j| {
                        if i == j {
                            0.0
                        } else {
                            rng.random_range(0.1..1.0)
                        }
                    })
                    .collect()
            })
            .collect(),
    };
    DiscreteDGProblem::new(def).expect("random problem is valid")
}

pub fn random_channel<R: Rng>(rng: &mut R, n_x: usize, n_z: usize) -> Channel {
    Channel::new((0..n_x).map(|_| random_simplex(rng, n_z, 0.0)).collect())
        .expect("rows are stochastic")
}

/// One to four runs of 1 to 25 checkpoints with random metrics.
pub fn random_runs<R: Rng>(rng: &mut R) -> Vec<RunRecord> {
    let n_runs = rng.random_range(1..=4);
    (0..n_runs)
        .map(|r| {
            let run_id = format!("run-{r}");
            let n = rng.random_range(1..=25);
            let cps = (1..=n)
                .map(|k| CheckpointRecord {
                    run_id: run_id.clone(),
                    step: 50 * k as u64,
                    ce: rng.random_range(0.01..3.0),
                    mmd: rng.random_range(0.0..2.0),
                    acc: rng.random_range(0.0..=1.0),
                    test_acc: Some(rng.random_range(0.0..=1.0)),
                })
                .collect();
            RunRecord::new(run_id, BTreeMap::new(), cps).expect("sorted steps")
        })
        .collect()
}

/// Copies `runs` with ce and mmd multiplied by `c`.
pub fn rescale(runs: &[RunRecord], c: f64) -> Vec<RunRecord> {
    runs.iter()
        .map(|r| {
            let cps = r
                .checkpoints()
                .iter()
                .map(|cp| CheckpointRecord {
                    ce: cp.ce * c,
                    mmd: cp.mmd * c,
                    ..cp.clone()
                })
                .collect();
            RunRecord::new(r.run_id(), r.hparams().clone(), cps).unwrap()
        })
        .collect()
}
