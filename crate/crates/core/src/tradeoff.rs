//! The risk/discrepancy trade-off function on finite alphabets.
//!
//! A [`DiscreteDGProblem`] fixes input marginals for the seen and unseen
//! domains, the label conditionals `p(y|x)` of each, a classifier `g: Z → Y`
//! and a loss matrix. A [`Channel`] `q(z|x)` plays the role of the
//! representation. Labels and representations only interact through `x`, so
//!
//! ```text
//! p(y, z) = Σ_x p(x) · p(y|x) · q(z|x)
//! risk(q) = Σ_x Σ_z Σ_y p_s(x) · p_s(y|x) · q(z|x) · loss[g(z)][y]
//! D(q)    = KL(p_u(Y, Z) ‖ p_s(Y, Z))
//! T(Δ)    = min { D(q) : risk(q) ≤ Δ }
//! ```
//!
//! Risk is linear in `q` and KL is jointly convex, so `T` is non-increasing
//! and convex. Two independent routes compute it:
//!
//! * [`tradeoff_bruteforce`] enumerates a lattice over every row simplex.
//! * [`tradeoff_solver`] minimizes `D + μ·risk` by entropic mirror descent,
//!   finishing with damped Newton steps when descent stalls, and brackets
//!   each requested Δ between two multipliers, answering with the channel
//!   mixture whose risk is exactly Δ.
//!
//! Infinite discrepancy (unseen mass where the seen joint has none) is
//! represented by `f64::INFINITY` and flows through curves unchanged.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fmt_f64;

/// Row sums of probability vectors and channels must be within this of 1.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// A channel is feasible for Δ when its risk is at most `Δ + FEASIBILITY_TOL`.
pub const FEASIBILITY_TOL: f64 = 1e-12;
/// Lattice enumeration is refused beyond this many free channel parameters.
pub const MAX_FREE_PARAMETERS: usize = 4;
/// Lattice enumeration is refused beyond this many channels.
pub const MAX_GRID_CHANNELS: u128 = 50_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TradeoffError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("invalid channel: {0}")]
    InvalidChannel(String),
    #[error("channel is {got_x}×{got_z} but the problem needs {want_x}×{want_z}")]
    ChannelShape {
        want_x: usize,
        want_z: usize,
        got_x: usize,
        got_z: usize,
    },
    #[error("mixing weight {0} outside [0, 1]")]
    InvalidLambda(f64),
    #[error("deltas must be finite, non-negative and strictly increasing")]
    InvalidDeltas,
    #[error("grid step {0} must lie in (0, 0.5] and divide 1")]
    InvalidGridStep(f64),
    #[error(
        "brute-force guard: {free_parameters} free channel parameters and {channels} lattice \
         channels exceed the limits ({max_parameters} parameters, {max_channels} channels)"
    )]
    GuardExceeded {
        free_parameters: usize,
        channels: u128,
        max_parameters: usize,
        max_channels: u128,
    },
    #[error("no channel has finite discrepancy (unseen labels outside the seen label support)")]
    NoFiniteChannel,
    #[error("scalarized solve did not converge for mu={mu} within {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        mu: f64,
        iterations: usize,
        residual: f64,
    },
    #[error("need at least 3 finite feasible points, got {0}")]
    TooFewPoints(usize),
    #[error("problem file {path}: {message}")]
    ProblemFile { path: String, message: String },
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, TradeoffError>;

/// Serialized form of a problem; field names match the JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemDefinition {
    pub n_x: usize,
    pub n_z: usize,
    pub n_y: usize,
    pub p_s_x: Vec<f64>,
    pub p_u_x: Vec<f64>,
    pub label_s: Vec<Vec<f64>>,
    pub label_u: Vec<Vec<f64>>,
    pub classifier_g: Vec<usize>,
    pub loss_l: Vec<Vec<f64>>,
}

/// A validated finite domain-generalization problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProblemDefinition", into = "ProblemDefinition")]
pub struct DiscreteDGProblem {
    def: ProblemDefinition,
    // p_s(x)·p_s(y|x) and p_u(x)·p_u(y|x), n_x × n_y row-major.
    seen_xy: Vec<f64>,
    unseen_xy: Vec<f64>,
    // Expected seen-domain loss contributed by q(z|x) = 1, n_x × n_z row-major.
    risk_cost: Vec<f64>,
}

fn check_distribution(name: &str, v: &[f64], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(TradeoffError::InvalidProblem(format!(
            "{name} has length {} but {len} is required",
            v.len()
        )));
    }
    if v.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(TradeoffError::InvalidProblem(format!(
            "{name} has a negative or non-finite entry"
        )));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > STOCHASTIC_TOL {
        return Err(TradeoffError::InvalidProblem(format!(
            "{name} sums to {s}, not 1"
        )));
    }
    Ok(())
}

fn check_stochastic(name: &str, m: &[Vec<f64>], rows: usize, cols: usize) -> Result<()> {
    if m.len() != rows {
        return Err(TradeoffError::InvalidProblem(format!(
            "{name} has {} rows but {rows} are required",
            m.len()
        )));
    }
    for (i, row) in m.iter().enumerate() {
        check_distribution(&format!("{name}[{i}]"), row, cols)?;
    }
    Ok(())
}

impl TryFrom<ProblemDefinition> for DiscreteDGProblem {
    type Error = TradeoffError;

    fn try_from(def: ProblemDefinition) -> Result<Self> {
        Self::new(def)
    }
}

impl From<DiscreteDGProblem> for ProblemDefinition {
    fn from(p: DiscreteDGProblem) -> Self {
        p.def
    }
}

impl DiscreteDGProblem {
    pub fn new(def: ProblemDefinition) -> Result<Self> {
        let ProblemDefinition { n_x, n_z, n_y, .. } = def;
        if n_x == 0 || n_z == 0 || n_y == 0 {
            return Err(TradeoffError::InvalidProblem(
                "alphabet sizes must be positive".into(),
            ));
        }
        check_distribution("p_s_x", &def.p_s_x, n_x)?;
        check_distribution("p_u_x", &def.p_u_x, n_x)?;
        check_stochastic("label_s", &def.label_s, n_x, n_y)?;
        check_stochastic("label_u", &def.label_u, n_x, n_y)?;
        if def.classifier_g.len() != n_z {
            return Err(TradeoffError::InvalidProblem(format!(
                "classifier_g has length {} but n_z = {n_z}",
                def.classifier_g.len()
            )));
        }
        if let Some(&y) = def.classifier_g.iter().find(|&&y| y >= n_y) {
            return Err(TradeoffError::InvalidProblem(format!(
                "classifier_g maps to class {y}, outside 0..{n_y}"
            )));
        }
        if def.loss_l.len() != n_y || def.loss_l.iter().any(|r| r.len() != n_y) {
            return Err(TradeoffError::InvalidProblem(format!(
                "loss_l must be {n_y}×{n_y}"
            )));
        }
        if def
            .loss_l
            .iter()
            .flatten()
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return Err(TradeoffError::InvalidProblem(
                "loss_l entries must be finite and non-negative".into(),
            ));
        }

        let mut seen_xy = vec![0.0; n_x * n_y];
        let mut unseen_xy = vec![0.0; n_x * n_y];
        for x in 0..n_x {
            for y in 0..n_y {
                seen_xy[x * n_y + y] = def.p_s_x[x] * def.label_s[x][y];
                unseen_xy[x * n_y + y] = def.p_u_x[x] * def.label_u[x][y];
            }
        }
        let mut risk_cost = vec![0.0; n_x * n_z];
        for x in 0..n_x {
            for z in 0..n_z {
                let predicted = def.classifier_g[z];
                risk_cost[x * n_z + z] = (0..n_y)
                    .map(|y| seen_xy[x * n_y + y] * def.loss_l[predicted][y])
                    .sum();
            }
        }
        Ok(Self {
            def,
            seen_xy,
            unseen_xy,
            risk_cost,
        })
    }

    pub fn from_json_str(s: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TradeoffError::ProblemFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json_str(&text).map_err(|e| TradeoffError::ProblemFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn definition(&self) -> &ProblemDefinition {
        &self.def
    }

    pub fn n_x(&self) -> usize {
        self.def.n_x
    }

    pub fn n_z(&self) -> usize {
        self.def.n_z
    }

    pub fn n_y(&self) -> usize {
        self.def.n_y
    }

    /// Number of free channel parameters, `n_x · (n_z − 1)`.
    pub fn free_parameters(&self) -> usize {
        self.def.n_x * (self.def.n_z - 1)
    }

    /// Smallest risk any channel achieves: each row puts all mass on its cheapest `z`.
    pub fn min_risk(&self) -> f64 {
        let n_z = self.def.n_z;
        self.risk_cost
            .chunks(n_z)
            .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
            .sum()
    }

    fn check_channel(&self, channel: &Channel) -> Result<()> {
        if channel.n_x() != self.def.n_x || channel.n_z() != self.def.n_z {
            return Err(TradeoffError::ChannelShape {
                want_x: self.def.n_x,
                want_z: self.def.n_z,
                got_x: channel.n_x(),
                got_z: channel.n_z(),
            });
        }
        Ok(())
    }
}

/// The 2×2×2 reference problem: balanced inputs, seen labels equal to the
/// input, unseen labels flipped with probability 0.8, `g(z) = z`, 0-1 loss.
pub fn reference_problem() -> DiscreteDGProblem {
    DiscreteDGProblem::new(ProblemDefinition {
        n_x: 2,
        n_z: 2,
        n_y: 2,
        p_s_x: vec![0.5, 0.5],
        p_u_x: vec![0.5, 0.5],
        label_s: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        label_u: vec![vec![0.2, 0.8], vec![0.8, 0.2]],
        classifier_g: vec![0, 1],
        loss_l: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
    })
    .expect("reference problem is valid")
}

/// A stochastic representation `q(z|x)`, one row-stochastic row per input symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Channel {
    rows: Vec<Vec<f64>>,
}

impl TryFrom<Vec<Vec<f64>>> for Channel {
    type Error = TradeoffError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(rows)
    }
}

impl From<Channel> for Vec<Vec<f64>> {
    fn from(c: Channel) -> Self {
        c.rows
    }
}

impl Channel {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_z = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || n_z == 0 {
            return Err(TradeoffError::InvalidChannel(
                "channel must be non-empty".into(),
            ));
        }
        for (x, row) in rows.iter().enumerate() {
            if row.len() != n_z {
                return Err(TradeoffError::InvalidChannel(format!(
                    "row {x} has {} entries, expected {n_z}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(TradeoffError::InvalidChannel(format!(
                    "row {x} has a negative or non-finite entry"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > STOCHASTIC_TOL {
                return Err(TradeoffError::InvalidChannel(format!(
                    "row {x} sums to {s}"
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn uniform(n_x: usize, n_z: usize) -> Self {
        Self {
            rows: vec![vec![1.0 / n_z as f64; n_z]; n_x],
        }
    }

    /// `q(z|x) = 1` iff `z = map[x]`.
    pub fn deterministic(map: &[usize], n_z: usize) -> Result<Self> {
        let rows = map
            .iter()
            .map(|&z| {
                if z >= n_z {
                    return Err(TradeoffError::InvalidChannel(format!(
                        "target {z} ≥ n_z = {n_z}"
                    )));
                }
                let mut row = vec![0.0; n_z];
                row[z] = 1.0;
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows)
    }

    fn from_flat(flat: &[f64], n_z: usize) -> Self {
        Self {
            rows: flat.chunks(n_z).map(<[f64]>::to_vec).collect(),
        }
    }

    fn to_flat(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn n_x(&self) -> usize {
        self.rows.len()
    }

    pub fn n_z(&self) -> usize {
        self.rows[0].len()
    }
}

/// Entrywise `λ·q1 + (1−λ)·q2`.
pub fn mix_channels(q1: &Channel, q2: &Channel, lambda: f64) -> Result<Channel> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(TradeoffError::InvalidLambda(lambda));
    }
    if q1.n_x() != q2.n_x() || q1.n_z() != q2.n_z() {
        return Err(TradeoffError::ChannelShape {
            want_x: q1.n_x(),
            want_z: q1.n_z(),
            got_x: q2.n_x(),
            got_z: q2.n_z(),
        });
    }
    let rows = q1
        .rows
        .iter()
        .zip(&q2.rows)
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
                .collect()
        })
        .collect();
    Ok(Channel { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Seen,
    Unseen,
}

/// Joint `p(y, z)` as an `n_y × n_z` table.
pub fn joint_yz(
    problem: &DiscreteDGProblem,
    channel: &Channel,
    domain: Domain,
) -> Result<Vec<Vec<f64>>> {
    problem.check_channel(channel)?;
    let flat = joint_flat(problem, &channel.to_flat(), domain);
    Ok(flat.chunks(problem.n_z()).map(<[f64]>::to_vec).collect())
}

fn joint_flat(problem: &DiscreteDGProblem, q: &[f64], domain: Domain) -> Vec<f64> {
    let (n_x, n_y, n_z) = (problem.n_x(), problem.n_y(), problem.n_z());
    let xy = match domain {
        Domain::Seen => &problem.seen_xy,
        Domain::Unseen => &problem.unseen_xy,
    };
    let mut out = vec![0.0; n_y * n_z];
    joint_into(xy, q, n_x, n_y, n_z, &mut out);
    out
}

#[inline]
fn joint_into(xy: &[f64], q: &[f64], n_x: usize, n_y: usize, n_z: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for x in 0..n_x {
        for y in 0..n_y {
            let w = xy[x * n_y + y];
            if w == 0.0 {
                continue;
            }
            for z in 0..n_z {
                out[y * n_z + z] += w * q[x * n_z + z];
            }
        }
    }
}

/// Expected seen-domain loss of `g ∘ q`.
pub fn classification_risk(problem: &DiscreteDGProblem, channel: &Channel) -> Result<f64> {
    problem.check_channel(channel)?;
    Ok(risk_flat(problem, &channel.to_flat()))
}

#[inline]
fn risk_flat(problem: &DiscreteDGProblem, q: &[f64]) -> f64 {
    problem.risk_cost.iter().zip(q).map(|(c, v)| c * v).sum()
}

/// `KL(p ‖ q)` in nats with `0·ln(0/q) = 0` and `p > 0, q = 0 ⇒ +∞`. Clamped at 0.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            total += a * (a / b).ln();
        }
    }
    total.max(0.0)
}

/// `KL(p_u(Y, Z) ‖ p_s(Y, Z))` induced by the channel; `f64::INFINITY` when unbounded.
pub fn discrepancy_kl(problem: &DiscreteDGProblem, channel: &Channel) -> Result<f64> {
    problem.check_channel(channel)?;
    let q = channel.to_flat();
    Ok(kl_divergence(
        &joint_flat(problem, &q, Domain::Unseen),
        &joint_flat(problem, &q, Domain::Seen),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TradeoffPoint {
    pub delta: f64,
    /// `f64::INFINITY` when infeasible or when every feasible channel has unbounded discrepancy.
    pub t_value: f64,
    pub achieving_channel: Option<Channel>,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TradeoffCurve {
    pub points: Vec<TradeoffPoint>,
}

impl TradeoffCurve {
    /// Feasible points with finite value, as `(delta, t_value)`.
    pub fn finite_points(&self) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .filter(|p| p.feasible && p.t_value.is_finite())
            .map(|p| (p.delta, p.t_value))
            .collect()
    }

    /// CSV with header `delta,t_value,feasible`; infinite values are written as `inf`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "delta,t_value,feasible")?;
        for p in &self.points {
            writeln!(
                w,
                "{},{},{}",
                fmt_f64(p.delta),
                fmt_f64(p.t_value),
                p.feasible
            )?;
        }
        Ok(())
    }
}

fn check_deltas(deltas: &[f64]) -> Result<()> {
    if deltas.iter().any(|d| !(d.is_finite() && *d >= 0.0))
        || deltas.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(TradeoffError::InvalidDeltas);
    }
    Ok(())
}

/// Tracks, for every requested Δ, the best channel seen so far among feasible ones.
struct BestPerDelta<'a> {
    deltas: &'a [f64],
    best: Vec<Option<(f64, Vec<f64>)>>,
}

impl<'a> BestPerDelta<'a> {
    fn new(deltas: &'a [f64]) -> Self {
        Self {
            deltas,
            best: vec![None; deltas.len()],
        }
    }

    fn offer(&mut self, risk: f64, d: f64, q: &[f64]) {
        // Deltas are sorted, so feasibility is a suffix.
        let first = self
            .deltas
            .partition_point(|&delta| risk > delta + FEASIBILITY_TOL);
        for slot in &mut self.best[first..] {
            let better = match slot {
                None => true,
                Some((cur, _)) => d < *cur,
            };
            if better {
                *slot = Some((d, q.to_vec()));
            }
        }
    }

    fn finish(self, n_z: usize) -> TradeoffCurve {
        let points = self
            .deltas
            .iter()
            .zip(self.best)
            .map(|(&delta, best)| match best {
                Some((t, q)) => TradeoffPoint {
                    delta,
                    t_value: t,
                    achieving_channel: Some(Channel::from_flat(&q, n_z)),
                    feasible: true,
                },
                None => TradeoffPoint {
                    delta,
                    t_value: f64::INFINITY,
                    achieving_channel: None,
                    feasible: false,
                },
            })
            .collect();
        TradeoffCurve { points }
    }
}

/// All points of the simplex with `parts` coordinates that are multiples of `1/m`.
fn simplex_lattice(parts: usize, m: usize) -> Vec<Vec<f64>> {
    fn rec(
        parts: usize,
        remaining: usize,
        m: usize,
        cur: &mut Vec<usize>,
        out: &mut Vec<Vec<f64>>,
    ) {
        if parts == 1 {
            cur.push(remaining);
            out.push(cur.iter().map(|&k| k as f64 / m as f64).collect());
            cur.pop();
            return;
        }
        for k in (0..=remaining).rev() {
            cur.push(k);
            rec(parts - 1, remaining - k, m, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(parts, m, m, &mut Vec::with_capacity(parts), &mut out);
    out
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Evaluates every channel drawn from per-row candidate lists (a Cartesian product).
fn enumerate_product(
    problem: &DiscreteDGProblem,
    row_choices: &[Vec<f64>],
    deltas: &[f64],
) -> TradeoffCurve {
    let (n_x, n_y, n_z) = (problem.n_x(), problem.n_y(), problem.n_z());
    let mut best = BestPerDelta::new(deltas);
    let mut idx = vec![0usize; n_x];
    let mut q = vec![0.0; n_x * n_z];
    let mut ps = vec![0.0; n_y * n_z];
    let mut pu = vec![0.0; n_y * n_z];
    loop {
        for (x, &i) in idx.iter().enumerate() {
            q[x * n_z..(x + 1) * n_z].copy_from_slice(&row_choices[i]);
        }
        let risk = risk_flat(problem, &q);
        joint_into(&problem.seen_xy, &q, n_x, n_y, n_z, &mut ps);
        joint_into(&problem.unseen_xy, &q, n_x, n_y, n_z, &mut pu);
        best.offer(risk, kl_divergence(&pu, &ps), &q);

        // Odometer, last row fastest.
        let mut x = n_x;
        loop {
            if x == 0 {
                return best.finish(n_z);
            }
            x -= 1;
            idx[x] += 1;
            if idx[x] < row_choices.len() {
                break;
            }
            idx[x] = 0;
        }
    }
}

/// Exhaustive lattice search for `T(Δ)` at every requested Δ.
///
/// Each channel row ranges over the simplex points whose coordinates are
/// multiples of `grid_step`. Refused when the problem has more than
/// [`MAX_FREE_PARAMETERS`] free parameters or the lattice exceeds
/// [`MAX_GRID_CHANNELS`] channels. A Δ below every lattice channel's risk is
/// reported infeasible.
pub fn tradeoff_bruteforce(
    problem: &DiscreteDGProblem,
    deltas: &[f64],
    grid_step: f64,
) -> Result<TradeoffCurve> {
    check_deltas(deltas)?;
    if !(grid_step > 0.0 && grid_step <= 0.5) {
        return Err(TradeoffError::InvalidGridStep(grid_step));
    }
    let m = (1.0 / grid_step).round();
    if (m * grid_step - 1.0).abs() > 1e-9 {
        return Err(TradeoffError::InvalidGridStep(grid_step));
    }
    let m = m as usize;
    let per_row = binomial((m + problem.n_z() - 1) as u128, (problem.n_z() - 1) as u128);
    let channels = (0..problem.n_x()).fold(1u128, |acc, _| acc.saturating_mul(per_row));
    if problem.free_parameters() > MAX_FREE_PARAMETERS || channels > MAX_GRID_CHANNELS {
        return Err(TradeoffError::GuardExceeded {
            free_parameters: problem.free_parameters(),
            channels,
            max_parameters: MAX_FREE_PARAMETERS,
            max_channels: MAX_GRID_CHANNELS,
        });
    }
    let rows = simplex_lattice(problem.n_z(), m);
    Ok(enumerate_product(problem, &rows, deltas))
}

/// Like [`tradeoff_bruteforce`] but restricted to deterministic representations
/// (every row a vertex of the simplex). The resulting curve need not be convex.
pub fn tradeoff_bruteforce_deterministic(
    problem: &DiscreteDGProblem,
    deltas: &[f64],
) -> Result<TradeoffCurve> {
    check_deltas(deltas)?;
    let channels =
        (0..problem.n_x()).fold(1u128, |acc, _| acc.saturating_mul(problem.n_z() as u128));
    if channels > MAX_GRID_CHANNELS {
        return Err(TradeoffError::GuardExceeded {
            free_parameters: problem.free_parameters(),
            channels,
            max_parameters: MAX_FREE_PARAMETERS,
            max_channels: MAX_GRID_CHANNELS,
        });
    }
    let rows: Vec<Vec<f64>> = (0..problem.n_z())
        .map(|z| {
            let mut r = vec![0.0; problem.n_z()];
            r[z] = 1.0;
            r
        })
        .collect();
    Ok(enumerate_product(problem, &rows, deltas))
}

/// Mirror-descent and multiplier-search settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Initial multiplicative-weights step; halved while an update fails to
    /// decrease the objective and doubled after each accepted update, up to `max_step_size`.
    pub step_size: f64,
    pub max_step_size: f64,
    pub max_iters: usize,
    /// Converged when the objective improves by less than this over `window` iterations.
    pub tol: f64,
    pub window: usize,
    /// Mirror-descent iterations before switching to damped Newton steps
    /// when the window criterion has not been met; at or above `max_iters`
    /// the solver is pure mirror descent.
    pub polish_after: usize,
    pub newton_max_iters: usize,
    /// Newton phase stops once the stationarity residual falls below this.
    pub stationarity_tol: f64,
    /// Multiplier search stops once the bracketing risks differ by less than this.
    pub risk_resolution: f64,
    pub max_bisections: usize,
    /// Largest multiplier tried when bracketing a Δ close to the minimum risk.
    pub mu_max: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            max_step_size: 1e4,
            max_iters: 50_000,
            tol: 1e-10,
            window: 100,
            polish_after: 2_000,
            newton_max_iters: 500,
            stationarity_tol: 1e-10,
            risk_resolution: 1e-8,
            max_bisections: 80,
            mu_max: 2f64.powi(40),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarizedSolution {
    pub mu: f64,
    pub channel: Channel,
    pub risk: f64,
    pub discrepancy: f64,
    pub objective: f64,
    pub iterations: usize,
}

struct Workspace {
    ps: Vec<f64>,
    pu: Vec<f64>,
}

impl Workspace {
    fn objective(&mut self, problem: &DiscreteDGProblem, q: &[f64], mu: f64) -> (f64, f64, f64) {
        let (n_x, n_y, n_z) = (problem.n_x(), problem.n_y(), problem.n_z());
        joint_into(&problem.seen_xy, q, n_x, n_y, n_z, &mut self.ps);
        joint_into(&problem.unseen_xy, q, n_x, n_y, n_z, &mut self.pu);
        let d = kl_divergence(&self.pu, &self.ps);
        let r = risk_flat(problem, q);
        (d + mu * r, d, r)
    }

    /// Gradient of `KL(p_u ‖ p_s) + μ·risk` with respect to `q`; joints must be current.
    fn gradient(&self, problem: &DiscreteDGProblem, mu: f64, grad: &mut [f64]) {
        let (n_x, n_y, n_z) = (problem.n_x(), problem.n_y(), problem.n_z());
        for x in 0..n_x {
            for z in 0..n_z {
                let mut g = mu * problem.risk_cost[x * n_z + z];
                for y in 0..n_y {
                    let pu = self.pu[y * n_z + z];
                    let ps = self.ps[y * n_z + z];
                    if pu <= 0.0 || ps <= 0.0 {
                        continue;
                    }
                    let au = problem.unseen_xy[x * n_y + y];
                    let as_ = problem.seen_xy[x * n_y + y];
                    g += au * ((pu / ps).ln() + 1.0) - as_ * pu / ps;
                }
                grad[x * n_z + z] = g;
            }
        }
    }
}

impl Workspace {
    /// Hessian of the discrepancy with respect to `q`; the risk term is linear
    /// and adds nothing. Block diagonal over `z`, with
    /// `H[(x,z),(x',z)] = Σ_y p_u(y,z)·v(x,y,z)·v(x',y,z)` where
    /// `v = a_u(x,y)/p_u(y,z) − a_s(x,y)/p_s(y,z)`. Joints must be current.
    fn hessian(&self, problem: &DiscreteDGProblem, h: &mut DMatrix<f64>) {
        let (n_x, n_y, n_z) = (problem.n_x(), problem.n_y(), problem.n_z());
        h.fill(0.0);
        let mut v = vec![0.0; n_x];
        for z in 0..n_z {
            for y in 0..n_y {
                let pu = self.pu[y * n_z + z];
                let ps = self.ps[y * n_z + z];
                if pu <= 0.0 || ps <= 0.0 {
                    continue;
                }
                for (x, vx) in v.iter_mut().enumerate() {
                    *vx = problem.unseen_xy[x * n_y + y] / pu - problem.seen_xy[x * n_y + y] / ps;
                }
                for x in 0..n_x {
                    for x2 in 0..n_x {
                        h[(x * n_z + z, x2 * n_z + z)] += pu * v[x] * v[x2];
                    }
                }
            }
        }
    }
}

/// Residual accepted when the Newton phase can no longer change the objective.
const STALL_RESIDUAL: f64 = 1e-7;

/// Writes `q ⊙ exp(t·d/q)` with rows renormalized into `out`.
fn log_space_step(q: &[f64], d: &[f64], t: f64, n_z: usize, out: &mut [f64]) {
    for ((qr, dr), or) in q.chunks(n_z).zip(d.chunks(n_z)).zip(out.chunks_mut(n_z)) {
        let mut s = 0.0;
        for ((o, &qv), &dv) in or.iter_mut().zip(qr).zip(dr) {
            *o = (qv * (t * dv / qv).clamp(-700.0, 700.0).exp()).max(f64::MIN_POSITIVE);
            s += *o;
        }
        or.iter_mut().for_each(|v| *v /= s);
    }
}

/// Damped Newton refinement of `D + μ·risk` on the product of simplices.
///
/// Each step solves the equality-constrained quadratic model with Levenberg
/// damping `ρ·diag(1/q)` (the local entropy metric), applies it in log
/// coordinates so the channel stays positive, and backtracks on the Armijo
/// condition. Returns the number of steps taken, or the final residual if
/// the budget runs out.
fn newton_polish(
    problem: &DiscreteDGProblem,
    mu: f64,
    q: &mut Vec<f64>,
    ws: &mut Workspace,
    cfg: &SolverConfig,
) -> std::result::Result<usize, f64> {
    let (n_x, n_z) = (problem.n_x(), problem.n_z());
    let n = q.len();
    let mut h = DMatrix::zeros(n, n);
    let mut grad = vec![0.0; n];
    let mut cand = vec![0.0; n];
    let mut rho = 1e-4;
    let mut stalled = 0;
    let (mut obj, _, _) = ws.objective(problem, q, mu);
    for it in 0..cfg.newton_max_iters {
        ws.gradient(problem, mu, &mut grad);
        let residual = stationarity_residual(q, &grad, n_z);
        // Accepted steps that no longer change the objective mean the
        // remaining decrease is below one ulp.
        if residual <= cfg.stationarity_tol || (stalled >= 20 && residual <= STALL_RESIDUAL) {
            return Ok(it);
        }
        ws.hessian(problem, &mut h);
        let mut kkt = DMatrix::zeros(n + n_x, n + n_x);
        kkt.view_mut((0, 0), (n, n)).copy_from(&h);
        let mut rhs = DVector::zeros(n + n_x);
        for i in 0..n {
            kkt[(i, i)] += rho / q[i];
            kkt[(i, n + i / n_z)] = 1.0;
            kkt[(n + i / n_z, i)] = 1.0;
            rhs[i] = -grad[i];
        }
        let d: Vec<f64> = match kkt.lu().solve(&rhs) {
            Some(sol) => sol.iter().take(n).copied().collect(),
            None => {
                rho *= 10.0;
                continue;
            }
        };
        let slope: f64 = grad.iter().zip(&d).map(|(g, d)| g * d).sum();
        let mut accepted = false;
        if slope < 0.0 {
            let mut t = 1.0;
            for _ in 0..40 {
                log_space_step(q, &d, t, n_z, &mut cand);
                let (o, _, _) = ws.objective(problem, &cand, mu);
                if o.is_finite() && o <= obj + 1e-4 * t * slope {
                    std::mem::swap(q, &mut cand);
                    stalled = if o < obj { 0 } else { stalled + 1 };
                    obj = o;
                    accepted = true;
                    if t == 1.0 {
                        rho = (rho * 0.25).max(1e-14);
                    }
                    break;
                }
                t *= 0.5;
            }
        }
        if !accepted {
            ws.objective(problem, q, mu);
            rho *= 10.0;
            if rho > 1e12 {
                // No descent left at machine precision.
                return Ok(it);
            }
        }
    }
    ws.objective(problem, q, mu);
    ws.gradient(problem, mu, &mut grad);
    Err(stationarity_residual(q, &grad, n_z))
}

/// Largest per-row spread of the gradient weighted by the channel, zero at a stationary point.
fn stationarity_residual(q: &[f64], grad: &[f64], n_z: usize) -> f64 {
    q.chunks(n_z)
        .zip(grad.chunks(n_z))
        .map(|(qr, gr)| {
            let mean: f64 = qr.iter().zip(gr).map(|(a, b)| a * b).sum();
            qr.iter()
                .zip(gr)
                .map(|(a, b)| a * (b - mean).abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

fn multiplicative_step(q: &[f64], grad: &[f64], eta: f64, n_z: usize, out: &mut [f64]) {
    for ((qr, gr), or) in q.chunks(n_z).zip(grad.chunks(n_z)).zip(out.chunks_mut(n_z)) {
        let gmin = gr.iter().copied().fold(f64::INFINITY, f64::min);
        let mut s = 0.0;
        for ((o, &qv), &gv) in or.iter_mut().zip(qr).zip(gr) {
            let v = qv * (-(eta * (gv - gmin)).min(700.0)).exp();
            *o = v.max(f64::MIN_POSITIVE);
            s += *o;
        }
        or.iter_mut().for_each(|v| *v /= s);
    }
}

/// Minimizes `D(q) + μ·risk(q)` by entropic mirror descent from the uniform channel.
///
/// Runs that have not met the window criterion after `polish_after`
/// iterations finish with damped Newton steps; ill-conditioned
/// scalarizations (small μ near a flat discrepancy valley) otherwise crawl.
pub fn scalarized_solve(
    problem: &DiscreteDGProblem,
    mu: f64,
    cfg: &SolverConfig,
) -> Result<ScalarizedSolution> {
    let (n_y, n_z) = (problem.n_y(), problem.n_z());
    let mut q = Channel::uniform(problem.n_x(), n_z).to_flat();
    let mut ws = Workspace {
        ps: vec![0.0; n_y * n_z],
        pu: vec![0.0; n_y * n_z],
    };
    let (mut obj, _, _) = ws.objective(problem, &q, mu);
    if !obj.is_finite() {
        return Err(TradeoffError::NoFiniteChannel);
    }
    let mut grad = vec![0.0; q.len()];
    let mut cand = vec![0.0; q.len()];
    let mut history = std::collections::VecDeque::with_capacity(cfg.window + 1);
    history.push_back(obj);
    let mut iterations = 0;
    let mut converged = false;
    let mut eta = cfg.step_size;
    while iterations < cfg.max_iters.min(cfg.polish_after) {
        iterations += 1;
        // Joints in `ws` correspond to `q` here.
        ws.gradient(problem, mu, &mut grad);
        let mut accepted = None;
        for _ in 0..60 {
            multiplicative_step(&q, &grad, eta, n_z, &mut cand);
            let (o, _, _) = ws.objective(problem, &cand, mu);
            if o.is_finite() && o <= obj {
                accepted = Some(o);
                break;
            }
            eta *= 0.5;
        }
        match accepted {
            Some(o) => {
                std::mem::swap(&mut q, &mut cand);
                obj = o;
                eta = (eta * 2.0).min(cfg.max_step_size);
            }
            None => {
                // No descent direction left at machine precision.
                ws.objective(problem, &q, mu);
                converged = true;
                break;
            }
        }
        history.push_back(obj);
        if history.len() > cfg.window {
            let old = history.pop_front().expect("non-empty");
            if old - obj < cfg.tol {
                converged = true;
                break;
            }
        }
    }
    if !converged && cfg.polish_after >= cfg.max_iters {
        ws.gradient(problem, mu, &mut grad);
        return Err(TradeoffError::NonConvergence {
            mu,
            iterations,
            residual: stationarity_residual(&q, &grad, n_z),
        });
    }
    if !converged {
        match newton_polish(problem, mu, &mut q, &mut ws, cfg) {
            Ok(steps) => iterations += steps,
            Err(residual) => {
                return Err(TradeoffError::NonConvergence {
                    mu,
                    iterations: iterations + cfg.newton_max_iters,
                    residual,
                })
            }
        }
    }
    let (objective, discrepancy, risk) = ws.objective(problem, &q, mu);
    Ok(ScalarizedSolution {
        mu,
        channel: Channel::from_flat(&q, n_z),
        risk,
        discrepancy,
        objective,
        iterations,
    })
}

/// Memoized scalarized solves keyed by multiplier.
struct Sweep<'a> {
    problem: &'a DiscreteDGProblem,
    cfg: &'a SolverConfig,
    cache: BTreeMap<u64, ScalarizedSolution>,
}

impl Sweep<'_> {
    fn solve(&mut self, mu: f64) -> Result<ScalarizedSolution> {
        if let Some(s) = self.cache.get(&mu.to_bits()) {
            return Ok(s.clone());
        }
        let s = scalarized_solve(self.problem, mu, self.cfg)?;
        self.cache.insert(mu.to_bits(), s.clone());
        Ok(s)
    }
}

/// `T(Δ)` by a multiplier sweep over `D + μ·risk` with default settings.
pub fn tradeoff_solver(problem: &DiscreteDGProblem, deltas: &[f64]) -> Result<TradeoffCurve> {
    tradeoff_solver_with(problem, deltas, &SolverConfig::default())
}

/// `T(Δ)` by a multiplier sweep over `D + μ·risk`.
///
/// For each Δ the multiplier is bracketed on the grid `0, 2⁻¹⁰, …, mu_max`
/// and then bisected (geometrically) until the two scalarized solutions'
/// risks straddle Δ within `risk_resolution`. The reported value is the
/// discrepancy of their mixture with risk exactly Δ, so it is achieved by a
/// concrete channel and never below the true minimum.
pub fn tradeoff_solver_with(
    problem: &DiscreteDGProblem,
    deltas: &[f64],
    cfg: &SolverConfig,
) -> Result<TradeoffCurve> {
    check_deltas(deltas)?;
    if !discrepancy_kl(problem, &Channel::uniform(problem.n_x(), problem.n_z()))?.is_finite() {
        return Err(TradeoffError::NoFiniteChannel);
    }
    let mut sweep = Sweep {
        problem,
        cfg,
        cache: BTreeMap::new(),
    };
    let min_risk = problem.min_risk();
    let unconstrained = sweep.solve(0.0)?;
    let mut grid = vec![0.0];
    let mut mu = 2f64.powi(-10);
    while mu <= cfg.mu_max {
        grid.push(mu);
        mu *= 2.0;
    }

    let mut points = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        if delta + FEASIBILITY_TOL < min_risk {
            points.push(TradeoffPoint {
                delta,
                t_value: f64::INFINITY,
                achieving_channel: None,
                feasible: false,
            });
            continue;
        }
        if unconstrained.risk <= delta + FEASIBILITY_TOL {
            points.push(TradeoffPoint {
                delta,
                t_value: unconstrained.discrepancy,
                achieving_channel: Some(unconstrained.channel.clone()),
                feasible: true,
            });
            continue;
        }
        // Bracket: lo has risk above delta, hi at or below.
        let mut lo = unconstrained.clone();
        let mut hi = None;
        for &m in &grid[1..] {
            let s = sweep.solve(m)?;
            if s.risk <= delta + FEASIBILITY_TOL {
                hi = Some(s);
                break;
            }
            lo = s;
        }
        let Some(mut hi) = hi else {
            // Δ sits at the minimum risk and every channel approaching it has unbounded discrepancy.
            points.push(TradeoffPoint {
                delta,
                t_value: f64::INFINITY,
                achieving_channel: None,
                feasible: true,
            });
            continue;
        };
        for _ in 0..cfg.max_bisections {
            if lo.risk - hi.risk <= cfg.risk_resolution {
                break;
            }
            let mid = if lo.mu == 0.0 {
                hi.mu / 2.0
            } else {
                (lo.mu * hi.mu).sqrt()
            };
            if mid <= lo.mu || mid >= hi.mu {
                break;
            }
            let s = sweep.solve(mid)?;
            if s.risk <= delta + FEASIBILITY_TOL {
                hi = s;
            } else {
                lo = s;
            }
        }
        let (channel, t_value) = if hi.risk >= delta || lo.risk <= hi.risk {
            (hi.channel.clone(), hi.discrepancy)
        } else {
            // Weight on `hi` giving risk exactly Δ.
            let lambda = ((lo.risk - delta) / (lo.risk - hi.risk)).clamp(0.0, 1.0);
            let mixed = mix_channels(&hi.channel, &lo.channel, lambda)?;
            let d = discrepancy_kl(problem, &mixed)?;
            // Convexity makes the mixture no worse than the chord; keep the better endpoint if rounding says otherwise.
            if d <= hi.discrepancy {
                (mixed, d)
            } else {
                (hi.channel.clone(), hi.discrepancy)
            }
        };
        points.push(TradeoffPoint {
            delta,
            t_value,
            achieving_channel: Some(channel),
            feasible: true,
        });
    }
    Ok(TradeoffCurve { points })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PropertyCheck {
    pub passed: bool,
    /// Largest violation found (≤ 0 means none); compared against the tolerance.
    pub worst_violation: f64,
    /// Index into the usable points where the worst violation starts.
    pub at_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShapeReport {
    pub monotone: PropertyCheck,
    pub convex: PropertyCheck,
    pub points_used: usize,
}

impl ShapeReport {
    pub fn passed(&self) -> bool {
        self.monotone.passed && self.convex.passed
    }
}

/// Checks that a sampled curve is non-increasing and convex up to the given tolerances.
///
/// Only feasible points with finite value are used. Monotonicity requires
/// `t[i+1] ≤ t[i] + tol_mono`; convexity requires successive secant slopes to
/// be non-decreasing within `tol_convex`.
pub fn check_monotone_convex(
    curve: &TradeoffCurve,
    tol_mono: f64,
    tol_convex: f64,
) -> Result<ShapeReport> {
    let pts = curve.finite_points();
    if pts.len() < 3 {
        return Err(TradeoffError::TooFewPoints(pts.len()));
    }
    let (mono_worst, mono_at) = pts
        .windows(2)
        .enumerate()
        .map(|(i, w)| (w[1].1 - w[0].1, i))
        .fold(
            (f64::NEG_INFINITY, 0),
            |acc, v| if v.0 > acc.0 { v } else { acc },
        );
    let slopes: Vec<f64> = pts
        .windows(2)
        .map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0))
        .collect();
    let (conv_worst, conv_at) = slopes
        .windows(2)
        .enumerate()
        .map(|(i, s)| (s[0] - s[1], i))
        .fold(
            (f64::NEG_INFINITY, 0),
            |acc, v| if v.0 > acc.0 { v } else { acc },
        );
    Ok(ShapeReport {
        monotone: PropertyCheck {
            passed: mono_worst <= tol_mono,
            worst_violation: mono_worst,
            at_index: mono_at,
        },
        convex: PropertyCheck {
            passed: conv_worst <= tol_convex,
            worst_violation: conv_worst,
            at_index: conv_at,
        },
        points_used: pts.len(),
    })
}
