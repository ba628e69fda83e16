//! Error metrics, convergence-rate fits and Monte-Carlo cost estimates.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::math;
use crate::networks::{space_time_row, ControlNet, NetworkBundle, ValueNet};
use crate::par::map_indexed;
use crate::problems::{Estimate, Mode, ProblemSpec};
use crate::rng::{self, Domain};
use crate::sde::{StartSet, TimeGrid};

/// One point of an error table.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub x: Vec<f64>,
    pub v_true: f64,
    pub v_pred: f64,
    /// Standard error of `v_true` (zero for analytic references).
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub re_l1: f64,
    pub re_linf: f64,
    pub rows: Vec<ErrorRow>,
}

/// `(Σ|v̂ − v| / Σ|v|, max|v̂ − v| / max|v|)`.
pub fn relative_error_pair(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::InvalidArgument("need equally many predictions and reference values".into()));
    }
    let (mut num1, mut den1, mut numi, mut deni) = (0.0, 0.0, 0.0_f64, 0.0_f64);
    for (p, t) in pred.iter().zip(truth) {
        let e = (p - t).abs();
        num1 += e;
        den1 += t.abs();
        numi = numi.max(e);
        deni = deni.max(t.abs());
    }
    if den1 == 0.0 {
        return Err(Error::DegenerateReference("reference vanishes on the whole evaluation set".into()));
    }
    Ok((num1 / den1, numi / deni))
}

/// Relative errors of `v_θ(0, ·)` on `points` against `reference`.
pub fn relative_errors<F>(value: &ValueNet, points: &[Vec<f64>], reference: F) -> Result<ErrorReport>
where
    F: Fn(&[f64]) -> Result<Estimate> + Sync,
{
    if points.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let truth = map_indexed(points.len(), |i| reference(&points[i]));
    let mut input = Matrix::zeros(points.len(), value.d() + 1);
    for (i, x) in points.iter().enumerate() {
        input.row_mut(i)[1..].copy_from_slice(x);
    }
    let pred = value.values(&input)?;
    let mut rows = Vec::with_capacity(points.len());
    for ((x, t), p) in points.iter().zip(truth).zip(&pred) {
        let t = t?;
        rows.push(ErrorRow { x: x.clone(), v_true: t.value, v_pred: *p, stderr: t.stderr });
    }
    let tv: Vec<f64> = rows.iter().map(|r| r.v_true).collect();
    let (re_l1, re_linf) = relative_error_pair(&pred, &tv)?;
    Ok(ErrorReport { re_l1, re_linf, rows })
}

/// `count` evenly spaced points of `set` (all of it when `count ≥ |set|`).
pub fn evaluation_subset(set: &StartSet, count: usize) -> Vec<Vec<f64>> {
    let n = set.len();
    if count >= n || count == 0 {
        return set.points.clone();
    }
    if count == 1 {
        return vec![set.points[0].clone()];
    }
    (0..count).map(|k| set.points[k * (n - 1) / (count - 1)].clone()).collect()
}

/// Least-squares line through `(log₁₀ N, log₁₀ RE)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log₁₀ units.
    pub residual: f64,
}

impl RateFit {
    /// Convergence order `−slope`.
    pub fn order(&self) -> f64 {
        -self.slope
    }
}

pub fn fit_convergence_rate(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 points, got {}", points.len())));
    }
    if let Some(&(n, e)) = points.iter().find(|(n, e)| !(*n > 0.0 && *e > 0.0) || !n.is_finite() || !e.is_finite()) {
        return Err(Error::InvalidArgument(format!("rate fit needs positive finite data, got ({n}, {e})")));
    }
    let xs: Vec<f64> = points.iter().map(|p| math::log10(p.0)).collect();
    let ys: Vec<f64> = points.iter().map(|p| math::log10(p.1)).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("rate fit needs at least two distinct N".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    Ok(RateFit { slope, intercept, residual: math::sqrt(ss / k) })
}

/// A feedback control `u(t, x)` evaluated on batches of `[t, x]` rows.
pub trait Policy: Sync {
    fn control_dim(&self) -> usize;
    fn controls(&self, rows: &Matrix) -> Result<Matrix>;
}

impl Policy for ControlNet {
    fn control_dim(&self) -> usize {
        self.m()
    }

    fn controls(&self, rows: &Matrix) -> Result<Matrix> {
        ControlNet::controls(self, rows)
    }
}

/// `u ≡ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZeroControl(pub usize);

impl Policy for ZeroControl {
    fn control_dim(&self) -> usize {
        self.0
    }

    fn controls(&self, rows: &Matrix) -> Result<Matrix> {
        Ok(Matrix::zeros(rows.rows, self.0))
    }
}

/// Rollouts advanced together per evaluation block.
const ROLLOUT_BLOCK: usize = 64;

/// `J(u) = 1 + E[∫ c₁|u|² dt + g(X_T)]` by Euler rollouts of
/// `dX = (b + 2u) dt + σ dB` started at `x0`. The running cost uses the
/// trapezoid rule on the grid. Rollout `k` draws from its own stream.
pub fn estimate_cost(
    problem: &ProblemSpec,
    policy: &dyn Policy,
    rollouts: usize,
    grid: &TimeGrid,
    x0: &[f64],
    seed: u64,
) -> Result<Estimate> {
    if problem.mode != Mode::Hjb || problem.control_dim() != problem.d {
        return Err(Error::Config(format!("problem `{}` is not a control problem", problem.name())));
    }
    if policy.control_dim() != problem.d || x0.len() != problem.d {
        return Err(Error::InvalidArgument("control and start state must have the problem dimension".into()));
    }
    if rollouts == 0 {
        return Err(Error::InvalidArgument("need at least one rollout".into()));
    }
    if (grid.horizon - problem.horizon).abs() > 0.0 {
        return Err(Error::InvalidArgument("grid horizon differs from the problem horizon".into()));
    }
    let blocks = rollouts.div_ceil(ROLLOUT_BLOCK);
    let costs = map_indexed(blocks, |b| rollout_block(problem, policy, grid, x0, seed, b, rollouts));
    let mut all = Vec::with_capacity(rollouts);
    for c in costs {
        all.extend(c?);
    }
    let n = all.len() as f64;
    let mut mean = 0.0;
    for (k, c) in all.iter().enumerate() {
        mean += (c - mean) / (k + 1) as f64;
    }
    let var = if all.len() > 1 { all.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(Estimate { value: 1.0 + mean, stderr: math::sqrt(var / n) })
}

fn rollout_block(
    problem: &ProblemSpec,
    policy: &dyn Policy,
    grid: &TimeGrid,
    x0: &[f64],
    seed: u64,
    block: usize,
    total: usize,
) -> Result<Vec<f64>> {
    let d = problem.d;
    let first = block * ROLLOUT_BLOCK;
    let count = ROLLOUT_BLOCK.min(total - first);
    let mut streams: Vec<_> = (0..count).map(|k| rng::stream(seed, Domain::Rollout, (first + k) as u64)).collect();
    let mut states = Matrix::zeros(count, d + 1);
    for k in 0..count {
        states.row_mut(k)[1..].copy_from_slice(x0);
    }
    let mut cost = vec![0.0; count];
    let mut u = policy.controls(&states)?;
    let mut mu = vec![0.0; d];
    let mut sig = vec![0.0; d];
    for n in 0..grid.len() {
        let t = grid.nodes[n];
        let dt = grid.steps[n];
        let sd = math::sqrt(dt);
        let left: Vec<f64> = (0..count).map(|k| problem.running_cost(u.row(k))).collect();
        for k in 0..count {
            let row = states.row_mut(k);
            problem.controlled_drift(u.row(k), &mut mu);
            problem.diffusion(t, &row[1..], &mut sig);
            for i in 0..d {
                row[1 + i] += mu[i] * dt + sig[i] * sd * rng::normal(&mut streams[k]);
            }
            row[0] = grid.nodes[n + 1];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteRollout { rollout: first + k });
            }
        }
        u = policy.controls(&states)?;
        for k in 0..count {
            cost[k] += 0.5 * (left[k] + problem.running_cost(u.row(k))) * dt;
        }
    }
    for k in 0..count {
        cost[k] += problem.terminal.value(&states.row(k)[1..]);
        if !cost[k].is_finite() {
            return Err(Error::NonFiniteRollout { rollout: first + k });
        }
    }
    Ok(cost)
}

/// States `(t_n, X_n)` at which control diagnostics are evaluated.
pub fn sample_states(batch: &crate::sde::PathBatch, count: usize, seed: u64) -> Matrix {
    let mut r = rng::stream(seed, Domain::Probe, 0);
    let mut out = Matrix::zeros(count, batch.d + 1);
    for k in 0..count {
        let m = rng::index(&mut r, batch.paths);
        let n = rng::index(&mut r, batch.steps());
        let row = out.row_mut(k);
        row[0] = batch.grid.nodes[n];
        row[1..].copy_from_slice(batch.state(m, n));
    }
    out
}

fn control_and_gradient(nets: &NetworkBundle, states: &Matrix) -> Result<(Matrix, Matrix)> {
    let control = nets.control.as_ref().ok_or_else(|| Error::Config("no control network".into()))?;
    Ok((control.controls(states)?, nets.value.gradients(states)?))
}

/// `Σ|u_α − κ*| / Σ|κ*|` over `states`, with `κ*` the explicit minimizer
/// built from `∂_x v_θ`.
pub fn minimizer_deviation(problem: &ProblemSpec, nets: &NetworkBundle, states: &Matrix) -> Result<f64> {
    let (u, z) = control_and_gradient(nets, states)?;
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..states.rows {
        let (kappa, _) = problem.explicit_hjb_minimizer(z.row(k))?;
        let diff: f64 = u.row(k).iter().zip(&kappa).map(|(a, b)| (a - b) * (a - b)).sum();
        num += math::sqrt(diff);
        den += math::sqrt(kappa.iter().map(|v| v * v).sum());
    }
    if den == 0.0 {
        return Err(Error::DegenerateReference("minimizer vanishes on every sampled state".into()));
    }
    Ok(num / den)
}

/// Fraction of `states` at which `H(u_α, ∂_x v_θ) ≤ H(κ', ∂_x v_θ)` for
/// every one of `alternatives` draws `κ' = u_α + spread · ξ`.
pub fn minimality_fraction(
    problem: &ProblemSpec,
    nets: &NetworkBundle,
    states: &Matrix,
    alternatives: usize,
    spread: f64,
    seed: u64,
) -> Result<f64> {
    let (u, z) = control_and_gradient(nets, states)?;
    let wins = map_indexed(states.rows, |k| -> Result<bool> {
        let mut r = rng::stream(seed, Domain::Probe, 1 + k as u64);
        let h = problem.hamiltonian(u.row(k), z.row(k))?;
        let mut alt = vec![0.0; u.cols];
        for _ in 0..alternatives {
            for (a, b) in alt.iter_mut().zip(u.row(k)) {
                *a = b + spread * rng::normal(&mut r);
            }
            if problem.hamiltonian(&alt, z.row(k))? < h {
                return Ok(false);
            }
        }
        Ok(true)
    });
    let mut count = 0usize;
    for w in wins {
        count += usize::from(w?);
    }
    Ok(count as f64 / states.rows.max(1) as f64)
}

/// `v_θ(0, x)` on the curve `x(s)` of a parametric start family.
pub fn curve_values(value: &ValueNet, points: &[Vec<f64>]) -> Result<Vec<f64>> {
    points.iter().map(|x| value.values(&space_time_row(0.0, x)).map(|v| v[0])).collect()
}
