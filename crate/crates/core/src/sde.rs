//! Time grids, start sets and offline Euler–Maruyama paths of the
//! uncontrolled diffusion `dX = μ dt + σ dB`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::math;
use crate::par::map_indexed;
use crate::problems::{ProblemSpec, StartKind};
use crate::rng::{self, Domain};

/// Partition `0 = t₀ < … < t_N = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub nodes: Vec<f64>,
    pub steps: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("time grid needs N >= 1".into()));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        let mut nodes: Vec<f64> = (0..=n).map(|k| k as f64 * horizon / n as f64).collect();
        nodes[n] = horizon;
        let steps = nodes.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(Self { horizon, nodes, steps })
    }

    /// Number of steps `N`.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// The start set `D₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct StartSet {
    pub kind: StartKind,
    pub d: usize,
    pub points: Vec<Vec<f64>>,
}

impl StartSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Uniform parameter grid on `[−1, 1]`.
pub fn s_grid(count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..count).map(|k| -1.0 + 2.0 * k as f64 / (count - 1) as f64).collect(),
    }
}

/// Point of a parametric start family at parameter `s`.
pub fn curve_point(kind: &StartKind, d: usize, s: f64) -> Result<Vec<f64>> {
    Ok(match kind {
        StartKind::S1 => {
            let mut x = vec![0.0; d];
            x[0] = s;
            x
        }
        StartKind::S2 => vec![s; d],
        StartKind::S3 => (1..=d)
            .map(|i| {
                let i = i as f64;
                s * math::sgn(math::sin(i)) + math::cos(i + PI * s)
            })
            .collect(),
        other => return Err(Error::InvalidArgument(format!("{other:?} is not a parametric curve"))),
    })
}

/// Builds `D₀` with `count` points. Unions split the count evenly across
/// their members (earlier members take the remainder).
pub fn build_start_set(kind: &StartKind, d: usize, count: usize, seed: u64) -> Result<StartSet> {
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    let points = start_points(kind, d, count, seed, 0)?;
    Ok(StartSet { kind: kind.clone(), d, points })
}

fn start_points(kind: &StartKind, d: usize, count: usize, seed: u64, salt: u64) -> Result<Vec<Vec<f64>>> {
    match kind {
        StartKind::S1 | StartKind::S2 | StartKind::S3 => {
            if count < 2 {
                return Err(Error::InvalidArgument("grid start sets need at least 2 points".into()));
            }
            s_grid(count).into_iter().map(|s| curve_point(kind, d, s)).collect()
        }
        StartKind::Union(parts) => {
            if parts.is_empty() {
                return Err(Error::InvalidArgument("empty start-set union".into()));
            }
            let k = parts.len();
            let mut out = Vec::with_capacity(count);
            for (i, p) in parts.iter().enumerate() {
                let share = count / k + usize::from(i < count % k);
                out.extend(start_points(p, d, share, seed, salt * 16 + i as u64 + 1)?);
            }
            Ok(out)
        }
        StartKind::Fixed(x) => {
            if x.len() != d {
                return Err(Error::InvalidArgument(format!("fixed start has dimension {}, expected {d}", x.len())));
            }
            Ok(vec![x.clone(); count.max(1)])
        }
        StartKind::Gaussian { center, variance } => {
            if center.len() != d || !(*variance >= 0.0) {
                return Err(Error::InvalidArgument("gaussian start needs a d-dimensional center and variance >= 0".into()));
            }
            let sd = math::sqrt(*variance);
            let mut r = rng::stream(seed, Domain::StartSet, salt);
            Ok((0..count.max(1))
                .map(|_| center.iter().map(|c| c + sd * rng::normal(&mut r)).collect())
                .collect())
        }
    }
}

/// `M` simulated paths. States are `[M][N+1][d]`, increments `[M][N][d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub grid: TimeGrid,
    pub d: usize,
    pub paths: usize,
    pub seed: u64,
    pub problem_code: u32,
    pub start_indices: Vec<u32>,
    pub states: Vec<f64>,
    pub increments: Vec<f64>,
}

impl PathBatch {
    pub fn steps(&self) -> usize {
        self.grid.len()
    }

    /// `X_n^{(m)}`.
    pub fn state(&self, m: usize, n: usize) -> &[f64] {
        let n1 = self.steps() + 1;
        let o = (m * n1 + n) * self.d;
        &self.states[o..o + self.d]
    }

    /// `ΔB_{n+1}^{(m)}`.
    pub fn increment(&self, m: usize, n: usize) -> &[f64] {
        let o = (m * self.steps() + n) * self.d;
        &self.increments[o..o + self.d]
    }

    /// Replays the Euler recursion and returns the largest deviation from the
    /// stored states (zero for a faithful batch).
    pub fn replay_error(&self, problem: &ProblemSpec) -> f64 {
        let mut worst: f64 = 0.0;
        let mut mu = vec![0.0; self.d];
        let mut sig = vec![0.0; self.d];
        for m in 0..self.paths {
            for n in 0..self.steps() {
                let t = self.grid.nodes[n];
                let x = self.state(m, n);
                problem.drift(t, x, &mut mu);
                problem.diffusion(t, x, &mut sig);
                let db = self.increment(m, n);
                let next = self.state(m, n + 1);
                for i in 0..self.d {
                    let e = x[i] + mu[i] * self.grid.steps[n] + sig[i] * db[i];
                    worst = worst.max((e - next[i]).abs());
                }
            }
        }
        worst
    }
}

/// Euler–Maruyama paths of the uncontrolled diffusion. Path `m` draws its
/// start index and all its increments from its own stream, so the batch is
/// independent of how paths are scheduled.
pub fn simulate_paths(problem: &ProblemSpec, grid: &TimeGrid, start: &StartSet, m: usize, seed: u64) -> Result<PathBatch> {
    if start.d != problem.d {
        return Err(Error::InvalidArgument(format!("start set dimension {} vs problem {}", start.d, problem.d)));
    }
    if start.is_empty() || m == 0 {
        return Err(Error::InvalidArgument("need a non-empty start set and at least one path".into()));
    }
    let d = problem.d;
    let n = grid.len();
    let per_path = map_indexed(m, |p| -> Result<(u32, Vec<f64>, Vec<f64>)> {
        let mut r = rng::stream(seed, Domain::Paths, p as u64);
        let idx = rng::index(&mut r, start.len());
        let mut states = Vec::with_capacity((n + 1) * d);
        let mut incs = Vec::with_capacity(n * d);
        states.extend_from_slice(&start.points[idx]);
        let mut mu = vec![0.0; d];
        let mut sig = vec![0.0; d];
        for k in 0..n {
            let t = grid.nodes[k];
            let dt = grid.steps[k];
            let sd = math::sqrt(dt);
            let x = &states[k * d..(k + 1) * d];
            problem.drift(t, x, &mut mu);
            problem.diffusion(t, x, &mut sig);
            let mut next = vec![0.0; d];
            for i in 0..d {
                let db = sd * rng::normal(&mut r);
                incs.push(db);
                next[i] = x[i] + mu[i] * dt + sig[i] * db;
                if !next[i].is_finite() {
                    return Err(Error::NonFiniteState { path: p, step: k + 1 });
                }
            }
            states.extend_from_slice(&next);
        }
        Ok((idx as u32, states, incs))
    });
    let mut batch = PathBatch {
        grid: grid.clone(),
        d,
        paths: m,
        seed,
        problem_code: problem.preset.map(|p| p.code()).unwrap_or(0),
        start_indices: Vec::with_capacity(m),
        states: Vec::with_capacity(m * (n + 1) * d),
        increments: Vec::with_capacity(m * n * d),
    };
    for r in per_path {
        let (idx, s, inc) = r?;
        batch.start_indices.push(idx);
        batch.states.extend(s);
        batch.increments.extend(inc);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{make_problem, Diffusion, Drift, Preset};

    #[test]
    fn grid_examples() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        assert_eq!(g.steps, vec![0.25; 4]);
        let g = TimeGrid::uniform(0.1, 100).unwrap();
        assert_eq!(g.nodes[100], 0.1);
        let g = TimeGrid::uniform(1.0, 1).unwrap();
        assert_eq!(g.nodes, vec![0.0, 1.0]);
        assert!(TimeGrid::uniform(1.0, 0).is_err());
    }

    #[test]
    fn start_set_examples() {
        let s2 = build_start_set(&StartKind::S2, 3, 3, 0).unwrap();
        assert_eq!(s2.points, vec![vec![-1.0; 3], vec![0.0; 3], vec![1.0; 3]]);
        assert_eq!(curve_point(&StartKind::S1, 2, 1.0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(curve_point(&StartKind::S3, 1, 0.0).unwrap(), vec![math::cos(1.0)]);
        let u = build_start_set(&StartKind::Union(vec![StartKind::S1, StartKind::S2]), 4, 11, 0).unwrap();
        assert_eq!(u.len(), 11);
    }

    #[test]
    fn frozen_and_drifting_paths() {
        let mut p = make_problem(Preset::Hjb1, 3, &[]).unwrap();
        p.drift = Drift::Constant(0.0);
        p.diffusion = Diffusion::Scalar(0.0);
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let start = build_start_set(&StartKind::S2, 3, 5, 0).unwrap();
        let b = simulate_paths(&p, &grid, &start, 6, 1).unwrap();
        for m in 0..6 {
            for n in 0..=8 {
                assert_eq!(b.state(m, n), b.state(m, 0));
            }
        }
        p.drift = Drift::Constant(1.0);
        let start = build_start_set(&StartKind::Fixed(vec![0.0; 3]), 3, 1, 0).unwrap();
        let b = simulate_paths(&p, &grid, &start, 2, 1).unwrap();
        for &v in b.state(1, 8) {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn replay_is_exact_and_deterministic() {
        let p = make_problem(Preset::AllenCahn, 3, &[]).unwrap();
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let start = build_start_set(&p.start, 3, 20, 0).unwrap();
        let a = simulate_paths(&p, &grid, &start, 30, 42).unwrap();
        let b = simulate_paths(&p, &grid, &start, 30, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.replay_error(&p), 0.0);
    }
}
