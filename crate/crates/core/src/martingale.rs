//! Martingale increments, the projection statistic `G` and the loss.
//!
//! For a minibatch of paths `M_i` the index set is `A = {0..N−1} × M_i`. With
//! the Hamiltonian (HJB mode) or source (parabolic mode) sampled along each
//! path, the trapezoid increment is
//!
//! ```text
//! ΔM_{n+1} = v(t_{n+1}, X_{n+1}) − v(t_n, X_n) + ½ (H_n + H_{n+1}) Δt_n
//! ```
//!
//! which is a martingale increment (up to discretization) exactly when `v`
//! solves `∂_t v + 𝓛 v + H = 0`. The loss is
//! `L = |A|⁻¹ Σ H_n Δt_n + λ |G|²` with `G = |A|⁻¹ Σ ρ(t_n, X_n) ΔM_{n+1} Δt_n`.
//!
//! Evaluation is split into fixed chunks of [`CHUNK_PATHS`] whole paths. Each
//! chunk records its own tape; chunk partial sums are combined in chunk order,
//! so results do not depend on how chunks are scheduled. Because `L` depends
//! on all chunks only through the `r`-vector `G` and plain sums, a chunk's
//! contribution to `∇L` is obtained by seeding its tape with
//! `∂L/∂w = 2λ|A|⁻¹ ρ·G` on the rows `w = ΔM Δt` (and the matching seeds on
//! `H Δt`, `ρ` and the penalty rows) once the global `G` is known.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{affine, gemm_acc, Activation, Matrix, MlpVars, Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::networks::{NetworkBundle, TestNet};
use crate::par::map_indexed;
use crate::problems::{ControlSet, Mode, ProblemSpec};
use crate::sde::PathBatch;

/// Paths per evaluation chunk. Fixed so that reductions are schedule free.
pub const CHUNK_PATHS: usize = 16;

/// Which parameter groups a tape tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Trainables {
    pub alpha: bool,
    pub theta: bool,
    pub eta: bool,
}

impl Trainables {
    pub const NONE: Trainables = Trainables { alpha: false, theta: false, eta: false };
    pub const ALL: Trainables = Trainables { alpha: true, theta: true, eta: true };
}

/// Estimator of `|E G|²` used in the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Estimator {
    /// `|G|²` over the whole minibatch.
    #[default]
    Plain,
    /// `G_even · G_odd`, the product of `G` over even and odd chunks.
    Split,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Plain => "plain",
            Estimator::Split => "split",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "plain" => Some(Estimator::Plain),
            "split" => Some(Estimator::Split),
            _ => None,
        }
    }
}

/// Weights of `L = w_H · Hamilt + λ |G|² + w_P · penalty`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub hamiltonian: f64,
    pub lambda: f64,
    pub penalty: f64,
    pub estimator: Estimator,
}

impl Objective {
    pub fn hjb(lambda: f64, penalty: f64) -> Self {
        Self { hamiltonian: 1.0, lambda, penalty, estimator: Estimator::Plain }
    }

    /// `|G̃|²`.
    pub fn parabolic() -> Self {
        Self { hamiltonian: 0.0, lambda: 1.0, penalty: 0.0, estimator: Estimator::Plain }
    }

    pub fn with_estimator(mut self, estimator: Estimator) -> Self {
        self.estimator = estimator;
        self
    }
}

/// Decomposed loss value.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub g: Vec<f64>,
    pub hamiltonian_term: f64,
    pub penalty_term: f64,
}

/// Per-path samples on a minibatch: values and `H` (or `f`) at every node,
/// increments on every step.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementTable {
    pub paths: Vec<usize>,
    pub steps: usize,
    /// `[P][N+1]`.
    pub values: Vec<f64>,
    /// `[P][N+1]`, Hamiltonian or source samples.
    pub drive: Vec<f64>,
    /// `[P][N]`.
    pub increments: Vec<f64>,
}

impl IncrementTable {
    pub fn drive_at(&self, p: usize, n: usize) -> f64 {
        self.drive[p * (self.steps + 1) + n]
    }

    pub fn increment_at(&self, p: usize, n: usize) -> f64 {
        self.increments[p * self.steps + n]
    }

    pub fn value_at(&self, p: usize, n: usize) -> f64 {
        self.values[p * (self.steps + 1) + n]
    }
}

/// Gradients of the objective by parameter group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BundleGradient {
    pub alpha: Option<Vec<f64>>,
    pub theta: Option<Vec<f64>>,
    pub eta: Option<Vec<f64>>,
}

struct Chunk {
    tape: Tape,
    paths: usize,
    theta: MlpVars,
    alpha: Option<MlpVars>,
    eta: MlpVars,
    v: Var,
    drive: Var,
    dm: Var,
    w: Var,
    hdt: Var,
    dist: Option<Var>,
    rho: Var,
    inputs: Matrix,
}

/// A recorded minibatch evaluation.
pub struct Evaluation {
    chunks: Vec<Chunk>,
    train: Trainables,
    steps: usize,
    paths: Vec<usize>,
    /// Unnormalized per-chunk sums `Σ ρ ΔM Δt`.
    parts: Vec<Vec<f64>>,
    pub g: Vec<f64>,
    /// `|A|⁻¹ Σ H_n Δt_n` (HJB) or the same sum over the source.
    pub hamiltonian: f64,
    /// Mean distance of the controls to the control set (penalized mode).
    pub penalty: f64,
    /// `|A|`.
    pub count: usize,
}

/// `v_{n+1} − v_n + ½ (h_n + h_{n+1}) Δt`, in the evaluation order used on the tape.
pub fn trapezoid_increment(v_cur: f64, v_next: f64, h_cur: f64, h_next: f64, dt: f64) -> f64 {
    (v_next - v_cur) + (h_cur + h_next) * (0.5 * dt)
}

/// Trapezoid increments of one path with `N + 1` samples.
pub fn delta_m(values: &[f64], drive: &[f64], steps: &[f64]) -> Result<Vec<f64>> {
    if values.len() != steps.len() + 1 || drive.len() != values.len() {
        return Err(Error::InvalidArgument("delta_m needs N+1 values and samples for N steps".into()));
    }
    Ok((0..steps.len())
        .map(|n| trapezoid_increment(values[n], values[n + 1], drive[n], drive[n + 1], steps[n]))
        .collect())
}

/// `G = |A|⁻¹ Σ ρ_a ΔM_a Δt_a` over the rows of `rho`.
pub fn empirical_g(rho: &Matrix, increments: &[f64], steps: &[f64]) -> Result<Vec<f64>> {
    if rho.rows == 0 {
        return Err(Error::InvalidArgument("empty index set".into()));
    }
    if increments.len() != rho.rows || steps.len() != rho.rows {
        return Err(Error::InvalidArgument("one increment and step per test row".into()));
    }
    let mut g = vec![0.0; rho.cols];
    for a in 0..rho.rows {
        let w = increments[a] * steps[a];
        for (gk, rk) in g.iter_mut().zip(rho.row(a)) {
            *gk += rk * w;
        }
    }
    let n = rho.rows as f64;
    g.iter_mut().for_each(|v| *v /= n);
    Ok(g)
}

/// Euclidean distance of `u` to the box `[lower, upper]`.
pub fn box_distance(u: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((&x, &a), &b) in u.iter().zip(lower).zip(upper) {
        let over = Activation::Relu.eval(0, x - b);
        let under = Activation::Relu.eval(0, a - x);
        s += over * over + under * under;
    }
    math::sqrt(s)
}

/// Mean distance of the control rows to `set` (zero for unbounded sets).
pub fn control_penalty(controls: &Matrix, set: &ControlSet) -> Result<f64> {
    if controls.rows == 0 {
        return Err(Error::InvalidArgument("empty index set".into()));
    }
    match set {
        ControlSet::Unbounded => Ok(0.0),
        ControlSet::Box { lower, upper } | ControlSet::Penalized { lower, upper } => {
            let s: f64 = (0..controls.rows).map(|r| box_distance(controls.row(r), lower, upper)).sum();
            Ok(s / controls.rows as f64)
        }
    }
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn build_chunk(
    problem: &ProblemSpec,
    nets: &NetworkBundle,
    batch: &PathBatch,
    paths: &[usize],
    train: Trainables,
    cached_rho: Option<&Matrix>,
) -> Result<Chunk> {
    let d = batch.d;
    let n = batch.steps();
    let n1 = n + 1;
    let rows = paths.len() * n1;
    let horizon = batch.grid.horizon;
    let demand = problem.demand();

    let mut input = Matrix::zeros(rows, d + 1);
    let mut mask = vec![1.0; rows];
    let mut gval = vec![0.0; rows];
    let mut ggrad = Matrix::zeros(rows, d);
    let mut glap = vec![0.0; rows];
    for (k, &m) in paths.iter().enumerate() {
        for j in 0..n1 {
            let r = k * n1 + j;
            let row = input.row_mut(r);
            row[0] = batch.grid.nodes[j];
            row[1..].copy_from_slice(batch.state(m, j));
            if j == n {
                let x = batch.state(m, j);
                mask[r] = 0.0;
                gval[r] = nets.value.terminal.value(x);
                if demand.gradient {
                    nets.value.terminal.gradient(x, ggrad.row_mut(r));
                }
                if demand.laplacian {
                    glap[r] = nets.value.terminal.laplacian(x);
                }
            }
        }
    }
    debug_assert_eq!(batch.grid.nodes[n], horizon);

    let mut tape = Tape::new();
    let inp = tape.constant(input.clone());
    let theta = nets.value.graph.bind(&mut tape, &nets.value.params, train.theta);
    let trace = nets.value.graph.record(&mut tape, &theta, inp)?;
    let maskv = tape.constant(Matrix::column(mask));
    let phi = tape.mul(trace.output(), maskv)?;
    let gc = tape.constant(Matrix::column(gval));
    let v = tape.add(phi, gc)?;

    let gtrace = if demand.gradient || demand.laplacian {
        Some(nets.value.graph.record_input_gradient(&mut tape, &theta, &trace)?)
    } else {
        None
    };
    let z = match (&gtrace, demand.gradient) {
        (Some(gt), true) => {
            let zf = tape.slice_cols(gt.grad, 1, d)?;
            let zm = tape.mul_col(zf, maskv)?;
            let gg = tape.constant(ggrad);
            Some(tape.add(zm, gg)?)
        }
        _ => None,
    };
    let lap = match (&gtrace, demand.laplacian) {
        (Some(gt), true) => {
            let cols = nets.value.graph.record_input_hessian(&mut tape, &theta, &trace, gt, 1..d + 1)?;
            let mut acc = tape.slice_cols(cols[0], 1, 1)?;
            for (i, c) in cols.iter().enumerate().skip(1) {
                let e = tape.slice_cols(*c, 1 + i, 1)?;
                acc = tape.add(acc, e)?;
            }
            let lm = tape.mul(acc, maskv)?;
            let lg = tape.constant(Matrix::column(glap));
            Some(tape.add(lm, lg)?)
        }
        _ => None,
    };

    let mut alpha = None;
    let mut dist_all = None;
    let drive = match problem.mode {
        Mode::Hjb => {
            let control = nets
                .control
                .as_ref()
                .ok_or_else(|| Error::Config("HJB problems need a control network".into()))?;
            let avars = control.graph.bind(&mut tape, &control.params, train.alpha);
            let u = control.record(&mut tape, &avars, inp)?;
            alpha = Some(avars);
            if let ControlSet::Penalized { lower, upper } = &problem.control {
                let nb = tape.constant(Matrix::row_vector(upper.iter().map(|b| -b).collect()));
                let over = tape.add_row(u, nb)?;
                let over = tape.act(over, Activation::Relu, 0);
                let neg = tape.scale(u, -1.0);
                let a = tape.constant(Matrix::row_vector(lower.clone()));
                let under = tape.add_row(neg, a)?;
                let under = tape.act(under, Activation::Relu, 0);
                let so = tape.sq_norm_rows(over)?;
                let su = tape.sq_norm_rows(under)?;
                let s = tape.add(so, su)?;
                dist_all = Some(tape.sqrt(s));
            }
            let z = z.ok_or_else(|| Error::Contract("Hamiltonian needs ∂_x v".into()))?;
            problem.hamiltonian_tape(&mut tape, u, z)?
        }
        Mode::Parabolic => problem.source_tape(&mut tape, &input, v, z, lap)?,
    };

    let mut cur = Vec::with_capacity(paths.len() * n);
    let mut dt = Vec::with_capacity(paths.len() * n);
    for k in 0..paths.len() {
        for j in 0..n {
            cur.push((k * n1 + j) as u32);
            dt.push(batch.grid.steps[j]);
        }
    }
    let nxt: Vec<u32> = cur.iter().map(|r| r + 1).collect();
    let vc = tape.gather(v, cur.clone())?;
    let vn = tape.gather(v, nxt.clone())?;
    let dv = tape.sub(vn, vc)?;
    let hc = tape.gather(drive, cur.clone())?;
    let hn = tape.gather(drive, nxt)?;
    let hs = tape.add(hc, hn)?;
    let half = tape.constant(Matrix::column(dt.iter().map(|s| 0.5 * s).collect()));
    let hq = tape.mul(hs, half)?;
    let dm = tape.add(dv, hq)?;
    let dtc = tape.constant(Matrix::column(dt));
    let w = tape.mul(dm, dtc)?;
    let hdt = tape.mul(hc, dtc)?;
    let dist = match dist_all {
        Some(da) => Some(tape.gather(da, cur.clone())?),
        None => None,
    };

    let mut inputs = Matrix::zeros(cur.len(), d + 1);
    for (i, &r) in cur.iter().enumerate() {
        inputs.row_mut(i).copy_from_slice(input.row(r as usize));
    }
    let eta = nets.test.graph.bind(&mut tape, &nets.test.params, train.eta);
    let rho = match cached_rho {
        Some(r) if !train.eta => tape.constant(r.clone()),
        _ => {
            let ic = tape.constant(inputs.clone());
            nets.test.graph.record(&mut tape, &eta, ic)?.output()
        }
    };

    Ok(Chunk { tape, paths: paths.len(), theta, alpha, eta, v, drive, dm, w, hdt, dist, rho, inputs })
}

/// Test-function values `ρ_η` per chunk of one minibatch. They stay valid
/// while `η` and the minibatch are unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    chunks: Vec<Matrix>,
}

/// Records the minibatch `paths` of `batch` and reduces `G`, the Hamiltonian
/// term and the penalty.
pub fn evaluate(
    problem: &ProblemSpec,
    nets: &NetworkBundle,
    batch: &PathBatch,
    paths: &[usize],
    train: Trainables,
) -> Result<Evaluation> {
    evaluate_with(problem, nets, batch, paths, train, None)
}

/// [`evaluate`] reusing test features from an earlier evaluation of the same
/// minibatch under the same `η` (ignored when `η` is tracked).
pub fn evaluate_with(
    problem: &ProblemSpec,
    nets: &NetworkBundle,
    batch: &PathBatch,
    paths: &[usize],
    train: Trainables,
    features: Option<&Features>,
) -> Result<Evaluation> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("empty index set".into()));
    }
    if batch.d != problem.d || nets.value.d() != problem.d {
        return Err(Error::InvalidArgument(format!(
            "dimension mismatch: problem {}, paths {}, value net {}",
            problem.d,
            batch.d,
            nets.value.d()
        )));
    }
    if let Some(&bad) = paths.iter().find(|&&m| m >= batch.paths) {
        return Err(Error::InvalidArgument(format!("path index {bad} out of range {}", batch.paths)));
    }
    problem.check_value_activation(nets.value.graph.layers()[0].activation)?;
    let groups: Vec<&[usize]> = paths.chunks(CHUNK_PATHS).collect();
    if let Some(f) = features {
        let fits = f.chunks.len() == groups.len()
            && f.chunks.iter().zip(&groups).all(|(m, g)| m.rows == g.len() * batch.steps() && m.cols == nets.test.r());
        if !fits {
            return Err(Error::InvalidArgument("cached test features do not match the minibatch".into()));
        }
    }
    let built = map_indexed(groups.len(), |c| {
        build_chunk(problem, nets, batch, groups[c], train, features.map(|f| &f.chunks[c]))
    });
    let mut chunks = Vec::with_capacity(built.len());
    for c in built {
        chunks.push(c?);
    }
    let r = nets.test.r();
    let mut g = vec![0.0; r];
    let mut parts = Vec::with_capacity(chunks.len());
    let mut ham = 0.0;
    let mut pen = 0.0;
    for c in &chunks {
        let rho = c.tape.value(c.rho);
        let w = &c.tape.value(c.w).data;
        let mut part = vec![0.0; r];
        for (a, wa) in w.iter().enumerate() {
            for (gk, rk) in part.iter_mut().zip(rho.row(a)) {
                *gk += rk * wa;
            }
        }
        g.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
        parts.push(part);
        ham += c.tape.value(c.hdt).sum();
        if let Some(dv) = c.dist {
            pen += c.tape.value(dv).sum();
        }
    }
    let count = paths.len() * batch.steps();
    let nf = count as f64;
    g.iter_mut().for_each(|v| *v /= nf);
    Ok(Evaluation {
        chunks,
        train,
        steps: batch.steps(),
        paths: paths.to_vec(),
        g,
        parts,
        hamiltonian: ham / nf,
        penalty: pen / nf,
        count,
    })
}

impl Evaluation {
    pub fn g_norm_sq(&self) -> f64 {
        sq_norm(&self.g)
    }

    /// The martingale term of `obj` without `λ`.
    pub fn martingale_term(&self, estimator: Estimator) -> f64 {
        let rows: Vec<usize> = self.chunks.iter().map(|c| c.paths * self.steps).collect();
        martingale_term(&self.parts, &rows, estimator)
    }

    pub fn objective(&self, obj: &Objective) -> f64 {
        obj.hamiltonian * self.hamiltonian
            + obj.lambda * self.martingale_term(obj.estimator)
            + obj.penalty * self.penalty
    }

    pub fn loss_value(&self, obj: &Objective) -> LossValue {
        LossValue {
            loss: self.objective(obj),
            g: self.g.clone(),
            hamiltonian_term: self.hamiltonian,
            penalty_term: obj.penalty * self.penalty,
        }
    }

    pub fn table(&self) -> IncrementTable {
        let mut t = IncrementTable {
            paths: self.paths.clone(),
            steps: self.steps,
            values: Vec::new(),
            drive: Vec::new(),
            increments: Vec::new(),
        };
        for c in &self.chunks {
            t.values.extend_from_slice(&c.tape.value(c.v).data);
            t.drive.extend_from_slice(&c.tape.value(c.drive).data);
            t.increments.extend_from_slice(&c.tape.value(c.dm).data);
        }
        t
    }

    /// The test features of this evaluation, for reuse while `η` is fixed.
    pub fn features(&self) -> Features {
        Features { chunks: self.chunks.iter().map(|c| c.tape.value(c.rho).clone()).collect() }
    }

    /// Test-function inputs and `ΔM Δt` rows, for cheap `η` updates.
    pub fn projection(&self) -> Projection {
        Projection {
            inputs: self.chunks.iter().map(|c| c.inputs.clone()).collect(),
            w: self.chunks.iter().map(|c| c.tape.value(c.w).data.clone()).collect(),
            count: self.count,
        }
    }

    /// Exact gradient of the objective with respect to the tracked groups.
    pub fn gradient(&self, nets: &NetworkBundle, obj: &Objective) -> Result<BundleGradient> {
        let nf = self.count as f64;
        let rows_per: Vec<usize> = self.chunks.iter().map(|c| c.paths * self.steps).collect();
        let partners = partners(&self.parts, &rows_per, obj.estimator);
        let r = self.g.len();
        let parts = map_indexed(self.chunks.len(), |ci| -> Result<BundleGradient> {
            let c = &self.chunks[ci];
            let rho = c.tape.value(c.rho);
            let rows = rho.rows;
            let mut seeds = Vec::with_capacity(4);
            let (scale, g) = &partners[ci];
            let k = obj.lambda * scale;
            let sw = (0..rows)
                .map(|a| k * rho.row(a).iter().zip(g.iter()).map(|(p, q)| p * q).sum::<f64>())
                .collect();
            seeds.push((c.w, Matrix::column(sw)));
            if obj.hamiltonian != 0.0 {
                seeds.push((c.hdt, Matrix::filled(rows, 1, obj.hamiltonian / nf)));
            }
            if let (Some(dv), true) = (c.dist, obj.penalty != 0.0) {
                seeds.push((dv, Matrix::filled(rows, 1, obj.penalty / nf)));
            }
            if self.train.eta {
                let w = &c.tape.value(c.w).data;
                let mut s = Matrix::zeros(rows, r);
                for a in 0..rows {
                    for (o, gk) in s.row_mut(a).iter_mut().zip(g.iter()) {
                        *o = k * w[a] * gk;
                    }
                }
                seeds.push((c.rho, s));
            }
            let grads = c.tape.backward(&seeds)?;
            let mut out = BundleGradient::default();
            if self.train.theta {
                let mut v = vec![0.0; nets.value.graph.param_count()];
                nets.value.graph.collect(&grads, &c.theta, &mut v);
                out.theta = Some(v);
            }
            if let (true, Some(av), Some(cn)) = (self.train.alpha, &c.alpha, &nets.control) {
                let mut v = vec![0.0; cn.graph.param_count()];
                cn.graph.collect(&grads, av, &mut v);
                out.alpha = Some(v);
            }
            if self.train.eta {
                let mut v = vec![0.0; nets.test.graph.param_count()];
                nets.test.graph.collect(&grads, &c.eta, &mut v);
                out.eta = Some(v);
            }
            Ok(out)
        });
        let mut total = BundleGradient::default();
        for p in parts {
            let p = p?;
            accumulate(&mut total.alpha, p.alpha);
            accumulate(&mut total.theta, p.theta);
            accumulate(&mut total.eta, p.eta);
        }
        Ok(total)
    }

    /// Number of paths per chunk, in chunk order.
    pub fn chunk_sizes(&self) -> Vec<usize> {
        self.chunks.iter().map(|c| c.paths).collect()
    }
}

fn normalized(sum: &[f64], count: usize) -> Vec<f64> {
    sum.iter().map(|v| v / count as f64).collect()
}

/// Sums of the even-indexed and odd-indexed chunk partials, with row counts.
fn parity_sums(parts: &[Vec<f64>], rows: &[usize]) -> [(Vec<f64>, usize); 2] {
    let r = parts.first().map_or(0, Vec::len);
    let mut out = [(vec![0.0; r], 0), (vec![0.0; r], 0)];
    for (c, (p, n)) in parts.iter().zip(rows).enumerate() {
        let slot = &mut out[c % 2];
        slot.0.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        slot.1 += n;
    }
    out
}

fn martingale_term(parts: &[Vec<f64>], rows: &[usize], estimator: Estimator) -> f64 {
    if estimator == Estimator::Split && parts.len() >= 2 {
        let [(se, ne), (so, no)] = parity_sums(parts, rows);
        let (ge, go) = (normalized(&se, ne), normalized(&so, no));
        ge.iter().zip(&go).map(|(a, b)| a * b).sum()
    } else {
        let total: usize = rows.iter().sum();
        let mut g = vec![0.0; parts.first().map_or(0, Vec::len)];
        for p in parts {
            g.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        sq_norm(&normalized(&g, total))
    }
}

/// Per chunk, `(s, h)` with `∂(term)/∂(ρ_a ΔM_a Δt_a) = s · h` for rows `a`
/// of that chunk.
fn partners(parts: &[Vec<f64>], rows: &[usize], estimator: Estimator) -> Vec<(f64, Vec<f64>)> {
    if estimator == Estimator::Split && parts.len() >= 2 {
        let [(se, ne), (so, no)] = parity_sums(parts, rows);
        let halves = [(1.0 / ne as f64, normalized(&so, no)), (1.0 / no as f64, normalized(&se, ne))];
        (0..parts.len()).map(|c| halves[c % 2].clone()).collect()
    } else {
        let total: usize = rows.iter().sum();
        let mut g = vec![0.0; parts.first().map_or(0, Vec::len)];
        for p in parts {
            g.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        let g = normalized(&g, total);
        vec![(2.0 / total as f64, g); parts.len()]
    }
}

fn accumulate(total: &mut Option<Vec<f64>>, part: Option<Vec<f64>>) {
    if let Some(p) = part {
        match total {
            Some(t) => t.iter_mut().zip(&p).for_each(|(a, b)| *a += b),
            None => *total = Some(p),
        }
    }
}

/// Frozen `ΔM Δt` rows with their test-function inputs. `G` depends on `η`
/// only through `ρ`, so ascent steps on `η` need nothing else.
#[derive(Debug, Clone)]
pub struct Projection {
    inputs: Vec<Matrix>,
    w: Vec<Vec<f64>>,
    count: usize,
}

impl Projection {
    fn partial(test: &TestNet, inputs: &Matrix, w: &[f64], r: usize) -> Result<Vec<f64>> {
        let rho = test.features(inputs)?;
        let mut g = vec![0.0; r];
        for (a, wa) in w.iter().enumerate() {
            for (gk, rk) in g.iter_mut().zip(rho.row(a)) {
                *gk += rk * wa;
            }
        }
        Ok(g)
    }

    /// `G` under the test network `test`.
    pub fn g(&self, test: &TestNet) -> Result<Vec<f64>> {
        let r = test.r();
        let parts = map_indexed(self.inputs.len(), |c| Self::partial(test, &self.inputs[c], &self.w[c], r));
        let mut g = vec![0.0; r];
        for p in parts {
            g.iter_mut().zip(&p?).for_each(|(a, b)| *a += b);
        }
        let nf = self.count as f64;
        g.iter_mut().for_each(|v| *v /= nf);
        Ok(g)
    }

    /// `(∇_η λ·term, G)`, both at the current `test`, where `term` is the
    /// martingale term of `estimator`. With `ρ = sin(Z)`, `Z = X Wᵀ + b`,
    /// the seed on `Z` is `λ s (w hᵀ) ⊙ cos(Z)` for the chunk partner `(s, h)`.
    pub fn eta_gradient(&self, test: &TestNet, lambda: f64, estimator: Estimator) -> Result<(Vec<f64>, Vec<f64>)> {
        let layout = test.graph.layout();
        if test.graph.layers().len() != 1 || test.graph.layers()[0].activation != Activation::Sin {
            return Err(Error::Contract("test network must be a single sine layer".into()));
        }
        let (we, be) = (layout.weight(0), layout.bias(0));
        let w = test.params.matrix(we);
        let b = test.params.slice(be);
        let r = test.r();
        // pass 1: chunk partials of G and cos(Z)
        let passes = map_indexed(self.inputs.len(), |c| -> (Vec<f64>, Matrix) {
            let mut z = affine(&self.inputs[c], &w, b);
            let mut g = vec![0.0; r];
            for (a, wa) in self.w[c].iter().enumerate() {
                for (gk, zk) in g.iter_mut().zip(z.row_mut(a)) {
                    let (s, co) = math::sin_cos(*zk);
                    *gk += s * wa;
                    *zk = co;
                }
            }
            (g, z)
        });
        let parts: Vec<Vec<f64>> = passes.iter().map(|p| p.0.clone()).collect();
        let rows: Vec<usize> = self.w.iter().map(Vec::len).collect();
        let mut g = vec![0.0; r];
        for p in &parts {
            g.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        let nf = self.count as f64;
        g.iter_mut().for_each(|v| *v /= nf);
        let partners = partners(&parts, &rows, estimator);
        // pass 2: parameter gradient
        let grads = map_indexed(passes.len(), |c| -> Vec<f64> {
            let (scale, h) = &partners[c];
            let k = lambda * scale;
            let mut dz = passes[c].1.clone();
            for (a, wa) in self.w[c].iter().enumerate() {
                for (o, hk) in dz.row_mut(a).iter_mut().zip(h) {
                    *o *= k * wa * hk;
                }
            }
            let mut dw = Matrix::zeros(r, self.inputs[c].cols);
            gemm_acc(&dz, true, &self.inputs[c], false, &mut dw);
            let mut out = vec![0.0; test.graph.param_count()];
            out[we.range()].copy_from_slice(&dw.data);
            out[be.range()].copy_from_slice(&dz.col_sums().data);
            out
        });
        let mut total = vec![0.0; test.graph.param_count()];
        for p in grads {
            total.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
        }
        Ok((total, g))
    }
}

/// `H_n^{(m)}` at every node of the minibatch paths.
pub fn hamiltonian_samples(
    problem: &ProblemSpec,
    nets: &NetworkBundle,
    batch: &PathBatch,
    paths: &[usize],
) -> Result<IncrementTable> {
    if problem.mode != Mode::Hjb {
        return Err(Error::Contract(format!("problem `{}` is parabolic", problem.name())));
    }
    Ok(evaluate(problem, nets, batch, paths, Trainables::NONE)?.table())
}

/// `L = Hamilt + λ|G|² (+ λ̄ · penalty when the control set is penalized)`.
pub fn hjb_loss(
    problem: &ProblemSpec,
    nets: &NetworkBundle,
    batch: &PathBatch,
    paths: &[usize],
    lambda: f64,
    lambda_bar: f64,
) -> Result<LossValue> {
    if problem.mode != Mode::Hjb {
        return Err(Error::Contract(format!("problem `{}` is parabolic", problem.name())));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument("λ must be nonnegative".into()));
    }
    let ev = evaluate(problem, nets, batch, paths, Trainables::NONE)?;
    Ok(ev.loss_value(&Objective::hjb(lambda, penalty_weight(problem, lambda_bar))))
}

/// `G̃` of the parabolic formulation.
pub fn parabolic_g(problem: &ProblemSpec, nets: &NetworkBundle, batch: &PathBatch, paths: &[usize]) -> Result<Vec<f64>> {
    if problem.mode != Mode::Parabolic {
        return Err(Error::Contract(format!("problem `{}` is not parabolic", problem.name())));
    }
    Ok(evaluate(problem, nets, batch, paths, Trainables::NONE)?.g)
}

/// `λ̄` when the problem penalizes control-set violations, else zero.
pub fn penalty_weight(problem: &ProblemSpec, lambda_bar: f64) -> f64 {
    match problem.control {
        ControlSet::Penalized { .. } => lambda_bar,
        _ => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn increment_examples() {
        // v constant, H = 0
        assert_eq!(delta_m(&[2.0, 2.0, 2.0], &[0.0; 3], &[0.5, 0.5]).unwrap(), vec![0.0, 0.0]);
        // v(t, x) = t with H = −1 satisfies ∂_t v + H = 0
        let dm = delta_m(&[0.0, 0.25, 0.5], &[-1.0; 3], &[0.25, 0.25]).unwrap();
        assert_eq!(dm, vec![0.0, 0.0]);
    }

    #[test]
    fn g_examples() {
        let g = empirical_g(&Matrix::from_vec(1, 1, vec![1.0]), &[2.0], &[0.5]).unwrap();
        assert_eq!(g, vec![1.0]);
        let g = empirical_g(&Matrix::zeros(3, 2), &[1.0, 2.0, 3.0], &[0.1; 3]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        assert!(empirical_g(&Matrix::zeros(0, 2), &[], &[]).is_err());
    }

    #[test]
    fn penalty_examples() {
        let set = ControlSet::Penalized { lower: vec![0.0; 4], upper: vec![0.0; 4] };
        let u = Matrix::filled(2, 4, 1.0);
        assert_eq!(control_penalty(&u, &set).unwrap(), 2.0);
        let inside = ControlSet::Box { lower: vec![-1.0; 2], upper: vec![1.0; 2] };
        assert_eq!(control_penalty(&Matrix::filled(3, 2, 0.5), &inside).unwrap(), 0.0);
        let mixed = Matrix::from_vec(2, 2, vec![0.0, 0.0, 4.0, 1.0]);
        assert_eq!(control_penalty(&mixed, &inside).unwrap(), 1.5);
    }

    use crate::networks::{init_networks, Architecture};
    use crate::problems::{make_problem, Preset};
    use crate::sde::{build_start_set, simulate_paths, TimeGrid};

    fn setup(preset: Preset, control: Option<ControlSet>) -> (ProblemSpec, NetworkBundle, PathBatch) {
        let d = 2;
        let mut p = make_problem(preset, d, &[]).unwrap();
        if let Some(c) = control {
            p.control = c;
        }
        let grid = TimeGrid::uniform(p.horizon, 4).unwrap();
        let start = build_start_set(&p.start, d, 6, 0).unwrap();
        let batch = simulate_paths(&p, &grid, &start, 20, 7).unwrap();
        let mut arch = Architecture::standard(d, p.control_dim(), 3);
        arch.width = 5;
        arch.depth = 2;
        arch.value_activation = Activation::Tanh;
        arch.control_activation = Activation::Tanh;
        let nets = init_networks(&arch, p.terminal, p.horizon, p.control.clone(), 11).unwrap();
        (p, nets, batch)
    }

    fn params_mut<'a>(nets: &'a mut NetworkBundle, group: usize) -> &'a mut Vec<f64> {
        match group {
            0 => &mut nets.control.as_mut().unwrap().params.data,
            1 => &mut nets.value.params.data,
            _ => &mut nets.test.params.data,
        }
    }

    fn check_gradient(p: &ProblemSpec, mut nets: NetworkBundle, batch: &PathBatch, obj: Objective) {
        let paths: Vec<usize> = (0..batch.paths).rev().collect();
        let train = Trainables { alpha: nets.control.is_some(), theta: true, eta: true };
        let ev = evaluate(p, &nets, batch, &paths, train).unwrap();
        assert_eq!(ev.chunk_sizes(), vec![16, 4]);
        let grad = ev.gradient(&nets, &obj).unwrap();
        let groups = [grad.alpha, grad.theta, grad.eta];
        for (gi, g) in groups.iter().enumerate() {
            let Some(g) = g else { continue };
            for k in (0..g.len()).step_by(3) {
                let h = 1e-6;
                let orig = params_mut(&mut nets, gi)[k];
                params_mut(&mut nets, gi)[k] = orig + h;
                let lp = evaluate(p, &nets, batch, &paths, Trainables::NONE).unwrap().objective(&obj);
                params_mut(&mut nets, gi)[k] = orig - h;
                let lm = evaluate(p, &nets, batch, &paths, Trainables::NONE).unwrap().objective(&obj);
                params_mut(&mut nets, gi)[k] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "group {gi} index {k}: fd {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn hjb_loss_gradient_matches_differences() {
        let (p, nets, batch) = setup(Preset::Hjb2, None);
        check_gradient(&p, nets, &batch, Objective::hjb(10.0, 0.0));
    }

    #[test]
    fn penalized_loss_gradient_matches_differences() {
        let set = ControlSet::Penalized { lower: vec![-0.1, -0.2], upper: vec![0.1, 0.05] };
        let (p, nets, batch) = setup(Preset::Hjb1, Some(set));
        check_gradient(&p, nets, &batch, Objective::hjb(3.0, 50.0));
    }

    #[test]
    fn parabolic_gradient_matches_differences() {
        for preset in [Preset::AllenCahn, Preset::Semilinear, Preset::Linear] {
            let (p, nets, batch) = setup(preset, None);
            check_gradient(&p, nets, &batch, Objective::parabolic());
        }
    }

    #[test]
    fn split_estimator_gradients_match_differences() {
        let (p, nets, batch) = setup(Preset::Hjb2, None);
        check_gradient(&p, nets, &batch, Objective::hjb(10.0, 0.0).with_estimator(Estimator::Split));
        let (p, nets, batch) = setup(Preset::Linear, None);
        check_gradient(&p, nets, &batch, Objective::parabolic().with_estimator(Estimator::Split));
    }

    #[test]
    fn increments_telescope_and_match_the_table() {
        let (p, nets, batch) = setup(Preset::Hjb2, None);
        let paths = [3usize, 0, 19];
        let t = evaluate(&p, &nets, &batch, &paths, Trainables::NONE).unwrap().table();
        let n = batch.steps();
        for k in 0..paths.len() {
            let vals: Vec<f64> = (0..=n).map(|j| t.value_at(k, j)).collect();
            let drive: Vec<f64> = (0..=n).map(|j| t.drive_at(k, j)).collect();
            let dm = delta_m(&vals, &drive, &batch.grid.steps).unwrap();
            for j in 0..n {
                assert_eq!(dm[j], t.increment_at(k, j));
            }
            let total: f64 = dm.iter().sum();
            let quad: f64 = (0..n).map(|j| 0.5 * (drive[j] + drive[j + 1]) * batch.grid.steps[j]).sum();
            assert!((total - (vals[n] - vals[0] + quad)).abs() < 1e-12);
            assert_eq!(vals[n], p.terminal.value(batch.state(paths[k], n)));
        }
    }

    #[test]
    fn projection_matches_the_tape() {
        let (p, nets, batch) = setup(Preset::Hjb2, None);
        let paths: Vec<usize> = (0..batch.paths).collect();
        let ev = evaluate(&p, &nets, &batch, &paths, Trainables { eta: true, ..Trainables::NONE }).unwrap();
        let obj = Objective { hamiltonian: 1.0, lambda: 7.0, penalty: 0.0, estimator: Estimator::Plain };
        let tape = ev.gradient(&nets, &obj).unwrap().eta.unwrap();
        let (closed, g) = ev.projection().eta_gradient(&nets.test, 7.0, Estimator::Plain).unwrap();
        assert_eq!(g, ev.g);
        for (a, b) in tape.iter().zip(&closed) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
        }
        let g2 = ev.projection().g(&nets.test).unwrap();
        assert_eq!(g2, ev.g);
        let cached = evaluate_with(&p, &nets, &batch, &paths, Trainables::NONE, Some(&ev.features())).unwrap();
        assert_eq!(cached.g, ev.g);
        assert_eq!(cached.hamiltonian, ev.hamiltonian);
    }
}
