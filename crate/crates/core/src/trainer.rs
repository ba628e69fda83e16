//! The min–max training loops.
//!
//! HJB mode, per outer iteration `i`:
//!
//! 1. draw the path block `M_i` from the epoch sampler;
//! 2. `J` times: descend `α` on `L`, then (after re-evaluating) descend `θ`;
//! 3. `K` times: ascend `η` on `L`, then `λ ← min(λ̄, λ + δ₄|G|²)`.
//!
//! Parabolic mode drops `α` and `λ`: `θ` descends and `η` ascends `|G̃|²`.
//! All steps are RMSProp steps with the scheduled learning rates.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::martingale::{evaluate_with, penalty_weight, Estimator, Evaluation, Features, Objective, Trainables};
use crate::math;
use crate::autodiff::{Matrix, Tape};
use crate::networks::{NetworkBundle, ValueNet};
use crate::problems::{Mode, ProblemSpec};
use crate::rng::{self, Domain, Stream};
use crate::sde::PathBatch;

/// Objective used for the `θ` descent steps in HJB mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaObjective {
    /// `θ` descends the full augmented loss `L`.
    Full,
    /// `θ` descends only the constraint term `λ|G|²`.
    Martingale,
}

impl ThetaObjective {
    pub fn name(self) -> &'static str {
        match self {
            ThetaObjective::Full => "full",
            ThetaObjective::Martingale => "martingale",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(ThetaObjective::Full),
            "martingale" => Some(ThetaObjective::Martingale),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// `I`.
    pub iterations: usize,
    /// `J`.
    pub descent_steps: usize,
    /// `K`.
    pub ascent_steps: usize,
    /// `|M_i|`.
    pub batch_size: usize,
    /// Initial `δ₁ = δ₂`; `None` selects `δ₀(d) · 10⁻³`.
    pub lr_primal: Option<f64>,
    /// Initial `δ₃`.
    pub lr_test: f64,
    /// `δ₄`.
    pub lr_lambda: f64,
    /// Factor reached by the schedule at `i = I`.
    pub lr_decay: f64,
    pub lambda0: f64,
    pub lambda_bar: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    /// Re-evaluate the loss between the `α` and `θ` steps.
    pub sequential: bool,
    pub theta_objective: ThetaObjective,
    pub estimator: Estimator,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_dimension(d: usize) -> Self {
        Self {
            iterations: 2000,
            descent_steps: 2,
            ascent_steps: 1,
            batch_size: if d > 1000 { 128 } else { 256 },
            lr_primal: None,
            lr_test: 1e-2,
            lr_lambda: 10.0,
            lr_decay: 0.01,
            lambda0: 10.0,
            lambda_bar: 1e3,
            rms_decay: 0.99,
            rms_eps: 1e-8,
            sequential: true,
            theta_objective: ThetaObjective::Martingale,
            estimator: Estimator::Plain,
            seed: 0,
        }
    }

    pub fn validate(&self, paths: usize) -> Result<()> {
        if self.descent_steps == 0 {
            return Err(Error::Config("J must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.batch_size > paths {
            return Err(Error::Config(format!("batch size {} exceeds path count {paths}", self.batch_size)));
        }
        if !(self.lambda0 >= 0.0 && self.lambda_bar >= self.lambda0) {
            return Err(Error::Config("need 0 <= lambda0 <= lambda_bar".into()));
        }
        if !(0.0..=1.0).contains(&self.rms_decay) || !(self.rms_eps > 0.0) {
            return Err(Error::Config("RMSProp needs decay in [0, 1] and eps > 0".into()));
        }
        Ok(())
    }
}

/// `δ₀ = 3 d^{−0.5}` (`3 d^{−0.8}` above `d = 1000`).
pub fn delta0(d: usize) -> f64 {
    let d = d as f64;
    if d > 1000.0 {
        3.0 * math::powf(d, -0.8)
    } else {
        3.0 * math::powf(d, -0.5)
    }
}

/// `base · decay^{i/I}`.
pub fn lr_schedule(base: f64, i: usize, iterations: usize, decay: f64) -> f64 {
    if iterations == 0 {
        return base;
    }
    base * math::powf(decay, i as f64 / iterations as f64)
}

/// `min(λ̄, λ + δ₄ |G|²)`.
pub fn update_lambda(lambda: f64, g_norm_sq: f64, lr: f64, cap: f64) -> f64 {
    (lambda + lr * g_norm_sq).min(cap)
}

/// Epoch-wise block sampler over `0..M`.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    perm: Vec<usize>,
    cursor: usize,
    block: usize,
    rng: Stream,
}

impl EpochSampler {
    pub fn new(paths: usize, block: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Domain::Sampler, 0);
        let perm = rng::permutation(&mut rng, paths);
        Self { perm, cursor: 0, block: block.clamp(1, paths.max(1)), rng }
    }

    pub fn next_block(&mut self) -> Vec<usize> {
        if self.cursor >= self.perm.len() {
            self.perm = rng::permutation(&mut self.rng, self.perm.len());
            self.cursor = 0;
        }
        let end = (self.cursor + self.block).min(self.perm.len());
        let out = self.perm[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }
}

/// RMSProp: `s ← ρ s + (1−ρ) g²`, `p ← p ∓ δ g / (√s + ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub decay: f64,
    pub eps: f64,
    pub accum: Vec<f64>,
}

impl RmsProp {
    pub fn new(len: usize, decay: f64, eps: f64) -> Self {
        Self { decay, eps, accum: alloc::vec![0.0; len] }
    }

    /// Descent step (ascent when `ascend`). A zero step size leaves the
    /// parameters bit-identical.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, ascend: bool) -> Result<()> {
        if params.len() != grad.len() || grad.len() != self.accum.len() {
            return Err(Error::InvalidArgument("optimizer state does not match parameters".into()));
        }
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        for ((p, &g), s) in params.iter_mut().zip(grad).zip(self.accum.iter_mut()) {
            *s = self.decay * *s + (1.0 - self.decay) * g * g;
            if lr != 0.0 {
                let delta = lr * g / (math::sqrt(*s) + self.eps);
                if ascend {
                    *p += delta;
                } else {
                    *p -= delta;
                }
            }
        }
        Ok(())
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub iter: usize,
    /// `|G|²` (or `|G̃|²`) after the ascent steps.
    pub mart_loss: f64,
    /// Empirical Hamiltonian `|A|⁻¹ Σ H Δt`; absent in parabolic mode.
    pub hamilt: Option<f64>,
    pub lambda: Option<f64>,
    pub lr1: f64,
    pub lr3: f64,
    pub re_l1: Option<f64>,
    pub re_linf: Option<f64>,
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<MetricsRecord>,
    pub lambda: f64,
}

/// Called once per iteration with the finished record; may fill the
/// optional error and timing fields or abort training.
pub type Observer<'a> = dyn FnMut(&mut MetricsRecord, &NetworkBundle) -> Result<()> + 'a;

fn check_loss(value: f64, iteration: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { iteration })
    }
}

fn primal_base(cfg: &TrainConfig, d: usize) -> f64 {
    cfg.lr_primal.unwrap_or_else(|| delta0(d) * 1e-3)
}

/// Evaluates with the test features shared across one iteration; `η` only
/// moves after the last evaluation of an iteration.
fn cached(
    problem: &ProblemSpec,
    nets: &NetworkBundle,
    batch: &PathBatch,
    block: &[usize],
    train: Trainables,
    feats: &mut Option<Features>,
) -> Result<Evaluation> {
    let ev = evaluate_with(problem, nets, batch, block, train, feats.as_ref())?;
    if feats.is_none() {
        *feats = Some(ev.features());
    }
    Ok(ev)
}

/// Min–max training of `(u_α, v_θ)` against `ρ_η` for an HJB problem.
pub fn train_hjb(
    problem: &ProblemSpec,
    nets: &mut NetworkBundle,
    batch: &PathBatch,
    cfg: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<TrainReport> {
    if problem.mode != Mode::Hjb {
        return Err(Error::Config(format!("problem `{}` is parabolic; use train_parabolic", problem.name())));
    }
    cfg.validate(batch.paths)?;
    let control_len = nets
        .control
        .as_ref()
        .ok_or_else(|| Error::Config("HJB training needs a control network".into()))?
        .params
        .len();
    let mut opt_a = RmsProp::new(control_len, cfg.rms_decay, cfg.rms_eps);
    let mut opt_t = RmsProp::new(nets.value.params.len(), cfg.rms_decay, cfg.rms_eps);
    let mut opt_e = RmsProp::new(nets.test.params.len(), cfg.rms_decay, cfg.rms_eps);
    let mut sampler = EpochSampler::new(batch.paths, cfg.batch_size, cfg.seed);
    let base = primal_base(cfg, problem.d);
    let pen = penalty_weight(problem, cfg.lambda_bar);
    let mut lambda = cfg.lambda0;
    let mut records = Vec::with_capacity(cfg.iterations);

    for i in 0..cfg.iterations {
        let block = sampler.next_block();
        let mut feats = None;
        let lr12 = lr_schedule(base, i, cfg.iterations, cfg.lr_decay);
        let lr3 = lr_schedule(cfg.lr_test, i, cfg.iterations, cfg.lr_decay);
        let full = Objective::hjb(lambda, pen).with_estimator(cfg.estimator);
        let theta_obj = match cfg.theta_objective {
            ThetaObjective::Full => full,
            ThetaObjective::Martingale => Objective { hamiltonian: 0.0, ..full },
        };
        for _ in 0..cfg.descent_steps {
            if cfg.sequential {
                let ev = cached(problem, nets, batch, &block, Trainables { alpha: true, ..Trainables::NONE }, &mut feats)?;
                check_loss(ev.objective(&full), i)?;
                let g = ev.gradient(nets, &full)?;
                drop(ev);
                let control = nets.control.as_mut().expect("checked above");
                opt_a.step(&mut control.params.data, g.alpha.as_deref().unwrap_or(&[]), lr12, false)?;
                let ev = cached(problem, nets, batch, &block, Trainables { theta: true, ..Trainables::NONE }, &mut feats)?;
                check_loss(ev.objective(&full), i)?;
                let g = ev.gradient(nets, &theta_obj)?;
                drop(ev);
                opt_t.step(&mut nets.value.params.data, g.theta.as_deref().unwrap_or(&[]), lr12, false)?;
            } else {
                let ev = cached(problem, nets, batch, &block, Trainables { alpha: true, ..Trainables::NONE }, &mut feats)?;
                check_loss(ev.objective(&full), i)?;
                let ga = ev.gradient(nets, &full)?;
                drop(ev);
                let ev = cached(problem, nets, batch, &block, Trainables { theta: true, ..Trainables::NONE }, &mut feats)?;
                let gt = ev.gradient(nets, &theta_obj)?;
                drop(ev);
                let control = nets.control.as_mut().expect("checked above");
                opt_a.step(&mut control.params.data, ga.alpha.as_deref().unwrap_or(&[]), lr12, false)?;
                opt_t.step(&mut nets.value.params.data, gt.theta.as_deref().unwrap_or(&[]), lr12, false)?;
            }
        }
        let ev = cached(problem, nets, batch, &block, Trainables::NONE, &mut feats)?;
        check_loss(ev.objective(&Objective::hjb(lambda, pen)), i)?;
        let hamilt = ev.hamiltonian;
        let mut g = ev.g.clone();
        let proj = ev.projection();
        drop(ev);
        for _ in 0..cfg.ascent_steps {
            let (grad, _) = proj.eta_gradient(&nets.test, lambda, cfg.estimator)?;
            opt_e.step(&mut nets.test.params.data, &grad, lr3, true)?;
            g = proj.g(&nets.test)?;
            lambda = update_lambda(lambda, g.iter().map(|x| x * x).sum(), cfg.lr_lambda, cfg.lambda_bar);
        }
        let mut rec = MetricsRecord {
            iter: i,
            mart_loss: g.iter().map(|x| x * x).sum(),
            hamilt: Some(hamilt),
            lambda: Some(lambda),
            lr1: lr12,
            lr3,
            re_l1: None,
            re_linf: None,
            wall_ms: None,
        };
        check_loss(rec.mart_loss, i)?;
        observer(&mut rec, nets)?;
        records.push(rec);
    }
    Ok(TrainReport { records, lambda })
}

/// Min–max training of `v_θ` against `ρ_η` for a parabolic problem.
pub fn train_parabolic(
    problem: &ProblemSpec,
    nets: &mut NetworkBundle,
    batch: &PathBatch,
    cfg: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<TrainReport> {
    if problem.mode != Mode::Parabolic {
        return Err(Error::Config(format!("problem `{}` is an HJB problem; use train_hjb", problem.name())));
    }
    cfg.validate(batch.paths)?;
    let mut opt_t = RmsProp::new(nets.value.params.len(), cfg.rms_decay, cfg.rms_eps);
    let mut opt_e = RmsProp::new(nets.test.params.len(), cfg.rms_decay, cfg.rms_eps);
    let mut sampler = EpochSampler::new(batch.paths, cfg.batch_size, cfg.seed);
    let base = primal_base(cfg, problem.d);
    let obj = Objective::parabolic().with_estimator(cfg.estimator);
    let mut records = Vec::with_capacity(cfg.iterations);

    for i in 0..cfg.iterations {
        let block = sampler.next_block();
        let mut feats = None;
        let lr2 = lr_schedule(base, i, cfg.iterations, cfg.lr_decay);
        let lr3 = lr_schedule(cfg.lr_test, i, cfg.iterations, cfg.lr_decay);
        for _ in 0..cfg.descent_steps {
            let ev = cached(problem, nets, batch, &block, Trainables { theta: true, ..Trainables::NONE }, &mut feats)?;
            check_loss(ev.objective(&obj), i)?;
            let g = ev.gradient(nets, &obj)?;
            drop(ev);
            opt_t.step(&mut nets.value.params.data, g.theta.as_deref().unwrap_or(&[]), lr2, false)?;
        }
        let ev = cached(problem, nets, batch, &block, Trainables::NONE, &mut feats)?;
        let mut g = ev.g.clone();
        let proj = ev.projection();
        drop(ev);
        for _ in 0..cfg.ascent_steps {
            let (grad, _) = proj.eta_gradient(&nets.test, 1.0, cfg.estimator)?;
            opt_e.step(&mut nets.test.params.data, &grad, lr3, true)?;
            g = proj.g(&nets.test)?;
        }
        let mut rec = MetricsRecord {
            iter: i,
            mart_loss: g.iter().map(|x| x * x).sum(),
            hamilt: None,
            lambda: None,
            lr1: lr2,
            lr3,
            re_l1: None,
            re_linf: None,
            wall_ms: None,
        };
        check_loss(rec.mart_loss, i)?;
        observer(&mut rec, nets)?;
        records.push(rec);
    }
    Ok(TrainReport { records, lambda: cfg.lambda0 })
}

/// Least-squares fit of the raw value network to `targets` at the `[t, x]`
/// rows, full batch, constant step size. Returns the final mean squared error.
pub fn fit_value(value: &mut ValueNet, rows: &Matrix, targets: &[f64], steps: usize, lr: f64) -> Result<f64> {
    if rows.rows != targets.len() || rows.rows == 0 {
        return Err(Error::InvalidArgument("fit needs one target per row".into()));
    }
    let graph = &value.graph;
    let mut opt = RmsProp::new(value.params.len(), 0.99, 1e-8);
    let mut grad = alloc::vec![0.0; value.params.len()];
    let scale = 2.0 / rows.rows as f64;
    let mut mse = f64::INFINITY;
    for step in 0..=steps {
        let mut tape = Tape::new();
        let vars = graph.bind(&mut tape, &value.params, true);
        let input = tape.constant(rows.clone());
        let out = graph.record(&mut tape, &vars, input)?.output();
        let resid: Vec<f64> = tape.value(out).data.iter().zip(targets).map(|(o, y)| o - y).collect();
        mse = resid.iter().map(|r| r * r).sum::<f64>() / rows.rows as f64;
        if !mse.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: 0 });
        }
        if step == steps || lr == 0.0 {
            break;
        }
        let seed = Matrix::column(resid.iter().map(|r| scale * r).collect());
        let grads = tape.backward(&[(out, seed)])?;
        graph.collect(&grads, &vars, &mut grad);
        opt.step(&mut value.params.data, &grad, lr, false)?;
    }
    Ok(mse)
}

/// Dispatches on the problem mode.
pub fn train(
    problem: &ProblemSpec,
    nets: &mut NetworkBundle,
    batch: &PathBatch,
    cfg: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<TrainReport> {
    match problem.mode {
        Mode::Hjb => train_hjb(problem, nets, batch, cfg, observer),
        Mode::Parabolic => train_parabolic(problem, nets, batch, cfg, observer),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert!((delta0(100) * 1e-3 - 3e-4).abs() < 1e-18);
        assert!((lr_schedule(1.0, 10, 10, 0.01) - 0.01).abs() < 1e-15);
        assert_eq!(delta0(2000), 3.0 * math::powf(2000.0, -0.8));
    }

    #[test]
    fn lambda_examples() {
        assert_eq!(update_lambda(10.0, 0.0, 10.0, 1e3), 10.0);
        assert_eq!(update_lambda(10.0, 0.5, 10.0, 1e3), 15.0);
        assert_eq!(update_lambda(999.0, 1.0, 10.0, 1e3), 1e3);
    }

    #[test]
    fn rmsprop_examples() {
        let mut o = RmsProp::new(1, 0.9, 1e-8);
        let mut p = [1.0];
        o.step(&mut p, &[1.0], 0.1, false).unwrap();
        assert!((o.accum[0] - 0.1).abs() < 1e-16);
        assert_eq!(p[0], 1.0 - 0.1 / (math::sqrt(0.1) + 1e-8));
        let mut o = RmsProp::new(2, 0.0, 1e-8);
        let mut p = [0.0, 0.0];
        o.step(&mut p, &[3.0, -0.5], 0.2, false).unwrap();
        assert!((p[0] + 0.2).abs() < 1e-8 && (p[1] - 0.2).abs() < 1e-7);
        let before = p;
        o.step(&mut p, &[0.0, 0.0], 0.2, false).unwrap();
        assert_eq!(p, before);
        assert_eq!(o.step(&mut p, &[f64::NAN, 0.0], 0.1, false), Err(Error::NonFiniteGradient { index: 0 }));
    }

    #[test]
    fn sampler_blocks() {
        let mut s = EpochSampler::new(4, 2, 1);
        let mut a = s.next_block();
        let mut b = s.next_block();
        a.append(&mut b);
        a.sort_unstable();
        assert_eq!(a, alloc::vec![0, 1, 2, 3]);
        let mut s = EpochSampler::new(5, 9, 1);
        assert_eq!(s.next_block().len(), 5);
        let mut s = EpochSampler::new(5, 2, 1);
        let sizes: Vec<usize> = (0..3).map(|_| s.next_block().len()).collect();
        assert_eq!(sizes, alloc::vec![2, 2, 1]);
    }

    #[test]
    fn value_fit_reduces_error() {
        use crate::autodiff::Activation;
        use crate::networks::{init_networks, Architecture};
        use crate::problems::{ControlSet, Terminal};
        let mut arch = Architecture::standard(2, 0, 1);
        arch.value_activation = Activation::Tanh;
        let mut nets = init_networks(&arch, Terminal::Affine { offset: 0.0, slope: 1.0 }, 1.0, ControlSet::Unbounded, 5).unwrap();
        let mut data = Vec::new();
        let mut ys = Vec::new();
        for k in 0..40 {
            let (t, x0, x1) = (k as f64 / 40.0, math::sin(k as f64), math::cos(3.0 * k as f64));
            data.extend_from_slice(&[t, x0, x1]);
            ys.push(0.5 * x0 - x1 + t);
        }
        let rows = Matrix::from_vec(40, 3, data);
        let start = fit_value(&mut nets.value.clone(), &rows, &ys, 0, 1e-2).unwrap();
        let end = fit_value(&mut nets.value, &rows, &ys, 300, 1e-2).unwrap();
        assert!(end < 0.05 * start, "{start} -> {end}");
        let frozen = nets.value.clone();
        fit_value(&mut nets.value, &rows, &ys, 5, 0.0).unwrap();
        assert_eq!(nets.value, frozen);
        assert!(fit_value(&mut nets.value, &rows, &ys[..3], 5, 0.1).is_err());
    }
}
