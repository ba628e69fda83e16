//! Benchmark problems and their reference solutions.
//!
//! Every problem is written in the form `∂_t v + 𝓛 v + F = 0` on
//! `[0, T) × ℝ^d` with `v(T, ·) = g`, where `𝓛 = μᵀ∂_x + ½ Tr[σσᵀ ∂²_xx]` is
//! the generator of the uncontrolled diffusion and `F` is either a Hamiltonian
//! `H(t, x, κ, z)` minimized over controls κ (HJB mode) or a source
//! `f(t, x, v, z, Δv)` (parabolic mode). All diffusions here are diagonal, so
//! the Brownian dimension equals `d`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::autodiff::{Activation, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::par::map_indexed;
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Linear,
    Semilinear,
    AllenCahn,
    Hjb1,
    Hjb2,
    Hjb3,
    ShiftedTarget,
    Perturbed,
}

impl Preset {
    pub const ALL: [Preset; 8] = [
        Preset::Linear,
        Preset::Semilinear,
        Preset::AllenCahn,
        Preset::Hjb1,
        Preset::Hjb2,
        Preset::Hjb3,
        Preset::ShiftedTarget,
        Preset::Perturbed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Linear => "linear",
            Preset::Semilinear => "semilinear",
            Preset::AllenCahn => "allen-cahn",
            Preset::Hjb1 => "hjb-1",
            Preset::Hjb2 => "hjb-2",
            Preset::Hjb3 => "hjb-3",
            Preset::ShiftedTarget => "shifted-target",
            Preset::Perturbed => "perturbed",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::Unknown { kind: "preset", name: name.to_string() })
    }

    pub fn code(self) -> u32 {
        Self::ALL.iter().position(|p| *p == self).unwrap() as u32 + 1
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get((code as usize).checked_sub(1)?).copied()
    }

    /// Parameters a caller may override for this preset.
    pub fn override_keys(self) -> &'static [&'static str] {
        match self {
            Preset::Linear | Preset::AllenCahn => &["T"],
            Preset::Semilinear => &["T", "eps0"],
            Preset::Hjb1 | Preset::Hjb2 | Preset::Hjb3 => &["T", "b", "eps0", "eps1", "c1"],
            Preset::Perturbed => &["T", "b", "eps0", "eps1", "c1", "eps"],
            Preset::ShiftedTarget => &["T", "eps1", "c1", "cg"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Hjb,
    Parabolic,
}

/// Drift of the uncontrolled diffusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Drift {
    /// `μ_i = c`.
    Constant(f64),
    /// `μ_i = sin(2 x_i)`.
    SinDouble,
}

/// Diagonal volatility of the uncontrolled diffusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Diffusion {
    /// `σ_ii = s`.
    Scalar(f64),
    /// `σ_ii = 1 + 0.5 sin(5t + x_i)`.
    Oscillating,
}

/// Terminal functions, with their gradients and Laplacians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Terminal {
    /// `1 + (1/d) Σ sin(T + x_i)`.
    SinSum { horizon: f64 },
    /// `offset + (1/d) Σ [sin(y_i − π/2) + sin(1/(ε₀ + y_i²))]`, `y = x − shift`.
    Oscillatory { eps0: f64, shift: f64, offset: f64 },
    /// `C_g ln(½(1 + Σ (x_i − center)²))`.
    ShiftedLog { cg: f64, center: f64 },
    /// `offset + slope Σ x_i`.
    Affine { offset: f64, slope: f64 },
}

impl Terminal {
    pub fn value(&self, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        match *self {
            Terminal::SinSum { horizon } => 1.0 + x.iter().map(|&xi| math::sin(horizon + xi)).sum::<f64>() / d,
            Terminal::Oscillatory { eps0, shift, offset } => {
                // running mean, so equal coordinates give the one-dimensional value exactly
                let mut mean = 0.0;
                for (k, &xi) in x.iter().enumerate() {
                    let y = xi - shift;
                    let term = math::sin(y - PI / 2.0) + math::sin(1.0 / (eps0 + y * y));
                    mean += (term - mean) / (k + 1) as f64;
                }
                offset + mean
            }
            Terminal::ShiftedLog { cg, center } => {
                let s: f64 = x.iter().map(|&xi| (xi - center) * (xi - center)).sum();
                cg * math::ln(0.5 * (1.0 + s))
            }
            Terminal::Affine { offset, slope } => offset + slope * x.iter().sum::<f64>(),
        }
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len() as f64;
        match *self {
            Terminal::SinSum { horizon } => {
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o = math::cos(horizon + xi) / d;
                }
            }
            Terminal::Oscillatory { eps0, shift, .. } => {
                for (o, &xi) in out.iter_mut().zip(x) {
                    let y = xi - shift;
                    let q = eps0 + y * y;
                    *o = (math::cos(y - PI / 2.0) - math::cos(1.0 / q) * 2.0 * y / (q * q)) / d;
                }
            }
            Terminal::ShiftedLog { cg, center } => {
                let s: f64 = x.iter().map(|&xi| (xi - center) * (xi - center)).sum();
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o = cg * 2.0 * (xi - center) / (1.0 + s);
                }
            }
            Terminal::Affine { slope, .. } => out.iter_mut().for_each(|o| *o = slope),
        }
    }

    pub fn laplacian(&self, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        match *self {
            Terminal::SinSum { horizon } => -x.iter().map(|&xi| math::sin(horizon + xi)).sum::<f64>() / d,
            Terminal::Oscillatory { eps0, shift, .. } => {
                let s: f64 = x
                    .iter()
                    .map(|&xi| {
                        let y = xi - shift;
                        let q = eps0 + y * y;
                        let inv = 1.0 / q;
                        let d1 = -2.0 * y / (q * q);
                        let d2 = -2.0 / (q * q) + 8.0 * y * y / (q * q * q);
                        -math::sin(y - PI / 2.0) - math::sin(inv) * d1 * d1 + math::cos(inv) * d2
                    })
                    .sum();
                s / d
            }
            Terminal::ShiftedLog { cg, center } => {
                let s: f64 = x.iter().map(|&xi| (xi - center) * (xi - center)).sum();
                cg * (2.0 * d / (1.0 + s) - 4.0 * s / ((1.0 + s) * (1.0 + s)))
            }
            Terminal::Affine { .. } => 0.0,
        }
    }
}

/// HJB Hamiltonians `H(t, x, κ, z)` (the generator part lives in `𝓛`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hamiltonian {
    /// `2κᵀz + c₁|κ|² + ε sin(𝟏ᵀκ)`.
    Lq { c1: f64, eps: f64 },
}

/// Parabolic sources `f(t, x, v, z, Δv)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Source {
    /// `−∂_t v* − ½Δv*` for `v* = 1 + (1/d) Σ sin(t + x_i)`.
    Manufactured,
    /// `−|z|²`.
    NegSquaredGradient,
    /// `v − v³ + f̄(t, x)` with `f̄` manufactured from `v*` under the oscillating
    /// generator.
    AllenCahn,
    /// `coef · Δv`.
    Laplacian { coef: f64 },
}

/// Control space of the HJB problems.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlSet {
    Unbounded,
    /// Hard box through the bounded control map.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// Unconstrained network output with a distance-to-box penalty.
    Penalized { lower: Vec<f64>, upper: Vec<f64> },
}

/// Which derivatives of `v` the Hamiltonian or source reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Demand {
    pub gradient: bool,
    pub laplacian: bool,
}

/// Scalar parameters of the problem families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemParams {
    pub b: f64,
    pub c1: f64,
    pub eps0: f64,
    pub eps1: f64,
    pub eps: f64,
    pub cg: f64,
}

impl Default for ProblemParams {
    fn default() -> Self {
        Self { b: 0.0, c1: 1.0, eps0: 0.0, eps1: 0.0, eps: 0.0, cg: 0.0 }
    }
}

/// Start-set families for `X₀`.
#[derive(Debug, Clone, PartialEq)]
pub enum StartKind {
    S1,
    S2,
    S3,
    Union(Vec<StartKind>),
    Fixed(Vec<f64>),
    /// Points drawn from `N(center, variance · I)`.
    Gaussian { center: Vec<f64>, variance: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub preset: Option<Preset>,
    pub d: usize,
    pub horizon: f64,
    pub mode: Mode,
    pub drift: Drift,
    pub diffusion: Diffusion,
    pub terminal: Terminal,
    pub hamiltonian: Option<Hamiltonian>,
    pub source: Option<Source>,
    pub control: ControlSet,
    pub params: ProblemParams,
    pub start: StartKind,
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

const MC_CHUNK: usize = 4096;

pub fn make_problem(preset: Preset, d: usize, overrides: &[(String, f64)]) -> Result<ProblemSpec> {
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    let mut horizon = 1.0;
    let mut p = match preset {
        Preset::Linear | Preset::AllenCahn => ProblemParams::default(),
        Preset::Semilinear => ProblemParams { eps0: PI / 10.0, eps1: 1.0, c1: 1.0, ..Default::default() },
        Preset::Hjb1 => ProblemParams { b: 0.0, eps0: 0.1 * PI, eps1: 1.0, ..Default::default() },
        Preset::Hjb2 | Preset::Perturbed => ProblemParams { b: 1.0, eps0: 0.3 * PI, eps1: 0.2, ..Default::default() },
        Preset::Hjb3 => ProblemParams { b: 1.0, eps0: 0.3 * PI, eps1: 0.1, ..Default::default() },
        Preset::ShiftedTarget => ProblemParams { b: 0.0, eps1: 0.1, cg: 10.0, ..Default::default() },
    };
    let mut c1_override = None;
    for (key, value) in overrides {
        if !preset.override_keys().contains(&key.as_str()) {
            return Err(Error::Unknown { kind: "override", name: key.clone() });
        }
        match key.as_str() {
            "T" => horizon = *value,
            "b" => p.b = *value,
            "eps0" => p.eps0 = *value,
            "eps1" => p.eps1 = *value,
            "eps" => p.eps = *value,
            "cg" => p.cg = *value,
            "c1" => c1_override = Some(*value),
            _ => unreachable!(),
        }
    }
    if !(horizon > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon T must be positive, got {horizon}")));
    }
    let hjb_family = matches!(
        preset,
        Preset::Hjb1 | Preset::Hjb2 | Preset::Hjb3 | Preset::Perturbed | Preset::ShiftedTarget
    );
    if hjb_family {
        if !(p.eps1 > 0.0) {
            return Err(Error::InvalidArgument("eps1 must be positive".into()));
        }
        p.c1 = c1_override.unwrap_or(1.0 / (p.eps1 * p.eps1));
    }

    let spec = match preset {
        Preset::Linear => ProblemSpec {
            preset: Some(preset),
            d,
            horizon,
            mode: Mode::Parabolic,
            drift: Drift::Constant(0.0),
            diffusion: Diffusion::Scalar(1.0),
            terminal: Terminal::SinSum { horizon },
            hamiltonian: None,
            source: Some(Source::Manufactured),
            control: ControlSet::Unbounded,
            params: p,
            start: StartKind::Union(vec![StartKind::S1, StartKind::S2]),
        },
        Preset::Semilinear => ProblemSpec {
            preset: Some(preset),
            d,
            horizon,
            mode: Mode::Parabolic,
            drift: Drift::Constant(0.0),
            diffusion: Diffusion::Scalar(math::sqrt(2.0)),
            terminal: Terminal::Oscillatory { eps0: p.eps0, shift: 0.0, offset: 1.0 },
            hamiltonian: None,
            source: Some(Source::NegSquaredGradient),
            control: ControlSet::Unbounded,
            params: p,
            start: StartKind::Union(vec![StartKind::S1, StartKind::S2]),
        },
        Preset::AllenCahn => ProblemSpec {
            preset: Some(preset),
            d,
            horizon,
            mode: Mode::Parabolic,
            drift: Drift::SinDouble,
            diffusion: Diffusion::Oscillating,
            terminal: Terminal::SinSum { horizon },
            hamiltonian: None,
            source: Some(Source::AllenCahn),
            control: ControlSet::Unbounded,
            params: p,
            start: StartKind::Union(vec![StartKind::S1, StartKind::S2]),
        },
        Preset::Hjb1 | Preset::Hjb2 | Preset::Hjb3 | Preset::Perturbed => ProblemSpec {
            preset: Some(preset),
            d,
            horizon,
            mode: Mode::Hjb,
            drift: Drift::Constant(p.b),
            diffusion: Diffusion::Scalar(math::sqrt(2.0 * p.eps1)),
            terminal: Terminal::Oscillatory { eps0: p.eps0, shift: p.b, offset: 0.0 },
            hamiltonian: Some(Hamiltonian::Lq { c1: p.c1, eps: p.eps }),
            source: None,
            control: ControlSet::Unbounded,
            params: p,
            start: StartKind::Union(vec![StartKind::S2, StartKind::S3]),
        },
        Preset::ShiftedTarget => ProblemSpec {
            preset: Some(preset),
            d,
            horizon,
            mode: Mode::Hjb,
            drift: Drift::Constant(p.b),
            diffusion: Diffusion::Scalar(math::sqrt(2.0 * p.eps1)),
            terminal: Terminal::ShiftedLog { cg: p.cg, center: 3.0 },
            hamiltonian: Some(Hamiltonian::Lq { c1: p.c1, eps: p.eps }),
            source: None,
            control: ControlSet::Unbounded,
            params: p,
            start: StartKind::S2,
        },
    };
    Ok(spec)
}

impl ProblemSpec {
    pub fn name(&self) -> &'static str {
        self.preset.map(Preset::name).unwrap_or("custom")
    }

    /// Control dimension (zero in parabolic mode).
    pub fn control_dim(&self) -> usize {
        match self.mode {
            Mode::Hjb => self.d,
            Mode::Parabolic => 0,
        }
    }

    pub fn demand(&self) -> Demand {
        match self.mode {
            Mode::Hjb => Demand { gradient: true, laplacian: false },
            Mode::Parabolic => match self.source {
                Some(Source::NegSquaredGradient) => Demand { gradient: true, laplacian: false },
                Some(Source::Laplacian { .. }) => Demand { gradient: false, laplacian: true },
                _ => Demand::default(),
            },
        }
    }

    /// Rejects derivative demands the value-net activation cannot serve.
    pub fn check_value_activation(&self, activation: Activation) -> Result<()> {
        if self.demand().laplacian && !activation.is_smooth() {
            return Err(Error::Config(format!(
                "problem `{}` reads ∂²v but the value net uses non-smooth `{}`; choose tanh",
                self.name(),
                activation.name()
            )));
        }
        Ok(())
    }

    pub fn drift(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        match self.drift {
            Drift::Constant(c) => out.iter_mut().for_each(|o| *o = c),
            Drift::SinDouble => {
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o = math::sin(2.0 * xi);
                }
            }
        }
    }

    pub fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self.diffusion {
            Diffusion::Scalar(s) => out.iter_mut().for_each(|o| *o = s),
            Diffusion::Oscillating => {
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o = 1.0 + 0.5 * math::sin(5.0 * t + xi);
                }
            }
        }
    }

    pub fn hamiltonian(&self, kappa: &[f64], z: &[f64]) -> Result<f64> {
        let Some(Hamiltonian::Lq { c1, eps }) = self.hamiltonian else {
            return Err(Error::Contract(format!("problem `{}` has no Hamiltonian", self.name())));
        };
        let mut kz = 0.0;
        let mut kk = 0.0;
        let mut ks = 0.0;
        for (&k, &zi) in kappa.iter().zip(z) {
            kz += k * zi;
            kk += k * k;
            ks += k;
        }
        Ok(2.0 * kz + c1 * kk + eps * math::sin(ks))
    }

    /// Hamiltonian rows from tape controls `κ` and gradients `z`, both `[R x d]`.
    pub fn hamiltonian_tape(&self, tape: &mut Tape, kappa: Var, z: Var) -> Result<Var> {
        let Some(Hamiltonian::Lq { c1, eps }) = self.hamiltonian else {
            return Err(Error::Contract(format!("problem `{}` has no Hamiltonian", self.name())));
        };
        let kz = tape.mul(kappa, z)?;
        let kz = tape.row_sum(kz);
        let kk = tape.sq_norm_rows(kappa)?;
        let a = tape.scale(kz, 2.0);
        let b = tape.scale(kk, c1);
        let mut h = tape.add(a, b)?;
        if eps != 0.0 {
            let ks = tape.row_sum(kappa);
            let s = tape.sin(ks);
            let s = tape.scale(s, eps);
            h = tape.add(h, s)?;
        }
        Ok(h)
    }

    /// The known solution of the manufactured problems.
    pub fn analytic_value(&self, t: f64, x: &[f64]) -> Result<f64> {
        match self.source {
            Some(Source::Manufactured) | Some(Source::AllenCahn) => Ok(true_solution(t, x)),
            _ => Err(Error::NoClosedForm(format!("problem `{}` has no analytic solution", self.name()))),
        }
    }

    /// Part of the source that does not depend on `v`.
    fn source_offset(&self, t: f64, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        match self.source {
            Some(Source::Manufactured) => {
                let (mut c, mut s) = (0.0, 0.0);
                for &xi in x {
                    c += math::cos(t + xi);
                    s += math::sin(t + xi);
                }
                -c / d + 0.5 * s / d
            }
            Some(Source::AllenCahn) => {
                let v = true_solution(t, x);
                let mut dt = 0.0;
                let mut lv = 0.0;
                for &xi in x {
                    let sig = 1.0 + 0.5 * math::sin(5.0 * t + xi);
                    dt += math::cos(t + xi);
                    lv += math::sin(2.0 * xi) * math::cos(t + xi) - 0.5 * sig * sig * math::sin(t + xi);
                }
                -dt / d - lv / d - v + v * v * v
            }
            _ => 0.0,
        }
    }

    pub fn source(&self, t: f64, x: &[f64], v: f64, z: &[f64], lap: f64) -> Result<f64> {
        let src = self
            .source
            .ok_or_else(|| Error::Contract(format!("problem `{}` has no source", self.name())))?;
        Ok(match src {
            Source::Manufactured => self.source_offset(t, x),
            Source::NegSquaredGradient => -z.iter().map(|zi| zi * zi).sum::<f64>(),
            Source::AllenCahn => v - v * v * v + self.source_offset(t, x),
            Source::Laplacian { coef } => coef * lap,
        })
    }

    /// Source rows on the tape. `input` holds `[t, x]` rows; `z` and `lap`
    /// are supplied per [`ProblemSpec::demand`].
    pub fn source_tape(
        &self,
        tape: &mut Tape,
        input: &Matrix,
        v: Var,
        z: Option<Var>,
        lap: Option<Var>,
    ) -> Result<Var> {
        let src = self
            .source
            .ok_or_else(|| Error::Contract(format!("problem `{}` has no source", self.name())))?;
        let offsets = |spec: &Self| {
            let data = (0..input.rows)
                .map(|r| {
                    let row = input.row(r);
                    spec.source_offset(row[0], &row[1..])
                })
                .collect();
            Matrix::column(data)
        };
        match src {
            Source::Manufactured => Ok(tape.constant(offsets(self))),
            Source::NegSquaredGradient => {
                let z = z.ok_or_else(|| Error::Contract("source needs ∂_x v".into()))?;
                let n = tape.sq_norm_rows(z)?;
                Ok(tape.scale(n, -1.0))
            }
            Source::AllenCahn => {
                let v2 = tape.mul(v, v)?;
                let v3 = tape.mul(v2, v)?;
                let diff = tape.sub(v, v3)?;
                let fbar = tape.constant(offsets(self));
                tape.add(diff, fbar)
            }
            Source::Laplacian { coef } => {
                let lap = lap.ok_or_else(|| Error::Contract("source needs Δv".into()))?;
                Ok(tape.scale(lap, coef))
            }
        }
    }

    /// `(κ*, H_min)` of the quadratic Hamiltonian; test oracle only.
    pub fn explicit_hjb_minimizer(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        match self.hamiltonian {
            Some(Hamiltonian::Lq { c1, eps }) if eps == 0.0 => {
                let kappa = z.iter().map(|zi| -zi / c1).collect();
                let h = -z.iter().map(|zi| zi * zi).sum::<f64>() / c1;
                Ok((kappa, h))
            }
            Some(Hamiltonian::Lq { .. }) => {
                Err(Error::NoClosedForm("perturbed Hamiltonian has no closed-form minimizer".into()))
            }
            None => Err(Error::NoClosedForm(format!("problem `{}` has no Hamiltonian", self.name()))),
        }
    }

    /// Running cost `c₁|κ|²` of the control problem.
    pub fn running_cost(&self, kappa: &[f64]) -> f64 {
        self.params.c1 * kappa.iter().map(|k| k * k).sum::<f64>()
    }

    /// Controlled drift `b + 2κ`.
    pub fn controlled_drift(&self, kappa: &[f64], out: &mut [f64]) {
        for (o, k) in out.iter_mut().zip(kappa) {
            *o = self.params.b + 2.0 * k;
        }
    }

    /// Scale `a` of the logarithmic transform `v = −a ln E[exp(−g(X_T)/a)]`,
    /// available when the quadratic problem linearizes.
    pub fn log_transform_scale(&self) -> Option<f64> {
        match (self.mode, self.hamiltonian, self.source) {
            (Mode::Hjb, Some(Hamiltonian::Lq { c1, eps }), _) if eps == 0.0 => Some(self.params.eps1 * c1),
            (Mode::Parabolic, _, Some(Source::NegSquaredGradient)) => {
                // f = −|z|² with σ = s·I is the c₁ = 1 case of the same transform.
                match self.diffusion {
                    Diffusion::Scalar(s) => Some(0.5 * s * s),
                    Diffusion::Oscillating => None,
                }
            }
            _ => None,
        }
    }

    /// Monte-Carlo evaluation of `v(t, x) = −a ln E[exp(−g(X_T^{t,x})/a)]`
    /// with `X_T^{t,x} = x + (T−t)b + √(2ε₁) B_{T−t}`, stabilized by the
    /// log-sum-exp shift. The standard error comes from the delta method.
    pub fn mc_reference_value(&self, t: f64, x: &[f64], samples: usize, seed: u64) -> Result<Estimate> {
        let a = self.log_transform_scale().ok_or_else(|| {
            Error::NoClosedForm(format!("problem `{}` has no log-transform reference", self.name()))
        })?;
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::TimeDomain { t, horizon: self.horizon });
        }
        if samples == 0 {
            return Err(Error::InvalidArgument("need at least one sample".into()));
        }
        if x.len() != self.d {
            return Err(Error::InvalidArgument(format!("state has dimension {}, problem {}", x.len(), self.d)));
        }
        let tau = self.horizon - t;
        if tau == 0.0 {
            return Ok(Estimate { value: self.terminal.value(x), stderr: 0.0 });
        }
        let drift = match self.drift {
            Drift::Constant(c) => c,
            Drift::SinDouble => return Err(Error::NoClosedForm("state-dependent drift".into())),
        };
        let scale = match self.diffusion {
            Diffusion::Scalar(s) => s * math::sqrt(tau),
            Diffusion::Oscillating => return Err(Error::NoClosedForm("state-dependent volatility".into())),
        };
        let chunks = samples.div_ceil(MC_CHUNK);
        let logs: Vec<Vec<f64>> = map_indexed(chunks, |c| {
            let mut r = rng::stream(seed, Domain::Reference, c as u64);
            let n = MC_CHUNK.min(samples - c * MC_CHUNK);
            let mut y = vec![0.0; x.len()];
            (0..n)
                .map(|_| {
                    for (yi, &xi) in y.iter_mut().zip(x) {
                        *yi = xi + tau * drift + scale * rng::normal(&mut r);
                    }
                    -self.terminal.value(&y) / a
                })
                .collect()
        });
        let mut max = f64::NEG_INFINITY;
        for l in logs.iter().flatten() {
            if !l.is_finite() {
                return Err(Error::DegenerateReference("non-finite terminal value in reference".into()));
            }
            max = max.max(*l);
        }
        let n = samples as f64;
        let (mut s1, mut s2) = (0.0, 0.0);
        for l in logs.iter().flatten() {
            let w = math::exp(l - max);
            s1 += w;
            s2 += w * w;
        }
        let mean = s1 / n;
        let var = if samples > 1 { (s2 / n - mean * mean).max(0.0) * n / (n - 1.0) } else { 0.0 };
        let value = -a * (max + math::ln(mean));
        let stderr = a * math::sqrt(var / n) / mean;
        Ok(Estimate { value, stderr })
    }

    /// Reference value at `(t, x)`: analytic when known, otherwise Monte Carlo.
    pub fn reference_value(&self, t: f64, x: &[f64], samples: usize, seed: u64) -> Result<Estimate> {
        match self.analytic_value(t, x) {
            Ok(value) => Ok(Estimate { value, stderr: 0.0 }),
            Err(_) => self.mc_reference_value(t, x, samples, seed),
        }
    }
}

/// `1 + (1/d) Σ sin(t + x_i)`.
pub fn true_solution(t: f64, x: &[f64]) -> f64 {
    1.0 + x.iter().map(|&xi| math::sin(t + xi)).sum::<f64>() / x.len() as f64
}

/// `(∂_t v*, ∇v*, Δv*)` of [`true_solution`].
pub fn true_solution_derivatives(t: f64, x: &[f64], grad: &mut [f64]) -> (f64, f64) {
    let d = x.len() as f64;
    let mut dt = 0.0;
    let mut lap = 0.0;
    for (g, &xi) in grad.iter_mut().zip(x) {
        let c = math::cos(t + xi);
        dt += c;
        *g = c / d;
        lap -= math::sin(t + xi);
    }
    (dt / d, lap / d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hjb1_parameters() {
        let p = make_problem(Preset::Hjb1, 100, &[]).unwrap();
        assert_eq!(p.params.eps1, 1.0);
        assert_eq!(p.params.c1, 1.0);
        let p2 = make_problem(Preset::Hjb2, 3, &[]).unwrap();
        assert!((p2.params.c1 - 25.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_override_is_rejected() {
        let e = make_problem(Preset::Linear, 3, &[("eps".into(), 1.0)]).unwrap_err();
        assert_eq!(e, Error::Unknown { kind: "override", name: "eps".into() });
        assert!(Preset::parse("nope").is_err());
    }

    #[test]
    fn linear_has_unit_volatility() {
        let p = make_problem(Preset::Linear, 3, &[]).unwrap();
        assert_eq!(p.mode, Mode::Parabolic);
        let mut s = [0.0; 3];
        p.diffusion(0.3, &[1.0, 2.0, 3.0], &mut s);
        assert_eq!(s, [1.0; 3]);
    }

    #[test]
    fn minimizer_oracle() {
        let p = make_problem(Preset::Hjb1, 2, &[]).unwrap();
        let (k, h) = p.explicit_hjb_minimizer(&[2.0, 0.0]).unwrap();
        assert_eq!(k, vec![-2.0, 0.0]);
        assert_eq!(h, -4.0);
        let p = make_problem(Preset::Hjb2, 1, &[]).unwrap();
        let (k, h) = p.explicit_hjb_minimizer(&[1.0]).unwrap();
        assert!((k[0] + 1.0 / 25.0).abs() < 1e-15 && (h + 1.0 / 25.0).abs() < 1e-15);
        let pert = make_problem(Preset::Perturbed, 2, &[("eps".into(), 0.5)]).unwrap();
        assert!(matches!(pert.explicit_hjb_minimizer(&[1.0, 1.0]), Err(Error::NoClosedForm(_))));
    }

    #[test]
    fn terminal_derivatives_match_differences() {
        let x = [0.3, -0.7, 1.1];
        let h = 1e-5;
        for g in [
            Terminal::SinSum { horizon: 0.7 },
            Terminal::Oscillatory { eps0: 0.3 * PI, shift: 1.0, offset: 0.5 },
            Terminal::ShiftedLog { cg: 10.0, center: 3.0 },
            Terminal::Affine { offset: 1.0, slope: -2.0 },
        ] {
            let mut grad = [0.0; 3];
            g.gradient(&x, &mut grad);
            let mut lap = 0.0;
            for i in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let fd = (g.value(&xp) - g.value(&xm)) / (2.0 * h);
                assert!((fd - grad[i]).abs() < 1e-8 * (1.0 + fd.abs()), "{g:?}");
                lap += (g.value(&xp) - 2.0 * g.value(&x) + g.value(&xm)) / (h * h);
            }
            assert!((lap - g.laplacian(&x)).abs() < 1e-4 * (1.0 + lap.abs()), "{g:?}: {lap}");
        }
    }

    #[test]
    fn manufactured_sources_make_truth_exact() {
        // ∂_t v* + 𝓛 v* + f(v*) must vanish for both manufactured problems.
        let x = [0.4, -0.2, 0.9, 1.3];
        let t = 0.37;
        let mut z = [0.0; 4];
        let (dt, lap) = true_solution_derivatives(t, &x, &mut z);
        let v = true_solution(t, &x);
        let lin = make_problem(Preset::Linear, 4, &[]).unwrap();
        let r = dt + 0.5 * lap + lin.source(t, &x, v, &z, lap).unwrap();
        assert!(r.abs() < 1e-14);
        let ac = make_problem(Preset::AllenCahn, 4, &[]).unwrap();
        let mut mu = [0.0; 4];
        let mut sig = [0.0; 4];
        ac.drift(t, &x, &mut mu);
        ac.diffusion(t, &x, &mut sig);
        let mut lv = 0.0;
        for i in 0..4 {
            lv += mu[i] * z[i] - 0.5 * sig[i] * sig[i] * math::sin(t + x[i]) / 4.0;
        }
        let r = dt + lv + ac.source(t, &x, v, &z, lap).unwrap();
        assert!(r.abs() < 1e-14);
    }

    #[test]
    fn allen_cahn_source_vanishes_at_one() {
        let ac = make_problem(Preset::AllenCahn, 2, &[]).unwrap();
        let v: f64 = 1.0;
        assert_eq!(v - v * v * v, 0.0);
        // f̄ is evaluated from the truth; at v = 1 only f̄ remains
        let f = ac.source(0.0, &[0.0, 0.0], 1.0, &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(f, ac.source_offset(0.0, &[0.0, 0.0]));
    }

    #[test]
    fn analytic_value_examples() {
        let p = make_problem(Preset::Linear, 5, &[]).unwrap();
        assert_eq!(p.analytic_value(0.0, &[0.0; 5]).unwrap(), 1.0);
        assert!((p.analytic_value(0.0, &[PI / 2.0; 5]).unwrap() - 2.0).abs() < 1e-15);
        assert!((p.analytic_value(1.0, &[0.0; 5]).unwrap() - (1.0 + math::sin(1.0))).abs() < 1e-15);
        let h = make_problem(Preset::Hjb1, 5, &[]).unwrap();
        assert!(h.analytic_value(0.0, &[0.0; 5]).is_err());
    }

    #[test]
    fn oscillatory_terminal_is_dimension_free_on_the_diagonal() {
        for s in [-1.0, -0.3, 0.0, 0.45, 1.0] {
            let g1 = Terminal::Oscillatory { eps0: 0.1 * PI, shift: 0.0, offset: 0.0 }.value(&[s]);
            for d in [2usize, 7, 64] {
                let g = Terminal::Oscillatory { eps0: 0.1 * PI, shift: 0.0, offset: 0.0 }.value(&vec![s; d]);
                assert!((g - g1).abs() <= 4.0 * f64::EPSILON * g1.abs().max(1.0));
            }
        }
    }

    #[test]
    fn mc_reference_terminal_time_is_exact() {
        let p = make_problem(Preset::Hjb2, 3, &[]).unwrap();
        let x = [0.2, 0.1, -0.4];
        let e = p.mc_reference_value(1.0, &x, 1000, 1).unwrap();
        assert_eq!(e.value, p.terminal.value(&x));
        assert_eq!(e.stderr, 0.0);
    }

    #[test]
    fn mc_reference_gaussian_mgf() {
        // v(0,0) = 1 − ln E[exp(−√2 B_1)] = 1 − 1 = 0
        let mut p = make_problem(Preset::Semilinear, 1, &[]).unwrap();
        p.terminal = Terminal::Affine { offset: 1.0, slope: 1.0 };
        let e = p.mc_reference_value(0.0, &[0.0], 200_000, 3).unwrap();
        assert!(e.value.abs() < 4.0 * e.stderr.max(1e-3), "{e:?}");
    }

    #[test]
    fn mc_reference_small_noise_limit() {
        let p = make_problem(Preset::Hjb1, 4, &[("eps1".into(), 1e-8)]).unwrap();
        let x = [0.3, -0.2, 0.5, 0.9];
        let e = p.mc_reference_value(0.0, &x, 2000, 5).unwrap();
        assert!((e.value - p.terminal.value(&x)).abs() < 1e-3);
    }

    #[test]
    fn shifted_target_does_not_overflow() {
        let p = make_problem(Preset::ShiftedTarget, 10, &[]).unwrap();
        let e = p.mc_reference_value(0.0, &[0.0; 10], 4096, 9).unwrap();
        assert!(e.value.is_finite() && e.stderr.is_finite());
        // C_g ln ½ ≤ v ≤ E g(X_T) (Jensen), with E|X_T − 3·1|² = 90 + 10·2ε₁
        assert!(e.value >= 10.0 * math::ln(0.5));
        assert!(e.value <= 10.0 * math::ln(0.5 * (1.0 + 90.0 + 2.0)) + 4.0 * e.stderr, "{e:?}");
    }
}
