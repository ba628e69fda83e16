//! Value, control and test networks.
//!
//! All three read the space-time point as one row `[t, x₁, …, x_d]`, with `t`
//! fed raw.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Activation, Matrix, Mlp, MlpVars, ParamVector, Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::problems::{ControlSet, Terminal};
use crate::rng::{self, Domain};

/// Packs `(t, x)` into a single input row.
pub fn space_time_row(t: f64, x: &[f64]) -> Matrix {
    let mut data = Vec::with_capacity(x.len() + 1);
    data.push(t);
    data.extend_from_slice(x);
    Matrix::from_vec(1, x.len() + 1, data)
}

/// `v_θ(t, x) = φ_θ(t, x)` for `t < T` and `g(x)` at `t = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    pub graph: Mlp,
    pub params: ParamVector,
    pub terminal: Terminal,
    pub horizon: f64,
}

impl ValueNet {
    pub fn d(&self) -> usize {
        self.graph.input_dim() - 1
    }

    pub fn value_eval(&self, t: f64, x: &[f64]) -> Result<f64> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::TimeDomain { t, horizon: self.horizon });
        }
        if t == self.horizon {
            return Ok(self.terminal.value(x));
        }
        Ok(self.graph.forward(&self.params, &space_time_row(t, x))?.data[0])
    }

    /// Clamped values for a batch of `[t, x]` rows.
    pub fn values(&self, rows: &Matrix) -> Result<Vec<f64>> {
        let phi = self.graph.forward(&self.params, rows)?;
        (0..rows.rows)
            .map(|r| {
                let row = rows.row(r);
                let t = row[0];
                if !(0.0..=self.horizon).contains(&t) {
                    Err(Error::TimeDomain { t, horizon: self.horizon })
                } else if t == self.horizon {
                    Ok(self.terminal.value(&row[1..]))
                } else {
                    Ok(phi.data[r])
                }
            })
            .collect()
    }

    /// `∂_x v_θ` rows (`[R x d]`), respecting the terminal clamp.
    pub fn gradients(&self, rows: &Matrix) -> Result<Matrix> {
        let full = self.graph.input_gradient(&self.params, rows)?;
        let d = self.d();
        let mut out = Matrix::zeros(rows.rows, d);
        for r in 0..rows.rows {
            let row = rows.row(r);
            if row[0] == self.horizon {
                self.terminal.gradient(&row[1..], out.row_mut(r));
            } else {
                out.row_mut(r).copy_from_slice(&full.row(r)[1..]);
            }
        }
        Ok(out)
    }
}

/// `u_α = a + (b − a)/6 · ReLU6(ψ_α)` on a box, `ψ_α` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlNet {
    pub graph: Mlp,
    pub params: ParamVector,
    pub range: ControlSet,
}

impl ControlNet {
    pub fn m(&self) -> usize {
        self.graph.output_dim()
    }

    fn bounds(&self) -> Option<(&[f64], &[f64])> {
        match &self.range {
            ControlSet::Box { lower, upper } => Some((lower, upper)),
            _ => None,
        }
    }

    /// Applies the bounded map to raw network outputs in place.
    pub fn map_outputs(&self, psi: &mut Matrix) {
        if let Some((a, b)) = self.bounds() {
            for r in 0..psi.rows {
                for (j, v) in psi.row_mut(r).iter_mut().enumerate() {
                    *v = a[j] + (b[j] - a[j]) / 6.0 * Activation::Relu6.eval(0, *v);
                }
            }
        }
    }

    pub fn controls(&self, rows: &Matrix) -> Result<Matrix> {
        let mut psi = self.graph.forward(&self.params, rows)?;
        self.map_outputs(&mut psi);
        Ok(psi)
    }

    pub fn control_eval(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.controls(&space_time_row(t, x))?.data)
    }

    /// Records `u_α` on the tape for the given input rows.
    pub fn record(&self, tape: &mut Tape, vars: &MlpVars, input: Var) -> Result<Var> {
        let psi = self.graph.record(tape, vars, input)?.output();
        match self.bounds() {
            None => Ok(psi),
            Some((a, b)) => {
                let r6 = tape.act(psi, Activation::Relu6, 0);
                let scale = tape.constant(Matrix::row_vector(a.iter().zip(b).map(|(a, b)| (b - a) / 6.0).collect()));
                let lower = tape.constant(Matrix::row_vector(a.to_vec()));
                let u = tape.mul_row(r6, scale)?;
                tape.add_row(u, lower)
            }
        }
    }
}

/// `ρ_η(t, x) = sin(W₁ t + W₂ x + b) ∈ [−1, 1]^r`.
#[derive(Debug, Clone, PartialEq)]
pub struct TestNet {
    pub graph: Mlp,
    pub params: ParamVector,
}

impl TestNet {
    pub fn new(d: usize, r: usize) -> Self {
        let graph = Mlp::new(d + 1, &[], r, Activation::Identity, Activation::Sin);
        let params = graph.zero_params();
        Self { graph, params }
    }

    pub fn r(&self) -> usize {
        self.graph.output_dim()
    }

    pub fn features(&self, rows: &Matrix) -> Result<Matrix> {
        self.graph.forward(&self.params, rows)
    }

    pub fn test_features(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.features(&space_time_row(t, x))?.data)
    }
}

/// Shapes of the three networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub d: usize,
    /// Control dimension; zero for parabolic problems (no control net).
    pub m: usize,
    pub width: usize,
    pub depth: usize,
    pub r: usize,
    pub value_activation: Activation,
    pub control_activation: Activation,
}

impl Architecture {
    /// Hidden width `d + 10`, six ReLU hidden layers.
    pub fn standard(d: usize, m: usize, r: usize) -> Self {
        Self {
            d,
            m,
            width: d + 10,
            depth: 6,
            r,
            value_activation: Activation::Relu,
            control_activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkBundle {
    pub value: ValueNet,
    pub control: Option<ControlNet>,
    pub test: TestNet,
}

fn he_normal(graph: &Mlp, seed: u64, index: u64) -> ParamVector {
    let mut p = graph.zero_params();
    let mut r = rng::stream(seed, Domain::Init, index);
    for l in 0..graph.layers().len() {
        let e = graph.layout().weight(l);
        let sd = math::sqrt(2.0 / e.cols as f64);
        for w in p.slice_mut(e) {
            *w = sd * rng::normal(&mut r);
        }
    }
    p
}

pub fn init_networks(
    arch: &Architecture,
    terminal: Terminal,
    horizon: f64,
    range: ControlSet,
    seed: u64,
) -> Result<NetworkBundle> {
    if arch.width == 0 || arch.r == 0 || arch.d == 0 {
        return Err(Error::InvalidArgument("width, r and d must be at least 1".into()));
    }
    if let ControlSet::Box { lower, upper } | ControlSet::Penalized { lower, upper } = &range {
        if lower.len() != arch.m || upper.len() != arch.m {
            return Err(Error::InvalidArgument(format!("control box must have {} bounds", arch.m)));
        }
        if matches!(range, ControlSet::Box { .. }) && lower.iter().zip(upper).any(|(a, b)| !(a < b)) {
            return Err(Error::InvalidArgument("bounded controls need a < b componentwise".into()));
        }
    }
    let hidden = vec![arch.width; arch.depth];
    let vgraph = Mlp::new(arch.d + 1, &hidden, 1, arch.value_activation, Activation::Identity);
    let value = ValueNet { params: he_normal(&vgraph, seed, 0), graph: vgraph, terminal, horizon };
    let control = if arch.m > 0 {
        let cgraph = Mlp::new(arch.d + 1, &hidden, arch.m, arch.control_activation, Activation::Identity);
        Some(ControlNet { params: he_normal(&cgraph, seed, 1), graph: cgraph, range })
    } else {
        None
    };
    let mut test = TestNet::new(arch.d, arch.r);
    let mut r = rng::stream(seed, Domain::Init, 2);
    test.params.data.iter_mut().for_each(|v| *v = rng::normal(&mut r));
    Ok(NetworkBundle { value, control, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;

    fn bundle(seed: u64, range: ControlSet) -> NetworkBundle {
        let arch = Architecture::standard(2, 2, 5);
        init_networks(&arch, Terminal::SinSum { horizon: 1.0 }, 1.0, range, seed).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let a = bundle(3, ControlSet::Unbounded);
        let b = bundle(3, ControlSet::Unbounded);
        let c = bundle(4, ControlSet::Unbounded);
        assert_eq!(a, b);
        assert_ne!(a.value.params, c.value.params);
        assert_eq!(a.value.params.len(), a.value.graph.layout().len());
        assert!(a.value.params.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn terminal_clamp_and_domain() {
        let n = bundle(1, ControlSet::Unbounded);
        let x = [0.0, 0.0];
        assert_eq!(n.value.value_eval(1.0, &x).unwrap(), 1.0 + math::sin(1.0));
        let near = n.value.value_eval(1.0 - 1e-12, &x).unwrap();
        let phi = n.value.graph.forward(&n.value.params, &space_time_row(1.0 - 1e-12, &x)).unwrap();
        assert_eq!(near, phi.data[0]);
        assert!(matches!(n.value.value_eval(1.5, &x), Err(Error::TimeDomain { .. })));
        assert!(n.value.value_eval(-0.1, &x).is_err());
        let mut z = n.value.clone();
        z.params.data.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(z.value_eval(0.3, &x).unwrap(), 0.0);
    }

    #[test]
    fn bounded_control_map() {
        let range = ControlSet::Box { lower: vec![-1.0, 0.0], upper: vec![1.0, 3.0] };
        let n = bundle(1, range);
        let c = n.control.unwrap();
        let mut m = Matrix::from_vec(3, 2, vec![0.0, 0.0, 6.0, 3.0, -5.0, 9.0]);
        c.map_outputs(&mut m);
        assert_eq!(m.data, vec![-1.0, 0.0, 1.0, 1.5, -1.0, 3.0]);
    }

    #[test]
    fn test_features_examples() {
        let mut t = TestNet::new(3, 2);
        assert_eq!(t.test_features(0.4, &[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        // W₁ = π/(2T) on the first feature
        let w = t.graph.layout().weight(0);
        t.params.slice_mut(w)[0] = PI / 2.0;
        assert_eq!(t.test_features(1.0, &[0.0; 3]).unwrap()[0], 1.0);
    }
}
