//! Layered feed-forward graph with one fused affine+activation node per
//! layer, its flat parameter vector, and direct (tape-free) sweeps for input
//! gradients and input Hessians.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use super::activation::Activation;
use super::matrix::{affine, gemm_acc, Matrix};
use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Weight,
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutEntry {
    pub layer: usize,
    pub slot: Slot,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Map from (layer, weight/bias) to a slice of the flat parameter vector.
/// Weights are `outputs x inputs` row-major, biases `1 x outputs`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    len: usize,
}

impl Layout {
    fn for_layers(layers: &[LayerShape]) -> Self {
        let mut entries = Vec::with_capacity(2 * layers.len());
        let mut offset = 0;
        for (l, s) in layers.iter().enumerate() {
            entries.push(LayoutEntry { layer: l, slot: Slot::Weight, offset, rows: s.outputs, cols: s.inputs });
            offset += s.outputs * s.inputs;
            entries.push(LayoutEntry { layer: l, slot: Slot::Bias, offset, rows: 1, cols: s.outputs });
            offset += s.outputs;
        }
        Self { entries, len: offset }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn weight(&self, layer: usize) -> LayoutEntry {
        self.entries[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> LayoutEntry {
        self.entries[2 * layer + 1]
    }

    /// Entries tile `0..len` contiguously without gaps or overlaps.
    pub fn is_exact_cover(&self) -> bool {
        let mut next = 0;
        for e in &self.entries {
            if e.offset != next {
                return false;
            }
            next += e.len();
        }
        next == self.len
    }
}

/// Flat parameter sequence together with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub data: Vec<f64>,
    layout: Layout,
}

impl ParamVector {
    pub fn zeros(layout: Layout) -> Self {
        Self { data: vec![0.0; layout.len()], layout }
    }

    pub fn from_data(layout: Layout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter payload has {} entries, layout expects {}",
                data.len(),
                layout.len()
            )));
        }
        Ok(Self { data, layout })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn slice(&self, e: LayoutEntry) -> &[f64] {
        &self.data[e.range()]
    }

    pub fn slice_mut(&mut self, e: LayoutEntry) -> &mut [f64] {
        &mut self.data[e.range()]
    }

    pub fn matrix(&self, e: LayoutEntry) -> Matrix {
        Matrix::from_vec(e.rows, e.cols, self.slice(e).to_vec())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

/// Tape handles of a bound parameter vector.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

/// Tape handles produced by [`Mlp::record`].
#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub input: Var,
    pub pre: Vec<Var>,
    pub post: Vec<Var>,
}

impl MlpTrace {
    pub fn output(&self) -> Var {
        *self.post.last().expect("at least one layer")
    }
}

/// Tape handles of a recorded reverse sweep.
#[derive(Debug, Clone)]
pub struct GradientTrace {
    /// `∂ output / ∂ input`, `[R x inputs]`.
    pub grad: Var,
    /// Adjoint entering each layer's input, index `l` for layers `1..L`.
    pub layer_inputs: Vec<Option<Var>>,
}

/// Per-sample Hessians over a contiguous block of input columns.
#[derive(Debug, Clone)]
pub struct HessianBatch {
    pub dim: usize,
    pub rows: usize,
    /// `rows x dim x dim`, symmetrized.
    pub data: Vec<f64>,
    /// Samples with a piecewise-linear unit exactly at a kink.
    pub nondifferentiable: Vec<bool>,
    /// Largest `|H_ij - H_ji|` before symmetrization.
    pub max_asymmetry: f64,
}

impl HessianBatch {
    pub fn sample(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim * self.dim..(r + 1) * self.dim * self.dim]
    }
}

/// Feed-forward network graph. Immutable; parameters live in a separate
/// [`ParamVector`] so many evaluations may share one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<LayerShape>,
    layout: Layout,
}

struct ForwardCache {
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
}

impl Mlp {
    pub fn new(
        inputs: usize,
        hidden: &[usize],
        outputs: usize,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = inputs;
        for &w in hidden {
            layers.push(LayerShape { inputs: prev, outputs: w, activation: hidden_activation });
            prev = w;
        }
        layers.push(LayerShape { inputs: prev, outputs, activation: output_activation });
        Self::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<LayerShape>) -> Self {
        assert!(!layers.is_empty(), "graph needs at least one layer");
        for pair in layers.windows(2) {
            assert_eq!(pair[0].outputs, pair[1].inputs, "layer widths must chain");
        }
        let layout = Layout::for_layers(&layers);
        Self { layers, layout }
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    pub fn zero_params(&self) -> ParamVector {
        ParamVector::zeros(self.layout.clone())
    }

    fn check(&self, params: &ParamVector, x: &Matrix) -> Result<()> {
        if params.layout() != &self.layout {
            return Err(Error::ShapeMismatch { node: 0, detail: "parameter layout does not match graph".into() });
        }
        if x.cols != self.input_dim() {
            return Err(Error::ShapeMismatch {
                node: 0,
                detail: format!("input has {} columns, graph expects {}", x.cols, self.input_dim()),
            });
        }
        Ok(())
    }

    fn forward_cache(&self, params: &ParamVector, x: &Matrix) -> ForwardCache {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for (l, s) in self.layers.iter().enumerate() {
            let input = if l == 0 { x } else { &post[l - 1] };
            let w = params.matrix(self.layout.weight(l));
            let z = affine(input, &w, params.slice(self.layout.bias(l)));
            let a = if s.activation == Activation::Identity {
                z.clone()
            } else {
                let data = s.activation.map(0, &z.data, None);
                Matrix::from_vec(z.rows, z.cols, data)
            };
            pre.push(z);
            post.push(a);
        }
        ForwardCache { pre, post }
    }

    /// Batched evaluation, one sample per row of `x`.
    pub fn forward(&self, params: &ParamVector, x: &Matrix) -> Result<Matrix> {
        self.check(params, x)?;
        let mut cache = self.forward_cache(params, x);
        Ok(cache.post.pop().expect("non-empty"))
    }

    fn require_scalar(&self) -> Result<()> {
        if self.output_dim() != 1 {
            return Err(Error::Contract(format!(
                "input derivatives need a scalar output, graph has {}",
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// Reverse sweep; `layer_inputs[l]` is the adjoint of layer `l`'s input.
    fn reverse(&self, params: &ParamVector, cache: &ForwardCache) -> Vec<Matrix> {
        let nl = self.layers.len();
        let rows = cache.pre[0].rows;
        let last = self.layers[nl - 1].activation;
        let mut delta = Matrix::from_vec(
            rows,
            1,
            cache.pre[nl - 1].data.iter().map(|&y| last.eval(1, y)).collect(),
        );
        let mut adj_in: Vec<Matrix> = (0..nl).map(|_| Matrix::zeros(0, 0)).collect();
        for l in (0..nl).rev() {
            let w = params.matrix(self.layout.weight(l));
            let mut g = Matrix::zeros(rows, w.cols);
            gemm_acc(&delta, false, &w, false, &mut g);
            if l > 0 {
                let act = self.layers[l - 1].activation;
                let z = &cache.pre[l - 1];
                let data = act.map(1, &z.data, Some(&g.data));
                delta = Matrix::from_vec(g.rows, g.cols, data);
            }
            adj_in[l] = g;
        }
        adj_in
    }

    /// `∂ output / ∂ input` per row for a scalar-output graph.
    pub fn input_gradient(&self, params: &ParamVector, x: &Matrix) -> Result<Matrix> {
        self.check(params, x)?;
        self.require_scalar()?;
        let cache = self.forward_cache(params, x);
        let mut adj = self.reverse(params, &cache);
        Ok(adj.swap_remove(0))
    }

    /// Output values and input gradients in one pass.
    pub fn value_and_gradient(&self, params: &ParamVector, x: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check(params, x)?;
        self.require_scalar()?;
        let cache = self.forward_cache(params, x);
        let mut adj = self.reverse(params, &cache);
        let value = cache.post[cache.post.len() - 1].clone();
        Ok((value, adj.swap_remove(0)))
    }

    /// Hessian of the scalar output with respect to the input columns in
    /// `cols`, by one forward-over-reverse sweep per column.
    pub fn input_hessian(&self, params: &ParamVector, x: &Matrix, cols: Range<usize>) -> Result<HessianBatch> {
        self.check(params, x)?;
        self.require_scalar()?;
        if cols.end > self.input_dim() || cols.start > cols.end {
            return Err(Error::InvalidArgument(format!("hessian columns {cols:?} out of range")));
        }
        let nl = self.layers.len();
        let rows = x.rows;
        let k = cols.len();
        let cache = self.forward_cache(params, x);
        let adj_in = self.reverse(params, &cache);
        let weights: Vec<Matrix> = (0..nl).map(|l| params.matrix(self.layout.weight(l))).collect();

        let mut nondifferentiable = vec![false; rows];
        for (l, s) in self.layers.iter().enumerate() {
            if s.activation.is_smooth() {
                continue;
            }
            let z = &cache.pre[l];
            for (r, flag) in nondifferentiable.iter_mut().enumerate() {
                if z.row(r).iter().any(|&y| s.activation.at_kink(y)) {
                    *flag = true;
                }
            }
        }

        let mut raw = vec![0.0; rows * k * k];
        for (ci, c) in cols.clone().enumerate() {
            // forward tangents along e_c
            let mut zdot: Vec<Matrix> = Vec::with_capacity(nl);
            for l in 0..nl {
                let w = &weights[l];
                let z = if l == 0 {
                    let mut m = Matrix::zeros(rows, w.rows);
                    for r in 0..rows {
                        for j in 0..w.rows {
                            m.set(r, j, w.get(j, c));
                        }
                    }
                    m
                } else {
                    let act = self.layers[l - 1].activation;
                    let prev = &zdot[l - 1];
                    let zp = &cache.pre[l - 1];
                    let adot_data = prev.data.iter().zip(&zp.data).map(|(t, &y)| t * act.eval(1, y)).collect();
                    let adot = Matrix::from_vec(prev.rows, prev.cols, adot_data);
                    let mut m = Matrix::zeros(rows, w.rows);
                    gemm_acc(&adot, false, w, true, &mut m);
                    m
                };
                zdot.push(z);
            }
            // reverse tangents
            let last = self.layers[nl - 1].activation;
            let mut ddelta = Matrix::from_vec(
                rows,
                1,
                zdot[nl - 1]
                    .data
                    .iter()
                    .zip(&cache.pre[nl - 1].data)
                    .map(|(t, &y)| t * last.eval(2, y))
                    .collect(),
            );
            let mut gdot = Matrix::zeros(0, 0);
            for l in (0..nl).rev() {
                let w = &weights[l];
                let mut g = Matrix::zeros(rows, w.cols);
                gemm_acc(&ddelta, false, w, false, &mut g);
                if l > 0 {
                    let act = self.layers[l - 1].activation;
                    let z = &cache.pre[l - 1];
                    let gl = &adj_in[l];
                    let zt = &zdot[l - 1];
                    let mut next = Matrix::zeros(g.rows, g.cols);
                    for i in 0..next.data.len() {
                        let y = z.data[i];
                        let mut v = g.data[i] * act.eval(1, y);
                        if !act.vanishes(2) {
                            v += gl.data[i] * act.eval(2, y) * zt.data[i];
                        }
                        next.data[i] = v;
                    }
                    ddelta = next;
                }
                gdot = g;
            }
            for r in 0..rows {
                for (cj, c2) in cols.clone().enumerate() {
                    raw[r * k * k + cj * k + ci] = gdot.get(r, c2);
                }
            }
        }

        let mut max_asymmetry: f64 = 0.0;
        let mut data = raw.clone();
        for r in 0..rows {
            let h = &raw[r * k * k..(r + 1) * k * k];
            let out = &mut data[r * k * k..(r + 1) * k * k];
            for i in 0..k {
                for j in 0..k {
                    max_asymmetry = max_asymmetry.max((h[i * k + j] - h[j * k + i]).abs());
                    out[i * k + j] = 0.5 * (h[i * k + j] + h[j * k + i]);
                }
            }
        }
        Ok(HessianBatch { dim: k, rows, data, nondifferentiable, max_asymmetry })
    }

    /// Puts the parameters on the tape as leaves (tracked when `trainable`).
    pub fn bind(&self, tape: &mut Tape, params: &ParamVector, trainable: bool) -> MlpVars {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let w = params.matrix(self.layout.weight(l));
            let b = params.matrix(self.layout.bias(l));
            if trainable {
                weights.push(tape.param(w));
                biases.push(tape.param(b));
            } else {
                weights.push(tape.constant(w));
                biases.push(tape.constant(b));
            }
        }
        MlpVars { weights, biases }
    }

    pub fn record(&self, tape: &mut Tape, vars: &MlpVars, input: Var) -> Result<MlpTrace> {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut h = input;
        for (l, s) in self.layers.iter().enumerate() {
            let z = tape.affine(h, vars.weights[l], vars.biases[l])?;
            let a = if s.activation == Activation::Identity { z } else { tape.act(z, s.activation, 0) };
            pre.push(z);
            post.push(a);
            h = a;
        }
        Ok(MlpTrace { input, pre, post })
    }

    /// Records the reverse sweep of a scalar-output graph so that the input
    /// gradient itself can be differentiated with respect to parameters.
    pub fn record_input_gradient(&self, tape: &mut Tape, vars: &MlpVars, trace: &MlpTrace) -> Result<GradientTrace> {
        self.require_scalar()?;
        let nl = self.layers.len();
        let rows = tape.shape(trace.input).0;
        let last = self.layers[nl - 1].activation;
        let mut delta = if last == Activation::Identity {
            tape.constant(Matrix::filled(rows, 1, 1.0))
        } else {
            tape.act(trace.pre[nl - 1], last, 1)
        };
        let mut layer_inputs = vec![None; nl];
        let mut grad = delta;
        for l in (0..nl).rev() {
            let g = tape.matmul(delta, false, vars.weights[l], false)?;
            if l > 0 {
                let act = self.layers[l - 1].activation;
                let s = tape.act(trace.pre[l - 1], act, 1);
                delta = tape.mul(g, s)?;
                layer_inputs[l] = Some(g);
            } else {
                grad = g;
            }
        }
        Ok(GradientTrace { grad, layer_inputs })
    }

    /// Records one forward-over-reverse sweep per column in `cols`. Entry `i`
    /// of the result is `[R x inputs]` holding `∂/∂x_c ∂ output/∂ input` for
    /// `c = cols.start + i`.
    pub fn record_input_hessian(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        trace: &MlpTrace,
        grad: &GradientTrace,
        cols: Range<usize>,
    ) -> Result<Vec<Var>> {
        self.require_scalar()?;
        let nl = self.layers.len();
        let rows = tape.shape(trace.input).0;
        let inputs = self.input_dim();
        let mut out = Vec::with_capacity(cols.len());
        for c in cols {
            let mut onehot = Matrix::zeros(rows, inputs);
            for r in 0..rows {
                onehot.set(r, c, 1.0);
            }
            let e = tape.constant(onehot);
            let mut zdot = Vec::with_capacity(nl);
            let mut t = e;
            for l in 0..nl {
                let z = tape.matmul(t, false, vars.weights[l], true)?;
                zdot.push(z);
                if l + 1 < nl {
                    let s = tape.act(trace.pre[l], self.layers[l].activation, 1);
                    t = tape.mul(z, s)?;
                }
            }
            let last = self.layers[nl - 1].activation;
            let mut ddelta = if last.vanishes(2) {
                tape.constant(Matrix::zeros(rows, 1))
            } else {
                let s2 = tape.act(trace.pre[nl - 1], last, 2);
                tape.mul(zdot[nl - 1], s2)?
            };
            let mut gdot = ddelta;
            for l in (0..nl).rev() {
                let g = tape.matmul(ddelta, false, vars.weights[l], false)?;
                if l > 0 {
                    let act = self.layers[l - 1].activation;
                    let s1 = tape.act(trace.pre[l - 1], act, 1);
                    let mut next = tape.mul(g, s1)?;
                    if !act.vanishes(2) {
                        let s2 = tape.act(trace.pre[l - 1], act, 2);
                        let gl = grad.layer_inputs[l].expect("recorded for l > 0");
                        let curv = tape.mul(gl, s2)?;
                        let curv = tape.mul(curv, zdot[l - 1])?;
                        next = tape.add(next, curv)?;
                    }
                    ddelta = next;
                } else {
                    gdot = g;
                }
            }
            out.push(gdot);
        }
        Ok(out)
    }

    /// Gathers parameter adjoints into a flat vector laid out like the params.
    pub fn collect(&self, grads: &Gradients, vars: &MlpVars, out: &mut [f64]) {
        for l in 0..self.layers.len() {
            grads.write(vars.weights[l], &mut out[self.layout.weight(l).range()]);
            grads.write(vars.biases[l], &mut out[self.layout.bias(l).range()]);
        }
    }
}
