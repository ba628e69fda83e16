//! Differentiation engine.
//!
//! [`Mlp`] is the network graph: immutable, one fused affine+activation node
//! per layer, evaluated against a separate [`ParamVector`]. It offers direct
//! sweeps for values, input gradients and input Hessians. [`Tape`] records the
//! same computations as matrix operations so that scalar losses built from
//! network values *and their input derivatives* can be differentiated with
//! respect to all parameters.

mod activation;
mod matrix;
mod mlp;
mod tape;

pub use activation::Activation;
pub use matrix::{affine, gemm_acc, Matrix};
pub use mlp::{
    GradientTrace, HessianBatch, LayerShape, Layout, LayoutEntry, Mlp, MlpTrace, MlpVars, ParamVector, Slot,
};
pub use tape::{Gradients, Op, Tape, Var};

use crate::error::Result;

/// Evaluates `graph` on the rows of `input`.
pub fn forward_eval(graph: &Mlp, params: &ParamVector, input: &Matrix) -> Result<Matrix> {
    graph.forward(params, input)
}

/// Per-row gradient of a scalar-output graph with respect to its input.
pub fn input_gradient(graph: &Mlp, params: &ParamVector, input: &Matrix) -> Result<Matrix> {
    graph.input_gradient(params, input)
}

/// Per-row Hessian with respect to every input column.
pub fn input_hessian(graph: &Mlp, params: &ParamVector, input: &Matrix) -> Result<HessianBatch> {
    graph.input_hessian(params, input, 0..graph.input_dim())
}

/// Gradient of the scalar `loss` recorded on `tape` with respect to the
/// parameters bound as `vars`. Parameters the loss never reaches get zeros.
pub fn loss_parameter_gradient(
    tape: &Tape,
    loss: Var,
    graph: &Mlp,
    vars: &MlpVars,
) -> Result<ParamVector> {
    let grads = tape.backward(&[(loss, Matrix::scalar(1.0))])?;
    let mut out = graph.zero_params();
    graph.collect(&grads, vars, &mut out.data);
    Ok(out)
}
