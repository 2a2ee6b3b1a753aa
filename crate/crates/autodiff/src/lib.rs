//! Reverse-mode differentiation for small dense networks, including
//! gradients of gradients (needed for bi-level meta-gradients).
//!
//! The [`Tape`] records operations on [`Tensor`]s; [`ParamVector`] holds named
//! parameter segments and binds them onto a tape. The free functions in this
//! crate wrap the tape for the common cases: a plain gradient, the mixed
//! second-order vector-Jacobian product `∂/∂ψ [vᵀ ∇_θ f(θ, ψ)]`, and a central
//! finite-difference reference.

mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{adam_step, sgd_step, sgd_step_traced, AdamHyper, AdamState};
pub use params::{ParamVars, ParamVector};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by node #{node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("gradient requested for non-scalar output of shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter structure mismatch: {0}")]
    Structure(String),
    #[error("duplicate parameter segment `{0}`")]
    DuplicateSegment(String),
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

/// Pins a closure to the higher-ranked signature expected by [`grad`] and
/// friends; needed when the closure is bound with `let` before use.
pub fn loss_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &ParamVars<'t>) -> Var<'t>,
{
    f
}

/// Two-argument counterpart of [`loss_fn`], for [`mixed_second_vjp`].
pub fn coupled_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &ParamVars<'t>, &ParamVars<'t>) -> Var<'t>,
{
    f
}

/// Evaluates `loss` at `at` and returns its value and gradient.
pub fn value_and_grad<F>(loss: F, at: &ParamVector) -> Result<(f64, ParamVector), AutodiffError>
where
    F: for<'t> Fn(&'t Tape, &ParamVars<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let params = at.bind(&tape);
    let out = loss(&tape, &params);
    let grads = tape.grad(out, &params.vars(), false)?;
    let value = out.item();
    Ok((value, params.with_same_names(grads).values()))
}

/// `∂loss/∂params` at `at`, with the same segment structure as `at`.
pub fn grad<F>(loss: F, at: &ParamVector) -> Result<ParamVector, AutodiffError>
where
    F: for<'t> Fn(&'t Tape, &ParamVars<'t>) -> Var<'t>,
{
    value_and_grad(loss, at).map(|(_, g)| g)
}

/// `∂/∂ψ [ vᵀ ∇_θ loss(θ, ψ) ]`: the product of `v` with the mixed block
/// `∂²loss/∂ψ∂θ`.
pub fn mixed_second_vjp<F>(
    v: &ParamVector,
    loss: F,
    theta: &ParamVector,
    psi: &ParamVector,
) -> Result<ParamVector, AutodiffError>
where
    F: for<'t> Fn(&'t Tape, &ParamVars<'t>, &ParamVars<'t>) -> Var<'t>,
{
    theta.check_structure(v)?;
    let tape = Tape::new();
    let th = theta.bind(&tape);
    let ps = psi.bind(&tape);
    let out = loss(&tape, &th, &ps);
    let g_theta = th.with_same_names(tape.grad(out, &th.vars(), true)?);
    let v_vars = v.bind_const(&tape);
    let inner = g_theta.dot(&v_vars);
    let g_psi = tape.grad(inner, &ps.vars(), false)?;
    Ok(ps.with_same_names(g_psi).values())
}

/// Evaluates `loss` at `at` with no gradient bookkeeping.
pub fn eval<F>(loss: F, at: &ParamVector) -> Result<f64, AutodiffError>
where
    F: for<'t> Fn(&'t Tape, &ParamVars<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let params = at.bind_const(&tape);
    let out = loss(&tape, &params);
    tape.check()?;
    Ok(out.item())
}

/// Central differences, one coordinate at a time. Uses forward evaluation
/// only, so it serves as an independent reference for [`grad`].
pub fn finite_diff_grad<F>(loss: F, at: &ParamVector, step: f64) -> Result<ParamVector, AutodiffError>
where
    F: for<'t> Fn(&'t Tape, &ParamVars<'t>) -> Var<'t>,
{
    if !(step > 0.0) {
        return Err(AutodiffError::BadStep(step));
    }
    let base = at.flatten();
    let mut out = vec![0.0; base.len()];
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + step;
        let hi = eval(&loss, &at.unflatten(&probe)?)?;
        probe[i] = base[i] - step;
        let lo = eval(&loss, &at.unflatten(&probe)?)?;
        probe[i] = base[i];
        out[i] = (hi - lo) / (2.0 * step);
    }
    at.unflatten(&out)
}

/// Largest coordinate-wise relative error `|a-b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &ParamVector, b: &ParamVector, floor: f64) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
