//! Central finite-difference check of tape gradients.

use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default symmetric step.
pub const STEP: f32 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f32,
    /// `(index, analytic, numeric)` per checked coordinate.
    pub coords: Vec<(usize, f32, f32)>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f32, numeric: f32) -> f32 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(f: &F, leaf: &Tensor) -> Result<f32>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(leaf);
    let out = f(&mut tape, v)?;
    match tape.value(out) {
        [x] => Ok(*x),
        other => Err(Error::Contract(alloc::format!(
            "grad_check needs a scalar function, got {} values",
            other.len()
        ))),
    }
}

/// Compares the autodiff gradient of `f` at `leaf` against central
/// differences on every coordinate.
pub fn grad_check<F>(f: F, leaf: &Tensor, h: f32) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..leaf.numel()).collect();
    grad_check_coords(f, leaf, h, &all)
}

/// As [`grad_check`] restricted to the coordinates in `coords`.
pub fn grad_check_coords<F>(f: F, leaf: &Tensor, h: f32, coords: &[usize]) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    let mut leaf = leaf.clone();
    leaf.set_requires_grad(true);
    let analytic = {
        let mut tape = Tape::new();
        let v = tape.param(&leaf);
        let out = f(&mut tape, v)?;
        let grads = tape.backward(out)?;
        grads.get(v).expect("trainable leaf has a gradient").to_vec()
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords: Vec::with_capacity(coords.len()),
    };
    for &i in coords {
        let orig = leaf.data()[i];
        leaf.data_mut()[i] = orig + h;
        let up = eval(&f, &leaf)?;
        leaf.data_mut()[i] = orig - h;
        let down = eval(&f, &leaf)?;
        leaf.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        report.max_rel_error = report.max_rel_error.max(err);
        report.coords.push((i, analytic[i], numeric));
    }
    Ok(report)
}
