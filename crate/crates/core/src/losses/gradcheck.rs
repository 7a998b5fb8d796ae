//! Central finite-difference gradient checker (double precision).

use candle_core::{DType, Tensor, Var, D};

use crate::error::{PdfnetError, Result};
use crate::ops;

pub const FD_STEP: f64 = 1e-5;
/// Lower bound on the denominator of the relative error, so entries whose true
/// gradient is zero are judged by absolute error at this scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

/// Compares reverse-mode gradients of the scalar `f` at `x` with central
/// differences of step `step`. `x` is promoted to f64.
pub fn check_gradient<F>(f: F, x: &Tensor, step: f64) -> Result<GradCheck>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let x = x.to_dtype(DType::F64)?;
    let var = Var::from_tensor(&x)?;
    let y = f(var.as_tensor())?;
    if y.elem_count() != 1 {
        return Err(PdfnetError::shape(format!("gradcheck needs a scalar, got {:?}", y.dims())));
    }
    let grads = y.backward()?;
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => ops::to_f64_vec(g)?,
        None => vec![0.0; x.elem_count()],
    };

    let base = ops::to_f64_vec(&x)?;
    let shape = x.shape().clone();
    let eval = |v: &[f64]| -> Result<f64> {
        let t = Tensor::from_slice(v, shape.clone(), x.device())?;
        ops::scalar_f64(&f(&t)?)
    };
    let mut numeric = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + step;
        let up = eval(&probe)?;
        probe[i] = base[i] - step;
        let down = eval(&probe)?;
        probe[i] = base[i];
        numeric.push((up - down) / (2.0 * step));
    }

    summarize(analytic, numeric)
}

fn summarize(analytic: Vec<f64>, numeric: Vec<f64>) -> Result<GradCheck> {
    let (mut max_rel_err, mut worst_index) = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(*a, *n);
        if !e.is_finite() {
            return Err(PdfnetError::Numerics(format!("gradient entry {i} is not finite")));
        }
        if e > max_rel_err {
            max_rel_err = e;
            worst_index = i;
        }
    }
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_err,
        worst_index,
    })
}

/// Batched variant of [`check_gradient`]. `f` maps a batch of inputs with
/// shape `(B, ..x.shape)` to a `(B, K)` matrix whose row sums are the scalar
/// under test, one column per summand. Every `±step` probe is evaluated in a
/// single call, and the central difference is taken per summand before the
/// summands are added, so a large term that a coordinate does not touch adds
/// no cancellation noise.
pub fn check_gradient_batched<F>(f: F, x: &Tensor, step: f64) -> Result<GradCheck>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let x = x.to_dtype(DType::F64)?;
    let n = x.elem_count();
    let var = Var::from_tensor(&x.unsqueeze(0)?)?;
    let terms = f(var.as_tensor())?;
    if terms.rank() != 2 || terms.dim(0)? != 1 {
        return Err(PdfnetError::shape(format!("gradcheck needs (B, K) terms, got {:?}", terms.dims())));
    }
    let grads = terms.sum_all()?.backward()?;
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => ops::to_f64_vec(g)?,
        None => vec![0.0; n],
    };

    let base = ops::to_f64_vec(&x)?;
    let mut probes = Vec::with_capacity(2 * n * n);
    for i in 0..n {
        for sign in [1.0, -1.0] {
            let start = probes.len();
            probes.extend_from_slice(&base);
            probes[start + i] += sign * step;
        }
    }
    let mut dims = vec![2 * n];
    dims.extend_from_slice(x.dims());
    let batch = Tensor::from_vec(probes, dims, x.device())?;
    let values = f(&batch)?;
    let k = values.dim(D::Minus1)?;
    let rows = values.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let numeric = (0..n)
        .map(|i| {
            let (up, down) = (&rows[2 * i], &rows[2 * i + 1]);
            (0..k).map(|j| up[j] - down[j]).fold(0.0, |a, b| a + b) / (2.0 * step)
        })
        .collect();
    summarize(analytic, numeric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn polynomial_gradient_is_exact_enough() {
        let x = Tensor::new(&[0.3f64, -1.2, 2.0], &Device::Cpu).unwrap();
        let r = check_gradient(|t| Ok(t.powf(3.0)?.sum_all()?), &x, FD_STEP).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
        assert!((r.analytic[1] - 3.0 * 1.44).abs() < 1e-12);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // detach hides the dependence from autodiff but not from differences
        let x = Tensor::new(&[0.5f64, 1.5], &Device::Cpu).unwrap();
        let r = check_gradient(|t| Ok((t.sqr()?.sum_all()? + t.detach().sum_all()?)?), &x, FD_STEP).unwrap();
        assert!(r.max_rel_err > 0.1);
    }

    #[test]
    fn batched_agrees_with_sequential() {
        let x = Tensor::new(&[0.3f64, -1.2, 2.0, 0.7], &Device::Cpu).unwrap();
        let f = |t: &Tensor| -> Result<Tensor> { Ok((t.powf(3.0)?.sum_all()? + t.sin()?.sum_all()?)?) };
        let seq = check_gradient(f, &x, FD_STEP).unwrap();
        let bat = check_gradient_batched(
            |t| Ok(Tensor::cat(&[&t.powf(3.0)?.sum_keepdim(1)?, &t.sin()?.sum_keepdim(1)?], 1)?),
            &x,
            FD_STEP,
        )
        .unwrap();
        for (a, b) in seq.numeric.iter().zip(&bat.numeric) {
            assert!((a - b).abs() < 1e-8);
        }
        assert_eq!(seq.analytic, bat.analytic);
    }
}
