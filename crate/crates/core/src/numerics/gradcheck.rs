//! Central finite-difference oracle for backward kernels.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Default perturbation step for [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-3;

/// Step for checking curvature-bearing kernels: central differences at 1e-3
/// carry ~1e-5 relative truncation through tanh/rsqrt terms, which would
/// swamp the 1e-6 kernel tolerance. 1e-4 keeps truncation near 1e-7 while
/// staying far above f64 roundoff.
pub const GRAD_CHECK_STEP_CURVED: f64 = 1e-4;

/// A differentiable map for [`grad_check`]: returns a scalar-valued tensor
/// and one analytic gradient per input, in input order.
pub type GradCheckFn<'a> =
    dyn Fn(&[Tensor<f64>]) -> Result<(Tensor<f64>, Vec<Tensor<f64>>)> + 'a;

/// Compare the analytic gradients of `f` against central finite differences,
/// element by element, and return the worst relative error (denominator
/// floored at 1e-8). Runs entirely at 64-bit precision.
pub fn grad_check(f: &GradCheckFn, inputs: &[Tensor<f64>], step: f64) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::contract("grad_check step must be > 0"));
    }
    let (value, grads) = f(inputs)?;
    if value.len() != 1 {
        return Err(Error::contract(format!(
            "grad_check requires a scalar output, got {} elements",
            value.len()
        )));
    }
    if grads.len() != inputs.len() {
        return Err(Error::contract(format!(
            "grad_check expected {} gradients, got {}",
            inputs.len(),
            grads.len()
        )));
    }

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for ti in 0..inputs.len() {
        if grads[ti].shape() != inputs[ti].shape() {
            return Err(Error::contract(format!(
                "gradient {} shape does not match its input",
                ti
            )));
        }
        for e in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[e];
            work[ti].data_mut()[e] = orig + step;
            let plus = f(&work)?.0.data()[0];
            work[ti].data_mut()[e] = orig - step;
            let minus = f(&work)?.0.data()[0];
            work[ti].data_mut()[e] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let analytic = grads[ti].data()[e];
            let denom = fd.abs().max(analytic.abs()).max(1e-8);
            worst = worst.max((fd - analytic).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::super::ops;
    use super::*;

    fn pseudo(n: usize, salt: u64) -> Vec<f64> {
        // deterministic quasi-random values in [-1, 1)
        (0..n)
            .map(|i| {
                let h = (i as u64).wrapping_mul(0x9E3779B97F4A7C15) ^ salt;
                ((h >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn linear_map_is_exact() {
        let f = |xs: &[Tensor<f64>]| {
            let x = &xs[0];
            let y: f64 = x.data().iter().map(|&v| 2.0 * v).sum();
            let grad = Tensor::from_vec(x.shape(), vec![2.0; x.len()])?;
            Ok((Tensor::scalar(y), vec![grad]))
        };
        let x = Tensor::from_vec(&[5], pseudo(5, 1)).unwrap();
        let err = grad_check(&f, &[x], GRAD_CHECK_STEP).unwrap();
        assert!(err < 1e-10, "linear map rel err {err}");
    }

    #[test]
    fn non_scalar_output_is_a_contract_error() {
        let f = |xs: &[Tensor<f64>]| {
            let x = xs[0].clone();
            let g = Tensor::from_vec(x.shape(), vec![1.0; x.len()])?;
            Ok((x, vec![g]))
        };
        let x = Tensor::from_vec(&[3], pseudo(3, 2)).unwrap();
        let err = grad_check(&f, &[x], GRAD_CHECK_STEP).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    /// Weighted-sum head so the upstream gradient is non-uniform. Weights are
    /// bounded away from zero so the relative-error metric stays meaningful.
    fn weighted_sum(x: &Tensor<f64>, salt: u64) -> (f64, Vec<f64>) {
        let w: Vec<f64> = pseudo(x.len(), salt)
            .into_iter()
            .map(|u| u.signum() * (0.5 + 0.5 * u.abs()))
            .collect();
        let y = x.data().iter().zip(&w).map(|(&v, &wv)| v * wv).sum();
        (y, w)
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        let f = |xs: &[Tensor<f64>]| {
            let c = ops::matmul(&xs[0], &xs[1])?;
            let (y, w) = weighted_sum(&c, 99);
            let dc = Tensor::from_vec(c.shape(), w)?;
            let (da, db) = ops::matmul_backward(&xs[0], &xs[1], &dc)?;
            Ok((Tensor::scalar(y), vec![da, db]))
        };
        let a = Tensor::from_vec(&[3, 4], pseudo(12, 3)).unwrap();
        let b = Tensor::from_vec(&[4, 5], pseudo(20, 4)).unwrap();
        let err = grad_check(&f, &[a, b], GRAD_CHECK_STEP).unwrap();
        assert!(err < 1e-6, "matmul rel err {err}");
    }

    #[test]
    fn matmul_nt_backward_matches_finite_differences() {
        let f = |xs: &[Tensor<f64>]| {
            let (m, k) = xs[0].fold_2d();
            let n = xs[1].shape()[0];
            let mut c = Tensor::zeros(&[m, n]);
            ops::matmul_nt_fwd(c.data_mut(), xs[0].data(), xs[1].data(), m, k, n);
            let (y, w) = weighted_sum(&c, 17);
            let mut da = Tensor::zeros(xs[0].shape());
            let mut db = Tensor::zeros(xs[1].shape());
            ops::matmul_nt_bwd(
                da.data_mut(),
                db.data_mut(),
                &w,
                xs[0].data(),
                xs[1].data(),
                m,
                k,
                n,
            );
            Ok((Tensor::scalar(y), vec![da, db]))
        };
        let a = Tensor::from_vec(&[3, 4], pseudo(12, 5)).unwrap();
        let b = Tensor::from_vec(&[5, 4], pseudo(20, 6)).unwrap();
        let err = grad_check(&f, &[a, b], GRAD_CHECK_STEP).unwrap();
        assert!(err < 1e-6, "matmul_nt rel err {err}");
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let f = |xs: &[Tensor<f64>]| {
            let (x, gamma, beta) = (&xs[0], &xs[1], &xs[2]);
            let (rows, cols) = x.fold_2d();
            let mut y = Tensor::zeros(x.shape());
            let mut mean = vec![0.0; rows];
            let mut rstd = vec![0.0; rows];
            ops::layer_norm_fwd(
                y.data_mut(),
                &mut mean,
                &mut rstd,
                x.data(),
                gamma.data(),
                beta.data(),
                cols,
                1e-5,
            );
            let (out, w) = weighted_sum(&y, 23);
            let mut dx = Tensor::zeros(x.shape());
            let mut dgamma = Tensor::zeros(gamma.shape());
            let mut dbeta = Tensor::zeros(beta.shape());
            ops::layer_norm_bwd(
                dx.data_mut(),
                dgamma.data_mut(),
                dbeta.data_mut(),
                &w,
                x.data(),
                gamma.data(),
                &mean,
                &rstd,
                cols,
            );
            Ok((Tensor::scalar(out), vec![dx, dgamma, dbeta]))
        };
        let x = Tensor::from_vec(
            &[4, 6],
            pseudo(24, 7).into_iter().map(|u| 2.0 * u).collect(),
        )
        .unwrap();
        let gamma = Tensor::from_vec(
            &[6],
            pseudo(6, 8).into_iter().map(|u| 1.0 + 0.5 * u).collect(),
        )
        .unwrap();
        let beta = Tensor::from_vec(&[6], pseudo(6, 9)).unwrap();
        let err = grad_check(&f, &[x, gamma, beta], GRAD_CHECK_STEP_CURVED).unwrap();
        assert!(err < 1e-6, "layer_norm rel err {err}");
    }

    #[test]
    fn causal_softmax_backward_matches_finite_differences() {
        let t = 5;
        let f = move |xs: &[Tensor<f64>]| {
            let p = ops::causal_softmax(&xs[0])?;
            let (y, w) = weighted_sum(&p, 31);
            let mut ds = Tensor::zeros(xs[0].shape());
            ops::causal_softmax_bwd(ds.data_mut(), p.data(), &w, t);
            Ok((Tensor::scalar(y), vec![ds]))
        };
        let scores = Tensor::from_vec(&[2, t, t], pseudo(2 * t * t, 10)).unwrap();
        let err = grad_check(&f, &[scores], GRAD_CHECK_STEP_CURVED).unwrap();
        assert!(err < 1e-6, "causal_softmax rel err {err}");
    }

    #[test]
    fn gelu_backward_matches_finite_differences() {
        let f = |xs: &[Tensor<f64>]| {
            let y = ops::gelu(&xs[0]);
            let (out, w) = weighted_sum(&y, 41);
            let mut dx = Tensor::zeros(xs[0].shape());
            ops::gelu_bwd(dx.data_mut(), xs[0].data(), &w);
            Ok((Tensor::scalar(out), vec![dx]))
        };
        // keep inputs clear of the flat negative tail where gelu' crosses zero
        let x = Tensor::from_vec(
            &[9],
            pseudo(9, 11).into_iter().map(|u| 1.0 + 0.9 * u).collect(),
        )
        .unwrap();
        let err = grad_check(&f, &[x], GRAD_CHECK_STEP_CURVED).unwrap();
        assert!(err < 1e-6, "gelu rel err {err}");
    }

    #[test]
    fn cross_entropy_backward_matches_finite_differences() {
        let targets = [1u32, 4, 0, 2, 3, 2];
        let f = move |xs: &[Tensor<f64>]| {
            let loss = ops::cross_entropy(&xs[0], &targets)?;
            let dlogits = ops::cross_entropy_backward(&xs[0], &targets)?;
            Ok((Tensor::scalar(loss), vec![dlogits]))
        };
        let logits = Tensor::from_vec(&[2, 3, 5], pseudo(30, 12)).unwrap();
        let err = grad_check(&f, &[logits], GRAD_CHECK_STEP_CURVED).unwrap();
        assert!(err < 1e-6, "cross_entropy rel err {err}");
    }

    #[test]
    fn bias_add_backward_matches_finite_differences() {
        let f = |xs: &[Tensor<f64>]| {
            let (x, bias) = (&xs[0], &xs[1]);
            let mut y = x.clone();
            ops::bias_add(y.data_mut(), bias.data());
            let (out, w) = weighted_sum(&y, 51);
            let dx = Tensor::from_vec(x.shape(), w.clone())?;
            let mut dbias = Tensor::zeros(bias.shape());
            ops::bias_bwd(dbias.data_mut(), &w);
            Ok((Tensor::scalar(out), vec![dx, dbias]))
        };
        let x = Tensor::from_vec(&[3, 4], pseudo(12, 13)).unwrap();
        let bias = Tensor::from_vec(&[4], pseudo(4, 14)).unwrap();
        let err = grad_check(&f, &[x, bias], GRAD_CHECK_STEP).unwrap();
        assert!(err < 1e-6, "bias_add rel err {err}");
    }

    #[test]
    fn matmul_composite_chain_stays_under_tolerance() {
        // a . b . d with a gelu in the middle, all three inputs checked
        let f = |xs: &[Tensor<f64>]| {
            let c = ops::matmul(&xs[0], &xs[1])?;
            let g = ops::gelu(&c);
            let out = ops::matmul(&g, &xs[2])?;
            let (y, w) = weighted_sum(&out, 61);
            let dout = Tensor::from_vec(out.shape(), w)?;
            let (dg, dd) = ops::matmul_backward(&g, &xs[2], &dout)?;
            let mut dc = Tensor::zeros(c.shape());
            ops::gelu_bwd(dc.data_mut(), c.data(), dg.data());
            let (da, db) = ops::matmul_backward(&xs[0], &xs[1], &dc)?;
            Ok((Tensor::scalar(y), vec![da, db, dd]))
        };
        let a = Tensor::from_vec(&[2, 3], pseudo(6, 15)).unwrap();
        let b = Tensor::from_vec(&[3, 4], pseudo(12, 16)).unwrap();
        let d = Tensor::from_vec(&[4, 2], pseudo(8, 17)).unwrap();
        let err = grad_check(&f, &[a, b, d], GRAD_CHECK_STEP_CURVED).unwrap();
        assert!(err < 1e-6, "composite rel err {err}");
    }
}
