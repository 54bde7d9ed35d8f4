use super::kernels::{dot, gemm_nn};
use super::{RngStream, Scalar, Tensor};
use crate::error::{Error, Result};

/// Singular values below `PINV_RTOL · σ_max` are treated as zero.
pub const PINV_RTOL: f64 = 1e-6;

const MAX_DIM: usize = 4096;
const JACOBI_MAX_SWEEPS: usize = 80;
const POWER_TOL: f64 = 1e-9;
const POWER_MAX_ITERS: usize = 10_000;

/// Matrix product of two 2-D tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros([m, n]);
    gemm_nn(m, k, n, a.data(), b.data(), out.data_mut());
    out.ensure_finite("matmul")?;
    Ok(out)
}

pub fn frobenius_norm<T: Scalar>(a: &Tensor<T>) -> f64 {
    a.norm()
}

/// Thin singular value decomposition `A = U diag(s) Vᵀ` with singular
/// values sorted in descending order. `U` is `m×r`, `V` is `n×r`,
/// `r = min(m, n)`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Tensor<f64>,
    pub s: Vec<f64>,
    pub v: Tensor<f64>,
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(a: &Tensor<f64>) -> Result<Svd> {
    let (m, n) = a.dims2()?;
    if m > MAX_DIM || n > MAX_DIM {
        return Err(Error::Invalid(format!(
            "svd: {m}x{n} exceeds the {MAX_DIM} dense size cap"
        )));
    }
    a.ensure_finite("svd input")?;
    if m >= n {
        jacobi_tall(a)
    } else {
        let t = jacobi_tall(&a.transpose()?)?;
        Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        })
    }
}

fn jacobi_tall(a: &Tensor<f64>) -> Result<Svd> {
    let (m, n) = a.dims2()?;
    // Columns of A and V, each stored contiguously.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.at2(i, j)).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let mut norms: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();
    let tol = f64::EPSILON * (m as f64).sqrt().max(1.0);

    let mut converged = false;
    let mut sweeps = 0;
    let mut last_off = 0.0f64;
    while sweeps < JACOBI_MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        last_off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                let off = gamma.abs() / (alpha * beta).sqrt();
                last_off = last_off.max(off);
                if off <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = vcols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                norms[p] = dot(&cols[p], &cols[p]);
                norms[q] = dot(&cols[q], &cols[q]);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            what: "jacobi svd",
            iterations: sweeps,
            last_estimate: last_off,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let sig: Vec<f64> = norms.iter().map(|v| v.sqrt()).collect();
    order.sort_by(|&i, &j| sig[j].total_cmp(&sig[i]).then(i.cmp(&j)));

    let mut u = Tensor::zeros([m, n]);
    let mut v = Tensor::zeros([n, n]);
    let mut s = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        let sj = sig[j];
        s.push(sj);
        for i in 0..m {
            u.set2(i, k, if sj > 0.0 { cols[j][i] / sj } else { 0.0 });
        }
        for i in 0..n {
            v.set2(i, k, vcols[j][i]);
        }
    }
    Ok(Svd { u, s, v })
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Moore–Penrose pseudo-inverse via SVD, truncating singular values below
/// [`PINV_RTOL`]` · σ_max`.
pub fn pseudo_inverse(a: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (m, n) = a.dims2()?;
    let Svd { u, s, v } = svd(a)?;
    let r = s.len();
    let cutoff = PINV_RTOL * s.first().copied().unwrap_or(0.0);
    // A† = V diag(1/s) Uᵀ, shape n×m.
    let mut out = Tensor::zeros([n, m]);
    let data = out.data_mut();
    for k in 0..r {
        if s[k] <= cutoff || s[k] == 0.0 {
            continue;
        }
        let inv = 1.0 / s[k];
        for i in 0..n {
            let vik = v.at2(i, k) * inv;
            if vik == 0.0 {
                continue;
            }
            let row = &mut data[i * m..(i + 1) * m];
            for (j, x) in row.iter_mut().enumerate() {
                *x += vik * u.at2(j, k);
            }
        }
    }
    out.ensure_finite("pseudo_inverse")?;
    Ok(out)
}

/// Largest singular value by power iteration on `AᵀA`.
pub fn spectral_norm(a: &Tensor<f64>) -> Result<f64> {
    let (m, n) = a.dims2()?;
    a.ensure_finite("spectral_norm input")?;
    if a.max_abs() == 0.0 {
        return Ok(0.0);
    }
    let ad = a.data();
    let mut rng = RngStream::new(0x5eed_5eed);
    let mut x: Vec<f64> = rng.unit_vector(n);
    let mut ax = vec![0.0; m];
    let mut lambda_prev = f64::NAN;
    for iter in 1..=POWER_MAX_ITERS {
        for i in 0..m {
            ax[i] = dot(&ad[i * n..(i + 1) * n], &x);
        }
        // Rayleigh quotient of AᵀA at the current unit vector.
        let lambda = dot(&ax, &ax);
        let mut y = vec![0.0; n];
        for i in 0..m {
            let s = ax[i];
            for (yj, &aij) in y.iter_mut().zip(&ad[i * n..(i + 1) * n]) {
                *yj += s * aij;
            }
        }
        let ny = dot(&y, &y).sqrt();
        if ny == 0.0 {
            return Ok(0.0);
        }
        x.iter_mut().zip(&y).for_each(|(xi, yi)| *xi = yi / ny);
        if (lambda - lambda_prev).abs() <= POWER_TOL * lambda {
            return Ok(lambda.sqrt());
        }
        lambda_prev = lambda;
        if iter == POWER_MAX_ITERS {
            return Err(Error::NoConvergence {
                what: "power iteration",
                iterations: iter,
                last_estimate: lambda.sqrt(),
            });
        }
    }
    unreachable!()
}
