//! Singular value decomposition by one-sided Jacobi rotations and the
//! rank-truncated reconstruction used by the low-rank enhancement path.

use crate::error::{Error, Result};
use crate::fft::ComplexTensor;
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 60;
const OFF_TOL: f64 = 1e-12;
/// Columns whose norm falls below this fraction of the largest are treated
/// as numerically null and their left vectors rebuilt by Gram–Schmidt.
const NULL_TOL: f64 = 1e-10;

/// Thin SVD `x = u·diag(sigma)·vᵀ` with `r = min(m, n)` columns.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Tensor,
    pub sigma: Vec<f64>,
    pub v: Tensor,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `Σ_{i<k} σ_i·u_i·v_iᵀ`.
    pub fn reconstruct(&self, k: usize) -> Tensor {
        let (m, r) = (self.u.shape()[0], self.u.shape()[1]);
        let n = self.v.shape()[0];
        let (u, v) = (self.u.data(), self.v.data());
        let mut out = vec![0.0; m * n];
        for i in 0..k.min(r) {
            let s = self.sigma[i];
            if s == 0.0 {
                continue;
            }
            for row in 0..m {
                let a = s * u[row * r + i];
                if a == 0.0 {
                    continue;
                }
                let dst = &mut out[row * n..(row + 1) * n];
                for (col, d) in dst.iter_mut().enumerate() {
                    *d += a * v[col * r + i];
                }
            }
        }
        Tensor::from_parts(vec![m, n], out)
    }
}

/// Full thin SVD of a finite matrix.
pub fn svd(x: &Tensor) -> Result<SvdResult> {
    let (m, n) = x.dims2("svd")?;
    if !x.is_finite() {
        return Err(Error::Domain {
            op: "svd",
            msg: "input contains NaN or infinite entries".into(),
        });
    }
    if m >= n {
        let (u, sigma, v) = jacobi_tall(x.data(), m, n)?;
        Ok(SvdResult {
            u: Tensor::from_parts(vec![m, n], u),
            sigma,
            v: Tensor::from_parts(vec![n, n], v),
        })
    } else {
        // xᵀ = U'ΣV'ᵀ  ⇒  x = V'ΣU'ᵀ.
        let xt = x.t()?;
        let (u, sigma, v) = jacobi_tall(xt.data(), n, m)?;
        Ok(SvdResult {
            u: Tensor::from_parts(vec![m, m], v),
            sigma,
            v: Tensor::from_parts(vec![n, m], u),
        })
    }
}

/// One-sided Jacobi on a tall row-major `a[m, n]`, `m ≥ n`. Returns
/// row-major `u[m, n]`, descending `sigma`, and row-major `v[n, n]`.
fn jacobi_tall(a: &[f64], m: usize, n: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    // Column-major working copies so each column is contiguous.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i * n + j]).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n < 2;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        residual = 0.0f64;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let alpha: f64 = cols[i].iter().map(|v| v * v).sum();
                let beta: f64 = cols[j].iter().map(|v| v * v).sum();
                let gamma: f64 = cols[i].iter().zip(&cols[j]).map(|(x, y)| x * y).sum();
                if alpha <= f64::MIN_POSITIVE || beta <= f64::MIN_POSITIVE {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= f64::EPSILON {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut vcols, i, j, c, s);
            }
        }
        converged = residual <= OFF_TOL;
    }
    if !converged {
        return Err(Error::NonConvergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable: ties keep the order the sweeps produced.
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap());
    let smax = norms[order[0]];

    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut null_slots = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        if s > NULL_TOL * smax && s > 0.0 {
            ucols.push(cols[j].iter().map(|v| v / s).collect());
        } else {
            ucols.push(vec![0.0; m]);
            null_slots.push(slot);
        }
    }
    complete_basis(&mut ucols, &null_slots, m);

    let mut u = vec![0.0; m * n];
    let mut v = vec![0.0; n * n];
    for (slot, &j) in order.iter().enumerate() {
        for i in 0..m {
            u[i * n + slot] = ucols[slot][i];
        }
        for i in 0..n {
            v[i * n + slot] = vcols[j][i];
        }
    }
    Ok((u, sigma, v))
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(j);
    let (ci, cj) = (&mut left[i], &mut right[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the listed slots with unit vectors orthogonal to every other column.
fn complete_basis(ucols: &mut [Vec<f64>], slots: &[usize], m: usize) {
    let mut candidate = 0;
    for &slot in slots {
        loop {
            assert!(candidate < m, "could not complete an orthonormal basis");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // Two Gram–Schmidt passes against every filled column.
            for _ in 0..2 {
                for (k, col) in ucols.iter().enumerate() {
                    if k == slot || col.iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    let d: f64 = col.iter().zip(&e).map(|(a, b)| a * b).sum();
                    e.iter_mut().zip(col).for_each(|(x, c)| *x -= d * c);
                }
            }
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-6 {
                ucols[slot] = e.into_iter().map(|v| v / norm).collect();
                break;
            }
        }
    }
}

fn check_rank(k: usize, m: usize, n: usize) -> Result<()> {
    if k == 0 || k > m.min(n) {
        return Err(Error::Parameter(format!(
            "truncation rank {k} outside 1..={} for a {m}x{n} matrix",
            m.min(n)
        )));
    }
    Ok(())
}

/// Frobenius-optimal rank-`k` approximation `Σ_{i<k} σ_i·u_i·v_iᵀ`.
pub fn low_rank_reconstruct(x: &Tensor, k: usize) -> Result<Tensor> {
    let (m, n) = x.dims2("low_rank_reconstruct")?;
    check_rank(k, m, n)?;
    Ok(svd(x)?.reconstruct(k))
}

/// Rank-`k` reconstruction plus the leading left singular vectors as a
/// row-major `[m, k]` buffer.
pub(crate) fn truncate_with_basis(x: &Tensor, k: usize) -> Result<(Tensor, Vec<f64>)> {
    let (m, n) = x.dims2("truncated_svd")?;
    check_rank(k, m, n)?;
    let dec = svd(x)?;
    let r = dec.rank();
    let mut basis = vec![0.0; m * k];
    for i in 0..m {
        basis[i * k..(i + 1) * k].copy_from_slice(&dec.u.data()[i * r..i * r + k]);
    }
    Ok((dec.reconstruct(k), basis))
}

/// Non-parametric low-rank operator on a complex matrix: real and imaginary
/// parts are truncated independently.
pub fn m_svd_complex(z: &ComplexTensor, k: usize) -> Result<ComplexTensor> {
    let re = low_rank_reconstruct(&z.re, k)?;
    let im = if z.im.data().iter().all(|v| *v == 0.0) {
        Tensor::zeros(z.shape())
    } else {
        low_rank_reconstruct(&z.im, k)?
    };
    ComplexTensor::new(re, im)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_unit_singular_values() {
        let r = svd(&Tensor::eye(4)).unwrap();
        assert!(r.sigma.iter().all(|s| (s - 1.0).abs() < 1e-15));
    }

    #[test]
    fn rank_one_outer_product() {
        let a = [1.0, -2.0, 0.5];
        let b = [3.0, 1.0, -1.0, 2.0];
        let x = Tensor::from_fn(&[3, 4], |i| a[i / 4] * b[i % 4]);
        let r = svd(&x).unwrap();
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((r.sigma[0] - na * nb).abs() < 1e-12);
        assert!(r.sigma[1..].iter().all(|s| s.abs() < 1e-12));
        let rec = low_rank_reconstruct(&x, 1).unwrap();
        assert!(rec.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn rejects_non_finite_and_bad_rank() {
        let mut x = Tensor::eye(3);
        x.data_mut()[4] = f64::NAN;
        assert!(matches!(svd(&x), Err(Error::Domain { .. })));
        assert!(matches!(low_rank_reconstruct(&Tensor::eye(3), 0), Err(Error::Parameter(_))));
        assert!(matches!(low_rank_reconstruct(&Tensor::eye(3), 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn zero_matrix_gets_orthonormal_factors() {
        let r = svd(&Tensor::zeros(&[4, 3])).unwrap();
        let u = &r.u;
        for a in 0..3 {
            for b in 0..3 {
                let d: f64 = (0..4).map(|i| u.at(&[i, a]) * u.at(&[i, b])).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn real_input_keeps_zero_imaginary_part() {
        let re = Tensor::from_fn(&[3, 3], |i| (i as f64).cos());
        let out = m_svd_complex(&ComplexTensor::from_real(re), 2).unwrap();
        assert!(out.im.data().iter().all(|v| *v == 0.0));
    }
}
