//! One-sided Jacobi SVD.
//!
//! The matrix is oriented so that it has at least as many rows as columns,
//! then column pairs are rotated until every pair is orthogonal to within
//! [`OFF_DIAGONAL_TOL`] of the product of their norms.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const OFF_DIAGONAL_TOL: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 100;

/// Thin SVD `A = U · diag(s) · Vᵀ` with `s` non-increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct Svd {
    /// `[m, k]`
    pub u: Tensor,
    /// `k` singular values, non-negative and non-increasing.
    pub s: Vec<f64>,
    /// `[n, k]`
    pub v: Tensor,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U · diag(s) · Vᵀ`
    pub fn reconstruct(&self) -> Result<Tensor> {
        let (m, k) = self.u.as_matrix_dims()?;
        let (n, _) = self.v.as_matrix_dims()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += self.u.data()[i * k + p] * self.s[p] * self.v.data()[j * k + p];
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::new(&[m, n], out)
    }
}

/// Full thin SVD with `min(m, n)` components.
pub fn svd(a: &Tensor) -> Result<Svd> {
    let (m, n) = a.as_matrix_dims()?;
    if m >= n {
        let (u, s, v) = jacobi_tall(a.data(), m, n)?;
        Ok(Svd { u, s, v })
    } else {
        let at = a.transpose()?;
        let (v, s, u) = jacobi_tall(at.data(), n, m)?;
        Ok(Svd { u, s, v })
    }
}

/// Leading `r` singular triplets; `1 <= r <= min(m, n)`.
pub fn truncated_svd(a: &Tensor, r: usize) -> Result<Svd> {
    let (m, n) = a.as_matrix_dims()?;
    if r == 0 || r > m.min(n) {
        return Err(Error::invalid(format!(
            "truncation rank {r} outside [1, {}]",
            m.min(n)
        )));
    }
    let full = svd(a)?;
    let k = full.rank();
    let take = |t: &Tensor, rows: usize| -> Result<Tensor> {
        let mut out = Vec::with_capacity(rows * r);
        for i in 0..rows {
            out.extend_from_slice(&t.data()[i * k..i * k + r]);
        }
        Tensor::new(&[rows, r], out)
    };
    Ok(Svd {
        u: take(&full.u, m)?,
        s: full.s[..r].to_vec(),
        v: take(&full.v, n)?,
    })
}

/// Jacobi on an `m × n` row-major matrix with `m >= n`. Returns
/// `(U[m,n], s[n], V[n,n])`.
fn jacobi_tall(a: &[f64], m: usize, n: usize) -> Result<(Tensor, Vec<f64>, Tensor)> {
    // Column-major working copies.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i * n + j]).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut norms: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= OFF_DIAGONAL_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
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
        return Err(Error::Numerical(format!(
            "Jacobi SVD did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let sigma: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));

    let scale = sigma.iter().cloned().fold(0.0, f64::max);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut vsorted = Vec::with_capacity(n);
    for &j in &order {
        let sj = sigma[j];
        // Columns that are numerically zero get an orthonormal completion.
        let col = if sj > scale * 1e-14 && sj > 0.0 {
            cols[j].iter().map(|v| v / sj).collect()
        } else {
            complete_basis(&ucols, m)
        };
        ucols.push(col);
        s.push(if sj > scale * 1e-14 { sj } else { 0.0 });
        vsorted.push(vcols[j].clone());
    }
    // Re-orthonormalize completions against the rest.
    for j in 0..n {
        if s[j] == 0.0 {
            let (before, after) = ucols.split_at_mut(j);
            let col = &mut after[0];
            for other in before.iter() {
                let d = dot(col, other);
                col.iter_mut().zip(other).for_each(|(x, o)| *x -= d * o);
            }
            let nrm = dot(col, col).sqrt();
            col.iter_mut().for_each(|x| *x /= nrm);
        }
    }
    let u = Tensor::from_fn(&[m, n], |i| ucols[i[1]][i[0]])?;
    let v = Tensor::from_fn(&[n, n], |i| vsorted[i[1]][i[0]])?;
    Ok((u, s, v))
}

fn complete_basis(existing: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best = vec![0.0; m];
    let mut best_norm = -1.0;
    for e in 0..m {
        let mut cand: Vec<f64> = (0..m).map(|i| if i == e { 1.0 } else { 0.0 }).collect();
        for other in existing {
            let d = dot(&cand, other);
            cand.iter_mut().zip(other).for_each(|(x, o)| *x -= d * o);
        }
        let nrm = dot(&cand, &cand);
        if nrm > best_norm {
            best_norm = nrm;
            best = cand;
        }
        if nrm > 0.5 {
            break;
        }
    }
    let nrm = best_norm.sqrt();
    best.iter().map(|x| x / nrm).collect()
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
