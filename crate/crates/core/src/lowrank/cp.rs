//! Rank-`r` CP (canonical polyadic) factorization of 4-D kernels by
//! alternating least squares.

use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::svd::truncated_svd;
use crate::error::{Error, Result};
use crate::tensor::{unfold, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlsOptions {
    pub max_iters: usize,
    /// Convergence threshold on the change of relative error between sweeps.
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for AlsOptions {
    fn default() -> Self {
        AlsOptions {
            max_iters: 200,
            tol: 1e-7,
            restarts: 3,
            seed: 0,
        }
    }
}

/// `K[i0,i1,i2,i3] ≈ Σ_r weights[r] · A0[i0,r] · A1[i1,r] · A2[i2,r] · A3[i3,r]`
/// with unit-norm factor columns.
#[derive(Clone, Debug, PartialEq)]
pub struct CpFactors {
    pub shape: [usize; 4],
    pub rank: usize,
    /// `factors[mode]` is `[shape[mode], rank]`.
    pub factors: [Tensor; 4],
    pub weights: Vec<f64>,
    /// `‖K − K̂‖_F / ‖K‖_F`
    pub fit: f64,
    /// Relative error after each sweep of the winning restart.
    pub trace: Vec<f64>,
}

impl CpFactors {
    pub fn reconstruct(&self) -> Result<Tensor> {
        let [a, b, c, d] = self.shape;
        let r = self.rank;
        let f = |m: usize| self.factors[m].data();
        let mut out = vec![0.0; a * b * c * d];
        let mut ab = vec![0.0; r];
        let mut abc = vec![0.0; r];
        for i in 0..a {
            for j in 0..b {
                for k in 0..r {
                    ab[k] = self.weights[k] * f(0)[i * r + k] * f(1)[j * r + k];
                }
                for l in 0..c {
                    for k in 0..r {
                        abc[k] = ab[k] * f(2)[l * r + k];
                    }
                    let base = ((i * b + j) * c + l) * d;
                    for m in 0..d {
                        let row = &f(3)[m * r..(m + 1) * r];
                        out[base + m] = abc.iter().zip(row).map(|(x, y)| x * y).sum();
                    }
                }
            }
        }
        Tensor::new(&self.shape, out)
    }

    fn zeros(shape: [usize; 4], rank: usize) -> Result<Self> {
        Ok(CpFactors {
            shape,
            rank,
            factors: [
                Tensor::zeros(&[shape[0], rank])?,
                Tensor::zeros(&[shape[1], rank])?,
                Tensor::zeros(&[shape[2], rank])?,
                Tensor::zeros(&[shape[3], rank])?,
            ],
            weights: vec![0.0; rank],
            fit: 0.0,
            trace: Vec::new(),
        })
    }

    /// Same factorization with `extra` zero-weight columns appended; the
    /// reconstruction (and therefore the fit) is unchanged.
    pub fn padded(&self, extra: usize, rng: &mut ChaCha8Rng) -> Result<CpFactors> {
        let r = self.rank + extra;
        let mut factors = self.factors.clone();
        for (m, f) in factors.iter_mut().enumerate() {
            let rows = self.shape[m];
            let mut data = Vec::with_capacity(rows * r);
            for i in 0..rows {
                data.extend_from_slice(&self.factors[m].data()[i * self.rank..(i + 1) * self.rank]);
                data.extend((0..extra).map(|_| -> f64 { StandardNormal.sample(rng) }));
            }
            let mut t = Tensor::new(&[rows, r], data)?;
            normalize_columns(&mut t);
            *f = t;
        }
        let mut weights = self.weights.clone();
        weights.resize(r, 0.0);
        Ok(CpFactors {
            shape: self.shape,
            rank: r,
            factors,
            weights,
            fit: self.fit,
            trace: Vec::new(),
        })
    }
}

/// Best-of-`restarts` ALS fit. Restart 0 starts from the leading left
/// singular vectors of each mode unfolding (topped up with Gaussian columns
/// when `r` exceeds a mode's extent); later restarts are Gaussian.
pub fn cp_als(kernel: &Tensor, rank: usize, opts: &AlsOptions) -> Result<CpFactors> {
    let shape = kernel_shape(kernel)?;
    validate(rank, opts)?;
    let norm = kernel.frobenius_norm();
    if norm == 0.0 {
        return CpFactors::zeros(shape, rank);
    }
    let unfoldings = unfoldings(kernel)?;
    let mut best: Option<CpFactors> = None;
    let mut failures = Vec::new();
    for restart in 0..opts.restarts {
        let mut rng = restart_rng(opts.seed, restart);
        let init = if restart == 0 {
            svd_init(&unfoldings, shape, rank, &mut rng)?
        } else {
            gaussian_init(shape, rank, &mut rng)?
        };
        match run_als(kernel, &unfoldings, init, norm, opts) {
            Ok(f) => {
                debug!("cp_als rank {rank} restart {restart}: fit {:.3e}", f.fit);
                if best.as_ref().is_none_or(|b| f.fit < b.fit) {
                    best = Some(f);
                }
            }
            Err(e) => failures.push(format!("restart {restart}: {e}")),
        }
    }
    best.ok_or_else(|| {
        Error::Numerical(format!(
            "every ALS restart diverged at rank {rank}: {}",
            failures.join("; ")
        ))
    })
}

/// ALS at `rank > prev.rank` warm-started from `prev` padded with Gaussian
/// columns of zero weight. The result is never worse than `prev`.
pub fn cp_als_warm(kernel: &Tensor, prev: &CpFactors, rank: usize, opts: &AlsOptions) -> Result<CpFactors> {
    let shape = kernel_shape(kernel)?;
    validate(rank, opts)?;
    if shape != prev.shape || rank < prev.rank {
        return Err(Error::invalid(format!(
            "warm start from rank {} / shape {:?} to rank {rank} / shape {:?}",
            prev.rank, prev.shape, shape
        )));
    }
    let mut rng = restart_rng(opts.seed, usize::MAX);
    let padded = prev.padded(rank - prev.rank, &mut rng)?;
    let norm = kernel.frobenius_norm();
    if norm == 0.0 || rank == prev.rank {
        return Ok(padded);
    }
    let unfoldings = unfoldings(kernel)?;
    match run_als(kernel, &unfoldings, padded.clone(), norm, opts) {
        Ok(f) if f.fit <= padded.fit => Ok(f),
        _ => Ok(padded),
    }
}

fn validate(rank: usize, opts: &AlsOptions) -> Result<()> {
    if rank == 0 {
        return Err(Error::invalid("CP rank must be >= 1"));
    }
    if opts.restarts == 0 || opts.max_iters == 0 {
        return Err(Error::invalid("ALS needs at least one restart and one sweep"));
    }
    Ok(())
}

fn kernel_shape(kernel: &Tensor) -> Result<[usize; 4]> {
    kernel
        .shape()
        .try_into()
        .map_err(|_| Error::shape(format!("CP-ALS expects a 4-D kernel, got {:?}", kernel.shape())))
}

fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    rng
}

fn unfoldings(kernel: &Tensor) -> Result<[Tensor; 4]> {
    Ok([
        unfold(kernel, 0)?,
        unfold(kernel, 1)?,
        unfold(kernel, 2)?,
        unfold(kernel, 3)?,
    ])
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut t = Tensor::new(
        &[rows, cols],
        (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect(),
    )?;
    normalize_columns(&mut t);
    Ok(t)
}

fn gaussian_init(shape: [usize; 4], rank: usize, rng: &mut ChaCha8Rng) -> Result<CpFactors> {
    let mut f = CpFactors::zeros(shape, rank)?;
    for m in 0..4 {
        f.factors[m] = gaussian_matrix(shape[m], rank, rng)?;
    }
    f.weights = vec![1.0; rank];
    Ok(f)
}

fn svd_init(unf: &[Tensor; 4], shape: [usize; 4], rank: usize, rng: &mut ChaCha8Rng) -> Result<CpFactors> {
    let mut f = gaussian_init(shape, rank, rng)?;
    for m in 0..4 {
        let (rows, cols) = unf[m].as_matrix_dims()?;
        let k = rank.min(rows).min(cols);
        let lead = truncated_svd(&unf[m], k)?;
        let data = f.factors[m].data_mut();
        for i in 0..rows {
            for j in 0..k {
                data[i * rank + j] = lead.u.data()[i * k + j];
            }
        }
        normalize_columns(&mut f.factors[m]);
    }
    Ok(f)
}

fn normalize_columns(t: &mut Tensor) -> Vec<f64> {
    let (rows, r) = t.as_matrix_dims().expect("factor is a matrix");
    let data = t.data_mut();
    let mut norms = vec![0.0; r];
    for i in 0..rows {
        for k in 0..r {
            norms[k] += data[i * r + k] * data[i * r + k];
        }
    }
    norms.iter_mut().for_each(|n| *n = n.sqrt());
    for i in 0..rows {
        for k in 0..r {
            if norms[k] > 0.0 {
                data[i * r + k] /= norms[k];
            }
        }
    }
    norms
}

fn gram(t: &Tensor) -> Vec<f64> {
    let (rows, r) = t.as_matrix_dims().expect("factor is a matrix");
    let d = t.data();
    let mut g = vec![0.0; r * r];
    for i in 0..rows {
        let row = &d[i * r..(i + 1) * r];
        for a in 0..r {
            for b in a..r {
                g[a * r + b] += row[a] * row[b];
            }
        }
    }
    for a in 0..r {
        for b in 0..a {
            g[a * r + b] = g[b * r + a];
        }
    }
    g
}

/// Khatri-Rao product of the factors of every mode except `skip`, rows
/// ordered to match the columns of [`unfold`] (ascending modes, last fastest).
fn khatri_rao_except(factors: &[Tensor; 4], shape: [usize; 4], skip: usize, r: usize) -> Vec<f64> {
    let modes: Vec<usize> = (0..4).filter(|&m| m != skip).collect();
    let (na, nb, nc) = (shape[modes[0]], shape[modes[1]], shape[modes[2]]);
    let (fa, fb, fc) = (
        factors[modes[0]].data(),
        factors[modes[1]].data(),
        factors[modes[2]].data(),
    );
    let mut out = vec![0.0; na * nb * nc * r];
    for a in 0..na {
        for b in 0..nb {
            let row = (a * nb + b) * nc;
            for c in 0..nc {
                let dst = &mut out[(row + c) * r..(row + c + 1) * r];
                for k in 0..r {
                    dst[k] = fa[a * r + k] * fb[b * r + k] * fc[c * r + k];
                }
            }
        }
    }
    out
}

/// Solves `X · G = M` for `X` with `G` symmetric positive semi-definite.
fn solve_spd_right(m: &[f64], g: &[f64], rows: usize, r: usize) -> Result<Vec<f64>> {
    let l = match cholesky(g, r) {
        Some(l) => l,
        None => {
            let trace: f64 = (0..r).map(|i| g[i * r + i]).sum();
            let ridge = 1e-12 * (trace / r as f64).max(f64::MIN_POSITIVE);
            let mut reg = g.to_vec();
            (0..r).for_each(|i| reg[i * r + i] += ridge);
            cholesky(&reg, r).ok_or_else(|| Error::Numerical("singular Gram matrix in ALS".into()))?
        }
    };
    let mut out = vec![0.0; rows * r];
    let mut y = vec![0.0; r];
    for i in 0..rows {
        let b = &m[i * r..(i + 1) * r];
        // L y = b
        for a in 0..r {
            let s: f64 = (0..a).map(|k| l[a * r + k] * y[k]).sum();
            y[a] = (b[a] - s) / l[a * r + a];
        }
        // Lᵀ x = y
        let x = &mut out[i * r..(i + 1) * r];
        for a in (0..r).rev() {
            let s: f64 = (a + 1..r).map(|k| l[k * r + a] * x[k]).sum();
            x[a] = (y[a] - s) / l[a * r + a];
        }
    }
    Ok(out)
}

fn cholesky(g: &[f64], r: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; r * r];
    let scale = (0..r).map(|i| g[i * r + i]).fold(0.0, f64::max);
    for i in 0..r {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * r + k] * l[j * r + k]).sum();
            if i == j {
                let d = g[i * r + i] - s;
                if d <= scale * 1e-14 || !d.is_finite() {
                    return None;
                }
                l[i * r + i] = d.sqrt();
            } else {
                l[i * r + j] = (g[i * r + j] - s) / l[j * r + j];
            }
        }
    }
    Some(l)
}

/// Each mode update solves the exact least-squares problem for that mode
/// with the other three factors held at unit-norm columns; the column norms
/// of the solution become the weights. The error is therefore non-increasing
/// from sweep to sweep.
fn run_als(
    kernel: &Tensor,
    unf: &[Tensor; 4],
    mut f: CpFactors,
    norm: f64,
    opts: &AlsOptions,
) -> Result<CpFactors> {
    let shape = f.shape;
    let r = f.rank;
    for m in 0..4 {
        normalize_columns(&mut f.factors[m]);
    }
    let mut grams: Vec<Vec<f64>> = f.factors.iter().map(gram).collect();
    let mut prev = f64::INFINITY;
    let mut trace = Vec::new();
    for sweep in 0..opts.max_iters {
        for mode in 0..4 {
            let rows = shape[mode];
            let cols = unf[mode].len() / rows;
            let kr = khatri_rao_except(&f.factors, shape, mode, r);
            let mut mttkrp = vec![0.0; rows * r];
            crate::tensor::matmul_raw(unf[mode].data(), &kr, &mut mttkrp, rows, cols, r);
            let mut g = vec![1.0; r * r];
            for (m, gm) in grams.iter().enumerate() {
                if m != mode {
                    g.iter_mut().zip(gm).for_each(|(a, b)| *a *= b);
                }
            }
            let mut t = Tensor::new(&[rows, r], solve_spd_right(&mttkrp, &g, rows, r)?)?;
            f.weights = normalize_columns(&mut t);
            f.factors[mode] = t;
            grams[mode] = gram(&f.factors[mode]);
        }
        let err = kernel.sub(&f.reconstruct()?)?.frobenius_norm() / norm;
        if !err.is_finite() {
            return Err(Error::Numerical(format!("non-finite fit at sweep {sweep}")));
        }
        trace.push(err);
        let done = (prev - err).abs() < opts.tol;
        prev = err;
        if done {
            break;
        }
    }
    f.fit = *trace.last().expect("at least one sweep");
    f.trace = trace;
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Kernel built from known random factors; the construction is the oracle.
    pub(crate) fn constructed(shape: [usize; 4], rank: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = CpFactors::zeros(shape, rank).unwrap();
        for m in 0..4 {
            f.factors[m] = gaussian_matrix(shape[m], rank, &mut rng).unwrap();
        }
        f.weights = vec![1.0; rank];
        f.reconstruct().unwrap()
    }

    #[test]
    fn exact_rank_one() {
        let k = constructed([4, 3, 3, 3], 1, 5);
        let f = cp_als(&k, 1, &AlsOptions::default()).unwrap();
        assert!(f.fit < 1e-8, "fit {}", f.fit);
    }

    #[test]
    fn constructed_rank_three() {
        let k = constructed([6, 5, 3, 3], 3, 11);
        let opts = AlsOptions {
            restarts: 5,
            max_iters: 1000,
            tol: 1e-12,
            ..AlsOptions::default()
        };
        let f = cp_als(&k, 3, &opts).unwrap();
        assert!(f.fit < 1e-3, "fit {}", f.fit);
    }

    #[test]
    fn sweeps_never_increase_error() {
        let k = constructed([8, 6, 3, 3], 6, 2);
        for restart_seed in 0..3 {
            let opts = AlsOptions {
                seed: restart_seed,
                ..AlsOptions::default()
            };
            let f = cp_als(&k, 3, &opts).unwrap();
            for w in f.trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn warm_start_is_monotone_in_rank() {
        let k = constructed([8, 4, 3, 3], 8, 9);
        let opts = AlsOptions::default();
        let mut prev = cp_als(&k, 1, &opts).unwrap();
        for r in 2..=6 {
            let next = cp_als_warm(&k, &prev, r, &opts).unwrap();
            assert_eq!(next.rank, r);
            assert!(next.fit <= prev.fit, "rank {r}: {} > {}", next.fit, prev.fit);
            prev = next;
        }
    }

    #[test]
    fn padding_preserves_reconstruction() {
        let k = constructed([3, 2, 3, 3], 2, 4);
        let f = cp_als(&k, 2, &AlsOptions::default()).unwrap();
        let p = f.padded(3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let d = f.reconstruct().unwrap().sub(&p.reconstruct().unwrap()).unwrap();
        assert!(d.frobenius_norm() < 1e-12);
    }

    #[test]
    fn deterministic_and_validated() {
        let k = constructed([4, 3, 3, 3], 4, 1);
        let a = cp_als(&k, 2, &AlsOptions::default()).unwrap();
        let b = cp_als(&k, 2, &AlsOptions::default()).unwrap();
        assert_eq!(a, b);
        assert!(cp_als(&k, 0, &AlsOptions::default()).is_err());
        assert!(cp_als(&Tensor::zeros(&[3, 3]).unwrap(), 1, &AlsOptions::default()).is_err());
        let z = cp_als(&Tensor::zeros(&[2, 2, 1, 1]).unwrap(), 2, &AlsOptions::default()).unwrap();
        assert_eq!(z.fit, 0.0);
    }
}
