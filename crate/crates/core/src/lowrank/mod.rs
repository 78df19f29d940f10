//! Low-rank layer transformations: truncated SVD for dense layers and CP
//! factorization for convolution kernels.

mod cp;
mod svd;

pub use cp::{cp_als, cp_als_warm, AlsOptions, CpFactors};
pub use svd::{svd, truncated_svd, Svd};

use crate::error::{Error, Result};
use crate::model::{Conv2d, DecomposedConv2d, DecomposedDense, Dense};
use crate::tensor::Tensor;

/// Factors of a decomposed layer together with their reconstruction error.
#[derive(Clone, Debug, PartialEq)]
pub enum FactorSet {
    Conv(CpFactors),
    Dense { svd: Svd, fit: f64 },
}

impl FactorSet {
    pub fn rank(&self) -> usize {
        match self {
            FactorSet::Conv(f) => f.rank,
            FactorSet::Dense { svd, .. } => svd.rank(),
        }
    }

    pub fn fit(&self) -> f64 {
        match self {
            FactorSet::Conv(f) => f.fit,
            FactorSet::Dense { fit, .. } => *fit,
        }
    }

    pub fn reconstruct(&self) -> Result<Tensor> {
        match self {
            FactorSet::Conv(f) => f.reconstruct(),
            FactorSet::Dense { svd, .. } => svd.reconstruct(),
        }
    }
}

/// `‖W − Ŵ‖_F / ‖W‖_F`. A zero original gives 0 when the reconstruction is
/// also zero and is an error otherwise.
pub fn rel_error(original: &Tensor, factors: &FactorSet) -> Result<f64> {
    let approx = factors.reconstruct()?;
    if approx.shape() != original.shape() {
        return Err(Error::shape(format!(
            "factors reconstruct {:?}, original is {:?}",
            approx.shape(),
            original.shape()
        )));
    }
    let norm = original.frobenius_norm();
    let diff = original.sub(&approx)?.frobenius_norm();
    if norm == 0.0 {
        if diff == 0.0 {
            Ok(0.0)
        } else {
            Err(Error::Numerical(
                "relative error undefined: original is zero but reconstruction is not".into(),
            ))
        }
    } else {
        Ok(diff / norm)
    }
}

/// Truncated SVD of a dense weight with its relative error.
pub fn dense_factors(weight: &Tensor, rank: usize) -> Result<FactorSet> {
    let svd = truncated_svd(weight, rank)?;
    let norm = weight.frobenius_norm();
    let fit = if norm == 0.0 {
        0.0
    } else {
        weight.sub(&svd.reconstruct()?)?.frobenius_norm() / norm
    };
    Ok(FactorSet::Dense { svd, fit })
}

/// Builds the factorized dense layer `((x·U)·diag(s))·Vᵀ + b` at rank `r`.
pub fn decompose_dense(layer: &Dense, rank: usize) -> Result<(DecomposedDense, FactorSet)> {
    let cap = layer.inputs.min(layer.outputs);
    if rank == 0 || rank > cap {
        return Err(Error::invalid(format!("dense rank {rank} outside [1, {cap}]")));
    }
    let factors = dense_factors(&layer.weight, rank)?;
    Ok((dense_from_factors(layer, &factors)?, factors))
}

pub fn dense_from_factors(layer: &Dense, factors: &FactorSet) -> Result<DecomposedDense> {
    let FactorSet::Dense { svd, .. } = factors else {
        return Err(Error::invalid("dense layer needs SVD factors"));
    };
    Ok(DecomposedDense {
        inputs: layer.inputs,
        outputs: layer.outputs,
        rank: svd.rank(),
        u: svd.u.clone(),
        s: Tensor::new(&[svd.rank()], svd.s.clone())?,
        v: svd.v.clone(),
        bias: layer.bias.clone(),
    })
}

/// Kernel `[out, in, kh, kw]` CP-factorized at rank `r` and executed as a
/// four-stage chain.
pub fn decompose_conv(layer: &Conv2d, rank: usize, opts: &AlsOptions) -> Result<(DecomposedConv2d, FactorSet)> {
    let factors = FactorSet::Conv(cp_als(&layer.weight, rank, opts)?);
    Ok((conv_from_factors(layer, &factors)?, factors))
}

/// Maps CP factors onto the execution chain, spreading each component's
/// weight evenly (fourth root) across its four factors.
pub fn conv_from_factors(layer: &Conv2d, factors: &FactorSet) -> Result<DecomposedConv2d> {
    let FactorSet::Conv(cp) = factors else {
        return Err(Error::invalid("conv layer needs CP factors"));
    };
    let g = layer.geom;
    if cp.shape != g.kernel_shape() {
        return Err(Error::shape(format!(
            "CP factors of shape {:?} for kernel {:?}",
            cp.shape,
            g.kernel_shape()
        )));
    }
    let r = cp.rank;
    let scale: Vec<f64> = cp.weights.iter().map(|w| w.abs().powf(0.25)).collect();
    // Weights are non-negative column norms; a negative one flips F4.
    let sign: Vec<f64> = cp.weights.iter().map(|w| if *w < 0.0 { -1.0 } else { 1.0 }).collect();
    let [out_f, in_f, kh_f, kw_f] = &cp.factors;
    let col = |t: &Tensor, i: usize, k: usize| t.data()[i * r + k];
    let f1 = Tensor::from_fn(&[r, 1, 1, g.kernel_w], |i| col(kw_f, i[3], i[0]) * scale[i[0]])?;
    let f2 = Tensor::from_fn(&[r, 1, g.kernel_h, 1], |i| col(kh_f, i[2], i[0]) * scale[i[0]])?;
    let f3 = Tensor::from_fn(&[r, g.in_ch, 1, 1], |i| col(in_f, i[1], i[0]) * scale[i[0]])?;
    let f4 = Tensor::from_fn(&[g.out_ch, r, 1, 1], |i| {
        col(out_f, i[0], i[1]) * scale[i[1]] * sign[i[1]]
    })?;
    Ok(DecomposedConv2d {
        geom: g,
        rank: r,
        f1,
        f2,
        f3,
        f4,
        bias: layer.bias.clone(),
    })
}

/// Dense kernel `[out, in, kh, kw]` equivalent to a decomposed convolution.
pub fn reconstruct_conv_kernel(layer: &DecomposedConv2d) -> Result<Tensor> {
    let g = layer.geom;
    let r = layer.rank;
    Tensor::from_fn(&g.kernel_shape(), |i| {
        (0..r)
            .map(|k| {
                layer.f4.data()[i[0] * r + k]
                    * layer.f3.data()[k * g.in_ch + i[1]]
                    * layer.f2.data()[k * g.kernel_h + i[2]]
                    * layer.f1.data()[k * g.kernel_w + i[3]]
            })
            .sum()
    })
}

/// Dense weight `[in, out]` equivalent to a decomposed dense layer.
pub fn reconstruct_dense_weight(layer: &DecomposedDense) -> Result<Tensor> {
    let r = layer.rank;
    Tensor::from_fn(&[layer.inputs, layer.outputs], |i| {
        (0..r)
            .map(|k| layer.u.data()[i[0] * r + k] * layer.s.data()[k] * layer.v.data()[i[1] * r + k])
            .sum()
    })
}

/// Smallest rank whose discarded singular-value energy is at most
/// `eps²` of the total (at least 1).
pub fn rank_for_energy(singular_values: &[f64], eps: f64) -> usize {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return 1;
    }
    let budget = eps * eps * total;
    let mut tail = total;
    for (k, s) in singular_values.iter().enumerate() {
        tail -= s * s;
        if tail.max(0.0) <= budget {
            return k + 1;
        }
    }
    singular_values.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_cases() {
        let w = Tensor::from_fn(&[3, 3], |i| if i[0] == i[1] { [3.0, 2.0, 1.0][i[0]] } else { 0.0 })
            .unwrap();
        let f = dense_factors(&w, 3).unwrap();
        assert!(rel_error(&w, &f).unwrap() < 1e-15);
        let f = dense_factors(&w, 2).unwrap();
        assert!((rel_error(&w, &f).unwrap() - 1.0 / 14f64.sqrt()).abs() < 1e-12);
        assert!((f.fit() - 0.2673).abs() < 1e-4);

        let zero = dense_factors(&Tensor::zeros(&[3, 3]).unwrap(), 2).unwrap();
        assert_eq!(rel_error(&w, &zero).unwrap(), 1.0);
        assert_eq!(rel_error(&Tensor::zeros(&[3, 3]).unwrap(), &zero).unwrap(), 0.0);
        assert!(rel_error(&Tensor::zeros(&[3, 3]).unwrap(), &f).is_err());
    }

    #[test]
    fn energy_rank() {
        assert_eq!(rank_for_energy(&[3.0, 2.0, 0.0], 0.05), 2);
        assert_eq!(rank_for_energy(&[3.0, 2.0, 1.0], 0.0), 3);
        assert_eq!(rank_for_energy(&[0.0, 0.0], 0.1), 1);
        // tail energy of the last value: 1/14 > 0.25^2
        assert_eq!(rank_for_energy(&[3.0, 2.0, 1.0], 0.25), 3);
        assert_eq!(rank_for_energy(&[3.0, 2.0, 1.0], 0.27), 2);
    }
}
