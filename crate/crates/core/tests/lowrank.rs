mod support;

use nalgebra::DMatrix;
use rand::Rng;
use rankcut::conductor::ComposedList;
use rankcut::explorer::{initial_ranks, FactorCache};
use rankcut::lowrank::{
    decompose_conv, decompose_dense, reconstruct_conv_kernel, reconstruct_dense_weight, svd, truncated_svd,
    AlsOptions,
};
use rankcut::model::{Conv2d, Dense, LayerSpec};
use rankcut::nn::{forward, reference_cnn};
use rankcut::{ConvGeometry, Model, Tensor};
use support::{cp_kernel, rel_diff, rng, uniform};

fn to_na(t: &Tensor) -> DMatrix<f64> {
    let [m, n] = [t.shape()[0], t.shape()[1]];
    DMatrix::from_row_slice(m, n, t.data())
}

fn dense_layer(weight: Tensor) -> Dense {
    let outputs = weight.shape()[1];
    Dense {
        inputs: weight.shape()[0],
        outputs,
        weight,
        bias: Tensor::zeros(&[outputs]).unwrap(),
    }
}

fn conv_layer(weight: Tensor, pad: usize) -> Conv2d {
    let s = weight.shape().to_vec();
    let geom = ConvGeometry {
        kernel_h: s[2],
        kernel_w: s[3],
        stride_h: 1,
        stride_w: 1,
        pad_h: pad,
        pad_w: pad,
        in_ch: s[1],
        out_ch: s[0],
    };
    Conv2d {
        geom,
        weight,
        bias: Tensor::zeros(&[s[0]]).unwrap(),
    }
}

fn low_rank(m: usize, n: usize, r: usize, rng: &mut impl Rng) -> Tensor {
    let a: Vec<f64> = (0..m * r).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..r * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_fn(&[m, n], |i| (0..r).map(|k| a[i[0] * r + k] * b[k * n + i[1]]).sum()).unwrap()
}

fn opts() -> AlsOptions {
    AlsOptions {
        restarts: 5,
        max_iters: 1000,
        tol: 1e-12,
        seed: 0,
    }
}

#[test]
fn singular_values_match_reference_and_truncation_error_is_tail_energy() {
    let mut r = rng(1);
    for case in 0..100 {
        let m = r.random_range(1..=64);
        let n = r.random_range(1..=48);
        let a = uniform(&[m, n], &mut r);
        let ours = svd(&a).unwrap();
        let reference = to_na(&a).singular_values();
        let mut sorted: Vec<f64> = reference.iter().copied().collect();
        sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
        assert_eq!(ours.s.len(), sorted.len());
        for (x, y) in ours.s.iter().zip(&sorted) {
            assert!((x - y).abs() <= 1e-9 * sorted[0].max(1.0), "case {case}: {x} vs {y}");
        }
        let k = r.random_range(1..=m.min(n));
        let t = truncated_svd(&a, k).unwrap();
        let err2 = a.sub(&t.reconstruct().unwrap()).unwrap().frobenius_norm().powi(2);
        let tail: f64 = sorted[k..].iter().map(|s| s * s).sum();
        assert!((err2 - tail).abs() <= 1e-9 * a.frobenius_norm().powi(2).max(1.0), "case {case}");
    }
}

#[test]
fn truncation_beats_sampled_rank_r_matrices() {
    let mut r = rng(2);
    let a = uniform(&[20, 15], &mut r);
    for rank in [1, 3, 7] {
        let best = a.sub(&truncated_svd(&a, rank).unwrap().reconstruct().unwrap()).unwrap().frobenius_norm();
        for _ in 0..100 {
            let other = low_rank(20, 15, rank, &mut r);
            let err = a.sub(&other).unwrap().frobenius_norm();
            assert!(best <= err + 1e-12);
        }
    }
}

#[test]
fn full_rank_dense_factorization_is_exact() {
    let mut r = rng(3);
    for _ in 0..50 {
        let m = r.random_range(1..=24);
        let n = r.random_range(1..=24);
        let layer = dense_layer(uniform(&[m, n], &mut r));
        let (d, f) = decompose_dense(&layer, m.min(n)).unwrap();
        let w = reconstruct_dense_weight(&d).unwrap();
        assert!(rel_diff(w.data(), layer.weight.data()) < 1e-9);
        assert!(f.fit() < 1e-9);
    }
}

#[test]
fn dense_rank_two_is_recovered_exactly() {
    let mut r = rng(4);
    let layer = dense_layer(low_rank(30, 12, 2, &mut r));
    let (d, f) = decompose_dense(&layer, 2).unwrap();
    assert!(rel_diff(reconstruct_dense_weight(&d).unwrap().data(), layer.weight.data()) < 1e-9);
    assert!(f.fit() < 1e-9);
}

#[test]
fn large_dense_layer_matches_reference_truncation() {
    let mut r = rng(5);
    let layer = dense_layer(uniform(&[512, 100], &mut r));
    let (d, _) = decompose_dense(&layer, 32).unwrap();
    let ours = reconstruct_dense_weight(&d).unwrap();
    let svd = to_na(&layer.weight).svd(true, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].partial_cmp(&svd.singular_values[x]).unwrap());
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut reference = DMatrix::<f64>::zeros(512, 100);
    for &k in &order[..32] {
        reference += svd.singular_values[k] * u.column(k) * vt.row(k);
    }
    let reference: Vec<f64> = (0..512).flat_map(|i| (0..100).map(move |j| (i, j))).map(|(i, j)| reference[(i, j)]).collect();
    assert!(rel_diff(ours.data(), &reference) < 1e-10);
}

#[test]
fn constructed_cp_kernels_are_recovered() {
    let mut r = rng(6);
    let k2 = cp_kernel([4, 3, 3, 3], 2, &mut r);
    let (d, f) = decompose_conv(&conv_layer(k2.clone(), 1), 2, &opts()).unwrap();
    assert!(f.fit() < 1e-6, "fit {}", f.fit());
    assert!(rel_diff(reconstruct_conv_kernel(&d).unwrap().data(), k2.data()) < 1e-6);

    let mut recovered = 0;
    for case in 0..20 {
        let rank = 1 + case % 3;
        let shape = [r.random_range(2..=6), r.random_range(2..=5), 3, r.random_range(1..=3) * 2 + 1];
        let k = cp_kernel(shape, rank, &mut r);
        let (d, _) = decompose_conv(&conv_layer(k.clone(), 1), rank, &opts()).unwrap();
        if rel_diff(reconstruct_conv_kernel(&d).unwrap().data(), k.data()) < 1e-6 {
            recovered += 1;
        }
    }
    assert_eq!(recovered, 20);
}

#[test]
fn separable_kernel_is_rank_one() {
    let row = [1.0, 2.0, 1.0];
    let col = [-1.0, 0.0, 1.0];
    let k = Tensor::from_fn(&[1, 1, 3, 3], |i| col[i[2]] * row[i[3]]).unwrap();
    let (d, f) = decompose_conv(&conv_layer(k.clone(), 1), 1, &opts()).unwrap();
    assert!(f.fit() < 1e-10);
    assert!(rel_diff(reconstruct_conv_kernel(&d).unwrap().data(), k.data()) < 1e-10);
}

#[test]
fn decomposed_conv_factor_shapes() {
    let mut r = rng(7);
    let k = uniform(&[6, 4, 3, 5], &mut r);
    let (d, _) = decompose_conv(&conv_layer(k, 1), 3, &AlsOptions::default()).unwrap();
    assert_eq!(d.f1.shape(), &[3, 1, 1, 5]);
    assert_eq!(d.f2.shape(), &[3, 1, 3, 1]);
    assert_eq!(d.f3.shape(), &[3, 4, 1, 1]);
    assert_eq!(d.f4.shape(), &[6, 3, 1, 1]);
    assert_eq!(d.bias.shape(), &[6]);
}

#[test]
fn exact_replacement_preserves_logits() {
    let model = reference_cnn([1, 16, 16], 4, 11).unwrap();
    let mut r = rng(8);
    let x = uniform(&[3, 1, 16, 16], &mut r);
    let before = forward(&model, &x).unwrap();
    let mut replaced = model.clone();
    for (i, layer) in model.layers.iter().enumerate() {
        if let LayerSpec::Dense(l) = layer {
            let (d, _) = decompose_dense(l, l.inputs.min(l.outputs)).unwrap();
            replaced = replaced.replace_layer(i, LayerSpec::DecomposedDense(d)).unwrap();
        }
    }
    // A convolution whose kernel is exactly CP-rank 2.
    let LayerSpec::Conv2d(c) = &model.layers[0] else { panic!("first layer is a convolution") };
    let kernel = cp_kernel(c.geom.kernel_shape(), 2, &mut r);
    let exact = Conv2d {
        weight: kernel.clone(),
        ..c.clone()
    };
    let base = model.replace_layer(0, LayerSpec::Conv2d(exact.clone())).unwrap();
    let (d, _) = decompose_conv(&exact, 2, &opts()).unwrap();
    let swapped = replaced.replace_layer(0, LayerSpec::DecomposedConv2d(d)).unwrap();
    let before_conv = forward(&base, &x).unwrap();
    let after = forward(&swapped, &x).unwrap();
    let dense_only = forward(&replaced, &x).unwrap();
    assert!(rel_diff(dense_only.data(), before.data()) < 1e-4);
    assert!(rel_diff(after.data(), before_conv.data()) < 1e-4);
}

#[test]
fn initial_rank_search_finds_constructed_rank() {
    let mut r = rng(9);
    let kernel = cp_kernel([16, 8, 3, 3], 4, &mut r);
    let conv = LayerSpec::Conv2d(conv_layer(kernel, 1));
    let model = Model::new("one", [8, 6, 6], 2, vec![conv, LayerSpec::Flatten, rankcut::nn::he_dense(16 * 36, 2, &mut r).unwrap()]).unwrap();
    let mut composed = ComposedList {
        layers: vec![0, 2],
        bits: vec![false, false],
    };
    composed.set(0, true);
    let mut cache = FactorCache::new(opts());
    let (ranks, fits) = initial_ranks(&model, &composed, 1e-4, &mut cache).unwrap();
    assert_eq!(ranks[&0], 4);
    assert!(fits[&0] <= 1e-4);
}
