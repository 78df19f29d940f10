use rankcut::data::{synth_shapes, Dataset};
use rankcut::nn::{evaluate_top1, forward, reference_cnn, train, TrainConfig};
use rankcut::Tensor;

fn small_cfg(seed: u64, workers: usize) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 16,
        lr: 0.02,
        seed,
        workers,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_inputs_give_identical_weights() {
    let data = synth_shapes(12, 4, 16, 3).unwrap();
    let model = reference_cnn([1, 16, 16], 4, 1).unwrap();
    for workers in [1, 3] {
        let a = train(&model, &data, &small_cfg(5, workers)).unwrap();
        let b = train(&model, &data, &small_cfg(5, workers)).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.losses, b.losses);
    }
    let other = train(&model, &data, &small_cfg(6, 1)).unwrap();
    assert_ne!(other.model, train(&model, &data, &small_cfg(5, 1)).unwrap().model);
}

#[test]
fn zero_learning_rate_leaves_weights_untouched() {
    let data = synth_shapes(8, 4, 16, 0).unwrap();
    let model = reference_cnn([1, 16, 16], 4, 2).unwrap();
    let cfg = TrainConfig {
        lr: 0.0,
        ..small_cfg(1, 2)
    };
    let out = train(&model, &data, &cfg).unwrap();
    assert_eq!(out.model, model);
}

#[test]
fn frozen_layers_are_byte_identical() {
    let data = synth_shapes(8, 4, 16, 0).unwrap();
    let model = reference_cnn([1, 16, 16], 4, 2).unwrap();
    let cfg = TrainConfig {
        frozen: vec![0, 3],
        ..small_cfg(1, 1)
    };
    let out = train(&model, &data, &cfg).unwrap();
    assert_eq!(out.model.layers[0], model.layers[0]);
    assert_eq!(out.model.layers[3], model.layers[3]);
    assert_ne!(out.model, model);
}

#[test]
fn learns_synthetic_shapes() {
    let data = synth_shapes(40, 4, 16, 1).unwrap();
    let (train_set, test_set) = data.stratified_split(0.25, 4).unwrap();
    let model = reference_cnn([1, 16, 16], 4, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 8,
        batch_size: 16,
        lr: 0.02,
        ..TrainConfig::default()
    };
    let out = train(&model, &train_set, &cfg).unwrap();
    assert!(out.losses.last().unwrap() < out.losses.first().unwrap());
    let acc = evaluate_top1(&out.model, &test_set).unwrap();
    assert!(acc >= 70.0, "test accuracy {acc}");
}

#[test]
fn top1_counts_argmax_with_lowest_index_ties() {
    let model = reference_cnn([1, 16, 16], 4, 9).unwrap();
    let data = synth_shapes(5, 4, 16, 2).unwrap();
    let logits = forward(&model, &data.images).unwrap();
    let predicted: Vec<usize> = logits
        .data()
        .chunks_exact(4)
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter().position(|&v| v == max).unwrap()
        })
        .collect();
    let correct = predicted.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    let expected = 100.0 * correct as f64 / data.len() as f64;
    assert!((evaluate_top1(&model, &data).unwrap() - expected).abs() < 1e-12);

    // All-equal logits: every sample is predicted as class 0.
    let mut zero = model.clone();
    let last = zero.layers.len() - 1;
    if let rankcut::LayerSpec::Dense(d) = &mut zero.layers[last] {
        d.weight = Tensor::zeros(d.weight.shape()).unwrap();
        d.bias = Tensor::zeros(d.bias.shape()).unwrap();
    }
    let labels = vec![0, 1, 2, 3];
    let images = Tensor::zeros(&[4, 1, 16, 16]).unwrap();
    let ds = Dataset::new(images, labels, 4).unwrap();
    assert!((evaluate_top1(&zero, &ds).unwrap() - 25.0).abs() < 1e-12);
}
