use aquant_core::calibration::{calibrate, BitWidths, CalibConfig};
use aquant_core::model::io::{load_model, load_samples, save_model, save_samples, SampleSet};
use aquant_core::model::toy::{synthetic_samples, toy_conv_net, ToyConfig};
use aquant_core::model::{Block, Geometry, Layer, LayerSpec, LinearLayer};
use aquant_core::{forward_fp, forward_quant, ConvGeometry, Error, Model, Tensor};
use tempfile::TempDir;

fn spec(name: &str, layer: Layer) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        layer,
    }
}

/// 3x3 box filter over `1..=9`, then ReLU, then a 9 -> 2 fully connected
/// layer; every output is worked out by hand below.
fn golden_model() -> Model {
    let conv = ConvGeometry::same(1, 1, 3, 3, 3).unwrap();
    let box_filter = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
    let fc = Geometry::Fc {
        in_features: 9,
        out_features: 2,
    };
    let mut fc_w = vec![0.0; 18];
    fc_w[4] = 1.0;
    for v in &mut fc_w[9..] {
        *v = -0.01;
    }
    Model::new(
        vec![1, 3, 3],
        vec![
            spec("conv", Layer::Linear(LinearLayer::new(Geometry::Conv(conv), box_filter, Some(vec![-20.0])).unwrap())),
            spec("relu", Layer::Relu),
            spec(
                "fc",
                Layer::Linear(LinearLayer::new(fc, Tensor::new(vec![2, 9], fc_w).unwrap(), Some(vec![0.5, 1.0])).unwrap()),
            ),
        ],
        vec![Block { start: 0, end: 3 }],
    )
    .unwrap()
}

#[test]
fn golden_forward() {
    let model = golden_model();
    let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let acts = forward_fp(&model, &x).unwrap();
    // neighbourhood sums with zero padding, minus the bias of 20
    let conv = [12.0, 21.0, 16.0, 27.0, 45.0, 33.0, 24.0, 39.0, 28.0].map(|v| v - 20.0);
    let relu = conv.map(|v: f64| v.max(0.0));
    assert_eq!(acts[1].data(), &conv);
    assert_eq!(acts[2].data(), &relu);
    let rest: f64 = relu.iter().sum();
    let out = acts.last().unwrap();
    assert_eq!(out.shape(), &[1, 2]);
    assert!((out.data()[0] - (relu[4] + 0.5)).abs() < 1e-12);
    assert!((out.data()[1] - (1.0 - 0.01 * rest)).abs() < 1e-12);
}

#[test]
fn calibrated_model_round_trips_bit_exactly() {
    let toy = ToyConfig::default();
    let fp = toy_conv_net(&toy, 7).unwrap();
    let calib = synthetic_samples(&toy.input_shape, 64, 8).unwrap();
    let mut cfg = CalibConfig {
        bits: BitWidths {
            weight: 3,
            activation: 4,
            first_last: None,
        },
        ..CalibConfig::default()
    };
    cfg.schedule.total_iters = 10;
    let model = calibrate(&fp, &calib, &cfg).unwrap().model;

    let tmp = TempDir::new().unwrap();
    save_model(&model, &tmp.path().join("m")).unwrap();
    let loaded = load_model(&tmp.path().join("m")).unwrap();
    assert_eq!(loaded, model);

    let x = synthetic_samples(&toy.input_shape, 16, 9).unwrap();
    let a = forward_quant(&model, &x).unwrap();
    let b = forward_quant(&loaded, &x).unwrap();
    for (p, q) in a.activations.iter().zip(&b.activations) {
        assert!(p.data().iter().zip(q.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}

#[test]
fn samples_round_trip_and_corruption_is_detected() {
    let set = SampleSet {
        samples: synthetic_samples(&[2, 3, 3], 5, 1).unwrap(),
        labels: Some(vec![0, 1, 1, 0, 1]),
        seed: 1,
    };
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("s");
    save_samples(&set, &dir).unwrap();
    let back = load_samples(&dir).unwrap();
    assert_eq!(back.samples, set.samples);
    assert_eq!(back.labels, set.labels);

    let blob = dir.join("samples.bin");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[3] ^= 0x40;
    std::fs::write(&blob, bytes).unwrap();
    assert!(matches!(load_samples(&dir), Err(Error::ChecksumMismatch(_))));
}

#[test]
fn missing_artifacts_are_errors() {
    let tmp = TempDir::new().unwrap();
    assert!(load_model(&tmp.path().join("nothing")).is_err());
    assert!(load_samples(tmp.path()).is_err());
}
