use pfq_core::data::{make_synthetic, Dataset, SyntheticSpec};
use pfq_core::error::Error;
use pfq_core::exec::{infer, LayerGrads};
use pfq_core::graph::{LayerKind, LayerSpec, ModelGraph};
use pfq_core::models::plain_cnn;
use pfq_core::quant::{insert_quant_points, QuantPlacement};
use pfq_core::tensor::Tensor;
use pfq_core::train::{
    accuracy, metrics_csv, sgd_step, train_epochs, train_step, EarlyStopPolicy, LRSchedule, OptimizerState,
    TrainConfig,
};

fn data(per_class: usize, noise: f64, seed: u64) -> Dataset {
    make_synthetic(&SyntheticSpec {
        class_count: 3,
        per_class,
        shape: [2, 4, 4],
        seed,
        noise,
    })
    .unwrap()
}

fn config(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        schedule: LRSchedule {
            base_lr: lr,
            warmup_epochs: 0,
            period: 1000.0,
        },
        momentum: 0.9,
        weight_decay: 0.0,
        seed: 3,
        stop: EarlyStopPolicy::FixedEpochs,
        calibrate_epochs: None,
    }
}

fn net() -> ModelGraph {
    plain_cnn([2, 4, 4], &[6], 3, 11).unwrap()
}

#[test]
fn zero_epochs_leave_the_model_alone() {
    let mut g = net();
    let out = train_epochs(&mut g, &data(4, 0.5, 0), None, None, &config(0, 0.1)).unwrap();
    assert!(out.metrics.is_empty() && !out.stopped_early);
    assert_eq!(g, net());
}

#[test]
fn loss_falls_every_epoch_on_an_easy_task() {
    let mut g = net();
    let out = train_epochs(&mut g, &data(30, 0.3, 1), None, None, &config(5, 0.01)).unwrap();
    let losses: Vec<f64> = out.metrics.iter().map(|m| m.train_loss).collect();
    assert_eq!(losses.len(), 5);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    let csv = metrics_csv(&out.metrics);
    assert!(csv.starts_with("epoch,lr,train_loss,val_acc,test_acc\n"));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn linear_probe_separates_synthetic_classes() {
    let train = data(20, 0.2, 2);
    let layers = vec![LayerSpec::new(
        "fc",
        LayerKind::Affine {
            weights: Tensor::zeros(&[32, 3]),
            bias: vec![0.0; 3],
        },
    )];
    let mut g = ModelGraph::new([2, 4, 4], layers).unwrap();
    train_epochs(&mut g, &train, None, None, &config(20, 0.05)).unwrap();
    assert_eq!(accuracy(&g, &train, 16).unwrap(), 100.0);
}

#[test]
fn accuracy_drop_stops_once_within_margin() {
    let (train, val) = (data(6, 0.5, 3), data(2, 0.5, 4));
    let mut cfg = config(4, 0.01);
    cfg.stop = EarlyStopPolicy::AccuracyDrop {
        threshold: 100.0,
        reference: 50.0,
    };
    let mut g = net();
    let out = train_epochs(&mut g, &train, Some(&val), None, &cfg).unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.metrics.len(), 1);
    let err = train_epochs(&mut net(), &train, None, None, &cfg).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}

#[test]
fn weight_decay_skips_batch_norm() {
    let mut g = net();
    let before = g.clone();
    let grads: Vec<Option<LayerGrads>> = g
        .layers
        .iter()
        .map(|l| match &l.kind {
            LayerKind::Conv { params, .. } => Some(LayerGrads::Weighted {
                weights: Tensor::zeros(params.weights.shape()),
                bias: None,
            }),
            LayerKind::BatchNorm(p) => Some(LayerGrads::Bn {
                gamma: vec![0.0; p.channels()],
                beta: vec![0.0; p.channels()],
            }),
            _ => None,
        })
        .collect();
    let mut state = OptimizerState::new(0.0, 0.1).unwrap();
    sgd_step(&mut g, &grads, &mut state, 1.0).unwrap();
    assert_eq!(g.layers[1], before.layers[1]);
    let w0 = before.layers[0].kind.weights().unwrap().data();
    let w1 = g.layers[0].kind.weights().unwrap().data();
    for (a, b) in w0.iter().zip(w1) {
        assert_eq!(*b, a - 0.1 * a);
    }
}

#[test]
fn disabled_quantizers_are_transparent_to_training() {
    let ds = data(4, 0.5, 5);
    let (x, y) = ds.batches(&(0..ds.len()).collect::<Vec<_>>(), 12).next().unwrap().unwrap();
    let mut plain = net();
    let mut quant = insert_quant_points(
        &plain,
        &QuantPlacement {
            enable_activations: false,
            enable_weights: false,
            ..QuantPlacement::new(4, 4)
        },
    )
    .unwrap();
    let mut s1 = OptimizerState::new(0.9, 1e-3).unwrap();
    let mut s2 = s1.clone();
    for _ in 0..3 {
        let a = train_step(&mut plain, &x, &y, &mut s1, 0.05, true).unwrap();
        let b = train_step(&mut quant, &x, &y, &mut s2, 0.05, true).unwrap();
        assert_eq!(a, b);
    }
    for layer in &plain.layers {
        let mut other = quant.layer(&layer.name).unwrap().clone();
        other.weight_quant = None;
        assert_eq!(&other, layer);
    }
    assert_eq!(infer(&plain, &x).unwrap(), infer(&quant, &x).unwrap());
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let mut g = net();
    let err = train_epochs(&mut g, &data(10, 0.5, 6), None, None, &config(5, 1e12)).unwrap_err();
    assert!(matches!(err, Error::Diverged(_) | Error::NonFinite(_)), "{err}");
}
