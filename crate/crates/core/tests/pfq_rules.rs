use pfq_core::bn::BNParams;
use pfq_core::exec::infer;
use pfq_core::graph::{LayerKind, LayerSpec, ModelGraph};
use pfq_core::pfq::{
    apply_pfq, channel_constancy_report, constancy_csv, scan_candidates, CorrectionKind, Outcome, PfqOptions,
    SkipReason,
};
use pfq_core::quant::{QuantConfig, QuantPoint, QuantTarget, RangePolicy};
use pfq_core::tensor::{ConvParams, DepthwiseConvParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-0.5..0.5))
}

fn conv(rng: &mut ChaCha8Rng, name: &str, oc: usize, ic: usize, k: usize, bias: bool) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Conv {
            params: ConvParams::new(rand_t(rng, &[oc, ic, k, k]), bias.then(|| vec![0.05; oc])).unwrap(),
            stride: (1, 1),
            padding: (0, 0),
        },
    )
}

fn bn(name: &str, vars: &[f64], betas: &[f64]) -> LayerSpec {
    let mut p = BNParams::new(vars.len(), EPS, 0.9).unwrap();
    p.running_var = vars.to_vec();
    p.beta = betas.to_vec();
    LayerSpec::new(name, LayerKind::BatchNorm(p))
}

fn plain(name: &str, kind: LayerKind) -> LayerSpec {
    LayerSpec::new(name, kind)
}

fn fc(rng: &mut ChaCha8Rng, d: usize) -> LayerSpec {
    plain(
        "fc",
        LayerKind::Affine {
            weights: rand_t(rng, &[d, 2]),
            bias: vec![0.0; 2],
        },
    )
}

/// conv(3->n) -> bn(vars) -> relu -> conv(n->3, bias) -> relu -> pool -> fc
fn chain(vars: &[f64], betas: &[f64], seed: u64) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = vars.len();
    let layers = vec![
        conv(&mut rng, "c0", n, 3, 3, false),
        bn("bn0", vars, betas),
        plain("r0", LayerKind::Relu),
        conv(&mut rng, "c1", 3, n, 1, true),
        plain("r1", LayerKind::Relu),
        plain("pool", LayerKind::GlobalAvgPool),
        fc(&mut rng, 3),
    ];
    ModelGraph::new([3, 5, 5], layers).unwrap()
}

#[test]
fn strict_threshold() {
    let g = chain(&[2.0 * EPS, EPS / 2.0, EPS / 10.0, EPS, 0.0], &[0.0; 5], 0);
    let c: Vec<usize> = scan_candidates(&g, EPS).iter().map(|c| c.channel).collect();
    assert_eq!(c, vec![1, 2, 4]);
}

#[test]
fn no_candidates_is_a_no_op() {
    let g = chain(&[1.0, 0.5, EPS], &[0.1; 3], 1);
    let (out, report) = apply_pfq(&g, &PfqOptions::new(EPS)).unwrap();
    assert_eq!(out, g);
    assert!(report.entries.is_empty() && report.layers.is_empty());
    assert_eq!(report.to_csv(), "layer,channel,kind,Vt,beta,U_norm\n");
}

#[test]
fn bookkeeping_and_idempotence() {
    let g = chain(&[1.0, 0.0, 0.5, 1e-7], &[0.2, 0.4, 0.1, -0.3], 2);
    let (once, report) = apply_pfq(&g, &PfqOptions::new(EPS)).unwrap();
    let kinds: Vec<Outcome> = report.entries.iter().map(|e| e.outcome).collect();
    assert_eq!(
        kinds,
        vec![Outcome::Pruned(CorrectionKind::Bias), Outcome::Pruned(CorrectionKind::ReluZero)]
    );
    assert_eq!(report.weights_removed(), g.weight_count() - once.weight_count());
    assert_eq!(report.layers[0].weights_removed, report.weights_removed());
    // two conv0 filters of 27 and two conv1 input slices of 3
    assert_eq!(report.weights_removed(), 2 * 27 + 2 * 3);
    let pct = 100.0 * report.weights_removed() as f64 / g.weight_count() as f64;
    assert_eq!(report.percent_weights_removed(), pct);
    assert!(report.macs_after < report.macs_before);
    assert_eq!(report.macs_after, once.count_macs().unwrap());
    let (twice, second) = apply_pfq(&once, &PfqOptions::new(EPS)).unwrap();
    assert_eq!(twice, once);
    assert!(second.entries.is_empty());
    assert!(report.summary().contains("weights:"));
}

#[test]
fn residual_consumer_is_skipped() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layers = vec![
        conv(&mut rng, "c0", 4, 3, 1, false),
        bn("bn0", &[1.0; 4], &[0.0; 4]),
        plain("r0", LayerKind::Relu),
        conv(&mut rng, "c1", 4, 4, 1, false),
        bn("bn1", &[1.0, 0.0, 1.0, 1.0], &[0.0, 0.5, 0.0, 0.0]),
        plain("r1", LayerKind::Relu),
        plain(
            "add",
            LayerKind::AddJunction {
                lhs: "r1".into(),
                rhs: "r0".into(),
            },
        ),
        plain("pool", LayerKind::GlobalAvgPool),
        fc(&mut rng, 4),
    ];
    let g = ModelGraph::new([3, 4, 4], layers).unwrap();
    let (out, report) = apply_pfq(&g, &PfqOptions::new(EPS)).unwrap();
    assert_eq!(out, g);
    assert_eq!(report.entries.len(), 1);
    assert_eq!(report.entries[0].outcome, Outcome::Skipped(SkipReason::Residual));
    assert!(report.to_csv().contains("bn1,1,skip:residual"));
}

#[test]
fn all_channels_dead_refuses_layer() {
    let g = chain(&[0.0, 0.0], &[0.1, 0.2], 4);
    let (out, report) = apply_pfq(&g, &PfqOptions::new(EPS)).unwrap();
    assert_eq!(out, g);
    assert!(report.entries.iter().all(|e| e.outcome == Outcome::Skipped(SkipReason::WouldEmpty)));
    assert_eq!(report.entries.len(), 2);
}

#[test]
fn trailing_batch_norm_has_no_consumer() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layers = vec![conv(&mut rng, "c0", 3, 2, 1, false), bn("bn0", &[1.0, 0.0, 1.0], &[0.0; 3])];
    let g = ModelGraph::new([2, 3, 3], layers).unwrap();
    let (out, report) = apply_pfq(&g, &PfqOptions::new(EPS)).unwrap();
    assert_eq!(out, g);
    assert_eq!(report.entries[0].outcome, Outcome::Skipped(SkipReason::Output));
}

/// stem -> bn -> relu -> dw -> bn(dead) -> relu -> pw -> bn -> relu -> head.
/// Removing the dead depthwise channel must also remove the stem filter
/// that fed it.
#[test]
fn depthwise_producer_removes_upstream_filter() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dw = DepthwiseConvParams::new(rand_t(&mut rng, &[4, 1, 3, 3]), None).unwrap();
    let layers = vec![
        conv(&mut rng, "stem", 4, 3, 1, false),
        bn("stem.bn", &[1.0; 4], &[0.0; 4]),
        plain("stem.act", LayerKind::Relu),
        plain(
            "dw",
            LayerKind::DepthwiseConv {
                params: dw,
                stride: (1, 1),
                padding: (1, 1),
            },
        ),
        bn("dw.bn", &[1.0, 1.0, 0.0, 1.0], &[0.0, 0.0, 0.3, 0.0]),
        plain("dw.act", LayerKind::Relu),
        conv(&mut rng, "pw", 5, 4, 1, false),
        bn("pw.bn", &[1.0; 5], &[0.0; 5]),
        plain("pw.act", LayerKind::Relu),
        plain("pool", LayerKind::GlobalAvgPool),
        fc(&mut rng, 5),
    ];
    let g = ModelGraph::new([3, 4, 4], layers).unwrap();
    let (out, report) = apply_pfq(&g, &PfqOptions::new(EPS)).unwrap();
    assert_eq!(report.entries[0].outcome, Outcome::Pruned(CorrectionKind::Beta));
    assert_eq!(out.layer("stem").unwrap().kind.weights().unwrap().shape(), &[3, 3, 1, 1]);
    assert_eq!(out.layer("dw").unwrap().kind.weights().unwrap().shape(), &[3, 1, 3, 3]);
    assert_eq!(out.layer("pw").unwrap().kind.weights().unwrap().shape(), &[5, 3, 1, 1]);
    out.validate().unwrap();
}

fn quantized_chain(beta: f64) -> ModelGraph {
    let mut g = chain(&[1.0, 0.0, 1.0], &[0.0, beta, 0.0], 7);
    if let LayerKind::BatchNorm(p) = &mut g.layers[1].kind {
        p.gamma[1] = 0.0;
    }
    let mut cfg = QuantConfig::new(2, 0.0, 1.0).unwrap();
    cfg.policy = RangePolicy::ActivationEma;
    g.layers.insert(
        3,
        plain(
            "r0.aq",
            LayerKind::QuantPoint(QuantPoint {
                target: QuantTarget::Activations("r0".into()),
                config: cfg,
                enabled: true,
            }),
        ),
    );
    g.validate().unwrap();
    g
}

#[test]
fn quantized_constant_keeps_quantized_network_exact() {
    let g = quantized_chain(0.3);
    let c = scan_candidates(&g, EPS);
    assert_eq!(c[0].act_of_beta, 0.25);
    let x = Tensor::from_fn(&[8, 3, 5, 5], |i| ((i * 37) % 11) as f64 / 5.0 - 1.0);
    let with_q = PfqOptions {
        quantize_act_of_beta: true,
        ..PfqOptions::new(EPS)
    };
    let (exact, _) = apply_pfq(&g, &with_q).unwrap();
    let (float, _) = apply_pfq(&g, &PfqOptions::new(EPS)).unwrap();
    let y = infer(&g, &x).unwrap();
    assert!(infer(&exact, &x).unwrap().max_abs_diff(&y).unwrap() < 1e-12);
    assert!(infer(&float, &x).unwrap().max_abs_diff(&y).unwrap() > 1e-6);
}

#[test]
fn constancy_rows_cover_every_channel() {
    let g = chain(&[1.0, 0.0, 0.5], &[0.1, 0.2, 0.3], 8);
    let x = Tensor::from_fn(&[4, 3, 5, 5], |i| (i % 7) as f64 - 3.0);
    let rows = channel_constancy_report(&g, &x).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].spread > 0.0);
    let csv = constancy_csv(&rows);
    assert!(csv.starts_with("layer,channel,Vt,spread\n"));
    assert_eq!(csv.lines().count(), 4);
}
