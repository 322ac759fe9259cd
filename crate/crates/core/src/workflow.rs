//! The staged quantization workflow:
//!
//! 0. prune constant channels
//! 1. fine-tune with quantized activations, batch norm live
//! 2. prune again, now with quantized activation constants
//! 3. fold batch norm
//! 4. fine-tune with quantized activations and weights
//!
//! Each stage can write its model and reports under `stage{k}/`, and a run
//! can resume at any stage from the previous stage's model.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{dynamic_range_report, save_model, ModelGraph, RangeReport};
use crate::pfq::{apply_pfq, PfqOptions, PruneReport};
use crate::quant::{insert_quant_points, set_activation_quant_enabled, set_weight_quant_enabled, QuantPlacement, DEFAULT_ACT_MOMENTUM};
use crate::train::{accuracy, metrics_csv, train_epochs, EarlyStopPolicy, EpochMetrics, TrainConfig};
use log::info;
use std::fs;
use std::path::{Path, PathBuf};

pub const STAGE_NAMES: [&str; 5] = [
    "pfq",
    "finetune-activations",
    "pfq-quantized",
    "fold-bn",
    "finetune-weights",
];

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowConfig {
    pub act_bits: u32,
    pub weight_bits: u32,
    pub act_momentum: f64,
    pub epsilon: f64,
    /// Stage 1 training; its `epochs` is the activation budget.
    pub stage_a: TrainConfig,
    /// Stage 4 training; its `epochs` is the weight budget.
    pub stage_w: TrainConfig,
    /// When false, both pruning stages are skipped (the ablation arm).
    pub pfq_enabled: bool,
    /// Early-stop margin in accuracy points against the input model's
    /// validation accuracy. Overrides the stages' own stop policies.
    pub accuracy_drop: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: usize,
    pub name: &'static str,
    pub prune: Option<PruneReport>,
    pub range: Option<RangeReport>,
    pub metrics: Vec<EpochMetrics>,
}

impl StageReport {
    fn new(stage: usize) -> Self {
        StageReport {
            stage,
            name: STAGE_NAMES[stage],
            prune: None,
            range: None,
            metrics: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorkflowResult {
    pub graph: ModelGraph,
    pub stages: Vec<StageReport>,
    /// One line per executed or skipped stage, in order.
    pub trace: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct WorkflowData<'a> {
    pub train: &'a Dataset,
    pub val: Option<&'a Dataset>,
    pub test: Option<&'a Dataset>,
}

fn with_stop(cfg: &TrainConfig, stop: Option<EarlyStopPolicy>) -> TrainConfig {
    let mut cfg = cfg.clone();
    if let Some(s) = stop {
        cfg.stop = s;
    }
    cfg
}

fn persist(dir: &Path, graph: &ModelGraph, report: &StageReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_model(graph, dir.join("model.json"))?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&report.metrics))?;
    let prune_csv = report.prune.as_ref().map(PruneReport::to_csv).unwrap_or_else(|| PruneReport::default().to_csv());
    fs::write(dir.join("prune_report.csv"), prune_csv)?;
    if let Some(p) = &report.prune {
        fs::write(dir.join("prune_summary.txt"), p.summary())?;
    }
    if let Some(r) = &report.range {
        fs::write(dir.join("range_report.csv"), r.to_csv())?;
    }
    Ok(())
}

/// Runs the workflow on a pre-trained float model.
pub fn run_workflow(pretrained: &ModelGraph, data: WorkflowData, cfg: &WorkflowConfig, out: Option<&Path>) -> Result<WorkflowResult> {
    run_workflow_from(pretrained, 0, data, cfg, out)
}

/// Runs stages `start..=4`. `graph` must be the output of stage
/// `start - 1` (or the pre-trained model when `start` is 0).
pub fn run_workflow_from(
    graph: &ModelGraph,
    start: usize,
    data: WorkflowData,
    cfg: &WorkflowConfig,
    out: Option<&Path>,
) -> Result<WorkflowResult> {
    if start >= STAGE_NAMES.len() {
        return Err(Error::InvalidParam(format!("no stage {start}")));
    }
    graph.validate()?;
    let stop = match (cfg.accuracy_drop, data.val) {
        (Some(threshold), Some(val)) if !val.is_empty() => Some(EarlyStopPolicy::AccuracyDrop {
            threshold,
            reference: accuracy(graph, val, cfg.stage_a.batch_size)?,
        }),
        (Some(_), _) => {
            return Err(Error::Data("accuracy-drop stopping needs a non-empty validation set".into()))
        }
        (None, _) => None,
    };
    let mut g = graph.clone();
    let mut stages = Vec::new();
    let mut trace = Vec::new();
    for stage in start..STAGE_NAMES.len() {
        let mut report = StageReport::new(stage);
        let line = match stage {
            0 | 2 if !cfg.pfq_enabled => "skipped (pruning disabled)".to_string(),
            0 | 2 => {
                if !g.has_batch_norm() {
                    return Err(Error::StageOrder(format!(
                        "stage {stage} prunes batch-norm channels but the graph has none"
                    )));
                }
                let opts = PfqOptions {
                    epsilon: cfg.epsilon,
                    quantize_act_of_beta: stage == 2,
                    bias_correction: true,
                };
                let (next, pr) = apply_pfq(&g, &opts)?;
                g = next;
                let line = format!(
                    "pruned {} channels, weights {} -> {}",
                    pr.pruned().count(),
                    pr.weights_before,
                    pr.weights_after
                );
                report.prune = Some(pr);
                line
            }
            1 => {
                if !g.has_batch_norm() {
                    return Err(Error::StageOrder("activation fine-tuning expects unfolded batch norm".into()));
                }
                let placement = QuantPlacement {
                    act_bits: cfg.act_bits,
                    weight_bits: cfg.weight_bits,
                    act_momentum: cfg.act_momentum,
                    enable_activations: true,
                    enable_weights: false,
                };
                g = insert_quant_points(&g, &placement)?;
                let mut tc = with_stop(&cfg.stage_a, stop);
                tc.calibrate_epochs = None;
                let res = train_epochs(&mut g, data.train, data.val, data.test, &tc)?;
                report.metrics = res.metrics;
                format!("trained {} epochs, activations {}-bit", report.metrics.len(), cfg.act_bits)
            }
            3 => {
                g = g.fold_batch_norms()?;
                report.range = Some(dynamic_range_report(&g));
                "folded batch norm".to_string()
            }
            _ => {
                if g.has_batch_norm() {
                    return Err(Error::StageOrder("weight quantization requires folded batch norm".into()));
                }
                let placement = QuantPlacement {
                    act_bits: cfg.act_bits,
                    weight_bits: cfg.weight_bits,
                    act_momentum: cfg.act_momentum,
                    enable_activations: true,
                    enable_weights: true,
                };
                g = insert_quant_points(&g, &placement)?;
                let mut tc = with_stop(&cfg.stage_w, stop);
                tc.calibrate_epochs = Some(1);
                let res = train_epochs(&mut g, data.train, data.val, data.test, &tc)?;
                report.metrics = res.metrics;
                report.range = Some(dynamic_range_report(&g));
                format!(
                    "trained {} epochs, activations {}-bit, weights {}-bit",
                    report.metrics.len(),
                    cfg.act_bits,
                    cfg.weight_bits
                )
            }
        };
        let line = format!("stage {stage} {}: {line}", STAGE_NAMES[stage]);
        info!("{line}");
        trace.push(line);
        if let Some(dir) = out {
            persist(&stage_dir(dir, stage), &g, &report)?;
        }
        stages.push(report);
    }
    if let Some(dir) = out {
        fs::write(dir.join("workflow.log"), trace.join("\n") + "\n")?;
    }
    Ok(WorkflowResult { graph: g, stages, trace })
}

pub fn stage_dir(root: &Path, stage: usize) -> PathBuf {
    root.join(format!("stage{stage}"))
}

/// The fine-tune-once comparison: prune once, fold, then train with
/// activations and weights quantized together for both budgets combined.
pub fn run_single_stage_baseline(
    pretrained: &ModelGraph,
    data: WorkflowData,
    cfg: &WorkflowConfig,
) -> Result<(ModelGraph, StageReport)> {
    let mut report = StageReport::new(4);
    let mut g = if cfg.pfq_enabled {
        let (g, pr) = apply_pfq(pretrained, &PfqOptions::new(cfg.epsilon))?;
        report.prune = Some(pr);
        g
    } else {
        pretrained.clone()
    };
    g = g.fold_batch_norms()?;
    let placement = QuantPlacement {
        act_bits: cfg.act_bits,
        weight_bits: cfg.weight_bits,
        act_momentum: cfg.act_momentum,
        enable_activations: true,
        enable_weights: true,
    };
    g = insert_quant_points(&g, &placement)?;
    let mut tc = cfg.stage_w.clone();
    tc.epochs = cfg.stage_a.epochs + cfg.stage_w.epochs;
    tc.calibrate_epochs = None;
    report.metrics = train_epochs(&mut g, data.train, data.val, data.test, &tc)?.metrics;
    report.range = Some(dynamic_range_report(&g));
    Ok((g, report))
}

/// Copy of `graph` with every quantizer switched off.
pub fn without_quantization(graph: &ModelGraph) -> ModelGraph {
    let mut g = graph.clone();
    set_weight_quant_enabled(&mut g, false);
    set_activation_quant_enabled(&mut g, false);
    g
}

impl WorkflowConfig {
    pub fn new(act_bits: u32, weight_bits: u32, stage_a: TrainConfig, stage_w: TrainConfig) -> Self {
        WorkflowConfig {
            act_bits,
            weight_bits,
            act_momentum: DEFAULT_ACT_MOMENTUM,
            epsilon: crate::bn::DEFAULT_EPSILON,
            stage_a,
            stage_w,
            pfq_enabled: true,
            accuracy_drop: None,
        }
    }
}
