//! `pfq`: prune constant channels, fold batch norm and fine-tune with fake
//! quantization from the command line.
//!
//! Failures print one line, `error[<kind>]: <message>`, on stderr and exit
//! with status 1.

mod config;

use clap::{ArgAction, Parser, Subcommand};
use config::{RunConfig, Ste};
use log::LevelFilter;
use pfq_core::data::Dataset;
use pfq_core::graph::{dynamic_range_report, load_model, mac_report_csv, save_model, LayerKind, ModelGraph};
use pfq_core::pfq::{apply_pfq, channel_constancy_report, constancy_csv, PfqOptions};
use pfq_core::quant::{insert_quant_points, QuantPlacement, SteMode};
use pfq_core::train::{accuracy, metrics_csv, train_epochs, EarlyStopPolicy};
use pfq_core::workflow::{run_single_stage_baseline, run_workflow_from, WorkflowData};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "pfq", version, about = "Channel pruning, BN folding and quantization-aware fine-tuning")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set stage_a.epochs=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for data, initialization and shuffling (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for all outputs (overrides `out`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads, 0 for one per core (overrides `threads`).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Input model manifest.
    #[arg(long, global = true, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Log progress to stderr; repeat for more detail.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a float model, from `--model` or freshly built from `[model]`.
    Train,
    /// Remove channels whose running variance is below epsilon.
    Pfq,
    /// Fold every batch norm into its producer.
    FoldBn,
    /// Insert activation quantizers and attach weight quantizers.
    QuantizeAnnotate {
        /// Leave weight quantizers disabled.
        #[arg(long)]
        no_weights: bool,
    },
    /// Fine-tune with quantized activations, and weights if asked.
    Finetune {
        /// Also quantize weights; the model must already be folded.
        #[arg(long)]
        weights: bool,
    },
    /// Run the staged workflow, writing `stage{k}/` under the run directory.
    Workflow {
        /// Resume at this stage; `--model` is then the previous stage's output.
        #[arg(long, default_value_t = 0)]
        from_stage: usize,
    },
    /// Prune, fold and fine-tune once with everything quantized.
    BaselineOnce,
    /// Print test and validation accuracy.
    Eval,
    /// Per-layer weight range (max - min).
    ReportRange,
    /// Per-channel running variance against observed output spread.
    ReportConstancy {
        /// Training images used for the measurement.
        #[arg(long, default_value_t = 256)]
        samples: usize,
    },
    /// Print the total multiply-accumulate count.
    CountMacs {
        /// Print a per-layer CSV instead.
        #[arg(long)]
        per_layer: bool,
    },
}

enum CliError {
    Config(String),
    Core(pfq_core::Error),
}

impl From<pfq_core::Error> for CliError {
    fn from(e: pfq_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn line(&self) -> String {
        let (kind, msg) = match self {
            CliError::Config(m) => ("config", m.clone()),
            CliError::Core(e) => (e.kind(), e.to_string()),
        };
        format!("error[{kind}]: {}", msg.split_whitespace().collect::<Vec<_>>().join(" "))
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(match cli.verbose {
            0 => LevelFilter::Warn,
            1 => LevelFilter::Info,
            _ => LevelFilter::Debug,
        })
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &cli.out {
        overrides.push(format!("out={}", toml::Value::String(o.display().to_string())));
    }
    if let Some(t) = cli.threads {
        overrides.push(format!("threads={t}"));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides).map_err(CliError::Config)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    }
    let model = || -> Result<ModelGraph> {
        let path = cli.model.as_ref().ok_or_else(|| CliError::Config("--model is required".into()))?;
        Ok(load_model(path)?)
    };
    let out = cfg.out.clone();

    match cli.command {
        Command::Train => {
            let mut g = match &cli.model {
                Some(p) => load_model(p)?,
                None => cfg.build_model()?,
            };
            let data = cfg.load_data()?;
            let res = train_epochs(
                &mut g,
                &data.train,
                data.val.as_ref(),
                Some(&data.test),
                &cfg.train.to_train_config(cfg.seed),
            )?;
            write(&out, "metrics.csv", &metrics_csv(&res.metrics))?;
            save(&out, &g)?;
            if let Some(m) = res.metrics.last() {
                println!("trained {} epochs, loss {:.4}, test accuracy {:.2}%", res.metrics.len(), m.train_loss, m.test_acc.unwrap_or(0.0));
            }
        }
        Command::Pfq => {
            let opts = PfqOptions {
                epsilon: cfg.pfq.epsilon,
                quantize_act_of_beta: cfg.pfq.quantize_act_of_beta,
                bias_correction: true,
            };
            let (g, report) = apply_pfq(&model()?, &opts)?;
            write(&out, "prune_report.csv", &report.to_csv())?;
            write(&out, "prune_summary.txt", &report.summary())?;
            save(&out, &g)?;
            print!("{}", report.summary());
        }
        Command::FoldBn => {
            let g = model()?.fold_batch_norms()?;
            write(&out, "range_report.csv", &dynamic_range_report(&g).to_csv())?;
            save(&out, &g)?;
            println!("folded batch norm, {} layers", g.layers.len());
        }
        Command::QuantizeAnnotate { no_weights } => {
            let g = annotate(&model()?, &cfg, !no_weights)?;
            save(&out, &g)?;
            println!("annotated {} quantizers", count_quantizers(&g));
        }
        Command::Finetune { weights } => {
            let g = model()?;
            if weights && g.has_batch_norm() {
                return Err(pfq_core::Error::StageOrder("weight quantization requires folded batch norm; run fold-bn first".into()).into());
            }
            let mut g = annotate(&g, &cfg, weights)?;
            let data = cfg.load_data()?;
            let section = if weights { &cfg.stage_w } else { &cfg.stage_a };
            let mut tc = section.to_train_config(cfg.seed);
            if weights {
                tc.calibrate_epochs = Some(1);
            }
            if let Some(threshold) = cfg.accuracy_drop {
                let val = data.val.as_ref().ok_or_else(|| CliError::Config("accuracy_drop needs data.val_per_class > 0".into()))?;
                tc.stop = EarlyStopPolicy::AccuracyDrop {
                    threshold,
                    reference: accuracy(&g, val, tc.batch_size)?,
                };
            }
            let res = train_epochs(&mut g, &data.train, data.val.as_ref(), Some(&data.test), &tc)?;
            write(&out, "metrics.csv", &metrics_csv(&res.metrics))?;
            save(&out, &g)?;
            println!("fine-tuned {} epochs", res.metrics.len());
        }
        Command::Workflow { from_stage } => {
            clipped_only(&cfg)?;
            let g = model()?;
            let data = cfg.load_data()?;
            let wd = WorkflowData {
                train: &data.train,
                val: data.val.as_ref(),
                test: Some(&data.test),
            };
            let res = run_workflow_from(&g, from_stage, wd, &cfg.workflow_config(), Some(&out))?;
            save(&out, &res.graph)?;
            for line in &res.trace {
                println!("{line}");
            }
        }
        Command::BaselineOnce => {
            clipped_only(&cfg)?;
            let g = model()?;
            let data = cfg.load_data()?;
            let wd = WorkflowData {
                train: &data.train,
                val: data.val.as_ref(),
                test: Some(&data.test),
            };
            let (g, report) = run_single_stage_baseline(&g, wd, &cfg.workflow_config())?;
            write(&out, "metrics.csv", &metrics_csv(&report.metrics))?;
            if let Some(p) = &report.prune {
                write(&out, "prune_report.csv", &p.to_csv())?;
            }
            save(&out, &g)?;
            println!("baseline trained {} epochs", report.metrics.len());
        }
        Command::Eval => {
            let g = model()?;
            let data = cfg.load_data()?;
            let bs = cfg.train.batch_size;
            let test = accuracy(&g, &data.test, bs)?;
            let val = data.val.as_ref().map(|v| accuracy(&g, v, bs)).transpose()?;
            let csv = format!("test_acc,val_acc\n{test},{}\n", val.map(|v| v.to_string()).unwrap_or_default());
            write(&out, "eval.csv", &csv)?;
            print!("{csv}");
        }
        Command::ReportRange => {
            let csv = dynamic_range_report(&model()?).to_csv();
            write(&out, "range_report.csv", &csv)?;
            print!("{csv}");
        }
        Command::ReportConstancy { samples } => {
            let g = model()?;
            let data = cfg.load_data()?;
            let batch = head(&data.train, samples)?;
            let csv = constancy_csv(&channel_constancy_report(&g, &batch.images)?);
            write(&out, "constancy_report.csv", &csv)?;
            print!("{csv}");
        }
        Command::CountMacs { per_layer } => {
            let g = model()?;
            if per_layer {
                print!("{}", mac_report_csv(&g)?);
            } else {
                println!("{}", g.count_macs()?);
            }
        }
    }
    Ok(())
}

fn annotate(g: &ModelGraph, cfg: &RunConfig, weights: bool) -> Result<ModelGraph> {
    let placement = QuantPlacement {
        act_bits: cfg.quant.act_bits,
        weight_bits: cfg.quant.weight_bits,
        act_momentum: cfg.quant.act_momentum,
        enable_activations: true,
        enable_weights: weights,
    };
    let mut g = insert_quant_points(g, &placement)?;
    set_ste(&mut g, cfg.quant.ste);
    Ok(g)
}

fn clipped_only(cfg: &RunConfig) -> Result<()> {
    match cfg.quant.ste {
        Ste::Clipped => Ok(()),
        Ste::Plain => Err(CliError::Config("quant.ste = plain is only supported by quantize-annotate and finetune".into())),
    }
}

fn set_ste(g: &mut ModelGraph, ste: Ste) {
    let mode = match ste {
        Ste::Clipped => SteMode::Clipped,
        Ste::Plain => SteMode::Plain,
    };
    for layer in &mut g.layers {
        if let LayerKind::QuantPoint(q) = &mut layer.kind {
            q.config.ste = mode;
        }
        if let Some(q) = &mut layer.weight_quant {
            q.config.ste = mode;
        }
    }
}

fn count_quantizers(g: &ModelGraph) -> usize {
    g.layers
        .iter()
        .map(|l| usize::from(matches!(l.kind, LayerKind::QuantPoint(_))) + usize::from(l.weight_quant.is_some()))
        .sum()
}

fn head(ds: &Dataset, n: usize) -> Result<Dataset> {
    let idx: Vec<usize> = (0..n.min(ds.len())).collect();
    Ok(ds.subset(&idx)?)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn save(dir: &Path, g: &ModelGraph) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(save_model(g, dir.join("model.json"))?)
}
