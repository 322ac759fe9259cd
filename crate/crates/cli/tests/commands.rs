use pfq_core::graph::{save_model, LayerKind, LayerSpec, ModelGraph};
use pfq_core::models::plain_cnn;
use pfq_core::tensor::{ConvParams, Tensor};
use std::path::Path;
use std::process::{Command, Output};

fn pfq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfq")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn saved(dir: &Path, name: &str, g: &ModelGraph) -> String {
    let p = dir.join(name);
    save_model(g, &p).unwrap();
    p.to_str().unwrap().to_string()
}

/// A small synthetic task so the training commands finish quickly.
const SMALL: [&str; 12] = [
    "--set",
    "data.per_class=8",
    "--set",
    "data.test_per_class=4",
    "--set",
    "data.val_per_class=2",
    "--set",
    "train.epochs=1",
    "--set",
    "train.batch_size=8",
    "--set",
    "model.blocks=[[8, 1], [8, 2]]",
];

#[test]
fn count_macs_on_a_single_conv() {
    let dir = tempfile::tempdir().unwrap();
    let conv = LayerSpec::new(
        "c",
        LayerKind::Conv {
            params: ConvParams::new(Tensor::zeros(&[1, 1, 3, 3]), None).unwrap(),
            stride: (1, 1),
            padding: (0, 0),
        },
    );
    let g = ModelGraph::new([1, 6, 6], vec![conv]).unwrap();
    let m = saved(dir.path(), "m.json", &g);
    let o = pfq(&["count-macs", "--model", &m]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "144\n");
}

#[test]
fn pfq_without_candidates_writes_an_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let m = saved(dir.path(), "m.json", &plain_cnn([2, 5, 5], &[3], 2, 0).unwrap());
    let out = dir.path().join("run");
    let o = pfq(&["pfq", "--model", &m, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("prune_report.csv")).unwrap();
    assert_eq!(csv, "layer,channel,kind,Vt,beta,U_norm\n");
}

#[test]
fn weight_finetune_on_unfolded_model_is_a_stage_order_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = saved(dir.path(), "m.json", &plain_cnn([3, 16, 16], &[3], 4, 0).unwrap());
    let out = dir.path().join("run");
    let o = pfq(&["finetune", "--weights", "--model", &m, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[stage-order]: "), "{err}");
    assert!(!out.join("model.json").exists());
}

#[test]
fn config_errors_are_one_line() {
    for args in [
        &["count-macs", "--set", "nonsense=1"][..],
        &["count-macs", "--set", "train.batch_size=1"][..],
        &["count-macs"][..],
    ] {
        let o = pfq(args);
        assert_eq!(o.status.code(), Some(1));
        let err = stderr(&o);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error[config]: "), "{err}");
    }
    let dir = tempfile::tempdir().unwrap();
    let o = pfq(&["eval", "--model", dir.path().join("missing.json").to_str().unwrap()]);
    assert!(stderr(&o).starts_with("error[io]: "), "{}", stderr(&o));
}

#[test]
fn help_lists_every_subcommand_and_flag() {
    let help = stdout(&pfq(&["--help"]));
    for word in [
        "train",
        "pfq",
        "fold-bn",
        "quantize-annotate",
        "finetune",
        "workflow",
        "baseline-once",
        "eval",
        "report-range",
        "report-constancy",
        "count-macs",
        "--config",
        "--set",
        "--seed",
        "--out",
        "--threads",
        "--model",
    ] {
        assert!(help.contains(word), "missing {word}");
    }
}

#[test]
fn training_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--seed", "7", "--out", out.to_str().unwrap()];
        args.extend(SMALL);
        let o = pfq(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        ["model.json", "model.bin", "metrics.csv"].map(|f| std::fs::read(out.join(f)).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn workflow_smoke_run_writes_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let pre = dir.path().join("pre");
    let mut args = vec!["train", "--out", pre.to_str().unwrap()];
    args.extend(SMALL);
    assert!(pfq(&args).status.success());

    let run = dir.path().join("wf");
    let model = pre.join("model.json");
    let mut args = vec![
        "workflow",
        "--model",
        model.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--set",
        "stage_a.epochs=1",
        "--set",
        "stage_w.epochs=1",
        "--set",
        "stage_a.batch_size=8",
        "--set",
        "stage_w.batch_size=8",
    ];
    args.extend(SMALL);
    let o = pfq(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 5);
    for k in 0..5 {
        for f in ["model.json", "model.bin", "metrics.csv", "prune_report.csv"] {
            assert!(run.join(format!("stage{k}")).join(f).is_file(), "stage{k}/{f}");
        }
    }
    assert!(run.join("workflow.log").is_file());

    let folded = run.join("stage4").join("model.json");
    for cmd in ["report-range", "eval"] {
        let mut args = vec![cmd, "--model", folded.to_str().unwrap(), "--out", run.to_str().unwrap()];
        args.extend(SMALL);
        let o = pfq(&args);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let mut args = vec!["report-constancy", "--model", model.to_str().unwrap(), "--out", run.to_str().unwrap()];
    args.extend(SMALL);
    let o = pfq(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("layer,channel,Vt,spread\n"));
}

#[test]
fn pass_by_pass_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let m = saved(dir.path(), "m.json", &plain_cnn([3, 16, 16], &[4], 4, 1).unwrap());
    let step = |cmd: &[&str], model: &str, out: &str| {
        let out = dir.path().join(out);
        let mut args = cmd.to_vec();
        args.extend(["--model", model, "--out", out.to_str().unwrap()]);
        args.extend(SMALL);
        let o = pfq(&args);
        assert!(o.status.success(), "{cmd:?}: {}", stderr(&o));
        out.join("model.json").to_str().unwrap().to_string()
    };
    let folded = step(&["fold-bn"], &m, "fold");
    let annotated = step(&["quantize-annotate"], &folded, "q");
    let tuned = step(&["finetune", "--weights", "--set", "stage_w.epochs=1"], &annotated, "ft");
    step(&["baseline-once", "--set", "stage_a.epochs=0", "--set", "stage_w.epochs=1"], &m, "base");
    assert!(Path::new(&tuned).is_file());
}
