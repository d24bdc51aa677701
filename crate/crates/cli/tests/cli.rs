use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use autogp_cli::checkpoint::{Checkpoint, FORMAT_VERSION};
use autogp_cli::config::RunConfig;
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn autogp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autogp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn error_line(o: &Output) -> String {
    stderr(o)
        .lines()
        .find(|l| l.starts_with("ERROR "))
        .unwrap_or_else(|| panic!("no error line in {:?}", stderr(o)))
        .to_string()
}

fn regression_config(dir: &Path, extra_training: &str) -> PathBuf {
    let text = format!(
        r#"
[dataset]
format = "csv"
path = "{}"
label_columns = ["y"]
task = "regression"
normalization = "standardize_both"

[model]
num_inducing = 8

[training]
mode = "alternating"
learning_rate = 0.01
batch_size = 16
num_samples = 10
epochs_per_phase = 3
max_outer_rounds = 2
eval_every = 1
eval_samples = 20
{extra_training}
"#,
        fixture("regression_small.csv").display()
    );
    let path = dir.join("regression.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn classes3_config(dir: &Path) -> PathBuf {
    let text = format!(
        r#"
[dataset]
format = "csv"
path = "{}"
task = "classification"

[model]
likelihood = "softmax"
num_inducing = 6

[training]
mode = "elbo_only"
batch_size = 12
num_samples = 10
epochs_per_phase = 4
eval_samples = 20
"#,
        fixture("classes3_small.csv").display()
    );
    let path = dir.join("classes3.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn train(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    autogp(&args)
}

fn metrics_without_wall_time(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split('\t').collect();
            f.remove(1);
            f.join("\t")
        })
        .collect()
}

#[test]
fn missing_dataset_path_names_the_field() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[dataset]\nformat = \"csv\"\ntask = \"regression\"\n").unwrap();
    let o = train(&cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("ERROR 2 dataset.path:"), "{}", error_line(&o));

    std::fs::write(&cfg, "[dataset]\nformat = \"csv\"\ntask = \"regression\"\npath = \"nowhere.csv\"\n").unwrap();
    let o = train(&cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).contains("dataset.path") && error_line(&o).contains("nowhere.csv"));
}

#[test]
fn malformed_configs_and_arguments_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[dataset]\nformat = \"csv\"\nbogus = 1\n").unwrap();
    let o = train(&cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("ERROR 2 config:"));

    let o = autogp(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("ERROR 2 arguments:"));

    let o = autogp(&["evaluate", "--checkpoint", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("ERROR 2 checkpoint:"));
}

#[test]
fn smoke_training_writes_metrics_and_a_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cfg = regression_config(dir.path(), "");
    let o = train(&cfg, dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.tsv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch\twall_time_s\tobjective\terror_rate\tmean_nlp\tmsse");
    assert_eq!(lines.len(), 1 + 12);
    for l in &lines[1..] {
        let f: Vec<&str> = l.split('\t').collect();
        assert_eq!(f.len(), 6);
        assert_eq!(f[3], "nan");
        assert!(f[4].parse::<f64>().unwrap().is_finite());
        assert!(f[5].parse::<f64>().unwrap().is_finite());
    }
    let ck = Checkpoint::load(&dir.path().join("checkpoint.json")).unwrap();
    assert_eq!(ck.trainer.epoch, 12);
    assert_eq!(ck.trainer.round, 2);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let cfg = regression_config(dir.path(), "");
    let straight = dir.path().join("straight");
    let split = dir.path().join("split");
    assert!(train(&cfg, &straight, &[]).status.success());
    // stop mid-phase, then resume twice more
    assert!(train(&cfg, &split, &["--stop-after-epochs", "5"]).status.success());
    let ck = split.join("checkpoint.json");
    let ck_arg = ck.to_str().unwrap().to_string();
    assert!(train(&cfg, &split, &["--checkpoint", &ck_arg, "--stop-after-epochs", "4"]).status.success());
    let o = autogp(&["train", "--checkpoint", &ck_arg, "--out", split.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(straight.join("checkpoint.json")).unwrap(),
        std::fs::read(split.join("checkpoint.json")).unwrap()
    );
    assert_eq!(
        metrics_without_wall_time(&straight.join("metrics.tsv")),
        metrics_without_wall_time(&split.join("metrics.tsv"))
    );
}

#[test]
fn resuming_with_a_different_config_is_refused() {
    let dir = TempDir::new().unwrap();
    let cfg = regression_config(dir.path(), "");
    assert!(train(&cfg, dir.path(), &["--stop-after-epochs", "1"]).status.success());
    let ck = dir.path().join("checkpoint.json");
    let o = train(&cfg, dir.path(), &["--checkpoint", ck.to_str().unwrap(), "--seed", "9"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("ERROR 2 checkpoint.config:"));
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = TempDir::new().unwrap();
    let cfg = classes3_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(train(&cfg, &a, &["--workers", "1"]).status.success());
    assert!(train(&cfg, &b, &["--workers", "3"]).status.success());
    assert_eq!(
        std::fs::read(a.join("checkpoint.json")).unwrap(),
        std::fs::read(b.join("checkpoint.json")).unwrap()
    );
    assert_eq!(metrics_without_wall_time(&a.join("metrics.tsv")), metrics_without_wall_time(&b.join("metrics.tsv")));
}

#[test]
fn numerical_blow_up_exits_with_three_and_keeps_the_last_valid_state() {
    let dir = TempDir::new().unwrap();
    let cfg = regression_config(dir.path(), "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("learning_rate = 0.01", "learning_rate = 1e300");
    std::fs::write(&cfg, text).unwrap();
    let o = train(&cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(error_line(&o).starts_with("ERROR 3 train:"));
    let saved = Checkpoint::load(&dir.path().join("checkpoint.abort.json")).unwrap();
    assert!(saved.model.validate().is_ok());
}

fn parse_record(line: &str) -> Vec<(String, f64)> {
    line.split_whitespace()
        .map(|kv| {
            let (k, v) = kv.split_once('=').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect()
}

#[test]
fn evaluation_is_finite_and_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = classes3_config(dir.path());
    assert!(train(&cfg, dir.path(), &[]).status.success());
    let ck = dir.path().join("checkpoint.json");
    let run = || autogp(&["evaluate", "--checkpoint", ck.to_str().unwrap()]);
    let first = run();
    assert!(first.status.success(), "{}", stderr(&first));
    let record = parse_record(stdout(&first).trim());
    let keys: Vec<&str> = record.iter().map(|(k, _)| k.as_str()).collect();
    assert_eq!(keys, ["points", "mc_samples", "error_rate", "mean_nlp"]);
    assert!(record.iter().all(|(_, v)| v.is_finite()));
    assert_eq!(stdout(&first), stdout(&run()));

    let more = autogp(&["evaluate", "--checkpoint", ck.to_str().unwrap(), "--mc-samples", "7"]);
    assert!(stdout(&more).contains("mc_samples=7"));
}

#[test]
fn evaluation_reproduces_the_last_logged_metrics() {
    let dir = TempDir::new().unwrap();
    let cfg = regression_config(dir.path(), "");
    assert!(train(&cfg, dir.path(), &[]).status.success());
    let o = autogp(&["evaluate", "--checkpoint", dir.path().join("checkpoint.json").to_str().unwrap()]);
    let record = parse_record(stdout(&o).trim());
    let last = std::fs::read_to_string(dir.path().join("metrics.tsv")).unwrap();
    let fields: Vec<f64> = last.lines().last().unwrap().split('\t').map(|f| f.parse().unwrap()).collect();
    let get = |k: &str| record.iter().find(|(key, _)| key == k).unwrap().1;
    assert_eq!(get("mean_nlp"), fields[4]);
    assert_eq!(get("msse"), fields[5]);
}

#[test]
fn classification_checkpoint_rejects_regression_data() {
    let dir = TempDir::new().unwrap();
    let cls = classes3_config(dir.path());
    let reg = regression_config(dir.path(), "");
    assert!(train(&cls, dir.path(), &[]).status.success());
    let o = autogp(&[
        "evaluate",
        "--checkpoint",
        dir.path().join("checkpoint.json").to_str().unwrap(),
        "--config",
        reg.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let line = error_line(&o);
    assert!(line.starts_with("ERROR 2 dataset.input_dim:") || line.starts_with("ERROR 2 dataset.task:"), "{line}");
}

#[test]
fn predictions_for_classes_and_regression() {
    let dir = TempDir::new().unwrap();
    let cls_dir = dir.path().join("cls");
    assert!(train(&classes3_config(dir.path()), &cls_dir, &[]).status.success());
    let input = dir.path().join("one.csv");
    std::fs::write(&input, "x1,x2\n0.5,-1.0\n").unwrap();
    let out = dir.path().join("pred.csv");
    let ck = cls_dir.join("checkpoint.json");
    let o = autogp(&["predict", "--checkpoint", ck.to_str().unwrap(), "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1);
    let p: Vec<f64> = lines[0].split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(p.len(), 3);
    assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);

    // label columns are ignored when present
    std::fs::write(&input, "x1,label,x2\n0.5,2,-1.0\n").unwrap();
    let o = autogp(&["predict", "--checkpoint", ck.to_str().unwrap(), "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(&out).unwrap(), text);

    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let o = autogp(&["predict", "--checkpoint", ck.to_str().unwrap(), "--input", empty.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "");

    let wrong = dir.path().join("wrong.csv");
    std::fs::write(&wrong, "x1\n0.5\n").unwrap();
    let o = autogp(&["predict", "--checkpoint", ck.to_str().unwrap(), "--input", wrong.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("ERROR 2 input.columns:"));

    let reg_dir = dir.path().join("reg");
    assert!(train(&regression_config(dir.path(), ""), &reg_dir, &[]).status.success());
    let xs = dir.path().join("xs.csv");
    std::fs::write(&xs, "x\n-1.0\n0.0\n2.5\n").unwrap();
    let ck = reg_dir.join("checkpoint.json");
    let o = autogp(&["predict", "--checkpoint", ck.to_str().unwrap(), "--input", xs.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let rows: Vec<Vec<f64>> = std::fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        assert_eq!(r.len(), 2);
        assert!(r[0].is_finite() && r[1] > 0.0);
    }
}

fn gradcheck_config(dir: &Path, likelihood: &str, kernel: &str) -> PathBuf {
    let (data, task, extra) = match likelihood {
        "softmax" => ("classes3_small.csv", "classification", "label_columns = [\"label\"]"),
        "gprn" => ("regression_3d_small.csv", "regression", "label_columns = [\"y1\", \"y2\"]"),
        _ => ("regression_3d_small.csv", "regression", "label_columns = [\"y1\"]"),
    };
    let text = format!(
        "[dataset]\nformat = \"csv\"\npath = \"{}\"\ntask = \"{task}\"\n{extra}\nnormalization = \"standardize_inputs\"\n\n\
         [model]\nlikelihood = \"{likelihood}\"\nkernel = \"{kernel}\"\nnum_inducing = 5\nnum_components = 2\n\n\
         [training]\nnum_samples = 4\n",
        fixture(data).display()
    );
    let path = dir.join(format!("gc_{likelihood}_{kernel}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn gradcheck_passes_and_reports_every_group() {
    let dir = TempDir::new().unwrap();
    let cfg = gradcheck_config(dir.path(), "softmax", "rbf_ard");
    let o = autogp(&["gradcheck", "--config", cfg.to_str().unwrap(), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for row in ["elbo\tkernel", "elbo\tposterior", "elbo\tinducing", "loo\tkernel", "loo\tinducing"] {
        assert!(out.lines().any(|l| l.starts_with(row) && l.ends_with("pass")), "{row}: {out}");
    }
}

#[test]
fn gradcheck_catches_a_corrupted_group() {
    let dir = TempDir::new().unwrap();
    let cfg = gradcheck_config(dir.path(), "gaussian", "rbf_ard");
    let o = autogp(&["gradcheck", "--config", cfg.to_str().unwrap(), "--corrupt-group", "likelihood"]);
    assert_eq!(o.status.code(), Some(3));
    let line = error_line(&o);
    assert!(line.starts_with("ERROR 3 gradcheck:") && line.contains("elbo/likelihood"), "{line}");
    assert!(!line.contains("kernel"));
}

#[test]
fn gradcheck_of_the_arc_cosine_kernel_checks_only_its_scale() {
    let dir = TempDir::new().unwrap();
    let cfg = gradcheck_config(dir.path(), "gaussian", "arc_cosine");
    let o = autogp(&["gradcheck", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let kernel_rows: Vec<String> = stdout(&o).lines().filter(|l| l.contains("\tkernel\t")).map(String::from).collect();
    assert_eq!(kernel_rows.len(), 2);
    for r in kernel_rows {
        assert_eq!(r.split('\t').nth(2), Some("1"), "{r}");
    }
}

#[test]
fn gradcheck_refuses_large_instances() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("big.toml");
    std::fs::write(
        &cfg,
        "[dataset]\nformat = \"synthetic\"\ngenerator = \"regression1d\"\nnum_points = 80\n[model]\nnum_inducing = 5\n",
    )
    .unwrap();
    let o = autogp(&["gradcheck", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("ERROR 2 dataset:"));
}

#[test]
fn variance_study_scales_inversely_with_samples() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("vs.toml");
    std::fs::write(
        &cfg,
        format!(
            "[dataset]\nformat = \"csv\"\npath = \"{}\"\nlabel_columns = [\"y\"]\ntask = \"regression\"\n\
             [model]\nnum_inducing = 5\n\
             [variance_study]\nbatch_size = 10\nredraws = 300\nsample_counts = [10, 100, 1000]\n",
            fixture("regression_small.csv").display()
        ),
    )
    .unwrap();
    let table = dir.path().join("coords.tsv");
    let o = autogp(&["variance-study", "--config", cfg.to_str().unwrap(), "--out", table.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<Vec<&str>> = out.lines().skip(1).filter(|l| !l.starts_with('#')).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert!(r[3].parse::<f64>().unwrap() > 1.0, "{r:?}");
        assert!(r[5].parse::<f64>().unwrap() >= 0.95, "{r:?}");
    }
    let slopes: Vec<f64> = out
        .lines()
        .find(|l| l.starts_with("# log-log slope"))
        .unwrap()
        .split_whitespace()
        .filter_map(|t| t.parse().ok())
        .collect();
    assert_eq!(slopes.len(), 2);
    for s in slopes {
        assert!((s + 1.0).abs() <= 0.2, "slope {s}");
    }
    // 3 sample counts × 2 estimators × (1 logit + 5 means + 15 factor entries)
    assert_eq!(std::fs::read_to_string(&table).unwrap().lines().count(), 1 + 3 * 2 * 21);
}

#[test]
fn checkpoints_round_trip_byte_for_byte() {
    let dir = TempDir::new().unwrap();
    assert!(train(&classes3_config(dir.path()), dir.path(), &[]).status.success());
    let path = dir.path().join("checkpoint.json");
    let bytes = std::fs::read_to_string(&path).unwrap();
    let ck = Checkpoint::from_json(&bytes).unwrap();
    assert_eq!(ck.to_json().unwrap(), bytes);
    assert!(!bytes.contains("wall_time"));

    let tampered = bytes.replacen(&format!("\"format_version\": {FORMAT_VERSION}"), "\"format_version\": 99", 1);
    std::fs::write(&path, tampered).unwrap();
    let o = autogp(&["evaluate", "--checkpoint", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("ERROR 2 checkpoint.format_version:"));
}

#[test]
fn config_defaults_follow_the_standard_training_setup() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d.csv");
    std::fs::copy(fixture("regression_small.csv"), &data).unwrap();
    let cfg = RunConfig::from_toml("[dataset]\nformat = \"csv\"\npath = \"d.csv\"\ntask = \"regression\"\n", dir.path()).unwrap();
    let t = &cfg.training;
    assert_eq!(t.learning_rate, 0.003);
    assert_eq!(t.batch_size, 1000);
    assert_eq!(t.num_samples, 100);
    assert_eq!(t.epochs_per_phase, 100);
    assert_eq!(cfg.model.num_components, 1);
    assert_eq!(cfg.dataset.path.as_deref(), Some(data.as_path()));
    assert_eq!(cfg.output.checkpoint, dir.path().join("checkpoint.json"));
}

#[test]
fn bundled_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 3);
}

#[test]
fn kernel_kinds_select_the_lengthscale_layout() {
    let dir = TempDir::new().unwrap();
    for (kind, lengthscales) in [("rbf_ard", 3), ("rbf_iso", 1)] {
        let text = format!(
            "[dataset]\nformat = \"csv\"\npath = \"{}\"\nlabel_columns = [\"y1\", \"y2\"]\ntask = \"regression\"\n\
             [model]\nkernel = \"{kind}\"\nnum_inducing = 4\n",
            fixture("regression_3d_small.csv").display()
        );
        let cfg = RunConfig::from_toml(&text, dir.path()).unwrap();
        let data = autogp_cli::setup::load_data(&cfg.dataset).unwrap();
        let state = autogp_cli::setup::build_model(&cfg.model, &data.train, 0).unwrap();
        match &state.kernels[0] {
            autogp::kernels::KernelParams::Rbf(p) => assert_eq!(p.log_lengthscales.len(), lengthscales, "{kind}"),
            k => panic!("{kind}: {k:?}"),
        }
    }
}
