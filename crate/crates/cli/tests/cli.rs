use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[dataset.synth]
n_normal = 16
n_test_normal = 8
n_anomalous = 8
side = 16

[diffusion]
steps = 4
batch_size = 4
grad_accum = 1

[diffusion.unet]
base_width = 8
channel_mults = [1, 2]
res_blocks = 1
attention = false
max_groups = 4

[dia]
epochs = 2
samples_per_epoch = 8
batch_size = 4
optimizer = "sgd"
lr = 0.01

[transforms.dissolve]
resolution = 16

[backbone]
width = 4
blocks = [1, 1, 1, 1]
"#;

fn dia(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dia"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn with_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn help_lists_subcommands() {
    let o = dia(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in ["train-diffusion", "dissolve-grid", "train-dia", "eval", "grid-search"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn missing_dataset_path_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("no-such-dataset");
    let run = tmp.path().join("run");
    let o = dia(&[
        "train-diffusion",
        "--run-dir",
        run.to_str().unwrap(),
        "--set",
        "dataset.kind=\"folder\"",
        "--set",
        &format!("dataset.path=\"{}\"", missing.display()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no-such-dataset"), "{}", stderr(&o));
}

#[test]
fn unknown_key_and_bad_value_are_config_errors() {
    let o = dia(&["train-dia", "--set", "dia.nonsense=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dia.nonsense"));
    let o = dia(&["train-dia", "--set", "contrastive.tau=-1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let o = dia(&["eval", "--run-dir", run.to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("encoder"), "{}", stderr(&o));
}

#[test]
fn full_pipeline_writes_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = with_config(tmp.path());
    let run = tmp.path().join("run");
    let run_s = run.to_str().unwrap();

    let o = dia(&["train-diffusion", "-c", &cfg, "--run-dir", run_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("checkpoints/denoiser/manifest.toml").is_file());
    assert!(run.join("metrics/diffusion_loss.csv").is_file());
    let first: toml::Table =
        toml::from_str(&fs::read_to_string(run.join("manifest-train-diffusion.toml")).unwrap()).unwrap();
    assert_eq!(first["config"]["diffusion"]["ema_decay"].as_float(), Some(0.995));
    assert_eq!(first["config"]["diffusion"]["lr"].as_float(), Some(8e-5));

    // Same seed and data give the same config hash.
    let o = dia(&["train-diffusion", "-c", &cfg, "--run-dir", run_s]);
    assert!(o.status.success());
    let second: toml::Table =
        toml::from_str(&fs::read_to_string(run.join("manifest-train-diffusion.toml")).unwrap()).unwrap();
    assert_eq!(first["config_hash"], second["config_hash"]);
    assert_eq!(first["dataset_fingerprint"], second["dataset_fingerprint"]);

    let o = dia(&["dissolve-grid", "-c", &cfg, "--run-dir", run_s, "--t", "50,100", "--rows", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("figures/dissolve_grid.png").is_file());

    let o = dia(&["dissolve-grid", "-c", &cfg, "--run-dir", run_s, "--t", "5000"]);
    assert_eq!(o.status.code(), Some(2));

    let o = dia(&["train-dia", "-c", &cfg, "--run-dir", run_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("checkpoints/encoder").is_dir());
    let curve = fs::read_to_string(run.join("metrics/dia_loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);

    let o = dia(&["eval", "-c", &cfg, "--run-dir", run_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    let scores = fs::read(run.join("metrics/scores.csv")).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("metrics/summary.json")).unwrap()).unwrap();
    let auroc = summary["auroc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auroc));
    assert_eq!(summary["seed"], 3);
    assert_eq!(summary["config_hash"], second["config_hash"].as_str().unwrap());

    let o = dia(&["eval", "-c", &cfg, "--run-dir", run_s]);
    assert!(o.status.success());
    assert_eq!(fs::read(run.join("metrics/scores.csv")).unwrap(), scores);
}

#[test]
fn grid_search_row_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = with_config(tmp.path());
    let heuristic = ["--set", "transforms.dissolve.method=\"gaussian\"", "--set", "transforms.dissolve.kernel_size=7"];

    let run = tmp.path().join("sweep");
    let mut args = vec!["grid-search", "-c", &cfg, "--run-dir", run.to_str().unwrap()];
    args.extend(heuristic);
    args.extend(["--sweep", "transforms.dissolve.t_low=[30, 130]"]);
    let o = dia(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(run.join("grid_summary.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    let aurocs: Vec<f64> = rows.iter().map(|x| x[2].parse().unwrap()).collect();
    assert!(aurocs[0] >= aurocs[1]);

    let run = tmp.path().join("baseline");
    let mut args = vec!["grid-search", "-c", &cfg, "--run-dir", run.to_str().unwrap()];
    args.extend(heuristic);
    let o = dia(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(run.join("grid_summary.csv")).unwrap();
    assert_eq!(r.records().count(), 1);

    let o = dia(&["grid-search", "-c", &cfg, "--sweep", "dia.bogus=[1, 2]"]);
    assert_eq!(o.status.code(), Some(2));
}
