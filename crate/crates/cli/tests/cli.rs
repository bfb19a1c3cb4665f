use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
preset = "toy"
steps = 20
batch_size = 8

[model]
dim = 8
num_queries = 2
depth = 1
fusion_dim = 4

[dataset]
samples_per_domain_per_class = 6
raw_dim = 6
"#;

fn setup() -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn ccpe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccpe"))
        .args(["--config", "tiny.toml", "--output-dir", "out"])
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn generate_data_writes_dataset_and_captions() {
    let dir = setup();
    let o = ccpe(dir.path(), &["generate-data"]);
    assert!(o.status.success(), "{o:?}");
    let data = fs::read_to_string(dir.path().join("out/dataset.jsonl")).unwrap();
    let captions = fs::read_to_string(dir.path().join("out/captions.jsonl")).unwrap();
    assert_eq!(data.lines().count(), 4 * 2 * 6);
    assert_eq!(captions.lines().count(), 4 * 2 * 6);
    assert!(stdout(&o).contains("probe accuracy"));
}

#[test]
fn loo_writes_csv_and_report_reproduces_it() {
    let dir = setup();
    let o = ccpe(dir.path(), &["loo"]);
    assert!(o.status.success(), "{o:?}");
    let csv = fs::read(dir.path().join("out/loo.csv")).unwrap();
    let text = String::from_utf8(csv.clone()).unwrap();
    assert_eq!(text.lines().count(), 1 + 4 + 1);
    assert!(text.lines().last().unwrap().starts_with("avg,"));

    let o = Command::new(env!("CARGO_BIN_EXE_ccpe"))
        .args(["report", "out/loo.manifest.json", "--out", "again.csv"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{o:?}");
    assert_eq!(fs::read(dir.path().join("again.csv")).unwrap(), csv);
}

#[test]
fn report_defaults_to_sibling_csv() {
    let dir = setup();
    assert!(ccpe(dir.path(), &["train", "--held-out", "B"]).status.success());
    let csv = dir.path().join("out/train-B.csv");
    let before = fs::read(&csv).unwrap();
    fs::remove_file(&csv).unwrap();
    let o = ccpe(dir.path(), &["report", "out/train-B.manifest.json"]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(fs::read(&csv).unwrap(), before);
}

#[test]
fn flags_override_the_config_file() {
    let dir = setup();
    let o = ccpe(dir.path(), &["train", "--held-out", "A", "--steps", "3", "--seed", "11"]);
    assert!(o.status.success(), "{o:?}");
    let text = fs::read_to_string(dir.path().join("out/train-A.csv")).unwrap();
    let row = text.lines().nth(1).unwrap();
    assert!(row.ends_with(",11,3"), "{row}");
    assert!(stdout(&o).contains("after 3 steps"));
}

#[test]
fn ablate_components_writes_four_rows() {
    let dir = setup();
    let o = ccpe(dir.path(), &["ablate", "--axis", "components"]);
    assert!(o.status.success(), "{o:?}");
    let text = fs::read_to_string(dir.path().join("out/ablation-components.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 4);
}

#[test]
fn gradcheck_single_seed_passes() {
    let dir = setup();
    let o = ccpe(dir.path(), &["gradcheck", "--seeds", "1"]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("ok")).count(), 6);
}

#[test]
fn config_and_contract_errors_exit_with_one() {
    let dir = setup();
    let unknown = ccpe(dir.path(), &["train", "--held-out", "Z"]);
    assert_eq!(unknown.status.code(), Some(1));

    fs::write(dir.path().join("bad.toml"), "[model]\ndim = 7\n").unwrap();
    let bad = Command::new(env!("CARGO_BIN_EXE_ccpe"))
        .args(["--config", "bad.toml", "loo"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));

    let missing = ccpe(dir.path(), &["report", "nope.manifest.json"]);
    assert_eq!(missing.status.code(), Some(1));

    let axis = ccpe(dir.path(), &["ablate", "--axis", "depth"]);
    assert_eq!(axis.status.code(), Some(1));
}

#[test]
fn diverging_training_exits_with_two() {
    let dir = setup();
    let o = ccpe(dir.path(), &["train", "--held-out", "A", "--lr", "1e300", "--steps", "50"]);
    assert_eq!(o.status.code(), Some(2), "{o:?}");
}

#[test]
fn help_exits_cleanly() {
    let o = Command::new(env!("CARGO_BIN_EXE_ccpe")).arg("--help").output().unwrap();
    assert!(o.status.success());
    for sub in ["generate-data", "gradcheck", "train", "loo", "ablate", "report"] {
        assert!(stdout(&o).contains(sub), "{sub}");
    }
}
