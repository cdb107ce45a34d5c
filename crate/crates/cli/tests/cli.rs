use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lot_cli::demo::demo_script;
use lot_core::dataset::{load_dataset, DatasetFormat};

fn demo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/demo.jsonl").canonicalize().unwrap()
}

fn lot(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lot")).current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn small_run(dir: &Path) -> Output {
    let data = demo();
    lot(dir, &["--dataset", data.to_str().unwrap(), "run", "--per-question", "4", "--train", "6", "--eval", "6"])
}

#[test]
fn missing_upstream_is_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = lot(dir.path(), &["stats"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("needs `sample`"));
}

#[test]
fn rerun_is_noop_and_drift_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let first = small_run(dir.path());
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));

    let again = lot(dir.path(), &["run"]);
    assert_eq!(code(&again), 0);
    assert_eq!(String::from_utf8_lossy(&again.stdout).matches("up to date").count(), 5);

    let drift = lot(dir.path(), &["landscape", "--projector", "pca"]);
    assert_eq!(code(&drift), 2);
    assert!(String::from_utf8_lossy(&drift.stderr).contains("--force"));

    let forced = lot(dir.path(), &["--force", "landscape", "--projector", "pca"]);
    assert_eq!(code(&forced), 0, "{}", String::from_utf8_lossy(&forced.stderr));
    let status = String::from_utf8_lossy(&lot(dir.path(), &["status"]).stdout).to_string();
    assert!(status.contains("landscape  complete"));
    assert!(status.contains("stats      pending"));

    let stats = lot(dir.path(), &["stats"]);
    assert_eq!(code(&stats), 0, "{}", String::from_utf8_lossy(&stats.stderr));
    assert!(String::from_utf8_lossy(&stats.stdout).contains("convergence coefficient"));
}

#[test]
fn tampered_artifact_invalidates_downstream() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&small_run(dir.path())), 0);
    std::fs::write(dir.path().join("runs/default/features/eval.jsonl"), "").unwrap();
    let o = lot(dir.path(), &["stats"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn voting_sizes_can_change_without_force() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&small_run(dir.path())), 0);
    let o = lot(dir.path(), &["verify", "eval", "--q", "1..3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("runs/default/verifier/voting.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let too_many = lot(dir.path(), &["verify", "eval", "--q", "1..9"]);
    assert_eq!(code(&too_many), 2);
}

#[test]
fn unreachable_endpoint_exits_with_transport_code() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = format!(
        "[dataset]\npath = {:?}\ntrain = 2\neval = 2\n\n[model]\nendpoint = \"http://127.0.0.1:{port}\"\nname = \"m\"\nmax_retries = 0\n",
        demo()
    );
    std::fs::write(dir.path().join("lot.toml"), cfg).unwrap();
    let o = lot(dir.path(), &["--config", "lot.toml", "sample"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn model_without_logprobs_is_capability_error() {
    let dir = tempfile::tempdir().unwrap();
    let questions = load_dataset(&demo(), DatasetFormat::McqJsonl).unwrap();
    let mut script = demo_script("no-logprobs", &questions);
    script.supports_logprobs = false;
    std::fs::write(dir.path().join("script.json"), serde_json::to_string(&script).unwrap()).unwrap();
    let cfg = format!(
        "[dataset]\npath = {:?}\ntrain = 2\neval = 2\n\n[model]\nmock_script = \"script.json\"\nname = \"no-logprobs\"\n",
        demo()
    );
    std::fs::write(dir.path().join("lot.toml"), cfg).unwrap();
    let o = lot(dir.path(), &["--config", "lot.toml", "run"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("capability"));
}

#[test]
fn unknown_config_key_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("lot.toml"), "[landscape]\nbinz = 3\n").unwrap();
    assert_eq!(code(&lot(dir.path(), &["--config", "lot.toml", "status"])), 2);
    assert_eq!(code(&lot(dir.path(), &["landscape", "--projector", "umap"])), 2);
}

#[test]
fn init_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&lot(dir.path(), &["init-config", "--out", "lot.toml"])), 0);
    let o = lot(dir.path(), &["--config", "lot.toml", "status"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}
