//! End-to-end checks of the `lora-lab` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lora_lab::harness::checkpoint::Checkpoint;
use lora_lab::harness::config::ExperimentConfig;

fn lab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lora-lab"))
        .args(args)
        .arg("--quiet")
        .arg("--out")
        .arg(out)
        .env_remove("LORA_LAB_WALLCLOCK")
        .env_remove("LORA_LAB_THREADS")
        .output()
        .unwrap()
}

fn tiny_config(dir: &Path, edit: impl FnOnce(&mut ExperimentConfig)) -> PathBuf {
    let mut c = ExperimentConfig::default();
    c.data.pretrain_n = 128;
    c.data.pretrain_test_n = 32;
    c.data.finetune_test_n = 64;
    c.pretrain.epochs = 2;
    c.finetune.epochs = 2;
    edit(&mut c);
    let path = dir.join("config.json");
    std::fs::write(&path, c.to_json().unwrap()).unwrap();
    path
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn missing_config_exits_one_and_names_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let out = lab(&["pretrain", "--config", missing.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nope.json"), "{err}");
}

#[test]
fn unknown_flag_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lab(&["pretrain", "--no-such-flag"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn invalid_thread_count_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lora-lab"))
        .args(["mcnorm-check", "--quiet", "--out"])
        .arg(tmp.path())
        .env("LORA_LAB_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn divergence_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path(), |c| c.pretrain.learning_rate = 1e8);
    let out = lab(&["pretrain", "--config", config.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn checkpoint_files_round_trip_and_headers_are_pinned() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path(), |_| {});
    let cfg = config.to_str().unwrap();
    let out = tmp.path().join("out");
    assert!(lab(&["pretrain", "--config", cfg], &out).status.success());
    let pre = out.join("pretrain.json");
    let ft = lab(&["finetune", "--config", cfg, "--checkpoint", pre.to_str().unwrap()], &out);
    assert!(ft.status.success(), "{}", String::from_utf8_lossy(&ft.stderr));

    let path = out.join("finetune.json");
    let text = std::fs::read_to_string(&path).unwrap();
    let ck: Checkpoint<f64> = Checkpoint::load(&path).unwrap();
    let model = ck.to_model().unwrap();
    let again = Checkpoint::from_model(&model, &ck.model_spec).to_json().unwrap();
    assert_eq!(text, again);

    assert_eq!(header(&out.join("finetune_run.csv")), "epoch,train_loss,test_loss,train_acc,test_acc,ece,wall_ms");
    let rows = std::fs::read_to_string(out.join("finetune_run.csv")).unwrap();
    // Without the wall-clock opt-in every timing column is zero.
    assert!(rows.lines().skip(1).all(|l| l.ends_with(",0")), "{rows}");

    assert!(lab(&["mcnorm-check", "--config", cfg], &out).status.success());
    assert_eq!(
        header(&out.join("mcnorm.csv")),
        "p,draws,dim,mc_estimate,closed_form,rel_error,std_error,sample_std_error"
    );
    assert!(lab(&["jensen-check", "--config", cfg], &out).status.success());
    assert_eq!(header(&out.join("jensen.csv")), "trial,lhs,rhs,gap");
}

#[test]
fn corrupt_checkpoint_is_load_error() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{\"format_version\": 1}").unwrap();
    let out = lab(&["eval", "--checkpoint", bad.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}
