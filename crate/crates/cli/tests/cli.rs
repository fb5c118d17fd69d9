use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[corpus]
n_speakers = 4
utts_per_speaker = 8
[encoder]
n_speakers = 4
[train]
epochs = 2
[attacks]
n_eval = 4
n_train = 4
[attacks.pgd]
iterations = 2
[attacks.adam]
iterations = 2
"#;

fn spkguard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spkguard"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn spkguard")
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn unknown_subcommand_prints_usage() {
    let o = spkguard(&["frobnicate"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let o = spkguard(&["gen-data", "--out", out.to_str().unwrap(), "--set", "train.epochz=3"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
}

#[test]
fn unknown_attack_lists_registered_names() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("runs");
    let o = spkguard(&["attack", "--config", &cfg, "--out", out.to_str().unwrap(), "--method", "fgsm"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("fgsm") && err.contains("pgd"), "{err}");
}

#[test]
fn gen_data_is_content_addressed_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let sa = stdout(&spkguard(&["gen-data", "--config", &cfg, "--out", a.to_str().unwrap()]));
    let sb = stdout(&spkguard(&["gen-data", "--config", &cfg, "--out", b.to_str().unwrap()]));
    let (da, db) = (Path::new(sa.trim()), Path::new(sb.trim()));
    assert_eq!(da.file_name(), db.file_name());
    assert_eq!(fs::read(da.join("manifest.json")).unwrap(), fs::read(db.join("manifest.json")).unwrap());
    assert_eq!(fs::read(da.join("manifest.csv")).unwrap(), fs::read(db.join("manifest.csv")).unwrap());

    // rerun reuses the stage directory
    let again = stdout(&spkguard(&["gen-data", "--config", &cfg, "--out", a.to_str().unwrap()]));
    assert_eq!(again, sa);

    // a different seed lands in a different stage
    let sc = stdout(&spkguard(&["gen-data", "--config", &cfg, "--out", a.to_str().unwrap(), "--seed", "7"]));
    assert_ne!(sc, sa);
}

#[test]
fn set_overrides_change_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("runs");
    let base = stdout(&spkguard(&["gen-data", "--config", &cfg, "--out", out.to_str().unwrap()]));
    let over = stdout(&spkguard(&[
        "gen-data",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--set",
        "corpus.utts_per_speaker=6",
    ]));
    assert_ne!(base, over);
    let manifest = fs::read_to_string(Path::new(over.trim()).join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 4 * 6);
}

#[test]
fn attack_writes_wavs_with_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("runs");
    let s = stdout(&spkguard(&["attack", "--config", &cfg, "--out", out.to_str().unwrap(), "--method", "pgd"]));
    let stage = s.trim().rsplit(" in ").next().unwrap();
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(stage).join("wav/00000.json")).unwrap()).unwrap();
    for key in ["source_id", "source_label", "target_label", "epsilon", "method", "iterations", "final_loss"] {
        assert!(sidecar.get(key).is_some(), "missing {key}");
    }
    assert_eq!(sidecar["method"], "pgd");
    assert!(Path::new(stage).join("wav/00000.wav").exists());
}
