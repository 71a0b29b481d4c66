use std::path::Path;
use std::process::{Command, Output};

const DATA: &str = "dataset=synth:noise-fine-scale:train=24:test=12:seed=5";

/// Runs `mpp <args…>` with a small dataset; overrides in `args` come first
/// and later defaults do not replace keys they already set.
fn mpp(cache: &Path, args: &[&str]) -> Output {
    let given: Vec<&str> = args
        .iter()
        .filter_map(|a| a.split_once('=').map(|(k, _)| k))
        .collect();
    let defaults = [DATA, "gmm_k=2", "pca_dim=4", "svm_lambda=0.01"];
    let mut all: Vec<&str> = args.to_vec();
    for d in defaults
        .iter()
        .filter(|d| !given.contains(&d.split_once('=').unwrap().0))
    {
        all.extend(["-s", d]);
    }
    Command::new(env!("CARGO_BIN_EXE_mpp"))
        .args(&all)
        .env("MPP_CACHE_DIR", cache)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn stage_out_of_order_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = mpp(dir.path(), &["fit-gmm"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("run `mpp fit-pca` first"), "{err}");
}

#[test]
fn staged_commands_match_run() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["extract", "fit-pca", "fit-gmm", "encode", "train-svm"] {
        ok(mpp(dir.path(), &[stage]));
    }
    let staged = ok(mpp(dir.path(), &["eval", "--json"]));
    let other = tempfile::tempdir().unwrap();
    let direct = ok(mpp(other.path(), &["run", "--json"]));
    let strip = |s: &str| {
        s.lines()
            .filter(|l| !l.contains("cache_dir"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&staged), strip(&direct));
    let v: serde_json::Value = serde_json::from_str(&staged).unwrap();
    assert_eq!(v["n_test"], 12);

    let pred = ok(mpp(dir.path(), &["predict", "test:0"]));
    assert_eq!(pred.lines().count(), 4);
    assert!(pred.lines().last().unwrap().starts_with("predicted\t"));

    let pgm = dir.path().join("map.pgm");
    ok(mpp(
        dir.path(),
        &[
            "confmap",
            "test:0",
            "--class",
            "left",
            "--grid",
            "4x6",
            "-o",
            pgm.to_str().unwrap(),
        ],
    ));
    let bytes = std::fs::read(&pgm).unwrap();
    assert!(bytes.starts_with(b"P5\n6 4\n255\n"));
    assert_eq!(bytes.len(), b"P5\n6 4\n255\n".len() + 24);
}

#[test]
fn pool_flag_changes_the_encoding() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(mpp(dir.path(), &["run", "--pool", "csf"]));
    assert!(out.contains("csf"), "{out}");
    let cfg = ok(mpp(dir.path(), &["config", "--pool", "mpp-sp"]));
    assert!(cfg.contains("pool = mpp-sp"));
}

#[test]
fn full_preset_echoes_its_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mpp"))
        .args(["config", "--preset", "full"])
        .env("MPP_CACHE_DIR", dir.path())
        .output()
        .unwrap();
    let text = ok(out);
    for line in [
        "scales = 7",
        "pca_dim = 128",
        "gmm_k = 256",
        "scale_step = half-octave",
    ] {
        assert!(text.contains(line), "{line} missing from\n{text}");
    }
}

#[test]
fn bad_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = mpp(dir.path(), &["config", "-s", "gmm_k=zero"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gmm_k"));
    let out = mpp(dir.path(), &["config", "-s", "colour=red"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));
}

#[test]
fn repeated_overrides_accumulate() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(mpp(
        dir.path(),
        &["config", "-s", "gmm_k=3", "--set", "pca_dim=8"],
    ));
    assert!(
        text.contains("gmm_k = 3") && text.contains("pca_dim = 8"),
        "{text}"
    );
}

#[test]
fn init_net_file_drives_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let net = dir.path().join("toy.mppn");
    ok(mpp(
        dir.path(),
        &["init-net", "--seed", "3", "-o", net.to_str().unwrap()],
    ));
    let spec = format!("net={}", net.display());
    let out = ok(mpp(dir.path(), &["run", "-s", &spec]));
    assert!(out.starts_with("scales"));
}
