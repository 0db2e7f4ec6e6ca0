//! End-to-end runs of the `slam` binary: the full pipeline on a small
//! synthetic world, exit codes, and config/flag precedence.

use std::ffi::OsStr;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

const KEY_HEX: &str = "0707070707070707070707070707070707070707070707070707070707070707";

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn world(&self) -> PathBuf {
        self.root.join("world")
    }
    fn key(&self) -> PathBuf {
        self.root.join("key.txt")
    }
    fn bank(&self) -> PathBuf {
        self.root.join("bank.json")
    }
    fn nulls(&self) -> PathBuf {
        self.root.join("nulls.json")
    }
    fn wm(&self) -> PathBuf {
        self.root.join("wm")
    }
}

fn slam<S: AsRef<OsStr> + std::fmt::Debug>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slam"))
        .args(args)
        .env_remove("SLAM_KEY_FILE")
        .output()
        .expect("spawning slam")
}

fn ok<S: AsRef<OsStr> + std::fmt::Debug>(args: &[S]) -> String {
    let out = slam(args);
    assert!(
        out.status.success(),
        "slam {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// One small world, bank, null fit and watermarked batch shared by every test.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let f = Fixture { _dir: dir, root };
        std::fs::write(f.key(), format!("# test key\n{KEY_HEX}\ncli-test\n")).unwrap();
        let world = f.world();
        ok(&[
            "synth-world", "--seed", "11", "--pairs-per-domain", "10", "--prompts", "8",
            "--baseline", "40", "--max-new-tokens", "96", "--out", p(&world),
        ]);
        ok(&[
            "mine", "--pairs", p(&world.join("pairs")), "--sae", p(&world.join("saes.json")),
            "--k", "10", "--bank-id", "cli-test", "--out", p(&f.bank()),
        ]);
        ok(&[
            "calibrate", "--bank", p(&f.bank()), "--key-file", p(&f.key()),
            "--baseline-dir", p(&world.join("baseline")), "--world", p(&world), "--out", p(&f.nulls()),
        ]);
        ok(&[
            "generate", "--bank", p(&f.bank()), "--nulls", p(&f.nulls()), "--key-file", p(&f.key()),
            "--prompts-dir", p(&world.join("prompts")), "--world", p(&world), "--max-new-tokens", "96",
            "--out", p(&f.wm()), "--report", p(&f.root.join("wm-report.json")),
        ]);
        f
    })
}

fn detect_dir(f: &Fixture, dir: &Path, extra: &[&str]) -> Value {
    let mut args: Vec<String> = [
        "detect", "--bank", p(&f.bank()), "--nulls", p(&f.nulls()), "--key-file", p(&f.key()),
        "--world", p(&f.world()), "--in-dir", p(dir),
    ]
    .map(String::from)
    .to_vec();
    args.extend(extra.iter().map(|s| s.to_string()));
    serde_json::from_str(&ok(&args)).unwrap()
}

fn decisions(scores: &Value) -> Vec<bool> {
    scores["results"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["decision"].as_bool().unwrap())
        .collect()
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

#[test]
fn world_layout() {
    let f = fixture();
    let w = f.world();
    for name in ["world.json", "saes.json", "lexicon.tsv", "pairs/manifest.json"] {
        assert!(w.join(name).is_file(), "{name} missing");
    }
    assert_eq!(read(&w.join("world.json"))["schema"], "slam.world");
    let count = |d: &str| std::fs::read_dir(w.join(d)).unwrap().count();
    assert_eq!(count("prompts"), 8);
    assert_eq!(count("reference"), 8);
    assert_eq!(count("baseline"), 40);
    let first = read(&w.join("prompts/prompt-0000.json"));
    assert_eq!(first["doc_id"], "prompt-0000");
    assert_eq!(first["text"], "");
}

#[test]
fn mined_bank_and_nulls_are_well_formed() {
    let f = fixture();
    let bank = read(&f.bank());
    assert_eq!(bank["schema"], "slam.bank");
    assert_eq!(bank["bank_id"], "cli-test");
    assert!(!bank["records"].as_array().unwrap().is_empty());
    let nulls = read(&f.nulls());
    assert_eq!(nulls["schema"], "slam.null");
    assert_eq!(nulls["fitted_on"], 40);
}

#[test]
fn watermarked_batch_is_detected_and_baseline_mostly_is_not() {
    let f = fixture();
    let wm = detect_dir(f, &f.wm(), &[]);
    assert_eq!(wm["schema"], "slam.scores");
    assert!(decisions(&wm).iter().all(|&d| d), "{wm:#}");
    let report = read(&f.root.join("wm-report.json"));
    assert_eq!(report.as_array().unwrap().len(), 8);

    // The baseline is the null-fitting corpus, so its ẑ is standardized.
    let bl = detect_dir(f, &f.world().join("baseline"), &[]);
    let z: Vec<f64> = bl["results"].as_array().unwrap().iter().map(|r| r["z_hat"].as_f64().unwrap()).collect();
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    assert!(mean.abs() < 1e-9, "mean z_hat over the fit corpus {mean}");
    assert!(decisions(&bl).iter().filter(|&&d| d).count() <= 4);
}

#[test]
fn detect_json_adds_per_feature_detail() {
    let f = fixture();
    let plain = detect_dir(f, &f.wm(), &[]);
    let rich = detect_dir(f, &f.wm(), &["--json"]);
    let r0 = &rich["results"][0];
    assert!(plain["results"][0].get("per_feature_z").is_none());
    assert!(!r0["per_feature_z"].as_object().unwrap().is_empty());
    assert!(r0["active_set"].is_array());
    assert_eq!(plain["results"][0]["z_hat"], r0["z_hat"]);
}

#[test]
fn single_doc_and_text_file_agree_with_batch() {
    let f = fixture();
    let batch = detect_dir(f, &f.wm(), &[]);
    let doc_path = f.wm().join("prompt-0003.json");
    let base = [
        "detect", "--bank", p(&f.bank()), "--nulls", p(&f.nulls()), "--key-file", p(&f.key()),
        "--world", p(&f.world()),
    ]
    .map(String::from);
    let single: Value =
        serde_json::from_str(&ok(&[&base[..], &["--doc".into(), p(&doc_path).into()]].concat())).unwrap();
    let want = batch["results"].as_array().unwrap().iter().find(|r| r["doc_id"] == "prompt-0003").unwrap();
    assert_eq!(&single["results"][0], want);

    let doc = read(&doc_path);
    let tmp = tempfile::tempdir().unwrap();
    let text = tmp.path().join("text.txt");
    let prompt = tmp.path().join("prompt.txt");
    std::fs::write(&text, doc["text"].as_str().unwrap()).unwrap();
    std::fs::write(&prompt, doc["prompt"].as_str().unwrap()).unwrap();
    let from_text: Value = serde_json::from_str(&ok(&[
        &base[..],
        &["--text-file", p(&text), "--prompt-file", p(&prompt), "--doc-id", "prompt-0003"].map(String::from),
    ]
    .concat()))
    .unwrap();
    assert_eq!(&from_text["results"][0], want);
}

#[test]
fn single_prompt_generation_record() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let prompt = tmp.path().join("prompt.txt");
    let doc = read(&f.world().join("prompts/prompt-0001.json"));
    std::fs::write(&prompt, doc["prompt"].as_str().unwrap()).unwrap();
    let out = tmp.path().join("rec.json");
    ok(&[
        "generate", "--bank", p(&f.bank()), "--nulls", p(&f.nulls()), "--key-file", p(&f.key()),
        "--prompt-file", p(&prompt), "--doc-id", "solo", "--world", p(&f.world()),
        "--max-new-tokens", "96", "--out", p(&out),
    ]);
    let rec = read(&out);
    assert_eq!(rec["doc_id"], "solo");
    assert_eq!(rec["decision"], true);
    let tried = rec["candidates_tried"].as_u64().unwrap();
    assert!((1..=4).contains(&tried));
    assert_eq!(rec["attempts"].as_array().unwrap().len() as u64, tried);
}

#[test]
fn select_is_keyed_by_doc_id() {
    let f = fixture();
    let run = |id: &str| -> Value {
        serde_json::from_str(&ok(&[
            "select", "--bank", p(&f.bank()), "--key-file", p(&f.key()), "--doc-id", id,
        ]))
        .unwrap()
    };
    let a = run("doc-a");
    assert_eq!(a, run("doc-a"));
    assert_eq!(a["key_id"], "cli-test");
    let picks = a["sentences"][0]["features"].as_array().unwrap();
    assert_eq!(picks.len(), 7);
    let ids = |v: &Value| -> Vec<String> {
        v["sentences"][0]["features"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x["feature_id"].as_str().unwrap().to_string())
            .collect()
    };
    assert!((0..20).any(|i| ids(&run(&format!("doc-{i}"))) != ids(&a)));
}

#[test]
fn attack_then_eval() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let attacked = tmp.path().join("del");
    ok(&["attack", "--kind", "delete", "--rate", "0.3", "--seed", "5", "--in", p(&f.wm()), "--out", p(&attacked)]);
    let before = read(&f.wm().join("prompt-0000.json"));
    let after = read(&attacked.join("prompt-0000.json"));
    assert_eq!(before["prompt"], after["prompt"]);
    let words = |v: &Value| v["text"].as_str().unwrap().split_whitespace().count();
    assert!(words(&after) < words(&before));

    let syn = tmp.path().join("syn");
    ok(&[
        "attack", "--kind", "synonym", "--in", p(&f.wm()), "--out", p(&syn),
        "--lexicon", p(&f.world().join("lexicon.tsv")),
    ]);
    assert_eq!(std::fs::read_dir(&syn).unwrap().count(), 8);

    let scores = tmp.path().join("scores.json");
    let bl_scores = tmp.path().join("bl-scores.json");
    for (dir, out) in [(attacked.as_path(), &scores), (f.world().join("baseline").as_path(), &bl_scores)] {
        ok(&[
            "detect", "--bank", p(&f.bank()), "--nulls", p(&f.nulls()), "--key-file", p(&f.key()),
            "--world", p(&f.world()), "--in-dir", p(dir), "--out", p(out),
        ]);
    }
    let report: Value = serde_json::from_str(&ok(&[
        "eval", "--metrics", "distinct,selfbleu,tpr,ppl", "--wm", p(&attacked),
        "--bl", p(&f.world().join("baseline")), "--reference", p(&f.world().join("reference")),
        "--scores", p(&scores), "--scores", p(&bl_scores), "--world", p(&f.world()),
    ]))
    .unwrap();
    assert_eq!(report["schema"], "slam.eval");
    assert_eq!(report["wm"]["docs"], 8);
    let d = report["wm"]["distinct_n"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&d));
    assert_eq!(report["ppl_ratio"]["pairs"], 8);
    assert_eq!(report["ppl_ratio"]["unpaired"], 0);
    assert!(report["ppl_ratio"]["mean"].as_f64().unwrap() > 0.0);
    assert!(report["detection"].is_object());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for i in 0..2 {
        let out = tmp.path().join(format!("gen{i}"));
        ok(&[
            "generate", "--bank", p(&f.bank()), "--nulls", p(&f.nulls()), "--key-file", p(&f.key()),
            "--prompts-dir", p(&f.world().join("prompts")), "--world", p(&f.world()),
            "--max-new-tokens", "96", "--out", p(&out), "--jobs", "2",
        ]);
        outputs.push(std::fs::read_to_string(out.join("prompt-0005.json")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], std::fs::read_to_string(f.wm().join("prompt-0005.json")).unwrap());
}

// ---------------------------------------------------------------------------
// Configuration and errors
// ---------------------------------------------------------------------------

#[test]
fn flags_override_config_and_config_overrides_defaults() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("slam.toml");
    std::fs::write(
        &cfg,
        format!(
            "key_file = {:?}\n[backend]\nworld = {:?}\n[detection]\nthreshold = 1000.0\n",
            p(&f.key()),
            p(&f.world())
        ),
    )
    .unwrap();
    let run = |extra: &[&str]| -> Value {
        let mut args: Vec<String> = [
            "--config", p(&cfg), "detect", "--bank", p(&f.bank()), "--nulls", p(&f.nulls()),
            "--in-dir", p(&f.wm()),
        ]
        .map(String::from)
        .to_vec();
        args.extend(extra.iter().map(|s| s.to_string()));
        serde_json::from_str(&ok(&args)).unwrap()
    };
    let from_cfg = run(&[]);
    assert_eq!(from_cfg["threshold"], 1000.0);
    assert!(decisions(&from_cfg).iter().all(|&d| !d));
    let flagged = run(&["--threshold", "2"]);
    assert_eq!(flagged["threshold"], 2.0);
    assert!(decisions(&flagged).iter().all(|&d| d));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("slam.toml");
    std::fs::write(&cfg, "[detection]\nthreshhold = 2.0\n").unwrap();
    let out = slam(&["--config", p(&cfg), "select", "--bank", "x", "--doc-id", "d"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("threshhold"));
}

#[test]
fn missing_nulls_file_is_a_runtime_error_naming_the_path() {
    let f = fixture();
    let missing = f.root.join("no-such-nulls.json");
    let out = slam(&[
        "detect", "--bank", p(&f.bank()), "--nulls", p(&missing), "--key-file", p(&f.key()),
        "--world", p(&f.world()), "--in-dir", p(&f.wm()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: "), "{err}");
    assert!(err.contains(p(&missing)), "{err}");
    assert!(out.stdout.is_empty());
}

#[test]
fn usage_errors_exit_with_status_two() {
    assert_eq!(slam(&["detect"]).status.code(), Some(2));
    assert_eq!(slam(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(slam(&["attack", "--kind", "shout", "--in", "a", "--out", "b"]).status.code(), Some(2));
}

#[test]
fn missing_key_mentions_the_environment_fallback() {
    let f = fixture();
    let out = slam(&["select", "--bank", p(&f.bank()), "--doc-id", "d"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("SLAM_KEY_FILE"));

    let via_env = Command::new(env!("CARGO_BIN_EXE_slam"))
        .args(["select", "--bank", p(&f.bank()), "--doc-id", "d"])
        .env("SLAM_KEY_FILE", f.key())
        .output()
        .unwrap();
    assert!(via_env.status.success());
}

#[test]
fn nulls_fitted_under_another_key_draw_a_warning() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let other = tmp.path().join("other.key");
    std::fs::write(&other, "a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5\n").unwrap();
    let out = slam(&[
        "detect", "--bank", p(&f.bank()), "--nulls", p(&f.nulls()), "--key-file", p(&other),
        "--world", p(&f.world()), "--in-dir", p(&f.wm()),
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("different key digest"));
}

#[test]
fn bridge_backend_requires_a_model() {
    let f = fixture();
    let out = slam(&[
        "calibrate", "--bank", p(&f.bank()), "--key-file", p(&f.key()),
        "--baseline-dir", p(&f.world().join("baseline")), "--backend", "bridge",
        "--bridge-program", "/nonexistent/slam-bridge", "--out", p(&f.root.join("x.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--model"));
}
