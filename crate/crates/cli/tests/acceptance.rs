//! Reproducibility gate for the command-line interface, plus exit-code and
//! artifact-contract checks.  The criterion test prints one `[PASS]`/`[FAIL]`
//! line so the gate can be read off the test log directly.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn check(n: u32, what: &str, body: impl FnOnce() + std::panic::UnwindSafe) {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(()) => println!("[PASS] criterion {n}: {what}"),
        Err(err) => {
            println!("[FAIL] criterion {n}: {what}");
            resume_unwind(err);
        }
    }
}

fn carpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_carpo"))
        .args(args)
        .output()
        .expect("spawn carpo binary")
}

fn run_ok(args: &[&str]) {
    let out = carpo(args);
    assert!(
        out.status.success(),
        "carpo {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Every regular file in `dir` (flat), name -> bytes.
fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).expect("read artifact dir") {
        let entry = entry.expect("read dir entry");
        if entry.file_type().expect("file type").is_file() {
            let name = entry.file_name().to_string_lossy().into_owned();
            out.insert(name, fs::read(entry.path()).expect("read artifact"));
        }
    }
    out
}

fn assert_identical_dirs(a: &Path, b: &Path) {
    let left = dir_bytes(a);
    let right = dir_bytes(b);
    assert_eq!(
        left.keys().collect::<Vec<_>>(),
        right.keys().collect::<Vec<_>>(),
        "artifact sets differ between {a:?} and {b:?}"
    );
    for (name, bytes) in &left {
        assert_eq!(bytes, &right[name], "artifact {name} differs between the two runs");
    }
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

#[test]
fn criterion_10_fixed_seed_single_thread_runs_are_byte_identical() {
    check(10, "byte-identical artifacts across repeated --threads 1 runs", || {
        let tmp = tempfile::tempdir().expect("tempdir");
        let root = tmp.path();
        let spec = root.join("spec.toml");
        fs::write(
            &spec,
            "n_prompts = 40\nm_candidates = 4\nfeature_dim = 6\nper_prompt_pairs = 2\nseed = 11\n",
        )
        .expect("write spec");
        let config = root.join("train.toml");
        fs::write(&config, "epochs = 12\nbatch_size = 16\nseed = 11\n").expect("write config");

        // gen twice into separate directories.
        let gen_a = root.join("gen-a");
        let gen_b = root.join("gen-b");
        for dir in [&gen_a, &gen_b] {
            run_ok(&["gen", "--spec", path_str(&spec), "--threads", "1", "--out", path_str(dir)]);
        }
        assert_identical_dirs(&gen_a, &gen_b);
        let gen_names: Vec<_> = dir_bytes(&gen_a).keys().cloned().collect();
        assert_eq!(gen_names, ["corpus.jsonl", "manifest.json", "truth.jsonl"]);

        // train twice off the same corpus (exercises the fitted-ensemble path).
        let corpus = gen_a.join("corpus.jsonl");
        let train_a = root.join("train-a");
        let train_b = root.join("train-b");
        for dir in [&train_a, &train_b] {
            run_ok(&[
                "train",
                "--corpus",
                path_str(&corpus),
                "--config",
                path_str(&config),
                "--threads",
                "1",
                "--out",
                path_str(dir),
            ]);
        }
        assert_identical_dirs(&train_a, &train_b);
        let train_names: Vec<_> = dir_bytes(&train_a).keys().cloned().collect();
        assert_eq!(train_names, ["ensemble.json", "manifest.json", "policy.json", "report.csv"]);

        // sweep twice (CSV + JSON artifacts, ensemble refitted from the corpus seed).
        let truth = gen_a.join("truth.jsonl");
        let sweep_a = root.join("sweep-a");
        let sweep_b = root.join("sweep-b");
        for dir in [&sweep_a, &sweep_b] {
            run_ok(&[
                "sweep",
                "--corpus",
                path_str(&corpus),
                "--truth",
                path_str(&truth),
                "--grid",
                "0:4:0.25",
                "--threads",
                "1",
                "--out",
                path_str(dir),
            ]);
        }
        assert_identical_dirs(&sweep_a, &sweep_b);

        // audit + grad-check twice (seeded sampling and random batches).
        let batch = root.join("batch.json");
        fs::write(&batch, "[[1,0.5],[2,3.2],[3,1.1],[4,3.9],[5,0.2],[6,2.8]]")
            .expect("write batch");
        let audit_a = root.join("audit-a");
        let audit_b = root.join("audit-b");
        for dir in [&audit_a, &audit_b] {
            run_ok(&[
                "audit",
                "--batch",
                path_str(&batch),
                "--seed",
                "9",
                "--threads",
                "1",
                "--out",
                path_str(dir),
            ]);
        }
        assert_identical_dirs(&audit_a, &audit_b);

        let gc_a = root.join("gc-a");
        let gc_b = root.join("gc-b");
        for dir in [&gc_a, &gc_b] {
            run_ok(&[
                "grad-check",
                "--seed",
                "5",
                "--instances",
                "25",
                "--threads",
                "1",
                "--out",
                path_str(dir),
            ]);
        }
        assert_identical_dirs(&gc_a, &gc_b);
    });
}

#[test]
fn exit_codes_follow_the_documented_contract() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let out_dir = tmp.path().join("out");

    // Unknown subcommand and usage errors -> 64.
    assert_eq!(carpo(&["bogus"]).status.code(), Some(64));
    assert_eq!(carpo(&["gen", "--threads", "0"]).status.code(), Some(64));
    // Help and version are not usage errors.
    assert_eq!(carpo(&["--help"]).status.code(), Some(0));
    assert_eq!(carpo(&["--version"]).status.code(), Some(0));

    // Missing input file -> 2.
    let missing = carpo(&[
        "train",
        "--corpus",
        "/nonexistent/corpus.jsonl",
        "--out",
        path_str(&out_dir),
    ]);
    assert_eq!(missing.status.code(), Some(2));

    // Semantically invalid input -> 1 (row sums disagree with n_raters).
    let ratings = tmp.path().join("ratings.json");
    fs::write(&ratings, r#"{"counts": [[3, 0], [1, 1]], "n_raters": 3}"#).expect("write ratings");
    let invalid =
        carpo(&["kappa", "--ratings", path_str(&ratings), "--out", path_str(&out_dir)]);
    assert_eq!(invalid.status.code(), Some(1));
}

#[test]
fn manifest_records_hashed_inputs_and_output_names() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let root = tmp.path();
    let spec = root.join("spec.toml");
    fs::write(
        &spec,
        "n_prompts = 20\nm_candidates = 3\nfeature_dim = 4\nper_prompt_pairs = 1\nseed = 3\n",
    )
    .expect("write spec");
    let out = root.join("run");
    run_ok(&["gen", "--spec", path_str(&spec), "--out", path_str(&out)]);

    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("manifest.json")).expect("read manifest"))
            .expect("parse manifest");
    assert_eq!(manifest["schema"], "carpo-manifest/1");
    assert_eq!(manifest["subcommand"], "gen");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["n_prompts"], 20);

    // The recorded input hash is the SHA-256 of the spec file on disk.
    let mut hasher = Sha256::new();
    hasher.update(fs::read(&spec).expect("read spec"));
    let expect: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(manifest["inputs"][0]["path"], path_str(&spec));
    assert_eq!(manifest["inputs"][0]["sha256"], expect.as_str());

    // Every named output exists; no stray files beyond outputs + manifest.
    let outputs: Vec<String> = manifest["outputs"]
        .as_array()
        .expect("outputs array")
        .iter()
        .map(|v| v.as_str().expect("output name").to_string())
        .collect();
    assert_eq!(outputs, ["corpus.jsonl", "truth.jsonl"]);
    let mut on_disk: Vec<_> = dir_bytes(&out).into_keys().collect();
    on_disk.retain(|n| n != "manifest.json");
    assert_eq!(on_disk, outputs);

    // Structured outputs point back at the manifest... JSONL artifacts carry
    // their schema header instead; eval's metrics.json shows the envelope.
    let policy_out = root.join("train");
    let corpus = out.join("corpus.jsonl");
    run_ok(&["train", "--corpus", path_str(&corpus), "--out", path_str(&policy_out)]);
    let metrics_out = root.join("eval");
    run_ok(&[
        "eval",
        "--corpus",
        path_str(&corpus),
        "--policy",
        path_str(&policy_out.join("policy.json")),
        "--ensemble",
        path_str(&policy_out.join("ensemble.json")),
        "--out",
        path_str(&metrics_out),
    ]);
    let metrics: serde_json::Value =
        serde_json::from_slice(&fs::read(metrics_out.join("metrics.json")).expect("read metrics"))
            .expect("parse metrics");
    assert_eq!(metrics["manifest"], "manifest.json");
    assert!(metrics["exp_pref"].is_number());
}

#[test]
fn grad_check_exit_zero_means_below_tolerance() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let out = tmp.path().join("gc");
    let result = carpo(&["grad-check", "--seed", "7", "--instances", "40", "--out", path_str(&out)]);
    assert!(result.status.success());
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("gradcheck.json")).expect("read report"))
            .expect("parse report");
    assert_eq!(report["passed"], true);
    let err = report["max_rel_err"].as_f64().expect("numeric error");
    assert!(err < 1e-6, "reported error {err} contradicts exit status");
}
