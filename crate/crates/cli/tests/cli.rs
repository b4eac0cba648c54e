use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn ctxlm(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxlm"))
        .env_remove("CTXLM_OUT_ROOT")
        .arg("--out-root")
        .arg(root)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small planted corpus inside a fresh output root.
fn setup(n: usize) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.tsv");
    ok(&ctxlm(
        dir.path(),
        &[
            "generate",
            "--seed",
            "3",
            "--num-utterances",
            &n.to_string(),
            "--out",
            p(&corpus),
        ],
    ));
    (dir, corpus)
}

const TINY: &[&str] = &[
    "--embed-dim",
    "12",
    "--hidden-dim",
    "12",
    "--steps",
    "20",
    "--eval-every",
    "10",
    "--batch-size",
    "16",
];

fn train(root: &Path, corpus: &Path, run_dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--corpus", p(corpus), "--run-dir", p(run_dir)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ctxlm(root, &args)
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn generate_is_deterministic_and_reports_split_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.tsv"), dir.path().join("b.tsv"));
    let out = ok(&ctxlm(
        dir.path(),
        &[
            "generate",
            "--seed",
            "7",
            "--num-utterances",
            "1000",
            "--out",
            p(&a),
        ],
    ));
    ok(&ctxlm(
        dir.path(),
        &[
            "generate",
            "--seed",
            "7",
            "--num-utterances",
            "1000",
            "--out",
            p(&b),
        ],
    ));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(
        out.contains("90/5/5 split: train 900 dev 50 test 50"),
        "{out}"
    );
    assert!(out.contains("unique texts"));
    let m = manifest(&dir.path().join("generate/seed-7"));
    assert_eq!(m["command"], "generate");
    assert_eq!(m["seed"], 7);
    assert!(m["artifacts"]["corpus"]["sha256"].as_str().unwrap().len() == 64);
}

#[test]
fn generate_rejects_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.toml");
    std::fs::write(&cfg, "num_utterances = 5\n").unwrap();
    assert_eq!(
        code(&ctxlm(dir.path(), &["generate", "--config", p(&cfg)])),
        2
    );
    let printed = ok(&ctxlm(dir.path(), &["generate", "--print-config"]));
    std::fs::write(&cfg, printed).unwrap();
    ok(&ctxlm(
        dir.path(),
        &["generate", "--config", p(&cfg), "--num-utterances", "50"],
    ));
}

#[test]
fn default_and_attention_models_train() {
    let (dir, corpus) = setup(1500);
    let d = dir.path().join("default");
    let out = ok(&train(dir.path(), &corpus, &d, &["--arch", "default"]));
    assert!(out.contains("Full") && out.contains("Head") && out.contains("Tail"));
    for f in [
        "model.ckpt",
        "curve.csv",
        "report.json",
        "report.txt",
        "manifest.json",
    ] {
        assert!(d.join(f).exists(), "{f}");
    }
    let curve = std::fs::read_to_string(d.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
    let c = dir.path().join("concat");
    ok(&train(
        dir.path(),
        &corpus,
        &c,
        &["--arch", "concat", "--attention", "word"],
    ));
    let m = manifest(&c);
    assert_eq!(m["settings"]["model"]["attention"], "word_query");
    assert_eq!(m["artifacts"].as_object().unwrap().len(), 4);
}

#[test]
fn invalid_model_flags_exit_with_usage_code() {
    let (dir, corpus) = setup(200);
    let out = train(
        dir.path(),
        &corpus,
        &dir.path().join("x"),
        &["--arch", "prepend", "--attention", "word"],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("attention"));
    assert_eq!(
        code(&train(
            dir.path(),
            &corpus,
            &dir.path().join("x"),
            &["--arch", "lstm"]
        )),
        2
    );
    assert_eq!(
        code(&train(
            dir.path(),
            &corpus,
            &dir.path().join("x"),
            &["--split", "50,50,0"]
        )),
        2
    );
    assert_eq!(
        code(&ctxlm(dir.path(), &["train", "--corpus", "/no/such/file"])),
        1
    );
    assert_eq!(code(&ctxlm(dir.path(), &["frobnicate"])), 2);
}

#[test]
fn divergence_is_a_runtime_failure() {
    let (dir, corpus) = setup(200);
    let out = train(
        dir.path(),
        &corpus,
        &dir.path().join("x"),
        &["--lr", "1e300", "--no-clip"],
    );
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let (dir, corpus) = setup(300);
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "[model]\narch = \"concat\"\nembed_dim = 10\n\n[train]\nlearning_rate = 0.02\nmax_steps = 4\n\n[data]\nsplit = [80, 10, 10]\n",
    )
    .unwrap();
    let run = dir.path().join("layered");
    ok(&ctxlm(
        dir.path(),
        &[
            "train",
            "--corpus",
            p(&corpus),
            "--config",
            p(&cfg),
            "--lr",
            "0.05",
            "--hidden-dim",
            "6",
            "--run-dir",
            p(&run),
        ],
    ));
    let s = &manifest(&run)["settings"];
    assert_eq!(s["model"]["arch"], "concat");
    assert_eq!(s["model"]["embed_dim"], 10);
    assert_eq!(s["model"]["hidden_dim"], 6);
    assert_eq!(s["train"]["learning_rate"], 0.05);
    assert_eq!(s["train"]["max_steps"], 4);
    assert_eq!(s["train"]["batch_size"], 32);
    assert_eq!(s["data"]["split"], serde_json::json!([80, 10, 10]));
    std::fs::write(&cfg, "[train]\nlearnin_rate = 0.1\n").unwrap();
    assert_eq!(
        code(&ctxlm(
            dir.path(),
            &["train", "--corpus", p(&corpus), "--config", p(&cfg)]
        )),
        2
    );
}

#[test]
fn output_root_comes_from_the_environment() {
    let (dir, corpus) = setup(200);
    let root = dir.path().join("env-root");
    let out = Command::new(env!("CARGO_BIN_EXE_ctxlm"))
        .env("CTXLM_OUT_ROOT", &root)
        .args(["train", "--corpus", p(&corpus)])
        .args(TINY)
        .output()
        .unwrap();
    ok(&out);
    assert!(root.join("train/default-seed0/manifest.json").exists());
}

#[test]
fn replaying_a_training_manifest_reproduces_the_checkpoint() {
    let (dir, corpus) = setup(600);
    let run = dir.path().join("orig");
    ok(&train(
        dir.path(),
        &corpus,
        &run,
        &["--arch", "factor", "--attention", "hidden", "--seed", "4"],
    ));
    let again = dir.path().join("again");
    ok(&ctxlm(
        dir.path(),
        &[
            "replay",
            p(&run.join("manifest.json")),
            "--run-dir",
            p(&again),
        ],
    ));
    for f in ["model.ckpt", "report.json", "curve.csv"] {
        assert_eq!(
            std::fs::read(run.join(f)).unwrap(),
            std::fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
    let (a, b) = (manifest(&run), manifest(&again));
    assert_eq!(
        a["artifacts"]["checkpoint"]["sha256"],
        b["artifacts"]["checkpoint"]["sha256"]
    );
    assert_eq!(a["settings"], b["settings"]);
}

#[test]
fn eval_against_itself_reports_zero_reduction() {
    let (dir, corpus) = setup(800);
    let run = dir.path().join("m");
    ok(&train(dir.path(), &corpus, &run, &[]));
    let ev = dir.path().join("ev");
    let out = ok(&ctxlm(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            p(&run.join("model.ckpt")),
            "--corpus",
            p(&corpus),
            "--baseline",
            p(&run.join("report.json")),
            "--run-dir",
            p(&ev),
        ],
    ));
    let header = out.lines().nth(1).unwrap();
    assert!(
        header.contains("Full") && header.contains("Head") && header.contains("Tail"),
        "{out}"
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    for part in ["full", "head", "tail"] {
        assert_eq!(report["relative"][part], 0.0, "{part}");
    }
    // same split, so the same perplexity as at training time
    let trained: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["partitions"], trained["partitions"]);
}

#[test]
fn eval_refuses_a_baseline_from_another_corpus() {
    let (dir, corpus) = setup(300);
    let other = dir.path().join("other.tsv");
    ok(&ctxlm(
        dir.path(),
        &[
            "generate",
            "--seed",
            "4",
            "--num-utterances",
            "300",
            "--out",
            p(&other),
        ],
    ));
    let run = dir.path().join("m");
    ok(&train(dir.path(), &corpus, &run, &[]));
    let out = ctxlm(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            p(&run.join("model.ckpt")),
            "--corpus",
            p(&other),
            "--baseline",
            p(&run.join("report.json")),
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("different corpora"));
}

#[test]
fn eval_marks_a_missing_tail_as_absent() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("dup.tsv");
    let mut text = String::new();
    for i in 0..60 {
        let line = ["set an alarm", "play music", "what is the weather"][i % 3];
        text.push_str(&format!(
            "2020-0{}-1{} 0{}:00\t{line}\n",
            1 + i % 9,
            i % 10,
            i % 10
        ));
    }
    std::fs::write(&corpus, text).unwrap();
    let run = dir.path().join("m");
    ok(&train(dir.path(), &corpus, &run, &[]));
    let table = std::fs::read_to_string(run.join("report.txt")).unwrap();
    let row = table.lines().find(|l| l.starts_with("perplexity")).unwrap();
    assert!(row.trim_end().ends_with("absent"), "{table}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert!(report["partitions"]["tail"].is_null());
}

#[test]
fn sweep_trace_and_ablate() {
    let (dir, corpus) = setup(600);
    let run = dir.path().join("m");
    ok(&train(
        dir.path(),
        &corpus,
        &run,
        &["--arch", "concat", "--attention", "word"],
    ));
    let ckpt = run.join("model.ckpt");

    let sw = dir.path().join("sweep");
    ok(&ctxlm(
        dir.path(),
        &[
            "sweep",
            "--checkpoint",
            p(&ckpt),
            "--field",
            "hour",
            "--target",
            "snooze",
            "--run-dir",
            p(&sw),
        ],
    ));
    let csv = std::fs::read_to_string(sw.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 24);

    let tr = dir.path().join("trace");
    ok(&ctxlm(
        dir.path(),
        &[
            "trace",
            "--checkpoint",
            p(&ckpt),
            "--text",
            "play me best christmas songs",
            "--context",
            "2020-12-23 07:00",
            "--run-dir",
            p(&tr),
        ],
    ));
    let csv = std::fs::read_to_string(tr.join("trace.csv")).unwrap();
    let steps: std::collections::BTreeSet<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(steps.len(), 5 + 1);
    assert!(csv.lines().nth(1).unwrap().starts_with("0,<s>,month,"));

    let plain = dir.path().join("plain");
    ok(&train(dir.path(), &corpus, &plain, &[]));
    let out = ctxlm(
        dir.path(),
        &[
            "trace",
            "--checkpoint",
            p(&plain.join("model.ckpt")),
            "--text",
            "hi",
            "--context",
            "2020-12-23 07:00",
        ],
    );
    assert_eq!(code(&out), 2);

    let out = ctxlm(
        dir.path(),
        &[
            "ablate",
            "--corpus",
            p(&corpus),
            "--arch",
            "default",
            "--steps",
            "2",
        ],
    );
    assert_eq!(code(&out), 2);
    let ab = dir.path().join("ablate");
    let mut args = vec![
        "ablate",
        "--corpus",
        p(&corpus),
        "--arch",
        "concat",
        "--run-dir",
        p(&ab),
    ];
    args.extend_from_slice(TINY);
    let out = ok(&ctxlm(dir.path(), &args));
    assert!(out.contains("shuffled vs true context"));
    let result: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ab.join("ablation.json")).unwrap()).unwrap();
    assert!(result["delta"]["full"].is_number());
}

#[test]
fn ci_runs_seeds_in_parallel_processes() {
    let (dir, corpus) = setup(400);
    let ci = dir.path().join("ci");
    let mut args = vec![
        "ci",
        "--corpus",
        p(&corpus),
        "--runs",
        "3",
        "--jobs",
        "2",
        "--seed",
        "10",
        "--run-dir",
        p(&ci),
    ];
    args.extend_from_slice(TINY);
    let out = ok(&ctxlm(dir.path(), &args));
    assert!(out.contains("over 3 runs"), "{out}");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ci.join("ci.json")).unwrap()).unwrap();
    assert_eq!(summary["seeds"], serde_json::json!([10, 11, 12]));
    assert!(summary["full"]["half_width"].as_f64().unwrap() > 0.0);
    // every run shares the data split of the base seed
    for s in 10..13 {
        let m = manifest(&ci.join(format!("seed-{s}")));
        assert_eq!(m["settings"]["data"]["split_seed"], 10);
        assert_eq!(m["seed"], s);
    }
    assert_eq!(
        code(&ctxlm(
            dir.path(),
            &["ci", "--corpus", p(&corpus), "--runs", "1"]
        )),
        2
    );
}
