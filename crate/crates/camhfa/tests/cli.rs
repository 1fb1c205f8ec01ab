//! End-to-end tests that drive the compiled binary the way a user would:
//! write a configuration file, run the pipeline stage by stage, and check
//! exit codes, output formats, and failure hygiene.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_camhfa"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary should spawn")
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout should be utf-8")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr should be utf-8")
}

const SMALL_CONFIG: &str = "\
# smoke configuration: tiny corpus, tiny model, two epochs
synth.speakers = 3
synth.utts_per_speaker = 4
synth.frames = 10
synth.feature_dim = 5
synth.hidden_layers = 2
synth.seed = 11

train.groups = 2
train.context = 3
train.head_dim = 4
train.embed_dim = 8
train.epochs = 2
train.batch_size = 6
train.seed = 5
";

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, SMALL_CONFIG).unwrap();
    path
}

/// Build an exhaustive same-speaker/cross-speaker trial list from an
/// embedding file, relying on the synthetic `s####_u####` id scheme.
fn write_trials(embeddings: &Path, out: &Path) -> usize {
    let text = std::fs::read_to_string(embeddings).unwrap();
    let ids: Vec<&str> = text.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    let mut lines = String::new();
    let mut count = 0;
    for (i, a) in ids.iter().enumerate() {
        for b in &ids[i + 1..] {
            let same = a.split('_').next() == b.split('_').next();
            lines.push_str(&format!("{} {a} {b}\n", u8::from(same)));
            count += 1;
        }
    }
    std::fs::write(out, lines).unwrap();
    count
}

#[test]
fn the_full_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    write_config(dir);

    let synth = run(&["synth", "--config", "run.cfg", "--out", "feats.bin"], dir);
    assert_success(&synth, "synth");
    assert!(stdout(&synth).contains("12 utterances, 3 speakers"));

    let train = run(
        &["train", "--config", "run.cfg", "--features", "feats.bin", "--out", "model.ckpt"],
        dir,
    );
    assert_success(&train, "train");
    let log = stdout(&train);
    assert!(log.contains("epoch   0  loss"), "log: {log}");
    assert!(log.contains("epoch   1  loss"), "log: {log}");

    let extract = run(
        &["extract", "--checkpoint", "model.ckpt", "--features", "feats.bin", "--out", "emb.txt"],
        dir,
    );
    assert_success(&extract, "extract");
    assert!(stdout(&extract).contains("12 embeddings"));

    let trials = write_trials(&dir.join("emb.txt"), &dir.join("trials.txt"));
    assert_eq!(trials, 12 * 11 / 2);

    let score = run(
        &["score", "--embeddings", "emb.txt", "--trials", "trials.txt", "--out", "scores.txt"],
        dir,
    );
    assert_success(&score, "score");
    let first = std::fs::read_to_string(dir.join("scores.txt")).unwrap();
    let first = first.lines().next().unwrap();
    let fields: Vec<&str> = first.split_whitespace().collect();
    assert_eq!(fields.len(), 3, "score line: {first}");
    assert!(fields[2].parse::<f64>().is_ok(), "score field: {}", fields[2]);

    let eval = run(&["eval", "--scores", "scores.txt", "--trials", "trials.txt"], dir);
    assert_success(&eval, "eval");
    let line = stdout(&eval);
    let (word, value) = line.trim_end().split_once(' ').expect("one space");
    assert_eq!(word, "EER");
    assert_eq!(value.len(), "0.000000".len(), "six decimals: {line}");
    let eer: f64 = value.parse().unwrap();
    assert!((0.0..=1.0).contains(&eer), "EER out of range: {eer}");
}

#[test]
fn reruns_write_byte_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    write_config(dir);

    for out in ["a.bin", "b.bin"] {
        assert_success(&run(&["synth", "--config", "run.cfg", "--out", out], dir), "synth");
    }
    let a = std::fs::read(dir.join("a.bin")).unwrap();
    let b = std::fs::read(dir.join("b.bin")).unwrap();
    assert_eq!(a, b, "synth output should not depend on the run");

    let mut logs = Vec::new();
    for out in ["a.ckpt", "b.ckpt"] {
        let t = run(
            &["train", "--config", "run.cfg", "--features", "a.bin", "--out", out],
            dir,
        );
        assert_success(&t, "train");
        // Keep the epoch log and drop the trailing "wrote <path>" line,
        // which differs between the two runs by construction.
        let epochs: Vec<String> = stdout(&t)
            .lines()
            .filter(|l| l.starts_with("epoch"))
            .map(str::to_owned)
            .collect();
        assert_eq!(epochs.len(), 2, "one log line per epoch");
        logs.push(epochs);
    }
    assert_eq!(logs[0], logs[1], "training logs should be identical");
    let a = std::fs::read(dir.join("a.ckpt")).unwrap();
    let b = std::fs::read(dir.join("b.ckpt")).unwrap();
    assert_eq!(a, b, "checkpoints should be byte-identical");
}

#[test]
fn unknown_configuration_keys_abort_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    std::fs::write(dir.join("bad.cfg"), "train.groops = 3\n").unwrap();

    let out = run(&["synth", "--config", "bad.cfg", "--out", "feats.bin"], dir);
    assert!(!out.status.success());
    assert!(
        stderr(&out).contains("train.groops"),
        "stderr should name the key: {}",
        stderr(&out)
    );
    assert!(!dir.join("feats.bin").exists());
    assert!(!dir.join("feats.bin.partial").exists());
}

#[test]
fn top_k_without_cohort_is_a_usage_error_and_touches_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    // Deliberately point at files that do not exist: argument validation
    // must reject the combination before any of them is opened.
    let out = run(
        &["score", "--embeddings", "e.txt", "--trials", "t.txt", "--out", "s.txt", "--top-k", "5"],
        dir,
    );
    assert_eq!(out.status.code(), Some(2), "usage errors exit with 2");
    assert!(stderr(&out).contains("--cohort"));
    assert!(std::fs::read_dir(dir).unwrap().next().is_none(), "directory should stay empty");
}

#[test]
fn corrupt_inputs_fail_without_leaving_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    write_config(dir);
    std::fs::write(dir.join("feats.bin"), b"CMHF but then garbage").unwrap();

    let out = run(
        &["train", "--config", "run.cfg", "--features", "feats.bin", "--out", "model.ckpt"],
        dir,
    );
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error:"), "stderr: {}", stderr(&out));
    assert!(!dir.join("model.ckpt").exists());
    assert!(!dir.join("model.ckpt.partial").exists());
}

#[test]
fn thread_cap_overrides_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    write_config(dir);

    for bad in ["0", "-2", "many"] {
        let out = bin()
            .args(["synth", "--config", "run.cfg", "--out", "feats.bin"])
            .current_dir(dir)
            .env("CAMHFA_THREADS", bad)
            .output()
            .unwrap();
        assert!(!out.status.success(), "cap {bad:?} should be rejected");
        assert!(stderr(&out).contains("CAMHFA_THREADS"));
        assert!(!dir.join("feats.bin").exists());
    }

    let out = bin()
        .args(["synth", "--config", "run.cfg", "--out", "feats.bin"])
        .current_dir(dir)
        .env("CAMHFA_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success(), "a positive cap is accepted");
}

#[test]
fn cohort_scoring_normalizes_but_preserves_the_error_rate() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    write_config(dir);
    for step in [
        vec!["synth", "--config", "run.cfg", "--out", "feats.bin"],
        vec!["train", "--config", "run.cfg", "--features", "feats.bin", "--out", "model.ckpt"],
        vec!["extract", "--checkpoint", "model.ckpt", "--features", "feats.bin", "--out", "emb.txt"],
    ] {
        assert_success(&run(&step, dir), step[0]);
    }
    write_trials(&dir.join("emb.txt"), &dir.join("trials.txt"));

    let raw = run(
        &["score", "--embeddings", "emb.txt", "--trials", "trials.txt", "--out", "raw.txt"],
        dir,
    );
    assert_success(&raw, "raw score");
    let normed = run(
        &[
            "score", "--embeddings", "emb.txt", "--trials", "trials.txt", "--out", "snorm.txt",
            "--cohort", "emb.txt", "--top-k", "4",
        ],
        dir,
    );
    assert_success(&normed, "normalized score");
    let raw = std::fs::read_to_string(dir.join("raw.txt")).unwrap();
    let normed = std::fs::read_to_string(dir.join("snorm.txt")).unwrap();
    assert_ne!(raw, normed, "normalization should change the scores");

    for scores in ["raw.txt", "snorm.txt"] {
        let out = run(&["eval", "--scores", scores, "--trials", "trials.txt"], dir);
        assert_success(&out, "eval");
        assert!(stdout(&out).starts_with("EER "));
    }
}

#[test]
fn eval_reports_which_trial_is_missing_a_score() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    std::fs::write(dir.join("scores.txt"), "a b 0.5\n").unwrap();
    std::fs::write(dir.join("trials.txt"), "1 a b\n0 a c\n").unwrap();
    let out = run(&["eval", "--scores", "scores.txt", "--trials", "trials.txt"], dir);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("`a` vs `c`"), "stderr: {err}");
}

#[test]
fn verification_commands_pass_and_report_each_check() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    write_config(dir);

    let equiv = run(&["equiv", "--config", "run.cfg"], dir);
    assert_success(&equiv, "equiv");
    let text = stdout(&equiv);
    assert_eq!(text.matches("PASS").count(), 4, "equiv output: {text}");
    assert!(!text.contains("FAIL"));

    let gradcheck = run(&["gradcheck", "--config", "run.cfg"], dir);
    assert_success(&gradcheck, "gradcheck");
    let text = stdout(&gradcheck);
    assert!(text.contains("class_weights"), "gradcheck output: {text}");
    assert!(text.trim_end().ends_with("PASS"), "gradcheck output: {text}");
}
