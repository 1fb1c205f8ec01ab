//! Command-line driver: one subcommand per pipeline stage.
//!
//! Every command validates all of its inputs before producing output, and
//! output files are written to a `.partial` sibling then renamed, so an
//! interrupted or failed run never leaves a half-written file behind.
//! Given identical inputs and seeds, every command writes byte-identical
//! outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config;
use crate::error::{Error, Result};
use crate::eval;
use crate::pooling::equivalence;
use crate::synth;
use crate::train::{self, checkpoint, gradcheck};

const EQUIV_TOL: f64 = 1e-12;

#[derive(Parser)]
#[command(
    name = "camhfa",
    version,
    about = "Context-aware multi-head factorized attentive pooling: synthetic data, training, and verification",
    after_help = "CAMHFA_THREADS caps internal parallelism (positive integer, default 1; \
all current code paths are sequential)."
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature corpus and write it as a binary file.
    Synth {
        /// key=value configuration file (synth.* keys apply)
        #[arg(long)]
        config: PathBuf,
        /// Output feature file
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a feature corpus; prints one log line per epoch.
    Train {
        /// key=value configuration file (train.* keys apply)
        #[arg(long)]
        config: PathBuf,
        /// Input feature file
        #[arg(long)]
        features: PathBuf,
        /// Output checkpoint file
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute one embedding per utterance: "utterance_id v0 v1 ..." lines.
    Extract {
        /// Trained checkpoint file
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input feature file
        #[arg(long)]
        features: PathBuf,
        /// Output embedding text file
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trial list: "enroll test score" lines, cosine by default,
    /// normalized against a cohort when one is given.
    Score {
        /// Embedding text file covering every trial id
        #[arg(long)]
        embeddings: PathBuf,
        /// Trial list: "label enroll test" lines with label 0 or 1
        #[arg(long)]
        trials: PathBuf,
        /// Output score file
        #[arg(long)]
        out: PathBuf,
        /// Embedding text file with cohort speakers (enables normalization)
        #[arg(long, requires = "top_k")]
        cohort: Option<PathBuf>,
        /// Cohort scores kept per side for normalization statistics
        #[arg(long, requires = "cohort")]
        top_k: Option<usize>,
    },
    /// Compute the equal error rate of a score file against a trial list.
    Eval {
        /// Score file produced by `score`
        #[arg(long)]
        scores: PathBuf,
        /// Trial list the scores belong to
        #[arg(long)]
        trials: PathBuf,
    },
    /// Compare every analytic parameter gradient against central
    /// differences on a pinned small model; nonzero exit on disagreement.
    Gradcheck {
        /// key=value configuration file (margin, scale, and margin type
        /// apply; extreme scales can exceed the difference oracle's
        /// resolution)
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the degeneration and convolution-equivalence suites on seeded
    /// random instances; nonzero exit on any violation.
    Equiv {
        /// key=value configuration file (train.seed picks the instances)
        #[arg(long)]
        config: PathBuf,
    },
}

/// Parse arguments, execute, and fold the outcome into an exit code.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli) -> Result<bool> {
    worker_cap()?;
    match cli.command {
        Command::Synth { config, out } => cmd_synth(&config, &out).map(|()| true),
        Command::Train {
            config,
            features,
            out,
        } => cmd_train(&config, &features, &out).map(|()| true),
        Command::Extract {
            checkpoint,
            features,
            out,
        } => cmd_extract(&checkpoint, &features, &out).map(|()| true),
        Command::Score {
            embeddings,
            trials,
            out,
            cohort,
            top_k,
        } => cmd_score(&embeddings, &trials, &out, cohort.as_deref(), top_k).map(|()| true),
        Command::Eval { scores, trials } => cmd_eval(&scores, &trials).map(|()| true),
        Command::Gradcheck { config } => cmd_gradcheck(&config),
        Command::Equiv { config } => cmd_equiv(&config),
    }
}

/// Validate the CAMHFA_THREADS override. Every code path in this binary is
/// sequential, so any positive cap is honored as-is.
fn worker_cap() -> Result<usize> {
    match std::env::var("CAMHFA_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(std::env::VarError::NotUnicode(_)) => Err(Error::InvalidConfig(
            "CAMHFA_THREADS is not valid unicode".into(),
        )),
        Ok(raw) => raw
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "CAMHFA_THREADS must be a positive integer, got {raw:?}"
                ))
            }),
    }
}

/// Write through a `.partial` sibling and rename, removing the sibling if
/// anything fails, so `path` only ever holds complete content.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut partial = path.as_os_str().to_owned();
    partial.push(".partial");
    let partial = PathBuf::from(partial);
    let outcome = std::fs::write(&partial, bytes)
        .and_then(|()| std::fs::rename(&partial, path));
    if outcome.is_err() {
        let _ = std::fs::remove_file(&partial);
    }
    Ok(outcome?)
}

fn cmd_synth(config: &Path, out: &Path) -> Result<()> {
    let config = config::load(config)?;
    let corpus = synth::generate(&config.synth)?;
    write_atomic(out, &synth::encode(&corpus))?;
    println!(
        "wrote {} ({} utterances, {} speakers)",
        out.display(),
        corpus.len(),
        corpus.num_speakers()
    );
    Ok(())
}

fn cmd_train(config: &Path, features: &Path, out: &Path) -> Result<()> {
    let config = config::load(config)?;
    let corpus = synth::load(features)?;
    let (ckpt, log) = train::train(&corpus, &config.train)?;
    print!("{}", log.render());
    write_atomic(out, &checkpoint::encode(&ckpt))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_extract(ckpt_path: &Path, features: &Path, out: &Path) -> Result<()> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let corpus = synth::load(features)?;
    let mut embeddings = BTreeMap::new();
    for u in &corpus.utterances {
        let embedding = ckpt.pooler.extract(&u.features)?;
        if embeddings.insert(u.id.clone(), embedding).is_some() {
            return Err(Error::InvalidConfig(format!(
                "duplicate utterance id `{}` in {}",
                u.id,
                features.display()
            )));
        }
    }
    write_atomic(out, eval::format_embeddings(&embeddings).as_bytes())?;
    println!("wrote {} ({} embeddings)", out.display(), embeddings.len());
    Ok(())
}

fn cmd_score(
    embeddings: &Path,
    trials: &Path,
    out: &Path,
    cohort: Option<&Path>,
    top_k: Option<usize>,
) -> Result<()> {
    let embeddings = eval::parse_embeddings(&std::fs::read_to_string(embeddings)?)?;
    let trials = eval::parse_trials(&std::fs::read_to_string(trials)?)?;
    let scores = match (cohort, top_k) {
        (Some(cohort), Some(top_k)) => {
            let cohort = eval::parse_embeddings(&std::fs::read_to_string(cohort)?)?;
            eval::score_trials_snorm(&trials, &embeddings, &cohort, top_k)?
        }
        _ => eval::score_trials(&trials, &embeddings)?,
    };
    write_atomic(out, eval::format_scores(&trials, &scores).as_bytes())?;
    println!("wrote {} ({} trials)", out.display(), trials.len());
    Ok(())
}

fn cmd_eval(scores: &Path, trials: &Path) -> Result<()> {
    let scores = eval::parse_scores(&std::fs::read_to_string(scores)?)?;
    let trials = eval::parse_trials(&std::fs::read_to_string(trials)?)?;
    let mut by_pair = BTreeMap::new();
    for (enroll, test, score) in scores {
        if by_pair.insert((enroll.clone(), test.clone()), score).is_some() {
            return Err(Error::InvalidConfig(format!(
                "duplicate score for `{enroll}` vs `{test}`"
            )));
        }
    }
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for t in &trials {
        let score = by_pair
            .get(&(t.enroll.clone(), t.test.clone()))
            .ok_or_else(|| Error::MissingScore {
                enroll: t.enroll.clone(),
                test: t.test.clone(),
            })?;
        if t.target {
            targets.push(*score);
        } else {
            nontargets.push(*score);
        }
    }
    let eer = eval::compute_eer(&targets, &nontargets)?;
    println!("EER {eer:.6}");
    Ok(())
}

fn cmd_gradcheck(config: &Path) -> Result<bool> {
    let config = config::load(config)?;
    let t = &config.train;
    println!(
        "comparing analytic gradients to central differences (margin {}, scale {}, {})",
        t.margin,
        t.scale,
        t.margin_type.name()
    );
    let report = gradcheck::run_verification(
        t.margin,
        t.scale,
        t.margin_type,
        gradcheck::VERIFICATION_SEED,
    )?;
    print!("{}", report.render());
    Ok(report.passed())
}

fn cmd_equiv(config: &Path) -> Result<bool> {
    let config = config::load(config)?;
    let seed = config.train.seed;
    let suites = [
        (
            "single-frame window vs plain attention heads",
            equivalence::window_one_suite(100, seed ^ 0xA1),
        ),
        (
            "zero queries vs exact mean pooling",
            equivalence::mean_pool_suite(100, seed ^ 0xA2),
        ),
        (
            "one group, window one vs self-attentive pooling",
            equivalence::self_attention_suite(100, seed ^ 0xA3),
        ),
        (
            "windowed scores vs convolution form",
            equivalence::conv_suite(100, seed ^ 0xA4),
        ),
    ];
    let mut all_pass = true;
    for (name, report) in suites {
        let pass = report.max_abs_err <= EQUIV_TOL;
        all_pass &= pass;
        println!(
            "{} {name}: {} cases, max |err| {:.3e} (tol {EQUIV_TOL:.0e})",
            if pass { "PASS" } else { "FAIL" },
            report.cases,
            report.max_abs_err
        );
    }
    Ok(all_pass)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worker_cap_accepts_positive_integers() {
        // The env var itself is process-global, so only the parser's logic
        // is exercised here; the binary-level tests set the real variable.
        assert!("4".trim().parse::<usize>().ok().filter(|n| *n >= 1).is_some());
        assert!("0".trim().parse::<usize>().ok().filter(|n| *n >= 1).is_none());
        assert!("many".trim().parse::<usize>().ok().filter(|n| *n >= 1).is_none());
    }

    #[test]
    fn atomic_writes_leave_no_partial_behind() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("out.bin");
        write_atomic(&target, b"payload").unwrap();
        assert_eq!(std::fs::read(&target).unwrap(), b"payload");
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(leftovers, vec![std::ffi::OsString::from("out.bin")]);
    }

    #[test]
    fn atomic_write_failure_cleans_up_and_keeps_nothing() {
        let dir = tempfile::tempdir().unwrap();
        // The rename target sits in a directory that does not exist.
        let target = dir.path().join("missing").join("out.bin");
        assert!(write_atomic(&target, b"payload").is_err());
        let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert!(leftovers.is_empty());
    }
}
