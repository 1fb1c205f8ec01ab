//! Verification-side scoring: cosine trials, adaptive score normalization
//! and equal error rate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// One verification trial: does `test` belong to the speaker of `enroll`?
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

/// Cosine similarity of two embeddings.
pub fn cosine_score(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "cosine_score",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (na, nb) = (a.l2_norm(), b.l2_norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(a.dot(b) / (na * nb))
}

fn check_finite(scores: &[f64], what: &'static str) -> Result<()> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "{what} scores must be finite"
        )));
    }
    Ok(())
}

/// Equal error rate of a detector that accepts when score >= threshold.
///
/// The threshold sweeps the unique observed scores from high to low; the
/// false-accept and false-reject rates at the crossing of the two curves
/// are linearly interpolated, which makes the result invariant under any
/// strictly increasing rescoring.
pub fn compute_eer(targets: &[f64], nontargets: &[f64]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::MissingClass { missing: "target" });
    }
    if nontargets.is_empty() {
        return Err(Error::MissingClass {
            missing: "nontarget",
        });
    }
    check_finite(targets, "target")?;
    check_finite(nontargets, "nontarget")?;

    let mut targets_sorted = targets.to_vec();
    targets_sorted.sort_by(f64::total_cmp);
    let mut nontargets_sorted = nontargets.to_vec();
    nontargets_sorted.sort_by(f64::total_cmp);

    let mut thresholds: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    thresholds.sort_by(|a, b| f64::total_cmp(b, a));
    thresholds.dedup();

    let (n_t, n_n) = (targets.len() as f64, nontargets.len() as f64);
    // Above every score: accept nothing.
    let (mut prev_far, mut prev_diff) = (0.0, 1.0);
    for threshold in thresholds {
        let below_t = targets_sorted.partition_point(|&s| s < threshold);
        let below_n = nontargets_sorted.partition_point(|&s| s < threshold);
        let frr = below_t as f64 / n_t;
        let far = (nontargets.len() - below_n) as f64 / n_n;
        let diff = frr - far;
        if diff <= 0.0 {
            // Crossed between the previous threshold and this one.
            let lambda = prev_diff / (prev_diff - diff);
            return Ok(prev_far + lambda * (far - prev_far));
        }
        prev_far = far;
        prev_diff = diff;
    }
    unreachable!("at the lowest score everything is accepted, so the curves crossed");
}

/// Equal error rate recomputed the slow way: rates counted by scanning the
/// full score lists at every unique threshold. Same interpolation rule,
/// entirely separate counting; used to cross-check [`compute_eer`].
pub fn compute_eer_by_counting(targets: &[f64], nontargets: &[f64]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::MissingClass { missing: "target" });
    }
    if nontargets.is_empty() {
        return Err(Error::MissingClass {
            missing: "nontarget",
        });
    }
    check_finite(targets, "target")?;
    check_finite(nontargets, "nontarget")?;

    let mut thresholds: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    thresholds.sort_by(|a, b| f64::total_cmp(b, a));
    thresholds.dedup();

    let (mut prev_far, mut prev_diff) = (0.0, 1.0);
    for threshold in thresholds {
        let rejected = targets.iter().filter(|&&s| s < threshold).count();
        let accepted = nontargets.iter().filter(|&&s| s >= threshold).count();
        let frr = rejected as f64 / targets.len() as f64;
        let far = accepted as f64 / nontargets.len() as f64;
        let diff = frr - far;
        if diff <= 0.0 {
            let lambda = prev_diff / (prev_diff - diff);
            return Ok(prev_far + lambda * (far - prev_far));
        }
        prev_far = far;
        prev_diff = diff;
    }
    unreachable!("at the lowest score everything is accepted, so the curves crossed");
}

fn cohort_stats(scores: &[f64], top_k: usize, side: &'static str) -> Result<(f64, f64)> {
    if top_k == 0 {
        return Err(Error::InvalidConfig("top_k must be positive".into()));
    }
    if top_k > scores.len() {
        return Err(Error::InvalidConfig(format!(
            "top_k {top_k} exceeds {side} cohort size {}",
            scores.len()
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| f64::total_cmp(b, a));
    let top = &sorted[..top_k];
    let mean = top.iter().sum::<f64>() / top_k as f64;
    let var = top.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / top_k as f64;
    let std = var.sqrt();
    if std == 0.0 {
        return Err(Error::DegenerateCohort { side });
    }
    Ok((mean, std))
}

/// Adaptive symmetric score normalization: the raw score is standardized
/// against the `top_k` highest cohort scores of each side and the two
/// standardized values are averaged. `top_k` equal to the cohort size
/// gives plain symmetric normalization.
pub fn snorm_score(
    raw: f64,
    enroll_cohort: &[f64],
    test_cohort: &[f64],
    top_k: usize,
) -> Result<f64> {
    check_finite(enroll_cohort, "enroll cohort")?;
    check_finite(test_cohort, "test cohort")?;
    let (mean_e, std_e) = cohort_stats(enroll_cohort, top_k, "enroll")?;
    let (mean_t, std_t) = cohort_stats(test_cohort, top_k, "test")?;
    Ok(((raw - mean_e) / std_e + (raw - mean_t) / std_t) / 2.0)
}

fn embedding_for<'a>(
    embeddings: &'a BTreeMap<String, Tensor>,
    id: &str,
) -> Result<&'a Tensor> {
    embeddings
        .get(id)
        .ok_or_else(|| Error::MissingEmbedding(id.to_string()))
}

/// Raw cosine scores for a trial list.
pub fn score_trials(
    trials: &[Trial],
    embeddings: &BTreeMap<String, Tensor>,
) -> Result<Vec<f64>> {
    trials
        .iter()
        .map(|t| {
            cosine_score(
                embedding_for(embeddings, &t.enroll)?,
                embedding_for(embeddings, &t.test)?,
            )
        })
        .collect()
}

/// Cosine scores normalized against a cohort of embeddings: each side of a
/// trial is scored against the whole cohort (in id order) and standardized
/// per [`snorm_score`].
pub fn score_trials_snorm(
    trials: &[Trial],
    embeddings: &BTreeMap<String, Tensor>,
    cohort: &BTreeMap<String, Tensor>,
    top_k: usize,
) -> Result<Vec<f64>> {
    if cohort.is_empty() {
        return Err(Error::InvalidConfig("cohort is empty".into()));
    }
    let mut cache: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let side_scores = |id: &str, embeddings: &BTreeMap<String, Tensor>| -> Result<Vec<f64>> {
        let embedding = embedding_for(embeddings, id)?;
        cohort
            .values()
            .map(|c| cosine_score(embedding, c))
            .collect()
    };
    let mut out = Vec::with_capacity(trials.len());
    for trial in trials {
        for id in [trial.enroll.as_str(), trial.test.as_str()] {
            if !cache.contains_key(id) {
                let scores = side_scores(id, embeddings)?;
                let key = embeddings
                    .get_key_value(id)
                    .map(|(k, _)| k.as_str())
                    .expect("id resolved above");
                cache.insert(key, scores);
            }
        }
        let raw = cosine_score(
            embedding_for(embeddings, &trial.enroll)?,
            embedding_for(embeddings, &trial.test)?,
        )?;
        out.push(snorm_score(
            raw,
            &cache[trial.enroll.as_str()],
            &cache[trial.test.as_str()],
            top_k,
        )?);
    }
    Ok(out)
}

/// Parse a trial list: one `label enroll_id test_id` per line, label 1 for
/// target and 0 for nontarget. Blank lines are ignored.
pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                offset: line_no,
                message: format!(
                    "line {line_no}: expected \"label enroll test\", got {} fields",
                    fields.len()
                ),
            });
        }
        let target = match fields[0] {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse {
                    offset: line_no,
                    message: format!("line {line_no}: label must be 0 or 1, got {other:?}"),
                })
            }
        };
        trials.push(Trial {
            target,
            enroll: fields[1].to_string(),
            test: fields[2].to_string(),
        });
    }
    Ok(trials)
}

pub fn format_trials(trials: &[Trial]) -> String {
    let mut out = String::new();
    for t in trials {
        let label = if t.target { 1 } else { 0 };
        writeln!(out, "{} {} {}", label, t.enroll, t.test).expect("string write");
    }
    out
}

/// Format scores next to their trial ids, 17 significant digits so the
/// values survive a text round trip exactly.
pub fn format_scores(trials: &[Trial], scores: &[f64]) -> String {
    assert_eq!(trials.len(), scores.len(), "one score per trial");
    let mut out = String::new();
    for (t, s) in trials.iter().zip(scores.iter()) {
        writeln!(out, "{} {} {:.16e}", t.enroll, t.test, s).expect("string write");
    }
    out
}

/// Parse a score file back into (enroll, test, score) triples.
pub fn parse_scores(text: &str) -> Result<Vec<(String, String, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                offset: line_no,
                message: format!(
                    "line {line_no}: expected \"enroll test score\", got {} fields",
                    fields.len()
                ),
            });
        }
        let score: f64 = fields[2].parse().map_err(|e| Error::Parse {
            offset: line_no,
            message: format!("line {line_no}: bad score: {e}"),
        })?;
        out.push((fields[0].to_string(), fields[1].to_string(), score));
    }
    Ok(out)
}

/// Format embeddings as text: one `id v1 .. vE` per line in id order,
/// values printed with the shortest representation that parses back to the
/// same f64.
pub fn format_embeddings(embeddings: &BTreeMap<String, Tensor>) -> String {
    let mut out = String::new();
    for (id, e) in embeddings {
        write!(out, "{id}").expect("string write");
        for v in e.data() {
            write!(out, " {v}").expect("string write");
        }
        out.push('\n');
    }
    out
}

pub fn parse_embeddings(text: &str) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    let mut dim: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let id = fields.next().expect("non-blank line has a first field");
        let values: Vec<f64> = fields
            .map(|f| {
                f.parse().map_err(|e| Error::Parse {
                    offset: line_no,
                    message: format!("line {line_no}: bad value: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        if values.is_empty() {
            return Err(Error::Parse {
                offset: line_no,
                message: format!("line {line_no}: embedding {id:?} has no values"),
            });
        }
        if *dim.get_or_insert(values.len()) != values.len() {
            return Err(Error::Parse {
                offset: line_no,
                message: format!(
                    "line {line_no}: embedding {id:?} has {} values, earlier lines had {}",
                    values.len(),
                    dim.unwrap()
                ),
            });
        }
        let len = values.len();
        if out.insert(id.to_string(), Tensor::new(vec![len], values)?).is_some() {
            return Err(Error::Parse {
                offset: line_no,
                message: format!("line {line_no}: duplicate embedding id {id:?}"),
            });
        }
    }
    Ok(out)
}
