//! Release gate: one test per exit criterion, each printing a PASS line
//! with the measured numbers. Tolerances and runtime budgets are pinned
//! here so a regression in any of them fails loudly.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use camhfa::eval::{compute_eer, compute_eer_by_counting, cosine_score, snorm_score};
use camhfa::loss::MarginType;
use camhfa::pooling::equivalence::{
    conv_suite, mean_pool_suite, self_attention_suite, window_one_suite,
};
use camhfa::pooling::{FeatureStack, PoolerDims, PoolerParams};
use camhfa::synth::{decode as decode_features, encode as encode_features, generate, SynthSpec};
use camhfa::tensor::Tensor;
use camhfa::train::checkpoint::{decode as decode_checkpoint, encode as encode_checkpoint};
use camhfa::train::gradcheck::{run_verification, FD_STEP, GRAD_TOL};
use camhfa::train::{train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const EXACT_TOL: f64 = 1e-12;

/// Random model + utterance family shared by the property gates: 1..=16
/// frames, 2..=8 features, stacks of 1..=5 layers, head dim 2..=6, 1..=4
/// groups, embedding dim 2..=6.
fn random_instance(rng: &mut ChaCha20Rng, contexts: &[usize]) -> (PoolerParams, FeatureStack) {
    let dims = PoolerDims {
        layers: rng.gen_range(1..=5),
        feature_dim: rng.gen_range(2..=8),
        head_dim: rng.gen_range(2..=6),
        groups: rng.gen_range(1..=4),
        context: contexts[rng.gen_range(0..contexts.len())],
        embed_dim: rng.gen_range(2..=6),
    };
    let frames = rng.gen_range(1..=16);
    let params = PoolerParams::init(dims, rng.gen()).unwrap();
    let features = FeatureStack::new(Tensor::from_fn(
        vec![dims.layers, frames, dims.feature_dim],
        |_| rng.gen_range(-1.5..1.5),
    ))
    .unwrap();
    (params, features)
}

#[test]
fn degenerate_configurations_match_reference_poolers() {
    let started = Instant::now();
    let window_one = window_one_suite(100, 901);
    let mean_pool = mean_pool_suite(100, 902);
    let self_attention = self_attention_suite(100, 903);
    for (name, report) in [
        ("single-frame window vs plain attention heads", &window_one),
        ("zero queries vs exact mean pooling", &mean_pool),
        ("one group, window one vs self-attentive pooling", &self_attention),
    ] {
        assert_eq!(report.cases, 100);
        assert!(
            report.max_abs_err <= EXACT_TOL,
            "{name}: max |err| {:.3e} exceeds {EXACT_TOL:.0e}",
            report.max_abs_err
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    println!(
        "PASS degenerations: 3 x 100 cases, max |err| {:.3e} (tol {EXACT_TOL:.0e}), {elapsed:?}",
        window_one
            .max_abs_err
            .max(mean_pool.max_abs_err)
            .max(self_attention.max_abs_err)
    );
}

#[test]
fn windowed_scores_match_their_convolution_form() {
    let started = Instant::now();
    let report = conv_suite(100, 904);
    assert_eq!(report.cases, 100);
    assert!(
        report.max_abs_err <= EXACT_TOL,
        "conv vs direct: max |err| {:.3e}",
        report.max_abs_err
    );
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    println!(
        "PASS conv view: 100 cases incl. windows longer than the utterance, max |err| {:.3e} (tol {EXACT_TOL:.0e}), {elapsed:?}",
        report.max_abs_err
    );
}

#[test]
fn training_loss_gradients_match_central_differences() {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for margin_type in [MarginType::AdditiveAngular, MarginType::Additive] {
        let report = run_verification(0.2, 32.0, margin_type, 671).unwrap();
        assert_eq!(report.parameters, 111);
        assert!(
            report.passed(),
            "{margin_type:?} gradients disagree:\n{}",
            report.render()
        );
        worst = worst.max(report.max_rel_err);
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    println!(
        "PASS gradients: 111 parameters x 2 margin types, step {FD_STEP:.0e}, worst rel err {worst:.3e} (tol {GRAD_TOL:.0e}), {elapsed:?}"
    );
}

#[test]
fn normalizations_hold_across_the_random_family() {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(905);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (params, features) = random_instance(&mut rng, &[1, 3, 5]);
        let keys = params.keys(&features).unwrap();
        let attention = params.attention_weights(&keys);
        let frames = features.frames();
        for g in 0..params.dims.groups {
            let row: f64 = (0..frames).map(|t| attention.at(g, t)).sum();
            worst = worst.max((row - 1.0).abs());
            assert!((0..frames).all(|t| attention.at(g, t) > 0.0));
        }
        let embedding = params.extract(&features).unwrap();
        worst = worst.max((embedding.l2_norm() - 1.0).abs());
        for weights in [params.key_layer_weights(), params.value_layer_weights()] {
            assert!(weights.data().iter().all(|w| *w > 0.0));
            worst = worst.max((weights.data().iter().sum::<f64>() - 1.0).abs());
        }
    }
    assert!(worst <= EXACT_TOL, "worst deviation {worst:.3e}");
    let elapsed = started.elapsed();
    println!(
        "PASS normalizations: 100 instances, attention rows / embedding norms / layer weights all within {worst:.3e} of 1 (tol {EXACT_TOL:.0e}), {elapsed:?}"
    );
}

fn held_out_eer(config: &TrainConfig) -> (f64, f64) {
    let (ckpt, log) = train(&generate(&SynthSpec::default()).unwrap(), config).unwrap();
    let best_accuracy = log
        .epochs
        .iter()
        .map(|e| e.accuracy)
        .fold(f64::NEG_INFINITY, f64::max);

    let held_out = generate(&SynthSpec {
        first_utt: 30,
        utts_per_speaker: 10,
        ..SynthSpec::default()
    })
    .unwrap();
    let embeddings: Vec<(u32, Tensor)> = held_out
        .utterances
        .iter()
        .map(|u| (u.speaker, ckpt.pooler.extract(&u.features).unwrap()))
        .collect();
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let score = cosine_score(&embeddings[i].1, &embeddings[j].1).unwrap();
            if embeddings[i].0 == embeddings[j].0 {
                targets.push(score);
            } else {
                nontargets.push(score);
            }
        }
    }
    (best_accuracy, compute_eer(&targets, &nontargets).unwrap())
}

#[test]
fn synthetic_training_reaches_the_accuracy_and_eer_gates() {
    let started = Instant::now();
    let config = TrainConfig::default();
    assert_eq!(
        (config.groups, config.context, config.head_dim, config.embed_dim),
        (8, 3, 16, 32)
    );
    assert_eq!((config.margin, config.scale), (0.2, 32.0));
    assert!(config.epochs <= 50);

    let (accuracy, eer_context) = held_out_eer(&config);
    let (_, eer_window_one) = held_out_eer(&TrainConfig {
        context: 1,
        ..config.clone()
    });
    let elapsed = started.elapsed();

    assert!(
        accuracy >= 0.95,
        "training accuracy peaked at {accuracy:.4}, below the 0.95 gate"
    );
    assert!(
        eer_context <= 0.05,
        "held-out EER {eer_context:.4} above the 0.05 gate"
    );
    assert!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    println!(
        "PASS learning gate: train acc {accuracy:.4} (>= 0.95), held-out EER {:.4}% with context 3 (<= 5%), {elapsed:?}",
        100.0 * eer_context
    );
    // Reported, not gated: the same pipeline without temporal context.
    println!(
        "INFO context benefit: EER {:.4}% (context 3) vs {:.4}% (context 1), delta {:+.4} points on the modulated synthetic set",
        100.0 * eer_context,
        100.0 * eer_window_one,
        100.0 * (eer_window_one - eer_context)
    );
}

#[test]
fn eer_agrees_with_counting_and_ignores_monotone_rescoring() {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(906);
    let mut worst_gap: f64 = 0.0;
    for case in 0..1000 {
        let n_targets = rng.gen_range(1..=60);
        let n_nontargets = rng.gen_range(1..=(100 - n_targets.min(99)));
        let quantize = case % 3 == 0;
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let v: f64 = rng.gen_range(-1.0..1.0);
                    // Every third set lands on a coarse grid to force ties.
                    if quantize {
                        (v * 5.0).round() / 5.0
                    } else {
                        v
                    }
                })
                .collect()
        };
        let targets = draw(n_targets);
        let nontargets = draw(n_nontargets);
        let eer = compute_eer(&targets, &nontargets).unwrap();
        let counted = compute_eer_by_counting(&targets, &nontargets).unwrap();
        worst_gap = worst_gap.max((eer - counted).abs());

        let stretch = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|x| f(*x)).collect::<Vec<_>>();
        for f in [
            &(|x: f64| x.exp()) as &dyn Fn(f64) -> f64,
            &|x: f64| 3.5 * x + 1.25,
        ] {
            let transformed =
                compute_eer(&stretch(&targets, f), &stretch(&nontargets, f)).unwrap();
            worst_gap = worst_gap.max((eer - transformed).abs());
        }
    }
    assert!(worst_gap <= EXACT_TOL, "worst gap {worst_gap:.3e}");
    let elapsed = started.elapsed();
    println!(
        "PASS error-rate oracle: 1000 score sets vs exhaustive counting + exp/affine rescoring, worst gap {worst_gap:.3e} (tol {EXACT_TOL:.0e}), {elapsed:?}"
    );
}

#[test]
fn score_normalization_is_affine_invariant_and_matches_the_full_cohort_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(907);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let k = rng.gen_range(2..=40);
        let draw = |rng: &mut ChaCha20Rng| -> Vec<f64> {
            (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let enroll = draw(&mut rng);
        let test = draw(&mut rng);
        let raw: f64 = rng.gen_range(-1.0..1.0);
        let top_k = rng.gen_range(2..=k);
        let normalized = snorm_score(raw, &enroll, &test, top_k).unwrap();

        // A tight cohort (tiny sigma) legitimately produces huge normalized
        // scores, where ulp-level rounding exceeds any absolute bound; the
        // deviation is therefore taken relative to the output's own scale
        // once that scale passes 1.
        let gap = |x: f64, y: f64| (x - y).abs() / x.abs().max(1.0);

        let (a, b) = (rng.gen_range(0.1..3.0), rng.gen_range(-2.0..2.0));
        let shift = |v: &[f64]| v.iter().map(|x| a * x + b).collect::<Vec<_>>();
        let shifted = snorm_score(a * raw + b, &shift(&enroll), &shift(&test), top_k).unwrap();
        worst = worst.max(gap(normalized, shifted));

        // With the whole cohort kept, the adaptive rule must agree with a
        // plainly-written symmetric standardization.
        let standardize = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
            (raw - mean) / var.sqrt()
        };
        let plain = 0.5 * (standardize(&enroll) + standardize(&test));
        let full = snorm_score(raw, &enroll, &test, k).unwrap();
        worst = worst.max(gap(full, plain));
    }
    assert!(worst <= EXACT_TOL, "worst deviation {worst:.3e}");
    let elapsed = started.elapsed();
    println!(
        "PASS score normalization: 200 cohorts, affine invariance + full-cohort oracle within {worst:.3e} (tol {EXACT_TOL:.0e}), {elapsed:?}"
    );
}

#[test]
fn seeded_runs_and_file_formats_are_byte_exact() {
    let started = Instant::now();
    let spec = SynthSpec {
        speakers: 4,
        utts_per_speaker: 3,
        frames: 12,
        feature_dim: 6,
        hidden_layers: 2,
        snr: vec![2.0, 1.2, 0.6],
        ..SynthSpec::default()
    };
    let corpus = generate(&spec).unwrap();
    assert_eq!(generate(&spec).unwrap(), corpus);
    let feature_bytes = encode_features(&corpus);
    assert_eq!(encode_features(&generate(&spec).unwrap()), feature_bytes);
    let decoded = decode_features(&feature_bytes).unwrap();
    assert_eq!(decoded, corpus);
    assert_eq!(encode_features(&decoded), feature_bytes);

    let config = TrainConfig {
        groups: 2,
        context: 3,
        head_dim: 4,
        embed_dim: 6,
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let (ckpt_a, log_a) = train(&corpus, &config).unwrap();
    let (ckpt_b, log_b) = train(&corpus, &config).unwrap();
    let checkpoint_bytes = encode_checkpoint(&ckpt_a);
    assert_eq!(encode_checkpoint(&ckpt_b), checkpoint_bytes);
    assert_eq!(log_a.render(), log_b.render());
    for (a, b) in log_a.epochs.iter().zip(log_b.epochs.iter()) {
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
        assert_eq!(a.lr.to_bits(), b.lr.to_bits());
    }
    let reloaded = decode_checkpoint(&checkpoint_bytes).unwrap();
    assert_eq!(reloaded, ckpt_a);
    assert_eq!(encode_checkpoint(&reloaded), checkpoint_bytes);

    // Embedding text files round-trip through parse exactly as well.
    let mut embeddings = BTreeMap::new();
    for u in corpus.utterances.iter().take(4) {
        embeddings.insert(u.id.clone(), ckpt_a.pooler.extract(&u.features).unwrap());
    }
    let text = camhfa::eval::format_embeddings(&embeddings);
    let parsed = camhfa::eval::parse_embeddings(&text).unwrap();
    assert_eq!(parsed, embeddings);

    let elapsed = started.elapsed();
    println!(
        "PASS determinism: dataset, checkpoint, log, and embedding text all byte-exact across reruns and round-trips, {elapsed:?}"
    );
}
