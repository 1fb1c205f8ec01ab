//! Degeneration and convolution-view checks.
//!
//! Three parameter regimes collapse the context mechanism onto simpler
//! poolers, and the windowed scores admit an independent formulation as a
//! valid convolution over zero-padded keys. Everything here recomputes the
//! simpler pooler with plain loops (including its own softmax, without max
//! subtraction) so the main path is checked against genuinely separate
//! code, not against itself.

use super::{FeatureStack, PoolerDims, PoolerParams};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Outcome of a multi-instance comparison sweep.
#[derive(Debug, Clone, Copy)]
pub struct EquivalenceReport {
    pub cases: usize,
    pub max_abs_err: f64,
}

impl EquivalenceReport {
    fn absorb(&mut self, err: f64) {
        self.cases += 1;
        self.max_abs_err = self.max_abs_err.max(err);
    }
}

fn ref_softmax(xs: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Collapse and project one utterance with explicit loops: `[T][D]`.
fn ref_frame_vectors(
    features: &FeatureStack,
    layer_logits: &Tensor,
    projection: &Tensor,
) -> Vec<Vec<f64>> {
    let weights = ref_softmax(layer_logits.data());
    let (frames, f_dim, d_dim) = (
        features.frames(),
        features.feature_dim(),
        projection.cols(),
    );
    (0..frames)
        .map(|t| {
            (0..d_dim)
                .map(|d| {
                    let mut sum = 0.0;
                    for f in 0..f_dim {
                        let mut mixed = 0.0;
                        for (s, w) in weights.iter().enumerate() {
                            mixed += w * features.at(s, t, f);
                        }
                        sum += mixed * projection.at(f, d);
                    }
                    sum
                })
                .collect()
        })
        .collect()
}

/// Embedding from precomputed attention `[G][T]`, all plain loops.
fn ref_embedding(params: &PoolerParams, features: &FeatureStack, attention: &[Vec<f64>]) -> Vec<f64> {
    let values = ref_frame_vectors(features, &params.value_layer_logits, &params.value_projection);
    let d = &params.dims;
    let mut concat = vec![0.0; d.groups * d.head_dim];
    for g in 0..d.groups {
        for di in 0..d.head_dim {
            let mut sum = 0.0;
            for (t, value) in values.iter().enumerate() {
                sum += attention[g][t] * value[di];
            }
            concat[g * d.head_dim + di] = sum;
        }
    }
    let mut out = vec![0.0; d.embed_dim];
    for (e, slot) in out.iter_mut().enumerate() {
        let mut sum = params.out_bias.data()[e];
        for (i, c) in concat.iter().enumerate() {
            sum += c * params.out_weight.at(i, e);
        }
        *slot = sum;
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    out.into_iter().map(|v| v / norm).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// With a context window of one, each group is a plain attention head:
/// its single query scores every key directly. Returns the worst
/// disagreement between the windowed path and that head, over attention
/// weights and the final embedding.
pub fn compare_window_one(params: &PoolerParams, features: &FeatureStack) -> f64 {
    assert_eq!(params.dims.context, 1, "degeneration requires context = 1");
    let keys = ref_frame_vectors(features, &params.key_layer_logits, &params.key_projection);
    let d = &params.dims;
    let mut attention = Vec::with_capacity(d.groups);
    for g in 0..d.groups {
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| {
                (0..d.head_dim)
                    .map(|c| params.queries.at(g, c) * k[c])
                    .sum()
            })
            .collect();
        attention.push(ref_softmax(&scores));
    }

    let lib_attention = params.attention_weights(&params.keys(features).unwrap());
    let mut err: f64 = 0.0;
    for (g, row) in attention.iter().enumerate() {
        for (t, want) in row.iter().enumerate() {
            err = err.max((lib_attention.at(g, t) - want).abs());
        }
    }
    let want_embedding = ref_embedding(params, features, &attention);
    let got_embedding = params.extract(features).unwrap();
    err.max(max_abs_diff(got_embedding.data(), &want_embedding))
}

/// With all-zero queries every frame scores identically, so attention must
/// be exactly uniform and pooling must reduce to the frame mean of the
/// values. Works for any window length.
pub fn compare_mean_pool(params: &PoolerParams, features: &FeatureStack) -> f64 {
    assert!(
        params.queries.data().iter().all(|q| *q == 0.0),
        "degeneration requires zero queries"
    );
    let d = &params.dims;
    let frames = features.frames();
    let uniform = 1.0 / frames as f64;
    let lib_attention = params.attention_weights(&params.keys(features).unwrap());
    let mut err: f64 = 0.0;
    for a in lib_attention.data() {
        err = err.max((a - uniform).abs());
    }

    // Reference mean: sum first, divide once.
    let values = ref_frame_vectors(features, &params.value_layer_logits, &params.value_projection);
    let mean: Vec<f64> = (0..d.head_dim)
        .map(|c| values.iter().map(|v| v[c]).sum::<f64>() / frames as f64)
        .collect();
    let lib_values = params.values(features).unwrap();
    let pooled = params.pool(&lib_attention, &lib_values).unwrap();
    for g in 0..d.groups {
        for c in 0..d.head_dim {
            err = err.max((pooled.at(g, c) - mean[c]).abs());
        }
    }

    let attention = vec![vec![uniform; frames]; d.groups];
    let want_embedding = ref_embedding(params, features, &attention);
    let got_embedding = params.extract(features).unwrap();
    err.max(max_abs_diff(got_embedding.data(), &want_embedding))
}

/// A single group with a window of one is self-attentive pooling: softmax
/// over the key/query dot products.
pub fn compare_self_attention(params: &PoolerParams, features: &FeatureStack) -> f64 {
    assert_eq!(params.dims.groups, 1, "degeneration requires one group");
    assert_eq!(params.dims.context, 1, "degeneration requires context = 1");
    let keys = ref_frame_vectors(features, &params.key_layer_logits, &params.key_projection);
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| {
            (0..params.dims.head_dim)
                .map(|c| k[c] * params.queries.at(0, c))
                .sum()
        })
        .collect();
    let attention = ref_softmax(&scores);

    let lib_attention = params.attention_weights(&params.keys(features).unwrap());
    let mut err = max_abs_diff(lib_attention.data(), &attention);
    let want_embedding = ref_embedding(params, features, &[attention]);
    let got_embedding = params.extract(features).unwrap();
    err = err.max(max_abs_diff(got_embedding.data(), &want_embedding));
    err
}

/// Windowed scores computed directly versus via zero-padded valid
/// convolution, compared both raw and after the softmax.
pub fn compare_conv(params: &PoolerParams, features: &FeatureStack) -> f64 {
    let keys = params.keys(features).unwrap();
    let direct = params.attention_scores(&keys);
    let conv = params.attention_scores_conv(&keys);
    let mut err = max_abs_diff(direct.data(), conv.data());
    err = err.max(max_abs_diff(
        direct.softmax(1).data(),
        conv.softmax(1).data(),
    ));
    err
}

fn sample_dims(rng: &mut ChaCha20Rng, contexts: &[usize], groups: Option<usize>) -> PoolerDims {
    PoolerDims {
        layers: rng.gen_range(1..=5),
        feature_dim: rng.gen_range(2..=8),
        head_dim: rng.gen_range(2..=6),
        groups: groups.unwrap_or_else(|| rng.gen_range(1..=4)),
        context: contexts[rng.gen_range(0..contexts.len())],
        embed_dim: rng.gen_range(2..=6),
    }
}

fn sample_features(rng: &mut ChaCha20Rng, dims: &PoolerDims, frames: usize) -> FeatureStack {
    let shape = vec![dims.layers, frames, dims.feature_dim];
    FeatureStack::new(Tensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5))).unwrap()
}

/// Sweep seeded random instances through [`compare_window_one`].
pub fn window_one_suite(count: usize, seed: u64) -> EquivalenceReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut report = EquivalenceReport { cases: 0, max_abs_err: 0.0 };
    for i in 0..count {
        let dims = sample_dims(&mut rng, &[1], None);
        let frames = rng.gen_range(1..=16);
        let params = PoolerParams::init(dims, seed ^ (i as u64) << 16).unwrap();
        let features = sample_features(&mut rng, &dims, frames);
        report.absorb(compare_window_one(&params, &features));
    }
    report
}

/// Sweep seeded random instances through [`compare_mean_pool`].
pub fn mean_pool_suite(count: usize, seed: u64) -> EquivalenceReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut report = EquivalenceReport { cases: 0, max_abs_err: 0.0 };
    for i in 0..count {
        let dims = sample_dims(&mut rng, &[1, 3, 5], None);
        let frames = rng.gen_range(1..=16);
        let mut params = PoolerParams::init(dims, seed ^ (i as u64) << 16).unwrap();
        params.queries = Tensor::zeros(vec![dims.groups * dims.context, dims.head_dim]);
        let features = sample_features(&mut rng, &dims, frames);
        report.absorb(compare_mean_pool(&params, &features));
    }
    report
}

/// Sweep seeded random instances through [`compare_self_attention`].
pub fn self_attention_suite(count: usize, seed: u64) -> EquivalenceReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut report = EquivalenceReport { cases: 0, max_abs_err: 0.0 };
    for i in 0..count {
        let dims = sample_dims(&mut rng, &[1], Some(1));
        let frames = rng.gen_range(1..=16);
        let params = PoolerParams::init(dims, seed ^ (i as u64) << 16).unwrap();
        let features = sample_features(&mut rng, &dims, frames);
        report.absorb(compare_self_attention(&params, &features));
    }
    report
}

/// Sweep [`compare_conv`] over random instances plus pinned cases where the
/// window is longer than the utterance.
pub fn conv_suite(count: usize, seed: u64) -> EquivalenceReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut report = EquivalenceReport { cases: 0, max_abs_err: 0.0 };
    let short_cases = [(1usize, 3usize), (2, 5), (3, 9), (5, 17), (16, 17)];
    for (i, &(frames, context)) in short_cases.iter().enumerate() {
        let mut dims = sample_dims(&mut rng, &[context], None);
        dims.context = context;
        let params = PoolerParams::init(dims, seed ^ 0x5000 ^ i as u64).unwrap();
        let features = sample_features(&mut rng, &dims, frames);
        report.absorb(compare_conv(&params, &features));
    }
    for i in 0..count.saturating_sub(short_cases.len()) {
        let dims = sample_dims(&mut rng, &[1, 3, 5, 9, 17], None);
        let frames = rng.gen_range(1..=16);
        let params = PoolerParams::init(dims, seed ^ (i as u64) << 16).unwrap();
        let features = sample_features(&mut rng, &dims, frames);
        report.absorb(compare_conv(&params, &features));
    }
    report
}
