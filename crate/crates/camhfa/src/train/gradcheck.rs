//! End-to-end gradient verification for the training loss.
//!
//! The analytic gradients come from one reverse pass over a recorded batch.
//! The oracle is a central difference of a plainly-written forward pass
//! (extractor call, explicit cosine loop, standalone loss function) that
//! shares no code with the tape, so a bug on either side shows up as a
//! disagreement.

use super::checkpoint::Checkpoint;
use super::graph::BatchGraph;
use crate::error::{Error, Result};
use crate::loss::{margin_softmax_loss, MarginType};
use crate::pooling::{FeatureStack, PoolerDims, PoolerParams};
use crate::tensor::{finite_difference_gradient, max_relative_error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Central-difference step for all gradient checks.
pub const FD_STEP: f64 = 1e-6;
/// Largest acceptable relative disagreement per parameter element.
pub const GRAD_TOL: f64 = 1e-5;

/// Fixture seed for the pinned-size verification. The central-difference
/// oracle has a noise floor around `ulp(loss) / (2 * FD_STEP)`, so a
/// parameter element whose true gradient sits near that floor (a
/// suppressed softmax probability at scale 32, or sign cancellation) reads
/// as a large relative error even when the analytic gradient is right.
/// This seed's geometry keeps all 111 element gradients far above the
/// floor for both margin types at the default margin and scale: worst
/// relative error 2.3e-8, about 400x inside the tolerance. Re-pick with
/// the `fixture_seed_survey` test if the model or fixture shapes change.
pub const VERIFICATION_SEED: u64 = 671;

/// Outcome of one analytic-vs-numeric comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Total parameter elements compared.
    pub parameters: usize,
    /// Worst relative disagreement across all elements.
    pub max_rel_err: f64,
    /// |tape loss − plain loss| at the unperturbed point.
    pub forward_gap: f64,
    /// Worst relative disagreement per parameter tensor, in checkpoint order.
    pub per_tensor: Vec<(&'static str, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRAD_TOL && self.forward_gap <= 1e-12
    }

    /// One line per tensor plus a summary, for terminal output.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, err) in &self.per_tensor {
            out.push_str(&format!("{name:18} max rel err {err:.3e}\n"));
        }
        out.push_str(&format!(
            "{} parameters, forward gap {:.3e}, worst rel err {:.3e} (tolerance {:.1e}): {}\n",
            self.parameters,
            self.forward_gap,
            self.max_rel_err,
            GRAD_TOL,
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// Batch loss computed without the tape: extractor forward, explicit cosine
/// loop against row-normalized class weights, standalone loss.
pub fn pure_batch_loss(ckpt: &Checkpoint, batch: &[(&FeatureStack, usize)]) -> Result<f64> {
    let classes = ckpt.num_classes();
    let embed = ckpt.pooler.dims.embed_dim;
    let w = ckpt.class_weights.data();
    let mut class_unit = vec![0.0; classes * embed];
    for c in 0..classes {
        let row = &w[c * embed..(c + 1) * embed];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateEmbedding);
        }
        for (dst, v) in class_unit[c * embed..(c + 1) * embed].iter_mut().zip(row) {
            *dst = v / norm;
        }
    }
    let mut cosines = Vec::with_capacity(batch.len() * classes);
    let mut labels = Vec::with_capacity(batch.len());
    for (stack, label) in batch {
        let emb = ckpt.pooler.extract(stack)?;
        for c in 0..classes {
            let mut dot = 0.0;
            for e in 0..embed {
                dot += emb.data()[e] * class_unit[c * embed + e];
            }
            cosines.push(dot);
        }
        labels.push(*label);
    }
    let cosines = Tensor::new(vec![batch.len(), classes], cosines)?;
    margin_softmax_loss(
        &cosines,
        &labels,
        ckpt.margin,
        ckpt.scale,
        ckpt.margin_type,
    )
}

fn flatten_params(ckpt: &Checkpoint) -> Vec<f64> {
    let mut flat = Vec::new();
    for (_, tensor) in ckpt.param_views() {
        flat.extend_from_slice(tensor.data());
    }
    flat
}

fn write_params(ckpt: &mut Checkpoint, flat: &[f64]) {
    let mut at = 0;
    for (_, tensor) in ckpt.param_views_mut() {
        let n = tensor.data().len();
        tensor.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
    assert_eq!(at, flat.len(), "flat parameter vector length mismatch");
}

/// Compare the reverse-pass gradient of every parameter element against a
/// central difference of the plain forward path.
pub fn check_gradients(
    ckpt: &Checkpoint,
    batch: &[(&FeatureStack, usize)],
    step: f64,
) -> Result<GradCheckReport> {
    let mut graph = BatchGraph::build(ckpt, batch);
    let forward_gap = (graph.loss_value() - pure_batch_loss(ckpt, batch)?).abs();
    graph.backward()?;
    let analytic_tensors = graph.param_grads();

    let x0 = flatten_params(ckpt);
    let mut probe = ckpt.clone();
    let mut f = |x: &[f64]| {
        write_params(&mut probe, x);
        pure_batch_loss(&probe, batch).expect("perturbed forward stays well-defined")
    };
    let numeric = finite_difference_gradient(&mut f, &x0, step);

    let mut per_tensor = Vec::with_capacity(8);
    let mut at = 0;
    let mut max_rel_err: f64 = 0.0;
    for ((name, _), grad) in ckpt.param_views().iter().zip(analytic_tensors.iter()) {
        let n = grad.data().len();
        let err = max_relative_error(grad.data(), &numeric[at..at + n]);
        per_tensor.push((*name, err));
        max_rel_err = max_rel_err.max(err);
        at += n;
    }
    assert_eq!(at, numeric.len());
    Ok(GradCheckReport {
        parameters: numeric.len(),
        max_rel_err,
        forward_gap,
        per_tensor,
    })
}

/// Fixture at the pinned verification sizes: three hidden layers plus the
/// input (stack of 4), 7 frames, 5 features, head dim 4, 2 groups, context
/// 3, embedding dim 3, 4 classes, batch of 2.
pub fn verification_fixture(
    margin: f64,
    scale: f64,
    margin_type: MarginType,
    seed: u64,
) -> (Checkpoint, Vec<FeatureStack>, Vec<usize>) {
    let dims = PoolerDims {
        layers: 4,
        feature_dim: 5,
        head_dim: 4,
        groups: 2,
        context: 3,
        embed_dim: 3,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let ckpt = Checkpoint {
        pooler: PoolerParams::init(dims, seed).expect("pinned dims are valid"),
        class_weights: Tensor::from_fn(vec![4, dims.embed_dim], |_| rng.gen_range(-0.5..0.5)),
        margin,
        scale,
        margin_type,
    };
    let stacks = (0..2)
        .map(|_| {
            FeatureStack::new(Tensor::from_fn(
                vec![dims.layers, 7, dims.feature_dim],
                |_| rng.gen_range(-1.0..1.0),
            ))
            .expect("stack shape is 3-D")
        })
        .collect();
    (ckpt, stacks, vec![1, 3])
}

/// The full check at the pinned sizes and the given loss settings.
pub fn run_verification(
    margin: f64,
    scale: f64,
    margin_type: MarginType,
    seed: u64,
) -> Result<GradCheckReport> {
    let (ckpt, stacks, labels) = verification_fixture(margin, scale, margin_type, seed);
    let batch: Vec<(&FeatureStack, usize)> =
        stacks.iter().zip(labels.iter().copied()).collect();
    check_gradients(&ckpt, &batch, FD_STEP)
}
