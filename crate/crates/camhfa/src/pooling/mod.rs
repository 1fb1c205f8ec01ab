//! Context-aware grouped attentive pooling over a layer-wise feature stack.
//!
//! Keys and values are built from two independently weighted sums of the
//! same `[S, T, F]` stack, projected to `[T, D]`. Each of `G` head groups
//! owns `L` queries (`L` odd); a frame's score for a group averages the
//! dot products of those queries against a window of `L` consecutive keys
//! centered on the frame, with positions outside the utterance reading as
//! zero vectors. Scores are softmaxed over frames per group, values are
//! pooled under those weights, and the concatenated group outputs map
//! through a linear head to a unit-norm embedding.

pub mod equivalence;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Stack of frame-level feature layers, shape `[S, T, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack(Tensor);

impl FeatureStack {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.shape().len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "FeatureStack::new",
                lhs: tensor.shape().to_vec(),
                rhs: vec![0, 0, 0],
            });
        }
        Ok(FeatureStack(tensor))
    }

    pub fn layers(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn at(&self, layer: usize, frame: usize, feature: usize) -> f64 {
        let (t, f) = (self.frames(), self.feature_dim());
        self.0.data()[layer * t * f + frame * f + feature]
    }
}

/// Model sizes. `layers` counts every entry in the stack (hidden layers
/// plus the input features); `context` is the per-group query count `L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolerDims {
    pub layers: usize,
    pub feature_dim: usize,
    pub head_dim: usize,
    pub groups: usize,
    pub context: usize,
    pub embed_dim: usize,
}

impl PoolerDims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("layers", self.layers),
            ("feature_dim", self.feature_dim),
            ("head_dim", self.head_dim),
            ("groups", self.groups),
            ("context", self.context),
            ("embed_dim", self.embed_dim),
        ];
        for (name, value) in all {
            if value == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.context % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "context must be odd so windows center on a frame, got {}",
                self.context
            )));
        }
        Ok(())
    }

    /// Half-width of the context window.
    pub fn reach(&self) -> usize {
        (self.context - 1) / 2
    }
}

/// All learnable state of the pooling extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolerParams {
    pub dims: PoolerDims,
    /// Pre-softmax layer mixing weights for keys, `[S]`.
    pub key_layer_logits: Tensor,
    /// Pre-softmax layer mixing weights for values, `[S]`.
    pub value_layer_logits: Tensor,
    /// Key compressor, `[F, D]`, no bias.
    pub key_projection: Tensor,
    /// Value compressor, `[F, D]`, no bias.
    pub value_projection: Tensor,
    /// Group queries, `[G * L, D]`; group g's j-th query is row `g * L + j`.
    pub queries: Tensor,
    /// Output head weight, `[G * D, E]`.
    pub out_weight: Tensor,
    /// Output head bias, `[E]`.
    pub out_bias: Tensor,
}

impl PoolerParams {
    /// Fresh parameters: zero layer logits (uniform mixing), zero output
    /// bias, everything else uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(dims: PoolerDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut uniform = |shape: Vec<usize>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
        };
        let key_projection = uniform(vec![dims.feature_dim, dims.head_dim], dims.feature_dim);
        let value_projection = uniform(vec![dims.feature_dim, dims.head_dim], dims.feature_dim);
        let queries = uniform(vec![dims.groups * dims.context, dims.head_dim], dims.head_dim);
        let out_weight = uniform(
            vec![dims.groups * dims.head_dim, dims.embed_dim],
            dims.groups * dims.head_dim,
        );
        Ok(PoolerParams {
            dims,
            key_layer_logits: Tensor::zeros(vec![dims.layers]),
            value_layer_logits: Tensor::zeros(vec![dims.layers]),
            key_projection,
            value_projection,
            queries,
            out_weight,
            out_bias: Tensor::zeros(vec![dims.embed_dim]),
        })
    }

    /// Check every tensor against `dims` (for state loaded from disk).
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let d = &self.dims;
        let expect: [(&Tensor, Vec<usize>); 7] = [
            (&self.key_layer_logits, vec![d.layers]),
            (&self.value_layer_logits, vec![d.layers]),
            (&self.key_projection, vec![d.feature_dim, d.head_dim]),
            (&self.value_projection, vec![d.feature_dim, d.head_dim]),
            (&self.queries, vec![d.groups * d.context, d.head_dim]),
            (&self.out_weight, vec![d.groups * d.head_dim, d.embed_dim]),
            (&self.out_bias, vec![d.embed_dim]),
        ];
        for (tensor, shape) in expect {
            if tensor.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "PoolerParams::validate",
                    lhs: tensor.shape().to_vec(),
                    rhs: shape,
                });
            }
        }
        Ok(())
    }

    pub fn key_layer_weights(&self) -> Tensor {
        self.key_layer_logits.softmax(0)
    }

    pub fn value_layer_weights(&self) -> Tensor {
        self.value_layer_logits.softmax(0)
    }

    fn check_features(&self, features: &FeatureStack) -> Result<()> {
        if features.layers() != self.dims.layers || features.feature_dim() != self.dims.feature_dim
        {
            return Err(Error::ShapeMismatch {
                op: "PoolerParams features",
                lhs: features.tensor().shape().to_vec(),
                rhs: vec![self.dims.layers, features.frames(), self.dims.feature_dim],
            });
        }
        Ok(())
    }

    /// Key sequence `[T, D]`.
    pub fn keys(&self, features: &FeatureStack) -> Result<Tensor> {
        self.check_features(features)?;
        collapse_layers(features, &self.key_layer_weights()).matmul(&self.key_projection)
    }

    /// Value sequence `[T, D]`.
    pub fn values(&self, features: &FeatureStack) -> Result<Tensor> {
        self.check_features(features)?;
        collapse_layers(features, &self.value_layer_weights()).matmul(&self.value_projection)
    }

    /// Raw attention scores `[G, T]` via the sliding-window definition.
    pub fn attention_scores(&self, keys: &Tensor) -> Tensor {
        let (frames, d) = (keys.rows(), keys.cols());
        assert_eq!(d, self.dims.head_dim, "key width must be head_dim");
        let (groups, context) = (self.dims.groups, self.dims.context);
        let reach = self.dims.reach() as isize;
        let inv_l = 1.0 / context as f64;
        let q = self.queries.data();
        let k = keys.data();
        let mut scores = Tensor::zeros(vec![groups, frames]);
        for g in 0..groups {
            for t in 0..frames {
                let mut sum = 0.0;
                for j in 0..context {
                    let pos = t as isize + j as isize - reach;
                    if pos < 0 || pos >= frames as isize {
                        continue;
                    }
                    let key_row = pos as usize * d;
                    let query_row = (g * context + j) * d;
                    for c in 0..d {
                        sum += q[query_row + c] * k[key_row + c];
                    }
                }
                scores.data_mut()[g * frames + t] = inv_l * sum;
            }
        }
        scores
    }

    /// Raw attention scores `[G, T]` via zero-padded valid convolution:
    /// the keys are padded with `reach` zero rows on both ends and each
    /// group's `[L, D]` query block slides over them as a kernel.
    pub fn attention_scores_conv(&self, keys: &Tensor) -> Tensor {
        let (frames, d) = (keys.rows(), keys.cols());
        assert_eq!(d, self.dims.head_dim, "key width must be head_dim");
        let (groups, context) = (self.dims.groups, self.dims.context);
        let reach = self.dims.reach();
        let inv_l = 1.0 / context as f64;

        let mut padded = Tensor::zeros(vec![frames + 2 * reach, d]);
        padded.data_mut()[reach * d..(reach + frames) * d].copy_from_slice(keys.data());

        let mut scores = Tensor::zeros(vec![groups, frames]);
        for g in 0..groups {
            let kernel = Tensor::new(
                vec![context, d],
                self.queries.data()[g * context * d..(g + 1) * context * d].to_vec(),
            )
            .expect("query block is [L, D]");
            let column = conv2d_valid(&padded, &kernel);
            assert_eq!(column.shape(), &[frames, 1]);
            for t in 0..frames {
                scores.data_mut()[g * frames + t] = inv_l * column.data()[t];
            }
        }
        scores
    }

    /// Attention weights `[G, T]`: scores softmaxed over frames per group.
    pub fn attention_weights(&self, keys: &Tensor) -> Tensor {
        self.attention_scores(keys).softmax(1)
    }

    /// Pooled group outputs `[G, D]`.
    pub fn pool(&self, attention: &Tensor, values: &Tensor) -> Result<Tensor> {
        attention.matmul(values)
    }

    /// Unit-norm embedding `[E]` for one utterance.
    pub fn extract(&self, features: &FeatureStack) -> Result<Tensor> {
        let keys = self.keys(features)?;
        let values = self.values(features)?;
        let attention = self.attention_weights(&keys);
        let pooled = self.pool(&attention, &values)?;
        let flat = Tensor::new(
            vec![1, self.dims.groups * self.dims.head_dim],
            pooled.data().to_vec(),
        )?;
        let projected = flat.matmul(&self.out_weight)?;
        let mut embedding = Tensor::zeros(vec![self.dims.embed_dim]);
        for (i, v) in embedding.data_mut().iter_mut().enumerate() {
            *v = projected.data()[i] + self.out_bias.data()[i];
        }
        let norm = embedding.l2_norm();
        if norm == 0.0 {
            return Err(Error::DegenerateEmbedding);
        }
        Ok(embedding.scale(1.0 / norm))
    }
}

/// Weighted sum of a `[S, T, F]` stack down to `[T, F]`.
pub fn collapse_layers(features: &FeatureStack, weights: &Tensor) -> Tensor {
    assert_eq!(weights.shape(), &[features.layers()], "one weight per layer");
    let plane = features.frames() * features.feature_dim();
    let mut out = Tensor::zeros(vec![features.frames(), features.feature_dim()]);
    for layer in 0..features.layers() {
        let w = weights.data()[layer];
        let base = layer * plane;
        for i in 0..plane {
            out.data_mut()[i] += w * features.tensor().data()[base + i];
        }
    }
    out
}

/// Valid-mode 2-D sliding dot product of `kernel` over `input`.
pub(crate) fn conv2d_valid(input: &Tensor, kernel: &Tensor) -> Tensor {
    let (h, w) = (input.rows(), input.cols());
    let (kh, kw) = (kernel.rows(), kernel.cols());
    assert!(kh <= h && kw <= w, "kernel {kh}x{kw} exceeds input {h}x{w}");
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = Tensor::zeros(vec![oh, ow]);
    for i in 0..oh {
        for j in 0..ow {
            let mut sum = 0.0;
            for a in 0..kh {
                for b in 0..kw {
                    sum += kernel.at(a, b) * input.at(i + a, j + b);
                }
            }
            out.data_mut()[i * ow + j] = sum;
        }
    }
    out
}
