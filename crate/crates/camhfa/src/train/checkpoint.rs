//! Versioned binary checkpoint for the extractor and its classifier head.
//!
//! Layout, all little-endian: magic `CMCK`, format version u32, a dims
//! block of seven u32 (hidden layers N, feature dim F, head dim D, groups
//! G, context L, embedding dim E, classes C), margin f64, scale f64,
//! margin type u32 (0 angular, 1 additive), then the parameter tensors as
//! raw f64 in fixed order: key layer logits, value layer logits, key
//! projection, value projection, queries, output weight, output bias,
//! class weights.

use crate::error::{Error, Result};
use crate::loss::MarginType;
use crate::pooling::{PoolerDims, PoolerParams};
use crate::synth::ByteReader;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CMCK";
const VERSION: u32 = 1;

/// Trainable state plus the loss settings it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub pooler: PoolerParams,
    /// Classifier weights `[C, E]`; rows are normalized at use time.
    pub class_weights: Tensor,
    pub margin: f64,
    pub scale: f64,
    pub margin_type: MarginType,
}

impl Checkpoint {
    pub fn num_classes(&self) -> usize {
        self.class_weights.shape()[0]
    }

    /// Parameter tensors in checkpoint order.
    pub fn param_views(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("key_layer_logits", &self.pooler.key_layer_logits),
            ("value_layer_logits", &self.pooler.value_layer_logits),
            ("key_projection", &self.pooler.key_projection),
            ("value_projection", &self.pooler.value_projection),
            ("queries", &self.pooler.queries),
            ("out_weight", &self.pooler.out_weight),
            ("out_bias", &self.pooler.out_bias),
            ("class_weights", &self.class_weights),
        ]
    }

    pub fn param_views_mut(&mut self) -> [(&'static str, &mut Tensor); 8] {
        [
            ("key_layer_logits", &mut self.pooler.key_layer_logits),
            ("value_layer_logits", &mut self.pooler.value_layer_logits),
            ("key_projection", &mut self.pooler.key_projection),
            ("value_projection", &mut self.pooler.value_projection),
            ("queries", &mut self.pooler.queries),
            ("out_weight", &mut self.pooler.out_weight),
            ("out_bias", &mut self.pooler.out_bias),
            ("class_weights", &mut self.class_weights),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        self.pooler.validate()?;
        let embed = self.pooler.dims.embed_dim;
        if self.class_weights.shape().len() != 2 || self.class_weights.shape()[1] != embed {
            return Err(Error::ShapeMismatch {
                op: "Checkpoint::validate",
                lhs: self.class_weights.shape().to_vec(),
                rhs: vec![self.num_classes(), embed],
            });
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "margin must be finite and non-negative, got {}",
                self.margin
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "scale must be finite and positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

fn margin_type_code(t: MarginType) -> u32 {
    match t {
        MarginType::AdditiveAngular => 0,
        MarginType::Additive => 1,
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let d = &ckpt.pooler.dims;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for dim in [
        d.layers - 1,
        d.feature_dim,
        d.head_dim,
        d.groups,
        d.context,
        d.embed_dim,
        ckpt.num_classes(),
    ] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&ckpt.margin.to_le_bytes());
    out.extend_from_slice(&ckpt.scale.to_le_bytes());
    out.extend_from_slice(&margin_type_code(ckpt.margin_type).to_le_bytes());
    for (_, tensor) in ckpt.param_views() {
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    let hidden = r.read_u32("hidden layer count")? as usize;
    let feature_dim = r.read_u32("feature dim")? as usize;
    let head_dim = r.read_u32("head dim")? as usize;
    let groups = r.read_u32("group count")? as usize;
    let context = r.read_u32("context length")? as usize;
    let embed_dim = r.read_u32("embedding dim")? as usize;
    let classes = r.read_u32("class count")? as usize;
    let margin = r.read_f64("margin")?;
    let scale = r.read_f64("scale")?;
    let margin_type = match r.read_u32("margin type")? {
        0 => MarginType::AdditiveAngular,
        1 => MarginType::Additive,
        other => {
            return Err(r.error(format!("unknown margin type code {other}")));
        }
    };
    let dims = PoolerDims {
        layers: hidden + 1,
        feature_dim,
        head_dim,
        groups,
        context,
        embed_dim,
    };
    dims.validate()
        .map_err(|e| r.error(format!("bad dims block: {e}")))?;
    if classes == 0 {
        return Err(r.error("class count must be positive"));
    }

    let read_tensor = |r: &mut ByteReader, shape: Vec<usize>| -> Result<Tensor> {
        let total: usize = shape.iter().product();
        if total.checked_mul(8).map_or(true, |b| b > r.remaining()) {
            return Err(r.error(format!(
                "tensor of {total} values exceeds remaining {} bytes",
                r.remaining()
            )));
        }
        let mut data = Vec::with_capacity(total);
        for _ in 0..total {
            data.push(r.read_f64("parameter value")?);
        }
        Tensor::new(shape, data)
    };

    let ckpt = Checkpoint {
        pooler: PoolerParams {
            dims,
            key_layer_logits: read_tensor(&mut r, vec![dims.layers])?,
            value_layer_logits: read_tensor(&mut r, vec![dims.layers])?,
            key_projection: read_tensor(&mut r, vec![feature_dim, head_dim])?,
            value_projection: read_tensor(&mut r, vec![feature_dim, head_dim])?,
            queries: read_tensor(&mut r, vec![groups * context, head_dim])?,
            out_weight: read_tensor(&mut r, vec![groups * head_dim, embed_dim])?,
            out_bias: read_tensor(&mut r, vec![embed_dim])?,
        },
        class_weights: read_tensor(&mut r, vec![classes, embed_dim])?,
        margin,
        scale,
        margin_type,
    };
    r.finish()?;
    ckpt.validate()?;
    Ok(ckpt)
}

pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}
