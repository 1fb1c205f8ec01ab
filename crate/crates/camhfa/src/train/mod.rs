//! Mini-batch training of the pooling extractor and its classifier head.
//!
//! Each epoch shuffles the corpus with a seeded generator, records one tape
//! per batch, runs the reverse pass, and applies a decoupled-weight-decay
//! Adam update under an exponentially (or, optionally, linearly) decaying
//! learning rate. Everything downstream of the two seeds is deterministic,
//! so repeated runs produce byte-identical checkpoints and logs.

pub mod adamw;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::loss::MarginType;
use crate::pooling::{FeatureStack, PoolerDims, PoolerParams};
use crate::synth::Corpus;
use crate::tensor::Tensor;
use adamw::AdamW;
use checkpoint::Checkpoint;
use graph::BatchGraph;

/// Learning-rate decay shape between the configured endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Exponential,
    Linear,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::Exponential => "exponential",
            Schedule::Linear => "linear",
        }
    }

    pub fn parse(text: &str) -> Result<Schedule> {
        match text {
            "exponential" => Ok(Schedule::Exponential),
            "linear" => Ok(Schedule::Linear),
            other => Err(Error::InvalidConfig(format!(
                "unknown schedule {other:?}, expected \"exponential\" or \"linear\""
            ))),
        }
    }
}

/// Everything the training loop needs beyond the dataset itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub groups: usize,
    pub context: usize,
    pub head_dim: usize,
    pub embed_dim: usize,
    pub margin: f64,
    pub scale: f64,
    pub margin_type: MarginType,
    pub lr_start: f64,
    pub lr_end: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Gradient multiplier for a pretrained encoder; no encoder is trained
    /// here, so the only accepted value is 1.0.
    pub grad_scale_backbone: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            groups: 8,
            context: 3,
            head_dim: 16,
            embed_dim: 32,
            margin: 0.2,
            scale: 32.0,
            margin_type: MarginType::AdditiveAngular,
            lr_start: 1e-4,
            lr_end: 1e-6,
            schedule: Schedule::Exponential,
            epochs: 50,
            batch_size: 32,
            weight_decay: 0.0,
            grad_scale_backbone: 1.0,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("groups", self.groups),
            ("context", self.context),
            ("head_dim", self.head_dim),
            ("embed_dim", self.embed_dim),
            ("batch_size", self.batch_size),
        ] {
            if value == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.context % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "context must be odd, got {}",
                self.context
            )));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(Error::InvalidConfig(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
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
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.grad_scale_backbone != 1.0 {
            return Err(Error::InvalidConfig(format!(
                "grad_scale_backbone is a placeholder and must stay 1.0, got {}",
                self.grad_scale_backbone
            )));
        }
        Ok(())
    }
}

/// Learning rate for `epoch`, decaying from `lr_start` (epoch 0) to
/// `lr_end` (final epoch); a single-epoch run uses `lr_start`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    assert!(epoch < config.epochs, "epoch {epoch} out of range");
    if config.epochs == 1 || epoch == 0 {
        return config.lr_start;
    }
    if epoch == config.epochs - 1 {
        return config.lr_end;
    }
    let t = epoch as f64 / (config.epochs - 1) as f64;
    match config.schedule {
        Schedule::Exponential => config.lr_start * (config.lr_end / config.lr_start).powf(t),
        Schedule::Linear => config.lr_start + (config.lr_end - config.lr_start) * t,
    }
}

/// One epoch's aggregate measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub wall: Duration,
}

/// Per-epoch training history.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Line-oriented text, one epoch per line. Wall time is excluded so the
    /// rendering is identical across equally-seeded runs.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&format!(
                "epoch {:3}  loss {:.6}  acc {:.4}  lr {:.3e}\n",
                r.epoch, r.loss, r.accuracy, r.lr
            ));
        }
        out
    }
}

/// Map each distinct speaker id to a class index, ascending by id.
fn class_labels(corpus: &Corpus) -> (Vec<u32>, Vec<usize>) {
    let mut ids: Vec<u32> = corpus.utterances.iter().map(|u| u.speaker).collect();
    ids.sort_unstable();
    ids.dedup();
    let labels = corpus
        .utterances
        .iter()
        .map(|u| ids.binary_search(&u.speaker).expect("id from this corpus"))
        .collect();
    (ids, labels)
}

fn corpus_dims(corpus: &Corpus, config: &TrainConfig) -> Result<PoolerDims> {
    let first = &corpus.utterances[0].features;
    for u in &corpus.utterances {
        if u.features.layers() != first.layers() || u.features.feature_dim() != first.feature_dim()
        {
            return Err(Error::InvalidConfig(format!(
                "utterance {} has stack {}x{} but the corpus started with {}x{}",
                u.id,
                u.features.layers(),
                u.features.feature_dim(),
                first.layers(),
                first.feature_dim()
            )));
        }
    }
    Ok(PoolerDims {
        layers: first.layers(),
        feature_dim: first.feature_dim(),
        head_dim: config.head_dim,
        groups: config.groups,
        context: config.context,
        embed_dim: config.embed_dim,
    })
}

/// Fresh model state for a corpus: pooling parameters from the config seed
/// (stream 0) and classifier rows from stream 1 of the same seed.
pub fn init_checkpoint(corpus: &Corpus, config: &TrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidConfig("training corpus is empty".into()));
    }
    let dims = corpus_dims(corpus, config)?;
    let classes = corpus.num_speakers();
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let bound = 1.0 / (config.embed_dim as f64).sqrt();
    let class_weights = Tensor::from_fn(vec![classes, config.embed_dim], |_| {
        rng.gen_range(-bound..bound)
    });
    Ok(Checkpoint {
        pooler: PoolerParams::init(dims, config.seed)?,
        class_weights,
        margin: config.margin,
        scale: config.scale,
        margin_type: config.margin_type,
    })
}

/// Train a fresh model on `corpus`. Returns the final state and the
/// per-epoch log; identical inputs produce bit-identical results.
pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    let mut ckpt = init_checkpoint(corpus, config)?;
    let (_, labels) = class_labels(corpus);
    let stacks: Vec<&FeatureStack> = corpus.utterances.iter().map(|u| &u.features).collect();

    let mut optimizer = AdamW::new(config.weight_decay);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = lr_schedule(epoch, config);
        let mut shuffle_rng = ChaCha20Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(2 + epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&FeatureStack, usize)> =
                chunk.iter().map(|&i| (stacks[i], labels[i])).collect();
            let mut graph = BatchGraph::build(&ckpt, &batch);
            loss_sum += graph.loss_value() * batch.len() as f64;
            correct += graph.correct_predictions();
            graph.backward()?;
            let grads = graph.param_grads();
            let mut views = ckpt.param_views_mut();
            let mut params: Vec<&mut Tensor> = views.iter_mut().map(|(_, t)| &mut **t).collect();
            optimizer.step(lr, &mut params, &grads);
        }
        log.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / corpus.len() as f64,
            accuracy: correct as f64 / corpus.len() as f64,
            lr,
            wall: started.elapsed(),
        });
    }
    Ok((ckpt, log))
}
