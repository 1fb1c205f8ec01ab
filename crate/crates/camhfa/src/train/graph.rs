//! Differentiable forward pass for one training batch.
//!
//! A batch tape records the eight parameter tensors as leaves, runs every
//! utterance through the pooling extractor, compares the unit embeddings
//! against row-normalized class weights, and roots the tape at the mean
//! margin-softmax loss. One reverse pass then yields all parameter
//! gradients.

use super::checkpoint::Checkpoint;
use crate::error::Result;
use crate::pooling::FeatureStack;
use crate::tensor::{GradTape, NodeId, Tensor};

/// One recorded batch: parameter leaves, cosine logits, and the scalar loss.
pub struct BatchGraph {
    tape: GradTape,
    /// Leaf ids of the parameter tensors, in checkpoint order.
    params: [NodeId; 8],
    /// Raw cosine logits `[B, C]`, before margin and scale.
    cosines: NodeId,
    loss: NodeId,
    labels: Vec<usize>,
}

impl BatchGraph {
    /// Record the forward pass for `batch` at the parameters in `ckpt`.
    pub fn build(ckpt: &Checkpoint, batch: &[(&FeatureStack, usize)]) -> BatchGraph {
        assert!(!batch.is_empty(), "batch must hold at least one utterance");
        let classes = ckpt.num_classes();
        assert!(
            batch.iter().all(|(_, label)| *label < classes),
            "labels must index the class weights"
        );
        let dims = ckpt.pooler.dims;
        let mut tape = GradTape::new();
        let params = [
            tape.input(&ckpt.pooler.key_layer_logits),
            tape.input(&ckpt.pooler.value_layer_logits),
            tape.input(&ckpt.pooler.key_projection),
            tape.input(&ckpt.pooler.value_projection),
            tape.input(&ckpt.pooler.queries),
            tape.input(&ckpt.pooler.out_weight),
            tape.input(&ckpt.pooler.out_bias),
            tape.input(&ckpt.class_weights),
        ];
        let [key_logits, value_logits, key_proj, value_proj, queries, out_weight, out_bias, class_weights] =
            params;

        let key_weights = tape.softmax_rows(key_logits);
        let value_weights = tape.softmax_rows(value_logits);
        let class_unit = tape.l2_normalize_rows(class_weights);

        let mut embeddings = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for (stack, label) in batch {
            let stack_node = tape.input(stack.tensor());
            let key_frames = tape.weighted_layer_sum(stack_node, key_weights);
            let value_frames = tape.weighted_layer_sum(stack_node, value_weights);
            let keys = tape.matmul(key_frames, key_proj);
            let values = tape.matmul(value_frames, value_proj);
            let scores = tape.context_scores(keys, queries, dims.groups, dims.context);
            let attention = tape.softmax_rows(scores);
            let pooled = tape.matmul(attention, values);
            let flat = tape.reshape(pooled, vec![1, dims.groups * dims.head_dim]);
            let projected = tape.matmul(flat, out_weight);
            let biased = tape.add_bias(projected, out_bias);
            embeddings.push(tape.l2_normalize_rows(biased));
            labels.push(*label);
        }
        let stacked = tape.concat_rows(&embeddings);
        let cosines = tape.matmul_transpose_b(stacked, class_unit);
        let loss =
            tape.margin_cross_entropy(cosines, &labels, ckpt.margin, ckpt.scale, ckpt.margin_type);
        BatchGraph {
            tape,
            params,
            cosines,
            loss,
            labels,
        }
    }

    pub fn loss_value(&self) -> f64 {
        self.tape.data(self.loss)[0]
    }

    /// Rows whose raw-cosine argmax is the target class (first max wins).
    pub fn correct_predictions(&self) -> usize {
        let cols = self.tape.shape(self.cosines)[1];
        let data = self.tape.data(self.cosines);
        self.labels
            .iter()
            .enumerate()
            .filter(|&(r, &label)| {
                let row = &data[r * cols..(r + 1) * cols];
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best == label
            })
            .count()
    }

    pub fn backward(&mut self) -> Result<()> {
        self.tape.backward(self.loss)
    }

    /// Loss gradients for the parameter leaves, in checkpoint order.
    pub fn param_grads(&self) -> [Tensor; 8] {
        self.params.map(|id| self.tape.param_grad(id))
    }
}
