//! Recording tape for reverse-mode differentiation.
//!
//! Ops execute eagerly during the forward pass and are recorded; `backward`
//! replays them in reverse, accumulating gradients into per-node slots. The
//! op set is exactly what the pooling model and its training loss need, each
//! with a hand-written vector-Jacobian product.

use super::{matmul_into, softmax_slice, Tensor};
use crate::error::{Error, Result};
use crate::loss::{apply_margin, apply_margin_derivative, MarginType};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

struct Buf {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Buf {
    fn len(&self) -> usize {
        self.data.len()
    }
}

#[derive(Clone)]
enum Op {
    /// out = a @ b
    Matmul { a: NodeId, b: NodeId, out: NodeId },
    /// out = a @ b^T
    MatmulTransposeB { a: NodeId, b: NodeId, out: NodeId },
    /// out[r, :] = x[r, :] + bias
    AddBias { x: NodeId, bias: NodeId, out: NodeId },
    /// out[t, f] = sum_s weights[s] * layers[s, t, f]
    WeightedLayerSum { layers: NodeId, weights: NodeId, out: NodeId },
    /// Row-wise stable softmax (a 1-D input is one row).
    SoftmaxRows { x: NodeId, out: NodeId },
    /// Sliding-window query/key scores; see [`GradTape::context_scores`].
    ContextScores {
        keys: NodeId,
        queries: NodeId,
        out: NodeId,
        groups: usize,
        per_group: usize,
    },
    /// Row-wise x / ||x||.
    L2NormalizeRows { x: NodeId, out: NodeId },
    /// Same data, new shape.
    Reshape { x: NodeId, out: NodeId },
    /// Stack 2-D inputs along axis 0.
    ConcatRows { parts: Vec<NodeId>, out: NodeId },
    /// Scalar sum of all elements.
    SumAll { x: NodeId, out: NodeId },
    /// Mean softmax cross entropy over scaled cosine logits with the target
    /// logit margin-adjusted; see [`GradTape::margin_cross_entropy`].
    MarginCrossEntropy {
        cos: NodeId,
        out: NodeId,
        labels: Vec<usize>,
        margin: f64,
        scale: f64,
        margin_type: MarginType,
    },
}

/// Wengert list: forward values plus the op sequence that produced them.
#[derive(Default)]
pub struct GradTape {
    bufs: Vec<Buf>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
}

/// (rows, cols) treating a 1-D tensor as a single row.
fn row_view(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        other => panic!("expected 1-D or 2-D shape, got {other:?}"),
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    /// Record a leaf value (parameter or constant input).
    pub fn input(&mut self, value: &Tensor) -> NodeId {
        self.push(value.shape().to_vec(), value.data().to_vec())
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = NodeId(self.bufs.len());
        self.bufs.push(Buf { shape, data });
        self.grads.push(None);
        id
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        let buf = &self.bufs[id.0];
        Tensor::new(buf.shape.clone(), buf.data.clone()).expect("tape buffer is consistent")
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.bufs[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.bufs[id.0].shape
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = row_view(self.shape(a));
        let (kb, n) = row_view(self.shape(b));
        assert_eq!(ka, kb, "matmul inner dimensions {ka} vs {kb}");
        let mut out = vec![0.0; m * n];
        matmul_into(&self.bufs[a.0].data, &self.bufs[b.0].data, &mut out, m, ka, n);
        let id = self.push(vec![m, n], out);
        self.ops.push(Op::Matmul { a, b, out: id });
        id
    }

    pub fn matmul_transpose_b(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = row_view(self.shape(a));
        let (n, kb) = row_view(self.shape(b));
        assert_eq!(ka, kb, "matmul_transpose_b inner dimensions {ka} vs {kb}");
        let (da, db) = (&self.bufs[a.0].data, &self.bufs[b.0].data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut sum = 0.0;
                for p in 0..ka {
                    sum += da[i * ka + p] * db[j * ka + p];
                }
                out[i * n + j] = sum;
            }
        }
        let id = self.push(vec![m, n], out);
        self.ops.push(Op::MatmulTransposeB { a, b, out: id });
        id
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (rows, cols) = row_view(self.shape(x));
        assert_eq!(
            self.shape(bias),
            &[cols],
            "bias length must match column count {cols}"
        );
        let mut out = self.bufs[x.0].data.clone();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += self.bufs[bias.0].data[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let id = self.push(shape, out);
        self.ops.push(Op::AddBias { x, bias, out: id });
        id
    }

    /// Collapse a stack of layers `[S, T, F]` to `[T, F]` using `S` scalar
    /// weights.
    pub fn weighted_layer_sum(&mut self, layers: NodeId, weights: NodeId) -> NodeId {
        let layer_shape = self.shape(layers).to_vec();
        assert_eq!(layer_shape.len(), 3, "layer stack must be [S, T, F]");
        let (s, t, f) = (layer_shape[0], layer_shape[1], layer_shape[2]);
        assert_eq!(self.shape(weights), &[s], "need one weight per layer");
        let mut out = vec![0.0; t * f];
        for layer in 0..s {
            let w = self.bufs[weights.0].data[layer];
            let base = layer * t * f;
            for i in 0..t * f {
                out[i] += w * self.bufs[layers.0].data[base + i];
            }
        }
        let id = self.push(vec![t, f], out);
        self.ops.push(Op::WeightedLayerSum {
            layers,
            weights,
            out: id,
        });
        id
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (rows, cols) = row_view(self.shape(x));
        let mut out = self.bufs[x.0].data.clone();
        for r in 0..rows {
            softmax_slice(&mut out[r * cols..(r + 1) * cols]);
        }
        let shape = self.shape(x).to_vec();
        let id = self.push(shape, out);
        self.ops.push(Op::SoftmaxRows { x, out: id });
        id
    }

    /// Scores `out[g, t] = (1/L) * sum_j q[g, j, :] . k[t + j - R, :]` with
    /// `R = (L - 1) / 2`; key positions outside `[0, T)` contribute zero.
    ///
    /// `keys` is `[T, D]`, `queries` is `[G * L, D]` with group g's j-th
    /// query at row `g * L + j`; the result is `[G, T]`.
    pub fn context_scores(
        &mut self,
        keys: NodeId,
        queries: NodeId,
        groups: usize,
        per_group: usize,
    ) -> NodeId {
        assert!(per_group % 2 == 1, "context window length must be odd");
        let (t_frames, d) = row_view(self.shape(keys));
        let (q_rows, qd) = row_view(self.shape(queries));
        assert_eq!(q_rows, groups * per_group, "query rows must be G * L");
        assert_eq!(d, qd, "key and query widths differ");
        let reach = (per_group - 1) / 2;
        let inv_l = 1.0 / per_group as f64;
        let kd = &self.bufs[keys.0].data;
        let qd_data = &self.bufs[queries.0].data;
        let mut out = vec![0.0; groups * t_frames];
        for g in 0..groups {
            for t in 0..t_frames {
                let mut sum = 0.0;
                for j in 0..per_group {
                    let pos = t as isize + j as isize - reach as isize;
                    if pos < 0 || pos >= t_frames as isize {
                        continue;
                    }
                    let key_row = pos as usize * d;
                    let query_row = (g * per_group + j) * d;
                    for c in 0..d {
                        sum += qd_data[query_row + c] * kd[key_row + c];
                    }
                }
                out[g * t_frames + t] = inv_l * sum;
            }
        }
        let id = self.push(vec![groups, t_frames], out);
        self.ops.push(Op::ContextScores {
            keys,
            queries,
            out: id,
            groups,
            per_group,
        });
        id
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let (rows, cols) = row_view(self.shape(x));
        let mut out = self.bufs[x.0].data.clone();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 0.0, "cannot normalize a zero row");
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let shape = self.shape(x).to_vec();
        let id = self.push(shape, out);
        self.ops.push(Op::L2NormalizeRows { x, out: id });
        id
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.bufs[x.0].len(),
            "reshape must preserve element count"
        );
        let data = self.bufs[x.0].data.clone();
        let id = self.push(shape, data);
        self.ops.push(Op::Reshape { x, out: id });
        id
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows needs at least one input");
        let (_, cols) = row_view(self.shape(parts[0]));
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = row_view(self.shape(p));
            assert_eq!(c, cols, "concat_rows column mismatch");
            rows += r;
            data.extend_from_slice(&self.bufs[p.0].data);
        }
        let id = self.push(vec![rows, cols], data);
        self.ops.push(Op::ConcatRows {
            parts: parts.to_vec(),
            out: id,
        });
        id
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.bufs[x.0].data.iter().sum();
        let id = self.push(vec![1], vec![total]);
        self.ops.push(Op::SumAll { x, out: id });
        id
    }

    /// Mean cross entropy over rows of cosine logits `[B, C]`, where row r's
    /// target column (labels[r]) is margin-adjusted before scaling.
    pub fn margin_cross_entropy(
        &mut self,
        cos: NodeId,
        labels: &[usize],
        margin: f64,
        scale: f64,
        margin_type: MarginType,
    ) -> NodeId {
        let (rows, cols) = row_view(self.shape(cos));
        assert_eq!(labels.len(), rows, "one label per row");
        assert!(labels.iter().all(|&y| y < cols), "label out of range");
        let data = &self.bufs[cos.0].data;
        let mut total = 0.0;
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            let logits = margined_logits(row, labels[r], margin, scale, margin_type);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            // Centered at the max so a dominant target logit cannot cancel.
            total += (max - logits[labels[r]]) + sum.ln();
        }
        let id = self.push(vec![1], vec![total / rows as f64]);
        self.ops.push(Op::MarginCrossEntropy {
            cos,
            out: id,
            labels: labels.to_vec(),
            margin,
            scale,
            margin_type,
        });
        id
    }

    /// Run the reverse pass from a scalar node. Clears any gradients from a
    /// previous call first.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.bufs[loss.0].len() != 1 {
            return Err(Error::NotScalar {
                shape: self.bufs[loss.0].shape.clone(),
            });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.reverse_op(op);
        }
        self.ops = ops;
        Ok(())
    }

    fn reverse_op(&mut self, op: &Op) {
        let bufs = &self.bufs;
        let grads = &mut self.grads;
        match op {
            Op::Matmul { a, b, out } => {
                let Some(gout) = grads[out.0].clone() else {
                    return;
                };
                let (m, k) = row_view(&bufs[a.0].shape);
                let n = bufs[out.0].shape[1];
                {
                    let ga = grad_slot(grads, *a, m * k);
                    let bd = &bufs[b.0].data;
                    for i in 0..m {
                        for p in 0..k {
                            let mut sum = 0.0;
                            for j in 0..n {
                                sum += gout[i * n + j] * bd[p * n + j];
                            }
                            ga[i * k + p] += sum;
                        }
                    }
                }
                let gb = grad_slot(grads, *b, k * n);
                let ad = &bufs[a.0].data;
                for p in 0..k {
                    for j in 0..n {
                        let mut sum = 0.0;
                        for i in 0..m {
                            sum += ad[i * k + p] * gout[i * n + j];
                        }
                        gb[p * n + j] += sum;
                    }
                }
            }
            Op::MatmulTransposeB { a, b, out } => {
                let Some(gout) = grads[out.0].clone() else {
                    return;
                };
                let (m, k) = row_view(&bufs[a.0].shape);
                let n = bufs[out.0].shape[1];
                {
                    let ga = grad_slot(grads, *a, m * k);
                    let bd = &bufs[b.0].data;
                    for i in 0..m {
                        for p in 0..k {
                            let mut sum = 0.0;
                            for j in 0..n {
                                sum += gout[i * n + j] * bd[j * k + p];
                            }
                            ga[i * k + p] += sum;
                        }
                    }
                }
                let gb = grad_slot(grads, *b, n * k);
                let ad = &bufs[a.0].data;
                for j in 0..n {
                    for p in 0..k {
                        let mut sum = 0.0;
                        for i in 0..m {
                            sum += gout[i * n + j] * ad[i * k + p];
                        }
                        gb[j * k + p] += sum;
                    }
                }
            }
            Op::AddBias { x, bias, out } => {
                let Some(gout) = grads[out.0].clone() else {
                    return;
                };
                let (rows, cols) = row_view(&bufs[x.0].shape);
                {
                    let gx = grad_slot(grads, *x, rows * cols);
                    for (g, v) in gx.iter_mut().zip(gout.iter()) {
                        *g += v;
                    }
                }
                let gb = grad_slot(grads, *bias, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        gb[c] += gout[r * cols + c];
                    }
                }
            }
            Op::WeightedLayerSum {
                layers,
                weights,
                out,
            } => {
                let Some(gout) = grads[out.0].clone() else {
                    return;
                };
                let shape = &bufs[layers.0].shape;
                let (s, plane) = (shape[0], shape[1] * shape[2]);
                {
                    let gw = grad_slot(grads, *weights, s);
                    let ld = &bufs[layers.0].data;
                    for layer in 0..s {
                        let base = layer * plane;
                        let mut sum = 0.0;
                        for i in 0..plane {
                            sum += gout[i] * ld[base + i];
                        }
                        gw[layer] += sum;
                    }
                }
                let gl = grad_slot(grads, *layers, s * plane);
                let wd = &bufs[weights.0].data;
                for layer in 0..s {
                    let base = layer * plane;
                    for i in 0..plane {
                        gl[base + i] += wd[layer] * gout[i];
                    }
                }
            }
            Op::SoftmaxRows { x, out } => {
                let Some(gout) = grads[out.0].clone() else {
                    return;
                };
                let (rows, cols) = row_view(&bufs[x.0].shape);
                let y = &bufs[out.0].data;
                let gx = grad_slot(grads, *x, rows * cols);
                for r in 0..rows {
                    let base = r * cols;
                    let mut dot = 0.0;
                    for c in 0..cols {
                        dot += gout[base + c] * y[base + c];
                    }
                    for c in 0..cols {
                        gx[base + c] += y[base + c] * (gout[base + c] - dot);
                    }
                }
            }
            Op::ContextScores {
                keys,
                queries,
                out,
                groups,
                per_group,
            } => {
                let Some(gout) = grads[out.0].clone() else {
                    return;
                };
                let (t_frames, d) = row_view(&bufs[keys.0].shape);
                let reach = (per_group - 1) / 2;
                let inv_l = 1.0 / *per_group as f64;
                {
                    let gq = grad_slot(grads, *queries, groups * per_group * d);
                    let kd = &bufs[keys.0].data;
                    for g in 0..*groups {
                        for t in 0..t_frames {
                            let go = inv_l * gout[g * t_frames + t];
                            for j in 0..*per_group {
                                let pos = t as isize + j as isize - reach as isize;
                                if pos < 0 || pos >= t_frames as isize {
                                    continue;
                                }
                                let key_row = pos as usize * d;
                                let query_row = (g * per_group + j) * d;
                                for c in 0..d {
                                    gq[query_row + c] += go * kd[key_row + c];
                                }
                            }
                        }
                    }
                }
                let gk = grad_slot(grads, *keys, t_frames * d);
                let qd = &bufs[queries.0].data;
                for g in 0..*groups {
                    for t in 0..t_frames {
                        let go = inv_l * gout[g * t_frames + t];
                        for j in 0..*per_group {
                            let pos = t as isize + j as isize - reach as isize;
                            if pos < 0 || pos >= t_frames as isize {
                                continue;
                            }
                            let key_row = pos as usize * d;
                            let query_row = (g * per_group + j) * d;
                            for c in 0..d {
                                gk[key_row + c] += go * qd[query_row + c];
                            }
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, out } => {
                let Some(gout) = grads[out.0].clone() else {
                    return;
                };
                let (rows, cols) = row_view(&bufs[x.0].shape);
                let xd = &bufs[x.0].data;
                let y = &bufs[out.0].data;
                let gx = grad_slot(grads, *x, rows * cols);
                for r in 0..rows {
                    let base = r * cols;
                    let norm = xd[base..base + cols]
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt();
                    let mut dot = 0.0;
                    for c in 0..cols {
                        dot += gout[base + c] * y[base + c];
                    }
                    for c in 0..cols {
                        gx[base + c] += (gout[base + c] - y[base + c] * dot) / norm;
                    }
                }
            }
            Op::Reshape { x, out } => {
                let Some(gout) = grads[out.0].clone() else {
                    return;
                };
                let len = bufs[x.0].len();
                let gx = grad_slot(grads, *x, len);
                for (g, v) in gx.iter_mut().zip(gout.iter()) {
                    *g += v;
                }
            }
            Op::ConcatRows { parts, out } => {
                let Some(gout) = grads[out.0].clone() else {
                    return;
                };
                let mut offset = 0;
                for &p in parts {
                    let len = bufs[p.0].len();
                    let gp = grad_slot(grads, p, len);
                    for (g, v) in gp.iter_mut().zip(gout[offset..offset + len].iter()) {
                        *g += v;
                    }
                    offset += len;
                }
            }
            Op::SumAll { x, out } => {
                let Some(gout) = grads[out.0].clone() else {
                    return;
                };
                let len = bufs[x.0].len();
                let gx = grad_slot(grads, *x, len);
                for g in gx.iter_mut() {
                    *g += gout[0];
                }
            }
            Op::MarginCrossEntropy {
                cos,
                out,
                labels,
                margin,
                scale,
                margin_type,
            } => {
                let Some(gout) = grads[out.0].clone() else {
                    return;
                };
                let (rows, cols) = row_view(&bufs[cos.0].shape);
                let data = &bufs[cos.0].data;
                let gcos = grad_slot(grads, *cos, rows * cols);
                let factor = gout[0] / rows as f64;
                for r in 0..rows {
                    let y = labels[r];
                    let row = &data[r * cols..(r + 1) * cols];
                    let mut probs = margined_logits(row, y, *margin, *scale, *margin_type);
                    softmax_slice(&mut probs);
                    let slope = apply_margin_derivative(row[y], *margin, *margin_type);
                    for c in 0..cols {
                        let mut d = probs[c];
                        if c == y {
                            d -= 1.0;
                        }
                        d *= scale * factor;
                        if c == y {
                            d *= slope;
                        }
                        gcos[r * cols + c] += d;
                    }
                }
            }
        }
    }

    /// Gradient of the last `backward` target with respect to `id`, or
    /// `None` if nothing flowed to it.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].as_ref().map(|g| {
            Tensor::new(self.bufs[id.0].shape.clone(), g.clone()).expect("grad matches buffer")
        })
    }

    /// Like [`GradTape::grad`] but zero-filled when no gradient reached the
    /// node, so optimizer updates stay uniform.
    pub fn param_grad(&self, id: NodeId) -> Tensor {
        self.grad(id)
            .unwrap_or_else(|| Tensor::zeros(self.bufs[id.0].shape.clone()))
    }
}

/// Scaled logits for one row with the target column margin-adjusted.
fn margined_logits(
    row: &[f64],
    target: usize,
    margin: f64,
    scale: f64,
    margin_type: MarginType,
) -> Vec<f64> {
    let mut logits: Vec<f64> = row.iter().map(|v| v * scale).collect();
    logits[target] = scale * apply_margin(row[target], margin, margin_type);
    logits
}
