//! Margin-based softmax losses over cosine logits.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the target-class cosine is penalized before scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginType {
    /// Angular margin: cos(theta) becomes cos(theta + m) while that stays
    /// monotone in theta, i.e. while cos(theta) > -cos(m); past that point
    /// a linear penalty cos(theta) - m*sin(m) takes over.
    AdditiveAngular,
    /// Plain additive margin: cos(theta) - m.
    Additive,
}

impl MarginType {
    pub fn name(self) -> &'static str {
        match self {
            MarginType::AdditiveAngular => "aam",
            MarginType::Additive => "am",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "aam" => Ok(MarginType::AdditiveAngular),
            "am" => Ok(MarginType::Additive),
            other => Err(Error::InvalidConfig(format!(
                "unknown margin type {other:?}, expected \"aam\" or \"am\""
            ))),
        }
    }
}

/// Margin-adjusted target cosine.
pub(crate) fn apply_margin(cosine: f64, margin: f64, margin_type: MarginType) -> f64 {
    match margin_type {
        MarginType::Additive => cosine - margin,
        MarginType::AdditiveAngular => {
            let (sin_m, cos_m) = margin.sin_cos();
            if cosine > -cos_m {
                let sine = (1.0 - cosine * cosine).max(0.0).sqrt();
                cosine * cos_m - sine * sin_m
            } else {
                cosine - margin * sin_m
            }
        }
    }
}

/// d(apply_margin)/d(cosine).
pub(crate) fn apply_margin_derivative(cosine: f64, margin: f64, margin_type: MarginType) -> f64 {
    match margin_type {
        MarginType::Additive => 1.0,
        MarginType::AdditiveAngular => {
            let (sin_m, cos_m) = margin.sin_cos();
            if cosine > -cos_m {
                let sine = (1.0 - cosine * cosine).max(0.0).sqrt().max(1e-12);
                cos_m + cosine * sin_m / sine
            } else {
                1.0
            }
        }
    }
}

/// Mean cross entropy over rows of cosine logits `[B, C]`: each row's target
/// column is margin-adjusted, every entry is multiplied by `scale`, and the
/// row contributes `logsumexp(logits) - logits[target]`.
///
/// This is the forward-only reference for the fused tape op.
pub fn margin_softmax_loss(
    cosines: &Tensor,
    labels: &[usize],
    margin: f64,
    scale: f64,
    margin_type: MarginType,
) -> Result<f64> {
    assert_eq!(cosines.shape().len(), 2, "cosine logits must be [B, C]");
    let (rows, cols) = (cosines.rows(), cosines.cols());
    if labels.len() != rows {
        return Err(Error::InvalidConfig(format!(
            "{} labels for {rows} logit rows",
            labels.len()
        )));
    }
    let mut total = 0.0;
    for r in 0..rows {
        let y = labels[r];
        if y >= cols {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes: cols,
            });
        }
        let mut logits: Vec<f64> = (0..cols).map(|c| scale * cosines.at(r, c)).collect();
        logits[y] = scale * apply_margin(cosines.at(r, y), margin, margin_type);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        // Centering at the max keeps the result accurate even when the
        // target logit dominates and the loss is tiny.
        total += (max - logits[y]) + sum.ln();
    }
    Ok(total / rows as f64)
}
