//! Training objectives for the hashing network.
//!
//! A batch is scored by three terms: a contrastive loss over sampled code
//! pairs, each pair weighted by how hard the classifier finds its two
//! examples; an L1 pull of every paired code toward ±1; and a squared-error
//! classification loss. The pair weights are plain numbers computed from
//! the current predictions, not graph nodes: hardness decides how much a
//! pair matters, but no gradient flows through the weighting itself.
//!
//! Plain-value functions compute each term on slices for inspection and
//! testing; [`build_total_loss`] assembles the same arithmetic on a tape
//! for training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{OpKind, Scalar, Tape, Tensor, Var};

/// Relationship of a pair of examples, decided by label overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Similar,
    Dissimilar,
}

impl Similarity {
    /// `Similar` when the examples share at least one label.
    pub fn from_label_overlap(share_a_label: bool) -> Self {
        if share_a_label {
            Similarity::Similar
        } else {
            Similarity::Dissimilar
        }
    }
}

/// Pair relationship of two examples from their ground-truth label sets:
/// similar when they share at least one class. Symmetric in its arguments.
pub fn pair_similarity(
    a: &crate::labels::LabelSet,
    b: &crate::labels::LabelSet,
) -> Result<Similarity> {
    if a.num_classes() != b.num_classes() {
        return Err(Error::Usage(format!(
            "label sets over {} and {} classes cannot be compared",
            a.num_classes(),
            b.num_classes()
        )));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data(
            "similarity is undefined for an unlabeled example".into(),
        ));
    }
    Ok(Similarity::from_label_overlap(a.intersects(b)))
}

/// One scored pair: two binary-like codes, the classifier's confidence on
/// each example's own ground truth, and the pair relationship.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
    pub p1: f64,
    pub p2: f64,
    pub similarity: Similarity,
}

/// Weights of the loss terms.
///
/// `margin` defaults to twice the code length when unset, which forces
/// dissimilar ±1 codes at least half their bits apart (squared Euclidean
/// distance is four times the Hamming distance for sign codes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Squared-distance margin for dissimilar pairs; `None` means `2k`.
    pub margin: Option<f64>,
    /// Exponent on the hardness product. Zero disables reweighting.
    pub gamma: f64,
    /// Weight of the binarization regularizer.
    pub lambda: f64,
    /// Weight of the classification term.
    pub mu: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { margin: None, gamma: 1.0, lambda: 0.01, mu: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(m) = self.margin {
            if !(m > 0.0) || !m.is_finite() {
                return Err(Error::Config(format!("margin must be positive, got {m}")));
            }
        }
        for (name, v) in [("gamma", self.gamma), ("lambda", self.lambda), ("mu", self.mu)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// The margin to use for codes of the given length.
    pub fn margin_for(&self, hash_bits: usize) -> f64 {
        self.margin.unwrap_or(2.0 * hash_bits as f64)
    }
}

/// Contrastive loss on one pair of codes: similar pairs pay half their
/// squared distance, dissimilar pairs pay half the shortfall below the
/// margin (zero once they are far enough apart).
pub fn pairwise_loss(
    b1: &[f64],
    b2: &[f64],
    similarity: Similarity,
    margin: f64,
) -> Result<f64> {
    if b1.len() != b2.len() {
        return Err(Error::shape(
            "pairwise_loss",
            format!("code lengths differ: {} vs {}", b1.len(), b2.len()),
        ));
    }
    let d2: f64 = b1.iter().zip(b2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(match similarity {
        Similarity::Similar => 0.5 * d2,
        Similarity::Dissimilar => 0.5 * (margin - d2).max(0.0),
    })
}

/// Sum of squared errors between predictions and 0/1 label indicators.
pub fn classification_loss(probs: &Tensor<f64>, labels: &Tensor<f64>) -> Result<f64> {
    if probs.shape() != labels.shape() {
        return Err(Error::shape(
            "classification_loss",
            format!("probs {:?} vs labels {:?}", probs.shape(), labels.shape()),
        ));
    }
    if let Some(&bad) = labels.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Data(format!(
            "label entries must be 0 or 1, found {bad}"
        )));
    }
    Ok(probs
        .data()
        .iter()
        .zip(labels.data())
        .map(|(p, y)| (y - p) * (y - p))
        .sum())
}

/// How hard the classifier finds one example of a pair, from its
/// confidence `p` on the example's own labels. A similar pair is hard
/// when confidence is low (the classifier confuses the two classes); a
/// dissimilar pair is hard when confidence is high.
pub fn hard_degree(p: f64, similarity: Similarity) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Usage(format!("confidence {p} outside [0, 1]")));
    }
    Ok(match similarity {
        Similarity::Similar => 1.0 - p,
        Similarity::Dissimilar => p,
    })
}

/// The pair's contribution factor `(P1 * P2)^gamma`. Exponents 0 and 1
/// short-circuit so they stay exact.
pub fn pair_weight(p1: f64, p2: f64, similarity: Similarity, gamma: f64) -> Result<f64> {
    if gamma == 0.0 {
        // Even a zero hardness product must yield weight 1 here.
        hard_degree(p1, similarity)?;
        hard_degree(p2, similarity)?;
        return Ok(1.0);
    }
    let product = hard_degree(p1, similarity)? * hard_degree(p2, similarity)?;
    Ok(if gamma == 1.0 { product } else { product.powf(gamma) })
}

/// Hardness-weighted contrastive loss summed over a batch of pairs.
pub fn hard_pairwise_loss(pairs: &[PairSample], cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Usage("hard_pairwise_loss needs at least one pair".into()));
    }
    let mut total = 0.0;
    for pair in pairs {
        let weight = pair_weight(pair.p1, pair.p2, pair.similarity, cfg.gamma)?;
        let margin = cfg.margin_for(pair.b1.len());
        total += weight * pairwise_loss(&pair.b1, &pair.b2, pair.similarity, margin)?;
    }
    Ok(total)
}

/// L1 distance of each code entry's magnitude from 1, scaled by `lambda`.
/// Zero exactly when the code is already ±1.
pub fn quantization_regularizer(b: &[f64], lambda: f64) -> f64 {
    lambda * b.iter().map(|v| (v.abs() - 1.0).abs()).sum::<f64>()
}

/// The full objective: weighted pair losses, plus the regularizer over
/// both codes of every pair, plus `mu` times the classification loss.
pub fn total_loss(
    pairs: &[PairSample],
    probs: &Tensor<f64>,
    labels: &Tensor<f64>,
    cfg: &LossConfig,
) -> Result<f64> {
    let mut total = hard_pairwise_loss(pairs, cfg)?;
    for pair in pairs {
        total += quantization_regularizer(&pair.b1, cfg.lambda);
        total += quantization_regularizer(&pair.b2, cfg.lambda);
    }
    Ok(total + cfg.mu * classification_loss(probs, labels)?)
}

/// Classifier confidence per example: the mean predicted probability over
/// that example's ground-truth labels.
pub fn label_confidences<T: Scalar>(
    probs: &Tensor<T>,
    labels: &Tensor<T>,
) -> Result<Vec<f64>> {
    if probs.shape() != labels.shape() || probs.shape().len() != 2 {
        return Err(Error::shape(
            "label_confidences",
            format!("probs {:?} vs labels {:?}", probs.shape(), labels.shape()),
        ));
    }
    let classes = probs.shape()[1];
    probs
        .data()
        .chunks(classes)
        .zip(labels.data().chunks(classes))
        .enumerate()
        .map(|(i, (p_row, y_row))| {
            let mut sum = 0.0;
            let mut count = 0usize;
            for (p, y) in p_row.iter().zip(y_row) {
                let y = y.as_f64();
                if y != 0.0 && y != 1.0 {
                    return Err(Error::Data(format!(
                        "label entries must be 0 or 1, found {y}"
                    )));
                }
                if y == 1.0 {
                    sum += p.as_f64();
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::Data(format!(
                    "example {i} has no ground-truth label to score confidence against"
                )));
            }
            Ok(sum / count as f64)
        })
        .collect()
}

/// An index pair into the batch that produced `binary_like`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairIndices {
    pub first: usize,
    pub second: usize,
    pub similarity: Similarity,
}

/// Tape handles for the objective and its parts. The parts are the raw
/// term values; `total` already folds in `lambda` and `mu`.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub hard_pairwise: Var,
    pub quantization: Var,
    pub classification: Var,
}

/// Builds the training objective on the tape that produced `binary_like`
/// and `class_probs`.
///
/// Pair weights are computed from the current `class_probs` values and
/// enter the graph as constants, so backward treats them as fixed
/// coefficients. Gradients flow through the codes and through the
/// classification term only.
pub fn build_total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    binary_like: Var,
    class_probs: Var,
    labels: &Tensor<T>,
    pairs: &[PairIndices],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Usage("build_total_loss needs at least one pair".into()));
    }
    let code_shape = tape.value(binary_like).shape().to_vec();
    if code_shape.len() != 2 {
        return Err(Error::shape(
            "build_total_loss",
            format!("binary-like codes must be [batch, bits], got {code_shape:?}"),
        ));
    }
    let (batch, bits) = (code_shape[0], code_shape[1]);
    let prob_shape = tape.value(class_probs).shape().to_vec();
    if prob_shape.len() != 2 || prob_shape[0] != batch {
        return Err(Error::shape(
            "build_total_loss",
            format!("class probs must be [{batch}, classes], got {prob_shape:?}"),
        ));
    }
    if labels.shape() != prob_shape {
        return Err(Error::shape(
            "build_total_loss",
            format!("labels {:?} vs probs {prob_shape:?}", labels.shape()),
        ));
    }
    if let Some(pair) = pairs.iter().find(|p| p.first >= batch || p.second >= batch) {
        return Err(Error::Usage(format!(
            "pair ({}, {}) out of range for batch {batch}",
            pair.first, pair.second
        )));
    }

    // Fixed per-pair coefficients: hardness weight folded together with
    // the 1/2 factor and the similar/dissimilar routing.
    let confidences = label_confidences(tape.value(class_probs), labels)?;
    let n = pairs.len();
    let mut near_coeff = Tensor::<T>::zeros(&[n, 1]);
    let mut far_coeff = Tensor::<T>::zeros(&[n, 1]);
    for (i, pair) in pairs.iter().enumerate() {
        let weight = pair_weight(
            confidences[pair.first],
            confidences[pair.second],
            pair.similarity,
            cfg.gamma,
        )?;
        match pair.similarity {
            Similarity::Similar => near_coeff.data_mut()[i] = T::from_f64(0.5 * weight),
            Similarity::Dissimilar => far_coeff.data_mut()[i] = T::from_f64(0.5 * weight),
        }
    }

    let firsts = tape.apply(
        OpKind::GatherRows { indices: pairs.iter().map(|p| p.first).collect() },
        &[binary_like],
    )?;
    let seconds = tape.apply(
        OpKind::GatherRows { indices: pairs.iter().map(|p| p.second).collect() },
        &[binary_like],
    )?;
    let diff = tape.apply(OpKind::Sub, &[firsts, seconds])?;
    let sq = tape.apply(OpKind::Pow { exponent: 2 }, &[diff])?;
    let d2 = tape.apply(OpKind::RowSum, &[sq])?;
    let shortfall = tape.apply(
        OpKind::Affine { scale: -1.0, offset: cfg.margin_for(bits) },
        &[d2],
    )?;
    let hinge = tape.apply(OpKind::MaxConst { threshold: 0.0 }, &[shortfall])?;
    let near = tape.leaf(near_coeff);
    let far = tape.leaf(far_coeff);
    let pulled = tape.apply(OpKind::Mul, &[d2, near])?;
    let pushed = tape.apply(OpKind::Mul, &[hinge, far])?;
    let per_pair = tape.apply(OpKind::Add, &[pulled, pushed])?;
    let hard_pairwise = tape.apply(OpKind::Sum, &[per_pair])?;

    let binarization = |tape: &mut Tape<T>, codes: Var| -> Result<Var> {
        let magnitude = tape.apply(OpKind::Abs, &[codes])?;
        let off_by = tape.apply(OpKind::Affine { scale: 1.0, offset: -1.0 }, &[magnitude])?;
        let dist = tape.apply(OpKind::Abs, &[off_by])?;
        tape.apply(OpKind::Sum, &[dist])
    };
    let q_first = binarization(tape, firsts)?;
    let q_second = binarization(tape, seconds)?;
    let quantization = tape.apply(OpKind::Add, &[q_first, q_second])?;
    let quant_scaled =
        tape.apply(OpKind::Affine { scale: cfg.lambda, offset: 0.0 }, &[quantization])?;

    let label_leaf = tape.leaf(labels.clone());
    let residual = tape.apply(OpKind::Sub, &[label_leaf, class_probs])?;
    let residual_sq = tape.apply(OpKind::Pow { exponent: 2 }, &[residual])?;
    let classification = tape.apply(OpKind::Sum, &[residual_sq])?;
    let class_scaled = tape.apply(OpKind::Affine { scale: cfg.mu, offset: 0.0 }, &[classification])?;

    let partial = tape.apply(OpKind::Add, &[hard_pairwise, quant_scaled])?;
    let total = tape.apply(OpKind::Add, &[partial, class_scaled])?;
    Ok(LossTerms { total, hard_pairwise, quantization, classification })
}
