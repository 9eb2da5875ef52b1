//! Metric-learning losses and batch-hard triplet mining.
//!
//! Besides the scalar losses, every loss used in training has a `*_grad`
//! companion returning gradients with respect to its embedding inputs.
//! Distances use the subgradient 0 at `d = 0` and clamps use 0 at the kink.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Divisor floor for the reciprocal term.
pub const RECIPROCAL_GUARD: f64 = 1e-12;

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn euclidean_distance(x1: &[f64], x2: &[f64]) -> Result<f64> {
    check_dims(x1, x2)?;
    Ok(x1
        .iter()
        .zip(x2)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// d distance / d x1; the gradient with respect to x2 is its negation.
fn distance_grad(x1: &[f64], x2: &[f64], d: f64) -> Vec<f64> {
    if d == 0.0 {
        return vec![0.0; x1.len()];
    }
    x1.iter().zip(x2).map(|(a, b)| (a - b) / d).collect()
}

/// Pair label for the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLabel {
    Similar,
    Dissimilar,
}

impl TryFrom<u8> for PairLabel {
    type Error = Error;

    fn try_from(y: u8) -> Result<Self> {
        match y {
            0 => Ok(PairLabel::Similar),
            1 => Ok(PairLabel::Dissimilar),
            _ => Err(Error::InvalidParam(format!("pair label must be 0 or 1, got {y}"))),
        }
    }
}

/// `(1-Y)/2 * d + Y/2 * max(0, margin - d)` with `Y = 0` for similar pairs.
pub fn contrastive_loss(x1: &[f64], x2: &[f64], y: u8, margin: f64) -> Result<f64> {
    let label = PairLabel::try_from(y)?;
    let d = euclidean_distance(x1, x2)?;
    Ok(match label {
        PairLabel::Similar => 0.5 * d,
        PairLabel::Dissimilar => 0.5 * (margin - d).max(0.0),
    })
}

/// `max(0, d(a, p) - d(a, n) + margin)`.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<f64> {
    let d_ap = euclidean_distance(anchor, positive)?;
    let d_an = euclidean_distance(anchor, negative)?;
    Ok((d_ap - d_an + margin).max(0.0))
}

/// `d(a, p) + 1 / d(a, n)`; no margin needed.
pub fn reciprocal_triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64]) -> Result<f64> {
    let d_ap = euclidean_distance(anchor, positive)?;
    let d_an = euclidean_distance(anchor, negative)?;
    if d_an < RECIPROCAL_GUARD {
        return Err(Error::DegenerateNegative(d_an));
    }
    Ok(d_ap + 1.0 / d_an)
}

/// A triplet loss value with gradients for its three inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletGrad {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

fn triplet_grad_from(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    loss: f64,
    w_ap: f64,
    w_an: f64,
    d_ap: f64,
    d_an: f64,
) -> TripletGrad {
    // loss = f(d_ap, d_an) with df/dd_ap = w_ap, df/dd_an = w_an
    let g_ap = distance_grad(anchor, positive, d_ap);
    let g_an = distance_grad(anchor, negative, d_an);
    TripletGrad {
        loss,
        anchor: g_ap
            .iter()
            .zip(&g_an)
            .map(|(p, n)| w_ap * p + w_an * n)
            .collect(),
        positive: g_ap.iter().map(|p| -w_ap * p).collect(),
        negative: g_an.iter().map(|n| -w_an * n).collect(),
    }
}

pub fn triplet_loss_grad(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
) -> Result<TripletGrad> {
    let d_ap = euclidean_distance(anchor, positive)?;
    let d_an = euclidean_distance(anchor, negative)?;
    let raw = d_ap - d_an + margin;
    let active = if raw > 0.0 { 1.0 } else { 0.0 };
    Ok(triplet_grad_from(
        anchor,
        positive,
        negative,
        raw.max(0.0),
        active,
        -active,
        d_ap,
        d_an,
    ))
}

pub fn reciprocal_triplet_loss_grad(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
) -> Result<TripletGrad> {
    let d_ap = euclidean_distance(anchor, positive)?;
    let d_an = euclidean_distance(anchor, negative)?;
    if d_an < RECIPROCAL_GUARD {
        return Err(Error::DegenerateNegative(d_an));
    }
    Ok(triplet_grad_from(
        anchor,
        positive,
        negative,
        d_ap + 1.0 / d_an,
        1.0,
        -1.0 / (d_an * d_an),
        d_ap,
        d_an,
    ))
}

/// Max-shifted cross-entropy of `logits` against `true_class`, and its
/// gradient `softmax(logits) - one_hot(true_class)`.
pub fn softmax_cross_entropy(logits: &[f64], true_class: usize) -> Result<(f64, Vec<f64>)> {
    if true_class >= logits.len() {
        return Err(Error::InvalidParam(format!(
            "class {true_class} outside {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[true_class] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[true_class] -= 1.0;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Softmax plus the margin triplet loss.
    SoftmaxTriplet,
    /// Softmax plus the reciprocal triplet loss.
    SoftmaxReciprocal,
}

/// Which triplet members feed the softmax term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoftmaxMembers {
    /// Mean over anchor, positive and negative.
    Average,
    AnchorOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub mode: LossMode,
    pub lambda: f64,
    /// Margin of the triplet loss (unused by the reciprocal variant).
    pub margin: f64,
    pub softmax_members: SoftmaxMembers,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::SoftmaxReciprocal,
            lambda: 0.01,
            margin: 0.5,
            softmax_members: SoftmaxMembers::Average,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.margin >= 0.0) {
            return Err(Error::InvalidParam("lambda and margin must be >= 0".into()));
        }
        Ok(())
    }
}

/// Gradients of one combined-loss term, ordered anchor, positive, negative.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedGrad {
    pub loss: f64,
    pub embeddings: [Vec<f64>; 3],
    pub logits: [Vec<f64>; 3],
}

/// Softmax term plus `lambda` times the configured triplet term, for one
/// triplet. Inputs are ordered anchor, positive, negative.
pub fn combined_loss(
    config: &LossConfig,
    embeddings: [&[f64]; 3],
    logits: [&[f64]; 3],
    labels: [usize; 3],
) -> Result<f64> {
    combined_loss_grad(config, embeddings, logits, labels).map(|g| g.loss)
}

pub fn combined_loss_grad(
    config: &LossConfig,
    embeddings: [&[f64]; 3],
    logits: [&[f64]; 3],
    labels: [usize; 3],
) -> Result<CombinedGrad> {
    config.validate()?;
    let members: &[usize] = match config.softmax_members {
        SoftmaxMembers::Average => &[0, 1, 2],
        SoftmaxMembers::AnchorOnly => &[0],
    };
    let weight = 1.0 / members.len() as f64;
    let mut logit_grads: [Vec<f64>; 3] = std::array::from_fn(|i| vec![0.0; logits[i].len()]);
    let mut softmax = 0.0;
    for &m in members {
        let (l, g) = softmax_cross_entropy(logits[m], labels[m])?;
        softmax += weight * l;
        logit_grads[m] = g.into_iter().map(|x| weight * x).collect();
    }
    let [a, p, n] = embeddings;
    let trip = match config.mode {
        LossMode::SoftmaxTriplet => triplet_loss_grad(a, p, n, config.margin)?,
        LossMode::SoftmaxReciprocal => reciprocal_triplet_loss_grad(a, p, n)?,
    };
    let scale = |v: Vec<f64>| v.into_iter().map(|x| config.lambda * x).collect::<Vec<_>>();
    Ok(CombinedGrad {
        loss: softmax + config.lambda * trip.loss,
        embeddings: [scale(trip.anchor), scale(trip.positive), scale(trip.negative)],
        logits: logit_grads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
    pub mined: Vec<Triplet>,
}

/// For each anchor: the farthest same-label member and the nearest
/// other-label member, lowest index on ties. Anchors without a positive or
/// without a negative are skipped.
pub fn batch_hard_mine(embeddings: &[Vec<f64>], labels: &[u32]) -> Result<TripletBatch> {
    if embeddings.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} embeddings but {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let n = embeddings.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean_distance(&embeddings[i], &embeddings[j])?;
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut mined = Vec::new();
    for a in 0..n {
        let mut positive: Option<usize> = None;
        let mut negative: Option<usize> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = dist[a * n + j];
            if labels[j] == labels[a] {
                if positive.is_none_or(|p| d > dist[a * n + p]) {
                    positive = Some(j);
                }
            } else if negative.is_none_or(|q| d < dist[a * n + q]) {
                negative = Some(j);
            }
        }
        if let (Some(positive), Some(negative)) = (positive, negative) {
            mined.push(Triplet {
                anchor: a,
                positive,
                negative,
            });
        }
    }
    if mined.is_empty() {
        return Err(Error::NoValidAnchors);
    }
    Ok(TripletBatch {
        embeddings: embeddings.to_vec(),
        labels: labels.to_vec(),
        mined,
    })
}
