//! Point cloud saliency: per-point scores from the softmax loss gradient
//! along each point's radius about the centroid, and iterative dropping of
//! points until the classification head changes its mind.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cloudops::to_spherical;
use crate::embednet::{backward, forward, predicted_class, NetworkParams};
use crate::error::{Error, Result};
use crate::losses::softmax_cross_entropy;
use crate::model::PointCloud;

/// Radii below this get a zero score.
pub const RADIUS_EPSILON: f64 = 1e-9;

fn check_class(params: &NetworkParams, true_class: usize) -> Result<()> {
    let classes = params.spec().class_count;
    if true_class >= classes {
        return Err(Error::InvalidParam(format!(
            "class {true_class} is outside the {classes}-class head"
        )));
    }
    Ok(())
}

/// `s_i = -(dL/dr_i) * r_i` for the softmax loss of `true_class`, which
/// reduces to `-grad_i . (p_i - center)`.
pub fn pcsm_scores(params: &NetworkParams, cloud: &PointCloud, true_class: usize) -> Result<Vec<f64>> {
    check_class(params, true_class)?;
    if cloud.len() < 2 {
        return Err(Error::InvalidParam("saliency needs at least two points".into()));
    }
    let trace = forward(params, cloud)?;
    let (_, d_logits) = softmax_cross_entropy(&trace.logits, true_class)?;
    let d_embedding = vec![0.0; trace.embedding.len()];
    let grads = backward(params, &trace, &d_embedding, &d_logits)?.input;
    let spherical = to_spherical(cloud);
    let c = spherical.center;
    Ok(cloud
        .points
        .iter()
        .zip(&grads)
        .zip(spherical.radii())
        .map(|((p, g), r)| {
            if r < RADIUS_EPSILON {
                0.0
            } else {
                -(g[0] * (p[0] - c[0]) + g[1] * (p[1] - c[1]) + g[2] * (p[2] - c[2]))
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropMode {
    /// Highest score first, lowest index on ties.
    Saliency,
    /// Uniformly random survivors; the comparison baseline.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropStatus {
    /// Stopped at the first misclassification.
    Misclassified,
    /// Ran all requested iterations with the label intact.
    Completed,
    /// Too few points left for another round.
    Exhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropOutcome {
    /// Original point indices in the order they were removed.
    pub dropped: Vec<usize>,
    /// Number of completed drop rounds when the prediction first differed
    /// from the true class.
    pub first_misclassification: Option<usize>,
    pub status: DropStatus,
}

/// Probes the prediction, then removes `drop_count` points, up to
/// `max_iters` rounds. The probe also runs after the last round.
pub fn pcsm_drop<R: Rng + ?Sized>(
    params: &NetworkParams,
    cloud: &PointCloud,
    true_class: usize,
    drop_count: usize,
    max_iters: usize,
    mode: DropMode,
    rng: &mut R,
) -> Result<DropOutcome> {
    check_class(params, true_class)?;
    if drop_count == 0 {
        return Err(Error::InvalidParam("drop_count must be >= 1".into()));
    }
    let mut outcome = DropOutcome {
        dropped: Vec::new(),
        first_misclassification: None,
        status: DropStatus::Completed,
    };
    if max_iters == 0 {
        return Ok(outcome);
    }
    // Surviving original indices.
    let mut alive: Vec<usize> = (0..cloud.len()).collect();
    for round in 0..=max_iters {
        let current = cloud.select(&alive);
        if predicted_class(&forward(params, &current)?.logits) != true_class {
            outcome.first_misclassification = Some(round);
            outcome.status = DropStatus::Misclassified;
            break;
        }
        if round == max_iters {
            break;
        }
        if alive.len() <= drop_count {
            outcome.status = DropStatus::Exhausted;
            break;
        }
        let mut victims: Vec<usize> = match mode {
            DropMode::Saliency => {
                let scores = pcsm_scores(params, &current, true_class)?;
                let mut order: Vec<usize> = (0..alive.len()).collect();
                order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                order.truncate(drop_count);
                order
            }
            DropMode::Random => sample(rng, alive.len(), drop_count).into_vec(),
        };
        outcome.dropped.extend(victims.iter().map(|&v| alive[v]));
        victims.sort_unstable();
        for v in victims.into_iter().rev() {
            alive.remove(v);
        }
    }
    Ok(outcome)
}

/// Normalized rank of each score in `[0, 1]`: 0 for the lowest, 1 for the
/// highest, ties broken by index.
pub fn normalized_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let denom = scores.len().saturating_sub(1).max(1) as f64;
    let mut ranks = vec![0.0; scores.len()];
    for (rank, i) in order.into_iter().enumerate() {
        ranks[i] = rank as f64 / denom;
    }
    ranks
}

/// Blue (least salient) to red (most salient) by normalized rank.
pub fn rank_colors(scores: &[f64]) -> Vec<[u8; 3]> {
    normalized_ranks(scores)
        .into_iter()
        .map(|t| [(255.0 * t).round() as u8, 0, (255.0 * (1.0 - t)).round() as u8])
        .collect()
}
