//! Grouped knowledge preservation: per-group diagonal Fisher estimates and
//! the Fisher-weighted quadratic penalty that anchors the encoder to every
//! non-active group's optimum.
//!
//! Penalty (encoder coordinates only, classifier gradient entries are zero):
//!
//! ```text
//! value  = (lambda / 2) * sum_i sum_{j != g} (1 / |G_j|) F_{j,i} (theta_i - theta*_{j,i})^2
//! grad_i =  lambda      * sum_{j != g} (1 / |G_j|) F_{j,i} (theta_i - theta*_{j,i})
//! ```

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::grouping::GroupPartition;
use crate::net::Network;

/// Which count normalizes each group's penalty term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSizeMode {
    /// Total training samples of the group's classes (default).
    Samples,
    /// Number of member classes.
    Classes,
}

/// Non-negative per-parameter importance estimate for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiagonal {
    pub values: Vec<f64>,
    pub sample_count: usize,
}

/// Empirical Fisher diagonal: the mean of squared per-sample gradients.
pub fn fisher_from_grads<I>(grads: I) -> Result<FisherDiagonal>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let mut iter = grads.into_iter();
    let first = iter.next().ok_or(Error::EmptyBatch)?;
    let mut acc: Vec<f64> = first.iter().map(|g| g * g).collect();
    let mut n = 1usize;
    for g in iter {
        if g.len() != acc.len() {
            return Err(Error::DimensionMismatch { expected: acc.len(), got: g.len() });
        }
        for (a, &v) in acc.iter_mut().zip(&g) {
            *a += v * v;
        }
        n += 1;
    }
    for a in &mut acc {
        *a /= n as f64;
        if !a.is_finite() {
            return Err(Error::NumericalAbort("non-finite Fisher entry".into()));
        }
    }
    Ok(FisherDiagonal { values: acc, sample_count: n })
}

/// Empirical Fisher for a group's samples, evaluated at `theta_ref`.
pub fn estimate_fisher(
    net: &Network,
    theta_ref: &[f64],
    samples: &[&Sample],
) -> Result<FisherDiagonal> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let grads = samples
        .iter()
        .map(|s| net.loss_and_grad(theta_ref, &[s], None).map(|(_, g)| g))
        .collect::<Result<Vec<_>>>()?;
    fisher_from_grads(grads)
}

/// Penalty value and gradient for training group `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct GkpTerms {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn group_norm(partition: &GroupPartition, j: usize, mode: GroupSizeMode) -> f64 {
    match mode {
        GroupSizeMode::Samples => partition.sample_count[j] as f64,
        GroupSizeMode::Classes => partition.class_count[j] as f64,
    }
}

/// Evaluate the preservation penalty against all groups other than
/// `active_group`. Only the encoder segment of `theta` is constrained; the
/// returned gradient has the full parameter length with zero classifier
/// entries.
pub fn gkp_penalty(
    theta: &[f64],
    partition: &GroupPartition,
    active_group: usize,
    lambda: f64,
    mode: GroupSizeMode,
) -> Result<GkpTerms> {
    if active_group >= partition.groups {
        return Err(Error::InvalidArgument(format!(
            "active group {active_group} out of {} groups",
            partition.groups
        )));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidArgument("lambda must be finite and >= 0".into()));
    }
    let enc_len = partition.optima.first().map_or(0, Vec::len);
    if enc_len > theta.len() {
        return Err(Error::DimensionMismatch { expected: enc_len, got: theta.len() });
    }
    let mut grad = vec![0.0; theta.len()];
    if lambda == 0.0 {
        return Ok(GkpTerms { value: 0.0, grad });
    }
    let mut quad_sum = 0.0;
    for j in 0..partition.groups {
        if j == active_group {
            continue;
        }
        let fisher = partition.fisher[j].as_ref().ok_or(Error::MissingFisher(j))?;
        if fisher.len() < enc_len {
            return Err(Error::DimensionMismatch { expected: enc_len, got: fisher.len() });
        }
        let inv_size = 1.0 / group_norm(partition, j, mode);
        let optimum = &partition.optima[j];
        for i in 0..enc_len {
            let diff = theta[i] - optimum[i];
            let weighted = inv_size * fisher[i];
            quad_sum += weighted * diff * diff;
            grad[i] += lambda * weighted * diff;
        }
    }
    Ok(GkpTerms { value: 0.5 * lambda * quad_sum, grad })
}
