//! Per-class feature quality `Q = Dis - beta * ln(Var)`.
//!
//! `Dis` is the minimum centroid distance to any other class and `Var` the
//! mean squared distance of a class's features to its own centroid. Higher
//! is better; the score ranks encoder snapshots for the memory bank.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Floor applied to `Var` so collapsed features keep `Q` finite.
pub const VAR_FLOOR: f64 = 1e-12;

/// Default balance between separation and variance terms.
pub const DEFAULT_BETA: f64 = 0.5;

/// Centroid, intra-class variance, and count for one class's features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeatureStats {
    pub centroid: Vec<f64>,
    pub variance: f64,
    pub count: usize,
}

impl ClassFeatureStats {
    /// Compute centroid and mean squared distance to it.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let dim = features[0].len();
        let mut centroid = vec![0.0; dim];
        for f in features {
            if f.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: f.len() });
            }
            for (c, &x) in centroid.iter_mut().zip(f) {
                *c += x;
            }
        }
        let n = features.len() as f64;
        for c in &mut centroid {
            *c /= n;
        }
        let variance = features
            .iter()
            .map(|f| f.iter().zip(&centroid).map(|(&x, &c)| (x - c) * (x - c)).sum::<f64>())
            .sum::<f64>()
            / n;
        Ok(Self { centroid, variance, count: features.len() })
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Minimum centroid distance from class `c` to any other class.
pub fn inter_class_separation(centroids: &BTreeMap<usize, Vec<f64>>, c: usize) -> Result<f64> {
    if centroids.len() < 2 {
        return Err(Error::InvalidArgument(
            "inter-class separation needs at least 2 classes".into(),
        ));
    }
    let own = centroids
        .get(&c)
        .ok_or_else(|| Error::InvalidArgument(format!("no centroid for class {c}")))?;
    Ok(centroids
        .iter()
        .filter(|(&other, _)| other != c)
        .map(|(_, m)| euclidean(own, m))
        .fold(f64::INFINITY, f64::min))
}

/// `Q = Dis - beta * ln(max(Var, VAR_FLOOR))`.
pub fn quality_score(dis: f64, variance: f64, beta: f64) -> f64 {
    dis - beta * variance.max(VAR_FLOOR).ln()
}

/// Per-class quality scores from per-class feature sets.
///
/// Keys of the returned map match the input map; every class needs at least
/// one feature vector and at least two classes must be present.
pub fn feature_quality(
    features_by_class: &BTreeMap<usize, Vec<Vec<f64>>>,
    beta: f64,
) -> Result<BTreeMap<usize, f64>> {
    let mut stats = BTreeMap::new();
    for (&class, feats) in features_by_class {
        stats.insert(class, ClassFeatureStats::from_features(feats)?);
    }
    let centroids: BTreeMap<usize, Vec<f64>> =
        stats.iter().map(|(&c, s)| (c, s.centroid.clone())).collect();
    let mut scores = BTreeMap::new();
    for (&class, s) in &stats {
        let dis = inter_class_separation(&centroids, class)?;
        scores.insert(class, quality_score(dis, s.variance, beta));
    }
    Ok(scores)
}
