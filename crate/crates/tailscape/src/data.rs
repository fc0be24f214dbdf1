//! Synthetic long-tailed dataset generation and class-frequency statistics.
//!
//! Datasets are Gaussian mixtures with an exponential-decay class-count
//! profile `n_c = round(n_max * r^(-c / (C-1)))`, head classes first. All
//! generation is seeded and bit-for-bit reproducible.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class frequency bucket: Many (> 100 samples), Med (20..=100), Few (< 20).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Many,
    Med,
    Few,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitTag::Many => write!(f, "many"),
            SplitTag::Med => write!(f, "med"),
            SplitTag::Few => write!(f, "few"),
        }
    }
}

/// One labeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// A labeled sample set with per-class counts and frequency split tags.
///
/// Invariants: counts sum to the sample total, counts are non-increasing in
/// class index, and `imbalance_ratio` is the achieved head/tail count ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTailDataset {
    pub samples: Vec<Sample>,
    pub class_counts: Vec<usize>,
    pub imbalance_ratio: f64,
    pub split: Vec<SplitTag>,
    pub feature_dim: usize,
}

impl LongTailDataset {
    pub fn classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped by class label.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.classes()];
        for (i, s) in self.samples.iter().enumerate() {
            by_class[s.label].push(i);
        }
        by_class
    }

    /// All samples whose class carries the given frequency tag.
    pub fn samples_with_tag(&self, tag: SplitTag) -> Vec<&Sample> {
        self.samples.iter().filter(|s| self.split[s.label] == tag).collect()
    }

    /// Check the structural invariants; used after generation and loading.
    pub fn validate(&self) -> Result<()> {
        let c = self.class_counts.len();
        if c < 1 {
            return Err(Error::InvalidSpec("dataset has no classes".into()));
        }
        if self.split.len() != c {
            return Err(Error::InvalidSpec(format!(
                "split has {} tags for {} classes",
                self.split.len(),
                c
            )));
        }
        let total: usize = self.class_counts.iter().sum();
        if total != self.samples.len() {
            return Err(Error::InvalidSpec(format!(
                "class counts sum to {total} but dataset has {} samples",
                self.samples.len()
            )));
        }
        if self.class_counts.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidSpec(
                "class counts must be non-increasing (head classes first)".into(),
            ));
        }
        if self.class_counts.iter().any(|&n| n == 0) {
            return Err(Error::InvalidSpec("every class needs at least one sample".into()));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= c {
                return Err(Error::InvalidSpec(format!(
                    "sample {i} has label {} outside 0..{c}",
                    s.label
                )));
            }
            if s.features.len() != self.feature_dim {
                return Err(Error::InvalidSpec(format!(
                    "sample {i} has {} features, expected {}",
                    s.features.len(),
                    self.feature_dim
                )));
            }
        }
        let expected_tags = split_tags(&self.class_counts);
        if expected_tags != self.split {
            return Err(Error::InvalidSpec("split tags do not match count thresholds".into()));
        }
        Ok(())
    }
}

/// Generator spec for a long-tailed Gaussian mixture.
///
/// `means` are placed deterministically from the seed on a sphere of radius
/// `mean_radius`: evenly spaced with a random rotation in 2-D, random unit
/// directions otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureSpec {
    pub classes: usize,
    pub feature_dim: usize,
    pub means: Vec<Vec<f64>>,
    pub covariance_scale: f64,
    pub n_max: usize,
    pub imbalance_ratio: f64,
    pub seed: u64,
}

impl GaussianMixtureSpec {
    /// Build a spec with class means placed on a sphere of `mean_radius`.
    pub fn on_sphere(
        classes: usize,
        feature_dim: usize,
        mean_radius: f64,
        covariance_scale: f64,
        n_max: usize,
        imbalance_ratio: f64,
        seed: u64,
    ) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::InvalidSpec("feature_dim must be >= 1".into()));
        }
        if !(mean_radius.is_finite() && mean_radius > 0.0) {
            return Err(Error::InvalidSpec("mean_radius must be positive".into()));
        }
        let means = sphere_means(classes, feature_dim, mean_radius, seed);
        Self::with_means(means, covariance_scale, n_max, imbalance_ratio, seed)
    }

    /// Build a spec with explicitly provided class means.
    pub fn with_means(
        means: Vec<Vec<f64>>,
        covariance_scale: f64,
        n_max: usize,
        imbalance_ratio: f64,
        seed: u64,
    ) -> Result<Self> {
        let classes = means.len();
        let feature_dim = means.first().map_or(0, Vec::len);
        let spec = Self {
            classes,
            feature_dim,
            means,
            covariance_scale,
            n_max,
            imbalance_ratio,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.means.len() != self.classes {
            return Err(Error::InvalidSpec(format!(
                "{} means for {} classes",
                self.means.len(),
                self.classes
            )));
        }
        if self.feature_dim == 0 || self.means.iter().any(|m| m.len() != self.feature_dim) {
            return Err(Error::InvalidSpec("inconsistent mean dimensions".into()));
        }
        if !(self.covariance_scale.is_finite() && self.covariance_scale > 0.0) {
            return Err(Error::InvalidSpec("covariance_scale must be positive".into()));
        }
        if !(self.imbalance_ratio.is_finite() && self.imbalance_ratio >= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "imbalance ratio must be >= 1, got {}",
                self.imbalance_ratio
            )));
        }
        if (self.n_max as f64) < self.imbalance_ratio {
            return Err(Error::InvalidSpec(format!(
                "n_max ({}) must be >= imbalance ratio ({}) so the tail class keeps a sample",
                self.n_max, self.imbalance_ratio
            )));
        }
        Ok(())
    }
}

fn sphere_means(classes: usize, feature_dim: usize, radius: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    if feature_dim == 2 {
        // Even angular spacing with a seeded rotation keeps separability
        // controlled by radius alone.
        let offset: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
        (0..classes)
            .map(|c| {
                let angle = offset + std::f64::consts::TAU * c as f64 / classes as f64;
                vec![radius * angle.cos(), radius * angle.sin()]
            })
            .collect()
    } else {
        (0..classes)
            .map(|_| {
                let mut v: Vec<f64> =
                    (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for x in &mut v {
                        *x *= radius / norm;
                    }
                }
                v
            })
            .collect()
    }
}

/// Exponential-decay count profile: `n_c = round(n_max * r^(-c/(C-1)))`.
pub fn class_counts(n_max: usize, imbalance_ratio: f64, classes: usize) -> Vec<usize> {
    (0..classes)
        .map(|c| {
            let exponent = -(c as f64) / (classes as f64 - 1.0);
            let n = (n_max as f64) * imbalance_ratio.powf(exponent);
            n.round().max(1.0) as usize
        })
        .collect()
}

/// Tag classes by sample count: Many iff n > 100, Med iff 20 <= n <= 100, Few iff n < 20.
pub fn split_tags(counts: &[usize]) -> Vec<SplitTag> {
    counts
        .iter()
        .map(|&n| {
            if n > 100 {
                SplitTag::Many
            } else if n >= 20 {
                SplitTag::Med
            } else {
                SplitTag::Few
            }
        })
        .collect()
}

/// Generate the long-tailed training set for `spec`.
///
/// Identical specs (including seed) produce identical samples bit-for-bit.
/// Samples are stored class-major (all of class 0 first).
pub fn generate(spec: &GaussianMixtureSpec) -> Result<LongTailDataset> {
    spec.validate()?;
    let counts = class_counts(spec.n_max, spec.imbalance_ratio, spec.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let samples = draw_mixture(spec, &counts, &mut rng);
    let achieved = counts[0] as f64 / counts[spec.classes - 1] as f64;
    let ds = LongTailDataset {
        samples,
        split: split_tags(&counts),
        class_counts: counts,
        imbalance_ratio: achieved,
        feature_dim: spec.feature_dim,
    };
    ds.validate()?;
    Ok(ds)
}

/// Generate a balanced held-out evaluation set for the same mixture.
///
/// Uses a separate RNG stream from the training draw; split tags are
/// inherited from the training counts so reports bucket classes by their
/// training frequency.
pub fn generate_eval(
    spec: &GaussianMixtureSpec,
    train: &LongTailDataset,
    per_class: usize,
) -> Result<LongTailDataset> {
    spec.validate()?;
    if per_class == 0 {
        return Err(Error::InvalidSpec("eval set needs at least 1 sample per class".into()));
    }
    if train.classes() != spec.classes {
        return Err(Error::InvalidSpec("train dataset does not match spec class count".into()));
    }
    let counts = vec![per_class; spec.classes];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2);
    let samples = draw_mixture(spec, &counts, &mut rng);
    Ok(LongTailDataset {
        samples,
        class_counts: counts,
        imbalance_ratio: 1.0,
        split: train.split.clone(),
        feature_dim: spec.feature_dim,
    })
}

fn draw_mixture(
    spec: &GaussianMixtureSpec,
    counts: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<Sample> {
    let mut samples = Vec::with_capacity(counts.iter().sum());
    for (label, &n) in counts.iter().enumerate() {
        let mean = &spec.means[label];
        for _ in 0..n {
            let features = mean
                .iter()
                .map(|&m| m + spec.covariance_scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            samples.push(Sample { features, label });
        }
    }
    samples
}

// ── Persistence ─────────────────────────────────────────────────────────────

/// Sidecar metadata stored next to the CSV files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub spec: GaussianMixtureSpec,
    pub class_counts: Vec<usize>,
    pub achieved_imbalance_ratio: f64,
    pub split: Vec<SplitTag>,
    pub eval_per_class: usize,
    pub train_file: String,
    pub eval_file: String,
}

/// Format a feature with 17 significant digits (exact f64 round-trip).
fn fmt_feature(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_samples_csv(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for s in samples {
        let mut row = Vec::with_capacity(1 + s.features.len());
        row.push(s.label.to_string());
        row.extend(s.features.iter().map(|&x| fmt_feature(x)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn read_samples_csv(path: &Path, feature_dim: usize) -> Result<Vec<Sample>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut samples = Vec::new();
    for (i, record) in r.records().enumerate() {
        let record = record?;
        if record.len() != feature_dim + 1 {
            return Err(Error::MalformedFile {
                path: path.display().to_string(),
                reason: format!("row {i} has {} fields, expected {}", record.len(), feature_dim + 1),
            });
        }
        let label: usize = record[0].parse().map_err(|_| Error::MalformedFile {
            path: path.display().to_string(),
            reason: format!("row {i}: bad label {:?}", &record[0]),
        })?;
        let mut features = Vec::with_capacity(feature_dim);
        for j in 1..record.len() {
            let x: f64 = record[j].parse().map_err(|_| Error::MalformedFile {
                path: path.display().to_string(),
                reason: format!("row {i}: bad feature {:?}", &record[j]),
            })?;
            features.push(x);
        }
        samples.push(Sample { features, label });
    }
    Ok(samples)
}

/// Persist train set, eval set, and JSON sidecar into `dir`.
pub fn save_dataset_dir(
    dir: &Path,
    spec: &GaussianMixtureSpec,
    train: &LongTailDataset,
    eval: &LongTailDataset,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        spec: spec.clone(),
        class_counts: train.class_counts.clone(),
        achieved_imbalance_ratio: train.imbalance_ratio,
        split: train.split.clone(),
        eval_per_class: eval.class_counts.first().copied().unwrap_or(0),
        train_file: "train.csv".into(),
        eval_file: "eval.csv".into(),
    };
    write_samples_csv(&dir.join(&meta.train_file), &train.samples)?;
    write_samples_csv(&dir.join(&meta.eval_file), &eval.samples)?;
    let json = serde_json::to_string_pretty(&meta)?;
    std::fs::write(dir.join("meta.json"), json)?;
    Ok(())
}

/// Load a dataset directory written by [`save_dataset_dir`].
pub fn load_dataset_dir(dir: &Path) -> Result<(LongTailDataset, LongTailDataset, DatasetMeta)> {
    let meta_path = dir.join("meta.json");
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
    let p = meta.spec.feature_dim;
    let train_samples = read_samples_csv(&dir.join(&meta.train_file), p)?;
    let eval_samples = read_samples_csv(&dir.join(&meta.eval_file), p)?;
    let train = LongTailDataset {
        samples: train_samples,
        class_counts: meta.class_counts.clone(),
        imbalance_ratio: meta.achieved_imbalance_ratio,
        split: meta.split.clone(),
        feature_dim: p,
    };
    train.validate()?;
    let eval = LongTailDataset {
        samples: eval_samples,
        class_counts: vec![meta.eval_per_class; meta.spec.classes],
        imbalance_ratio: 1.0,
        split: meta.split.clone(),
        feature_dim: p,
    };
    Ok((train, eval, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> GaussianMixtureSpec {
        GaussianMixtureSpec::on_sphere(3, 2, 3.0, 0.5, 100, 100.0, seed).unwrap()
    }

    #[test]
    fn counts_two_class_endpoints() {
        assert_eq!(class_counts(100, 100.0, 2), vec![100, 1]);
    }

    #[test]
    fn counts_three_class_geometric_midpoint() {
        assert_eq!(class_counts(100, 100.0, 3), vec![100, 10, 1]);
    }

    #[test]
    fn counts_ten_class_match_decay_formula() {
        let counts = class_counts(500, 100.0, 10);
        // Independent evaluation of the decay profile per class.
        for (c, &n) in counts.iter().enumerate() {
            let expected = (500.0 * 100.0_f64.powf(-(c as f64) / 9.0)).round() as usize;
            assert_eq!(n, expected.max(1), "class {c}");
        }
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(counts[0] / counts[9], 100);
    }

    #[test]
    fn split_tags_follow_thresholds() {
        assert_eq!(split_tags(&[101]), vec![SplitTag::Many]);
        assert_eq!(split_tags(&[100]), vec![SplitTag::Med]);
        assert_eq!(split_tags(&[20]), vec![SplitTag::Med]);
        assert_eq!(split_tags(&[19]), vec![SplitTag::Few]);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(GaussianMixtureSpec::on_sphere(1, 2, 3.0, 0.5, 100, 100.0, 0).is_err());
        assert!(GaussianMixtureSpec::on_sphere(3, 2, 3.0, 0.5, 100, 0.5, 0).is_err());
        assert!(GaussianMixtureSpec::on_sphere(3, 2, 3.0, 0.5, 50, 100.0, 0).is_err());
        assert!(GaussianMixtureSpec::on_sphere(3, 2, 3.0, -1.0, 100, 100.0, 0).is_err());
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = generate(&small_spec(7)).unwrap();
        let b = generate(&small_spec(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seed_same_counts_different_samples() {
        let a = generate(&small_spec(1)).unwrap();
        let b = generate(&small_spec(2)).unwrap();
        assert_eq!(a.class_counts, b.class_counts);
        assert_ne!(a.samples, b.samples);
    }

    #[test]
    fn eval_set_is_balanced_and_inherits_split() {
        let spec = small_spec(3);
        let train = generate(&spec).unwrap();
        let eval = generate_eval(&spec, &train, 25).unwrap();
        assert_eq!(eval.class_counts, vec![25, 25, 25]);
        assert_eq!(eval.split, train.split);
        // Eval stream must differ from the train stream.
        assert_ne!(eval.samples[0].features, train.samples[0].features);
    }

    #[test]
    fn dataset_dir_roundtrip_is_bitwise() {
        let spec = small_spec(11);
        let train = generate(&spec).unwrap();
        let eval = generate_eval(&spec, &train, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset_dir(dir.path(), &spec, &train, &eval).unwrap();
        let (train2, eval2, meta) = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(train, train2);
        assert_eq!(eval, eval2);
        assert_eq!(meta.spec, spec);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn counts_nonincreasing_and_ratio_within_rounding(
                classes in 2usize..12,
                n_max in 2usize..600,
                r in 1.0f64..200.0,
            ) {
                prop_assume!(n_max as f64 >= r);
                let counts = class_counts(n_max, r, classes);
                prop_assert_eq!(counts.len(), classes);
                prop_assert_eq!(counts[0], n_max);
                prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
                prop_assert!(counts.iter().all(|&n| n >= 1));
                // Tail count reproduces n_max / r within rounding of +-1.
                let ideal_tail = n_max as f64 / r;
                let tail = counts[classes - 1] as f64;
                prop_assert!((tail - ideal_tail).abs() <= 1.0 + 1e-9);
            }
        }
    }
}
