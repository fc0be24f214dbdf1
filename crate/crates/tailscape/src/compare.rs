//! Multi-variant, multi-seed comparison runs with shared data and shared
//! per-seed initialization. Emits mean and standard deviation of the final
//! overall / Many / Med / Few accuracies plus the final tail-split dominant
//! Hessian eigenvalue for each variant.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::{dataset_fingerprint, final_probes, persist_run};
use crate::config::{TrainConfig, Variant};
use crate::data::LongTailDataset;
use crate::error::{Error, Result};
use crate::net::Network;
use crate::trainer::run;

/// Final numbers of one (variant, seed) run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub overall: f64,
    pub many: Option<f64>,
    pub med: Option<f64>,
    pub few: Option<f64>,
    pub tail_lambda_max: Option<f64>,
}

/// Mean +- stddev over seeds for one variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub per_seed: Vec<SeedOutcome>,
    pub mean_overall: f64,
    pub std_overall: f64,
    pub mean_many: Option<f64>,
    pub mean_med: Option<f64>,
    pub mean_few: Option<f64>,
    pub std_few: Option<f64>,
    pub mean_tail_lambda_max: Option<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn mean_opt(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().copied().flatten().collect();
    if present.len() == values.len() && !present.is_empty() {
        Some(mean_std(&present).0)
    } else {
        None
    }
}

/// Run every variant over every seed. All runs share `train`/`eval`; runs
/// with the same seed share their initialization. When `out_root` is given,
/// each run's artifacts are persisted under `out_root/runs/`.
pub fn compare(
    train: &LongTailDataset,
    eval_set: &LongTailDataset,
    variants: &[Variant],
    seeds: &[u64],
    base_cfg: &TrainConfig,
    out_root: Option<&Path>,
    data_dir: Option<&Path>,
) -> Result<Vec<VariantSummary>> {
    if variants.is_empty() {
        return Err(Error::InvalidArgument("compare needs at least one variant".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("compare needs at least one seed".into()));
    }
    let fingerprint = match data_dir {
        Some(dir) => dataset_fingerprint(dir)?,
        None => String::from("unpersisted"),
    };
    let jobs: Vec<(usize, Variant, u64)> = variants
        .iter()
        .enumerate()
        .flat_map(|(slot, &v)| seeds.iter().map(move |&s| (slot, v, s)))
        .collect();
    let outcomes: Vec<Result<(usize, SeedOutcome)>> = jobs
        .par_iter()
        .map(|&(slot, variant, seed)| {
            let cfg = TrainConfig { variant, seed, ..base_cfg.clone() };
            let result = run(train, eval_set, &cfg)?;
            let net = Network::new(result.arch.clone())?;
            let probes = final_probes(&net, &result.final_theta, train, seed)?;
            if let Some(root) = out_root {
                let dir = root
                    .join("runs")
                    .join(format!("{}-s{seed}", variant.to_string().to_ascii_lowercase()));
                persist_run(&dir, &cfg, &result, &fingerprint, &probes)?;
            }
            let report = result.reports.last().expect("at least the initial report");
            Ok((
                slot,
                SeedOutcome {
                    seed,
                    overall: report.overall,
                    many: report.many,
                    med: report.med,
                    few: report.few,
                    tail_lambda_max: probes.lambda_max_tail,
                },
            ))
        })
        .collect();
    let mut by_variant: Vec<(Variant, Vec<SeedOutcome>)> =
        variants.iter().map(|&v| (v, Vec::new())).collect();
    for outcome in outcomes {
        let (slot, seed_outcome) = outcome?;
        by_variant[slot].1.push(seed_outcome);
    }
    let summaries = by_variant
        .into_iter()
        .map(|(variant, mut per_seed)| {
            per_seed.sort_by_key(|o| o.seed);
            let overall: Vec<f64> = per_seed.iter().map(|o| o.overall).collect();
            let (mean_overall, std_overall) = mean_std(&overall);
            let fews: Vec<Option<f64>> = per_seed.iter().map(|o| o.few).collect();
            let std_few = if fews.iter().all(Option::is_some) {
                let vals: Vec<f64> = fews.iter().map(|f| f.unwrap()).collect();
                Some(mean_std(&vals).1)
            } else {
                None
            };
            VariantSummary {
                variant: variant.to_string(),
                mean_overall,
                std_overall,
                mean_many: mean_opt(&per_seed.iter().map(|o| o.many).collect::<Vec<_>>()),
                mean_med: mean_opt(&per_seed.iter().map(|o| o.med).collect::<Vec<_>>()),
                mean_few: mean_opt(&fews),
                std_few,
                mean_tail_lambda_max: mean_opt(
                    &per_seed.iter().map(|o| o.tail_lambda_max).collect::<Vec<_>>(),
                ),
                per_seed,
            }
        })
        .collect();
    Ok(summaries)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

/// Plain-text table of a comparison.
pub fn render_table(summaries: &[VariantSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>16} {:>8} {:>8} {:>16} {:>12}",
        "variant", "overall", "many", "med", "few", "tail_lmax"
    );
    for s in summaries {
        let _ = writeln!(
            out,
            "{:<12} {:>8.4} ±{:>6.4} {:>8} {:>8} {:>8} ±{:>6} {:>12}",
            s.variant,
            s.mean_overall,
            s.std_overall,
            fmt_opt(s.mean_many),
            fmt_opt(s.mean_med),
            fmt_opt(s.mean_few),
            s.std_few.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()),
            fmt_opt(s.mean_tail_lambda_max),
        );
    }
    out
}

/// CSV form of a comparison (one row per variant).
pub fn render_csv(summaries: &[VariantSummary]) -> String {
    let mut out = String::from(
        "variant,mean_overall,std_overall,mean_many,mean_med,mean_few,std_few,mean_tail_lambda_max\n",
    );
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.variant,
            s.mean_overall,
            s.std_overall,
            s.mean_many.map(|x| x.to_string()).unwrap_or_default(),
            s.mean_med.map(|x| x.to_string()).unwrap_or_default(),
            s.mean_few.map(|x| x.to_string()).unwrap_or_default(),
            s.std_few.map(|x| x.to_string()).unwrap_or_default(),
            s.mean_tail_lambda_max.map(|x| x.to_string()).unwrap_or_default(),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, generate_eval, GaussianMixtureSpec};
    use approx::assert_relative_eq;

    fn toy() -> (LongTailDataset, LongTailDataset, TrainConfig) {
        let spec = GaussianMixtureSpec::on_sphere(3, 2, 3.0, 0.5, 30, 6.0, 9).unwrap();
        let train = generate(&spec).unwrap();
        let eval = generate_eval(&spec, &train, 8).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            hidden: vec![6],
            groups: 2,
            warmup_frac: 0.34,
            track_gradsim: false,
            ..TrainConfig::default()
        };
        (train, eval, cfg)
    }

    #[test]
    fn single_variant_single_seed_equals_final_report() {
        let (train, eval, cfg) = toy();
        let summaries =
            compare(&train, &eval, &[Variant::Ce], &[3], &cfg, None, None).unwrap();
        assert_eq!(summaries.len(), 1);
        let direct = run(&train, &eval, &TrainConfig { variant: Variant::Ce, seed: 3, ..cfg })
            .unwrap();
        let last = direct.reports.last().unwrap();
        assert_eq!(summaries[0].mean_overall, last.overall);
        assert_eq!(summaries[0].std_overall, 0.0);
        assert_eq!(summaries[0].mean_few, last.few);
    }

    #[test]
    fn duplicate_variant_gives_identical_rows() {
        let (train, eval, cfg) = toy();
        let summaries =
            compare(&train, &eval, &[Variant::Ce, Variant::Ce], &[1, 2], &cfg, None, None)
                .unwrap();
        assert_eq!(summaries[0].mean_overall, summaries[1].mean_overall);
        assert_eq!(summaries[0].std_overall, summaries[1].std_overall);
        assert_eq!(summaries[0].mean_few, summaries[1].mean_few);
    }

    #[test]
    fn means_match_hand_averaged_per_seed_reports() {
        let (train, eval, cfg) = toy();
        let seeds = [0u64, 1, 2];
        let variants = [Variant::Ce, Variant::CeGkp, Variant::CeGkpGsa];
        let summaries = compare(&train, &eval, &variants, &seeds, &cfg, None, None).unwrap();
        for (v, summary) in variants.iter().zip(&summaries) {
            // Recomputed-mean oracle: rerun each seed and average by hand.
            let mut sum = 0.0;
            for &seed in &seeds {
                let r = run(&train, &eval, &TrainConfig { variant: *v, seed, ..cfg.clone() })
                    .unwrap();
                sum += r.reports.last().unwrap().overall;
            }
            assert_relative_eq!(
                summary.mean_overall,
                sum / seeds.len() as f64,
                max_relative = 1e-12
            );
            assert_eq!(summary.per_seed.len(), seeds.len());
        }
    }

    #[test]
    fn compare_persists_runs_without_touching_inputs() {
        let (train, eval, cfg) = toy();
        let spec = GaussianMixtureSpec::on_sphere(3, 2, 3.0, 0.5, 30, 6.0, 9).unwrap();
        let data_dir = tempfile::tempdir().unwrap();
        crate::data::save_dataset_dir(data_dir.path(), &spec, &train, &eval).unwrap();
        let before = dataset_fingerprint(data_dir.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        compare(
            &train,
            &eval,
            &[Variant::Ce],
            &[0],
            &cfg,
            Some(out.path()),
            Some(data_dir.path()),
        )
        .unwrap();
        assert!(out.path().join("runs/ce-s0/metrics.csv").exists());
        assert_eq!(dataset_fingerprint(data_dir.path()).unwrap(), before);
    }

    #[test]
    fn rejects_empty_requests() {
        let (train, eval, cfg) = toy();
        assert!(compare(&train, &eval, &[], &[0], &cfg, None, None).is_err());
        assert!(compare(&train, &eval, &[Variant::Ce], &[], &cfg, None, None).is_err());
    }
}
