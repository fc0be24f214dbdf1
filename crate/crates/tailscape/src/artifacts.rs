//! Run-directory bookkeeping: resolved-config echo, dataset fingerprints,
//! metric CSV streams, checkpoints, and the probe report.
//!
//! A persisted run directory contains everything needed to re-run the
//! experiment bit-identically: `config.resolved`, `fingerprint.txt`,
//! the metric CSVs, `checkpoint_final.bin`, `bank.bin`, per-group Fisher
//! files, and `probes.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::data::{LongTailDataset, SplitTag};
use crate::error::Result;
use crate::net::{write_param_file, Network};
use crate::probes::{hessian_trace, lambda_max};
use crate::trainer::RunResult;

/// First 8 hex chars of the SHA-256 of the canonical config echo.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let digest = Sha256::digest(cfg.echo_string().as_bytes());
    hex_prefix(&digest, 8)
}

fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(chars);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

/// Content hash over the dataset directory's files (train, eval, sidecar).
pub fn dataset_fingerprint(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for name in ["train.csv", "eval.csv", "meta.json"] {
        let path = dir.join(name);
        if path.exists() {
            hasher.update(name.as_bytes());
            hasher.update(std::fs::read(&path)?);
        }
    }
    let digest = hasher.finalize();
    Ok(hex_prefix(&digest, 64))
}

/// Create `{root}/{timestamp}-{config hash}` (suffixing on collision).
pub fn create_run_dir(root: &Path, cfg: &TrainConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(root)?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%3f");
    let base = format!("{stamp}-{}", config_hash(cfg));
    let mut dir = root.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{base}-{n}"));
        n += 1;
    }
    std::fs::create_dir(&dir)?;
    Ok(dir)
}

/// Scalar sharpness probes of a finished run, per frequency bucket.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub lambda_max_all: f64,
    pub lambda_max_head: Option<f64>,
    pub lambda_max_tail: Option<f64>,
    pub trace_all: f64,
}

/// Power-iteration and Hutchinson probes on the training loss at `theta`,
/// overall and restricted to the Many / Few buckets.
pub fn final_probes(
    net: &Network,
    theta: &[f64],
    train: &LongTailDataset,
    seed: u64,
) -> Result<ProbeSummary> {
    let all: Vec<_> = train.samples.iter().collect();
    let lambda_all = lambda_max(net, theta, &all, 200, seed)?;
    let trace_all = hessian_trace(net, theta, &all, 32, seed)?;
    let bucket = |tag: SplitTag| -> Result<Option<f64>> {
        let subset = train.samples_with_tag(tag);
        if subset.is_empty() {
            return Ok(None);
        }
        Ok(Some(lambda_max(net, theta, &subset, 200, seed)?))
    };
    Ok(ProbeSummary {
        lambda_max_all: lambda_all,
        lambda_max_head: bucket(SplitTag::Many)?,
        lambda_max_tail: bucket(SplitTag::Few)?,
        trace_all,
    })
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_metrics_csv(path: &Path, result: &RunResult) -> Result<()> {
    let mut out = String::from("step,epoch,alpha,lr,total_loss,data_loss,gkp_value\n");
    for m in &result.metrics {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            m.step, m.epoch, m.alpha, m.lr, m.total_loss, m.data_loss, m.gkp_value
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_eval_csv(path: &Path, result: &RunResult) -> Result<()> {
    let classes = result.reports.first().map_or(0, |r| r.per_class.len());
    let mut header = String::from("epoch,overall,many,med,few");
    for c in 0..classes {
        let _ = write!(header, ",acc_{c}");
    }
    for c in 0..classes {
        let _ = write!(header, ",q_{c}");
    }
    let mut out = header + "\n";
    for r in &result.reports {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            r.epoch,
            r.overall,
            opt_cell(r.many),
            opt_cell(r.med),
            opt_cell(r.few)
        );
        for v in &r.per_class {
            let _ = write!(out, ",{v}");
        }
        for v in &r.per_class_q {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_quality_csv(path: &Path, result: &RunResult) -> Result<()> {
    let mut out = String::from("epoch,class,q\n");
    for row in &result.quality {
        let _ = writeln!(out, "{},{},{}", row.epoch, row.class, row.q);
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_gradsim_csv(path: &Path, result: &RunResult) -> Result<()> {
    let mut out = String::from("epoch,class,cosine\n");
    for row in &result.gradsim {
        let _ = writeln!(out, "{},{},{}", row.epoch, row.class, row.cosine);
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_gsa_csv(path: &Path, result: &RunResult) -> Result<()> {
    let mut out = String::from(
        "step,group,rho,rho_unscaled,direction_norm,dot_with_global,regularizer,\
         perturbed_loss,degenerate\n",
    );
    for d in &result.gsa_diag {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            d.step,
            d.group,
            d.rho,
            d.rho_unscaled,
            d.direction_norm,
            d.dot_with_global,
            d.regularizer,
            d.perturbed_loss,
            d.degenerate
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Insert `key -> summary` into a JSON report (an object keyed by
/// checkpoint path), creating the file if needed.
pub fn append_probe_report(path: &Path, key: &str, value: serde_json::Value) -> Result<()> {
    let mut report: BTreeMap<String, serde_json::Value> = if path.exists() {
        serde_json::from_str(&std::fs::read_to_string(path)?)?
    } else {
        BTreeMap::new()
    };
    report.insert(key.to_string(), value);
    std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

/// Write every artifact of a finished run into `dir`.
pub fn persist_run(
    dir: &Path,
    cfg: &TrainConfig,
    result: &RunResult,
    fingerprint: &str,
    probes: &ProbeSummary,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.resolved"), cfg.echo_string())?;
    std::fs::write(dir.join("fingerprint.txt"), format!("{fingerprint}\n"))?;
    write_metrics_csv(&dir.join("metrics.csv"), result)?;
    write_eval_csv(&dir.join("eval.csv"), result)?;
    write_quality_csv(&dir.join("quality.csv"), result)?;
    write_gradsim_csv(&dir.join("gradsim.csv"), result)?;
    write_gsa_csv(&dir.join("gsa.csv"), result)?;
    let ckpt = dir.join("checkpoint_final.bin");
    write_param_file(&ckpt, &result.arch, &result.final_theta)?;
    crate::grouping::save_bank(&dir.join("bank.bin"), &result.bank)?;
    if let Some(partition) = &result.partition {
        for (g, fisher) in partition.fisher.iter().enumerate() {
            if let Some(values) = fisher {
                write_param_file(&dir.join(format!("fisher_group_{g}.bin")), &result.arch, values)?;
            }
        }
    }
    append_probe_report(
        &dir.join("probes.json"),
        &ckpt.display().to_string(),
        serde_json::to_value(probes)?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::data::{generate, generate_eval, GaussianMixtureSpec};
    use crate::trainer::run;

    fn quick_run() -> (TrainConfig, RunResult, LongTailDataset) {
        let spec = GaussianMixtureSpec::on_sphere(3, 2, 3.0, 0.5, 30, 6.0, 4).unwrap();
        let train = generate(&spec).unwrap();
        let eval = generate_eval(&spec, &train, 8).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            hidden: vec![6],
            groups: 2,
            warmup_frac: 0.34,
            track_gradsim: false,
            variant: Variant::CeGkpGsa,
            ..TrainConfig::default()
        };
        let result = run(&train, &eval, &cfg).unwrap();
        (cfg, result, train)
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = TrainConfig::default();
        let mut b = TrainConfig::default();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.lr = 0.123;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 8);
    }

    #[test]
    fn fingerprint_tracks_content() {
        let spec = GaussianMixtureSpec::on_sphere(2, 2, 3.0, 0.5, 10, 2.0, 1).unwrap();
        let train = generate(&spec).unwrap();
        let eval = generate_eval(&spec, &train, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        crate::data::save_dataset_dir(dir.path(), &spec, &train, &eval).unwrap();
        let f1 = dataset_fingerprint(dir.path()).unwrap();
        let f2 = dataset_fingerprint(dir.path()).unwrap();
        assert_eq!(f1, f2);
        std::fs::write(dir.path().join("train.csv"), "0,1.0,2.0\n").unwrap();
        assert_ne!(dataset_fingerprint(dir.path()).unwrap(), f1);
    }

    #[test]
    fn run_dir_names_do_not_collide() {
        let root = tempfile::tempdir().unwrap();
        let cfg = TrainConfig::default();
        let a = create_run_dir(root.path(), &cfg).unwrap();
        let b = create_run_dir(root.path(), &cfg).unwrap();
        assert_ne!(a, b);
        assert!(a.exists() && b.exists());
    }

    #[test]
    fn persisted_run_contains_every_artifact() {
        let (cfg, result, train) = quick_run();
        let net = Network::new(result.arch.clone()).unwrap();
        let probes = final_probes(&net, &result.final_theta, &train, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        persist_run(dir.path(), &cfg, &result, "abc123", &probes).unwrap();
        for name in [
            "config.resolved",
            "fingerprint.txt",
            "metrics.csv",
            "eval.csv",
            "quality.csv",
            "gradsim.csv",
            "gsa.csv",
            "checkpoint_final.bin",
            "bank.bin",
            "probes.json",
        ] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        // Fisher files exist for each group of the final partition.
        let partition = result.partition.as_ref().unwrap();
        for g in 0..partition.groups {
            assert!(dir.path().join(format!("fisher_group_{g}.bin")).exists());
        }
        // The resolved config parses back to the same configuration.
        let parsed = crate::config::resolve_config(
            Some(&dir.path().join("config.resolved")),
            &[],
        )
        .unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn probe_report_appends_by_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probes.json");
        append_probe_report(&path, "a", serde_json::json!({"x": 1})).unwrap();
        append_probe_report(&path, "b", serde_json::json!({"x": 2})).unwrap();
        let report: BTreeMap<String, serde_json::Value> =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(report.len(), 2);
        assert_eq!(report["a"]["x"], 1);
    }

    #[test]
    fn final_probes_cover_buckets_present() {
        let (_, result, train) = quick_run();
        let net = Network::new(result.arch.clone()).unwrap();
        let probes = final_probes(&net, &result.final_theta, &train, 1).unwrap();
        assert!(probes.lambda_max_all.is_finite());
        assert!(probes.trace_all.is_finite());
        // The 3-class r=6 toy set has Few classes but no Many classes.
        assert!(probes.lambda_max_tail.is_some());
        assert!(probes.lambda_max_head.is_none());
    }
}
