//! Command-line front end: dataset generation, training runs, geometry
//! probes, and multi-variant comparisons.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 numerical abort (NaN),
//! 3 I/O error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use tailscape::artifacts::{
    append_probe_report, config_hash, create_run_dir, dataset_fingerprint, final_probes,
    persist_run,
};
use tailscape::compare::{compare, render_csv, render_table};
use tailscape::config::{parse_override, resolve_config, TrainConfig, Variant};
use tailscape::data::{
    generate, generate_eval, load_dataset_dir, save_dataset_dir, GaussianMixtureSpec,
    LongTailDataset, Sample, SplitTag,
};
use tailscape::grouping::{grouping_report, load_bank};
use tailscape::net::{read_param_file, Network};
use tailscape::probes::{
    convergence_floor, gradient_similarity, hessian_trace, lambda_max, landscape_grid,
    QuadraticFloorSpec,
};
use tailscape::trainer::run;
use tailscape::Error;

const OUT_ENV: &str = "TAILSCAPE_OUT";

#[derive(Parser)]
#[command(name = "tailscape", version, about = "Long-tailed training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable): --set lr=0.1
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set seed=N (applied last).
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> tailscape::Result<TrainConfig> {
        let mut overrides = Vec::new();
        for s in &self.set {
            overrides.push(parse_override(s)?);
        }
        if let Some(seed) = self.seed {
            overrides.push(("seed".into(), seed.to_string()));
        }
        resolve_config(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed dataset (train + balanced eval).
    GenData {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 2)]
        feature_dim: usize,
        #[arg(long, default_value_t = 3.0)]
        mean_radius: f64,
        #[arg(long, default_value_t = 0.8)]
        cov_scale: f64,
        #[arg(long, default_value_t = 500)]
        n_max: usize,
        #[arg(long, default_value_t = 100.0)]
        ratio: f64,
        #[arg(long, default_value_t = 200)]
        eval_per_class: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output directory (default: $TAILSCAPE_OUT/dataset or ./dataset).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run and persist its artifacts.
    Train {
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output root for the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Loss-geometry probes on checkpoints and runs.
    #[command(subcommand)]
    Probe(ProbeCommand),
    /// Run several variants over several seeds and tabulate the results.
    Compare {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated variant tags (ce, ce+sam, ce+gkp, ce+gsa,
        /// ce+gkp+gsa, gsa-proj).
        #[arg(long)]
        variants: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
}

#[derive(Subcommand)]
enum ProbeCommand {
    /// Dominant Hessian eigenvalue and trace at a checkpoint.
    Hessian {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Restrict the loss to one frequency bucket: all|many|med|few.
        #[arg(long, default_value = "all")]
        split: String,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 32)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report file (default: probes.json next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Filter-normalized 2-D loss grid around a checkpoint.
    Landscape {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "all")]
        split: String,
        #[arg(long, default_value_t = 25)]
        resolution: usize,
        #[arg(long, default_value_t = 1.0)]
        span: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for landscape.csv + landscape_meta.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Class-vs-batch gradient cosine similarity at a checkpoint.
    Gradsim {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Affinity, Laplacian eigenvalues, and assignment from a run's bank.
    Grouping {
        /// Run directory containing bank.bin and config.resolved.
        #[arg(long)]
        run: PathBuf,
        /// Override the group count from the run's config.
        #[arg(long)]
        groups: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convergence floor of the noisy quadratic under (eta, rho).
    Floor {
        #[arg(long, default_value_t = 0.05)]
        eta: f64,
        #[arg(long, default_value_t = 0.2)]
        rho: f64,
        #[arg(long, default_value_t = 3000)]
        steps: usize,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_root(flag: Option<PathBuf>, fallback: &str) -> PathBuf {
    flag.unwrap_or_else(|| {
        std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(fallback))
    })
}

fn with_pool<T>(threads: usize, f: impl FnOnce() -> T + Send) -> T
where
    T: Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("thread pool");
    pool.install(f)
}

fn split_samples<'a>(
    dataset: &'a LongTailDataset,
    split: &str,
) -> tailscape::Result<Vec<&'a Sample>> {
    let subset = match split {
        "all" => dataset.samples.iter().collect(),
        "many" => dataset.samples_with_tag(SplitTag::Many),
        "med" => dataset.samples_with_tag(SplitTag::Med),
        "few" => dataset.samples_with_tag(SplitTag::Few),
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown split {other:?} (use all|many|med|few)"
            )))
        }
    };
    if subset.is_empty() {
        return Err(Error::InvalidArgument(format!("split {split:?} has no samples")));
    }
    Ok(subset)
}

fn load_checkpoint(path: &Path) -> tailscape::Result<(Network, Vec<f64>)> {
    let (arch, theta) = read_param_file(path)?;
    let net = Network::new(arch)?;
    if theta.len() != net.param_count() {
        return Err(Error::MalformedFile {
            path: path.display().to_string(),
            reason: format!(
                "payload has {} values, architecture needs {}",
                theta.len(),
                net.param_count()
            ),
        });
    }
    Ok((net, theta))
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_data(
    classes: usize,
    feature_dim: usize,
    mean_radius: f64,
    cov_scale: f64,
    n_max: usize,
    ratio: f64,
    eval_per_class: usize,
    seed: u64,
    out: Option<PathBuf>,
) -> tailscape::Result<()> {
    let spec = GaussianMixtureSpec::on_sphere(
        classes,
        feature_dim,
        mean_radius,
        cov_scale,
        n_max,
        ratio,
        seed,
    )?;
    let train = generate(&spec)?;
    let eval = generate_eval(&spec, &train, eval_per_class)?;
    let dir = out_root(out, "dataset");
    save_dataset_dir(&dir, &spec, &train, &eval)?;
    println!("dataset: {}", dir.display());
    println!("classes: {classes}  samples: {}  ratio: {}", train.len(), train.imbalance_ratio);
    println!("counts: {:?}", train.class_counts);
    println!(
        "split: {}",
        train.split.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
    );
    Ok(())
}

fn cmd_train(
    data: &Path,
    config: &ConfigArgs,
    out: Option<PathBuf>,
    threads: usize,
) -> tailscape::Result<()> {
    let cfg = config.resolve()?;
    let (train, eval, _meta) = load_dataset_dir(data)?;
    let fingerprint = dataset_fingerprint(data)?;
    let root = out_root(out, "runs");
    let run_dir = create_run_dir(&root, &cfg)?;
    eprintln!("run dir: {}", run_dir.display());
    let outcome = with_pool(threads, || run(&train, &eval, &cfg));
    let result = match outcome {
        Ok(result) => result,
        Err(Error::NumericalAbort(msg)) => {
            // Leave the diagnostic dump inside the run directory.
            let _ = std::fs::write(run_dir.join("abort.txt"), format!("{msg}\n"));
            return Err(Error::NumericalAbort(msg));
        }
        Err(e) => return Err(e),
    };
    let net = Network::new(result.arch.clone())?;
    let probes = final_probes(&net, &result.final_theta, &train, cfg.seed)?;
    persist_run(&run_dir, &cfg, &result, &fingerprint, &probes)?;
    let last = result.reports.last().expect("at least the initial report");
    println!("config hash: {}", config_hash(&cfg));
    println!(
        "final: overall {:.4} many {} med {} few {}",
        last.overall,
        last.many.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()),
        last.med.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()),
        last.few.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()),
    );
    println!("artifacts: {}", run_dir.display());
    Ok(())
}

fn cmd_probe(probe: ProbeCommand) -> tailscape::Result<()> {
    match probe {
        ProbeCommand::Hessian { checkpoint, data, split, iters, probes, seed, out } => {
            let (net, theta) = load_checkpoint(&checkpoint)?;
            let (train, _, _) = load_dataset_dir(&data)?;
            let subset = split_samples(&train, &split)?;
            let lmax = lambda_max(&net, &theta, &subset, iters, seed)?;
            let trace = hessian_trace(&net, &theta, &subset, probes, seed)?;
            let report_path = out.unwrap_or_else(|| {
                checkpoint.parent().unwrap_or(Path::new(".")).join("probes.json")
            });
            append_probe_report(
                &report_path,
                &format!("{}#{split}", checkpoint.display()),
                serde_json::json!({
                    "split": split,
                    "lambda_max": lmax,
                    "trace": trace,
                    "iters": iters,
                    "probes": probes,
                    "seed": seed,
                }),
            )?;
            println!("split {split}: lambda_max {lmax:.6e} trace {trace:.6e}");
            println!("report: {}", report_path.display());
        }
        ProbeCommand::Landscape { checkpoint, data, split, resolution, span, seed, out } => {
            let (net, theta) = load_checkpoint(&checkpoint)?;
            let (train, _, _) = load_dataset_dir(&data)?;
            let subset = split_samples(&train, &split)?;
            let grid = landscape_grid(&net, &theta, &subset, resolution, span, seed)?;
            let dir = out_root(out, "landscape");
            std::fs::create_dir_all(&dir)?;
            let mut csv = String::new();
            for row in &grid.values {
                let cells: Vec<String> = row.iter().map(f64::to_string).collect();
                csv.push_str(&cells.join(","));
                csv.push('\n');
            }
            std::fs::write(dir.join("landscape.csv"), csv)?;
            let meta = serde_json::json!({
                "checkpoint": checkpoint.display().to_string(),
                "split": split,
                "resolution": resolution,
                "span": span,
                "seed": seed,
                "coords": grid.coords,
                "center_loss": grid.center(),
            });
            std::fs::write(
                dir.join("landscape_meta.json"),
                serde_json::to_string_pretty(&meta)?,
            )?;
            println!("landscape: {} (center loss {:.6})", dir.display(), grid.center());
        }
        ProbeCommand::Gradsim { checkpoint, data, out } => {
            let (net, theta) = load_checkpoint(&checkpoint)?;
            let (train, _, _) = load_dataset_dir(&data)?;
            let refs: Vec<&Sample> = train.samples.iter().collect();
            let sims = gradient_similarity(&net, &theta, &refs)?;
            let mut csv = String::from("class,cosine\n");
            for (class, cosine) in &sims {
                csv.push_str(&format!("{class},{cosine}\n"));
                println!("class {class}: {cosine:.4}");
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("gradsim.csv"), csv)?;
            }
        }
        ProbeCommand::Grouping { run, groups, seed, out } => {
            let bank = load_bank(&run.join("bank.bin"))?;
            let groups = match groups {
                Some(g) => g,
                None => {
                    let cfg = resolve_config(Some(&run.join("config.resolved")), &[])?;
                    cfg.groups
                }
            };
            let dump = grouping_report(&bank, groups, seed)?;
            let path = out.unwrap_or_else(|| run.join("grouping.json"));
            std::fs::write(&path, serde_json::to_string_pretty(&dump)?)?;
            println!("assignment: {:?}", dump.assignment);
            println!("ncut objective: {:.6}", dump.ncut_objective);
            println!("report: {}", path.display());
        }
        ProbeCommand::Floor { eta, rho, steps, seeds, dim, noise, out } => {
            let spec = QuadraticFloorSpec::well_conditioned(dim, noise);
            let seed_list: Vec<u64> = (0..seeds as u64).collect();
            let gap = convergence_floor(&spec, eta, rho, steps, &seed_list)?;
            let halved = convergence_floor(&spec, eta / 2.0, rho / 2.0, steps, &seed_list)?;
            println!("gap(eta={eta}, rho={rho}) = {gap:.6e}");
            println!("gap(eta/2, rho/2)        = {halved:.6e}");
            println!("reduction factor         = {:.3}", gap / halved);
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                let report = serde_json::json!({
                    "eta": eta, "rho": rho, "steps": steps, "seeds": seeds,
                    "dim": dim, "noise": noise,
                    "gap": gap, "gap_halved": halved, "reduction": gap / halved,
                });
                std::fs::write(dir.join("floor.json"), serde_json::to_string_pretty(&report)?)?;
            }
        }
    }
    Ok(())
}

fn cmd_compare(
    data: &Path,
    variants: &str,
    seeds: &str,
    config: &ConfigArgs,
    out: Option<PathBuf>,
    threads: usize,
) -> tailscape::Result<()> {
    let cfg = config.resolve()?;
    let variant_list: Vec<Variant> = variants
        .split(',')
        .map(|tag| tag.trim().parse())
        .collect::<tailscape::Result<_>>()?;
    let seed_list: Vec<u64> = seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad seed {:?}", s.trim())))
        })
        .collect::<tailscape::Result<_>>()?;
    let (train, eval, _) = load_dataset_dir(data)?;
    let out_dir = out_root(out, "compare");
    std::fs::create_dir_all(&out_dir)?;
    let summaries = with_pool(threads, || {
        compare(&train, &eval, &variant_list, &seed_list, &cfg, Some(&out_dir), Some(data))
    })?;
    let table = render_table(&summaries);
    print!("{table}");
    std::fs::write(out_dir.join("comparison.csv"), render_csv(&summaries))?;
    std::fs::write(
        out_dir.join("comparison.json"),
        serde_json::to_string_pretty(&summaries)?,
    )?;
    println!("report: {}", out_dir.display());
    Ok(())
}

fn real_main() -> tailscape::Result<()> {
    let cli = Cli::try_parse().map_err(|e| {
        use clap::error::ErrorKind;
        // Help and version requests are successes; anything else is usage.
        e.print().ok();
        if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
            std::process::exit(0);
        }
        Error::InvalidArgument("usage".into())
    })?;
    match cli.command {
        Command::GenData {
            classes,
            feature_dim,
            mean_radius,
            cov_scale,
            n_max,
            ratio,
            eval_per_class,
            seed,
            out,
        } => cmd_gen_data(
            classes,
            feature_dim,
            mean_radius,
            cov_scale,
            n_max,
            ratio,
            eval_per_class,
            seed,
            out,
        ),
        Command::Train { data, config, out, threads } => {
            cmd_train(&data, &config, out, threads)
        }
        Command::Probe(probe) => cmd_probe(probe),
        Command::Compare { data, variants, seeds, config, out, threads } => {
            cmd_compare(&data, &variants, &seeds, &config, out, threads)
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NumericalAbort(_) => 2,
        Error::Io(_) | Error::Csv(_) | Error::MalformedFile { .. } => 3,
        _ => 1,
    }
}

fn main() {
    match real_main() {
        Ok(()) => {}
        Err(Error::InvalidArgument(msg)) if msg == "usage" => std::process::exit(1),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
