//! Training orchestration: warm-up, memory-bank updates, grouping, the
//! grouped sharpness + preservation objective, the cosine mixing schedule,
//! per-epoch evaluation, and the baseline variants.
//!
//! Phases of a grouped run: a cross-entropy warm-up during which the memory
//! bank collects best-quality encoder snapshots per class; one grouping +
//! Fisher-estimation pass at warm-up end; then per-step grouped updates
//! where each group's sharpness-aware data term is weighted by `alpha` and
//! the preservation penalty by `1 - alpha`. Every epoch emits an evaluation
//! report and per-class quality scores. Runs are bitwise deterministic for
//! a fixed config and seed.

use std::collections::BTreeMap;

use crate::config::{GkpApplication, LrSchedule, TrainConfig, Variant};
use crate::data::{LongTailDataset, Sample, SplitTag};
use crate::error::{Error, Result};
use crate::gkp::{estimate_fisher, gkp_penalty};
use crate::grouping::{
    build_affinity_projected, group_optima, ncut_partition, GroupPartition, MemoryBank,
};
use crate::gsa::{sharpness_objective, GsaOptions, PerturbDirection};
use crate::net::{Architecture, Network};
use crate::probes::gradient_similarity;
use crate::quality::feature_quality;

/// Mixing weight at epoch `t` of `cfg.epochs`:
/// `alpha_end + (alpha_start - alpha_end) (1 + cos(t pi / T)) / 2`.
/// Endpoints are exact; the schedule is non-increasing in `t`.
pub fn alpha(t: usize, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.epochs;
    if t > total {
        return Err(Error::InvalidArgument(format!(
            "epoch {t} outside the schedule range 0..={total}"
        )));
    }
    if t == total {
        return Ok(cfg.alpha_end);
    }
    if t == 0 {
        return Ok(cfg.alpha_start);
    }
    let x = t as f64 * std::f64::consts::PI / total as f64;
    Ok(cfg.alpha_end + 0.5 * (cfg.alpha_start - cfg.alpha_end) * (1.0 + x.cos()))
}

fn lr_at(t: usize, cfg: &TrainConfig) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.lr,
        LrSchedule::Cosine => {
            let x = t as f64 * std::f64::consts::PI / cfg.epochs.max(1) as f64;
            cfg.lr * 0.5 * (1.0 + x.cos())
        }
    }
}

/// Accuracy report for one checkpoint: overall, per split bucket, per class.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub epoch: usize,
    pub overall: f64,
    pub many: Option<f64>,
    pub med: Option<f64>,
    pub few: Option<f64>,
    pub per_class: Vec<f64>,
    pub per_class_q: Vec<f64>,
}

/// Argmax-of-logits accuracy, overall and per frequency bucket. Argmax ties
/// resolve to the lowest class index.
pub fn evaluate(net: &Network, theta: &[f64], dataset: &LongTailDataset) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let classes = dataset.classes();
    let mut correct = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    for s in &dataset.samples {
        let (_, logits) = net.forward(theta, &s.features)?;
        let mut pred = 0;
        for (k, &l) in logits.iter().enumerate() {
            if l > logits[pred] {
                pred = k;
            }
        }
        count[s.label] += 1;
        if pred == s.label {
            correct[s.label] += 1;
        }
    }
    let per_class: Vec<f64> = correct
        .iter()
        .zip(&count)
        .map(|(&c, &n)| if n > 0 { c as f64 / n as f64 } else { 0.0 })
        .collect();
    let bucket = |tag: SplitTag| -> Option<f64> {
        let (mut c, mut n) = (0usize, 0usize);
        for class in 0..classes {
            if dataset.split[class] == tag {
                c += correct[class];
                n += count[class];
            }
        }
        if n > 0 {
            Some(c as f64 / n as f64)
        } else {
            None
        }
    };
    let total: usize = count.iter().sum();
    let overall = correct.iter().sum::<usize>() as f64 / total as f64;
    Ok(EvalReport {
        epoch: 0,
        overall,
        many: bucket(SplitTag::Many),
        med: bucket(SplitTag::Med),
        few: bucket(SplitTag::Few),
        per_class,
        per_class_q: Vec::new(),
    })
}

/// One step-level metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetric {
    pub step: usize,
    pub epoch: usize,
    pub alpha: f64,
    pub lr: f64,
    pub total_loss: f64,
    pub data_loss: f64,
    pub gkp_value: f64,
}

/// Per-step, per-group sharpness diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct GsaDiag {
    pub step: usize,
    pub group: usize,
    pub rho: f64,
    pub rho_unscaled: f64,
    pub direction_norm: f64,
    pub dot_with_global: f64,
    pub regularizer: f64,
    pub perturbed_loss: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityRow {
    pub epoch: usize,
    pub class: usize,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradSimRow {
    pub epoch: usize,
    pub class: usize,
    pub cosine: f64,
}

/// Everything a run produces, in memory. Persistence is a separate step.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub arch: Architecture,
    pub reports: Vec<EvalReport>,
    pub metrics: Vec<StepMetric>,
    pub gsa_diag: Vec<GsaDiag>,
    pub quality: Vec<QualityRow>,
    pub gradsim: Vec<GradSimRow>,
    pub final_theta: Vec<f64>,
    pub bank: MemoryBank,
    pub partition: Option<GroupPartition>,
    pub warmup_epochs: usize,
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1_000 + epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Decoupled pieces of one gradient step, before the SGD update.
struct StepEval {
    total_loss: f64,
    data_loss: f64,
    gkp_value: f64,
    grad: Vec<f64>,
    diags: Vec<GsaDiag>,
}

fn ce_eval(net: &Network, theta: &[f64], batch: &[&Sample]) -> Result<StepEval> {
    let (loss, grad) = net.loss_and_grad(theta, batch, None)?;
    Ok(StepEval { total_loss: loss, data_loss: loss, gkp_value: 0.0, grad, diags: Vec::new() })
}

fn sam_eval(
    net: &Network,
    theta: &[f64],
    batch: &[&Sample],
    dataset_size: usize,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepEval> {
    let opts = GsaOptions {
        z: cfg.z,
        exponent: cfg.radius_exponent,
        regularizer: cfg.gsa_regularizer,
        perturb_cap: cfg.perturb_cap,
        min_direction_frac: cfg.min_direction_frac,
    };
    let eval = sharpness_objective(
        |point| net.loss_and_grad(point, batch, None),
        theta,
        PerturbDirection::OwnGradient,
        dataset_size.max(2),
        &opts,
    )?;
    let diag = GsaDiag {
        step,
        group: 0,
        rho: eval.rho,
        rho_unscaled: eval.rho_unscaled,
        direction_norm: eval.direction_norm,
        dot_with_global: eval.dot_with_global,
        regularizer: eval.regularizer_value,
        perturbed_loss: eval.value - eval.regularizer_value,
        degenerate: eval.degenerate,
    };
    Ok(StepEval {
        total_loss: eval.value,
        data_loss: eval.value - eval.regularizer_value,
        gkp_value: 0.0,
        grad: eval.grad,
        diags: vec![diag],
    })
}

fn grouped_eval(
    net: &Network,
    theta: &[f64],
    batch: &[&Sample],
    partition: &GroupPartition,
    cfg: &TrainConfig,
    mix: f64,
    step: usize,
) -> Result<StepEval> {
    // Split the batch by group, preserving batch order inside each group.
    let mut by_group: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    for s in batch {
        by_group.entry(partition.group_of(s.label)).or_default().push(s);
    }
    let (_, global_grad) = net.loss_and_grad(theta, batch, None)?;
    let d = net.param_count();
    let mut grad = vec![0.0; d];
    let mut data_loss = 0.0;
    let mut weighted_data = 0.0;
    let mut diags = Vec::new();
    for (&g, group_batch) in &by_group {
        let eval = if cfg.variant.uses_perturbation() {
            let direction = match cfg.variant {
                Variant::GsaProj => {
                    PerturbDirection::GroupProjection { global_grad: &global_grad }
                }
                _ => PerturbDirection::GroupResidual { global_grad: &global_grad },
            };
            let opts = GsaOptions {
                z: cfg.z,
                exponent: cfg.radius_exponent,
                regularizer: cfg.gsa_regularizer,
                perturb_cap: cfg.perturb_cap,
                min_direction_frac: cfg.min_direction_frac,
            };
            let eval = sharpness_objective(
                |point| net.loss_and_grad(point, group_batch, None),
                theta,
                direction,
                partition.sample_count[g].max(2),
                &opts,
            )?;
            diags.push(GsaDiag {
                step,
                group: g,
                rho: eval.rho,
                rho_unscaled: eval.rho_unscaled,
                direction_norm: eval.direction_norm,
                dot_with_global: eval.dot_with_global,
                regularizer: eval.regularizer_value,
                perturbed_loss: eval.value - eval.regularizer_value,
                degenerate: eval.degenerate,
            });
            (eval.value, eval.grad)
        } else {
            net.loss_and_grad(theta, group_batch, None)?
        };
        data_loss += eval.0;
        weighted_data += mix * eval.0;
        for (acc, &v) in grad.iter_mut().zip(&eval.1) {
            *acc += mix * v;
        }
    }
    // Preservation penalty over the groups present in this batch.
    let mut gkp_value = 0.0;
    let keep_weight = 1.0 - mix;
    if cfg.variant.uses_gkp() && cfg.lambda > 0.0 && keep_weight > 0.0 {
        let mut value_sum = 0.0;
        let mut grad_sum = vec![0.0; d];
        for &g in by_group.keys() {
            let terms = gkp_penalty(theta, partition, g, cfg.lambda, cfg.group_size_mode)?;
            value_sum += terms.value;
            for (acc, &v) in grad_sum.iter_mut().zip(&terms.grad) {
                *acc += v;
            }
        }
        let scale = match cfg.gkp_application {
            GkpApplication::PerGroup => 1.0,
            GkpApplication::Once => 1.0 / by_group.len() as f64,
        };
        gkp_value = scale * value_sum;
        for (acc, v) in grad.iter_mut().zip(&grad_sum) {
            *acc += keep_weight * scale * v;
        }
    }
    Ok(StepEval {
        total_loss: weighted_data + keep_weight * gkp_value,
        data_loss,
        gkp_value,
        grad,
        diags,
    })
}

/// SGD with momentum and weight decay: `g += wd * theta`,
/// `v = m * v + g`, `theta -= lr * v`.
fn sgd_update(theta: &mut [f64], velocity: &mut [f64], grad: &[f64], cfg: &TrainConfig, lr: f64) {
    for i in 0..theta.len() {
        let g = grad[i] + cfg.weight_decay * theta[i];
        velocity[i] = cfg.momentum * velocity[i] + g;
        theta[i] -= lr * velocity[i];
    }
}

fn quality_scores(
    net: &Network,
    theta: &[f64],
    eval: &LongTailDataset,
    beta: f64,
) -> Result<BTreeMap<usize, f64>> {
    let mut features: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for s in &eval.samples {
        let (f, _) = net.forward(theta, &s.features)?;
        features.entry(s.label).or_default().push(f);
    }
    feature_quality(&features, beta)
}

fn compute_grouping(
    net: &Network,
    theta: &[f64],
    bank: &MemoryBank,
    train: &LongTailDataset,
    cfg: &TrainConfig,
) -> Result<GroupPartition> {
    let classes = train.classes();
    let assignment = if cfg.groups == 1 {
        vec![0; classes]
    } else {
        let projection =
            if cfg.affinity_projection > 0 { Some(cfg.affinity_projection) } else { None };
        let affinity = build_affinity_projected(bank, projection, cfg.seed)?;
        ncut_partition(&affinity, cfg.groups, cfg.seed)?
    };
    let mut partition = group_optima(bank, &assignment, &train.class_counts)?;
    // Empirical Fisher per group at the group optimum (encoder segment
    // replaced, classifier kept from the current parameters).
    let by_class = train.indices_by_class();
    for g in 0..partition.groups {
        let mut theta_ref = theta.to_vec();
        net.set_encoder_part(&mut theta_ref, &partition.optima[g])?;
        let samples: Vec<&Sample> = partition.members[g]
            .iter()
            .flat_map(|&class| by_class[class].iter().map(|&i| &train.samples[i]))
            .collect();
        let fisher = estimate_fisher(net, &theta_ref, &samples)?;
        partition.fisher[g] = Some(fisher.values);
    }
    Ok(partition)
}

/// Number of cross-entropy warm-up epochs for grouped variants.
pub fn warmup_epochs(cfg: &TrainConfig) -> usize {
    if !cfg.variant.uses_grouping() || cfg.epochs == 0 {
        return 0;
    }
    ((cfg.warmup_frac * cfg.epochs as f64).floor() as usize).clamp(1, cfg.epochs)
}

/// Train on `train`, evaluating (accuracy and feature quality) on `eval`
/// after every epoch. Returns the full metric record; any non-finite loss
/// aborts with a diagnostic message.
pub fn run(
    train: &LongTailDataset,
    eval_set: &LongTailDataset,
    cfg: &TrainConfig,
) -> Result<RunResult> {
    cfg.validate()?;
    train.validate()?;
    let classes = train.classes();
    if eval_set.classes() != classes || eval_set.feature_dim != train.feature_dim {
        return Err(Error::InvalidConfig(
            "train and eval datasets disagree on shape".into(),
        ));
    }
    if cfg.variant.uses_grouping() && cfg.groups > classes {
        return Err(Error::InvalidConfig(format!(
            "{} groups for {classes} classes",
            cfg.groups
        )));
    }
    let net = Network::new(Architecture::new(train.feature_dim, cfg.hidden.clone(), classes)?)?;
    let mut theta = net.init_params(cfg.seed);
    let mut velocity = vec![0.0; net.param_count()];
    let mut bank = MemoryBank::new(classes);
    let mut partition: Option<GroupPartition> = None;
    let warmup = warmup_epochs(cfg);

    let mut reports = Vec::with_capacity(cfg.epochs + 1);
    let mut metrics = Vec::new();
    let mut gsa_diag = Vec::new();
    let mut quality_rows = Vec::new();
    let mut gradsim_rows = Vec::new();

    let record_eval = |reports: &mut Vec<EvalReport>,
                       quality_rows: &mut Vec<QualityRow>,
                       theta: &[f64],
                       epoch: usize|
     -> Result<BTreeMap<usize, f64>> {
        let scores = quality_scores(&net, theta, eval_set, cfg.beta)?;
        let mut report = evaluate(&net, theta, eval_set)?;
        report.epoch = epoch;
        report.per_class_q = (0..classes).map(|c| scores.get(&c).copied().unwrap_or(0.0)).collect();
        debug_assert!(eval_consistency_holds(&report, eval_set));
        for (&class, &q) in &scores {
            quality_rows.push(QualityRow { epoch, class, q });
        }
        reports.push(report);
        Ok(scores)
    };

    record_eval(&mut reports, &mut quality_rows, &theta, 0)?;

    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mix = alpha(epoch, cfg)?;
        let lr = lr_at(epoch, cfg);
        let order = shuffled_indices(train.len(), cfg.seed, epoch);
        let in_warmup = cfg.variant.uses_grouping() && epoch < warmup;
        let mut sim_acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train.samples[i]).collect();
            if cfg.track_gradsim {
                for (class, cosine) in gradient_similarity(&net, &theta, &batch)? {
                    let slot = sim_acc.entry(class).or_insert((0.0, 0));
                    slot.0 += cosine;
                    slot.1 += 1;
                }
            }
            let eval = match (&partition, cfg.variant) {
                (_, Variant::Ce) => ce_eval(&net, &theta, &batch)?,
                (_, Variant::CeSam) => sam_eval(&net, &theta, &batch, train.len(), cfg, step)?,
                (Some(p), _) if !in_warmup => {
                    grouped_eval(&net, &theta, &batch, p, cfg, mix, step)?
                }
                _ => ce_eval(&net, &theta, &batch)?,
            };
            if !eval.total_loss.is_finite() {
                let theta_norm = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
                return Err(Error::NumericalAbort(format!(
                    "non-finite loss at step {step} (epoch {epoch}): data {} gkp {} \
                     |theta| {theta_norm:.6e} lr {lr:.6e}",
                    eval.data_loss, eval.gkp_value
                )));
            }
            metrics.push(StepMetric {
                step,
                epoch,
                alpha: mix,
                lr,
                total_loss: eval.total_loss,
                data_loss: eval.data_loss,
                gkp_value: eval.gkp_value,
            });
            gsa_diag.extend(eval.diags);
            sgd_update(&mut theta, &mut velocity, &eval.grad, cfg, lr);
            step += 1;
        }
        // Mean per-epoch class-vs-batch gradient similarity.
        for (class, (sum, n)) in sim_acc {
            gradsim_rows.push(GradSimRow { epoch, class, cosine: sum / n as f64 });
        }
        let scores = record_eval(&mut reports, &mut quality_rows, &theta, epoch + 1)?;
        bank.update(net.encoder_part(&theta), &scores, epoch)?;
        if cfg.variant.uses_grouping() {
            let due = epoch + 1 == warmup
                || (cfg.regroup_every > 0
                    && epoch + 1 > warmup
                    && (epoch + 1 - warmup) % cfg.regroup_every == 0);
            if due && epoch + 1 <= cfg.epochs {
                partition = Some(compute_grouping(&net, &theta, &bank, train, cfg)?);
            }
        }
    }

    Ok(RunResult {
        arch: net.arch().clone(),
        reports,
        metrics,
        gsa_diag,
        quality: quality_rows,
        gradsim: gradsim_rows,
        final_theta: theta,
        bank,
        partition,
        warmup_epochs: warmup,
    })
}

/// Overall accuracy must equal the sample-weighted combination of per-class
/// accuracies.
fn eval_consistency_holds(report: &EvalReport, dataset: &LongTailDataset) -> bool {
    let mut count = vec![0usize; dataset.classes()];
    for s in &dataset.samples {
        count[s.label] += 1;
    }
    let total: usize = count.iter().sum();
    let combined: f64 = report
        .per_class
        .iter()
        .zip(&count)
        .map(|(&acc, &n)| acc * n as f64 / total as f64)
        .sum();
    (combined - report.overall).abs() <= 1e-10
}
