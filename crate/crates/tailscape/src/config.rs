//! Training configuration: defaults, flat `key = value` config files, and
//! command-line overrides with precedence defaults < file < overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gkp::GroupSizeMode;
use crate::gsa::RadiusExponent;

/// Method variant selecting which objective the trainer runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Ce,
    CeSam,
    CeGkp,
    CeGsa,
    CeGkpGsa,
    GsaProj,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Ce,
        Variant::CeSam,
        Variant::CeGkp,
        Variant::CeGsa,
        Variant::CeGkpGsa,
        Variant::GsaProj,
    ];

    /// True when the variant needs the memory bank / grouping machinery.
    pub fn uses_grouping(self) -> bool {
        !matches!(self, Variant::Ce | Variant::CeSam)
    }

    pub fn uses_gkp(self) -> bool {
        matches!(self, Variant::CeGkp | Variant::CeGkpGsa | Variant::GsaProj)
    }

    pub fn uses_perturbation(self) -> bool {
        matches!(self, Variant::CeGsa | Variant::CeGkpGsa | Variant::GsaProj)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self {
            Variant::Ce => "CE",
            Variant::CeSam => "CE+SAM",
            Variant::CeGkp => "CE+GKP",
            Variant::CeGsa => "CE+GSA",
            Variant::CeGkpGsa => "CE+GKP+GSA",
            Variant::GsaProj => "GSA-proj",
        };
        write!(f, "{tag}")
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(Variant::Ce),
            "ce+sam" => Ok(Variant::CeSam),
            "ce+gkp" => Ok(Variant::CeGkp),
            "ce+gsa" => Ok(Variant::CeGsa),
            "ce+gkp+gsa" => Ok(Variant::CeGkpGsa),
            "gsa-proj" => Ok(Variant::GsaProj),
            other => Err(Error::ConfigParse(format!("unknown variant {other:?}"))),
        }
    }
}

/// How the preservation penalty enters the per-step objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GkpApplication {
    /// One penalty term per group present in the batch (the literal sum).
    PerGroup,
    /// A single penalty per step (the mean over present groups).
    Once,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

/// Every hyperparameter of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub beta: f64,
    pub groups: usize,
    pub z: f64,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: Variant,
    pub hidden: Vec<usize>,
    pub gsa_regularizer: bool,
    /// Trust region on the perturbation norm relative to the parameter
    /// norm (0 disables the cap).
    pub perturb_cap: f64,
    /// Skip group perturbations whose direction carries less than this
    /// fraction of the group gradient norm (0 disables).
    pub min_direction_frac: f64,
    pub radius_exponent: RadiusExponent,
    pub group_size_mode: GroupSizeMode,
    pub gkp_application: GkpApplication,
    /// Recompute grouping every N epochs after warm-up; 0 keeps it fixed.
    pub regroup_every: usize,
    /// Random-project snapshots to this many dims for the affinity; 0 = off.
    pub affinity_projection: usize,
    /// Emit per-epoch class-vs-batch gradient similarity.
    pub track_gradsim: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 100.0,
            beta: 0.5,
            groups: 4,
            z: 1e-2,
            alpha_start: 0.95,
            alpha_end: 0.6,
            lr: 0.05,
            lr_schedule: LrSchedule::Cosine,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 60,
            warmup_frac: 0.25,
            batch_size: 64,
            seed: 0,
            variant: Variant::CeGkpGsa,
            hidden: vec![32, 32],
            gsa_regularizer: true,
            perturb_cap: 0.1,
            min_direction_frac: 0.0,
            radius_exponent: RadiusExponent::Quarter,
            group_size_mode: GroupSizeMode::Samples,
            gkp_application: GkpApplication::PerGroup,
            regroup_every: 0,
            affinity_projection: 0,
            track_gradsim: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.alpha_end >= 0.0 && self.alpha_end <= self.alpha_start && self.alpha_start <= 1.0)
        {
            return bad(format!(
                "alpha schedule needs 0 <= alpha_end <= alpha_start <= 1, got {} -> {}",
                self.alpha_start, self.alpha_end
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.z.is_finite() && self.z >= 0.0) {
            return bad(format!("z must be >= 0, got {}", self.z));
        }
        if !self.beta.is_finite() {
            return bad(format!("beta must be finite, got {}", self.beta));
        }
        if self.groups == 0 {
            return bad("groups must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac must be in [0, 1], got {}", self.warmup_frac));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.perturb_cap.is_finite() && self.perturb_cap >= 0.0) {
            return bad(format!("perturb_cap must be >= 0, got {}", self.perturb_cap));
        }
        if !(self.min_direction_frac.is_finite() && (0.0..=1.0).contains(&self.min_direction_frac))
        {
            return bad(format!(
                "min_direction_frac must be in [0, 1], got {}",
                self.min_direction_frac
            ));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden must list at least one positive width".into());
        }
        Ok(())
    }

    /// Apply a single `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::ConfigParse(format!("bad value {value:?} for key {key:?}"))
            })
        }
        fn parse_bool(key: &str, value: &str) -> Result<bool> {
            match value.to_ascii_lowercase().as_str() {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::ConfigParse(format!("bad bool {value:?} for key {key:?}"))),
            }
        }
        match key {
            "lambda" => self.lambda = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "groups" => self.groups = parse(key, value)?,
            "z" => self.z = parse(key, value)?,
            "alpha_start" => self.alpha_start = parse(key, value)?,
            "alpha_end" => self.alpha_end = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_schedule" => {
                self.lr_schedule = match value.to_ascii_lowercase().as_str() {
                    "cosine" => LrSchedule::Cosine,
                    "constant" => LrSchedule::Constant,
                    _ => {
                        return Err(Error::ConfigParse(format!("bad lr_schedule {value:?}")));
                    }
                }
            }
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "warmup_frac" => self.warmup_frac = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "variant" => self.variant = value.parse()?,
            "hidden" => {
                let widths: Result<Vec<usize>> = value
                    .split(',')
                    .map(|w| {
                        w.trim().parse().map_err(|_| {
                            Error::ConfigParse(format!("bad hidden width {:?}", w.trim()))
                        })
                    })
                    .collect();
                self.hidden = widths?;
            }
            "gsa_regularizer" => self.gsa_regularizer = parse_bool(key, value)?,
            "perturb_cap" => self.perturb_cap = parse(key, value)?,
            "min_direction_frac" => self.min_direction_frac = parse(key, value)?,
            "radius_exponent" => {
                self.radius_exponent = match value.to_ascii_lowercase().as_str() {
                    "quarter" => RadiusExponent::Quarter,
                    "half" => RadiusExponent::Half,
                    _ => {
                        return Err(Error::ConfigParse(format!("bad radius_exponent {value:?}")));
                    }
                }
            }
            "group_size_mode" => {
                self.group_size_mode = match value.to_ascii_lowercase().as_str() {
                    "samples" => GroupSizeMode::Samples,
                    "classes" => GroupSizeMode::Classes,
                    _ => {
                        return Err(Error::ConfigParse(format!("bad group_size_mode {value:?}")));
                    }
                }
            }
            "gkp_application" => {
                self.gkp_application = match value.to_ascii_lowercase().as_str() {
                    "per_group" => GkpApplication::PerGroup,
                    "once" => GkpApplication::Once,
                    _ => {
                        return Err(Error::ConfigParse(format!("bad gkp_application {value:?}")));
                    }
                }
            }
            "regroup_every" => self.regroup_every = parse(key, value)?,
            "affinity_projection" => self.affinity_projection = parse(key, value)?,
            "track_gradsim" => self.track_gradsim = parse_bool(key, value)?,
            other => return Err(Error::ConfigParse(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Canonical `key = value` form; parsing it back reproduces the config.
    pub fn echo_string(&self) -> String {
        let variant = self.variant.to_string().to_ascii_lowercase();
        let lr_schedule = match self.lr_schedule {
            LrSchedule::Cosine => "cosine",
            LrSchedule::Constant => "constant",
        };
        let exponent = match self.radius_exponent {
            RadiusExponent::Quarter => "quarter",
            RadiusExponent::Half => "half",
        };
        let size_mode = match self.group_size_mode {
            GroupSizeMode::Samples => "samples",
            GroupSizeMode::Classes => "classes",
        };
        let gkp_app = match self.gkp_application {
            GkpApplication::PerGroup => "per_group",
            GkpApplication::Once => "once",
        };
        let hidden =
            self.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "lambda = {}\nbeta = {}\ngroups = {}\nz = {}\nalpha_start = {}\nalpha_end = {}\n\
             lr = {}\nlr_schedule = {}\nmomentum = {}\nweight_decay = {}\nepochs = {}\n\
             warmup_frac = {}\nbatch_size = {}\nseed = {}\nvariant = {}\nhidden = {}\n\
             gsa_regularizer = {}\nperturb_cap = {}\nmin_direction_frac = {}\n\
             radius_exponent = {}\ngroup_size_mode = {}\n\
             gkp_application = {}\nregroup_every = {}\naffinity_projection = {}\n\
             track_gradsim = {}\n",
            self.lambda,
            self.beta,
            self.groups,
            self.z,
            self.alpha_start,
            self.alpha_end,
            self.lr,
            lr_schedule,
            self.momentum,
            self.weight_decay,
            self.epochs,
            self.warmup_frac,
            self.batch_size,
            self.seed,
            variant,
            hidden,
            self.gsa_regularizer,
            self.perturb_cap,
            self.min_direction_frac,
            exponent,
            size_mode,
            gkp_app,
            self.regroup_every,
            self.affinity_projection,
            self.track_gradsim,
        )
    }
}

fn apply_lines(cfg: &mut TrainConfig, text: &str) -> Result<()> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::ConfigParse(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        cfg.set(key.trim(), value.trim())?;
    }
    Ok(())
}

/// Resolve a config from built-in defaults, an optional file, and
/// `key=value` override pairs, validating the result.
pub fn resolve_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)?;
        apply_lines(&mut cfg, &text)?;
    }
    for (key, value) in overrides {
        cfg.set(key, value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parse a `key=value` override argument.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (key, value) = arg
        .split_once('=')
        .ok_or_else(|| Error::ConfigParse(format!("override {arg:?} is not key=value")))?;
    Ok((key.trim().to_string(), value.trim().to_string()))
}
