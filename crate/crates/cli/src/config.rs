//! Flat key-value run configuration.
//!
//! Resolution order: the preset named by `preset` (default `paper`), then the
//! keys of the config file, then `ADAPTMETA_<KEY>` environment variables.
//! Every key is type-checked and unknown keys are errors.

use std::path::Path;

use adaptmeta::acmrr::AcmrrConfig;
use adaptmeta::controllers::{Gains, PdController};
use adaptmeta::ensemble::{EnsembleConfig, ModelKind};
use adaptmeta::eval::{gain_grid, CampaignConfig, EvalConfig, WindDistribution};
use adaptmeta::meta::MetaConfig;
use adaptmeta::rollout::{ControlMode, RolloutConfig};
use adaptmeta::trajgen::WalkBounds;
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "ADAPTMETA_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("unknown preset {0:?} (expected \"paper\" or \"desk\")")]
    Preset(String),
    #[error("invalid value for {key}: {msg}")]
    Invalid { key: &'static str, msg: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    /// Master seed; every artifact is a function of it.
    pub seed: u64,
    /// Replicate index used by the single-stage commands.
    pub replicate: u64,
    /// Worker threads, 0 for one per core.
    pub threads: usize,

    pub dt: f64,
    pub control_period: f64,
    pub alpha: f64,
    pub max_state: f64,
    pub walk_xy: f64,
    pub walk_phi: f64,

    pub train_wind_lo: f64,
    pub train_wind_hi: f64,
    pub train_wind_a: f64,
    pub train_wind_b: f64,
    pub test_wind_lo: f64,
    pub test_wind_hi: f64,
    pub test_wind_a: f64,
    pub test_wind_b: f64,

    pub n_traj: usize,
    pub collect_duration: f64,
    pub collect_kp: f64,
    pub collect_kd: f64,
    pub collect_attempts: usize,

    /// Ensemble sizes; single-stage commands use the first.
    pub m_values: Vec<usize>,
    pub model_kind: String,
    pub ensemble_mu: f64,
    pub ensemble_epochs: usize,
    pub ensemble_step_size: f64,
    pub ensemble_train_fraction: f64,
    pub ensemble_batch_fraction: f64,

    pub meta_refs: usize,
    pub meta_duration: f64,
    /// Rollout length, at most `meta_duration`.
    pub meta_horizon: f64,
    pub meta_mu: f64,
    pub meta_steps: usize,
    pub meta_step_size: f64,
    pub meta_train_fraction: f64,
    pub meta_mode: String,
    pub divergence_penalty: f64,
    pub normalize_features: bool,

    pub acmrr_mu_ridge: f64,
    pub acmrr_mu_meta: f64,
    pub acmrr_steps: usize,
    pub acmrr_step_size: f64,
    pub acmrr_train_fraction: f64,
    pub acmrr_subset_fraction: f64,
    pub acmrr_include_gravity: bool,

    pub methods: Vec<String>,
    pub n_test: usize,
    pub test_duration: f64,
    pub n_seeds: u64,
    /// `grid` or `nominal` (only `(I, 10I, 10I)`).
    pub eval_gains: String,
    /// Training state is checkpointed every this many steps.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = WindDistribution::TRAIN;
        let test = WindDistribution::TEST;
        let walk = WalkBounds::default();
        let rollout = RolloutConfig::default();
        let ens = EnsembleConfig::default();
        let meta = MetaConfig::default();
        let acmrr = AcmrrConfig::default();
        let pd = PdController::default();
        RunConfig {
            preset: "paper".into(),
            seed: 0,
            replicate: 0,
            threads: 0,
            dt: rollout.dt,
            control_period: rollout.control_period,
            alpha: rollout.alpha,
            max_state: rollout.max_state,
            walk_xy: walk.xy,
            walk_phi: walk.phi,
            train_wind_lo: train.lo,
            train_wind_hi: train.hi,
            train_wind_a: train.a,
            train_wind_b: train.b,
            test_wind_lo: test.lo,
            test_wind_hi: test.hi,
            test_wind_a: test.a,
            test_wind_b: test.b,
            n_traj: 500,
            collect_duration: 30.0,
            collect_kp: pd.kp,
            collect_kd: pd.kd,
            collect_attempts: 20,
            m_values: vec![2, 5, 10, 20, 30, 40, 50],
            model_kind: ens.kind.name().into(),
            ensemble_mu: ens.mu,
            ensemble_epochs: ens.epochs,
            ensemble_step_size: ens.step_size,
            ensemble_train_fraction: ens.train_fraction,
            ensemble_batch_fraction: ens.batch_fraction,
            meta_refs: meta.n_refs,
            meta_duration: meta.duration,
            meta_horizon: meta.duration,
            meta_mu: meta.mu,
            meta_steps: meta.steps,
            meta_step_size: meta.step_size,
            meta_train_fraction: meta.train_fraction,
            meta_mode: meta.rollout.mode.name().into(),
            divergence_penalty: meta.divergence_penalty,
            normalize_features: meta.normalize_features,
            acmrr_mu_ridge: acmrr.mu_ridge,
            acmrr_mu_meta: acmrr.mu_meta,
            acmrr_steps: acmrr.steps,
            acmrr_step_size: acmrr.step_size,
            acmrr_train_fraction: acmrr.train_fraction,
            acmrr_subset_fraction: acmrr.subset_fraction,
            acmrr_include_gravity: acmrr.include_gravity,
            methods: vec!["ours".into(), "acmrr".into(), "pid".into()],
            n_test: 200,
            test_duration: 10.0,
            n_seeds: 10,
            eval_gains: "grid".into(),
            checkpoint_every: 50,
        }
    }
}

impl RunConfig {
    /// Reduced budget that runs on one desktop core in well under an hour.
    pub fn desk() -> Self {
        RunConfig {
            preset: "desk".into(),
            n_traj: 30,
            m_values: vec![10],
            ensemble_epochs: 50,
            meta_refs: 3,
            meta_steps: 200,
            meta_step_size: 1e-1,
            acmrr_steps: 100,
            n_test: 20,
            n_seeds: 3,
            eval_gains: "nominal".into(),
            checkpoint_every: 25,
            ..RunConfig::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "paper" => Ok(RunConfig::default()),
            "desk" => Ok(RunConfig::desk()),
            other => Err(ConfigError::Preset(other.into())),
        }
    }

    /// Resolves `file` (if any) and `ADAPTMETA_*` pairs from `env`.
    pub fn load(file: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, ConfigError> {
        let text = match file {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.display().to_string(),
                source,
            })?,
            None => String::new(),
        };
        Self::resolve(&text, env)
    }

    pub fn resolve(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, ConfigError> {
        let mut overrides: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let mut env: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_ascii_lowercase(), v)))
            .collect();
        env.sort();
        for (key, raw) in env {
            overrides.insert(key, parse_env_value(&raw));
        }
        let preset = match overrides.get("preset") {
            Some(toml::Value::String(s)) => s.clone(),
            Some(other) => return Err(ConfigError::Parse(format!("preset must be a string, got {other}"))),
            None => "paper".into(),
        };
        let base = RunConfig::preset(&preset)?;
        let mut table = toml::Table::try_from(&base).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (k, v) in overrides {
            table.insert(k, v);
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &'static str, msg: &str| Err(ConfigError::Invalid { key, msg: msg.into() });
        let positive = [
            ("dt", self.dt),
            ("control_period", self.control_period),
            ("max_state", self.max_state),
            ("collect_duration", self.collect_duration),
            ("meta_duration", self.meta_duration),
            ("meta_horizon", self.meta_horizon),
            ("test_duration", self.test_duration),
            ("ensemble_step_size", self.ensemble_step_size),
            ("meta_step_size", self.meta_step_size),
            ("acmrr_step_size", self.acmrr_step_size),
            ("divergence_penalty", self.divergence_penalty),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(key, "must be positive and finite");
            }
        }
        let nonneg = [
            ("alpha", self.alpha),
            ("ensemble_mu", self.ensemble_mu),
            ("meta_mu", self.meta_mu),
            ("acmrr_mu_ridge", self.acmrr_mu_ridge),
            ("acmrr_mu_meta", self.acmrr_mu_meta),
            ("walk_xy", self.walk_xy),
            ("walk_phi", self.walk_phi),
        ];
        for (key, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, "must be non-negative and finite");
            }
        }
        let fractions = [
            ("ensemble_train_fraction", self.ensemble_train_fraction),
            ("ensemble_batch_fraction", self.ensemble_batch_fraction),
            ("meta_train_fraction", self.meta_train_fraction),
            ("acmrr_train_fraction", self.acmrr_train_fraction),
            ("acmrr_subset_fraction", self.acmrr_subset_fraction),
        ];
        for (key, v) in fractions {
            if !(v > 0.0 && v <= 1.0) {
                return bad(key, "must lie in (0, 1]");
            }
        }
        if self.meta_horizon > self.meta_duration {
            return bad("meta_horizon", "must not exceed meta_duration");
        }
        self.train_wind()
            .validate()
            .or_else(|e| bad("train_wind_*", &e.to_string()))?;
        self.test_wind()
            .validate()
            .or_else(|e| bad("test_wind_*", &e.to_string()))?;
        if self.n_traj == 0 {
            return bad("n_traj", "must be at least 1");
        }
        if self.collect_attempts == 0 {
            return bad("collect_attempts", "must be at least 1");
        }
        if self.m_values.is_empty() || self.m_values.iter().any(|&m| m < 2) {
            return bad("m_values", "needs at least one value, each at least 2");
        }
        if self.meta_refs < 2 {
            return bad("meta_refs", "must be at least 2");
        }
        if self.n_test == 0 || self.n_seeds == 0 {
            return bad("n_test", "n_test and n_seeds must be at least 1");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every", "must be at least 1");
        }
        if ModelKind::from_name(&self.model_kind).is_none() {
            return bad("model_kind", "expected \"residual\" or \"generic\"");
        }
        if ControlMode::from_name(&self.meta_mode).is_none() {
            return bad("meta_mode", "expected \"continuous\" or \"zoh\"");
        }
        if !matches!(self.eval_gains.as_str(), "grid" | "nominal") {
            return bad("eval_gains", "expected \"grid\" or \"nominal\"");
        }
        if self.methods.is_empty() {
            return bad("methods", "must name at least one method");
        }
        for m in &self.methods {
            if !matches!(m.as_str(), "ours" | "acmrr" | "pid") {
                return bad("methods", &format!("unknown method {m:?}"));
            }
        }
        Ok(())
    }

    pub fn rollout(&self) -> RolloutConfig {
        RolloutConfig {
            dt: self.dt,
            control_period: self.control_period,
            alpha: self.alpha,
            max_state: self.max_state,
            ..RolloutConfig::default()
        }
    }

    pub fn bounds(&self) -> WalkBounds {
        WalkBounds {
            xy: self.walk_xy,
            phi: self.walk_phi,
        }
    }

    pub fn train_wind(&self) -> WindDistribution {
        WindDistribution {
            lo: self.train_wind_lo,
            hi: self.train_wind_hi,
            a: self.train_wind_a,
            b: self.train_wind_b,
        }
    }

    pub fn test_wind(&self) -> WindDistribution {
        WindDistribution {
            lo: self.test_wind_lo,
            hi: self.test_wind_hi,
            a: self.test_wind_a,
            b: self.test_wind_b,
        }
    }

    pub fn campaign(&self) -> CampaignConfig {
        CampaignConfig {
            n_traj: self.n_traj,
            duration: self.collect_duration,
            bounds: self.bounds(),
            wind: self.train_wind(),
            collector: PdController {
                kp: self.collect_kp,
                kd: self.collect_kd,
            },
            rollout: self.rollout().with_mode(ControlMode::ZeroOrderHold),
            max_attempts: self.collect_attempts,
        }
    }

    pub fn ensemble(&self) -> EnsembleConfig {
        EnsembleConfig {
            kind: ModelKind::from_name(&self.model_kind).expect("validated"),
            mu: self.ensemble_mu,
            epochs: self.ensemble_epochs,
            step_size: self.ensemble_step_size,
            train_fraction: self.ensemble_train_fraction,
            batch_fraction: self.ensemble_batch_fraction,
        }
    }

    pub fn meta(&self) -> MetaConfig {
        let mode = ControlMode::from_name(&self.meta_mode).expect("validated");
        MetaConfig {
            n_refs: self.meta_refs,
            duration: self.meta_duration,
            bounds: self.bounds(),
            mu: self.meta_mu,
            steps: self.meta_steps,
            step_size: self.meta_step_size,
            train_fraction: self.meta_train_fraction,
            rollout: self.rollout().with_horizon(self.meta_horizon).with_mode(mode),
            divergence_penalty: self.divergence_penalty,
            normalize_features: self.normalize_features,
        }
    }

    pub fn acmrr(&self) -> AcmrrConfig {
        AcmrrConfig {
            mu_ridge: self.acmrr_mu_ridge,
            mu_meta: self.acmrr_mu_meta,
            steps: self.acmrr_steps,
            step_size: self.acmrr_step_size,
            train_fraction: self.acmrr_train_fraction,
            subset_fraction: self.acmrr_subset_fraction,
            include_gravity: self.acmrr_include_gravity,
            normalize_features: self.normalize_features,
        }
    }

    pub fn evaluation(&self) -> EvalConfig {
        EvalConfig {
            n_test: self.n_test,
            duration: self.test_duration,
            bounds: self.bounds(),
            wind: self.test_wind(),
            rollout: self.rollout().with_mode(ControlMode::ZeroOrderHold),
        }
    }

    pub fn gains(&self) -> Vec<Gains> {
        match self.eval_gains.as_str() {
            "nominal" => vec![Gains::scaled(1.0, 10.0, 10.0)],
            _ => gain_grid(),
        }
    }
}

/// An environment value is read as a TOML value when it parses as one and
/// as a bare string otherwise.
fn parse_env_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
