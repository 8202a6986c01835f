//! Data collection, test-time evaluation and RMS metrics.

use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;

use crate::autodiff::Eager;
use crate::controllers::{AdaptiveController, FeatureNetwork, Gains, PdController, PidController};
use crate::dynamics::WindField;
use crate::ensemble::TrajectoryLog;
use crate::prng::PrngKey;
use crate::rollout::{simulate_plant, ControlMode, Controller, RolloutConfig, RolloutError};
use crate::trajgen::{random_reference, ReferenceTrajectory, TrajError, WalkBounds};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("rms needs at least two samples, got {0}")]
    TooShort(usize),
    #[error("invalid wind distribution: {0}")]
    Distribution(String),
    #[error("{0}")]
    Config(String),
    #[error("trajectory {id} diverged on all {attempts} attempts")]
    Exhausted { id: usize, attempts: usize },
    #[error(transparent)]
    Reference(#[from] TrajError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}

/// `sqrt((1/N) Σ_{k=0}^{N} ‖s_k‖²)` over `N + 1` samples.
pub fn rms<const D: usize>(signal: &[[f64; D]]) -> Result<f64, EvalError> {
    if signal.len() < 2 {
        return Err(EvalError::TooShort(signal.len()));
    }
    let n = (signal.len() - 1) as f64;
    let total: f64 = signal.iter().map(|s| s.iter().map(|v| v * v).sum::<f64>()).sum();
    Ok((total / n).sqrt())
}

/// `lo + (hi - lo)·Beta(a, b)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindDistribution {
    pub lo: f64,
    pub hi: f64,
    pub a: f64,
    pub b: f64,
}

impl WindDistribution {
    pub const TRAIN: WindDistribution = WindDistribution {
        lo: 0.0,
        hi: 6.0,
        a: 5.0,
        b: 9.0,
    };
    pub const TEST: WindDistribution = WindDistribution {
        lo: 0.0,
        hi: 10.0,
        a: 5.0,
        b: 7.0,
    };

    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.lo < self.hi) || !(self.a > 0.0) || !(self.b > 0.0) {
            return Err(EvalError::Distribution(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.lo + (self.hi - self.lo) * self.a / (self.a + self.b)
    }

    pub fn variance(&self) -> f64 {
        let (a, b) = (self.a, self.b);
        (self.hi - self.lo).powi(2) * a * b / ((a + b).powi(2) * (a + b + 1.0))
    }
}

/// Draws one wind speed; the Beta variate is `X / (X + Y)` for independent
/// `X ~ Gamma(a)`, `Y ~ Gamma(b)`.
pub fn sample_wind<R: rand::Rng + ?Sized>(dist: &WindDistribution, rng: &mut R) -> f64 {
    let x = Gamma::new(dist.a, 1.0).expect("validated shape").sample(rng);
    let y = Gamma::new(dist.b, 1.0).expect("validated shape").sample(rng);
    dist.lo + (dist.hi - dist.lo) * x / (x + y)
}

pub fn sample_winds(dist: &WindDistribution, key: PrngKey, n: usize) -> Vec<f64> {
    let mut rng = key.stream();
    (0..n).map(|_| sample_wind(dist, &mut rng)).collect()
}

/// `(I, 10I, 10I)` first, then its scaled variants.
pub fn gain_grid() -> Vec<Gains> {
    vec![
        Gains::scaled(1.0, 10.0, 10.0),
        Gains::scaled(0.5, 5.0, 5.0),
        Gains::scaled(2.0, 20.0, 20.0),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CampaignConfig {
    pub n_traj: usize,
    pub duration: f64,
    pub bounds: WalkBounds,
    pub wind: WindDistribution,
    pub collector: PdController,
    /// `dt` is the integration step; the control period is the logging rate.
    pub rollout: RolloutConfig,
    /// Attempts per trajectory before giving up.
    pub max_attempts: usize,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            n_traj: 500,
            duration: 30.0,
            bounds: WalkBounds::default(),
            wind: WindDistribution::TRAIN,
            collector: PdController::default(),
            rollout: RolloutConfig::default().with_mode(ControlMode::ZeroOrderHold),
            max_attempts: 20,
        }
    }
}

/// Logs with `log.id` equal to the index, the key each was drawn from, and
/// how many drafts were discarded after diverging.
#[derive(Clone, Debug)]
pub struct Campaign {
    pub logs: Vec<TrajectoryLog>,
    pub seeds: Vec<u64>,
    pub regenerated: usize,
}

/// One attempt: reference and wind from `key`, PD flight on the true vehicle.
fn collect_one(key: PrngKey, cfg: &CampaignConfig) -> Result<TrajectoryLog, EvalError> {
    let reference = random_reference(key.split("reference"), &cfg.bounds, cfg.duration)?;
    let wind = sample_wind(&cfg.wind, &mut key.split("wind").stream());
    let rollout = cfg.rollout.with_horizon(cfg.duration);
    Ok(simulate_plant(WindField::new(wind), &cfg.collector, &reference, &rollout)?.log)
}

pub fn collect_campaign(key: PrngKey, cfg: &CampaignConfig) -> Result<Campaign, EvalError> {
    if cfg.n_traj == 0 || cfg.max_attempts == 0 {
        return Err(EvalError::Config(
            "campaign needs n_traj >= 1 and max_attempts >= 1".into(),
        ));
    }
    cfg.wind.validate()?;
    let root = key.split("campaign");
    let per: Vec<Result<(TrajectoryLog, u64, usize), EvalError>> = (0..cfg.n_traj)
        .into_par_iter()
        .map(|i| {
            for attempt in 0..cfg.max_attempts {
                let k = root.fold_in(i as u64).fold_in(attempt as u64);
                match collect_one(k, cfg) {
                    Ok(log) => return Ok((log.with_id(i), k.to_u64(), attempt)),
                    Err(EvalError::Rollout(RolloutError::Diverged { .. })) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(EvalError::Exhausted {
                id: i,
                attempts: cfg.max_attempts,
            })
        })
        .collect();
    let mut campaign = Campaign {
        logs: Vec::with_capacity(cfg.n_traj),
        seeds: Vec::with_capacity(cfg.n_traj),
        regenerated: 0,
    };
    for r in per {
        let (log, seed, retries) = r?;
        campaign.logs.push(log);
        campaign.seeds.push(seed);
        campaign.regenerated += retries;
    }
    Ok(campaign)
}

/// RMS recorded for a run that diverged; large enough to dominate any mean.
pub const DIVERGED_RMS: f64 = 1e6;

#[derive(Clone, Debug, PartialEq)]
pub struct TestCase {
    pub id: usize,
    pub reference: ReferenceTrajectory,
    pub wind: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub n_test: usize,
    pub duration: f64,
    pub bounds: WalkBounds,
    pub wind: WindDistribution,
    pub rollout: RolloutConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_test: 200,
            duration: 10.0,
            bounds: WalkBounds::default(),
            wind: WindDistribution::TEST,
            rollout: RolloutConfig::default().with_mode(ControlMode::ZeroOrderHold),
        }
    }
}

/// The shared `(reference, wind)` pairs for one evaluation seed.
pub fn test_set(key: PrngKey, cfg: &EvalConfig) -> Result<Vec<TestCase>, EvalError> {
    cfg.wind.validate()?;
    let winds = sample_winds(&cfg.wind, key.split("winds"), cfg.n_test);
    let refs = key.split("references");
    winds
        .into_iter()
        .enumerate()
        .map(|(id, wind)| {
            Ok(TestCase {
                id,
                reference: random_reference(refs.fold_in(id as u64), &cfg.bounds, cfg.duration)?,
                wind,
            })
        })
        .collect()
}

/// FNV-1a over the bit patterns of every wind and spline coefficient.
pub fn test_set_hash(cases: &[TestCase]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: u64| {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for c in cases {
        eat(c.id as u64);
        eat(c.wind.to_bits());
        eat(c.reference.duration().to_bits());
        for v in c.reference.to_tensor().data() {
            eat(v.to_bits());
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum MethodController {
    Pid,
    /// Adaptive law on learned features; `learned` gains override the grid.
    Adaptive {
        features: FeatureNetwork,
        learned: Option<Gains>,
    },
}

/// A trained method as evaluated: its name, ensemble size and training seed.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodRun {
    pub method: String,
    pub m: usize,
    pub seed: u64,
    pub controller: MethodController,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub method: String,
    pub gain_id: String,
    pub m: usize,
    pub seed: u64,
    pub traj_id: usize,
    pub wind: f64,
    pub rms_error: f64,
    pub rms_effort: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub method: String,
    pub gain_id: String,
    pub m: usize,
    pub seed: u64,
    pub count: usize,
    pub diverged: usize,
    pub mean_error: f64,
    pub sd_error: f64,
    pub mean_effort: f64,
    pub sd_effort: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// One row per method, gain setting, `M` and seed.
    pub aggregates: Vec<AggregateRow>,
    pub test_sets: Vec<TestSetSummary>,
}

/// Identity of one shared test set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TestSetSummary {
    pub seed: u64,
    pub hash: u64,
    /// Winds above the upper end of the training distribution.
    pub above_training_support: usize,
}

impl EvalReport {
    pub fn above_training_support(&self) -> usize {
        self.test_sets.iter().map(|t| t.above_training_support).sum()
    }

    pub fn diverged(&self) -> usize {
        self.rows.iter().filter(|r| r.diverged).count()
    }

    /// Mean RMS error of one aggregate cell.
    pub fn mean_error(&self, method: &str, gain_id: &str, m: usize, seed: u64) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.gain_id == gain_id && a.m == m && a.seed == seed)
            .map(|a| a.mean_error)
    }

    pub fn mean_effort(&self, method: &str, gain_id: &str, m: usize, seed: u64) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.gain_id == gain_id && a.m == m && a.seed == seed)
            .map(|a| a.mean_effort)
    }
}

/// Sample mean and standard deviation (`n - 1` denominator, 0 for one value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates consecutive rows sharing `(method, gain, M, seed)`; rows must be
/// grouped, as [`evaluate_methods`] emits them.
pub fn aggregate(rows: &[EvalRow]) -> Vec<AggregateRow> {
    let same =
        |a: &EvalRow, b: &EvalRow| a.method == b.method && a.gain_id == b.gain_id && a.m == b.m && a.seed == b.seed;
    rows.chunk_by(same)
        .map(|group| {
            let errors: Vec<f64> = group.iter().map(|r| r.rms_error).collect();
            let efforts: Vec<f64> = group.iter().map(|r| r.rms_effort).collect();
            let (mean_error, sd_error) = mean_sd(&errors);
            let (mean_effort, sd_effort) = mean_sd(&efforts);
            let head = &group[0];
            AggregateRow {
                method: head.method.clone(),
                gain_id: head.gain_id.clone(),
                m: head.m,
                seed: head.seed,
                count: group.len(),
                diverged: group.iter().filter(|r| r.diverged).count(),
                mean_error,
                sd_error,
                mean_effort,
                sd_effort,
            }
        })
        .collect()
}

fn fly<C: Controller<Eager>>(
    controller: &C,
    case: &TestCase,
    rollout: &RolloutConfig,
) -> Result<(f64, f64, bool), EvalError> {
    match simulate_plant(WindField::new(case.wind), controller, &case.reference, rollout) {
        Ok(run) => Ok((run.rms_error, run.rms_effort, false)),
        Err(RolloutError::Diverged { .. }) => Ok((DIVERGED_RMS, DIVERGED_RMS, true)),
        Err(e) => Err(e.into()),
    }
}

/// Runs every method on the shared test set of its seed, under every grid
/// gain (or its learned gains). The test set for seed `s` is drawn from
/// `key.fold_in(s)`, so methods with equal seeds see identical pairs.
pub fn evaluate_methods(
    methods: &[MethodRun],
    grid: &[Gains],
    key: PrngKey,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if cfg.n_test == 0 || grid.is_empty() {
        return Err(EvalError::Config("evaluation needs n_test >= 1 and a gain grid".into()));
    }
    let rollout = cfg
        .rollout
        .with_mode(ControlMode::ZeroOrderHold)
        .with_horizon(cfg.duration);
    let mut seeds: Vec<u64> = methods.iter().map(|m| m.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut sets = Vec::with_capacity(seeds.len());
    let mut test_sets = Vec::with_capacity(seeds.len());
    for &s in &seeds {
        let set = test_set(key.fold_in(s), cfg)?;
        test_sets.push(TestSetSummary {
            seed: s,
            hash: test_set_hash(&set),
            above_training_support: set.iter().filter(|c| c.wind > WindDistribution::TRAIN.hi).count(),
        });
        sets.push(set);
    }

    let mut rows = Vec::new();
    for run in methods {
        let set = &sets[seeds.binary_search(&run.seed).expect("seed collected")];
        let settings: Vec<(String, Gains)> = match &run.controller {
            MethodController::Adaptive { learned: Some(g), .. } => vec![("learned".to_string(), *g)],
            _ => grid.iter().enumerate().map(|(i, g)| (i.to_string(), *g)).collect(),
        };
        for (gain_id, gains) in settings {
            let results: Vec<Result<(f64, f64, bool), EvalError>> = set
                .par_iter()
                .map(|case| {
                    let mut g = Eager;
                    match &run.controller {
                        MethodController::Pid => fly(&PidController::new(&mut g, &gains.to_pid()), case, &rollout),
                        MethodController::Adaptive { features, .. } => {
                            let map = features.place(&mut g, |_, t| t);
                            fly(&AdaptiveController::with_gains(&mut g, map, &gains), case, &rollout)
                        }
                    }
                })
                .collect();
            for (case, r) in set.iter().zip(results) {
                let (rms_error, rms_effort, diverged) = r?;
                rows.push(EvalRow {
                    method: run.method.clone(),
                    gain_id: gain_id.clone(),
                    m: run.m,
                    seed: run.seed,
                    traj_id: case.id,
                    wind: case.wind,
                    rms_error,
                    rms_effort,
                    diverged,
                });
            }
        }
    }
    Ok(EvalReport {
        aggregates: aggregate(&rows),
        rows,
        test_sets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controllers::scaled_identity;

    #[test]
    fn rms_examples() {
        let c = [3.0, 4.0];
        let n = 10;
        let r = rms(&vec![c; n + 1]).unwrap();
        assert!((r - 5.0 * ((n as f64 + 1.0) / n as f64).sqrt()).abs() < 1e-12);
        assert_eq!(rms(&[[0.0; 2]; 5]).unwrap(), 0.0);
        let s = [[1.0, -2.0], [0.5, 0.0], [3.0, 1.0]];
        let d = s.map(|v| v.map(|x| 2.0 * x));
        assert!((rms(&d).unwrap() - 2.0 * rms(&s).unwrap()).abs() < 1e-14);
        assert!(rms::<2>(&[]).is_err());
    }

    #[test]
    fn wind_support_and_validation() {
        let w = sample_winds(&WindDistribution::TEST, PrngKey::from_seed(3), 2000);
        assert!(w.iter().all(|&v| (0.0..=10.0).contains(&v)));
        assert!(w.iter().any(|&v| v > 6.0));
        assert!(WindDistribution {
            lo: 1.0,
            hi: 1.0,
            a: 1.0,
            b: 1.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn grid_mapping() {
        let grid = gain_grid();
        assert_eq!(grid, gain_grid());
        let pid = grid[0].to_pid();
        assert_eq!(pid.kp, scaled_identity(20.0));
        assert_eq!(pid.ki, scaled_identity(10.0));
        assert_eq!(pid.kd, scaled_identity(11.0));
    }

    #[test]
    fn campaign_logs_full_length_with_constant_wind() {
        let cfg = CampaignConfig {
            n_traj: 2,
            ..Default::default()
        };
        let c = collect_campaign(PrngKey::from_seed(5), &cfg).unwrap();
        assert_eq!(c.logs.len(), 2);
        for (i, log) in c.logs.iter().enumerate() {
            assert_eq!(log.id, i);
            assert_eq!(log.len(), 3000);
            let w = log.wind.unwrap();
            assert!((0.0..=6.0).contains(&w));
        }
        let again = collect_campaign(PrngKey::from_seed(5), &cfg).unwrap();
        assert_eq!(c.logs, again.logs);
        assert_eq!(c.seeds, again.seeds);
    }

    #[test]
    fn pid_rows_ignore_m_and_sets_are_shared() {
        let cfg = EvalConfig {
            n_test: 2,
            duration: 1.0,
            ..Default::default()
        };
        let f = FeatureNetwork::glorot(PrngKey::from_seed(1), true);
        let runs = vec![
            MethodRun {
                method: "pid".into(),
                m: 2,
                seed: 0,
                controller: MethodController::Pid,
            },
            MethodRun {
                method: "pid".into(),
                m: 5,
                seed: 0,
                controller: MethodController::Pid,
            },
            MethodRun {
                method: "ours".into(),
                m: 2,
                seed: 0,
                controller: MethodController::Adaptive {
                    features: f,
                    learned: Some(Gains::scaled(1.0, 10.0, 10.0)),
                },
            },
        ];
        let grid = gain_grid();
        let rep = evaluate_methods(&runs, &grid, PrngKey::from_seed(9), &cfg).unwrap();
        assert_eq!(rep.rows.len(), 2 * 3 + 2 * 3 + 2);
        assert_eq!(rep.aggregates.len(), 3 + 3 + 1);
        for (a, b) in rep.rows[..6].iter().zip(&rep.rows[6..12]) {
            assert_eq!((a.rms_error, a.rms_effort, a.wind), (b.rms_error, b.rms_effort, b.wind));
        }
        assert_eq!(rep.test_sets.len(), 1);
        let set = test_set(PrngKey::from_seed(9).fold_in(0), &cfg).unwrap();
        assert_eq!(rep.test_sets[0].hash, test_set_hash(&set));
        assert_eq!(aggregate(&rep.rows), rep.aggregates);
        assert_eq!(rep.diverged(), 0);
    }
}
