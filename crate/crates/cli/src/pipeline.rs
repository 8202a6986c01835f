//! The commands: data collection, ensemble training, both meta-trainers,
//! evaluation, and the end-to-end report.
//!
//! Stream tree under the master seed `S`:
//! `S/collect`, `S/replicate[r]/m[M]/{sample,ensemble,meta,acmrr}` and
//! `S/evaluate[r]` for the test set of replicate `r`.

use std::fs;
use std::path::{Path, PathBuf};

use adaptmeta::acmrr::{AcmrrCurveRow, AcmrrError, AcmrrState, AcmrrTrainer};
use adaptmeta::autodiff::{AdamState, Tensor};
use adaptmeta::controllers::{FeatureNetwork, GainParams};
use adaptmeta::ensemble::{train_ensemble, EnsembleError, EnsembleModel, ModelKind, TrainedModel, TrajectoryLog};
use adaptmeta::eval::{
    collect_campaign, evaluate_methods, mean_sd, EvalError, EvalReport, MethodController, MethodRun,
};
use adaptmeta::meta::{init_meta_params, meta_references, CurveRow, MetaError, MetaParams, MetaState, MetaTrainer};
use adaptmeta::prng::PrngKey;
use rand::seq::SliceRandom;

use crate::config::RunConfig;
use crate::store::{
    field, fmt_f64, read_csv, read_trajectory, write_csv, write_text, write_trajectory, Checkpoint, StoreError,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Acmrr(#[from] AcmrrError),
    #[error("output directory {0} is not empty (use --force to overwrite)")]
    NotEmpty(PathBuf),
    #[error("{0}")]
    Input(String),
}

type Result<T> = std::result::Result<T, PipelineError>;

/// What to do with an existing output directory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Existing {
    Fail,
    Replace,
    /// Keep completed stages; continue training from its state checkpoint.
    Resume,
}

impl Existing {
    pub fn from_force(force: bool) -> Self {
        if force {
            Existing::Replace
        } else {
            Existing::Fail
        }
    }
}

fn is_nonempty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
    .into()
}

/// Readies `dir` for a stage whose completion marker is `done`. Returns
/// `false` if the stage is already complete and should be skipped.
fn prepare(dir: &Path, done: &str, existing: Existing, resumable: bool) -> Result<bool> {
    if is_nonempty(dir) {
        match existing {
            Existing::Fail if !resumable || !dir.join(STATE).exists() => {
                return Err(PipelineError::NotEmpty(dir.to_path_buf()))
            }
            Existing::Fail => {}
            Existing::Replace => fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?,
            Existing::Resume if dir.join(done).exists() => return Ok(false),
            Existing::Resume if resumable => {}
            Existing::Resume => fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?,
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    Ok(true)
}

const STATE: &str = "state.ckpt";

pub fn master_key(cfg: &RunConfig) -> PrngKey {
    PrngKey::from_seed(cfg.seed)
}

pub fn run_key(cfg: &RunConfig, replicate: u64, m: usize) -> PrngKey {
    master_key(cfg)
        .split("replicate")
        .fold_in(replicate)
        .split("m")
        .fold_in(m as u64)
}

fn write_run_files(dir: &Path, cfg: &RunConfig, streams: &[String]) -> Result<()> {
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    let mut s = streams.join("\n");
    s.push('\n');
    write_text(&dir.join("streams.txt"), &s)?;
    Ok(())
}

pub const MANIFEST_HEADER: [&str; 3] = ["traj-id", "wind", "seed"];

pub fn cmd_collect(cfg: &RunConfig, out: &Path, existing: Existing) -> Result<usize> {
    if !prepare(out, "manifest.csv", existing, false)? {
        return Ok(0);
    }
    let campaign = collect_campaign(master_key(cfg).split("collect"), &cfg.campaign())?;
    for log in &campaign.logs {
        write_trajectory(&out.join(format!("traj_{:04}.csv", log.id)), log)?;
    }
    write_csv(
        &out.join("campaign.csv"),
        &["n-traj", "regenerated"],
        [vec![campaign.logs.len().to_string(), campaign.regenerated.to_string()]],
    )?;
    write_run_files(
        out,
        cfg,
        &[format!("collect: seed({})/collect/[traj-id]/[attempt]", cfg.seed)],
    )?;
    // Written last: its presence marks a complete dataset.
    write_csv(
        &out.join("manifest.csv"),
        &MANIFEST_HEADER,
        campaign
            .logs
            .iter()
            .zip(&campaign.seeds)
            .map(|(log, s)| vec![log.id.to_string(), fmt_f64(log.wind.unwrap_or(f64::NAN)), s.to_string()]),
    )?;
    Ok(campaign.regenerated)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<TrajectoryLog>> {
    let manifest = dir.join("manifest.csv");
    let rows = read_csv(&manifest, &MANIFEST_HEADER)?;
    let mut logs = Vec::with_capacity(rows.len());
    for (line, rec) in &rows {
        let id: usize = field(&manifest, *line, rec, 0, "traj-id")?;
        let wind: f64 = field(&manifest, *line, rec, 1, "wind")?;
        logs.push(read_trajectory(&dir.join(format!("traj_{id:04}.csv")), id, Some(wind))?);
    }
    if logs.is_empty() {
        return Err(PipelineError::Input(format!(
            "{} lists no trajectories",
            manifest.display()
        )));
    }
    Ok(logs)
}

/// `m` distinct positions out of `0..n`, sorted.
pub fn sample_ids(key: PrngKey, n: usize, m: usize) -> Result<Vec<usize>> {
    if m > n {
        return Err(PipelineError::Input(format!(
            "M = {m} exceeds the {n} trajectories in the dataset"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut key.stream());
    let mut picked = idx[..m].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

fn sampled_logs(cfg: &RunConfig, logs: &[TrajectoryLog], replicate: u64, m: usize) -> Result<Vec<TrajectoryLog>> {
    let ids = sample_ids(run_key(cfg, replicate, m).split("sample"), logs.len(), m)?;
    Ok(ids.iter().map(|&i| logs[i].clone()).collect())
}

fn stage_streams(cfg: &RunConfig, replicate: u64, m: usize, stage: &str) -> Vec<String> {
    let base = format!("seed({})/replicate/[{replicate}]/m/[{m}]", cfg.seed);
    vec![format!("sample: {base}/sample"), format!("{stage}: {base}/{stage}")]
}

pub fn cmd_train_ensemble(
    cfg: &RunConfig,
    dataset: &Path,
    out: &Path,
    existing: Existing,
    replicate: u64,
    m: usize,
) -> Result<Vec<TrainedModel>> {
    let logs = load_dataset(dataset)?;
    let chosen = sampled_logs(cfg, &logs, replicate, m)?;
    if !prepare(out, "manifest.csv", existing, false)? {
        return Ok(Vec::new());
    }
    let trained = train_ensemble(&chosen, run_key(cfg, replicate, m).split("ensemble"), &cfg.ensemble())?;
    for (j, t) in trained.iter().enumerate() {
        let mut c = Checkpoint::new("ensemble")
            .meta("kind", t.model.kind.name())
            .meta("trajectory", t.trajectory)
            .meta("best-epoch", t.best_epoch)
            .meta("seed", cfg.seed)
            .meta("replicate", replicate)
            .meta("m", m);
        c.extend("mlp", &t.model.mlp.params());
        c.save(&out.join(format!("model_{j:03}.ckpt")))?;
        write_csv(
            &out.join(format!("curve_{j:03}.csv")),
            &["epoch", "train-loss", "valid-loss"],
            t.curve
                .iter()
                .map(|r| vec![r.epoch.to_string(), fmt_f64(r.train_loss), fmt_f64(r.valid_loss)]),
        )?;
    }
    write_run_files(out, cfg, &stage_streams(cfg, replicate, m, "ensemble"))?;
    write_csv(
        &out.join("manifest.csv"),
        &["model", "traj-id", "best-epoch"],
        trained
            .iter()
            .enumerate()
            .map(|(j, t)| vec![j.to_string(), t.trajectory.to_string(), t.best_epoch.to_string()]),
    )?;
    Ok(trained)
}

/// Run identity stored in every trained artifact.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunId {
    pub replicate: u64,
    pub m: usize,
}

fn run_id(c: &Checkpoint, path: &Path) -> Result<RunId> {
    Ok(RunId {
        replicate: c.meta_parse("replicate", path)?,
        m: c.meta_parse("m", path)?,
    })
}

pub fn load_model(path: &Path) -> Result<(EnsembleModel, RunId)> {
    let c = Checkpoint::load(path)?;
    let kind = ModelKind::from_name(c.meta_str("kind", path)?)
        .ok_or_else(|| StoreError::content(path, "unknown model kind"))?;
    let mut model = EnsembleModel::zero_output(kind);
    let params = c.series_like("mlp", &model.mlp.params(), path)?;
    model.mlp.set_params(&params);
    Ok((model, run_id(&c, path)?))
}

pub fn load_ensemble(dir: &Path) -> Result<(Vec<EnsembleModel>, RunId)> {
    let manifest = dir.join("manifest.csv");
    let rows = read_csv(&manifest, &["model", "traj-id", "best-epoch"])?;
    let mut models = Vec::new();
    let mut id = None;
    for (line, rec) in &rows {
        let j: usize = field(&manifest, *line, rec, 0, "model")?;
        let (model, rid) = load_model(&dir.join(format!("model_{j:03}.ckpt")))?;
        if id.is_some_and(|i| i != rid) {
            return Err(PipelineError::Input(format!("{} mixes runs", dir.display())));
        }
        id = Some(rid);
        models.push(model);
    }
    let id = id.ok_or_else(|| PipelineError::Input(format!("{} lists no models", manifest.display())))?;
    Ok((models, id))
}

fn features_checkpoint(c: &mut Checkpoint, prefix: &str, f: &FeatureNetwork) {
    c.extend(prefix, &f.mlp.params());
}

fn load_features(c: &Checkpoint, prefix: &str, normalize: bool, path: &Path) -> Result<FeatureNetwork> {
    let mut f = FeatureNetwork::glorot(PrngKey::from_seed(0), normalize);
    let params = c.series_like(prefix, &f.mlp.params(), path)?;
    f.mlp.set_params(&params);
    Ok(f)
}

fn meta_params_checkpoint(c: &mut Checkpoint, prefix: &str, p: &MetaParams) {
    features_checkpoint(c, &format!("{prefix}.features"), &p.features);
    let [l, k, g] = p.gains.tensors();
    c.push(format!("{prefix}.gains.lambda"), l);
    c.push(format!("{prefix}.gains.k"), k);
    c.push(format!("{prefix}.gains.gamma"), g);
}

fn load_meta_params(c: &Checkpoint, prefix: &str, normalize: bool, path: &Path) -> Result<MetaParams> {
    let features = load_features(c, &format!("{prefix}.features"), normalize, path)?;
    let gains: Vec<Tensor> = ["lambda", "k", "gamma"]
        .iter()
        .map(|n| {
            let name = format!("{prefix}.gains.{n}");
            c.get(&name)
                .filter(|t| t.shape() == [6])
                .cloned()
                .ok_or_else(|| StoreError::content(path, format!("missing or malformed {name}")))
        })
        .collect::<std::result::Result<_, _>>()?;
    Ok(MetaParams {
        features,
        gains: GainParams::from_tensors(&gains),
    })
}

fn adam_checkpoint(c: &mut Checkpoint, adam: &AdamState) {
    c.extend("adam.m", &adam.m);
    c.extend("adam.v", &adam.v);
    c.metadata.insert("adam-step".into(), adam.step.to_string());
}

fn load_adam(c: &Checkpoint, like: &[Tensor], path: &Path) -> Result<AdamState> {
    Ok(AdamState {
        m: c.series_like("adam.m", like, path)?,
        v: c.series_like("adam.v", like, path)?,
        step: c.meta_parse("adam-step", path)?,
    })
}

fn curve_tensor(rows: impl Iterator<Item = (usize, f64, f64)>) -> Tensor {
    let data: Vec<f64> = rows.flat_map(|(s, a, b)| [s as f64, a, b]).collect();
    let n = data.len() / 3;
    Tensor::matrix(n, 3, data).expect("shape")
}

fn curve_rows(c: &Checkpoint, path: &Path) -> Result<Vec<(usize, f64, f64)>> {
    let t = c
        .get("curve")
        .filter(|t| t.rank() == 2 && t.shape()[1] == 3)
        .ok_or_else(|| StoreError::content(path, "missing or malformed curve"))?;
    Ok(t.data().chunks(3).map(|r| (r[0] as usize, r[1], r[2])).collect())
}

fn write_curve(path: &Path, rows: impl Iterator<Item = (usize, f64, f64)>) -> Result<()> {
    write_csv(
        path,
        &["step", "train-loss", "valid-loss"],
        rows.map(|(s, a, b)| vec![s.to_string(), fmt_f64(a), fmt_f64(b)]),
    )?;
    Ok(())
}

fn save_meta_state(path: &Path, s: &MetaState, id: RunId, cfg: &RunConfig) -> Result<()> {
    let mut c = Checkpoint::new("meta-train-state")
        .meta("seed", cfg.seed)
        .meta("replicate", id.replicate)
        .meta("m", id.m)
        .meta("step", s.step)
        .meta("best-step", s.best_step)
        .meta("best-valid", fmt_f64(s.best_valid))
        .meta("normalize", cfg.normalize_features);
    meta_params_checkpoint(&mut c, "params", &s.params);
    meta_params_checkpoint(&mut c, "best", &s.best);
    adam_checkpoint(&mut c, &s.adam);
    c.push(
        "curve",
        curve_tensor(s.curve.iter().map(|r| (r.step, r.train_loss, r.valid_loss))),
    );
    c.save(path)?;
    Ok(())
}

fn load_meta_state(path: &Path, id: RunId) -> Result<MetaState> {
    let c = Checkpoint::load(path)?;
    if run_id(&c, path)? != id {
        return Err(PipelineError::Input(format!(
            "{} belongs to another run",
            path.display()
        )));
    }
    let normalize = c.meta_parse("normalize", path)?;
    let params = load_meta_params(&c, "params", normalize, path)?;
    let adam = load_adam(&c, &params.tensors(), path)?;
    Ok(MetaState {
        best: load_meta_params(&c, "best", normalize, path)?,
        adam,
        params,
        step: c.meta_parse("step", path)?,
        best_step: c.meta_parse("best-step", path)?,
        best_valid: c.meta_parse("best-valid", path)?,
        curve: curve_rows(&c, path)?
            .into_iter()
            .map(|(step, train_loss, valid_loss)| CurveRow {
                step,
                train_loss,
                valid_loss,
            })
            .collect(),
    })
}

/// Meta-trains on the ensemble in `ensemble_dir`; resumes from `state.ckpt`
/// when the output directory holds one.
pub fn cmd_meta_train(
    cfg: &RunConfig,
    ensemble_dir: &Path,
    out: &Path,
    existing: Existing,
) -> Result<Option<MetaState>> {
    let (models, id) = load_ensemble(ensemble_dir)?;
    if !prepare(out, "params.ckpt", existing, true)? {
        return Ok(None);
    }
    let mcfg = cfg.meta();
    let key = run_key(cfg, id.replicate, id.m).split("meta");
    let refs = meta_references(key.split("references"), &mcfg)?;
    let trainer = MetaTrainer::new(&refs, &models, key.split("split"), mcfg)?;
    let state_path = out.join(STATE);
    let mut state = if state_path.exists() {
        load_meta_state(&state_path, id)?
    } else {
        trainer.start(init_meta_params(key.split("init"), cfg.normalize_features))?
    };
    while state.step < mcfg.steps {
        trainer.step(&mut state)?;
        if state.step % cfg.checkpoint_every == 0 {
            save_meta_state(&state_path, &state, id, cfg)?;
        }
    }
    save_meta_state(&state_path, &state, id, cfg)?;
    write_curve(
        &out.join("curve.csv"),
        state.curve.iter().map(|r| (r.step, r.train_loss, r.valid_loss)),
    )?;
    write_run_files(out, cfg, &stage_streams(cfg, id.replicate, id.m, "meta"))?;
    let mut c = Checkpoint::new("meta-train")
        .meta("seed", cfg.seed)
        .meta("replicate", id.replicate)
        .meta("m", id.m)
        .meta("best-step", state.best_step)
        .meta("normalize", cfg.normalize_features);
    meta_params_checkpoint(&mut c, "theta", &state.best);
    c.save(&out.join("params.ckpt"))?;
    Ok(Some(state))
}

pub fn load_ours(dir: &Path) -> Result<(MetaParams, RunId)> {
    let path = dir.join("params.ckpt");
    let c = Checkpoint::load(&path)?;
    let normalize = c.meta_parse("normalize", &path)?;
    Ok((load_meta_params(&c, "theta", normalize, &path)?, run_id(&c, &path)?))
}

fn save_acmrr_state(path: &Path, s: &AcmrrState, id: RunId, cfg: &RunConfig) -> Result<()> {
    let mut c = Checkpoint::new("acmrr-state")
        .meta("seed", cfg.seed)
        .meta("replicate", id.replicate)
        .meta("m", id.m)
        .meta("step", s.step)
        .meta("best-step", s.best_step)
        .meta("best-valid", fmt_f64(s.best_valid))
        .meta("normalize", cfg.normalize_features);
    features_checkpoint(&mut c, "features", &s.features);
    features_checkpoint(&mut c, "best", &s.best);
    adam_checkpoint(&mut c, &s.adam);
    c.push(
        "curve",
        curve_tensor(s.curve.iter().map(|r| (r.step, r.train_loss, r.valid_loss))),
    );
    c.save(path)?;
    Ok(())
}

fn load_acmrr_state(path: &Path, id: RunId) -> Result<AcmrrState> {
    let c = Checkpoint::load(path)?;
    if run_id(&c, path)? != id {
        return Err(PipelineError::Input(format!(
            "{} belongs to another run",
            path.display()
        )));
    }
    let normalize = c.meta_parse("normalize", path)?;
    let features = load_features(&c, "features", normalize, path)?;
    let adam = load_adam(&c, &features.mlp.params(), path)?;
    Ok(AcmrrState {
        best: load_features(&c, "best", normalize, path)?,
        adam,
        features,
        step: c.meta_parse("step", path)?,
        best_step: c.meta_parse("best-step", path)?,
        best_valid: c.meta_parse("best-valid", path)?,
        curve: curve_rows(&c, path)?
            .into_iter()
            .map(|(step, train_loss, valid_loss)| AcmrrCurveRow {
                step,
                train_loss,
                valid_loss,
            })
            .collect(),
    })
}

/// Trains the regression baseline on the same `M` trajectories the ensemble
/// of `(replicate, m)` uses.
pub fn cmd_train_acmrr(
    cfg: &RunConfig,
    dataset: &Path,
    out: &Path,
    existing: Existing,
    replicate: u64,
    m: usize,
) -> Result<Option<AcmrrState>> {
    let logs = load_dataset(dataset)?;
    let chosen = sampled_logs(cfg, &logs, replicate, m)?;
    if !prepare(out, "features.ckpt", existing, true)? {
        return Ok(None);
    }
    let id = RunId { replicate, m };
    let key = run_key(cfg, replicate, m).split("acmrr");
    let acfg = cfg.acmrr();
    let trainer = AcmrrTrainer::new(&chosen, key, acfg)?;
    let state_path = out.join(STATE);
    let mut state = if state_path.exists() {
        load_acmrr_state(&state_path, id)?
    } else {
        trainer.start(FeatureNetwork::glorot(
            key.split("init").split("features"),
            cfg.normalize_features,
        ))
    };
    while state.step < acfg.steps {
        trainer.step(&mut state)?;
        if state.step % cfg.checkpoint_every == 0 {
            save_acmrr_state(&state_path, &state, id, cfg)?;
        }
    }
    save_acmrr_state(&state_path, &state, id, cfg)?;
    write_curve(
        &out.join("curve.csv"),
        state.curve.iter().map(|r| (r.step, r.train_loss, r.valid_loss)),
    )?;
    write_run_files(out, cfg, &stage_streams(cfg, replicate, m, "acmrr"))?;
    let mut c = Checkpoint::new("acmrr")
        .meta("seed", cfg.seed)
        .meta("replicate", replicate)
        .meta("m", m)
        .meta("best-step", state.best_step)
        .meta("normalize", cfg.normalize_features);
    features_checkpoint(&mut c, "theta.features", &state.best);
    c.save(&out.join("features.ckpt"))?;
    Ok(Some(state))
}

pub fn load_acmrr(dir: &Path) -> Result<(FeatureNetwork, RunId)> {
    let path = dir.join("features.ckpt");
    let c = Checkpoint::load(&path)?;
    let normalize = c.meta_parse("normalize", &path)?;
    Ok((
        load_features(&c, "theta.features", normalize, &path)?,
        run_id(&c, &path)?,
    ))
}

/// Trained inputs for evaluation.
#[derive(Clone, Debug, Default)]
pub struct EvalInputs {
    pub ours: Vec<PathBuf>,
    pub acmrr: Vec<PathBuf>,
}

/// Method runs in canonical order: by configured method, then `M`, then
/// replicate; ours with learned gains before ours with the grid.
pub fn method_runs(cfg: &RunConfig, inputs: &EvalInputs) -> Result<Vec<MethodRun>> {
    let mut ours = Vec::new();
    for d in &inputs.ours {
        ours.push(load_ours(d)?);
    }
    let mut acmrr = Vec::new();
    for d in &inputs.acmrr {
        acmrr.push(load_acmrr(d)?);
    }
    let mut ids: Vec<RunId> = ours.iter().map(|o| o.1).chain(acmrr.iter().map(|a| a.1)).collect();
    if ids.is_empty() {
        ids = cfg
            .m_values
            .iter()
            .flat_map(|&m| (0..cfg.n_seeds).map(move |replicate| RunId { replicate, m }))
            .collect();
    }
    ids.sort_by_key(|i| (i.m, i.replicate));
    ids.dedup();

    let mut runs = Vec::new();
    for method in &cfg.methods {
        let mut these: Vec<(RunId, u8, MethodController)> = match method.as_str() {
            "ours" => {
                if ours.is_empty() {
                    return Err(PipelineError::Input(
                        "method ours requested without a checkpoint".into(),
                    ));
                }
                ours.iter()
                    .flat_map(|(p, id)| {
                        [
                            (
                                *id,
                                0,
                                MethodController::Adaptive {
                                    features: p.features.clone(),
                                    learned: Some(p.gains()),
                                },
                            ),
                            (
                                *id,
                                1,
                                MethodController::Adaptive {
                                    features: p.features.clone(),
                                    learned: None,
                                },
                            ),
                        ]
                    })
                    .collect()
            }
            "acmrr" => {
                if acmrr.is_empty() {
                    return Err(PipelineError::Input(
                        "method acmrr requested without a checkpoint".into(),
                    ));
                }
                acmrr
                    .iter()
                    .map(|(f, id)| {
                        (
                            *id,
                            0,
                            MethodController::Adaptive {
                                features: f.clone(),
                                learned: None,
                            },
                        )
                    })
                    .collect()
            }
            _ => ids.iter().map(|id| (*id, 0, MethodController::Pid)).collect(),
        };
        these.sort_by_key(|(id, order, _)| (id.m, id.replicate, *order));
        for pair in these.windows(2) {
            if (pair[0].0, pair[0].1) == (pair[1].0, pair[1].1) {
                return Err(PipelineError::Input(format!(
                    "two {method} checkpoints for replicate {} and M = {}",
                    pair[0].0.replicate, pair[0].0.m
                )));
            }
        }
        runs.extend(these.into_iter().map(|(id, _, controller)| MethodRun {
            method: method.clone(),
            m: id.m,
            seed: id.replicate,
            controller,
        }));
    }
    Ok(runs)
}

pub const ROWS_HEADER: [&str; 9] = [
    "method",
    "gain-id",
    "M",
    "seed",
    "traj-id",
    "wind",
    "rms-error",
    "rms-effort",
    "diverged",
];
pub const AGGREGATE_HEADER: [&str; 10] = [
    "method",
    "gain-id",
    "M",
    "seed",
    "count",
    "diverged",
    "mean-error",
    "sd-error",
    "mean-effort",
    "sd-effort",
];

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    write_csv(
        &dir.join("rows.csv"),
        &ROWS_HEADER,
        report.rows.iter().map(|r| {
            vec![
                r.method.clone(),
                r.gain_id.clone(),
                r.m.to_string(),
                r.seed.to_string(),
                r.traj_id.to_string(),
                fmt_f64(r.wind),
                fmt_f64(r.rms_error),
                fmt_f64(r.rms_effort),
                r.diverged.to_string(),
            ]
        }),
    )?;
    write_csv(
        &dir.join("aggregate.csv"),
        &AGGREGATE_HEADER,
        report.aggregates.iter().map(|a| {
            vec![
                a.method.clone(),
                a.gain_id.clone(),
                a.m.to_string(),
                a.seed.to_string(),
                a.count.to_string(),
                a.diverged.to_string(),
                fmt_f64(a.mean_error),
                fmt_f64(a.sd_error),
                fmt_f64(a.mean_effort),
                fmt_f64(a.sd_effort),
            ]
        }),
    )?;
    write_csv(
        &dir.join("summary.csv"),
        &SUMMARY_HEADER,
        summary(report).into_iter().map(|s| s.to_row()),
    )?;
    write_csv(
        &dir.join("test_sets.csv"),
        &["seed", "hash", "above-training-support"],
        report.test_sets.iter().map(|t| {
            vec![
                t.seed.to_string(),
                format!("{:016x}", t.hash),
                t.above_training_support.to_string(),
            ]
        }),
    )?;
    Ok(())
}

pub const SUMMARY_HEADER: [&str; 8] = [
    "method",
    "gain-id",
    "M",
    "count",
    "diverged",
    "mean-error",
    "sd-error",
    "mean-effort",
];

/// Pooled over trajectories and seeds, one row per method, gain and `M`.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub gain_id: String,
    pub m: usize,
    pub count: usize,
    pub diverged: usize,
    pub mean_error: f64,
    pub sd_error: f64,
    pub mean_effort: f64,
}

impl SummaryRow {
    fn to_row(&self) -> Vec<String> {
        vec![
            self.method.clone(),
            self.gain_id.clone(),
            self.m.to_string(),
            self.count.to_string(),
            self.diverged.to_string(),
            fmt_f64(self.mean_error),
            fmt_f64(self.sd_error),
            fmt_f64(self.mean_effort),
        ]
    }
}

pub fn summary(report: &EvalReport) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, String, usize)> = Vec::new();
    for r in &report.rows {
        let k = (r.method.clone(), r.gain_id.clone(), r.m);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, gain_id, m)| {
            let rows: Vec<_> = report
                .rows
                .iter()
                .filter(|r| r.method == method && r.gain_id == gain_id && r.m == m)
                .collect();
            let errors: Vec<f64> = rows.iter().map(|r| r.rms_error).collect();
            let efforts: Vec<f64> = rows.iter().map(|r| r.rms_effort).collect();
            let (mean_error, sd_error) = mean_sd(&errors);
            SummaryRow {
                count: rows.len(),
                diverged: rows.iter().filter(|r| r.diverged).count(),
                mean_effort: mean_sd(&efforts).0,
                method,
                gain_id,
                m,
                mean_error,
                sd_error,
            }
        })
        .collect()
}

pub fn cmd_evaluate(cfg: &RunConfig, inputs: &EvalInputs, out: &Path, existing: Existing) -> Result<EvalReport> {
    let runs = method_runs(cfg, inputs)?;
    prepare(out, "rows.csv", existing, false)?;
    let report = evaluate_methods(
        &runs,
        &cfg.gains(),
        master_key(cfg).split("evaluate"),
        &cfg.evaluation(),
    )?;
    write_run_files(
        out,
        cfg,
        &[format!("evaluate: seed({})/evaluate/[replicate]", cfg.seed)],
    )?;
    write_report(out, &report)?;
    Ok(report)
}

pub fn run_dir(out: &Path, replicate: u64, m: usize) -> PathBuf {
    out.join("runs").join(format!("r{replicate:02}_m{m:03}"))
}

/// The full pipeline under `out`: dataset, then per replicate and `M` the
/// ensemble and both meta-trainers, then evaluation. Without `force`,
/// completed stages are kept and interrupted training resumes.
pub fn cmd_report(cfg: &RunConfig, out: &Path, force: bool, mut progress: impl FnMut(&str)) -> Result<EvalReport> {
    if force && out.exists() {
        fs::remove_dir_all(out).map_err(|e| io_err(out, e))?;
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let dataset = out.join("dataset");
    progress("collect");
    cmd_collect(cfg, &dataset, Existing::Resume)?;
    let wants = |m: &str| cfg.methods.iter().any(|x| x == m);
    let mut inputs = EvalInputs::default();
    for &m in &cfg.m_values {
        for r in 0..cfg.n_seeds {
            let dir = run_dir(out, r, m);
            if wants("ours") {
                progress(&format!("replicate {r} M {m}: ensemble"));
                cmd_train_ensemble(cfg, &dataset, &dir.join("ensemble"), Existing::Resume, r, m)?;
                progress(&format!("replicate {r} M {m}: meta-train"));
                cmd_meta_train(cfg, &dir.join("ensemble"), &dir.join("ours"), Existing::Resume)?;
                inputs.ours.push(dir.join("ours"));
            }
            if wants("acmrr") {
                progress(&format!("replicate {r} M {m}: acmrr"));
                cmd_train_acmrr(cfg, &dataset, &dir.join("acmrr"), Existing::Resume, r, m)?;
                inputs.acmrr.push(dir.join("acmrr"));
            }
        }
    }
    progress("evaluate");
    cmd_evaluate(cfg, &inputs, &out.join("eval"), Existing::Replace)
}
