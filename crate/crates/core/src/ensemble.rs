//! Per-trajectory dynamics models fitted by one-step RK4 prediction.
//!
//! Each trajectory of the data campaign gets its own model; together they
//! stand in for the unknown wind-conditioned dynamics during meta-training.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autodiff::{adam_step, record, AdError, AdamConfig, AdamState, Eager, Graph, Tensor};
use crate::dynamics::{gravity_node, split_state, State};
use crate::nn::{Mlp, MlpNodes, STATE_INPUT_SCALE};
use crate::prng::PrngKey;
use crate::rollout::{rk4_step, Plant};

/// Scale applied to `u` before the generic model's first layer.
pub const CONTROL_INPUT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnsembleError {
    #[error("invalid trajectory log: {0}")]
    Log(String),
    #[error("trajectory {id} has {n} tuples, at least 8 are needed")]
    TooFewTuples { id: usize, n: usize },
    #[error("model for trajectory {id}: {source}")]
    Model { id: usize, source: Box<EnsembleError> },
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// Sampled closed-loop data `(t_k, x_k, u_k)`; `u_k` is held on
/// `[t_k, t_{k+1})`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryLog {
    pub id: usize,
    pub times: Vec<f64>,
    pub states: Vec<[f64; 6]>,
    pub controls: Vec<[f64; 3]>,
    /// Latent wind speed, when known.
    pub wind: Option<f64>,
}

/// One transition `(t_k, x_k, u_k, t_{k+1}, x_{k+1})`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub t0: f64,
    pub x0: [f64; 6],
    pub u: [f64; 3],
    pub t1: f64,
    pub x1: [f64; 6],
}

impl Transition {
    pub fn dt(&self) -> f64 {
        self.t1 - self.t0
    }
}

impl TrajectoryLog {
    pub fn new(
        times: Vec<f64>,
        states: Vec<[f64; 6]>,
        controls: Vec<[f64; 3]>,
        wind: Option<f64>,
    ) -> Result<Self, EnsembleError> {
        if times.len() != states.len() || times.len() != controls.len() {
            return Err(EnsembleError::Log(format!(
                "{} times, {} states, {} controls",
                times.len(),
                states.len(),
                controls.len()
            )));
        }
        if times.len() < 2 {
            return Err(EnsembleError::Log("fewer than two samples".into()));
        }
        if let Some(k) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(EnsembleError::Log(format!(
                "time not strictly increasing at sample {}",
                k + 1
            )));
        }
        let finite = states
            .iter()
            .flatten()
            .chain(controls.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(EnsembleError::Log("non-finite sample".into()));
        }
        Ok(TrajectoryLog {
            id: 0,
            times,
            states,
            controls,
            wind,
        })
    }

    pub fn with_id(self, id: usize) -> Self {
        TrajectoryLog { id, ..self }
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.times.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn transition(&self, k: usize) -> Transition {
        Transition {
            t0: self.times[k],
            x0: self.states[k],
            u: self.controls[k],
            t1: self.times[k + 1],
            x1: self.states[k + 1],
        }
    }

    pub fn transitions(&self) -> impl Iterator<Item = Transition> + '_ {
        (0..self.len()).map(|k| self.transition(k))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// `(q̇, -g + R(φ)u + MLP(q, q̇))`.
    Residual,
    /// `MLP(x, u)` for the whole derivative.
    Generic,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Residual => "residual",
            ModelKind::Generic => "generic",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "residual" => Some(ModelKind::Residual),
            "generic" => Some(ModelKind::Generic),
            _ => None,
        }
    }

    fn sizes(&self) -> [usize; 4] {
        match self {
            ModelKind::Residual => [6, 32, 32, 3],
            ModelKind::Generic => [9, 32, 32, 6],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleModel {
    pub mlp: Mlp,
    pub kind: ModelKind,
}

impl EnsembleModel {
    pub fn glorot(kind: ModelKind, key: PrngKey) -> Self {
        EnsembleModel {
            mlp: Mlp::glorot(&kind.sizes(), false, key),
            kind,
        }
    }

    /// A model whose network outputs zero everywhere.
    pub fn zero_output(kind: ModelKind) -> Self {
        let mut m = EnsembleModel::glorot(kind, PrngKey::from_seed(0));
        let (w, b) = m.mlp.layers.last_mut().expect("layers");
        *w = Tensor::zeros(w.shape());
        *b = Tensor::zeros(b.shape());
        m
    }

    pub fn place<G: Graph>(&self, g: &mut G, place: impl FnMut(&mut G, Tensor) -> G::Node) -> ModelPlant<G::Node> {
        let mlp = self.mlp.place(g, place);
        let scale = match self.kind {
            ModelKind::Residual => Tensor::from(STATE_INPUT_SCALE),
            ModelKind::Generic => {
                let mut s = STATE_INPUT_SCALE.to_vec();
                s.extend([CONTROL_INPUT_SCALE; 3]);
                Tensor::vector(s)
            }
        };
        ModelPlant {
            mlp,
            scale: g.constant(scale),
            kind: self.kind,
        }
    }
}

/// An ensemble model living on a graph.
#[derive(Clone, Debug)]
pub struct ModelPlant<N> {
    pub mlp: MlpNodes<N>,
    scale: N,
    pub kind: ModelKind,
}

impl<G: Graph> Plant<G> for ModelPlant<G::Node> {
    fn derivative(&self, g: &mut G, x: &G::Node, u: &G::Node) -> G::Node {
        match self.kind {
            ModelKind::Residual => {
                let (_, qdot, phi) = split_state(g, x);
                let thrust = g.rotate(&phi, u, false);
                let input = g.mul(x, &self.scale);
                let residual = self.mlp.forward(g, &input);
                let acc = g.add(&thrust, &residual);
                let grav = gravity_node(g, -1.0);
                let acc = g.add(&acc, &grav);
                g.concat(&[&qdot, &acc])
            }
            ModelKind::Generic => {
                let xu = g.concat(&[x, u]);
                let input = g.mul(&xu, &self.scale);
                self.mlp.forward(g, &input)
            }
        }
    }
}

impl<N: Clone> ModelPlant<N> {
    /// Derivatives for a batch: `x [B, 6]`, `u [B, 3]` to `[B, 6]`.
    pub fn derivative_batch<G: Graph<Node = N>>(&self, g: &mut G, x: &N, u: &N) -> N {
        match self.kind {
            ModelKind::Residual => {
                let qdot = g.slice_cols(x, 3, 3);
                let phi = g.slice_cols(x, 2, 1);
                let (c, s) = (g.cos(&phi), g.sin(&phi));
                let u1 = g.slice_cols(u, 0, 1);
                let u2 = g.slice_cols(u, 1, 1);
                let u3 = g.slice_cols(u, 2, 1);
                let (cu1, su2) = (g.mul(&c, &u1), g.mul(&s, &u2));
                let (su1, cu2) = (g.mul(&s, &u1), g.mul(&c, &u2));
                let tx = g.sub(&cu1, &su2);
                let ty = g.add(&su1, &cu2);
                let thrust = g.concat_cols(&[&tx, &ty, &u3]);
                let input = g.mul_row(x, &self.scale);
                let residual = self.mlp.forward_batch(g, &input);
                let acc = g.add(&thrust, &residual);
                let grav = gravity_node(g, -1.0);
                let acc = g.add_row(&acc, &grav);
                g.concat_cols(&[&qdot, &acc])
            }
            ModelKind::Generic => {
                let xu = g.concat_cols(&[x, u]);
                let input = g.mul_row(&xu, &self.scale);
                self.mlp.forward_batch(g, &input)
            }
        }
    }
}

pub fn model_derivative(model: &EnsembleModel, state: &State, u: &[f64; 3]) -> [f64; 6] {
    let mut g = Eager;
    let plant = model.place(&mut g, |_, t| t);
    let d = plant.derivative(&mut g, &Tensor::from(state.to_array()), &Tensor::from(*u));
    d.data().try_into().expect("six derivatives")
}

/// Transitions stacked for batched evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct TupleBatch {
    pub x0: Tensor,
    pub u: Tensor,
    pub x1: Tensor,
    /// `Δt_k` repeated across the six state columns.
    pub dt: Tensor,
}

impl TupleBatch {
    pub fn new(tuples: &[Transition]) -> Self {
        let n = tuples.len();
        let flat6 = |f: &dyn Fn(&Transition) -> [f64; 6]| -> Tensor {
            Tensor::matrix(n, 6, tuples.iter().flat_map(f).collect()).expect("shape")
        };
        TupleBatch {
            x0: flat6(&|t| t.x0),
            u: Tensor::matrix(n, 3, tuples.iter().flat_map(|t| t.u).collect()).expect("shape"),
            x1: flat6(&|t| t.x1),
            dt: flat6(&|t| [t.dt(); 6]),
        }
    }

    pub fn len(&self) -> usize {
        self.x0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `x̂_{k+1}` from one RK4 step of the model per tuple, `[B, 6]`.
pub fn one_step_prediction<G: Graph>(g: &mut G, plant: &ModelPlant<G::Node>, batch: &TupleBatch) -> G::Node {
    let x0 = g.constant(batch.x0.clone());
    let u = g.constant(batch.u.clone());
    let dt = g.constant(batch.dt.clone());
    // RK4 with a per-row step: run in unit time on f·Δt.
    let x = rk4_step(g, 0.0, 1.0, &[x0], None, |g, _, y| {
        let d = plant.derivative_batch(g, &y[0], &u);
        vec![g.mul(&d, &dt)]
    });
    x.into_iter().next().expect("one block")
}

/// Sum over the batch of `‖x_{k+1} - x̂_{k+1}‖²`.
pub fn one_step_sse<G: Graph>(g: &mut G, plant: &ModelPlant<G::Node>, batch: &TupleBatch) -> G::Node {
    let pred = one_step_prediction(g, plant, batch);
    let target = g.constant(batch.x1.clone());
    let e = g.sub(&pred, &target);
    g.sum_sq(&e)
}

/// Mean one-step squared error of a model over `tuples`.
pub fn one_step_mse(model: &EnsembleModel, tuples: &[Transition]) -> f64 {
    if tuples.is_empty() {
        return 0.0;
    }
    let mut g = Eager;
    let plant = model.place(&mut g, |_, t| t);
    one_step_sse(&mut g, &plant, &TupleBatch::new(tuples)).item() / tuples.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnsembleConfig {
    pub kind: ModelKind,
    pub mu: f64,
    pub epochs: usize,
    pub step_size: f64,
    pub train_fraction: f64,
    pub batch_fraction: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            kind: ModelKind::Residual,
            mu: 1e-4,
            epochs: 1000,
            step_size: 1e-2,
            train_fraction: 0.75,
            batch_fraction: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean one-step error on the training split, without regularization.
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub model: EnsembleModel,
    pub trajectory: usize,
    pub best_epoch: usize,
    /// Row 0 is the initialization.
    pub curve: Vec<EpochRecord>,
    pub train_indices: Vec<usize>,
    pub valid_indices: Vec<usize>,
}

/// Random `fraction / 1 - fraction` split of `0..n`, each half sorted.
pub fn split_indices(n: usize, fraction: f64, key: PrngKey) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut key.stream());
    let n_train = ((fraction * n as f64).floor() as usize).clamp(1, n.saturating_sub(1).max(1));
    let (a, b) = idx.split_at(n_train);
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

/// Gradient of `(1/B)·SSE(batch) + μ‖ψ‖²/n_train` with respect to the
/// model's parameters, and its value.
pub fn one_step_objective_gradient(
    model: &EnsembleModel,
    batch: &TupleBatch,
    mu: f64,
    n_train: usize,
) -> Result<(f64, Vec<Tensor>), AdError> {
    let params = model.mlp.params();
    let b = batch.len() as f64;
    let (out, tape) = record(&params, |g, vars| {
        let mut it = vars.iter().copied();
        let plant = model.place(g, |_, _| it.next().expect("parameter"));
        let sse = one_step_sse(g, &plant, batch);
        let mut norm: Option<_> = None;
        for v in vars {
            let s = g.sum_sq(v);
            norm = Some(match norm {
                Some(n) => g.add(&n, &s),
                None => s,
            });
        }
        let norm = norm.expect("parameters");
        let data = g.scale(&sse, 1.0 / b);
        Ok(vec![g.axpy(&data, mu / n_train as f64, &norm)])
    })?;
    let grads = tape.gradient(tape.outputs()[0], &Tensor::scalar(1.0), tape.inputs())?;
    Ok((out[0].item(), grads))
}

/// Fits one model to one trajectory and keeps the epoch with the lowest
/// validation error.
pub fn train_model(log: &TrajectoryLog, key: PrngKey, cfg: &EnsembleConfig) -> Result<TrainedModel, EnsembleError> {
    let n = log.len();
    if n < 8 {
        return Err(EnsembleError::TooFewTuples { id: log.id, n });
    }
    let (train_idx, valid_idx) = split_indices(n, cfg.train_fraction, key.split("split"));
    let train: Vec<Transition> = train_idx.iter().map(|&k| log.transition(k)).collect();
    let valid: Vec<Transition> = valid_idx.iter().map(|&k| log.transition(k)).collect();
    let batch_size = match (cfg.batch_fraction * train.len() as f64).floor() as usize {
        0 => train.len(),
        b => b,
    };

    let mut model = EnsembleModel::glorot(cfg.kind, key.split("init"));
    let mut params = model.mlp.params();
    let mut adam = AdamState::zeros_like(&params);
    let adam_cfg = AdamConfig::with_step_size(cfg.step_size);

    let record_epoch = |model: &EnsembleModel, epoch| EpochRecord {
        epoch,
        train_loss: one_step_mse(model, &train),
        valid_loss: one_step_mse(model, &valid),
    };
    let mut curve = vec![record_epoch(&model, 0)];
    let mut best = (curve[0].valid_loss, 0, model.clone());

    let mut order: Vec<usize> = (0..train.len()).collect();
    let shuffle_key = key.split("shuffle");
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_key.fold_in(epoch as u64).stream());
        for chunk in order.chunks_exact(batch_size) {
            let tuples: Vec<Transition> = chunk.iter().map(|&i| train[i]).collect();
            let batch = TupleBatch::new(&tuples);
            let (_, grads) = one_step_objective_gradient(&model, &batch, cfg.mu, train.len())?;
            adam_step(&mut params, &grads, &mut adam, &adam_cfg)?;
            model.mlp.set_params(&params);
        }
        let rec = record_epoch(&model, epoch);
        if rec.valid_loss < best.0 {
            best = (rec.valid_loss, epoch, model.clone());
        }
        curve.push(rec);
    }
    Ok(TrainedModel {
        model: best.2,
        trajectory: log.id,
        best_epoch: best.1,
        curve,
        train_indices: train_idx,
        valid_indices: valid_idx,
    })
}

/// One model per log; the key of each model is derived from its log's id, so
/// the result does not depend on log order.
pub fn train_ensemble(
    logs: &[TrajectoryLog],
    key: PrngKey,
    cfg: &EnsembleConfig,
) -> Result<Vec<TrainedModel>, EnsembleError> {
    logs.par_iter()
        .map(|log| {
            train_model(log, key.fold_in(log.id as u64), cfg).map_err(|e| EnsembleError::Model {
                id: log.id,
                source: Box::new(e),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{true_dynamics, WindField};

    #[test]
    fn zero_output_model_is_nominal_dynamics() {
        let model = EnsembleModel::zero_output(ModelKind::Residual);
        let s = State::new([0.5, -1.0, 0.3], [0.2, -0.4, 0.1]);
        let u = [0.3, 9.0, -0.1];
        let d = model_derivative(&model, &s, &u);
        let wind = WindField::with_drag(0.0, 1e-300, 1e-300);
        let t = true_dynamics(&s, &u, &wind);
        for i in 0..6 {
            assert!((d[i] - t[i]).abs() < 1e-14);
        }
        assert_eq!(model_derivative(&model, &State::default(), &[0.0, 9.81, 0.0]), [0.0; 6]);
    }

    #[test]
    fn batched_and_single_derivatives_agree() {
        for kind in [ModelKind::Residual, ModelKind::Generic] {
            let model = EnsembleModel::glorot(kind, PrngKey::from_seed(9));
            let xs = [[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], [-1.0, 2.0, -0.5, 1.5, -0.2, 0.0]];
            let us = [[0.1, 9.0, 0.0], [1.0, 8.0, -0.3]];
            let mut g = Eager;
            let plant = model.place(&mut g, |_, t| t);
            let xb = Tensor::matrix(2, 6, xs.concat()).unwrap();
            let ub = Tensor::matrix(2, 3, us.concat()).unwrap();
            let d = plant.derivative_batch(&mut g, &xb, &ub);
            for r in 0..2 {
                let single = model_derivative(&model, &State::from_slice(&xs[r]), &us[r]);
                for c in 0..6 {
                    assert!((d.at(r, c) - single[c]).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn log_validation() {
        let ok = TrajectoryLog::new(vec![0.0, 0.01], vec![[0.0; 6]; 2], vec![[0.0; 3]; 2], None);
        assert_eq!(ok.unwrap().len(), 1);
        let bad = TrajectoryLog::new(vec![0.0, 0.0], vec![[0.0; 6]; 2], vec![[0.0; 3]; 2], None);
        assert!(bad.is_err());
        let short = TrajectoryLog::new(vec![0.0, 0.01], vec![[0.0; 6]; 1], vec![[0.0; 3]; 2], None);
        assert!(short.is_err());
    }

    #[test]
    fn split_is_a_partition() {
        let (a, b) = split_indices(100, 0.75, PrngKey::from_seed(1));
        assert_eq!((a.len(), b.len()), (75, 25));
        let mut all = [a, b].concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}
