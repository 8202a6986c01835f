//! Regression-oriented baseline: features meta-trained through a closed-form
//! ridge regression of the last layer on one-step Euler velocity residuals.
//!
//! With `b_k = q̇_{k+1} - q̇_k - Δt_k (R(φ_k) u_k - g)`, the Euler prediction
//! error is `b_k - Δt_k A y_k`, so the ridge fit solves
//! `(Ỹᵀ Ỹ + μ I) Aᵀ = Ỹᵀ B` with rows `ỹ_k = Δt_k y_k`.

use rand::seq::index::sample;
use rayon::prelude::*;

use crate::autodiff::{adam_step, AdError, AdamConfig, AdamState, Eager, Graph, Tape, Tensor, Var};
use crate::controllers::{FeatureMap, FeatureNetwork};
use crate::dynamics::{rotate, GRAVITY_VEC};
use crate::ensemble::{split_indices, TrajectoryLog, Transition};
use crate::meta::ordered_sum;
use crate::prng::PrngKey;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AcmrrError {
    #[error("trajectory {id} has too few tuples ({n}) to split")]
    TooFewTuples { id: usize, n: usize },
    #[error("no trajectories")]
    Empty,
    #[error(transparent)]
    Ad(#[from] AdError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcmrrConfig {
    pub mu_ridge: f64,
    pub mu_meta: f64,
    pub steps: usize,
    pub step_size: f64,
    pub train_fraction: f64,
    pub subset_fraction: f64,
    /// Subtract gravity inside the Euler step; off reproduces the form that
    /// regresses gravity into `A y`.
    pub include_gravity: bool,
    pub normalize_features: bool,
}

impl Default for AcmrrConfig {
    fn default() -> Self {
        AcmrrConfig {
            mu_ridge: 1e-4,
            mu_meta: 1e-4,
            steps: 5000,
            step_size: 1e-2,
            train_fraction: 0.75,
            subset_fraction: 0.25,
            include_gravity: true,
            normalize_features: true,
        }
    }
}

/// One trajectory's tuples split for meta-training and meta-validation.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeTask {
    pub id: usize,
    pub train: Vec<Transition>,
    pub valid: Vec<Transition>,
}

impl RidgeTask {
    pub fn from_log(log: &TrajectoryLog, key: PrngKey, train_fraction: f64) -> Result<Self, AcmrrError> {
        if log.len() < 2 {
            return Err(AcmrrError::TooFewTuples {
                id: log.id,
                n: log.len(),
            });
        }
        let (a, b) = split_indices(log.len(), train_fraction, key);
        Ok(RidgeTask {
            id: log.id,
            train: a.iter().map(|&k| log.transition(k)).collect(),
            valid: b.iter().map(|&k| log.transition(k)).collect(),
        })
    }

    pub fn subset_size(&self, fraction: f64) -> usize {
        ((fraction * self.train.len() as f64).floor() as usize).max(1)
    }
}

/// `q̇_{k+1} - q̇_k - Δt_k (R(φ_k) u_k - g)`.
pub fn velocity_residual(t: &Transition, include_gravity: bool) -> [f64; 3] {
    let thrust = rotate(t.x0[2], &t.u);
    let g = if include_gravity { 1.0 } else { 0.0 };
    std::array::from_fn(|i| t.x1[3 + i] - t.x0[3 + i] - t.dt() * (thrust[i] - g * GRAVITY_VEC[i]))
}

/// `q̇̂_{k+1} = q̇_k + Δt_k (R(φ_k) u_k - g + A y(q_k, q̇_k))`.
pub fn euler_predict(t: &Transition, a: &Tensor, features: &FeatureNetwork, include_gravity: bool) -> [f64; 3] {
    let y = features.eval(&t.x0);
    let thrust = rotate(t.x0[2], &t.u);
    let g = if include_gravity { 1.0 } else { 0.0 };
    let p = y.len();
    std::array::from_fn(|i| {
        let ay: f64 = (0..p).map(|j| a.at(i, j) * y[j]).sum();
        t.x0[3 + i] + t.dt() * (thrust[i] - g * GRAVITY_VEC[i] + ay)
    })
}

/// Constant inputs for a set of tuples: states `[n, 6]`, residuals `B [n, 3]`
/// and `Δt` repeated over `p` columns.
#[derive(Clone, Debug)]
pub struct RidgeData {
    pub states: Tensor,
    pub residuals: Tensor,
    pub dt: Tensor,
}

impl RidgeData {
    pub fn new(tuples: &[Transition], p: usize, include_gravity: bool) -> Self {
        let n = tuples.len();
        RidgeData {
            states: Tensor::matrix(n, 6, tuples.iter().flat_map(|t| t.x0).collect()).expect("shape"),
            residuals: Tensor::matrix(
                n,
                3,
                tuples
                    .iter()
                    .flat_map(|t| velocity_residual(t, include_gravity))
                    .collect(),
            )
            .expect("shape"),
            dt: Tensor::matrix(n, p, tuples.iter().flat_map(|t| vec![t.dt(); p]).collect()).expect("shape"),
        }
    }

    pub fn len(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `Ỹ = diag(Δt) Y` as `[n, p]`.
fn scaled_features<G: Graph>(g: &mut G, features: &FeatureMap<G::Node>, data: &RidgeData) -> G::Node {
    let x = g.constant(data.states.clone());
    let y = features.eval_batch(g, &x);
    let dt = g.constant(data.dt.clone());
    g.mul(&y, &dt)
}

/// Ridge fit of `A [3, p]` on `data`.
pub fn ridge_adapt<G: Graph>(g: &mut G, features: &FeatureMap<G::Node>, data: &RidgeData, mu: f64) -> G::Node {
    let yt = scaled_features(g, features, data);
    let p = g.value(&yt).shape()[1];
    let yt_t = g.transpose(&yt);
    let gram = g.matmul(&yt_t, &yt);
    let reg = g.constant(Tensor::eye(p).map(|v| v * mu));
    let lhs = g.add(&gram, &reg);
    let b = g.constant(data.residuals.clone());
    let rhs = g.matmul(&yt_t, &b);
    let a_t = g.solve(&lhs, &rhs);
    g.transpose(&a_t)
}

/// Mean over tuples of `‖b_k - Δt_k A y_k‖²`.
pub fn acmrr_task_loss<G: Graph>(g: &mut G, features: &FeatureMap<G::Node>, a: &G::Node, data: &RidgeData) -> G::Node {
    let yt = scaled_features(g, features, data);
    let a_t = g.transpose(a);
    let pred = g.matmul(&yt, &a_t);
    let b = g.constant(data.residuals.clone());
    let e = g.sub(&b, &pred);
    let sse = g.sum_sq(&e);
    g.scale(&sse, 1.0 / data.len() as f64)
}

/// `A` for plain (non-differentiable) use.
pub fn ridge_adapt_plain(features: &FeatureNetwork, tuples: &[Transition], mu: f64, include_gravity: bool) -> Tensor {
    let mut g = Eager;
    let map = features.place(&mut g, |_, t| t);
    let data = RidgeData::new(tuples, features.dim(), include_gravity);
    ridge_adapt(&mut g, &map, &data, mu)
}

/// Task loss of a fixed `A` on `tuples`.
pub fn task_loss_plain(features: &FeatureNetwork, a: &Tensor, tuples: &[Transition], include_gravity: bool) -> f64 {
    let mut g = Eager;
    let map = features.place(&mut g, |_, t| t);
    let data = RidgeData::new(tuples, features.dim(), include_gravity);
    acmrr_task_loss(&mut g, &map, a, &data).item()
}

/// Task loss after a ridge fit on `fit` evaluated on `eval`, and its
/// gradient with respect to the feature parameters.
pub fn ridge_task_gradient(
    features: &FeatureNetwork,
    fit: &RidgeData,
    eval: &RidgeData,
    mu_ridge: f64,
) -> Result<(f64, Vec<Tensor>), AcmrrError> {
    let mut tape = Tape::new();
    let mut leaves: Vec<Var> = Vec::new();
    let map = features.place(&mut tape, |g, t| {
        let v = g.input(t);
        leaves.push(v);
        v
    });
    let a = ridge_adapt(&mut tape, &map, fit, mu_ridge);
    let loss = acmrr_task_loss(&mut tape, &map, &a, eval);
    let grads = tape.gradient(loss, &Tensor::scalar(1.0), &leaves)?;
    Ok((tape.value(&loss).item(), grads))
}

/// Unregularized validation loss: ridge fit on all meta-train tuples,
/// evaluated on the meta-validation tuples, averaged over tasks.
pub fn acmrr_valid_loss(features: &FeatureNetwork, tasks: &[RidgeTask], cfg: &AcmrrConfig) -> f64 {
    let mut losses: Vec<f64> = tasks
        .par_iter()
        .map(|t| {
            let a = ridge_adapt_plain(features, &t.train, cfg.mu_ridge, cfg.include_gravity);
            task_loss_plain(features, &a, &t.valid, cfg.include_gravity)
        })
        .collect();
    ordered_sum(&mut losses) / tasks.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcmrrCurveRow {
    pub step: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcmrrState {
    pub features: FeatureNetwork,
    pub adam: AdamState,
    pub step: usize,
    pub best: FeatureNetwork,
    pub best_step: usize,
    pub best_valid: f64,
    pub curve: Vec<AcmrrCurveRow>,
}

pub struct AcmrrTrainer {
    pub tasks: Vec<RidgeTask>,
    pub config: AcmrrConfig,
    key: PrngKey,
    eval_data: Vec<RidgeData>,
}

impl AcmrrTrainer {
    pub fn new(logs: &[TrajectoryLog], key: PrngKey, config: AcmrrConfig) -> Result<Self, AcmrrError> {
        if logs.is_empty() {
            return Err(AcmrrError::Empty);
        }
        let split = key.split("split");
        let tasks = logs
            .iter()
            .map(|l| RidgeTask::from_log(l, split.fold_in(l.id as u64), config.train_fraction))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_tasks(tasks, key, config))
    }

    pub fn from_tasks(tasks: Vec<RidgeTask>, key: PrngKey, config: AcmrrConfig) -> Self {
        let p = crate::controllers::FEATURE_DIM;
        let eval_data = tasks
            .iter()
            .map(|t| RidgeData::new(&t.train, p, config.include_gravity))
            .collect();
        AcmrrTrainer {
            tasks,
            config,
            key: key.split("subsets"),
            eval_data,
        }
    }

    pub fn start(&self, init: FeatureNetwork) -> AcmrrState {
        let valid = acmrr_valid_loss(&init, &self.tasks, &self.config);
        AcmrrState {
            adam: AdamState::zeros_like(&init.mlp.params()),
            best: init.clone(),
            features: init,
            step: 0,
            best_step: 0,
            best_valid: valid,
            curve: vec![AcmrrCurveRow {
                step: 0,
                train_loss: f64::NAN,
                valid_loss: valid,
            }],
        }
    }

    /// `(1/M)(Σ_j ℓ_j + μ‖θ_y‖²)` with ridge subsets drawn for `step`.
    pub fn train_loss_gradient(
        &self,
        features: &FeatureNetwork,
        step: usize,
    ) -> Result<(f64, Vec<Tensor>), AcmrrError> {
        let cfg = &self.config;
        let step_key = self.key.fold_in(step as u64);
        let per_task: Vec<Result<(f64, Vec<Tensor>), AcmrrError>> = self
            .tasks
            .par_iter()
            .zip(&self.eval_data)
            .map(|(t, eval)| {
                let n = t.train.len();
                let mut idx = sample(
                    &mut step_key.fold_in(t.id as u64).stream(),
                    n,
                    t.subset_size(cfg.subset_fraction),
                )
                .into_vec();
                idx.sort_unstable();
                let subset: Vec<Transition> = idx.iter().map(|&k| t.train[k]).collect();
                let fit = RidgeData::new(&subset, features.dim(), cfg.include_gravity);
                ridge_task_gradient(features, &fit, eval, cfg.mu_ridge)
            })
            .collect();
        let per_task = per_task.into_iter().collect::<Result<Vec<_>, _>>()?;
        let m = per_task.len() as f64;
        let theta = features.mlp.params();
        let mut losses: Vec<f64> = per_task.iter().map(|(l, _)| *l).collect();
        let value = (ordered_sum(&mut losses) + cfg.mu_meta * features.mlp.squared_norm()) / m;
        let grads = theta
            .iter()
            .enumerate()
            .map(|(p, t)| {
                let mut column = Vec::with_capacity(per_task.len());
                let data = (0..t.len())
                    .map(|e| {
                        column.clear();
                        column.extend(per_task.iter().map(|(_, g)| g[p].data()[e]));
                        (ordered_sum(&mut column) + 2.0 * cfg.mu_meta * t.data()[e]) / m
                    })
                    .collect();
                Tensor::new(t.shape().to_vec(), data).expect("shape")
            })
            .collect();
        Ok((value, grads))
    }

    pub fn step(&self, state: &mut AcmrrState) -> Result<(), AcmrrError> {
        let (loss, grads) = self.train_loss_gradient(&state.features, state.step + 1)?;
        let mut theta = state.features.mlp.params();
        adam_step(
            &mut theta,
            &grads,
            &mut state.adam,
            &AdamConfig::with_step_size(self.config.step_size),
        )?;
        state.features.mlp.set_params(&theta);
        state.step += 1;
        let valid = acmrr_valid_loss(&state.features, &self.tasks, &self.config);
        if valid < state.best_valid {
            state.best_valid = valid;
            state.best_step = state.step;
            state.best = state.features.clone();
        }
        state.curve.push(AcmrrCurveRow {
            step: state.step,
            train_loss: loss,
            valid_loss: valid,
        });
        Ok(())
    }

    pub fn run(
        &self,
        state: &mut AcmrrState,
        mut on_step: impl FnMut(&AcmrrState) -> Result<(), AcmrrError>,
    ) -> Result<(), AcmrrError> {
        while state.step < self.config.steps {
            self.step(state)?;
            on_step(state)?;
        }
        Ok(())
    }
}

pub fn acmrr_meta_train(logs: &[TrajectoryLog], key: PrngKey, cfg: &AcmrrConfig) -> Result<AcmrrState, AcmrrError> {
    let trainer = AcmrrTrainer::new(logs, key, *cfg)?;
    let mut state = trainer.start(FeatureNetwork::glorot(
        key.split("init").split("features"),
        cfg.normalize_features,
    ));
    trainer.run(&mut state, |_| Ok(()))?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::PrngKey;

    fn tuple(x0: [f64; 6], u: [f64; 3], dt: f64, x1: [f64; 6]) -> Transition {
        Transition {
            t0: 0.0,
            x0,
            u,
            t1: dt,
            x1,
        }
    }

    #[test]
    fn euler_prediction_examples() {
        let f = FeatureNetwork::glorot(PrngKey::from_seed(1), true);
        let a = Tensor::zeros(&[3, 32]);
        let x0 = [0.1, 0.2, 0.0, 0.5, -0.3, 0.1];
        let hover = tuple(x0, [0.0, 9.81, 0.0], 0.01, x0);
        assert_eq!(euler_predict(&hover, &a, &f, true), [0.5, -0.3, 0.1]);
        let zero = tuple(x0, [1.0, 2.0, 3.0], 0.0, x0);
        assert_eq!(euler_predict(&zero, &a, &f, true), [0.5, -0.3, 0.1]);
    }

    #[test]
    fn huge_regularization_gives_zero_last_layer() {
        let f = FeatureNetwork::glorot(PrngKey::from_seed(2), true);
        let tuples: Vec<Transition> = (0..10)
            .map(|k| {
                let x0 = [k as f64 * 0.1, 0.0, 0.0, 1.0, 0.0, 0.0];
                let mut x1 = x0;
                x1[3] += 0.02;
                tuple(x0, [0.0, 9.81, 0.0], 0.01, x1)
            })
            .collect();
        let a = ridge_adapt_plain(&f, &tuples, 1e12, true);
        assert!(a.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn ridge_is_optimal_on_its_own_data() {
        let f = FeatureNetwork::glorot(PrngKey::from_seed(3), true);
        let tuples: Vec<Transition> = (0..40)
            .map(|k| {
                let s = k as f64 * 0.37;
                let x0 = [s.sin(), s.cos(), 0.1 * s.sin(), 0.3 * s, -0.2, 0.05];
                let mut x1 = x0;
                x1[3] += 0.01 * (1.0 + 0.5 * s.cos());
                x1[4] += 0.004 * s.sin();
                tuple(x0, [0.0, 9.81, 0.0], 0.01, x1)
            })
            .collect();
        let a = ridge_adapt_plain(&f, &tuples, 1e-12, true);
        let best = task_loss_plain(&f, &a, &tuples, true);
        let mut other = a.clone();
        other.data_mut()[5] += 1e-3;
        assert!(best <= task_loss_plain(&f, &other, &tuples, true));
        assert!(best <= task_loss_plain(&f, &Tensor::zeros(&[3, 32]), &tuples, true));
        let mut shuffled = tuples.clone();
        shuffled.reverse();
        let again = task_loss_plain(&f, &a, &shuffled, true);
        assert!((again - best).abs() <= 1e-15 * best.max(1e-300) * 10.0);
    }
}
