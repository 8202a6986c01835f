//! Meta-training of the adaptive controller: gradient descent on the mean
//! closed-loop tracking loss over a grid of (reference, ensemble model)
//! tasks, differentiating through every RK4 rollout.

use rayon::prelude::*;

use crate::autodiff::{adam_step, AdError, AdamConfig, AdamState, Eager, Graph, Tape, Tensor};
use crate::controllers::{
    gains_from_log_cholesky, log_cholesky_node, AdaptiveController, FeatureNetwork, GainParams, Gains,
};
use crate::ensemble::{split_indices, EnsembleModel};
use crate::prng::PrngKey;
use crate::rollout::{simulate, RolloutConfig, RolloutError};
use crate::trajgen::{random_reference, ReferenceTrajectory, TrajError, WalkBounds};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetaError {
    #[error("every task diverged")]
    AllDiverged,
    #[error("meta-training needs at least {need} {what}, got {got}")]
    TooFew {
        what: &'static str,
        need: usize,
        got: usize,
    },
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Reference(#[from] TrajError),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaConfig {
    pub n_refs: usize,
    pub duration: f64,
    pub bounds: WalkBounds,
    pub mu: f64,
    pub steps: usize,
    pub step_size: f64,
    pub train_fraction: f64,
    pub rollout: RolloutConfig,
    /// Loss assigned to a diverged task; its gradient is zero.
    pub divergence_penalty: f64,
    pub normalize_features: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            n_refs: 10,
            duration: 5.0,
            bounds: WalkBounds::default(),
            mu: 1e-4,
            steps: 500,
            step_size: 1e-2,
            train_fraction: 0.75,
            rollout: RolloutConfig::default(),
            divergence_penalty: 1e6,
            normalize_features: true,
        }
    }
}

/// `θ = (θ_y, Λ, K, Γ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaParams {
    pub features: FeatureNetwork,
    pub gains: GainParams,
}

impl MetaParams {
    /// Feature-network tensors followed by the `Λ, K, Γ` parameter vectors.
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut t = self.features.mlp.params();
        t.extend(self.gains.tensors());
        t
    }

    pub fn set_tensors(&mut self, t: &[Tensor]) -> Result<(), MetaError> {
        let n = self.features.mlp.layers.len() * 2;
        if t.len() != n + 3 {
            return Err(MetaError::Layout(format!(
                "expected {} tensors, got {}",
                n + 3,
                t.len()
            )));
        }
        for (a, b) in self.tensors().iter().zip(t) {
            if a.shape() != b.shape() {
                return Err(MetaError::Layout(format!("shape {:?} vs {:?}", a.shape(), b.shape())));
            }
        }
        self.features.mlp.set_params(&t[..n]);
        self.gains = GainParams::from_tensors(&t[n..]);
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(Tensor::len).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().map(Tensor::squared_norm).sum()
    }

    pub fn gains(&self) -> Gains {
        gains_from_log_cholesky(&self.gains)
    }
}

/// Glorot features and identity gains.
pub fn init_meta_params(key: PrngKey, normalize_features: bool) -> MetaParams {
    MetaParams {
        features: FeatureNetwork::glorot(key.split("features"), normalize_features),
        gains: GainParams::identity(),
    }
}

/// Places `θ` on a tape as differentiable leaves and builds the controller.
pub fn place_controller(
    tape: &mut Tape,
    params: &MetaParams,
) -> (AdaptiveController<crate::autodiff::Var>, Vec<crate::autodiff::Var>) {
    let mut leaves = Vec::new();
    let features = params.features.place(tape, |g, t| {
        let v = g.input(t);
        leaves.push(v);
        v
    });
    let [l, k, gm] = params.gains.tensors().map(|t| tape.input(t));
    leaves.extend([l, k, gm]);
    let lambda = log_cholesky_node(tape, &l);
    let k = log_cholesky_node(tape, &k);
    let gamma = log_cholesky_node(tape, &gm);
    let feature_dim = params.features.dim();
    (
        AdaptiveController {
            features,
            lambda,
            k,
            gamma,
            feature_dim,
        },
        leaves,
    )
}

/// The controller for `θ` with all parameters as constants.
pub fn eager_controller(params: &MetaParams) -> AdaptiveController<Tensor> {
    let mut g = Eager;
    let features = params.features.place(&mut g, |_, t| t);
    AdaptiveController::with_gains(&mut g, features, &params.gains())
}

/// Tracking loss of one task and its gradient with respect to
/// [`MetaParams::tensors`].
pub fn task_loss_gradient(
    params: &MetaParams,
    reference: &ReferenceTrajectory,
    model: &EnsembleModel,
    rollout: &RolloutConfig,
) -> Result<(f64, Vec<Tensor>), MetaError> {
    let mut tape = Tape::new();
    let (ctrl, leaves) = place_controller(&mut tape, params);
    let plant = model.place(&mut tape, |g, t| g.constant(t));
    let run = simulate(&mut tape, &plant, &ctrl, reference, rollout)?;
    let grads = tape.gradient(run.loss, &Tensor::scalar(1.0), &leaves)?;
    Ok((run.loss_value, grads))
}

pub fn task_loss(
    params: &MetaParams,
    reference: &ReferenceTrajectory,
    model: &EnsembleModel,
    rollout: &RolloutConfig,
) -> Result<f64, MetaError> {
    let mut g = Eager;
    let ctrl = eager_controller(params);
    let plant = model.place(&mut g, |_, t| t);
    Ok(simulate(&mut g, &plant, &ctrl, reference, rollout)?.loss_value)
}

/// Sum that does not depend on the order of `values`.
pub fn ordered_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaLoss {
    pub value: f64,
    pub gradient: Option<Vec<Tensor>>,
    pub diverged: usize,
}

type TaskOutcome = Result<(f64, Option<Vec<Tensor>>), MetaError>;

/// `(1/(NM))·[Σ_ij ℓ_ij + μ‖θ‖²/T]` with `ℓ_ij` the time-averaged tracking
/// loss of task `(i, j)`. The reduction is invariant to task order.
pub fn meta_loss(
    params: &MetaParams,
    tasks: &[(&ReferenceTrajectory, &EnsembleModel)],
    rollout: &RolloutConfig,
    mu: f64,
    penalty: f64,
    with_gradient: bool,
) -> Result<MetaLoss, MetaError> {
    if tasks.is_empty() {
        return Err(MetaError::TooFew {
            what: "tasks",
            need: 1,
            got: 0,
        });
    }
    let results: Vec<TaskOutcome> = tasks
        .par_iter()
        .map(|(r, m)| {
            let out = if with_gradient {
                task_loss_gradient(params, r, m, rollout).map(|(l, g)| (l, Some(g)))
            } else {
                task_loss(params, r, m, rollout).map(|l| (l, None))
            };
            match out {
                Err(MetaError::Rollout(RolloutError::Diverged { .. })) => Ok((f64::INFINITY, None)),
                Ok((l, _)) if !(l <= penalty) => Ok((f64::INFINITY, None)),
                other => other,
            }
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let diverged = results.iter().filter(|(l, _)| *l == f64::INFINITY).count();
    if diverged == tasks.len() {
        return Err(MetaError::AllDiverged);
    }
    let n = tasks.len() as f64;
    let horizon = rollout.horizon;
    let mut losses: Vec<f64> = results.iter().map(|(l, _)| l.min(penalty)).collect();
    let value = (ordered_sum(&mut losses) + mu * params.squared_norm() / horizon) / n;

    let gradient = with_gradient.then(|| {
        let theta = params.tensors();
        theta
            .iter()
            .enumerate()
            .map(|(p, t)| {
                let mut data = Vec::with_capacity(t.len());
                let mut column = Vec::with_capacity(results.len());
                for e in 0..t.len() {
                    column.clear();
                    column.extend(results.iter().filter_map(|(_, g)| g.as_ref().map(|g| g[p].data()[e])));
                    let s = ordered_sum(&mut column);
                    data.push((s + 2.0 * mu * t.data()[e] / horizon) / n);
                }
                Tensor::new(t.shape().to_vec(), data).expect("shape")
            })
            .collect()
    });
    Ok(MetaLoss {
        value,
        gradient,
        diverged,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    /// Regularized training meta-loss at the parameters the step started
    /// from; for step 0, at the initialization.
    pub train_loss: f64,
    /// Unregularized validation meta-loss after the step.
    pub valid_loss: f64,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaState {
    pub params: MetaParams,
    pub adam: AdamState,
    pub step: usize,
    pub best: MetaParams,
    pub best_step: usize,
    pub best_valid: f64,
    pub curve: Vec<CurveRow>,
}

/// The task grids and configuration of one meta-training run.
pub struct MetaTrainer<'a> {
    pub references: &'a [ReferenceTrajectory],
    pub models: &'a [EnsembleModel],
    pub train_refs: Vec<usize>,
    pub valid_refs: Vec<usize>,
    pub train_models: Vec<usize>,
    pub valid_models: Vec<usize>,
    pub config: MetaConfig,
}

/// Meta-training references: fresh random splines.
pub fn meta_references(key: PrngKey, cfg: &MetaConfig) -> Result<Vec<ReferenceTrajectory>, MetaError> {
    (0..cfg.n_refs)
        .map(|i| Ok(random_reference(key.fold_in(i as u64), &cfg.bounds, cfg.duration)?))
        .collect()
}

impl<'a> MetaTrainer<'a> {
    pub fn new(
        references: &'a [ReferenceTrajectory],
        models: &'a [EnsembleModel],
        key: PrngKey,
        config: MetaConfig,
    ) -> Result<Self, MetaError> {
        for (what, got) in [("references", references.len()), ("models", models.len())] {
            if got < 2 {
                return Err(MetaError::TooFew { what, need: 2, got });
            }
        }
        let (train_refs, valid_refs) = split_indices(references.len(), config.train_fraction, key.split("references"));
        let (train_models, valid_models) = split_indices(models.len(), config.train_fraction, key.split("models"));
        Ok(MetaTrainer {
            references,
            models,
            train_refs,
            valid_refs,
            train_models,
            valid_models,
            config,
        })
    }

    fn grid(&self, refs: &[usize], models: &[usize]) -> Vec<(&'a ReferenceTrajectory, &'a EnsembleModel)> {
        refs.iter()
            .flat_map(|&i| models.iter().map(move |&j| (&self.references[i], &self.models[j])))
            .collect()
    }

    pub fn train_tasks(&self) -> Vec<(&'a ReferenceTrajectory, &'a EnsembleModel)> {
        self.grid(&self.train_refs, &self.train_models)
    }

    pub fn valid_tasks(&self) -> Vec<(&'a ReferenceTrajectory, &'a EnsembleModel)> {
        self.grid(&self.valid_refs, &self.valid_models)
    }

    pub fn train_loss(&self, params: &MetaParams, with_gradient: bool) -> Result<MetaLoss, MetaError> {
        let c = &self.config;
        meta_loss(
            params,
            &self.train_tasks(),
            &c.rollout,
            c.mu,
            c.divergence_penalty,
            with_gradient,
        )
    }

    pub fn valid_loss(&self, params: &MetaParams) -> Result<f64, MetaError> {
        let c = &self.config;
        let l = meta_loss(
            params,
            &self.valid_tasks(),
            &c.rollout,
            0.0,
            c.divergence_penalty,
            false,
        );
        match l {
            Ok(l) => Ok(l.value),
            Err(MetaError::AllDiverged) => Ok(c.divergence_penalty),
            Err(e) => Err(e),
        }
    }

    /// Evaluates the initialization as step 0.
    pub fn start(&self, init: MetaParams) -> Result<MetaState, MetaError> {
        let train = self.train_loss(&init, false)?.value;
        let valid = self.valid_loss(&init)?;
        Ok(MetaState {
            adam: AdamState::zeros_like(&init.tensors()),
            best: init.clone(),
            params: init,
            step: 0,
            best_step: 0,
            best_valid: valid,
            curve: vec![CurveRow {
                step: 0,
                train_loss: train,
                valid_loss: valid,
            }],
        })
    }

    /// One Adam step on the training grid followed by validation.
    pub fn step(&self, state: &mut MetaState) -> Result<(), MetaError> {
        let loss = self.train_loss(&state.params, true)?;
        let grads = loss.gradient.expect("requested");
        let mut theta = state.params.tensors();
        adam_step(
            &mut theta,
            &grads,
            &mut state.adam,
            &AdamConfig::with_step_size(self.config.step_size),
        )?;
        state.params.set_tensors(&theta)?;
        state.step += 1;
        let valid = self.valid_loss(&state.params)?;
        if valid < state.best_valid {
            state.best_valid = valid;
            state.best_step = state.step;
            state.best = state.params.clone();
        }
        state.curve.push(CurveRow {
            step: state.step,
            train_loss: loss.value,
            valid_loss: valid,
        });
        Ok(())
    }

    /// Steps until `state.step == self.config.steps`, calling `on_step`
    /// after each one.
    pub fn run(
        &self,
        state: &mut MetaState,
        mut on_step: impl FnMut(&MetaState) -> Result<(), MetaError>,
    ) -> Result<(), MetaError> {
        while state.step < self.config.steps {
            self.step(state)?;
            on_step(state)?;
        }
        Ok(())
    }
}

/// Full meta-training run from a fresh initialization.
pub fn meta_train(
    models: &[EnsembleModel],
    references: &[ReferenceTrajectory],
    key: PrngKey,
    config: &MetaConfig,
) -> Result<MetaState, MetaError> {
    let trainer = MetaTrainer::new(references, models, key.split("split"), *config)?;
    let mut state = trainer.start(init_meta_params(key.split("init"), config.normalize_features))?;
    trainer.run(&mut state, |_| Ok(()))?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controllers::scaled_identity;
    use crate::ensemble::ModelKind;

    #[test]
    fn init_has_identity_gains_and_distinct_features() {
        let a = init_meta_params(PrngKey::from_seed(1), true);
        assert_eq!(a.gains().lambda, scaled_identity(1.0));
        assert_eq!(a.gains().gamma, scaled_identity(1.0));
        assert!(a.tensors().iter().all(Tensor::is_finite));
        let b = init_meta_params(PrngKey::from_seed(1).split("other"), true);
        assert_ne!(a.features, b.features);
        assert_eq!(a.count(), 6 * 32 + 32 + 32 * 32 + 32 + 18);
    }

    #[test]
    fn set_tensors_round_trip_and_layout_errors() {
        let mut p = init_meta_params(PrngKey::from_seed(2), true);
        let mut t = p.tensors();
        t.last_mut().unwrap().data_mut()[0] = 0.5;
        p.set_tensors(&t).unwrap();
        assert_eq!(p.gains.gamma[0], 0.5);
        assert!(p.set_tensors(&t[1..]).is_err());
    }

    #[test]
    fn regularization_is_additive() {
        let model = EnsembleModel::zero_output(ModelKind::Residual);
        let reference = random_reference(PrngKey::from_seed(3), &WalkBounds::default(), 0.5).unwrap();
        let params = init_meta_params(PrngKey::from_seed(4), true);
        let rollout = RolloutConfig::default().with_horizon(0.5);
        let tasks = [(&reference, &model)];
        let a = meta_loss(&params, &tasks, &rollout, 1e-4, 1e6, false).unwrap().value;
        let b = meta_loss(&params, &tasks, &rollout, 2e-4, 1e6, false).unwrap().value;
        let expected = 1e-4 * params.squared_norm() / 0.5;
        assert!(((b - a) - expected).abs() < 1e-12 * (1.0 + a));
    }

    #[test]
    fn task_order_does_not_change_the_loss() {
        let models = [
            EnsembleModel::glorot(ModelKind::Residual, PrngKey::from_seed(5)),
            EnsembleModel::glorot(ModelKind::Residual, PrngKey::from_seed(6)),
        ];
        let refs: Vec<_> = (0..2)
            .map(|i| random_reference(PrngKey::from_seed(10 + i), &WalkBounds::default(), 0.3).unwrap())
            .collect();
        let params = init_meta_params(PrngKey::from_seed(7), true);
        let rollout = RolloutConfig::default().with_horizon(0.3);
        let mut tasks = vec![(&refs[0], &models[0]), (&refs[1], &models[1]), (&refs[0], &models[1])];
        let a = meta_loss(&params, &tasks, &rollout, 1e-4, 1e6, true).unwrap();
        tasks.reverse();
        let b = meta_loss(&params, &tasks, &rollout, 1e-4, 1e6, true).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.gradient, b.gradient);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let models: Vec<_> = (0..2)
            .map(|i| EnsembleModel::glorot(ModelKind::Residual, PrngKey::from_seed(20 + i)))
            .collect();
        let cfg = MetaConfig {
            n_refs: 2,
            duration: 0.2,
            steps: 0,
            rollout: RolloutConfig::default().with_horizon(0.2),
            ..MetaConfig::default()
        };
        let refs = meta_references(PrngKey::from_seed(1), &cfg).unwrap();
        let state = meta_train(&models, &refs, PrngKey::from_seed(2), &cfg).unwrap();
        assert_eq!(state.best, init_meta_params(PrngKey::from_seed(2).split("init"), true));
        assert_eq!(state.curve.len(), 1);
    }
}
