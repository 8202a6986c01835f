use adaptmeta::controllers::{Gains, PdController};
use adaptmeta::dynamics::WindField;
use adaptmeta::ensemble::{train_ensemble, EnsembleConfig, EnsembleModel, TrajectoryLog};
use adaptmeta::meta::{init_meta_params, meta_references, MetaConfig, MetaParams, MetaTrainer};
use adaptmeta::prng::PrngKey;
use adaptmeta::rollout::{simulate_plant, RolloutConfig};
use adaptmeta::trajgen::{random_reference, WalkBounds};

fn models(n: usize) -> Vec<EnsembleModel> {
    let logs: Vec<TrajectoryLog> = (0..n)
        .map(|i| {
            let r = random_reference(PrngKey::from_seed(100 + i as u64), &WalkBounds::default(), 4.0).unwrap();
            let cfg = RolloutConfig::default().with_horizon(4.0);
            simulate_plant(WindField::new(1.0 + i as f64), &PdController::default(), &r, &cfg)
                .unwrap()
                .log
                .with_id(i)
        })
        .collect();
    let cfg = EnsembleConfig {
        epochs: 10,
        ..EnsembleConfig::default()
    };
    train_ensemble(&logs, PrngKey::from_seed(1), &cfg)
        .unwrap()
        .into_iter()
        .map(|m| m.model)
        .collect()
}

fn config(steps: usize) -> MetaConfig {
    MetaConfig {
        n_refs: 4,
        duration: 2.0,
        steps,
        step_size: 1e-1,
        rollout: RolloutConfig::default().with_horizon(2.0),
        ..MetaConfig::default()
    }
}

fn min_eigenvalue(m: &[[f64; 3]; 3]) -> f64 {
    nalgebra::Matrix3::from_fn(|i, j| m[i][j]).symmetric_eigenvalues().min()
}

fn positive_definite(g: &Gains) -> bool {
    [g.lambda, g.k, g.gamma].iter().all(|m| min_eigenvalue(m) > 0.0)
}

fn init(cfg: &MetaConfig) -> MetaParams {
    init_meta_params(PrngKey::from_seed(3), cfg.normalize_features)
}

#[test]
fn short_meta_training_lowers_the_training_loss() {
    let models = models(4);
    let cfg = config(30);
    let refs = meta_references(PrngKey::from_seed(2), &cfg).unwrap();
    let trainer = MetaTrainer::new(&refs, &models, PrngKey::from_seed(4), cfg).unwrap();
    let mut state = trainer.start(init(&cfg)).unwrap();
    let initial = trainer.train_loss(&state.params, false).unwrap().value;
    trainer
        .run(&mut state, |s| {
            assert!(positive_definite(&s.params.gains()), "step {}", s.step);
            Ok(())
        })
        .unwrap();
    let last = trainer.train_loss(&state.params, false).unwrap().value;
    assert!(last < 0.7 * initial, "{last:e} vs {initial:e}");

    // The kept parameters are the validation minimizer over the curve.
    let best = state.curve.iter().map(|r| r.valid_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(state.best_valid, best);
    assert!(state.best_valid <= state.curve[0].valid_loss);
    assert_eq!(trainer.valid_loss(&state.best).unwrap(), best);
    assert_eq!(state.curve.len(), 31);
}

#[test]
fn meta_training_is_deterministic() {
    let models = models(3);
    let cfg = config(3);
    let refs = meta_references(PrngKey::from_seed(5), &cfg).unwrap();
    let run = || {
        let trainer = MetaTrainer::new(&refs, &models, PrngKey::from_seed(6), cfg).unwrap();
        let mut state = trainer.start(init(&cfg)).unwrap();
        trainer.run(&mut state, |_| Ok(())).unwrap();
        state
    };
    assert_eq!(run(), run());
}

#[test]
fn splits_are_disjoint_and_need_two_of_each() {
    let models = models(3);
    let cfg = config(1);
    let refs = meta_references(PrngKey::from_seed(5), &cfg).unwrap();
    let trainer = MetaTrainer::new(&refs, &models, PrngKey::from_seed(6), cfg).unwrap();
    assert!(trainer.train_refs.iter().all(|i| !trainer.valid_refs.contains(i)));
    assert!(trainer.train_models.iter().all(|i| !trainer.valid_models.contains(i)));
    assert_eq!(trainer.train_refs.len() + trainer.valid_refs.len(), 4);
    assert!(MetaTrainer::new(&refs, &models[..1], PrngKey::from_seed(6), cfg).is_err());
}
