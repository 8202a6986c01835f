//! Fixed-step RK4 closed-loop simulation.
//!
//! The plant state `x`, the controller state `z` and the running tracking
//! cost are integrated together as one ODE, so the tracking loss is an RK4
//! quadrature of `‖x - r‖² + α‖u‖²` and the whole rollout is differentiable
//! when run on a [`Tape`](crate::autodiff::Tape).

use crate::autodiff::{Eager, Graph, Tensor};
use crate::dynamics::{PfarPlant, WindField};
use crate::ensemble::TrajectoryLog;
use crate::eval::rms;
use crate::trajgen::{RefPoint, ReferenceTrajectory, TrajError};

/// State derivative `ẋ = f(x, u)` for `x ∈ ℝ⁶`, `u ∈ ℝ³`.
pub trait Plant<G: Graph> {
    fn derivative(&self, g: &mut G, x: &G::Node, u: &G::Node) -> G::Node;
}

/// A feedback law with internal state `z`.
pub trait Controller<G: Graph> {
    fn initial_state(&self, g: &mut G) -> G::Node;

    /// Returns `(u, ż)`.
    fn evaluate(&self, g: &mut G, x: &G::Node, z: &G::Node, r: &RefPoint) -> (G::Node, G::Node);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControlMode {
    /// `u` recomputed in every RK4 stage.
    Continuous,
    /// `u` sampled once per control period and held; `ż` still evaluated in
    /// every stage.
    ZeroOrderHold,
}

impl ControlMode {
    pub fn name(&self) -> &'static str {
        match self {
            ControlMode::Continuous => "continuous",
            ControlMode::ZeroOrderHold => "zoh",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "continuous" => Some(ControlMode::Continuous),
            "zoh" => Some(ControlMode::ZeroOrderHold),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutConfig {
    pub dt: f64,
    pub horizon: f64,
    pub control_period: f64,
    pub alpha: f64,
    pub mode: ControlMode,
    /// States with any component larger in magnitude count as diverged.
    pub max_state: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            dt: 0.01,
            horizon: 5.0,
            control_period: 0.01,
            alpha: 1e-3,
            mode: ControlMode::Continuous,
            max_state: 1e6,
        }
    }
}

impl RolloutConfig {
    pub fn with_horizon(self, horizon: f64) -> Self {
        RolloutConfig { horizon, ..self }
    }

    pub fn with_mode(self, mode: ControlMode) -> Self {
        RolloutConfig { mode, ..self }
    }

    /// `(steps, steps per control period)`.
    pub fn steps(&self) -> Result<(usize, usize), RolloutError> {
        let whole = |x: f64, what: &str| -> Result<usize, RolloutError> {
            let n = (x / self.dt).round();
            if !(self.dt > 0.0) || n < 1.0 || (n * self.dt - x).abs() > 1e-9 * x.max(1.0) {
                return Err(RolloutError::Config(format!(
                    "{what} {x} is not a positive multiple of dt {}",
                    self.dt
                )));
            }
            Ok(n as usize)
        };
        Ok((
            whole(self.horizon, "horizon")?,
            whole(self.control_period, "control period")?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RolloutError {
    #[error("rollout diverged at t = {time}")]
    Diverged { time: f64 },
    #[error(transparent)]
    Reference(#[from] TrajError),
    #[error("invalid rollout configuration: {0}")]
    Config(String),
}

/// One classical RK4 step of `ẏ = f(t, y)` over a list of nodes. `k1` may be
/// supplied when the first stage was already evaluated by the caller.
pub fn rk4_step<G, F>(g: &mut G, t: f64, h: f64, y: &[G::Node], k1: Option<Vec<G::Node>>, mut f: F) -> Vec<G::Node>
where
    G: Graph,
    F: FnMut(&mut G, f64, &[G::Node]) -> Vec<G::Node>,
{
    let k1 = k1.unwrap_or_else(|| f(g, t, y));
    let shift =
        |g: &mut G, k: &[G::Node], c: f64| -> Vec<G::Node> { y.iter().zip(k).map(|(a, b)| g.axpy(a, c, b)).collect() };
    let y2 = shift(g, &k1, 0.5 * h);
    let k2 = f(g, t + 0.5 * h, &y2);
    let y3 = shift(g, &k2, 0.5 * h);
    let k3 = f(g, t + 0.5 * h, &y3);
    let y4 = shift(g, &k3, h);
    let k4 = f(g, t + h, &y4);
    (0..y.len())
        .map(|i| {
            let s = g.axpy(&k1[i], 2.0, &k2[i]);
            let s = g.axpy(&s, 2.0, &k3[i]);
            let s = g.add(&s, &k4[i]);
            g.axpy(&y[i], h / 6.0, &s)
        })
        .collect()
}

/// Result of [`simulate`]. Sample `k` is at `times[k] = k·dt`, `k = 0..=steps`.
#[derive(Clone, Debug)]
pub struct Rollout<N> {
    /// `(1/T)∫₀ᵀ ‖x - r‖² + α‖u‖² dt`.
    pub loss: N,
    pub loss_value: f64,
    pub times: Vec<f64>,
    pub states: Vec<[f64; 6]>,
    /// Applied control at each sample.
    pub controls: Vec<[f64; 3]>,
    /// `x - r` at each sample.
    pub errors: Vec<[f64; 6]>,
    /// Cost integrand at each sample.
    pub integrand: Vec<f64>,
    pub final_state: N,
    pub final_controller_state: N,
}

fn to_array<const K: usize>(t: &Tensor) -> [f64; K] {
    t.data().try_into().expect("fixed-size node")
}

/// Controller output and augmented derivative at one stage.
struct Stage<N> {
    u: N,
    deriv: Vec<N>,
}

#[allow(clippy::too_many_arguments)]
fn stage<G, P, C>(
    g: &mut G,
    plant: &P,
    controller: &C,
    alpha: f64,
    y: &[G::Node],
    r: &RefPoint,
    held: Option<&G::Node>,
) -> Stage<G::Node>
where
    G: Graph,
    P: Plant<G>,
    C: Controller<G>,
{
    let (x, z) = (&y[0], &y[1]);
    let (u_c, z_dot) = controller.evaluate(g, x, z, r);
    let u = held.cloned().unwrap_or(u_c);
    let x_dot = plant.derivative(g, x, &u);
    let target = g.constant(Tensor::from(r.state()));
    let e = g.sub(x, &target);
    let ee = g.sum_sq(&e);
    let uu = g.sum_sq(&u);
    let c_dot = g.axpy(&ee, alpha, &uu);
    Stage {
        u,
        deriv: vec![x_dot, z_dot, c_dot],
    }
}

fn check_finite<G: Graph>(g: &G, nodes: &[G::Node], bound: f64) -> bool {
    nodes
        .iter()
        .all(|n| g.value(n).data().iter().all(|v| v.is_finite() && v.abs() <= bound))
}

/// Closed-loop rollout from `x(0) = r(0)` with the controller's initial state.
pub fn simulate<G, P, C>(
    g: &mut G,
    plant: &P,
    controller: &C,
    reference: &ReferenceTrajectory,
    config: &RolloutConfig,
) -> Result<Rollout<G::Node>, RolloutError>
where
    G: Graph,
    P: Plant<G>,
    C: Controller<G>,
{
    let (steps, period) = config.steps()?;
    let dt = config.dt;
    if config.horizon > reference.duration() + 1e-9 * reference.duration().max(1.0) {
        return Err(RolloutError::Config(format!(
            "horizon {} exceeds reference duration {}",
            config.horizon,
            reference.duration()
        )));
    }
    let zoh = config.mode == ControlMode::ZeroOrderHold;
    let r0 = reference.evaluate(0.0)?;
    let mut y = vec![
        g.constant(Tensor::from(r0.state())),
        controller.initial_state(g),
        g.scalar(0.0),
    ];
    let mut held: Option<G::Node> = None;

    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps + 1);
    let mut errors = Vec::with_capacity(steps + 1);
    let mut integrand = Vec::with_capacity(steps + 1);
    let mut log = |g: &G, t: f64, x: &G::Node, r: &RefPoint, s: &Stage<G::Node>| {
        let xv: [f64; 6] = to_array(g.value(x));
        let rv = r.state();
        times.push(t);
        states.push(xv);
        controls.push(to_array(g.value(&s.u)));
        errors.push(std::array::from_fn(|i| xv[i] - rv[i]));
        integrand.push(g.value(&s.deriv[2]).item());
    };

    let mut r_now = r0;
    for k in 0..steps {
        let t = k as f64 * dt;
        if zoh && k % period == 0 {
            let (u, _) = controller.evaluate(g, &y[0], &y[1], &r_now);
            held = Some(u);
        }
        let first = stage(g, plant, controller, config.alpha, &y, &r_now, held.as_ref());
        log(g, t, &y[0], &r_now, &first);

        let r_mid = reference.evaluate(t + 0.5 * dt)?;
        let r_next = reference.evaluate((k + 1) as f64 * dt)?;
        let hold = held.clone();
        y = rk4_step(g, t, dt, &y, Some(first.deriv), |g, ts, ys| {
            let r = if ts > t + 0.75 * dt { &r_next } else { &r_mid };
            stage(g, plant, controller, config.alpha, ys, r, hold.as_ref()).deriv
        });
        if !check_finite(g, &y, config.max_state) {
            return Err(RolloutError::Diverged {
                time: (k + 1) as f64 * dt,
            });
        }
        r_now = r_next;
    }
    if zoh && steps % period == 0 {
        let (u, _) = controller.evaluate(g, &y[0], &y[1], &r_now);
        held = Some(u);
    }
    let last = stage(g, plant, controller, config.alpha, &y, &r_now, held.as_ref());
    log(g, steps as f64 * dt, &y[0], &r_now, &last);

    let total = steps as f64 * dt;
    let loss = g.scale(&y[2], 1.0 / total);
    let loss_value = g.value(&loss).item();
    let [x, z, _] = <[G::Node; 3]>::try_from(y).ok().expect("three blocks");
    Ok(Rollout {
        loss,
        loss_value,
        times,
        states,
        controls,
        errors,
        integrand,
        final_state: x,
        final_controller_state: z,
    })
}

/// Closed-loop run on the true vehicle with zero-order-hold control.
#[derive(Clone, Debug)]
pub struct PlantRun {
    /// Samples at the control rate.
    pub log: TrajectoryLog,
    pub rms_error: f64,
    pub rms_effort: f64,
    pub loss: f64,
}

pub fn simulate_plant<C>(
    wind: WindField,
    controller: &C,
    reference: &ReferenceTrajectory,
    config: &RolloutConfig,
) -> Result<PlantRun, RolloutError>
where
    C: Controller<Eager>,
{
    let config = config.with_mode(ControlMode::ZeroOrderHold);
    let (_, period) = config.steps()?;
    let mut g = Eager;
    let run = simulate(&mut g, &PfarPlant { wind }, controller, reference, &config)?;
    let pick = |k: &usize| k.is_multiple_of(period);
    let idx: Vec<usize> = (0..run.times.len()).filter(pick).collect();
    let log = TrajectoryLog::new(
        idx.iter().map(|&k| run.times[k]).collect(),
        idx.iter().map(|&k| run.states[k]).collect(),
        idx.iter().map(|&k| run.controls[k]).collect(),
        Some(wind.w),
    )
    .map_err(|e| RolloutError::Config(e.to_string()))?;
    let errors: Vec<[f64; 6]> = idx.iter().map(|&k| run.errors[k]).collect();
    let rms_error = rms(&errors).map_err(|e| RolloutError::Config(e.to_string()))?;
    let rms_effort = rms(&log.controls).map_err(|e| RolloutError::Config(e.to_string()))?;
    Ok(PlantRun {
        log,
        rms_error,
        rms_effort,
        loss: run.loss_value,
    })
}
