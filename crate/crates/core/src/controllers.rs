//! Tracking controllers for the PFAR: the adaptive controller with learned
//! features and its adaptation law, the PID baseline, and the PD controller
//! used for data collection.
//!
//! All control laws are written against [`Graph`] so the same code runs in
//! closed-loop evaluation and inside differentiable meta-training rollouts.

use crate::autodiff::{Graph, Tensor};
use crate::dynamics::{gravity_node, split_state};
use crate::nn::{Mlp, MlpNodes, STATE_INPUT_SCALE};
use crate::prng::PrngKey;
use crate::rollout::Controller;
use crate::trajgen::RefPoint;

pub type Mat3 = [[f64; 3]; 3];

pub const FEATURE_DIM: usize = 32;
pub const FEATURE_HIDDEN: [usize; 2] = [32, 32];

pub fn scaled_identity(c: f64) -> Mat3 {
    [[c, 0.0, 0.0], [0.0, c, 0.0], [0.0, 0.0, c]]
}

pub fn mat3_tensor(m: &Mat3) -> Tensor {
    Tensor::matrix(3, 3, m.iter().flatten().copied().collect()).expect("3x3")
}

pub fn mat3_from_tensor(t: &Tensor) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| t.at(i, j)))
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

pub fn mat3_add(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| a[i][j] + b[i][j]))
}

/// Positions of the six free entries of a 3×3 lower-triangular factor, row
/// by row: `(0,0) (1,0) (1,1) (2,0) (2,1) (2,2)`.
const TRIL: [(usize, usize); 6] = [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)];

/// `Q = L Lᵀ` where `L` holds `params` below the diagonal and `exp(params)`
/// on it.
pub fn log_cholesky(params: &[f64; 6]) -> Mat3 {
    let mut l = [[0.0; 3]; 3];
    for (p, &(i, j)) in params.iter().zip(&TRIL) {
        l[i][j] = if i == j { p.exp() } else { *p };
    }
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| l[i][k] * l[j][k]).sum()))
}

/// Inverse of [`log_cholesky`] for a symmetric positive-definite matrix.
pub fn log_cholesky_params(q: &Mat3) -> Option<[f64; 6]> {
    let m = nalgebra::Matrix3::from_fn(|i, j| q[i][j]);
    let l = m.cholesky()?.l();
    Some(std::array::from_fn(|k| {
        let (i, j) = TRIL[k];
        if i == j {
            l[(i, j)].ln()
        } else {
            l[(i, j)]
        }
    }))
}

/// Log-Cholesky factor parameters `[6]` to a `[3, 3]` positive-definite node.
pub fn log_cholesky_node<G: Graph>(g: &mut G, params: &G::Node) -> G::Node {
    let e = g.exp(params);
    let zero = g.constant(Tensor::vector(vec![0.0]));
    let pick = |g: &mut G, k: usize| -> G::Node {
        let (i, j) = TRIL[k];
        if i == j {
            g.slice(&e, k, 1)
        } else {
            g.slice(params, k, 1)
        }
    };
    let l00 = pick(g, 0);
    let l10 = pick(g, 1);
    let l11 = pick(g, 2);
    let l20 = pick(g, 3);
    let l21 = pick(g, 4);
    let l22 = pick(g, 5);
    let flat = g.concat(&[&l00, &zero, &zero, &l10, &l11, &zero, &l20, &l21, &l22]);
    let l = g.reshape(&flat, &[3, 3]);
    let lt = g.transpose(&l);
    g.matmul(&l, &lt)
}

/// Unconstrained parameters of the gains `(Λ, K, Γ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GainParams {
    pub lambda: [f64; 6],
    pub k: [f64; 6],
    pub gamma: [f64; 6],
}

impl GainParams {
    /// All gains equal to the identity.
    pub fn identity() -> Self {
        GainParams {
            lambda: [0.0; 6],
            k: [0.0; 6],
            gamma: [0.0; 6],
        }
    }

    pub fn from_gains(gains: &Gains) -> Option<Self> {
        Some(GainParams {
            lambda: log_cholesky_params(&gains.lambda)?,
            k: log_cholesky_params(&gains.k)?,
            gamma: log_cholesky_params(&gains.gamma)?,
        })
    }

    pub fn tensors(&self) -> [Tensor; 3] {
        [
            Tensor::from(self.lambda),
            Tensor::from(self.k),
            Tensor::from(self.gamma),
        ]
    }

    pub fn from_tensors(t: &[Tensor]) -> Self {
        let arr = |t: &Tensor| -> [f64; 6] { t.data().try_into().expect("six parameters") };
        GainParams {
            lambda: arr(&t[0]),
            k: arr(&t[1]),
            gamma: arr(&t[2]),
        }
    }
}

/// Positive-definite gains `(Λ, K, Γ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gains {
    pub lambda: Mat3,
    pub k: Mat3,
    pub gamma: Mat3,
}

impl Gains {
    pub fn scaled(lambda: f64, k: f64, gamma: f64) -> Self {
        Gains {
            lambda: scaled_identity(lambda),
            k: scaled_identity(k),
            gamma: scaled_identity(gamma),
        }
    }

    /// PID gains for which PID and the adaptive controller with constant
    /// unit features coincide: `K_P = KΛ + Γ`, `K_I = ΓΛ`, `K_D = K + Λ`.
    pub fn to_pid(&self) -> PidGains {
        PidGains {
            kp: mat3_add(&mat3_mul(&self.k, &self.lambda), &self.gamma),
            ki: mat3_mul(&self.gamma, &self.lambda),
            kd: mat3_add(&self.k, &self.lambda),
        }
    }
}

pub fn gains_from_log_cholesky(params: &GainParams) -> Gains {
    Gains {
        lambda: log_cholesky(&params.lambda),
        k: log_cholesky(&params.k),
        gamma: log_cholesky(&params.gamma),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PidGains {
    pub kp: Mat3,
    pub ki: Mat3,
    pub kd: Mat3,
}

/// The feature network `y(q, q̇; θ_y)`: all hidden layers of a tanh MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNetwork {
    pub mlp: Mlp,
    pub normalize: bool,
}

impl FeatureNetwork {
    pub fn glorot(key: PrngKey, normalize: bool) -> Self {
        let sizes = [6, FEATURE_HIDDEN[0], FEATURE_HIDDEN[1]];
        FeatureNetwork {
            mlp: Mlp::glorot(&sizes, true, key),
            normalize,
        }
    }

    pub fn dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn eval(&self, x: &[f64; 6]) -> Vec<f64> {
        let input: Vec<f64> = if self.normalize {
            x.iter().zip(STATE_INPUT_SCALE).map(|(a, s)| a * s).collect()
        } else {
            x.to_vec()
        };
        self.mlp.eval(&input)
    }

    pub fn place<G: Graph>(&self, g: &mut G, place: impl FnMut(&mut G, Tensor) -> G::Node) -> FeatureMap<G::Node> {
        let mlp = self.mlp.place(g, place);
        let scale = self.normalize.then(|| g.constant(Tensor::from(STATE_INPUT_SCALE)));
        FeatureMap::Network { mlp, scale }
    }
}

/// Features evaluated on a graph.
#[derive(Clone, Debug)]
pub enum FeatureMap<N> {
    Network {
        mlp: MlpNodes<N>,
        scale: Option<N>,
    },
    /// `y ≡ 1` of the given dimension.
    Constant {
        ones: N,
        dim: usize,
    },
}

impl<N: Clone> FeatureMap<N> {
    pub fn constant<G: Graph<Node = N>>(g: &mut G, dim: usize) -> Self {
        FeatureMap::Constant {
            ones: g.constant(Tensor::filled(&[dim], 1.0)),
            dim,
        }
    }

    pub fn dim<G: Graph<Node = N>>(&self, g: &G) -> usize {
        match self {
            FeatureMap::Network { mlp, .. } => {
                let (w, _) = mlp.layers.last().expect("layers");
                g.value(w).shape()[0]
            }
            FeatureMap::Constant { dim, .. } => *dim,
        }
    }

    /// `y(q, q̇)` for a state node `[6]`.
    pub fn eval<G: Graph<Node = N>>(&self, g: &mut G, x: &N) -> N {
        match self {
            FeatureMap::Network { mlp, scale } => {
                let input = match scale {
                    Some(s) => g.mul(x, s),
                    None => x.clone(),
                };
                mlp.forward(g, &input)
            }
            FeatureMap::Constant { ones, .. } => ones.clone(),
        }
    }

    /// `y` for a batch of states `[batch, 6]`, giving `[batch, p]`.
    pub fn eval_batch<G: Graph<Node = N>>(&self, g: &mut G, x: &N) -> N {
        match self {
            FeatureMap::Network { mlp, scale } => {
                let input = match scale {
                    Some(s) => g.mul_row(x, s),
                    None => x.clone(),
                };
                mlp.forward_batch(g, &input)
            }
            FeatureMap::Constant { dim, .. } => {
                let rows = g.value(x).shape()[0];
                g.constant(Tensor::filled(&[rows, *dim], 1.0))
            }
        }
    }
}

/// `q̃ = q - q_d`, `q̃̇`, `s = q̃̇ + Λq̃`, `v = q̇_d - Λq̃`, `v̇ = q̈_d - Λq̃̇`.
#[derive(Clone, Debug)]
pub struct TrackingSignals<N> {
    pub q_err: N,
    pub qdot_err: N,
    pub s: N,
    pub v: N,
    pub vdot: N,
}

pub fn tracking_signals<G: Graph>(g: &mut G, x: &G::Node, r: &RefPoint, lambda: &G::Node) -> TrackingSignals<G::Node> {
    let (q, qdot, _) = split_state(g, x);
    let qd = g.constant(Tensor::from(r.q));
    let qd_dot = g.constant(Tensor::from(r.qdot));
    let qd_ddot = g.constant(Tensor::from(r.qddot));
    let q_err = g.sub(&q, &qd);
    let qdot_err = g.sub(&qdot, &qd_dot);
    let lq = g.matmul(lambda, &q_err);
    let lqd = g.matmul(lambda, &qdot_err);
    let s = g.add(&qdot_err, &lq);
    let v = g.sub(&qd_dot, &lq);
    let vdot = g.sub(&qd_ddot, &lqd);
    TrackingSignals {
        q_err,
        qdot_err,
        s,
        v,
        vdot,
    }
}

/// `u = Rᵀ(φ)(v̇ + g - A y - K s)`.
pub fn adaptive_control<G: Graph>(
    g: &mut G,
    x: &G::Node,
    signals: &TrackingSignals<G::Node>,
    a: &G::Node,
    y: &G::Node,
    k: &G::Node,
) -> G::Node {
    let ay = g.matmul(a, y);
    let ks = g.matmul(k, &signals.s);
    let grav = gravity_node(g, 1.0);
    let mut f = g.add(&signals.vdot, &grav);
    f = g.sub(&f, &ay);
    f = g.sub(&f, &ks);
    body_frame(g, x, &f)
}

/// `Ȧ = Γ s yᵀ`.
pub fn adaptation_law<G: Graph>(g: &mut G, s: &G::Node, y: &G::Node, gamma: &G::Node) -> G::Node {
    let gs = g.matmul(gamma, s);
    g.outer(&gs, y)
}

/// `u = Rᵀ(φ)(g + q̈_d - K_P q̃ - K_I ∫q̃ - K_D q̃̇)`.
#[allow(clippy::too_many_arguments)]
pub fn pid_control<G: Graph>(
    g: &mut G,
    x: &G::Node,
    r: &RefPoint,
    integral: &G::Node,
    kp: &G::Node,
    ki: &G::Node,
    kd: &G::Node,
) -> G::Node {
    let (q, qdot, _) = split_state(g, x);
    let q_err = {
        let qd = g.constant(Tensor::from(r.q));
        g.sub(&q, &qd)
    };
    let qdot_err = {
        let qd = g.constant(Tensor::from(r.qdot));
        g.sub(&qdot, &qd)
    };
    let ff = g.constant(Tensor::from([
        r.qddot[0],
        r.qddot[1] + crate::dynamics::GRAVITY,
        r.qddot[2],
    ]));
    let p = g.matmul(kp, &q_err);
    let i = g.matmul(ki, integral);
    let d = g.matmul(kd, &qdot_err);
    let mut f = g.sub(&ff, &p);
    f = g.sub(&f, &i);
    f = g.sub(&f, &d);
    body_frame(g, x, &f)
}

/// `u = Rᵀ(φ)(g - k_P q̃ - k_D q̃̇)`, without acceleration feed-forward.
pub fn pd_collect_control<G: Graph>(g: &mut G, x: &G::Node, r: &RefPoint, kp: f64, kd: f64) -> G::Node {
    let (q, qdot, _) = split_state(g, x);
    let target = g.constant(Tensor::from(r.q));
    let target_dot = g.constant(Tensor::from(r.qdot));
    let q_err = g.sub(&q, &target);
    let qdot_err = g.sub(&qdot, &target_dot);
    let grav = gravity_node(g, 1.0);
    let f = g.axpy(&grav, -kp, &q_err);
    let f = g.axpy(&f, -kd, &qdot_err);
    body_frame(g, x, &f)
}

/// `Rᵀ(φ) f` for the attitude in state `x`.
fn body_frame<G: Graph>(g: &mut G, x: &G::Node, f: &G::Node) -> G::Node {
    let phi = g.slice(x, 2, 1);
    g.rotate(&phi, f, true)
}

/// Adaptive controller with adapted output layer `A ∈ ℝ^{3×p}` as its state.
#[derive(Clone, Debug)]
pub struct AdaptiveController<N> {
    pub features: FeatureMap<N>,
    pub lambda: N,
    pub k: N,
    pub gamma: N,
    pub feature_dim: usize,
}

impl<N: Clone> AdaptiveController<N> {
    /// Controller with fixed gains placed as constants.
    pub fn with_gains<G: Graph<Node = N>>(g: &mut G, features: FeatureMap<N>, gains: &Gains) -> Self {
        let feature_dim = features.dim(g);
        AdaptiveController {
            features,
            lambda: g.constant(mat3_tensor(&gains.lambda)),
            k: g.constant(mat3_tensor(&gains.k)),
            gamma: g.constant(mat3_tensor(&gains.gamma)),
            feature_dim,
        }
    }
}

impl<G: Graph> Controller<G> for AdaptiveController<G::Node> {
    fn initial_state(&self, g: &mut G) -> G::Node {
        g.constant(Tensor::zeros(&[3, self.feature_dim]))
    }

    fn evaluate(&self, g: &mut G, x: &G::Node, a: &G::Node, r: &RefPoint) -> (G::Node, G::Node) {
        let sig = tracking_signals(g, x, r, &self.lambda);
        let y = self.features.eval(g, x);
        let u = adaptive_control(g, x, &sig, a, &y, &self.k);
        let a_dot = adaptation_law(g, &sig.s, &y, &self.gamma);
        (u, a_dot)
    }
}

/// PID with the integral of the position error as its state.
#[derive(Clone, Debug)]
pub struct PidController<N> {
    pub kp: N,
    pub ki: N,
    pub kd: N,
}

impl<N> PidController<N> {
    pub fn new<G: Graph<Node = N>>(g: &mut G, gains: &PidGains) -> Self {
        PidController {
            kp: g.constant(mat3_tensor(&gains.kp)),
            ki: g.constant(mat3_tensor(&gains.ki)),
            kd: g.constant(mat3_tensor(&gains.kd)),
        }
    }
}

impl<G: Graph> Controller<G> for PidController<G::Node> {
    fn initial_state(&self, g: &mut G) -> G::Node {
        g.constant(Tensor::zeros(&[3]))
    }

    fn evaluate(&self, g: &mut G, x: &G::Node, z: &G::Node, r: &RefPoint) -> (G::Node, G::Node) {
        let u = pid_control(g, x, r, z, &self.kp, &self.ki, &self.kd);
        let (q, _, _) = split_state(g, x);
        let qd = g.constant(Tensor::from(r.q));
        let err = g.sub(&q, &qd);
        (u, err)
    }
}

/// Scalar-gain PD used to collect training data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PdController {
    pub kp: f64,
    pub kd: f64,
}

impl Default for PdController {
    fn default() -> Self {
        PdController { kp: 10.0, kd: 0.1 }
    }
}

impl<G: Graph> Controller<G> for PdController {
    fn initial_state(&self, g: &mut G) -> G::Node {
        g.constant(Tensor::zeros(&[0]))
    }

    fn evaluate(&self, g: &mut G, x: &G::Node, z: &G::Node, r: &RefPoint) -> (G::Node, G::Node) {
        (pd_collect_control(g, x, r, self.kp, self.kd), z.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eager;
    use proptest::prelude::*;

    fn min_eig(q: &Mat3) -> f64 {
        let m = nalgebra::Matrix3::from_fn(|i, j| q[i][j]);
        m.symmetric_eigenvalues().min()
    }

    #[test]
    fn log_cholesky_examples() {
        assert_eq!(log_cholesky(&[0.0; 6]), scaled_identity(1.0));
        let q = log_cholesky(&[2f64.ln(), 0.0, 0.0, 0.0, 0.0, 3f64.ln()]);
        let expected = [[4.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 9.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((q[i][j] - expected[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_cholesky_node_matches_plain() {
        let p = [0.3, -0.7, 0.1, 1.2, 0.4, -0.5];
        let mut g = Eager;
        let q = log_cholesky_node(&mut g, &Tensor::from(p));
        let plain = log_cholesky(&p);
        for i in 0..3 {
            for j in 0..3 {
                assert!((q.at(i, j) - plain[i][j]).abs() < 1e-14);
            }
        }
        let back = log_cholesky_params(&plain).unwrap();
        for (a, b) in back.iter().zip(&p) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pid_mapping_of_default_gains() {
        let pid = Gains::scaled(1.0, 10.0, 10.0).to_pid();
        assert_eq!(pid.kp, scaled_identity(20.0));
        assert_eq!(pid.ki, scaled_identity(10.0));
        assert_eq!(pid.kd, scaled_identity(11.0));
    }

    #[test]
    fn tracking_signal_examples() {
        let mut g = Eager;
        let r = RefPoint {
            q: [1.0, 2.0, 0.1],
            qdot: [0.5, -0.5, 0.2],
            qddot: [0.3, 0.1, -0.1],
        };
        let lambda = mat3_tensor(&scaled_identity(1.0));
        let on_ref = Tensor::from(r.state());
        let sig = tracking_signals(&mut g, &on_ref, &r, &lambda);
        assert!(sig.q_err.data().iter().all(|&v| v == 0.0));
        assert!(sig.s.data().iter().all(|&v| v == 0.0));
        assert_eq!(sig.v.data(), &r.qdot);
        assert_eq!(sig.vdot.data(), &r.qddot);

        let mut off = r.state();
        off[0] += 1.0;
        let sig = tracking_signals(&mut g, &Tensor::from(off), &r, &lambda);
        assert_eq!(sig.s.data(), &[1.0, 0.0, 0.0]);
        assert_eq!(sig.v.data(), &[r.qdot[0] - 1.0, r.qdot[1], r.qdot[2]]);
    }

    #[test]
    fn adaptive_on_reference_hover_is_gravity() {
        let mut g = Eager;
        let net = FeatureNetwork::glorot(PrngKey::from_seed(1), true);
        let features = net.place(&mut g, |_, t| t);
        let ctrl = AdaptiveController::with_gains(&mut g, features, &Gains::scaled(1.0, 10.0, 10.0));
        let a = <AdaptiveController<Tensor> as Controller<Eager>>::initial_state(&ctrl, &mut g);
        let r = RefPoint::hover([0.0; 3]);
        let (u, a_dot) = ctrl.evaluate(&mut g, &Tensor::from(r.state()), &a, &r);
        assert_eq!(u.data(), &[0.0, 9.81, 0.0]);
        assert!(a_dot.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adaptation_law_outer_product() {
        let mut g = Eager;
        let mut y = vec![0.0; 32];
        y[0] = 1.0;
        let a_dot = adaptation_law(
            &mut g,
            &Tensor::from([1.0, 0.0, 0.0]),
            &Tensor::vector(y),
            &mat3_tensor(&scaled_identity(1.0)),
        );
        assert_eq!(a_dot.shape(), &[3, 32]);
        assert_eq!(a_dot.at(0, 0), 1.0);
        assert_eq!(a_dot.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn pid_and_pd_examples() {
        let mut g = Eager;
        let r = RefPoint::hover([0.0; 3]);
        let x = Tensor::from([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let eye = mat3_tensor(&scaled_identity(1.0));
        let zero = Tensor::zeros(&[3, 3]);
        let u = pid_control(&mut g, &x, &r, &Tensor::zeros(&[3]), &eye, &zero, &zero);
        assert_eq!(u.data(), &[-1.0, 9.81, 0.0]);

        let x = Tensor::from([0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let u = pd_collect_control(&mut g, &x, &r, 10.0, 0.1);
        assert!((u.data()[1] - (9.81 - 10.0)).abs() < 1e-15);

        // No q̈_d feed-forward in the collection controller.
        let r_acc = RefPoint {
            qddot: [5.0, 5.0, 5.0],
            ..RefPoint::hover([0.0; 3])
        };
        let x0 = Tensor::from([0.0; 6]);
        assert_eq!(
            pd_collect_control(&mut g, &x0, &r_acc, 10.0, 0.1).data(),
            &[0.0, 9.81, 0.0]
        );

        // On-reference PID is pure feed-forward, rotated into the body frame.
        let phi = 0.4;
        let x = Tensor::from([0.0, 0.0, phi, 0.0, 0.0, 0.0]);
        let r = RefPoint {
            q: [0.0, 0.0, phi],
            qdot: [0.0; 3],
            qddot: [0.5, -0.2, 0.1],
        };
        let u = pid_control(&mut g, &x, &r, &Tensor::zeros(&[3]), &eye, &eye, &eye);
        let expected = crate::dynamics::rotate_transpose(phi, &[0.5, 9.61, 0.1]);
        for i in 0..3 {
            assert!((u.data()[i] - expected[i]).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn gains_are_positive_definite(p in prop::array::uniform6(-3.0f64..3.0)) {
            prop_assert!(min_eig(&log_cholesky(&p)) > 0.0);
        }

        #[test]
        fn control_is_linear_in_adapted_parameters(
            x in prop::array::uniform6(-2.0f64..2.0),
            da in prop::collection::vec(-1.0f64..1.0, 96),
        ) {
            let mut g = Eager;
            let net = FeatureNetwork::glorot(PrngKey::from_seed(4), true);
            let features = net.place(&mut g, |_, t| t);
            let ctrl = AdaptiveController::with_gains(&mut g, features, &Gains::scaled(1.0, 10.0, 10.0));
            let r = RefPoint::hover([0.0; 3]);
            let x = Tensor::from(x);
            let a0 = Tensor::zeros(&[3, 32]);
            let da = Tensor::matrix(3, 32, da).unwrap();
            let (u0, _) = ctrl.evaluate(&mut g, &x, &a0, &r);
            let (u1, _) = ctrl.evaluate(&mut g, &x, &da, &r);
            let y = net.eval(&x.data().try_into().unwrap());
            let day: Vec<f64> = (0..3).map(|i| (0..32).map(|j| da.at(i, j) * y[j]).sum()).collect();
            let shift = crate::dynamics::rotate_transpose(x.data()[2], &[day[0], day[1], day[2]]);
            for i in 0..3 {
                prop_assert!((u1.data()[i] - (u0.data()[i] - shift[i])).abs() < 1e-10);
            }
        }
    }
}
