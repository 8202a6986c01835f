//! PFAR equations of motion with mass-normalized quadratic wind drag.
//!
//! `q̈ = -g + R(φ) u + f_ext(q, q̇; w)` with `g = (0, 9.81, 0)`.

use crate::autodiff::{Graph, Tensor};
use crate::rollout::Plant;

pub const GRAVITY: f64 = 9.81;
pub const GRAVITY_VEC: [f64; 3] = [0.0, GRAVITY, 0.0];

/// Generalized coordinates `(x, y, φ)` and their rates.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct State {
    pub q: [f64; 3],
    pub qdot: [f64; 3],
}

impl State {
    pub fn new(q: [f64; 3], qdot: [f64; 3]) -> Self {
        State { q, qdot }
    }

    pub fn from_slice(x: &[f64]) -> Self {
        State {
            q: [x[0], x[1], x[2]],
            qdot: [x[3], x[4], x[5]],
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.q[0],
            self.q[1],
            self.q[2],
            self.qdot[0],
            self.qdot[1],
            self.qdot[2],
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.qdot).all(|v| v.is_finite())
    }
}

/// Wind speed along the inertial x-axis and body-frame drag coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindField {
    pub w: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl WindField {
    pub fn new(w: f64) -> Self {
        WindField {
            w,
            beta1: 0.1,
            beta2: 1.0,
        }
    }

    pub fn with_drag(w: f64, beta1: f64, beta2: f64) -> Self {
        assert!(beta1 > 0.0 && beta2 > 0.0, "drag coefficients must be positive");
        WindField { w, beta1, beta2 }
    }
}

pub fn rotation(phi: f64) -> [[f64; 3]; 3] {
    let (s, c) = phi.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

pub fn rotate(phi: f64, v: &[f64; 3]) -> [f64; 3] {
    let (s, c) = phi.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
}

pub fn rotate_transpose(phi: f64, v: &[f64; 3]) -> [f64; 3] {
    let (s, c) = phi.sin_cos();
    [c * v[0] + s * v[1], -s * v[0] + c * v[1], v[2]]
}

/// Body-frame relative airspeed `(v₁, v₂)`.
pub fn relative_airspeed(state: &State, wind: &WindField) -> (f64, f64) {
    let (s, c) = state.q[2].sin_cos();
    let dx = state.qdot[0] - wind.w;
    let dy = state.qdot[1];
    (dx * c + dy * s, -dx * s + dy * c)
}

pub fn drag_force(state: &State, wind: &WindField) -> [f64; 3] {
    let (v1, v2) = relative_airspeed(state, wind);
    let d = [wind.beta1 * v1 * v1.abs(), wind.beta2 * v2 * v2.abs(), 0.0];
    let f = rotate(state.q[2], &d);
    [-f[0], -f[1], 0.0]
}

/// `(q̇, q̈)` of the true vehicle.
pub fn true_dynamics(state: &State, u: &[f64; 3], wind: &WindField) -> [f64; 6] {
    let thrust = rotate(state.q[2], u);
    let drag = drag_force(state, wind);
    [
        state.qdot[0],
        state.qdot[1],
        state.qdot[2],
        thrust[0] + drag[0] - GRAVITY_VEC[0],
        thrust[1] + drag[1] - GRAVITY_VEC[1],
        thrust[2] + drag[2] - GRAVITY_VEC[2],
    ]
}

/// `R(φ)` as a `[3, 3]` node from a one-element angle node.
pub fn rotation_node<G: Graph>(g: &mut G, phi: &G::Node) -> G::Node {
    let c = g.cos(phi);
    let s = g.sin(phi);
    let ns = g.neg(&s);
    let zero = g.constant(Tensor::vector(vec![0.0]));
    let one = g.constant(Tensor::vector(vec![1.0]));
    let flat = g.concat(&[&c, &ns, &zero, &s, &c, &zero, &zero, &zero, &one]);
    g.reshape(&flat, &[3, 3])
}

/// Splits a `[6]` state node into `(q, q̇, φ)`.
pub fn split_state<G: Graph>(g: &mut G, x: &G::Node) -> (G::Node, G::Node, G::Node) {
    let q = g.slice(x, 0, 3);
    let qdot = g.slice(x, 3, 3);
    let phi = g.slice(x, 2, 1);
    (q, qdot, phi)
}

/// The true vehicle as a plant for closed-loop simulation.
#[derive(Clone, Copy, Debug)]
pub struct PfarPlant {
    pub wind: WindField,
}

impl<G: Graph> Plant<G> for PfarPlant {
    fn derivative(&self, g: &mut G, x: &G::Node, u: &G::Node) -> G::Node {
        let (_, qdot, phi) = split_state(g, x);
        let thrust = g.rotate(&phi, u, false);

        let air = g.constant(Tensor::from([self.wind.w, 0.0, 0.0]));
        let rel = g.sub(&qdot, &air);
        let v = g.rotate(&phi, &rel, true);
        let v_abs = g.abs(&v);
        let vv = g.mul(&v, &v_abs);
        let beta = g.constant(Tensor::from([self.wind.beta1, self.wind.beta2, 0.0]));
        let d = g.mul(&beta, &vv);
        let drag = g.rotate(&phi, &d, false);

        let acc = g.sub(&thrust, &drag);
        let grav = gravity_node(g, -1.0);
        let acc = g.add(&acc, &grav);
        g.concat(&[&qdot, &acc])
    }
}

/// `sign * g` as a constant node.
pub fn gravity_node<G: Graph>(g: &mut G, sign: f64) -> G::Node {
    g.constant(Tensor::from(GRAVITY_VEC.map(|v| sign * v)))
}
