//! Smooth reference trajectories: random waypoint walks fitted with
//! minimum-snap polynomials in `(x, y)` and minimum-acceleration polynomials
//! in `φ`.
//!
//! Each coordinate is an equality-constrained QP over the polynomial
//! coefficients of all segments, solved through its KKT system. Segments have
//! equal durations, so the problem is posed in normalized segment time
//! `s ∈ [0, 1]`, which leaves the minimizer unchanged and keeps the KKT matrix
//! well conditioned.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::autodiff::Tensor;
use crate::prng::PrngKey;

pub const WAYPOINTS: usize = 6;
pub const SEGMENTS: usize = WAYPOINTS - 1;
/// Coefficients stored per coordinate and segment (degree 7 plus one).
pub const MAX_COEFFS: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrajError {
    #[error("time {t} outside [0, {duration}]")]
    OutOfRange { t: f64, duration: f64 },
    #[error("duration must be positive, got {0}")]
    BadDuration(f64),
    #[error("singular KKT system for coordinate {0}")]
    Singular(usize),
    #[error("malformed trajectory data: {0}")]
    Malformed(String),
}

/// Per-coordinate bounds on random-walk increments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WalkBounds {
    pub xy: f64,
    pub phi: f64,
}

impl Default for WalkBounds {
    fn default() -> Self {
        WalkBounds {
            xy: 2.0,
            phi: std::f64::consts::PI / 6.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaypointWalk {
    pub points: [[f64; 3]; WAYPOINTS],
}

/// Walk starting at the origin with i.i.d. uniform increments.
pub fn random_walk(key: PrngKey, bounds: &WalkBounds) -> WaypointWalk {
    let mut rng = key.stream();
    let mut points = [[0.0; 3]; WAYPOINTS];
    let limits = [bounds.xy, bounds.xy, bounds.phi];
    for i in 1..WAYPOINTS {
        for c in 0..3 {
            let step = if limits[c] > 0.0 {
                rng.random_range(-limits[c]..=limits[c])
            } else {
                0.0
            };
            points[i][c] = points[i - 1][c] + step;
        }
    }
    WaypointWalk { points }
}

/// Desired position, velocity and acceleration at one instant.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RefPoint {
    pub q: [f64; 3],
    pub qdot: [f64; 3],
    pub qddot: [f64; 3],
}

impl RefPoint {
    pub fn hover(q: [f64; 3]) -> Self {
        RefPoint {
            q,
            ..RefPoint::default()
        }
    }

    /// The reference state `r = (q_d, q̇_d)`.
    pub fn state(&self) -> [f64; 6] {
        [
            self.q[0],
            self.q[1],
            self.q[2],
            self.qdot[0],
            self.qdot[1],
            self.qdot[2],
        ]
    }
}

/// Polynomial structure of one coordinate's spline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplineSpec {
    pub degree: usize,
    /// Derivative whose squared integral is minimized.
    pub cost_order: usize,
    /// Derivatives `1..=continuity` are continuous at interior knots.
    pub continuity: usize,
    /// Derivatives `1..=endpoint` vanish at both ends.
    pub endpoint: usize,
}

/// Minimum snap for positions.
pub const MIN_SNAP: SplineSpec = SplineSpec {
    degree: 7,
    cost_order: 4,
    continuity: 4,
    endpoint: 3,
};

/// Minimum acceleration for the roll angle.
pub const MIN_ACCEL: SplineSpec = SplineSpec {
    degree: 5,
    cost_order: 2,
    continuity: 2,
    endpoint: 2,
};

fn falling(i: usize, d: usize) -> f64 {
    if d > i {
        return 0.0;
    }
    ((i - d + 1)..=i).map(|k| k as f64).product()
}

/// Row of d-th derivative basis values at normalized time `s`.
fn basis_row(n: usize, d: usize, s: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            if i < d {
                0.0
            } else {
                falling(i, d) * s.powi((i - d) as i32)
            }
        })
        .collect()
}

/// The QP `min ½cᵀQc s.t. Ac = b` for one coordinate.
#[derive(Clone, Debug)]
pub struct SplineQp {
    pub cost: DMatrix<f64>,
    pub constraints: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

impl SplineQp {
    pub fn new(spec: &SplineSpec, values: &[f64]) -> SplineQp {
        let n = spec.degree + 1;
        let segs = values.len() - 1;
        let dim = n * segs;
        let mut cost = DMatrix::zeros(dim, dim);
        let r = spec.cost_order;
        for seg in 0..segs {
            for i in r..n {
                for j in r..n {
                    let v = falling(i, r) * falling(j, r) / ((i - r + j - r + 1) as f64);
                    cost[(seg * n + i, seg * n + j)] = v;
                }
            }
        }
        let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
        let place = |seg: usize, row: Vec<f64>, sign: f64| -> Vec<(usize, f64)> {
            row.into_iter()
                .enumerate()
                .map(|(i, v)| (seg * n + i, sign * v))
                .collect()
        };
        for seg in 0..segs {
            rows.push((place(seg, basis_row(n, 0, 0.0), 1.0), values[seg]));
            rows.push((place(seg, basis_row(n, 0, 1.0), 1.0), values[seg + 1]));
        }
        for seg in 0..segs - 1 {
            for d in 1..=spec.continuity {
                let mut row = place(seg, basis_row(n, d, 1.0), 1.0);
                row.extend(place(seg + 1, basis_row(n, d, 0.0), -1.0));
                rows.push((row, 0.0));
            }
        }
        for d in 1..=spec.endpoint {
            rows.push((place(0, basis_row(n, d, 0.0), 1.0), 0.0));
            rows.push((place(segs - 1, basis_row(n, d, 1.0), 1.0), 0.0));
        }
        let mut constraints = DMatrix::zeros(rows.len(), dim);
        let mut rhs = DVector::zeros(rows.len());
        for (k, (row, b)) in rows.into_iter().enumerate() {
            for (col, v) in row {
                constraints[(k, col)] += v;
            }
            rhs[k] = b;
        }
        SplineQp { cost, constraints, rhs }
    }

    pub fn kkt_matrix(&self) -> DMatrix<f64> {
        let n = self.cost.nrows();
        let m = self.constraints.nrows();
        let mut k = DMatrix::zeros(n + m, n + m);
        k.view_mut((0, 0), (n, n)).copy_from(&self.cost);
        k.view_mut((0, n), (n, m)).copy_from(&self.constraints.transpose());
        k.view_mut((n, 0), (m, n)).copy_from(&self.constraints);
        k
    }

    pub fn kkt_rhs(&self) -> DVector<f64> {
        let n = self.cost.nrows();
        let mut rhs = DVector::zeros(n + self.constraints.nrows());
        rhs.rows_mut(n, self.constraints.nrows()).copy_from(&self.rhs);
        rhs
    }

    /// Returns the stacked `(coefficients, multipliers)` solution.
    pub fn solve(&self) -> Option<DVector<f64>> {
        self.kkt_matrix().lu().solve(&self.kkt_rhs())
    }

    /// Max-norm residual of the KKT system at `z`.
    pub fn kkt_residual(&self, z: &DVector<f64>) -> f64 {
        (self.kkt_matrix() * z - self.kkt_rhs()).amax()
    }

    /// `∫ (p^(r))²` over all segments in normalized time.
    pub fn objective(&self, coeffs: &DVector<f64>) -> f64 {
        (coeffs.transpose() * &self.cost * coeffs)[(0, 0)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceTrajectory {
    /// `coeffs[seg][coord]`, ascending powers of normalized segment time.
    coeffs: Vec<[Vec<f64>; 3]>,
    knots: Vec<f64>,
    duration: f64,
}

pub fn coordinate_specs() -> [SplineSpec; 3] {
    [MIN_SNAP, MIN_SNAP, MIN_ACCEL]
}

pub fn fit_spline(walk: &WaypointWalk, duration: f64) -> Result<ReferenceTrajectory, TrajError> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(TrajError::BadDuration(duration));
    }
    let specs = coordinate_specs();
    let mut coeffs: Vec<[Vec<f64>; 3]> = vec![Default::default(); SEGMENTS];
    for (c, spec) in specs.iter().enumerate() {
        let values: Vec<f64> = walk.points.iter().map(|p| p[c]).collect();
        let qp = SplineQp::new(spec, &values);
        let z = qp.solve().ok_or(TrajError::Singular(c))?;
        let n = spec.degree + 1;
        for (seg, seg_coeffs) in coeffs.iter_mut().enumerate() {
            seg_coeffs[c] = z.rows(seg * n, n).iter().copied().collect();
        }
    }
    let h = duration / SEGMENTS as f64;
    let knots = (0..=SEGMENTS).map(|i| i as f64 * h).collect();
    Ok(ReferenceTrajectory {
        coeffs,
        knots,
        duration,
    })
}

/// Random walk followed by a spline fit.
pub fn random_reference(key: PrngKey, bounds: &WalkBounds, duration: f64) -> Result<ReferenceTrajectory, TrajError> {
    fit_spline(&random_walk(key, bounds), duration)
}

impl ReferenceTrajectory {
    /// A trajectory that holds `q` for `duration` seconds.
    pub fn stationary(q: [f64; 3], duration: f64) -> Result<Self, TrajError> {
        fit_spline(&WaypointWalk { points: [q; WAYPOINTS] }, duration)
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn segment_duration(&self) -> f64 {
        self.duration / self.coeffs.len() as f64
    }

    fn locate(&self, t: f64) -> Result<(usize, f64), TrajError> {
        let tol = 1e-9 * self.duration.max(1.0);
        if !(t >= -tol && t <= self.duration + tol) {
            return Err(TrajError::OutOfRange {
                t,
                duration: self.duration,
            });
        }
        let t = t.clamp(0.0, self.duration);
        let h = self.segment_duration();
        let seg = ((t / h).floor() as usize).min(self.coeffs.len() - 1);
        Ok((seg, (t - seg as f64 * h) / h))
    }

    fn eval_in(&self, seg: usize, s: f64, order: usize) -> [f64; 3] {
        let scale = self.segment_duration().powi(order as i32);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let p = &self.coeffs[seg][c];
            let row = basis_row(p.len(), order, s);
            *o = row.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / scale;
        }
        out
    }

    /// Derivative of the given order at `t`.
    pub fn derivative(&self, t: f64, order: usize) -> Result<[f64; 3], TrajError> {
        let (seg, s) = self.locate(t)?;
        Ok(self.eval_in(seg, s, order))
    }

    /// Derivative of the given order at the end of segment `seg` (left
    /// limit) and at the start of segment `seg + 1` (right limit).
    pub fn knot_limits(&self, seg: usize, order: usize) -> ([f64; 3], [f64; 3]) {
        (self.eval_in(seg, 1.0, order), self.eval_in(seg + 1, 0.0, order))
    }

    pub fn evaluate(&self, t: f64) -> Result<RefPoint, TrajError> {
        let (seg, s) = self.locate(t)?;
        Ok(RefPoint {
            q: self.eval_in(seg, s, 0),
            qdot: self.eval_in(seg, s, 1),
            qddot: self.eval_in(seg, s, 2),
        })
    }

    /// Coefficients as a `[segments, 3, 8]` tensor, zero-padded.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.coeffs.len() * 3 * MAX_COEFFS);
        for seg in &self.coeffs {
            for c in seg {
                data.extend_from_slice(c);
                data.extend(std::iter::repeat_n(0.0, MAX_COEFFS - c.len()));
            }
        }
        Tensor::new(vec![self.coeffs.len(), 3, MAX_COEFFS], data).expect("shape")
    }

    pub fn from_tensor(t: &Tensor, duration: f64) -> Result<Self, TrajError> {
        let [segs, 3, MAX_COEFFS] = *t.shape() else {
            return Err(TrajError::Malformed(format!("shape {:?}", t.shape())));
        };
        if segs == 0 || !(duration > 0.0) {
            return Err(TrajError::Malformed("empty trajectory".into()));
        }
        let specs = coordinate_specs();
        let coeffs = (0..segs)
            .map(|s| {
                std::array::from_fn(|c| {
                    let start = (s * 3 + c) * MAX_COEFFS;
                    t.data()[start..start + specs[c].degree + 1].to_vec()
                })
            })
            .collect::<Vec<[Vec<f64>; 3]>>();
        let h = duration / segs as f64;
        Ok(ReferenceTrajectory {
            coeffs,
            knots: (0..=segs).map(|i| i as f64 * h).collect(),
            duration,
        })
    }
}
