//! Small fully-connected tanh networks shared by the feature network and the
//! ensemble dynamics models.

use rand::Rng;

use crate::autodiff::{Graph, Tensor};
use crate::prng::PrngKey;

/// Scales applied to `(x, y, φ, ẋ, ẏ, φ̇)` before the first layer.
pub const STATE_INPUT_SCALE: [f64; 6] = [0.1, 0.1, 1.0 / std::f64::consts::PI, 0.2, 0.2, 0.2];

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    /// `(weight [out, in], bias [out])` per layer.
    pub layers: Vec<(Tensor, Tensor)>,
    /// Whether the last layer is followed by `tanh`.
    pub activate_last: bool,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn glorot(sizes: &[usize], activate_last: bool, key: PrngKey) -> Mlp {
        let mut rng = key.stream();
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
                (
                    Tensor::matrix(fan_out, fan_in, data).expect("sizes"),
                    Tensor::zeros(&[fan_out]),
                )
            })
            .collect();
        Mlp { layers, activate_last }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").0.shape()[0]
    }

    /// Parameters in layer order: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|(w, b)| [w.clone(), b.clone()]).collect()
    }

    pub fn set_params(&mut self, params: &[Tensor]) {
        assert_eq!(params.len(), 2 * self.layers.len());
        for (layer, p) in self.layers.iter_mut().zip(params.chunks(2)) {
            assert_eq!(layer.0.shape(), p[0].shape());
            assert_eq!(layer.1.shape(), p[1].shape());
            layer.0 = p[0].clone();
            layer.1 = p[1].clone();
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|(w, b)| w.squared_norm() + b.squared_norm())
            .sum()
    }

    /// Places the parameters on `g` via `place` (constant or input leaf).
    pub fn place<G: Graph>(&self, g: &mut G, mut place: impl FnMut(&mut G, Tensor) -> G::Node) -> MlpNodes<G::Node> {
        MlpNodes {
            layers: self
                .layers
                .iter()
                .map(|(w, b)| (place(g, w.clone()), place(g, b.clone())))
                .collect(),
            activate_last: self.activate_last,
        }
    }

    /// Plain evaluation on a single input vector.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let n = self.layers.len();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            let mut next = b.data().to_vec();
            for r in 0..rows {
                next[r] += w.data()[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&h)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
            if i + 1 < n || self.activate_last {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = next;
        }
        h
    }
}

/// Network parameters living on a graph.
#[derive(Clone, Debug)]
pub struct MlpNodes<N> {
    pub layers: Vec<(N, N)>,
    pub activate_last: bool,
}

impl<N: Clone> MlpNodes<N> {
    /// Forward pass on a single vector `[in]`.
    pub fn forward<G: Graph<Node = N>>(&self, g: &mut G, x: &N) -> N {
        let n = self.layers.len();
        let mut h = x.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = g.affine(w, &h, b);
            if i + 1 < n || self.activate_last {
                h = g.tanh(&h);
            }
        }
        h
    }

    /// Forward pass on a batch `[batch, in]`.
    pub fn forward_batch<G: Graph<Node = N>>(&self, g: &mut G, x: &N) -> N {
        let n = self.layers.len();
        let mut h = x.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let wt = g.transpose(w);
            let z = g.matmul(&h, &wt);
            h = g.add_row(&z, b);
            if i + 1 < n || self.activate_last {
                h = g.tanh(&h);
            }
        }
        h
    }

    pub fn nodes(&self) -> Vec<N> {
        self.layers.iter().flat_map(|(w, b)| [w.clone(), b.clone()]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eager;

    #[test]
    fn graph_forward_matches_plain_eval() {
        let mlp = Mlp::glorot(&[6, 32, 32, 3], false, PrngKey::from_seed(1));
        let x = [0.3, -0.2, 0.1, 1.0, -0.5, 0.25];
        let mut g = Eager;
        let nodes = mlp.place(&mut g, |_, t| t);
        let single = nodes.forward(&mut g, &Tensor::from(x));
        let plain = mlp.eval(&x);
        for (a, b) in single.data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-14);
        }
        let batch = Tensor::matrix(2, 6, [x, x].concat()).unwrap();
        let out = nodes.forward_batch(&mut g, &batch);
        assert_eq!(out.shape(), &[2, 3]);
        for r in 0..2 {
            for c in 0..3 {
                assert!((out.at(r, c) - plain[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let mlp = Mlp::glorot(&[6, 32], true, PrngKey::from_seed(2));
        let limit = (6.0f64 / 38.0).sqrt();
        assert!(mlp.layers[0].0.data().iter().all(|w| w.abs() <= limit));
        assert!(mlp.layers[0].1.data().iter().all(|&b| b == 0.0));
    }
}
