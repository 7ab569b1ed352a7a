//! Fully connected tanh networks with hand-written reverse mode, and Adam.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;

use crate::linalg::fast_exp;
use crate::rng::Rng;

/// `tanh` through a single vectorizable `exp`, within a few ulps of libm in
/// absolute terms.
#[inline]
pub fn tanh(x: f64) -> f64 {
    1.0 - 2.0 / (fast_exp(2.0 * x) + 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `inputs × outputs`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Tanh on every hidden layer, identity on the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Layer inputs recorded by [`Mlp::forward_tape`].
pub struct Tape {
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. `sizes` lists every layer width
    /// including input and output.
    pub fn new(sizes: &[usize], rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "need at least an input and an output layer");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Dense {
                    weights: Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-limit..limit)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Self {
        Mlp { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].weights.nrows()];
        s.extend(self.layers.iter().map(|l| l.weights.ncols()));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weights.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flat parameter vector: per layer, weights row-major then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut at = 0;
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = flat[at];
                at += 1;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            a = a.dot(&l.weights) + &l.bias;
            if i + 1 < self.layers.len() {
                a.mapv_inplace(tanh);
            }
        }
        a
    }

    /// Activations feeding the output layer.
    pub fn forward_hidden(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        for l in &self.layers[..self.layers.len() - 1] {
            a = a.dot(&l.weights) + &l.bias;
            a.mapv_inplace(tanh);
        }
        a
    }

    pub fn forward_tape(&self, x: ArrayView2<f64>) -> (Array2<f64>, Tape) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let next = a.dot(&l.weights) + &l.bias;
            inputs.push(a);
            a = next;
            if i + 1 < self.layers.len() {
                a.mapv_inplace(tanh);
            }
        }
        (a, Tape { inputs })
    }

    /// Gradient of `sum(grad_out ⊙ output)` with respect to the flat
    /// parameter vector.
    pub fn backward(&self, tape: &Tape, grad_out: Array2<f64>) -> Vec<f64> {
        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_out;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let input = &tape.inputs[i];
            grads.push((input.t().dot(&delta), delta.sum_axis(Axis(0))));
            if i > 0 {
                let mut back = delta.dot(&l.weights.t());
                back.zip_mut_with(input, |d, a| *d *= 1.0 - a * a);
                delta = back;
            }
        }
        let mut flat = Vec::with_capacity(self.n_params());
        for (gw, gb) in grads.iter().rev() {
            flat.extend(gw.iter());
            flat.extend(gb.iter());
        }
        flat
    }

    /// Single-input forward pass without ndarray temporaries.
    pub fn forward_one(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for (li, l) in self.layers.iter().enumerate() {
            let mut out = l.bias.to_vec();
            let w = l.weights.as_slice().expect("standard layout");
            let cols = out.len();
            for (i, ai) in a.iter().enumerate() {
                let row = &w[i * cols..(i + 1) * cols];
                for (o, wij) in out.iter_mut().zip(row) {
                    *o += ai * wij;
                }
            }
            if li + 1 < self.layers.len() {
                out.iter_mut().for_each(|v| *v = tanh(*v));
            }
            a = out;
        }
        a
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Per-column mean and standard deviation, with unit scale substituted for
/// constant columns.
pub fn column_moments(data: ArrayView2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = data.nrows().max(1) as f64;
    let mean: Vec<f64> = data.axis_iter(Axis(1)).map(|c| c.sum() / n).collect();
    let scale = data
        .axis_iter(Axis(1))
        .zip(&mean)
        .map(|(c, m)| {
            let s = (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
            if s > 1e-12 * m.abs().max(1.0) && s.is_finite() {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_matches_libm() {
        for i in -4000..=4000 {
            let x = i as f64 * 0.005;
            assert!((tanh(x) - x.tanh()).abs() < 4e-16, "{x}");
        }
        assert_eq!(tanh(800.0), 1.0);
        assert_eq!(tanh(-800.0), -1.0);
    }
    use crate::rng::rng_from_seed;
    use ndarray::array;

    fn loss(net: &Mlp, x: &Array2<f64>, target: &Array2<f64>) -> f64 {
        let y = net.forward(x.view());
        0.5 * (&y - target).mapv(|v| v * v).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rng_from_seed(3);
        let net = Mlp::new(&[3, 5, 4, 2], &mut rng);
        let x = array![[0.3, -1.0, 0.7], [1.2, 0.1, -0.4]];
        let target = array![[0.5, -0.2], [0.0, 1.0]];
        let (y, tape) = net.forward_tape(x.view());
        let grad = net.backward(&tape, &y - &target);
        let p0 = net.params();
        let h = 1e-6;
        for i in 0..p0.len() {
            let mut plus = net.clone();
            let mut p = p0.clone();
            p[i] += h;
            plus.set_params(&p);
            let mut minus = net.clone();
            p[i] -= 2.0 * h;
            minus.set_params(&p);
            let fd = (loss(&plus, &x, &target) - loss(&minus, &x, &target)) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn single_and_batch_forward_agree() {
        let mut rng = rng_from_seed(5);
        let net = Mlp::new(&[2, 8, 3], &mut rng);
        let x = array![[0.1, 0.2], [-3.0, 4.0]];
        let batch = net.forward(x.view());
        for (r, row) in x.rows().into_iter().enumerate() {
            let one = net.forward_one(row.as_slice().unwrap());
            for (a, b) in one.iter().zip(batch.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn params_roundtrip() {
        let mut rng = rng_from_seed(1);
        let net = Mlp::new(&[4, 6, 1], &mut rng);
        let mut other = Mlp::new(&[4, 6, 1], &mut rng);
        assert_ne!(net, other);
        other.set_params(&net.params());
        assert_eq!(net, other);
        assert_eq!(net.n_params(), 4 * 6 + 6 + 6 + 1);
        assert_eq!(net.sizes(), vec![4, 6, 1]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-3), "{p:?}");
    }

    #[test]
    fn moments_with_constant_column() {
        let d = array![[1.0, 5.0], [3.0, 5.0]];
        let (m, s) = column_moments(d.view());
        assert_eq!(m, vec![2.0, 5.0]);
        assert_eq!(s, vec![1.0, 1.0]);
    }
}
