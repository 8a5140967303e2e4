use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{sigmoid, Tape, Var};
use super::NnetError;

/// Feedforward network: SiLU on hidden layers, linear output.
/// Batches are stored column-wise (one sample per column).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

/// Activations retained for the backward pass.
pub struct ForwardCache {
    input: DMatrix<f64>,
    pre: Vec<DMatrix<f64>>,
    post: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.post.last().expect("at least one layer")
    }
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

impl Mlp {
    pub fn zeros(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "need input and output widths");
        Mlp {
            widths: widths.to_vec(),
            weights: widths.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect(),
            biases: widths[1..].iter().map(|&n| DVector::zeros(n)).collect(),
        }
    }

    /// Gaussian init with std `1/sqrt(fan_in)`; the output layer is scaled
    /// by `out_scale`.
    pub fn new(widths: &[usize], seed: u64, out_scale: f64) -> Self {
        let mut net = Self::zeros(widths);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = net.weights.len();
        for (l, w) in net.weights.iter_mut().enumerate() {
            let mut std = 1.0 / (w.ncols() as f64).sqrt();
            if l + 1 == n_layers {
                std *= out_scale;
            }
            let dist = Normal::new(0.0, std).expect("finite std");
            w.iter_mut().for_each(|x| *x = dist.sample(&mut rng));
        }
        net
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Flat parameter vector: per layer, weights (column-major) then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out
    }

    /// Mutable parameter blocks in [`Mlp::params`] order.
    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_mut_slice());
            out.push(b.as_mut_slice());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<(), NnetError> {
        if flat.len() != self.param_count() {
            return Err(NnetError::ShapeMismatch {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.len();
            w.as_mut_slice().copy_from_slice(&flat[k..k + n]);
            k += n;
            let n = b.len();
            b.as_mut_slice().copy_from_slice(&flat[k..k + n]);
            k += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    fn check_input(&self, rows: usize) -> Result<(), NnetError> {
        if rows != self.input_width() {
            return Err(NnetError::ShapeMismatch {
                expected: self.input_width(),
                got: rows,
            });
        }
        Ok(())
    }

    pub fn forward_cached(&self, input: &DMatrix<f64>) -> Result<ForwardCache, NnetError> {
        self.check_input(input.nrows())?;
        let n_layers = self.weights.len();
        let mut pre = Vec::with_capacity(n_layers);
        let mut post: Vec<DMatrix<f64>> = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let x = if l == 0 { input } else { &post[l - 1] };
            let mut z = &self.weights[l] * x;
            for mut col in z.column_iter_mut() {
                col += &self.biases[l];
            }
            let a = if l + 1 < n_layers {
                z.map(|v| v * sigmoid(v))
            } else {
                z.clone()
            };
            pre.push(z);
            post.push(a);
        }
        Ok(ForwardCache {
            input: input.clone(),
            pre,
            post,
        })
    }

    pub fn forward(&self, input: &DMatrix<f64>) -> Result<DMatrix<f64>, NnetError> {
        Ok(self.forward_cached(input)?.post.pop().unwrap())
    }

    pub fn forward_one(&self, input: &[f64]) -> Result<Vec<f64>, NnetError> {
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        Ok(self.forward(&x)?.as_slice().to_vec())
    }

    /// Backpropagates `d_out` (same shape as the output) and returns the
    /// flat parameter gradient together with the input gradient.
    pub fn backward(&self, cache: &ForwardCache, d_out: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let n_layers = self.weights.len();
        assert_eq!(d_out.shape(), cache.output().shape(), "d_out shape");
        let mut grads_w: Vec<DMatrix<f64>> = Vec::with_capacity(n_layers);
        let mut grads_b: Vec<DVector<f64>> = Vec::with_capacity(n_layers);
        let mut delta = d_out.clone();
        for l in (0..n_layers).rev() {
            if l + 1 < n_layers {
                delta.zip_apply(&cache.pre[l], |d, z| *d *= silu_grad(z));
            }
            let x = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            grads_w.push(&delta * x.transpose());
            grads_b.push(delta.column_sum());
            delta = self.weights[l].tr_mul(&delta);
        }
        grads_w.reverse();
        grads_b.reverse();
        let mut flat = Vec::with_capacity(self.param_count());
        for (w, b) in grads_w.iter().zip(&grads_b) {
            flat.extend_from_slice(w.as_slice());
            flat.extend_from_slice(b.as_slice());
        }
        (flat, delta)
    }

    /// Evaluates the network on recorded inputs. Each output becomes a tape
    /// node whose partials are the exact network Jacobian row.
    pub fn on_tape<'t>(&self, tape: &'t Tape, inputs: &[Var<'t>]) -> Result<Vec<Var<'t>>, NnetError> {
        use super::tape::Real;
        let x: Vec<f64> = inputs.iter().map(|v| v.value()).collect();
        let cache = self.forward_cached(&DMatrix::from_column_slice(x.len(), 1, &x))?;
        let out = cache.output().clone();
        let mut result = Vec::with_capacity(out.nrows());
        let mut partials = Vec::with_capacity(inputs.len());
        for k in 0..out.nrows() {
            let mut seed = DMatrix::zeros(out.nrows(), 1);
            seed[(k, 0)] = 1.0;
            let (_, dx) = self.backward(&cache, &seed);
            partials.clear();
            partials.extend(inputs.iter().zip(dx.iter()).map(|(v, d)| (*v, *d)));
            result.push(tape.custom(out[(k, 0)], &partials));
        }
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::tape::finite_difference;

    #[test]
    fn zero_net_gives_zero() {
        let net = Mlp::zeros(&[4, 8, 3]);
        let y = net.forward_one(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(y, vec![0.0; 3]);
    }

    #[test]
    fn identity_linear_passthrough() {
        let mut net = Mlp::zeros(&[3, 3]);
        net.weights[0] = DMatrix::identity(3, 3);
        let x = [0.3, -1.7, 2.5];
        assert_eq!(net.forward_one(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn single_hidden_unit_by_hand() {
        let mut net = Mlp::zeros(&[2, 1, 1]);
        net.weights[0] = DMatrix::from_row_slice(1, 2, &[0.7, -1.3]);
        net.biases[0][0] = 0.2;
        net.weights[1][(0, 0)] = 1.5;
        net.biases[1][0] = -0.4;
        let x = [0.9, 0.35];
        let z: f64 = 0.7 * 0.9 - 1.3 * 0.35 + 0.2;
        let expected = 1.5 * (z / (1.0 + (-z).exp())) - 0.4;
        let y = net.forward_one(&x).unwrap()[0];
        assert!((y - expected).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let net = Mlp::zeros(&[3, 2]);
        assert_eq!(
            net.forward_one(&[1.0]),
            Err(NnetError::ShapeMismatch { expected: 3, got: 1 })
        );
    }

    #[test]
    fn quadratic_loss_on_linear_layer_closed_form() {
        // L = 0.5 |W x + b - y|^2 → dW = r xᵀ, db = r
        let mut net = Mlp::zeros(&[2, 2]);
        net.weights[0] = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 0.25]);
        net.biases[0] = DVector::from_vec(vec![0.1, -0.2]);
        let x = DMatrix::from_column_slice(2, 1, &[0.3, -0.6]);
        let y = DMatrix::from_column_slice(2, 1, &[1.0, 0.5]);
        let cache = net.forward_cached(&x).unwrap();
        let r = cache.output() - &y;
        let (g, dx) = net.backward(&cache, &r);
        let dw = &r * x.transpose();
        let expected: Vec<f64> = dw.as_slice().iter().chain(r.as_slice()).copied().collect();
        for (a, b) in g.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let dx_expected = net.weights[0].transpose() * &r;
        assert!((dx - dx_expected).abs().max() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = Mlp::new(&[5, 7, 6, 3], 3, 1.0);
        let x = DMatrix::from_fn(5, 4, |i, j| ((i * 7 + j * 3) as f64 * 0.37).sin());
        let target = DMatrix::from_fn(3, 4, |i, j| (i as f64 - j as f64) * 0.2);
        let loss = |n: &Mlp, x: &DMatrix<f64>| {
            let y = n.forward(x).unwrap();
            (y - &target).map(|v| v * v).sum()
        };
        let cache = net.forward_cached(&x).unwrap();
        let d_out = (cache.output() - &target) * 2.0;
        let (g, dx) = net.backward(&cache, &d_out);

        let p0 = net.params();
        let fd = finite_difference(
            |p| {
                let mut n = net.clone();
                n.set_params(p).unwrap();
                loss(&n, &x)
            },
            &p0,
            1e-5,
        );
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-3), "{a} vs {b}");
        }
        let fdx = finite_difference(
            |xs| loss(&net, &DMatrix::from_column_slice(5, 4, xs)),
            x.as_slice(),
            1e-5,
        );
        for (a, b) in dx.iter().zip(&fdx) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-3));
        }
    }

    #[test]
    fn on_tape_matches_backward() {
        let net = Mlp::new(&[4, 6, 2], 1, 1.0);
        let tape = Tape::new();
        let xs = tape.vars(&[0.1, -0.4, 0.8, 0.3]);
        let ys = net.on_tape(&tape, &xs).unwrap();
        let loss = ys[0] * ys[1] + ys[0];
        let g = tape.gradient(loss).unwrap().wrt_all(&xs);
        let fd = finite_difference(
            |x| {
                let y = net.forward_one(x).unwrap();
                y[0] * y[1] + y[0]
            },
            &[0.1, -0.4, 0.8, 0.3],
            1e-6,
        );
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn param_round_trip() {
        let net = Mlp::new(&[3, 4, 2], 9, 0.5);
        let mut other = Mlp::zeros(&[3, 4, 2]);
        other.set_params(&net.params()).unwrap();
        assert_eq!(other, net);
    }
}
