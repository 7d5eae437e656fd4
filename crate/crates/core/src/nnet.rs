//! Small dense networks with hand-written backpropagation.
//!
//! Batched calls take one sample per column.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, EitError, Result};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
const CHECKPOINT_MAGIC: &[u8; 4] = b"EITN";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Linear),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Tanh),
            _ => Err(EitError::Format(format!("unknown activation code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

/// Parameter gradients with the same shapes as a [`DenseNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl GradientSet {
    pub fn zeros_like(net: &DenseNet) -> Self {
        GradientSet {
            weights: net.layers.iter().map(|l| DMatrix::zeros(l.weights.nrows(), l.weights.ncols())).collect(),
            biases: net.layers.iter().map(|l| DVector::zeros(l.bias.len())).collect(),
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.weights.iter_mut().for_each(|w| *w *= k);
        self.biases.iter_mut().for_each(|b| *b *= k);
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    fn congruent(&self, net: &DenseNet) -> bool {
        self.weights.len() == net.layers.len()
            && self.biases.len() == net.layers.len()
            && net.layers.iter().zip(&self.weights).all(|(l, w)| l.weights.shape() == w.shape())
            && net.layers.iter().zip(&self.biases).all(|(l, b)| l.bias.len() == b.len())
    }
}

/// Intermediate values of a batched forward pass.
pub struct ForwardTrace {
    /// Layer inputs; `inputs[0]` is the network input.
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &DMatrix<f64> {
        self.inputs.last().expect("trace holds the input")
    }
}

impl DenseNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(EitError::invalid("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            check_len("layer bias", l.weights.nrows(), l.bias.len())?;
            if i > 0 {
                check_len("layer chain", layers[i - 1].weights.nrows(), l.weights.ncols())?;
            }
            if l.weights.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(EitError::NonFinite("network parameters".into()));
            }
        }
        Ok(DenseNet { layers })
    }

    /// Glorot-uniform weights and zero biases. `dims` lists every layer
    /// width including input and output.
    pub fn random(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(EitError::invalid("need one activation per layer and at least two widths"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let a = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Layer {
                    weights: DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-a..a)),
                    bias: DVector::zeros(w[1]),
                    activation,
                }
            })
            .collect();
        Self::new(layers)
    }

    /// Hidden layers share one activation; the output layer is linear.
    pub fn mlp(dims: &[usize], hidden: Activation, seed: u64) -> Result<Self> {
        let n = dims.len().saturating_sub(1);
        let acts: Vec<Activation> = (0..n).map(|i| if i + 1 == n { Activation::Linear } else { hidden }).collect();
        Self::random(dims, &acts, seed)
    }

    pub fn identity(n: usize) -> Self {
        DenseNet {
            layers: vec![Layer {
                weights: DMatrix::identity(n, n),
                bias: DVector::zeros(n),
                activation: Activation::Linear,
            }],
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.nrows())
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_len("parameter vector", self.n_params(), p.len())?;
        let mut k = 0;
        for l in &mut self.layers {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *v = p[k];
                k += 1;
            }
        }
        Ok(())
    }

    pub fn forward_trace(&self, x: &DMatrix<f64>) -> Result<ForwardTrace> {
        check_len("network input", self.input_dim(), x.nrows())?;
        let mut inputs = vec![x.clone()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let mut z = &l.weights * inputs.last().expect("non-empty");
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            let a = z.map(|v| l.activation.apply(v));
            pre.push(z);
            inputs.push(a);
        }
        Ok(ForwardTrace { inputs, pre })
    }

    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_trace(x)?.inputs.pop().expect("non-empty"))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let out = self.forward_batch(&DMatrix::from_column_slice(x.len(), 1, x))?;
        Ok(out.as_slice().to_vec())
    }

    /// Reverse pass for a recorded batch. Parameter gradients are summed over
    /// the batch; the input gradient keeps one column per sample.
    pub fn backward_trace(&self, trace: &ForwardTrace, upstream: &DMatrix<f64>) -> Result<(GradientSet, DMatrix<f64>)> {
        let out = trace.output();
        if upstream.shape() != out.shape() {
            return Err(EitError::DimensionMismatch {
                context: "upstream gradient",
                expected: out.len(),
                found: upstream.len(),
            });
        }
        let mut g = GradientSet::zeros_like(self);
        let mut delta = upstream.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let z = &trace.pre[i];
            let a = &trace.inputs[i + 1];
            delta.zip_zip_apply(z, a, |d, zv, av| *d *= l.activation.derivative(zv, av));
            g.weights[i] = &delta * trace.inputs[i].transpose();
            g.biases[i] = delta.column_sum();
            delta = l.weights.transpose() * &delta;
        }
        Ok((g, delta))
    }

    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(GradientSet, Vec<f64>)> {
        let trace = self.forward_trace(&DMatrix::from_column_slice(x.len(), 1, x))?;
        check_len("upstream gradient", self.output_dim(), upstream.len())?;
        let (g, dx) = self.backward_trace(&trace, &DMatrix::from_column_slice(upstream.len(), 1, upstream))?;
        Ok((g, dx.as_slice().to_vec()))
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.weights.ncols() as u32).to_le_bytes())?;
            w.write_all(&(l.weights.nrows() as u32).to_le_bytes())?;
            w.write_all(&[l.activation.code()])?;
            // Row-major weights, then bias.
            for r in 0..l.weights.nrows() {
                for c in 0..l.weights.ncols() {
                    w.write_all(&l.weights[(r, c)].to_le_bytes())?;
                }
            }
            for b in l.bias.iter() {
                w.write_all(&b.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(EitError::Format("not a network checkpoint".into()));
        }
        let n = read_u32(&mut r)? as usize;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let cols = read_u32(&mut r)? as usize;
            let rows = read_u32(&mut r)? as usize;
            let mut code = [0u8; 1];
            r.read_exact(&mut code)?;
            let activation = Activation::from_code(code[0])?;
            let w = read_f64s(&mut r, rows * cols)?;
            let bias = DVector::from_vec(read_f64s(&mut r, rows)?);
            layers.push(Layer {
                weights: DMatrix::from_row_slice(rows, cols, &w),
                bias,
                activation,
            });
        }
        Self::new(layers)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; 8 * n];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub trait Optimizer {
    fn step(&mut self, net: &mut DenseNet, grads: &GradientSet) -> Result<()>;
    fn learning_rate(&self) -> f64;
    fn set_learning_rate(&mut self, lr: f64);
}

fn check_grads(net: &DenseNet, grads: &GradientSet) -> Result<()> {
    if !grads.congruent(net) {
        return Err(EitError::invalid("gradient shapes do not match the network"));
    }
    if !grads.is_finite() {
        return Err(EitError::NonFinite("gradient".into()));
    }
    Ok(())
}

/// Gradient descent with heavy-ball momentum: `v ← μv + g`, `θ ← θ − ηv`.
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Option<GradientSet>,
}

impl Default for MomentumSgd {
    fn default() -> Self {
        Self::new(DEFAULT_LEARNING_RATE, DEFAULT_MOMENTUM)
    }
}

impl MomentumSgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        MomentumSgd {
            learning_rate,
            momentum,
            velocity: None,
        }
    }
}

impl Optimizer for MomentumSgd {
    fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    fn step(&mut self, net: &mut DenseNet, grads: &GradientSet) -> Result<()> {
        check_grads(net, grads)?;
        let v = self.velocity.get_or_insert_with(|| GradientSet::zeros_like(net));
        v.scale(self.momentum);
        v.add_assign(grads);
        for (l, (w, b)) in net.layers.iter_mut().zip(v.weights.iter().zip(&v.biases)) {
            l.weights -= w * self.learning_rate;
            l.bias -= b * self.learning_rate;
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Option<GradientSet>,
    v: Option<GradientSet>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: None,
            v: None,
        }
    }
}

impl Optimizer for Adam {
    fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    fn step(&mut self, net: &mut DenseNet, grads: &GradientSet) -> Result<()> {
        check_grads(net, grads)?;
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let m = self.m.get_or_insert_with(|| GradientSet::zeros_like(net));
        let v = self.v.get_or_insert_with(|| GradientSet::zeros_like(net));
        let (lr, eps) = (self.learning_rate, self.eps);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (i, l) in net.layers.iter_mut().enumerate() {
            for (k, p) in l.weights.iter_mut().enumerate() {
                update(p, grads.weights[i][k], &mut m.weights[i][k], &mut v.weights[i][k]);
            }
            for (k, p) in l.bias.iter_mut().enumerate() {
                update(p, grads.biases[i][k], &mut m.biases[i][k], &mut v.biases[i][k]);
            }
        }
        Ok(())
    }
}

/// Mean squared regression loss `(1/N) Σ ‖net(xᵢ) − yᵢ‖²` and its gradient.
pub fn mse_loss_and_grad(net: &DenseNet, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(f64, GradientSet)> {
    let trace = net.forward_trace(x)?;
    let out = trace.output();
    if out.shape() != y.shape() {
        return Err(EitError::DimensionMismatch {
            context: "regression targets",
            expected: out.len(),
            found: y.len(),
        });
    }
    let n = x.ncols() as f64;
    let diff = out - y;
    let loss = diff.norm_squared() / n;
    let (g, _) = net.backward_trace(&trace, &(diff * (2.0 / n)))?;
    Ok((loss, g))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(net: &DenseNet, x: &[f64], up: &[f64]) {
        let (g, dx) = net.backward(x, up).unwrap();
        let f = |n: &DenseNet, x: &[f64]| -> f64 {
            n.forward(x).unwrap().iter().zip(up).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        let analytic = g.flatten();
        let p0 = net.params();
        let mut probe = net.clone();
        for k in 0..p0.len() {
            let mut p = p0.clone();
            p[k] += h;
            probe.set_params(&p).unwrap();
            let fp = f(&probe, x);
            p[k] -= 2.0 * h;
            probe.set_params(&p).unwrap();
            let fm = f(&probe, x);
            let num = (fp - fm) / (2.0 * h);
            let tol = 1e-5 * num.abs().max(analytic[k].abs()).max(1e-3);
            assert!((num - analytic[k]).abs() <= tol, "param {k}: {num} vs {}", analytic[k]);
        }
        for k in 0..x.len() {
            let mut xp = x.to_vec();
            xp[k] += h;
            let mut xm = x.to_vec();
            xm[k] -= h;
            let num = (f(net, &xp) - f(net, &xm)) / (2.0 * h);
            assert!((num - dx[k]).abs() <= 1e-5 * num.abs().max(1e-3));
        }
    }

    #[test]
    fn identity_and_relu() {
        let id = DenseNet::identity(3);
        assert_eq!(id.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![1.0, -2.0, 3.0]);
        let relu = DenseNet::new(vec![Layer {
            weights: DMatrix::identity(2, 2),
            bias: DVector::zeros(2),
            activation: Activation::Relu,
        }])
        .unwrap();
        assert_eq!(relu.forward(&[-1.0, -0.5]).unwrap(), vec![0.0, 0.0]);
        assert!(id.forward(&[1.0]).is_err());
    }

    #[test]
    fn two_layer_tanh_by_hand() {
        let net = DenseNet::new(vec![
            Layer {
                weights: DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 2.0, 0.25]),
                bias: DVector::from_vec(vec![0.1, -0.2]),
                activation: Activation::Tanh,
            },
            Layer {
                weights: DMatrix::from_row_slice(1, 2, &[1.5, -0.5]),
                bias: DVector::from_vec(vec![0.3]),
                activation: Activation::Tanh,
            },
        ])
        .unwrap();
        let (x0, x1) = (0.7, -0.4);
        let h0 = (0.5 * x0 - 1.0 * x1 + 0.1f64).tanh();
        let h1 = (2.0 * x0 + 0.25 * x1 - 0.2f64).tanh();
        let y = (1.5 * h0 - 0.5 * h1 + 0.3f64).tanh();
        assert!((net.forward(&[x0, x1]).unwrap()[0] - y).abs() < 1e-12);
    }

    #[test]
    fn backward_special_cases() {
        let net = DenseNet::random(&[3, 4, 2], &[Activation::Tanh, Activation::Linear], 1).unwrap();
        let (g, dx) = net.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));

        let lin = DenseNet::random(&[3, 2], &[Activation::Linear], 2).unwrap();
        let x = [1.0, -2.0, 0.5];
        let up = [0.3, -0.7];
        let (g, _) = lin.backward(&x, &up).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(g.weights[0][(r, c)], up[r] * x[c]);
            }
        }
        assert_eq!(g.biases[0].as_slice(), &up);
    }

    #[test]
    fn batch_matches_single() {
        let net = DenseNet::mlp(&[3, 5, 2], Activation::Relu, 4).unwrap();
        let x = DMatrix::from_column_slice(3, 2, &[0.1, 0.2, 0.3, -0.5, 0.4, 1.0]);
        let up = DMatrix::from_column_slice(2, 2, &[1.0, 0.5, -0.3, 0.2]);
        let trace = net.forward_trace(&x).unwrap();
        let (g, _) = net.backward_trace(&trace, &up).unwrap();
        let (mut g0, _) = net.backward(&[0.1, 0.2, 0.3], &[1.0, 0.5]).unwrap();
        let (g1, _) = net.backward(&[-0.5, 0.4, 1.0], &[-0.3, 0.2]).unwrap();
        g0.add_assign(&g1);
        for (a, b) in g.flatten().iter().zip(g0.flatten()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn optimizer_cases() {
        let mut net = DenseNet::random(&[2, 2], &[Activation::Linear], 3).unwrap();
        let before = net.clone();
        let mut opt = MomentumSgd::default();
        opt.step(&mut net, &GradientSet::zeros_like(&before)).unwrap();
        assert_eq!(net, before);

        let mut bad = GradientSet::zeros_like(&net);
        bad.biases[0][0] = f64::NAN;
        assert!(opt.step(&mut net, &bad).is_err());
    }

    #[test]
    fn momentum_minimizes_quadratic() {
        // Loss 50 (θ − 3)², curvature 100; defaults give a contraction of √0.9 per step.
        let run = || {
            let mut net = DenseNet::new(vec![Layer {
                weights: DMatrix::zeros(1, 0),
                bias: DVector::from_vec(vec![0.0]),
                activation: Activation::Linear,
            }])
            .unwrap();
            let mut opt = MomentumSgd::default();
            for _ in 0..200 {
                let theta = net.layers()[0].bias[0];
                let mut g = GradientSet::zeros_like(&net);
                g.biases[0][0] = 100.0 * (theta - 3.0);
                opt.step(&mut net, &g).unwrap();
            }
            net
        };
        let a = run();
        assert!((a.layers()[0].bias[0] - 3.0).abs() < 1e-3);
        let b = run();
        assert_eq!(a.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn regression_recovers_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = DMatrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
        let x = DMatrix::from_fn(5, 500, |_, _| rng.random_range(-1.0..1.0));
        let y = &a * &x;
        let mut net = DenseNet::random(&[5, 3], &[Activation::Linear], 9).unwrap();
        let mut opt = MomentumSgd::new(0.05, 0.9);
        let (first, _) = mse_loss_and_grad(&net, &x, &y).unwrap();
        let mut last = first;
        for _ in 0..600 {
            let (l, g) = mse_loss_and_grad(&net, &x, &y).unwrap();
            last = l;
            opt.step(&mut net, &g).unwrap();
        }
        assert!(last < 1e-4 * first, "{last} vs {first}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = DenseNet::mlp(&[4, 6, 3], Activation::Tanh, 5).unwrap();
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        assert_eq!(DenseNet::read_checkpoint(&buf[..]).unwrap(), net);
        assert!(DenseNet::read_checkpoint(&b"XXXX"[..]).is_err());
    }

    #[test]
    fn adam_reduces_loss() {
        let net0 = DenseNet::mlp(&[2, 8, 1], Activation::Tanh, 6).unwrap();
        let x = DMatrix::from_fn(2, 64, |r, c| ((r * 64 + c) as f64 * 0.37).sin());
        let y = DMatrix::from_fn(1, 64, |_, c| x[(0, c)] * x[(1, c)]);
        let mut net = net0.clone();
        let mut opt = Adam::new(1e-2);
        let (first, _) = mse_loss_and_grad(&net, &x, &y).unwrap();
        for _ in 0..300 {
            let (_, g) = mse_loss_and_grad(&net, &x, &y).unwrap();
            opt.step(&mut net, &g).unwrap();
        }
        assert!(mse_loss_and_grad(&net, &x, &y).unwrap().0 < 0.1 * first);
    }

    proptest::proptest! {
        #[test]
        fn gradients_match_finite_differences(
            seed in 0u64..10_000,
            n_layers in 1usize..=3,
            widths in proptest::collection::vec(1usize..=16, 4),
            acts in proptest::collection::vec(0u8..3, 3),
        ) {
            let dims = &widths[..=n_layers];
            let acts: Vec<Activation> = acts[..n_layers].iter().map(|&c| Activation::from_code(c).unwrap()).collect();
            let mut net = DenseNet::random(dims, &acts, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            // Nonzero biases keep ReLU pre-activations off the kink at 0.
            for l in net.layers_mut() {
                l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
            }
            let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
            let up: Vec<f64> = (0..dims[n_layers]).map(|_| rng.random_range(-1.0..1.0)).collect();
            fd_check(&net, &x, &up);
        }
    }
}
