//! Conditional affine coupling flows.
//!
//! `forward` runs the normalizing direction (data to latent); a stack's
//! density is the standard normal pulled back through it.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, EitError, Result};
use crate::nnet::{Activation, DenseNet};

/// `y[I₁] = x[I₁]`, `y[I₂] = x[I₂] ⊙ exp(s) + t` with `(s, t) = net(x[I₁], c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    fixed: Vec<usize>,
    moved: Vec<usize>,
    cond_dim: usize,
    net: DenseNet,
}

impl CouplingLayer {
    pub fn new(fixed: Vec<usize>, moved: Vec<usize>, cond_dim: usize, net: DenseNet) -> Result<Self> {
        let n = fixed.len() + moved.len();
        let mut seen = vec![false; n];
        for &i in fixed.iter().chain(&moved) {
            if i >= n || seen[i] {
                return Err(EitError::invalid("coupling partition must split 0..n into two disjoint sets"));
            }
            seen[i] = true;
        }
        if moved.is_empty() {
            return Err(EitError::invalid("coupling layer must transform at least one coordinate"));
        }
        check_len("coupling net input", fixed.len() + cond_dim, net.input_dim())?;
        check_len("coupling net output", 2 * moved.len(), net.output_dim())?;
        Ok(CouplingLayer {
            fixed,
            moved,
            cond_dim,
            net,
        })
    }

    pub fn dim(&self) -> usize {
        self.fixed.len() + self.moved.len()
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    fn scale_shift(&self, x: &[f64], condition: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("flow input", self.dim(), x.len())?;
        check_len("flow condition", self.cond_dim, condition.len())?;
        let mut input: Vec<f64> = self.fixed.iter().map(|&i| x[i]).collect();
        input.extend_from_slice(condition);
        let out = self.net.forward(&input)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(EitError::NonFinite("coupling scale/shift".into()));
        }
        let m = self.moved.len();
        Ok((out[..m].to_vec(), out[m..].to_vec()))
    }
}

/// Returns `(y, log|det ∂y/∂x|)`.
pub fn coupling_forward(layer: &CouplingLayer, x: &[f64], condition: &[f64]) -> Result<(Vec<f64>, f64)> {
    let (s, t) = layer.scale_shift(x, condition)?;
    let mut y = x.to_vec();
    for (k, &i) in layer.moved.iter().enumerate() {
        y[i] = x[i] * s[k].exp() + t[k];
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(EitError::NonFinite("coupling output".into()));
    }
    Ok((y, s.iter().sum()))
}

pub fn coupling_inverse(layer: &CouplingLayer, y: &[f64], condition: &[f64]) -> Result<Vec<f64>> {
    // The fixed block is shared, so s and t can be evaluated on y.
    let (s, t) = layer.scale_shift(y, condition)?;
    let mut x = y.to_vec();
    for (k, &i) in layer.moved.iter().enumerate() {
        x[i] = (y[i] - t[k]) * (-s[k]).exp();
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(EitError::NonFinite("coupling inverse".into()));
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack {
    dim: usize,
    cond_dim: usize,
    layers: Vec<CouplingLayer>,
}

impl FlowStack {
    pub fn new(dim: usize, cond_dim: usize, layers: Vec<CouplingLayer>) -> Result<Self> {
        for l in &layers {
            check_len("coupling dimension", dim, l.dim())?;
            check_len("coupling condition", cond_dim, l.cond_dim())?;
        }
        Ok(FlowStack { dim, cond_dim, layers })
    }

    /// Random stack whose partitions come from a seeded shuffle per layer.
    /// The last layer of each coupling net is scaled down so the maps start
    /// close to the identity.
    pub fn random(dim: usize, cond_dim: usize, n_layers: usize, hidden: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(EitError::invalid("flow dimension must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let mut idx: Vec<usize> = (0..dim).collect();
            idx.shuffle(&mut rng);
            let d = dim / 2;
            let (fixed, moved) = (idx[..d].to_vec(), idx[d..].to_vec());
            let mut net = DenseNet::mlp(
                &[d + cond_dim, hidden, 2 * moved.len()],
                Activation::Tanh,
                seed.wrapping_mul(31).wrapping_add(l as u64),
            )?;
            let last = net.layers_mut().last_mut().expect("two layers");
            last.weights *= 0.5;
            last.bias = last.bias.map(|_| 0.1 * (l as f64 + 1.0).sin());
            layers.push(CouplingLayer::new(fixed, moved, cond_dim, net)?);
        }
        Self::new(dim, cond_dim, layers)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    /// Data to latent, with the log-determinant of that map.
    pub fn forward(&self, x: &[f64], condition: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_len("flow input", self.dim, x.len())?;
        let mut z = x.to_vec();
        let mut logdet = 0.0;
        for l in &self.layers {
            let (y, ld) = coupling_forward(l, &z, condition)?;
            z = y;
            logdet += ld;
        }
        Ok((z, logdet))
    }

    /// Latent to data, with the log-determinant of that map.
    pub fn inverse(&self, z: &[f64], condition: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_len("flow input", self.dim, z.len())?;
        let mut x = z.to_vec();
        let mut logdet = 0.0;
        for l in self.layers.iter().rev() {
            let prev = coupling_inverse(l, &x, condition)?;
            // log|det| of the inverse is minus that of the forward map at prev.
            logdet -= coupling_forward(l, &prev, condition)?.1;
            x = prev;
        }
        Ok((x, logdet))
    }
}

/// Negative log-density of `x` under the flow.
pub fn flow_nll(stack: &FlowStack, x: &[f64], condition: &[f64]) -> Result<f64> {
    let (z, logdet) = stack.forward(x, condition)?;
    let nll = 0.5 * z.iter().map(|v| v * v).sum::<f64>() + 0.5 * stack.dim() as f64 * (2.0 * PI).ln() - logdet;
    if !nll.is_finite() {
        return Err(EitError::NonFinite("flow likelihood".into()));
    }
    Ok(nll)
}

/// Per-pixel mean squared error of `H(v)` against the target images.
pub fn conditioning_loss(h_net: &DenseNet, batch: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(EitError::invalid("empty batch"));
    }
    let mut total = 0.0;
    for (v, target) in batch {
        let out = h_net.forward(v)?;
        check_len("conditioning target", out.len(), target.len())?;
        total += out.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / out.len() as f64;
    }
    Ok(total / batch.len() as f64)
}

/// Mean flow NLL of the targets conditioned on `H(v)`, plus `α` times the
/// conditioning loss.
pub fn cnf_total_loss(stack: &FlowStack, h_net: &DenseNet, batch: &[(Vec<f64>, Vec<f64>)], alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(EitError::invalid("alpha must be nonnegative"));
    }
    check_len("conditioning net output", stack.cond_dim(), h_net.output_dim())?;
    if batch.is_empty() {
        return Err(EitError::invalid("empty batch"));
    }
    let mut nll = 0.0;
    for (v, target) in batch {
        nll += flow_nll(stack, target, &h_net.forward(v)?)?;
    }
    let nll = nll / batch.len() as f64;
    if alpha == 0.0 {
        return Ok(nll);
    }
    Ok(nll + alpha * conditioning_loss(h_net, batch)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;

    use crate::nnet::Layer;

    fn constant_net(inputs: usize, out: Vec<f64>) -> DenseNet {
        DenseNet::new(vec![Layer {
            weights: DMatrix::zeros(out.len(), inputs),
            bias: DVector::from_vec(out),
            activation: Activation::Linear,
        }])
        .unwrap()
    }

    fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        let h = 1e-6;
        let mut j = DMatrix::zeros(n, n);
        for c in 0..n {
            let mut xp = x.to_vec();
            xp[c] += h;
            let mut xm = x.to_vec();
            xm[c] -= h;
            let (fp, fm) = (f(&xp), f(&xm));
            for r in 0..n {
                j[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        j
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
    }

    #[test]
    fn identity_coupling() {
        let layer = CouplingLayer::new(vec![0], vec![1, 2], 1, constant_net(2, vec![0.0; 4])).unwrap();
        let x = [0.3, -1.2, 2.0];
        let (y, ld) = coupling_forward(&layer, &x, &[5.0]).unwrap();
        assert_eq!((y.as_slice(), ld), (&x[..], 0.0));
        assert_eq!(coupling_inverse(&layer, &x, &[5.0]).unwrap(), x);
    }

    #[test]
    fn hand_coupling() {
        let layer = CouplingLayer::new(vec![0], vec![1], 0, constant_net(1, vec![2f64.ln(), 3.0])).unwrap();
        let (y, ld) = coupling_forward(&layer, &[0.5, 1.25], &[]).unwrap();
        assert_eq!(y[0], 0.5);
        assert!((y[1] - 5.5).abs() < 1e-12);
        assert!((ld - 2f64.ln()).abs() < 1e-15);
        let x = coupling_inverse(&layer, &y, &[]).unwrap();
        assert!((x[1] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn partition_validation() {
        assert!(CouplingLayer::new(vec![0], vec![0], 0, constant_net(1, vec![0.0; 2])).is_err());
        assert!(CouplingLayer::new(vec![0], vec![2], 0, constant_net(1, vec![0.0; 2])).is_err());
        assert!(CouplingLayer::new(vec![0], vec![1], 0, constant_net(2, vec![0.0; 2])).is_err());
    }

    #[test]
    fn logdet_matches_numerical_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..10 {
            let stack = FlowStack::random(8, 3, 1, 16, seed).unwrap();
            let layer = &stack.layers()[0];
            let x = random_vec(&mut rng, 8);
            let c = random_vec(&mut rng, 3);
            let j = fd_jacobian(|p| coupling_forward(layer, p, &c).unwrap().0, &x);
            let ld = coupling_forward(layer, &x, &c).unwrap().1;
            assert!((j.determinant().abs().ln() - ld).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_stack_is_standard_normal() {
        let stack = FlowStack::new(3, 0, vec![]).unwrap();
        let c = 1.5 * (2.0 * PI).ln();
        assert!((flow_nll(&stack, &[0.0; 3], &[]).unwrap() - c).abs() < 1e-15);
        assert!((flow_nll(&stack, &[1.0, 2.0, -2.0], &[]).unwrap() - c - 4.5).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_change_of_variables() {
        let stack = FlowStack::random(4, 2, 2, 8, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let x = random_vec(&mut rng, 4);
            let c = random_vec(&mut rng, 2);
            let z = stack.forward(&x, &c).unwrap().0;
            let j = fd_jacobian(|p| stack.forward(p, &c).unwrap().0, &x);
            let want = 0.5 * z.iter().map(|v| v * v).sum::<f64>() + 2.0 * (2.0 * PI).ln() - j.determinant().abs().ln();
            assert!((flow_nll(&stack, &x, &c).unwrap() - want).abs() < 1e-4);
        }
    }

    #[test]
    fn one_dimensional_density_integrates_to_one() {
        for seed in 0..5 {
            let stack = FlowStack::random(1, 2, 3, 4, seed).unwrap();
            let c = [0.4, -0.3];
            // Simpson's rule on [−40, 40].
            let (a, b, n) = (-40.0, 40.0, 20_000);
            let h = (b - a) / n as f64;
            let mut s = 0.0;
            for i in 0..=n {
                let x = a + i as f64 * h;
                let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                s += w * (-flow_nll(&stack, &[x], &c).unwrap()).exp();
            }
            assert!((s * h / 3.0 - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn two_dimensional_density_integrates_to_one() {
        let stack = FlowStack::random(2, 1, 4, 8, 11).unwrap();
        let (a, n) = (12.0, 600);
        let h = 2.0 * a / n as f64;
        let mut s = 0.0;
        for i in 0..n {
            for k in 0..n {
                let x = [-a + (i as f64 + 0.5) * h, -a + (k as f64 + 0.5) * h];
                s += (-flow_nll(&stack, &x, &[0.7]).unwrap()).exp();
            }
        }
        assert!((s * h * h - 1.0).abs() < 1e-3, "{}", s * h * h);
    }

    #[test]
    fn conditioning_and_total_loss() {
        let h_zero = constant_net(3, vec![0.0; 4]);
        let batch = vec![(vec![1.0, 2.0, 3.0], vec![1.0; 4]), (vec![0.0; 3], vec![1.0; 4])];
        assert_eq!(conditioning_loss(&h_zero, &batch).unwrap(), 1.0);
        let h_perfect = constant_net(3, vec![1.0; 4]);
        assert_eq!(conditioning_loss(&h_perfect, &batch).unwrap(), 0.0);

        let stack = FlowStack::random(4, 4, 2, 8, 2).unwrap();
        let nll_mean = |h: &DenseNet| {
            batch.iter().map(|(v, s)| flow_nll(&stack, s, &h.forward(v).unwrap()).unwrap()).sum::<f64>() / 2.0
        };
        assert_eq!(cnf_total_loss(&stack, &h_zero, &batch, 0.0).unwrap(), nll_mean(&h_zero));
        assert!((cnf_total_loss(&stack, &h_perfect, &batch, 3.0).unwrap() - nll_mean(&h_perfect)).abs() < 1e-12);
        let h = DenseNet::mlp(&[3, 5, 4], Activation::Tanh, 9).unwrap();
        let want = nll_mean(&h) + 0.5 * conditioning_loss(&h, &batch).unwrap();
        assert!((cnf_total_loss(&stack, &h, &batch, 0.5).unwrap() - want).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn stack_round_trip(seed in 0u64..100_000, dim in 1usize..=16, cond in 0usize..4, n_layers in 1usize..5) {
            let stack = FlowStack::random(dim, cond, n_layers, 8, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_vec(&mut rng, dim);
            let c = random_vec(&mut rng, cond);
            let (z, ld) = stack.forward(&x, &c).unwrap();
            let (back, ld_inv) = stack.inverse(&z, &c).unwrap();
            for (a, b) in x.iter().zip(&back) {
                proptest::prop_assert!((a - b).abs() < 1e-10);
            }
            proptest::prop_assert!((ld + ld_inv).abs() < 1e-10);
        }
    }
}
