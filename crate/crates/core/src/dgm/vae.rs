//! Conditional VAE pieces: reparameterized Gaussian latents, the ELBO
//! terms, and the measurement-to-latent regression used at inference.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, EitError, Result};
use crate::fem::MeasurementVector;
use crate::nnet::{mse_loss_and_grad, DenseNet, Optimizer};

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    mu: Vec<f64>,
    sigma_std: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mu: Vec<f64>, sigma_std: Vec<f64>) -> Result<Self> {
        check_len("latent std", mu.len(), sigma_std.len())?;
        if sigma_std.iter().any(|s| !(*s > 0.0 && s.is_finite())) || mu.iter().any(|m| !m.is_finite()) {
            return Err(EitError::invalid("latent std must be positive and means finite"));
        }
        Ok(DiagonalGaussian { mu, sigma_std })
    }

    pub fn standard(k: usize) -> Self {
        DiagonalGaussian {
            mu: vec![0.0; k],
            sigma_std: vec![1.0; k],
        }
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma_std(&self) -> &[f64] {
        &self.sigma_std
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// `μ + σ ⊙ ε`.
pub fn reparameterize(g: &DiagonalGaussian, eps: &[f64]) -> Result<Vec<f64>> {
    check_len("noise", g.dim(), eps.len())?;
    Ok(g.mu.iter().zip(&g.sigma_std).zip(eps).map(|((m, s), e)| m + s * e).collect())
}

/// `KL(N(μ, diag σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − 2 log σ − 1)`.
pub fn kl_to_standard_normal(g: &DiagonalGaussian) -> f64 {
    0.5 * g
        .mu
        .iter()
        .zip(&g.sigma_std)
        .map(|(m, s)| m * m + s * s - 2.0 * s.ln() - 1.0)
        .sum::<f64>()
}

/// `‖recon − target‖² + KL`.
pub fn vae_loss(recon: &[f64], target: &[f64], g: &DiagonalGaussian) -> Result<f64> {
    check_len("reconstruction", target.len(), recon.len())?;
    let sq: f64 = recon.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(sq + kl_to_standard_normal(g))
}

/// Batch mean of [`vae_loss`].
pub fn vae_batch_loss(recons: &[Vec<f64>], targets: &[Vec<f64>], latents: &[DiagonalGaussian]) -> Result<f64> {
    check_len("batch targets", recons.len(), targets.len())?;
    check_len("batch latents", recons.len(), latents.len())?;
    if recons.is_empty() {
        return Err(EitError::invalid("empty batch"));
    }
    let mut total = 0.0;
    for ((r, t), g) in recons.iter().zip(targets).zip(latents) {
        total += vae_loss(r, t, g)?;
    }
    Ok(total / recons.len() as f64)
}

/// Mean squared distance between predicted and encoded latents.
pub fn fcn_loss(predicted: &[Vec<f64>], encoded: &[Vec<f64>]) -> Result<f64> {
    check_len("latent batch", encoded.len(), predicted.len())?;
    if predicted.is_empty() {
        return Err(EitError::invalid("empty batch"));
    }
    let mut total = 0.0;
    for (p, e) in predicted.iter().zip(encoded) {
        check_len("latent", e.len(), p.len())?;
        total += p.iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total / predicted.len() as f64)
}

/// Inference path: decode the latent predicted from the measurements.
pub fn cvae_reconstruct(v: &MeasurementVector, fcn: &DenseNet, decoder: &DenseNet) -> Result<Vec<f64>> {
    check_len("decoder input", fcn.output_dim(), decoder.input_dim())?;
    decoder.forward(&fcn.forward(v.values())?)
}

/// Encoder `image → (μ, log σ)`, decoder `z → image` and the
/// measurement regressor `v → z`.
#[derive(Debug, Clone)]
pub struct Cvae {
    pub encoder: DenseNet,
    pub decoder: DenseNet,
    pub fcn: DenseNet,
}

impl Cvae {
    pub fn new(encoder: DenseNet, decoder: DenseNet, fcn: DenseNet) -> Result<Self> {
        let k = decoder.input_dim();
        check_len("encoder output", 2 * k, encoder.output_dim())?;
        check_len("decoder output", encoder.input_dim(), decoder.output_dim())?;
        check_len("regressor output", k, fcn.output_dim())?;
        Ok(Cvae { encoder, decoder, fcn })
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.input_dim()
    }

    pub fn encode(&self, image: &[f64]) -> Result<DiagonalGaussian> {
        let out = self.encoder.forward(image)?;
        let k = self.latent_dim();
        DiagonalGaussian::new(out[..k].to_vec(), out[k..].iter().map(|r| r.exp()).collect())
    }

    /// One optimizer step on the batch ELBO (images are columns). Returns the
    /// batch loss before the step.
    pub fn vae_step<R: Rng>(
        &mut self,
        images: &DMatrix<f64>,
        rng: &mut R,
        enc_opt: &mut impl Optimizer,
        dec_opt: &mut impl Optimizer,
    ) -> Result<f64> {
        let k = self.latent_dim();
        let n = images.ncols();
        let nf = n as f64;
        let enc_trace = self.encoder.forward_trace(images)?;
        let stats = enc_trace.output().clone();
        let eps = DMatrix::from_fn(k, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sigma = stats.rows(k, k).map(f64::exp);
        let mu = stats.rows(0, k).into_owned();
        let z = &mu + sigma.component_mul(&eps);

        let dec_trace = self.decoder.forward_trace(&z)?;
        let diff = dec_trace.output() - images;
        let kl: f64 = (0..n)
            .map(|c| {
                (0..k)
                    .map(|j| {
                        let (m, s) = (mu[(j, c)], sigma[(j, c)]);
                        0.5 * (m * m + s * s - 2.0 * s.ln() - 1.0)
                    })
                    .sum::<f64>()
            })
            .sum();
        let loss = (diff.norm_squared() + kl) / nf;
        if !loss.is_finite() {
            return Err(EitError::NonFinite("VAE loss".into()));
        }

        let (dec_grads, dz) = self.decoder.backward_trace(&dec_trace, &(diff * (2.0 / nf)))?;
        let mut dstats = DMatrix::zeros(2 * k, n);
        for c in 0..n {
            for j in 0..k {
                let (m, s) = (mu[(j, c)], sigma[(j, c)]);
                dstats[(j, c)] = dz[(j, c)] + m / nf;
                dstats[(k + j, c)] = dz[(j, c)] * eps[(j, c)] * s + (s * s - 1.0) / nf;
            }
        }
        let (enc_grads, _) = self.encoder.backward_trace(&enc_trace, &dstats)?;
        dec_opt.step(&mut self.decoder, &dec_grads)?;
        enc_opt.step(&mut self.encoder, &enc_grads)?;
        Ok(loss)
    }

    /// One step of the `v → μ(image)` regression. Returns the loss before the step.
    pub fn fcn_step(&mut self, measurements: &DMatrix<f64>, images: &DMatrix<f64>, opt: &mut impl Optimizer) -> Result<f64> {
        let k = self.latent_dim();
        let targets = self.encoder.forward_batch(images)?.rows(0, k).into_owned();
        let (loss, g) = mse_loss_and_grad(&self.fcn, measurements, &targets)?;
        opt.step(&mut self.fcn, &g)?;
        Ok(loss)
    }

    pub fn reconstruct(&self, v: &MeasurementVector) -> Result<Vec<f64>> {
        cvae_reconstruct(v, &self.fcn, &self.decoder)
    }
}
