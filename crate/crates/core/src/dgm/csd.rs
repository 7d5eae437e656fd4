//! CSD*: reverse diffusion started from a Gauss-Newton reconstruction
//! partway down the time grid.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::sde::{reverse_diffusion, CorrectorConfig, SamplerStats, ScoreFunction, SdeSchedule};
use crate::dataset::ForwardModel;
use crate::error::{EitError, Result};
use crate::fem::MeasurementVector;
use crate::inverse::{reconstruct, InverseConfig};
use crate::raster::{rasterize_default, PixelImage};

/// `k_prime` is the number of reverse steps run, out of the schedule's `K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsdStarConfig {
    pub k_prime: usize,
    pub corrector: CorrectorConfig,
}

impl CsdStarConfig {
    pub fn new(k_prime: usize) -> Self {
        CsdStarConfig {
            k_prime,
            corrector: CorrectorConfig::default(),
        }
    }

    fn validate(&self, schedule: &SdeSchedule) -> Result<()> {
        if self.k_prime > schedule.steps() {
            return Err(EitError::invalid(format!(
                "k_prime {} exceeds the {} steps of the schedule",
                self.k_prime,
                schedule.steps()
            )));
        }
        Ok(())
    }
}

/// Run steps `K′−1, …, 0` with each column of `start` as the state at
/// `t = K′/K`.
pub fn csd_star_sample_batch<S: ScoreFunction + ?Sized>(
    score: &S,
    schedule: &SdeSchedule,
    config: &CsdStarConfig,
    start: DMatrix<f64>,
    seed: u64,
) -> Result<(DMatrix<f64>, SamplerStats)> {
    config.validate(schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    reverse_diffusion(score, schedule, start, config.k_prime, config.corrector, &mut rng)
}

pub fn csd_star_sample<S: ScoreFunction + ?Sized>(
    score: &S,
    schedule: &SdeSchedule,
    config: &CsdStarConfig,
    sigma_gn: &[f64],
    seed: u64,
) -> Result<Vec<f64>> {
    let start = DMatrix::from_column_slice(sigma_gn.len(), 1, sigma_gn);
    Ok(csd_star_sample_batch(score, schedule, config, start, seed)?.0.as_slice().to_vec())
}

/// Mesh, image grid and out-of-disk value for the pipeline.
#[derive(Debug, Clone, Copy)]
pub struct PipelineContext<'a> {
    pub model: &'a ForwardModel,
    pub side: usize,
    pub background: f64,
}

#[derive(Debug, Clone)]
pub struct CsdStarOutput {
    /// Rasterized Gauss-Newton reconstruction fed to the sampler.
    pub gn_image: PixelImage,
    pub image: PixelImage,
    pub gn_trace: Vec<f64>,
}

/// Gauss-Newton reconstruction, rasterization, then CSD* on the image.
pub fn csd_star_pipeline<S: ScoreFunction + ?Sized>(
    v: &MeasurementVector,
    ctx: PipelineContext<'_>,
    inverse: &InverseConfig,
    score: &S,
    schedule: &SdeSchedule,
    config: &CsdStarConfig,
    seed: u64,
) -> Result<CsdStarOutput> {
    let model = ctx.model;
    let gn = reconstruct(v, &model.mesh, &model.impedances, &model.protocol, inverse)
        .map_err(|e| e.in_stage("gauss-newton"))?;
    let gn_image =
        rasterize_default(&model.mesh, &gn.sigma, ctx.side, ctx.background).map_err(|e| e.in_stage("rasterize"))?;
    let out = csd_star_sample(score, schedule, config, gn_image.values(), seed).map_err(|e| e.in_stage("sampling"))?;
    let image = PixelImage::new(ctx.side, out).map_err(|e| e.in_stage("sampling"))?;
    Ok(CsdStarOutput {
        gn_image,
        image,
        gn_trace: gn.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgm::sde::{pc_sample_batch, AnalyticGaussianScore};
    use crate::fem::{build_adjacent_protocol, default_impedances, solve_forward};
    use crate::mesh::{build_disk_mesh, paint_phantom, Circle, ConductivityField};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn moments(x: &DMatrix<f64>, r: usize) -> (f64, f64) {
        let n = x.ncols() as f64;
        let m = x.row(r).sum() / n;
        (m, x.row(r).iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn runs_exactly_k_prime_steps() {
        let schedule = SdeSchedule::default();
        let zero = |x: &[f64], _t: f64| vec![0.0; x.len()];
        for k_prime in [0, 1, 500, 650, 1000] {
            let cfg = CsdStarConfig::new(k_prime);
            let (_, stats) = csd_star_sample_batch(&zero, &schedule, &cfg, DMatrix::zeros(2, 3), 0).unwrap();
            assert_eq!(stats.predictor_steps, k_prime);
        }
        assert!(csd_star_sample(&zero, &schedule, &CsdStarConfig::new(1001), &[0.0], 0).is_err());
    }

    #[test]
    fn zero_steps_returns_input() {
        let schedule = SdeSchedule::default();
        let score = AnalyticGaussianScore::new(vec![0.0; 3], 1.0, schedule).unwrap();
        let x = [0.25, -1.0, 3.5];
        assert_eq!(csd_star_sample(&score, &schedule, &CsdStarConfig::new(0), &x, 9).unwrap(), x);
    }

    #[test]
    fn hijack_from_true_marginal_matches_full_sampler() {
        let schedule = SdeSchedule::default();
        let mean = vec![1.0, -0.5];
        let score = AnalyticGaussianScore::new(mean.clone(), 0.6, schedule).unwrap();
        let n = 10_000;
        let k_prime = 600;
        let sd = score.marginal_var(schedule.step_time(k_prime - 1)).unwrap().sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let start = DMatrix::from_fn(2, n, |r, _| mean[r] + sd * rng.sample::<f64, _>(StandardNormal));
        let (hijack, _) = csd_star_sample_batch(&score, &schedule, &CsdStarConfig::new(k_prime), start, 4).unwrap();
        let full = pc_sample_batch(&score, &schedule, CorrectorConfig::default(), 2, n, 5).unwrap();
        for r in 0..2 {
            let (ma, va) = moments(&hijack, r);
            let (mb, vb) = moments(&full, r);
            assert!((ma - mb).abs() < 0.05 * mb.abs(), "{ma} {mb}");
            assert!((va - vb).abs() < 0.05 * vb, "{va} {vb}");
        }
    }

    #[test]
    fn hijack_is_translation_equivariant() {
        let schedule = SdeSchedule::default();
        let base = AnalyticGaussianScore::new(vec![0.0], 1.0, schedule).unwrap();
        let c = 2.0;
        let shifted = |x: &[f64], t: f64| base.score(&[x[0] - c], t).unwrap();
        let n = 10_000;
        let start = DMatrix::from_fn(1, n, |_, j| (j as f64 / n as f64 - 0.5) * 4.0);
        let cfg = CsdStarConfig::new(500);
        let (a, _) = csd_star_sample_batch(&base, &schedule, &cfg, start.clone(), 1).unwrap();
        let (b, _) = csd_star_sample_batch(&shifted, &schedule, &cfg, start.add_scalar(c), 1).unwrap();
        let ((ma, va), (mb, vb)) = (moments(&a, 0), moments(&b, 0));
        assert!((mb - ma - c).abs() < 0.05 * c);
        assert!((va - vb).abs() < 0.05 * va);
    }

    #[test]
    fn pipeline_without_diffusion_is_the_gn_image() {
        let mesh = build_disk_mesh(16, 6, 0.5).unwrap();
        let model = ForwardModel {
            impedances: default_impedances(16),
            protocol: build_adjacent_protocol(16, 1.0).unwrap(),
            mesh,
        };
        let circle = [Circle { center: [0.3, 0.2], radius: 0.3, conductivity: 1.5 }];
        let truth = paint_phantom(&model.mesh, 1.0, &circle).unwrap();
        let (_, v) = solve_forward(&model.mesh, &truth, &model.impedances, &model.protocol).unwrap();
        let mut inv = InverseConfig::new(ConductivityField::homogeneous(model.mesh.n_elements(), 1.0).unwrap());
        inv.max_iters = 3;
        let ctx = PipelineContext { model: &model, side: 16, background: 1.0 };
        let schedule = SdeSchedule::default();
        let score = AnalyticGaussianScore::new(vec![1.0; 256], 0.1, schedule).unwrap();

        let out = csd_star_pipeline(&v, ctx, &inv, &score, &schedule, &CsdStarConfig::new(0), 1).unwrap();
        assert_eq!(out.image, out.gn_image);
        assert!(out.gn_trace.len() >= 2);

        let a = csd_star_pipeline(&v, ctx, &inv, &score, &schedule, &CsdStarConfig::new(50), 7).unwrap();
        let b = csd_star_pipeline(&v, ctx, &inv, &score, &schedule, &CsdStarConfig::new(50), 7).unwrap();
        assert_eq!(a.image, b.image);
        assert_ne!(a.image, a.gn_image);

        let wrong = AnalyticGaussianScore::new(vec![1.0; 9], 0.1, schedule).unwrap();
        let err = csd_star_pipeline(&v, ctx, &inv, &wrong, &schedule, &CsdStarConfig::new(5), 1).unwrap_err();
        assert!(matches!(err, EitError::Stage { stage: "sampling", .. }), "{err}");
    }
}
