//! Variance-exploding SDE: schedule, score functions, denoising score
//! matching and the predictor-corrector sampler.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, EitError, Result};
use crate::nnet::{read_f64s, Activation, DenseNet, GradientSet, Optimizer};

pub const DEFAULT_SIGMA_MIN: f64 = 0.01;
pub const DEFAULT_SIGMA_MAX: f64 = 50.0;
pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_CORRECTOR_STEPS: usize = 1;
pub const DEFAULT_SNR: f64 = 0.16;

/// Training times are drawn from `[T_EPS, 1]` so the kernel std stays positive.
const T_EPS: f64 = 1e-5;

/// Weight averaging applied by `train_score`.
pub const EMA_DECAY: f64 = 0.999;

const SCORE_MAGIC: &[u8; 4] = b"EITS";

/// `σ(t) = σ_min (σ_max/σ_min)^t` on a grid of `k` reverse steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeSchedule {
    sigma_min: f64,
    sigma_max: f64,
    k: usize,
}

impl Default for SdeSchedule {
    fn default() -> Self {
        SdeSchedule {
            sigma_min: DEFAULT_SIGMA_MIN,
            sigma_max: DEFAULT_SIGMA_MAX,
            k: DEFAULT_STEPS,
        }
    }
}

impl SdeSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, k: usize) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(EitError::invalid("need 0 < sigma_min < sigma_max"));
        }
        if k == 0 {
            return Err(EitError::invalid("need at least one sampling step"));
        }
        Ok(SdeSchedule { sigma_min, sigma_max, k })
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn steps(&self) -> usize {
        self.k
    }

    pub fn with_steps(self, k: usize) -> Result<Self> {
        Self::new(self.sigma_min, self.sigma_max, k)
    }

    fn log_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    fn check_t(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(EitError::invalid(format!("time {t} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        Ok(self.sigma_at(t))
    }

    /// Diffusion coefficient `g(t) = σ(t) sqrt(2 ln(σ_max/σ_min))`.
    pub fn g(&self, t: f64) -> Result<f64> {
        Ok(self.sigma(t)? * (2.0 * self.log_ratio()).sqrt())
    }

    /// Std of the perturbation kernel `p(x_t | x_0)`, `sqrt(σ(t)² − σ(0)²)`.
    pub fn kernel_std(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        Ok(self.kernel_std_at(t))
    }

    fn sigma_at(&self, t: f64) -> f64 {
        self.sigma_min * (t * self.log_ratio()).exp()
    }

    fn kernel_std_at(&self, t: f64) -> f64 {
        self.sigma_min * (2.0 * t * self.log_ratio()).exp_m1().sqrt()
    }

    fn g_at(&self, t: f64) -> f64 {
        self.sigma_at(t) * (2.0 * self.log_ratio()).sqrt()
    }

    /// Time at which reverse step `i` (counting down from `k − 1`) starts.
    pub fn step_time(&self, i: usize) -> f64 {
        (i + 1) as f64 / self.k as f64
    }
}

/// `(x, t) ↦ ∇ₓ log p_t(x)` or an estimate of it.
pub trait ScoreFunction: Sync {
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;

    /// One column per sample.
    fn score_batch(&self, x: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for c in 0..x.ncols() {
            let s = self.score(x.column(c).as_slice(), t)?;
            check_len("score output", x.nrows(), s.len())?;
            out.column_mut(c).copy_from_slice(&s);
        }
        Ok(out)
    }
}

impl<F> ScoreFunction for F
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self(x, t))
    }
}

/// Exact score of `N(mean, var0 I)` pushed through the forward diffusion.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticGaussianScore {
    mean: Vec<f64>,
    var0: f64,
    schedule: SdeSchedule,
}

impl AnalyticGaussianScore {
    pub fn new(mean: Vec<f64>, var0: f64, schedule: SdeSchedule) -> Result<Self> {
        if !(var0 > 0.0 && var0.is_finite()) {
            return Err(EitError::invalid("var0 must be positive"));
        }
        Ok(AnalyticGaussianScore { mean, var0, schedule })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn marginal_var(&self, t: f64) -> Result<f64> {
        Ok(self.var0 + self.schedule.kernel_std(t)?.powi(2))
    }

    pub fn log_density(&self, x: &[f64], t: f64) -> Result<f64> {
        check_len("score input", self.mean.len(), x.len())?;
        let v = self.marginal_var(t)?;
        let r2: f64 = x.iter().zip(&self.mean).map(|(a, m)| (a - m).powi(2)).sum();
        Ok(-0.5 * r2 / v - 0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI * v).ln())
    }
}

impl ScoreFunction for AnalyticGaussianScore {
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len("score input", self.mean.len(), x.len())?;
        let v = self.marginal_var(t)?;
        Ok(x.iter().zip(&self.mean).map(|(a, m)| -(a - m) / v).collect())
    }
}

/// Dense score network preconditioned for data of roughly known centre `c`
/// and per-coordinate scale `s_d`. The net `F` sees
/// `[(x − c) / sqrt(s_d² + σ²), t]` and the score is
/// `−(x − c) / (s_d² + σ²) + s_d F / (σ sqrt(s_d² + σ²))` with `σ = σ(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    net: DenseNet,
    schedule: SdeSchedule,
    center: f64,
    scale: f64,
}

impl ScoreNet {
    /// Centre 0 and unit scale.
    pub fn new(net: DenseNet, schedule: SdeSchedule) -> Result<Self> {
        Self::with_data(net, schedule, 0.0, 1.0)
    }

    pub fn with_data(net: DenseNet, schedule: SdeSchedule, center: f64, scale: f64) -> Result<Self> {
        check_len("score net input", net.output_dim() + 1, net.input_dim())?;
        if !(scale > 0.0 && scale.is_finite() && center.is_finite()) {
            return Err(EitError::invalid("data scale must be positive and centre finite"));
        }
        Ok(ScoreNet {
            net,
            schedule,
            center,
            scale,
        })
    }

    pub fn random(dim: usize, hidden: &[usize], schedule: SdeSchedule, seed: u64) -> Result<Self> {
        let mut dims = vec![dim + 1];
        dims.extend_from_slice(hidden);
        dims.push(dim);
        Self::new(DenseNet::mlp(&dims, Activation::Tanh, seed)?, schedule)
    }

    /// Replace the data centre and scale.
    pub fn centered(self, center: f64, scale: f64) -> Result<Self> {
        Self::with_data(self.net, self.schedule, center, scale)
    }

    pub fn dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }

    pub fn schedule(&self) -> SdeSchedule {
        self.schedule
    }

    pub fn data_center(&self) -> f64 {
        self.center
    }

    pub fn data_scale(&self) -> f64 {
        self.scale
    }

    fn inputs(&self, x: &DMatrix<f64>, t: &[f64]) -> Result<DMatrix<f64>> {
        check_len("score input", self.dim(), x.nrows())?;
        let d = self.dim();
        let s2 = self.scale * self.scale;
        Ok(DMatrix::from_fn(d + 1, x.ncols(), |r, c| {
            if r < d {
                (x[(r, c)] - self.center) / (s2 + self.schedule.sigma_at(t[c]).powi(2)).sqrt()
            } else {
                t[c]
            }
        }))
    }

    /// Skip and output coefficients at time `t`.
    fn coefficients(&self, t: f64) -> (f64, f64) {
        let s = self.schedule.sigma_at(t);
        let q = self.scale * self.scale + s * s;
        (1.0 / q, self.scale / (s * q.sqrt()))
    }

    fn combine(&self, x: &DMatrix<f64>, raw: &mut DMatrix<f64>, t: &[f64]) {
        for (c, &tc) in t.iter().enumerate() {
            let (skip, out) = self.coefficients(tc);
            for r in 0..raw.nrows() {
                raw[(r, c)] = raw[(r, c)] * out - (x[(r, c)] - self.center) * skip;
            }
        }
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SCORE_MAGIC)?;
        w.write_all(&self.schedule.sigma_min.to_le_bytes())?;
        w.write_all(&self.schedule.sigma_max.to_le_bytes())?;
        w.write_all(&(self.schedule.k as u64).to_le_bytes())?;
        w.write_all(&self.center.to_le_bytes())?;
        w.write_all(&self.scale.to_le_bytes())?;
        self.net.write_checkpoint(w)
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SCORE_MAGIC {
            return Err(EitError::Format("not a score checkpoint".into()));
        }
        let s = read_f64s(&mut r, 2)?;
        let mut k = [0u8; 8];
        r.read_exact(&mut k)?;
        let schedule = SdeSchedule::new(s[0], s[1], u64::from_le_bytes(k) as usize)
            .map_err(|e| EitError::Format(e.to_string()))?;
        let d = read_f64s(&mut r, 2)?;
        Self::with_data(DenseNet::read_checkpoint(r)?, schedule, d[0], d[1])
            .map_err(|e| EitError::Format(e.to_string()))
    }
}

impl ScoreFunction for ScoreNet {
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self
            .score_batch(&DMatrix::from_column_slice(x.len(), 1, x), t)?
            .as_slice()
            .to_vec())
    }

    fn score_batch(&self, x: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
        SdeSchedule::check_t(t)?;
        let ts = vec![t; x.ncols()];
        let mut out = self.net.forward_batch(&self.inputs(x, &ts)?)?;
        self.combine(x, &mut out, &ts);
        Ok(out)
    }
}

/// Times and noise for one denoising-score-matching batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DsmDraw {
    pub t: Vec<f64>,
    pub eps: DMatrix<f64>,
}

impl DsmDraw {
    pub fn sample<R: Rng>(dim: usize, n: usize, rng: &mut R) -> Self {
        let t = (0..n).map(|_| rng.random_range(T_EPS..=1.0)).collect();
        let eps = DMatrix::from_fn(dim, n, |_, _| rng.sample(StandardNormal));
        DsmDraw { t, eps }
    }

    fn kernel_stds(&self, schedule: &SdeSchedule) -> Vec<f64> {
        self.t.iter().map(|&t| schedule.kernel_std_at(t)).collect()
    }
}

/// `mean_b λ(t_b) ‖s_b + ε_b/std_b‖²` with `λ = std²`, given the score values.
pub fn dsm_loss_given(scores: &DMatrix<f64>, draw: &DsmDraw, schedule: &SdeSchedule) -> Result<f64> {
    check_len("score rows", draw.eps.nrows(), scores.nrows())?;
    check_len("score columns", draw.eps.ncols(), scores.ncols())?;
    let stds = draw.kernel_stds(schedule);
    let mut total = 0.0;
    for (c, std) in stds.iter().enumerate() {
        total += (scores.column(c) * *std + draw.eps.column(c)).norm_squared();
    }
    let loss = total / scores.ncols() as f64;
    if !loss.is_finite() {
        return Err(EitError::NonFinite("score matching loss".into()));
    }
    Ok(loss)
}

/// Denoising score matching loss and its gradient for a fixed draw.
pub fn dsm_loss_with_draw(score_net: &ScoreNet, batch: &DMatrix<f64>, draw: &DsmDraw) -> Result<(f64, GradientSet)> {
    let n = batch.ncols();
    if n == 0 {
        return Err(EitError::invalid("empty batch"));
    }
    check_len("noise rows", batch.nrows(), draw.eps.nrows())?;
    check_len("noise columns", n, draw.eps.ncols())?;
    let schedule = score_net.schedule();
    let stds = draw.kernel_stds(&schedule);
    let mut xt = batch.clone();
    for (c, std) in stds.iter().enumerate() {
        let mut col = xt.column_mut(c);
        col += draw.eps.column(c) * *std;
    }
    let trace = score_net.net.forward_trace(&score_net.inputs(&xt, &draw.t)?)?;
    let mut scores = trace.output().clone();
    score_net.combine(&xt, &mut scores, &draw.t);
    let loss = dsm_loss_given(&scores, draw, &schedule)?;

    let mut upstream = DMatrix::zeros(batch.nrows(), n);
    for (c, (&t, std)) in draw.t.iter().zip(&stds).enumerate() {
        let r = scores.column(c) * *std + draw.eps.column(c);
        upstream.column_mut(c).copy_from(&(r * (2.0 * std * score_net.coefficients(t).1 / n as f64)));
    }
    let (grads, _) = score_net.net.backward_trace(&trace, &upstream)?;
    Ok((loss, grads))
}

/// Sample times and noise, then evaluate the loss and gradient. `batch` holds
/// one clean sample per column.
pub fn dsm_loss<R: Rng>(score_net: &ScoreNet, batch: &DMatrix<f64>, rng: &mut R) -> Result<(f64, GradientSet)> {
    let draw = DsmDraw::sample(batch.nrows(), batch.ncols(), rng);
    dsm_loss_with_draw(score_net, batch, &draw)
}

/// Run `steps` optimizer updates on batches from `data(rng, n)`; returns the
/// loss of every step. The learning rate follows a cosine decay from the
/// optimizer's initial value down to 1% of it. On return the net holds an
/// exponential moving average of the iterates with decay `EMA_DECAY`.
pub fn train_score(
    score_net: &mut ScoreNet,
    mut data: impl FnMut(&mut ChaCha8Rng, usize) -> DMatrix<f64>,
    steps: usize,
    batch_size: usize,
    optimizer: &mut dyn Optimizer,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::with_capacity(steps);
    let lr0 = optimizer.learning_rate();
    let mut ema = score_net.net.params();
    for step in 0..steps {
        let frac = step as f64 / steps.max(1) as f64;
        optimizer.set_learning_rate(lr0 * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())));
        let batch = data(&mut rng, batch_size);
        let (loss, grads) = dsm_loss(score_net, &batch, &mut rng)?;
        optimizer.step(&mut score_net.net, &grads)?;
        for (e, p) in ema.iter_mut().zip(score_net.net.params()) {
            *e = EMA_DECAY * *e + (1.0 - EMA_DECAY) * p;
        }
        losses.push(loss);
    }
    optimizer.set_learning_rate(lr0);
    score_net.net.set_params(&ema)?;
    Ok(losses)
}

/// Mean and standard deviation over every coordinate of every sample.
pub fn pool_statistics(pool: &[Vec<f64>]) -> Result<(f64, f64)> {
    let n: usize = pool.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(EitError::invalid("empty sample pool"));
    }
    let mean = pool.iter().flatten().sum::<f64>() / n as f64;
    let var = pool.iter().flatten().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Ok((mean, var.sqrt()))
}

/// Settings for fitting a fresh score net.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTraining {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

/// Fit a new score net to a fixed pool, drawing batches with replacement.
/// The net is centred and scaled with the pool statistics.
pub fn fit_score_to_pool(pool: &[Vec<f64>], schedule: SdeSchedule, cfg: &ScoreTraining) -> Result<(ScoreNet, Vec<f64>)> {
    let (center, scale) = pool_statistics(pool)?;
    let dim = pool[0].len();
    if pool.iter().any(|p| p.len() != dim) {
        return Err(EitError::invalid("pool samples differ in length"));
    }
    let mut net = ScoreNet::random(dim, &cfg.hidden, schedule, cfg.seed)?.centered(center, scale.max(1e-6))?;
    let mut opt = crate::nnet::Adam::new(cfg.learning_rate);
    let losses = train_score(
        &mut net,
        |rng, n| {
            let mut m = DMatrix::zeros(dim, n);
            for c in 0..n {
                m.column_mut(c).copy_from_slice(&pool[rng.random_range(0..pool.len())]);
            }
            m
        },
        cfg.steps,
        cfg.batch,
        &mut opt,
        cfg.seed.wrapping_add(1),
    )?;
    Ok((net, losses))
}

/// Fit a new score net to fresh draws from a mixture, centred and scaled
/// with the statistics of a pilot draw.
pub fn fit_score_to_mixture(mix: &ToyMixture, schedule: SdeSchedule, cfg: &ScoreTraining) -> Result<(ScoreNet, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pilot = mix.sample(&mut rng, 10_000);
    let (center, scale) = pool_statistics(&[pilot.as_slice().to_vec()])?;
    let mut net = ScoreNet::random(2, &cfg.hidden, schedule, cfg.seed)?.centered(center, scale)?;
    let mut opt = crate::nnet::Adam::new(cfg.learning_rate);
    let losses = train_score(&mut net, |rng, n| mix.sample(rng, n), cfg.steps, cfg.batch, &mut opt, cfg.seed.wrapping_add(1))?;
    Ok((net, losses))
}

/// Two-dimensional Gaussian mixture with isotropic components.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMixture {
    pub means: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub std: f64,
}

impl ToyMixture {
    /// Modes at (−2, −2) and (2, 2) with weights 0.3 and 0.7.
    pub fn two_mode() -> Self {
        ToyMixture {
            means: vec![[-2.0, -2.0], [2.0, 2.0]],
            weights: vec![0.3, 0.7],
            std: 0.5,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, n: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(2, n);
        for c in 0..n {
            let u: f64 = rng.random();
            let mut k = 0;
            let mut acc = self.weights[0];
            while u >= acc && k + 1 < self.weights.len() {
                k += 1;
                acc += self.weights[k];
            }
            for r in 0..2 {
                let z: f64 = rng.sample(StandardNormal);
                out[(r, c)] = self.means[k][r] + self.std * z;
            }
        }
        out
    }

    /// Fraction of columns nearest to each mode.
    pub fn mode_fractions(&self, samples: &DMatrix<f64>) -> Vec<f64> {
        let mut counts = vec![0usize; self.means.len()];
        for col in samples.column_iter() {
            let d = |m: &[f64; 2]| (col[0] - m[0]).powi(2) + (col[1] - m[1]).powi(2);
            let k = (0..self.means.len())
                .min_by(|&a, &b| d(&self.means[a]).total_cmp(&d(&self.means[b])))
                .expect("at least one mode");
            counts[k] += 1;
        }
        counts.iter().map(|&c| c as f64 / samples.ncols() as f64).collect()
    }
}

/// Langevin corrector settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectorConfig {
    pub steps: usize,
    pub snr: f64,
}

impl Default for CorrectorConfig {
    fn default() -> Self {
        CorrectorConfig {
            steps: DEFAULT_CORRECTOR_STEPS,
            snr: DEFAULT_SNR,
        }
    }
}

impl CorrectorConfig {
    pub fn none() -> Self {
        CorrectorConfig { steps: 0, snr: DEFAULT_SNR }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SamplerStats {
    pub predictor_steps: usize,
    pub corrector_steps: usize,
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn mean_column_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.norm()).sum::<f64>() / m.ncols() as f64
}

fn check_state(x: &DMatrix<f64>, step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(EitError::SamplerDiverged { step })
    }
}

/// Reverse steps `first_step − 1, …, 0` starting from `x` (one chain per
/// column). Each step is an Euler–Maruyama predictor at `t = (i+1)/K`
/// followed by Langevin corrector updates at `t = i/K`. Corrector step
/// sizes use norms averaged over the batch.
pub fn reverse_diffusion<S: ScoreFunction + ?Sized>(
    score: &S,
    schedule: &SdeSchedule,
    mut x: DMatrix<f64>,
    first_step: usize,
    corrector: CorrectorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(DMatrix<f64>, SamplerStats)> {
    if first_step > schedule.k {
        return Err(EitError::invalid("start step beyond the time grid"));
    }
    if !(corrector.snr > 0.0) {
        return Err(EitError::invalid("corrector snr must be positive"));
    }
    check_state(&x, first_step)?;
    let dt = 1.0 / schedule.k as f64;
    let (rows, cols) = x.shape();
    let mut stats = SamplerStats::default();
    for i in (0..first_step).rev() {
        let t = schedule.step_time(i);
        let g = schedule.g_at(t);
        let s = score.score_batch(&x, t)?;
        check_len("score output", rows, s.nrows())?;
        let z = normal_matrix(rows, cols, rng);
        x += s * (g * g * dt) + z * (g * dt.sqrt());
        check_state(&x, i)?;
        stats.predictor_steps += 1;

        let tc = i as f64 * dt;
        for _ in 0..corrector.steps {
            let s = score.score_batch(&x, tc)?;
            let z = normal_matrix(rows, cols, rng);
            let s_norm = mean_column_norm(&s);
            if s_norm == 0.0 {
                continue;
            }
            let alpha = 2.0 * (corrector.snr * mean_column_norm(&z) / s_norm).powi(2);
            x += s * alpha + z * (2.0 * alpha).sqrt();
            check_state(&x, i)?;
            stats.corrector_steps += 1;
        }
    }
    Ok((x, stats))
}

/// `n` chains from `N(0, σ_max² I)` run through all `K` reverse steps.
pub fn pc_sample_batch<S: ScoreFunction + ?Sized>(
    score: &S,
    schedule: &SdeSchedule,
    corrector: CorrectorConfig,
    dim: usize,
    n: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = normal_matrix(dim, n, &mut rng) * schedule.sigma_max;
    Ok(reverse_diffusion(score, schedule, x, schedule.k, corrector, &mut rng)?.0)
}

pub fn pc_sample<S: ScoreFunction + ?Sized>(
    score: &S,
    schedule: &SdeSchedule,
    corrector: CorrectorConfig,
    dim: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    Ok(pc_sample_batch(score, schedule, corrector, dim, 1, seed)?.as_slice().to_vec())
}
