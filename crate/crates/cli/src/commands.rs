use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::Path;

use eit_core::dataset::{generate_dataset, read_images, write_atomically, DatasetConfig, ForwardModel};
use eit_core::dgm::csd::{csd_star_pipeline, CsdStarConfig, PipelineContext};
use eit_core::dgm::sde::{
    fit_score_to_mixture, fit_score_to_pool, pc_sample_batch, CorrectorConfig, ScoreNet, ScoreTraining, SdeSchedule,
    ToyMixture, DEFAULT_SIGMA_MIN,
};
use eit_core::fem::{add_measurement_noise, build_adjacent_protocol, solve_forward};
use eit_core::inverse::{reconstruct, InverseConfig};
use eit_core::mesh::{build_disk_mesh, DEFAULT_COVERAGE};
use eit_core::metrics::summarize;
use eit_core::phantom::sample_phantom;
use eit_core::raster::rasterize_default;
use eit_core::{ConductivityField, EitError, MeasurementVector, Mesh, MetricReport, PhantomSpec, Result};

use crate::export::export_image;
use crate::{
    Command, DatasetArgs, ForwardArgs, Globals, InverseArgs, MeshArgs, MetricsArgs, ModelArgs, ReconstructArgs,
    SampleArgs, SampleMode, ToyScoreArgs, TrainSet,
};

/// Space-separated `key=value` pairs.
#[derive(Debug, Default)]
pub struct Summary(Vec<(&'static str, String)>);

impl Summary {
    fn new(command: &str) -> Self {
        Summary(vec![("command", command.to_string())])
    }

    fn put(mut self, key: &'static str, value: impl fmt::Display) -> Self {
        self.0.push((key, value.to_string()));
        self
    }

    fn num(self, key: &'static str, value: f64) -> Self {
        self.put(key, format!("{value:?}"))
    }

    fn path(self, key: &'static str, p: &Path) -> Self {
        self.put(key, p.display())
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (k, v)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

pub fn execute(command: Command, g: &Globals) -> Result<Summary> {
    match command {
        Command::Mesh(a) => mesh(a, g),
        Command::Forward(a) => forward(a, g),
        Command::Dataset(a) => dataset(a, g),
        Command::Reconstruct(a) => reconstruct_cmd(a, g),
        Command::Sample(a) => sample(a, g),
        Command::Metrics(a) => metrics(a, g),
        Command::ToyScore(a) => toy_score(a, g),
    }
}

fn usage(msg: impl Into<String>) -> EitError {
    EitError::InvalidArgument(msg.into())
}

fn read_mesh(path: &Path) -> Result<Mesh> {
    Mesh::read_text(BufReader::new(File::open(path)?))
}

fn read_measurements(path: &Path) -> Result<MeasurementVector> {
    MeasurementVector::read_csv(BufReader::new(File::open(path)?))
}

fn forward_model(mesh: Mesh, m: &ModelArgs) -> Result<ForwardModel> {
    let l = mesh.n_electrodes();
    Ok(ForwardModel {
        impedances: vec![m.impedance; l],
        protocol: build_adjacent_protocol(l, m.current)?,
        mesh,
    })
}

fn write_values(path: &Path, values: &[f64]) -> Result<()> {
    write_atomically(path, |w| {
        for v in values {
            writeln!(w, "{v:?}")?;
        }
        Ok(())
    })
}

fn inverse_config(a: &InverseArgs, n_elements: usize) -> Result<InverseConfig> {
    let mut cfg = InverseConfig::new(ConductivityField::homogeneous(n_elements, a.initial)?);
    cfg.lambda = a.lambda;
    cfg.max_iters = a.iters;
    cfg.misfit_tol = a.tol;
    Ok(cfg)
}

fn mesh(a: MeshArgs, g: &Globals) -> Result<Summary> {
    let m = build_disk_mesh(a.electrodes, a.refinement, a.coverage)?;
    let out = g.output(&a.out)?;
    write_atomically(&out, |w| m.write_text(w))?;
    Ok(Summary::new("mesh")
        .put("nodes", m.n_nodes())
        .put("elements", m.n_elements())
        .put("electrodes", m.n_electrodes())
        .path("out", &out))
}

fn forward(a: ForwardArgs, g: &Globals) -> Result<Summary> {
    let model = forward_model(read_mesh(&a.mesh)?, &a.model)?;
    let spec: PhantomSpec = match (&a.phantom, a.kind) {
        (Some(p), _) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| EitError::Format(format!("phantom {}: {e}", p.display())))?,
        (None, Some(kind)) => sample_phantom(kind.into(), g.seed),
        (None, None) => return Err(usage("need --phantom or --kind")),
    };
    let sigma = spec.paint(&model.mesh)?;
    let (_, clean) = solve_forward(&model.mesh, &sigma, &model.impedances, &model.protocol)?;
    let v = add_measurement_noise(&clean, a.snr, g.seed)?;
    let out = g.output(&a.out)?;
    write_atomically(&out, |w| v.write_csv(w))?;
    let mut summary = Summary::new("forward")
        .put("measurements", v.len())
        .num("snr_db", a.snr)
        .num("norm", v.norm())
        .path("out", &out);
    if let Some(p) = &a.phantom_out {
        let p = g.output(p)?;
        let text = serde_json::to_string_pretty(&spec).map_err(|e| EitError::Format(e.to_string()))?;
        write_atomically(&p, |w| Ok(w.write_all(text.as_bytes())?))?;
        summary = summary.path("phantom", &p);
    }
    if let Some(p) = &a.image {
        let p = g.output(p)?;
        export_image(&rasterize_default(&model.mesh, &sigma, a.side, spec.background)?, &p)?;
        summary = summary.path("image", &p);
    }
    Ok(summary)
}

fn parse_split(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| usage(format!("bad split `{s}`"))))
        .collect::<Result<_>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(usage(format!("split needs three counts, got `{s}`"))),
    }
}

fn default_split(count: usize) -> (usize, usize, usize) {
    let (train, val) = (count * 8 / 10, count / 10);
    (train, val, count - train - val)
}

fn dataset(a: DatasetArgs, g: &Globals) -> Result<Summary> {
    let mesh = build_disk_mesh(a.electrodes, a.refinement, DEFAULT_COVERAGE)?;
    let model = forward_model(mesh, &a.model)?;
    let cfg = DatasetConfig {
        kind: a.kind.into(),
        count: a.count,
        snr_db: a.snr,
        split: a.split.as_deref().map_or(Ok(default_split(a.count)), parse_split)?,
        base_seed: g.seed,
        side: a.side,
    };
    let out = g.output(&a.out)?;
    fs::create_dir_all(&out)?;
    let manifest = generate_dataset(&model, &cfg, &out)?;
    let mut summary = Summary::new("dataset")
        .put("count", a.count)
        .put("side", manifest.side)
        .put("measurements", manifest.n_measurements);
    for sp in &manifest.splits {
        summary = summary.put(sp.name, sp.len());
    }
    Ok(summary.path("out", &out))
}

fn reconstruct_cmd(a: ReconstructArgs, g: &Globals) -> Result<Summary> {
    let model = forward_model(read_mesh(&a.mesh)?, &a.model)?;
    let v = read_measurements(&a.measurements)?;
    let cfg = inverse_config(&a.inverse, model.mesh.n_elements())?;
    let rec = reconstruct(&v, &model.mesh, &model.impedances, &model.protocol, &cfg)?;
    let out = g.output(&a.out)?;
    write_values(&out, rec.sigma.values())?;
    let mut summary = Summary::new("reconstruct")
        .put("iterations", rec.trace.len() - 1)
        .num("initial_misfit", rec.trace[0])
        .num("final_misfit", *rec.trace.last().expect("trace starts with the initial misfit"))
        .path("out", &out);
    if let Some(p) = &a.trace {
        let p = g.output(p)?;
        write_atomically(&p, |w| {
            writeln!(w, "iteration,misfit")?;
            for (i, m) in rec.trace.iter().enumerate() {
                writeln!(w, "{i},{m:?}")?;
            }
            Ok(())
        })?;
        summary = summary.path("trace", &p);
    }
    if let Some(p) = &a.image {
        let p = g.output(p)?;
        export_image(&rasterize_default(&model.mesh, &rec.sigma, a.side, a.background)?, &p)?;
        summary = summary.path("image", &p);
    }
    Ok(summary)
}

fn read_score(path: &Path) -> Result<ScoreNet> {
    ScoreNet::read_checkpoint(BufReader::new(File::open(path)?))
}

fn sample(a: SampleArgs, g: &Globals) -> Result<Summary> {
    let score = read_score(&a.score)?;
    let schedule = score.schedule().with_steps(a.k)?;
    let corrector = CorrectorConfig {
        steps: a.corrector_steps,
        snr: a.corrector_snr,
    };
    let out = g.output(&a.out)?;
    match a.mode {
        SampleMode::Pc => {
            let x = pc_sample_batch(&score, &schedule, corrector, score.dim(), a.count, g.seed)?;
            write_atomically(&out, |w| {
                for col in x.column_iter() {
                    let row: Vec<String> = col.iter().map(|v| format!("{v:?}")).collect();
                    writeln!(w, "{}", row.join(","))?;
                }
                Ok(())
            })?;
            Ok(Summary::new("sample")
                .put("mode", "pc")
                .put("k", a.k)
                .put("samples", a.count)
                .put("dim", score.dim())
                .path("out", &out))
        }
        SampleMode::CsdStar => {
            let k_prime = a.k_prime.ok_or_else(|| usage("csd-star needs --k-prime"))?;
            let mesh = a.mesh.as_ref().ok_or_else(|| usage("csd-star needs --mesh"))?;
            let meas = a.measurements.as_ref().ok_or_else(|| usage("csd-star needs --measurements"))?;
            let side = (score.dim() as f64).sqrt().round() as usize;
            if side * side != score.dim() {
                return Err(usage(format!("score dimension {} is not a square image", score.dim())));
            }
            let model = forward_model(read_mesh(mesh)?, &a.model)?;
            let v = read_measurements(meas)?;
            let inverse = inverse_config(&a.inverse, model.mesh.n_elements())?;
            let ctx = PipelineContext {
                model: &model,
                side,
                background: a.background,
            };
            let cfg = CsdStarConfig { k_prime, corrector };
            let res = csd_star_pipeline(&v, ctx, &inverse, &score, &schedule, &cfg, g.seed)?;
            export_image(&res.image, &out)?;
            let mut summary = Summary::new("sample")
                .put("mode", "csd-star")
                .put("k", a.k)
                .put("k_prime", k_prime)
                .put("side", side)
                .put("gn_iterations", res.gn_trace.len() - 1)
                .num("gn_misfit", *res.gn_trace.last().expect("nonempty trace"))
                .path("out", &out);
            if let Some(p) = &a.gn_out {
                let p = g.output(p)?;
                export_image(&res.gn_image, &p)?;
                summary = summary.path("gn_out", &p);
            }
            Ok(summary)
        }
    }
}

fn metrics(a: MetricsArgs, g: &Globals) -> Result<Summary> {
    let recon = read_images(&a.recon)?;
    let gt = read_images(&a.gt)?;
    if recon.len() != gt.len() {
        return Err(EitError::DimensionMismatch {
            context: "image pairs",
            expected: gt.len(),
            found: recon.len(),
        });
    }
    let reports = recon
        .iter()
        .zip(&gt)
        .map(|(r, t)| MetricReport::evaluate(r, t))
        .collect::<Result<Vec<_>>>()?;
    let (mean, std) = summarize(&reports).ok_or_else(|| usage("no images to compare"))?;
    let mut summary = Summary::new("metrics").put("pairs", reports.len());
    for (k, v) in MetricReport::FIELDS.iter().zip(mean.as_array()) {
        summary = summary.num(k, v);
    }
    if let Some(p) = &a.out {
        let p = g.output(p)?;
        let row = |label: String, r: &MetricReport| {
            let vals: Vec<String> = r.as_array().iter().map(|v| format!("{v:?}")).collect();
            format!("{label},{}", vals.join(","))
        };
        write_atomically(&p, |w| {
            writeln!(w, "pair,{}", MetricReport::FIELDS.join(","))?;
            for (i, r) in reports.iter().enumerate() {
                writeln!(w, "{}", row(i.to_string(), r))?;
            }
            writeln!(w, "{}", row("mean".into(), &mean))?;
            writeln!(w, "{}", row("std".into(), &std))?;
            Ok(())
        })?;
        summary = summary.path("out", &p);
    }
    Ok(summary)
}

fn parse_hidden(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| match p.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(usage(format!("bad hidden widths `{s}`"))),
        })
        .collect()
}

const HIST_BINS: usize = 20;
const HIST_HALF_WIDTH: f64 = 5.0;

fn write_histogram(path: &Path, x: &[[f64; 2]]) -> Result<()> {
    let mut counts = vec![0usize; HIST_BINS * HIST_BINS];
    let h = 2.0 * HIST_HALF_WIDTH / HIST_BINS as f64;
    for p in x {
        let bin = |v: f64| ((v + HIST_HALF_WIDTH) / h).floor();
        let (i, j) = (bin(p[0]), bin(p[1]));
        if (0.0..HIST_BINS as f64).contains(&i) && (0.0..HIST_BINS as f64).contains(&j) {
            counts[i as usize * HIST_BINS + j as usize] += 1;
        }
    }
    write_atomically(path, |w| {
        writeln!(w, "x,y,count")?;
        for i in 0..HIST_BINS {
            for j in 0..HIST_BINS {
                let c = |k: usize| -HIST_HALF_WIDTH + (k as f64 + 0.5) * h;
                writeln!(w, "{:?},{:?},{}", c(i), c(j), counts[i * HIST_BINS + j])?;
            }
        }
        Ok(())
    })
}

fn toy_score(a: ToyScoreArgs, g: &Globals) -> Result<Summary> {
    let schedule = SdeSchedule::new(DEFAULT_SIGMA_MIN, a.sigma_max, a.k)?;
    let out = g.output(&a.out)?;
    let (net, losses, mut summary) = match a.train {
        TrainSet::Gmm2d => {
            let cfg = ScoreTraining {
                hidden: parse_hidden(a.hidden.as_deref().unwrap_or("64,64"))?,
                steps: a.steps,
                batch: a.batch.unwrap_or(512),
                learning_rate: a.lr.unwrap_or(3e-3),
                seed: g.seed,
            };
            let mix = ToyMixture::two_mode();
            let (net, losses) = fit_score_to_mixture(&mix, schedule, &cfg)?;
            let x = pc_sample_batch(&net, &schedule, CorrectorConfig::default(), 2, a.samples, g.seed)?;
            let w = mix.mode_fractions(&x);
            let mut s = Summary::new("toy-score")
                .put("train", "gmm2d")
                .num("w0", w[0])
                .num("w1", w[1])
                .num("true_w0", mix.weights[0])
                .num("true_w1", mix.weights[1]);
            if let Some(p) = &a.hist {
                let p = g.output(p)?;
                let pts: Vec<[f64; 2]> = x.column_iter().map(|c| [c[0], c[1]]).collect();
                write_histogram(&p, &pts)?;
                s = s.path("hist", &p);
            }
            (net, losses, s)
        }
        TrainSet::Images => {
            let data = a.data.as_ref().ok_or_else(|| usage("--train images needs --data"))?;
            let pool: Vec<Vec<f64>> = read_images(data)?.into_iter().map(|i| i.into_values()).collect();
            if pool.is_empty() {
                return Err(usage("no images in the training file"));
            }
            let cfg = ScoreTraining {
                hidden: parse_hidden(a.hidden.as_deref().unwrap_or("512,512"))?,
                steps: a.steps,
                batch: a.batch.unwrap_or(128),
                learning_rate: a.lr.unwrap_or(1e-3),
                seed: g.seed,
            };
            let (net, losses) = fit_score_to_pool(&pool, schedule, &cfg)?;
            let s = Summary::new("toy-score").put("train", "images").put("images", pool.len());
            (net, losses, s)
        }
    };
    let tail = &losses[losses.len().saturating_sub(100)..];
    if !tail.is_empty() {
        summary = summary.num("loss", tail.iter().sum::<f64>() / tail.len() as f64);
    }
    write_atomically(&out, |w| net.write_checkpoint(w))?;
    Ok(summary.put("steps", a.steps).path("out", &out))
}
