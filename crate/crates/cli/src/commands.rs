//! The six commands. Each writes its artifacts into the run's output
//! directory and fills in the manifest.

use std::fmt;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vdm_core::diffusion::{ancestral_sample, stream_rng, Denoiser, SamplerOptions, SamplerVariance};
use vdm_core::loss::{continuous_loss, discrete_loss, DataSource, TimeDistribution};
use vdm_core::nn::{read_checkpoint, write_checkpoint, DenoiserConfig, DenoiserNet, MonotonicNet};
use vdm_core::oracle::{five_clusters, ks_test_standard_normal, AnalyticGaussianOracle, Dataset2D, KsResult};
use vdm_core::param::{conversion_table, PredictionKind};
use vdm_core::schedule::ScheduleKind;
use vdm_core::train::{train_denoiser, TrainObjective, TrainOptions};
use vdm_core::vae::{aggregate_posterior, diffusion_marginal, hole_metric_at, train_vae, GaussianMixture, VaeModel, VaeTrainOptions};
use vdm_core::{NoiseSchedule, ScheduleSample, Tensor, VdmError, WeightingFn};

use crate::config::{Command, Config, RunConfig};
use crate::output::{num, OutputDir, RunManifest, Table};
use crate::svg::{plot, Series};
use crate::verify::{report_table, run_invariants, VerifyOptions};

/// Independent random streams under the run seed.
mod stream {
    pub const TRAIN: u64 = 1;
    pub const EVAL: u64 = 2;
    pub const DATA: u64 = 3;
    pub const SAMPLER: u64 = 4;
    pub const SCHEDULE: u64 = 5;
    pub const VAE_INIT: u64 = 6;
    pub const VAE_TRAIN: u64 = 7;
    pub const HOLE: u64 = 8;
    pub const KS: u64 = 9;
}

/// A checkpoint that cannot be used with the current config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Incompatible(pub String);

impl fmt::Display for Incompatible {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "checkpoint incompatible with config: {}", self.0)
    }
}

impl std::error::Error for Incompatible {}

/// Runs a command and writes `manifest.txt` whether or not it succeeds.
pub fn execute(cfg: &RunConfig) -> Result<RunManifest> {
    let start = std::time::Instant::now();
    let mut out = OutputDir::create(&cfg.out)?;
    let mut m = RunManifest {
        command: cfg.command.name().to_string(),
        config: cfg.values.effective().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        ..Default::default()
    };
    let res = match cfg.command {
        Command::Train => train(cfg, &mut out, &mut m),
        Command::Sample => sample(cfg, &mut out, &mut m),
        Command::Verify => verify(cfg, &mut out, &mut m),
        Command::HoleDemo => hole_demo(cfg, &mut out, &mut m),
        Command::ScheduleDump => schedule_dump(cfg, &mut out, &mut m),
        Command::ParamTable => param_table(cfg, &mut out, &mut m),
    };
    m.status = match &res {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("failed: {e:#}"),
    };
    m.wall_clock = start.elapsed();
    m.files = out.written().to_vec();
    m.files.push("manifest.txt".to_string());
    out.write("manifest.txt", &m.render())?;
    res.map(|()| m)
}

fn svg_enabled(c: &Config) -> Result<bool> {
    c.get("svg")
}

// ---- builders shared by the commands ----

pub fn build_schedule(c: &Config, seed: u64) -> Result<NoiseSchedule> {
    let (lo, hi): (f64, f64) = (c.get("schedule.lambda_min")?, c.get("schedule.lambda_max")?);
    let kind = c.str("schedule.kind");
    if kind == "learned" {
        let mut net = MonotonicNet::new(c.get("schedule.width")?, -hi, -lo, &mut stream_rng(seed, stream::SCHEDULE))?;
        net.learn_endpoints = c.get("schedule.learn_endpoints")?;
        return Ok(NoiseSchedule::learned(net));
    }
    Ok(NoiseSchedule::from_name(kind, lo, hi)?)
}

fn build_weighting(c: &Config, sched: &NoiseSchedule) -> Result<WeightingFn> {
    Ok(match c.str("loss.weighting") {
        "uniform" => WeightingFn::Uniform,
        "sigmoid" => WeightingFn::Sigmoid {
            bias: c.get("loss.weighting_bias")?,
        },
        "snr" => WeightingFn::Snr,
        "simple-implied" => WeightingFn::SimpleImplied(sched.clone()),
        other => bail!("unknown loss.weighting {other:?}"),
    })
}

fn build_objective(c: &Config, sched: &NoiseSchedule) -> Result<TrainObjective> {
    Ok(match c.str("loss.objective") {
        "continuous" => TrainObjective::Continuous(build_weighting(c, sched)?),
        "simple" => TrainObjective::Simple,
        "discrete" => TrainObjective::Discrete(c.get("loss.steps")?),
        other => bail!("unknown loss.objective {other:?}"),
    })
}

fn gaussian_oracle(c: &Config) -> Result<AnalyticGaussianOracle> {
    Ok(AnalyticGaussianOracle::new(c.list("data.mean")?, c.list("data.var")?)?)
}

/// Training data, plus the five-cluster geometry when that is the source.
fn build_data(c: &Config, seed: u64) -> Result<(Tensor, Option<Dataset2D>)> {
    let n: usize = c.get("data.n")?;
    match c.str("data.kind") {
        "five-clusters" => {
            let ds = five_clusters(n, c.get("data.seed")?)?;
            Ok((ds.points.clone(), Some(ds)))
        }
        "gaussian" => Ok((gaussian_oracle(c)?.sample(n, &mut stream_rng(seed, stream::DATA)), None)),
        other => bail!("unknown data.kind {other:?}"),
    }
}

fn denoiser_config(c: &Config, dim: usize) -> Result<DenoiserConfig> {
    let mut dc = DenoiserConfig::new(dim, c.list("model.hidden")?, PredictionKind::from_name(c.str("model.kind"))?);
    dc.n_freq = c.get("model.n_freq")?;
    dc.residual = c.get("model.residual")?;
    Ok(dc)
}

fn eval_loss(
    net: &DenoiserNet,
    sched: &NoiseSchedule,
    objective: &TrainObjective,
    data: &Tensor,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let src = DataSource::Empirical(data);
    let est = match objective {
        TrainObjective::Continuous(w) => continuous_loss(&src, net, sched, w, n, rng, TimeDistribution::UniformT)?,
        TrainObjective::Simple => continuous_loss(
            &src,
            net,
            sched,
            &WeightingFn::SimpleImplied(sched.clone()),
            n,
            rng,
            TimeDistribution::UniformT,
        )?,
        TrainObjective::Discrete(t) => discrete_loss(&src, net, sched, *t, n, rng)?,
    };
    Ok(est.value)
}

// ---- train ----

fn train(cfg: &RunConfig, out: &mut OutputDir, m: &mut RunManifest) -> Result<()> {
    let c = &cfg.values;
    let (data, _) = build_data(c, cfg.seed)?;
    let mut sched = build_schedule(c, cfg.seed)?;
    let mut net = DenoiserNet::new(denoiser_config(c, data.cols())?, cfg.seed)?;
    let opts = TrainOptions {
        steps: c.get("train.steps")?,
        batch: c.get("train.batch")?,
        lr: c.get("train.lr")?,
        momentum: c.get("train.momentum")?,
        objective: build_objective(c, &sched)?,
        stratified: c.get("train.stratified")?,
        cosine_decay: c.get("train.cosine_decay")?,
        schedule_lr: c.get("schedule.lr")?,
    };
    let n_eval: usize = c.get("loss.eval_samples")?;
    let eval_rng = stream_rng(cfg.seed, stream::EVAL);
    let before = eval_loss(&net, &sched, &opts.objective, &data, n_eval, &mut eval_rng.clone())?;
    m.metric("eval_loss_before", num(before));

    let report = match train_denoiser(&mut net, &mut sched, &data, &opts, &mut stream_rng(cfg.seed, stream::TRAIN)) {
        Ok(r) => r,
        Err(VdmError::Diverged { step, last_finite }) => {
            m.metric("diverged_at_step", step);
            m.metric("last_finite_loss", last_finite.map_or("none".to_string(), num));
            bail!("training diverged at step {step}");
        }
        Err(e) => return Err(e.into()),
    };

    let mut curve = Table::new(&["step", "loss"]);
    for (i, l) in report.losses.iter().enumerate() {
        curve.push(vec![i.to_string(), num(*l)]);
    }
    out.table("loss_curve.csv", &curve)?;

    let epochs: usize = c.get::<usize>("train.epochs")?.clamp(1, report.losses.len().max(1));
    let per = report.losses.len().div_ceil(epochs).max(1);
    for (e, chunk) in report.losses.chunks(per).enumerate() {
        m.epochs.push((e, "mean_loss".into(), chunk.iter().sum::<f64>() / chunk.len() as f64));
    }

    let after = eval_loss(&net, &sched, &opts.objective, &data, n_eval, &mut eval_rng.clone())?;
    m.metric("eval_loss_after", num(after));
    m.metric("eval_loss_reduction", num(1.0 - after / before));

    out.write("checkpoint.txt", &checkpoint_text(c, &net, &sched)?)?;
    if svg_enabled(c)? {
        let pts = report.losses.iter().enumerate().map(|(i, &l)| (i as f64, l)).collect();
        out.write("loss_curve.svg", &plot("training loss", "step", "loss", &[Series::line("loss", pts)]))?;
    }
    Ok(())
}

fn checkpoint_text(c: &Config, net: &DenoiserNet, sched: &NoiseSchedule) -> Result<String> {
    let dc = net.config();
    let hidden: Vec<String> = dc.hidden.iter().map(usize::to_string).collect();
    let meta = vec![
        ("dim", dc.dim.to_string()),
        ("model.kind", dc.kind.name().to_string()),
        ("model.hidden", hidden.join(";")),
        ("model.n_freq", dc.n_freq.to_string()),
        ("model.residual", dc.residual.to_string()),
        ("schedule.kind", c.str("schedule.kind").to_string()),
        ("schedule.lambda_min", num(c.get("schedule.lambda_min")?)),
        ("schedule.lambda_max", num(c.get("schedule.lambda_max")?)),
        ("schedule.width", c.str("schedule.width").to_string()),
    ];
    let mut sets = vec![("denoiser", net.params())];
    if let ScheduleKind::Learned(mono) = sched.kind() {
        sets.push(("schedule", mono.params()));
    }
    Ok(write_checkpoint(&meta, &sets))
}

/// Rebuilds the network and schedule of a checkpoint after checking that
/// its noise-level range and schedule family match the config.
pub fn load_checkpoint(c: &Config, text: &str) -> Result<(DenoiserNet, NoiseSchedule)> {
    let ck = read_checkpoint(text)?;
    let meta = |k: &str| ck.meta(k).with_context(|| format!("checkpoint lacks {k}"));
    for key in ["schedule.lambda_min", "schedule.lambda_max"] {
        let saved: f64 = meta(key)?.parse().with_context(|| format!("checkpoint {key}"))?;
        let want: f64 = c.get(key)?;
        if saved != want {
            return Err(Incompatible(format!("{key} is {saved} in the checkpoint but {want} in the config")).into());
        }
    }
    if meta("schedule.kind")? != c.str("schedule.kind") {
        return Err(Incompatible(format!(
            "schedule.kind is {} in the checkpoint but {} in the config",
            meta("schedule.kind")?,
            c.str("schedule.kind")
        ))
        .into());
    }
    let hidden = meta("model.hidden")?
        .split(';')
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<std::result::Result<Vec<usize>, _>>()?;
    let mut dc = DenoiserConfig::new(meta("dim")?.parse()?, hidden, PredictionKind::from_name(meta("model.kind")?)?);
    dc.n_freq = meta("model.n_freq")?.parse()?;
    dc.residual = meta("model.residual")?.parse()?;
    let mut net = DenoiserNet::new(dc, 0)?;
    ck.load_into("denoiser", net.params_mut())?;
    let (lo, hi): (f64, f64) = (c.get("schedule.lambda_min")?, c.get("schedule.lambda_max")?);
    let sched = if c.str("schedule.kind") == "learned" {
        let mut mono = MonotonicNet::seeded(0, meta("schedule.width")?.parse()?, -hi, -lo);
        ck.load_into("schedule", mono.params_mut())?;
        NoiseSchedule::learned(mono)
    } else {
        NoiseSchedule::from_name(c.str("schedule.kind"), lo, hi)?
    };
    Ok((net, sched))
}

// ---- sample ----

fn sample(cfg: &RunConfig, out: &mut OutputDir, m: &mut RunManifest) -> Result<()> {
    let c = &cfg.values;
    let n: usize = c.get("sample.n")?;
    let opts = SamplerOptions {
        variance: match c.str("sample.variance") {
            "posterior" => SamplerVariance::Posterior,
            "alternative" => SamplerVariance::PrintedAlternative,
            other => bail!("unknown sample.variance {other:?}"),
        },
        trace_chain: Some(c.get("sample.trace_chain")?),
        ..SamplerOptions::new(c.get("sample.steps")?)
    };
    let mut rng = stream_rng(cfg.seed, stream::SAMPLER);
    let (samples, path) = match c.str("sample.denoiser") {
        "checkpoint" => {
            let path = match c.str("sample.checkpoint") {
                "" => cfg.out.join("checkpoint.txt"),
                p => PathBuf::from(p),
            };
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let (net, sched) = load_checkpoint(c, &text)?;
            let dim = net.config().dim;
            ancestral_sample(&net, &sched, n, dim, &opts, &mut rng)?
        }
        "analytic" => {
            let oracle = gaussian_oracle(c)?;
            let sched = build_schedule(c, cfg.seed)?;
            ancestral_sample(&oracle as &dyn Denoiser, &sched, n, oracle.dim(), &opts, &mut rng)?
        }
        other => bail!("unknown sample.denoiser {other:?}"),
    };
    let d = samples.cols();
    let cols: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
    let mut t = Table::new(&cols);
    for i in 0..samples.rows() {
        t.push_nums(samples.row(i));
    }
    out.table("samples.csv", &t)?;

    let mut header = vec!["step".to_string(), "t".to_string()];
    header.extend((1..=d).map(|j| format!("z{j}")));
    let mut traj = Table::new(&header);
    if let Some(p) = &path {
        for (i, (tt, z)) in p.times().iter().zip(p.latents()).enumerate() {
            let mut row = vec![i.to_string(), num(*tt)];
            row.extend(z.data().iter().map(|&v| num(v)));
            traj.push(row);
        }
    }
    out.table("trajectory.csv", &traj)?;

    for j in 0..d {
        let col: Vec<f64> = (0..samples.rows()).map(|i| samples.row(i)[j]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (col.len().max(2) - 1) as f64;
        m.metric(&format!("sample_mean_x{}", j + 1), num(mean));
        m.metric(&format!("sample_var_x{}", j + 1), num(var));
    }
    if c.str("data.kind") == "five-clusters" && d == 2 {
        let ds = five_clusters(c.get("data.n")?, c.get("data.seed")?)?;
        m.metric("fraction_within_3_std", num(ds.fraction_near_centers(&samples, 3.0)));
    }
    if svg_enabled(c)? && d >= 2 {
        let pts = (0..samples.rows()).map(|i| (samples.row(i)[0], samples.row(i)[1])).collect();
        out.write("samples.svg", &plot("samples", "x1", "x2", &[Series::points("samples", pts)]))?;
    }
    Ok(())
}

// ---- verify ----

fn verify(cfg: &RunConfig, out: &mut OutputDir, m: &mut RunManifest) -> Result<()> {
    let c = &cfg.values;
    let opts = VerifyOptions {
        pairs: c.get("verify.pairs")?,
        draws: c.get("verify.draws")?,
        mc_samples: c.get("verify.mc_samples")?,
        ..Default::default()
    };
    let rows = run_invariants(&opts, cfg.seed);
    out.table("verification_report.csv", &report_table(&rows))?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.check).collect();
    m.metric("checks", rows.len());
    m.metric("passed", rows.len() - failed.len());
    m.metric("failed", failed.join(","));
    if !failed.is_empty() {
        bail!("{} of {} checks failed: {}", failed.len(), rows.len(), failed.join(", "));
    }
    Ok(())
}

// ---- hole-demo ----

fn mixture_draws(q: &GaussianMixture, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let d = q.dim();
    let mut data = Vec::with_capacity(n * d);
    while data.len() < n * d {
        data.extend(q.sample_each(rng).into_data());
    }
    data.truncate(n * d);
    Ok(Tensor::new(vec![n, d], data)?)
}

fn ks_per_dim(points: &Tensor) -> Result<Vec<KsResult>> {
    (0..points.cols())
        .map(|j| {
            let col: Vec<f64> = (0..points.rows()).map(|i| points.row(i)[j]).collect();
            Ok(ks_test_standard_normal(&col)?)
        })
        .collect()
}

fn hole_demo(cfg: &RunConfig, out: &mut OutputDir, m: &mut RunManifest) -> Result<()> {
    let c = &cfg.values;
    let latent: usize = c.get("vae.latent")?;
    if latent != 2 {
        bail!("hole-demo plots a 2-D latent space; vae.latent must be 2");
    }
    let data_seed: u64 = c.get("data.seed")?;
    let ds = five_clusters(c.get("hole.mixture_points")?, data_seed)?;
    let mut vae = VaeModel::new(
        2,
        latent,
        &c.list::<usize>("vae.hidden")?,
        c.get("vae.obs_var")?,
        &mut stream_rng(cfg.seed, stream::VAE_INIT),
    )?;
    let vopts = VaeTrainOptions {
        steps: c.get("vae.steps")?,
        batch: c.get("vae.batch")?,
        lr: c.get("vae.lr")?,
        momentum: c.get("vae.momentum")?,
    };
    let curve = train_vae(&mut vae, &ds.points, &vopts, &mut stream_rng(cfg.seed, stream::VAE_TRAIN))?;
    if let Some(l) = curve.last() {
        m.metric("vae_final_loss", num(*l));
    }
    let sched = build_schedule(c, cfg.seed)?;
    let end = sched.sample_at(1.0)?;
    let q_vae = aggregate_posterior(&vae, &ds.points)?;
    let q_diff = diffusion_marginal(&ds.points, &end)?;

    let pct: f64 = c.get("hole.percentile")?;
    let n_prior: usize = c.get("hole.prior_samples")?;
    let mut hr = stream_rng(cfg.seed, stream::HOLE);
    let h_vae = hole_metric_at(&q_vae, pct, n_prior, &mut hr)?;
    let h_diff = hole_metric_at(&q_diff, pct, n_prior, &mut hr)?;

    let n_ks: usize = c.get("hole.ks_points")?;
    let mut kr = stream_rng(cfg.seed, stream::KS);
    let fresh = five_clusters(n_ks, data_seed.wrapping_add(1))?.points;
    let noise: Vec<f64> = (0..fresh.len()).map(|_| kr.sample(StandardNormal)).collect();
    let z1 = vdm_core::diffusion::diffuse(&fresh, &end, &Tensor::new(fresh.shape().to_vec(), noise)?)?;
    let ks_diff = ks_per_dim(&z1)?;
    let ks_vae = ks_per_dim(&mixture_draws(&q_vae, n_ks, &mut kr)?)?;

    let mut t = Table::new(&["model", "threshold", "metric", "ks_stat_z1", "ks_p_z1", "ks_stat_z2", "ks_p_z2"]);
    for (name, h, ks) in [("vae", h_vae, &ks_vae), ("diffusion", h_diff, &ks_diff)] {
        t.push(vec![
            name.to_string(),
            num(h.threshold),
            num(h.metric),
            num(ks[0].statistic),
            num(ks[0].p_value),
            num(ks[1].statistic),
            num(ks[1].p_value),
        ]);
    }
    out.table("hole_metrics.csv", &t)?;
    m.metric("hole_metric_vae", num(h_vae.metric));
    m.metric("hole_metric_diffusion", num(h_diff.metric));
    m.metric("hole_ratio", num(h_vae.metric / h_diff.metric));
    m.metric("ks_min_p_diffusion", num(ks_diff[0].p_value.min(ks_diff[1].p_value)));

    let g: usize = c.get("hole.grid")?;
    let ext: f64 = c.get("hole.extent")?;
    let coords: Vec<f64> = (0..g).map(|i| -ext + 2.0 * ext * i as f64 / (g.max(2) - 1) as f64).collect();
    let mut grid = Vec::with_capacity(g * g * 2);
    for &a in &coords {
        for &b in &coords {
            grid.extend([a, b]);
        }
    }
    let grid = Tensor::new(vec![g * g, 2], grid)?;
    let dv = q_vae.densities(&grid);
    let dd = q_diff.densities(&grid);
    let mut pv = Table::new(&["z1", "z2", "prior", "vae_aggregate", "diffusion_aggregate"]);
    for i in 0..grid.rows() {
        let z = grid.row(i);
        let prior = (-0.5 * (z[0] * z[0] + z[1] * z[1])).exp() / (2.0 * std::f64::consts::PI);
        pv.push_nums(&[z[0], z[1], prior, dv[i], dd[i]]);
    }
    out.table("prior_vs_aggregate.csv", &pv)?;

    if svg_enabled(c)? {
        let draws = mixture_draws(&q_vae, 2000, &mut kr)?;
        let vp = (0..draws.rows()).map(|i| (draws.row(i)[0], draws.row(i)[1])).collect();
        let dp = (0..2000.min(z1.rows())).map(|i| (z1.row(i)[0], z1.row(i)[1])).collect();
        out.write(
            "latents.svg",
            &plot("aggregate posteriors", "z1", "z2", &[Series::points("vae", vp), Series::points("diffusion", dp)]),
        )?;
    }
    Ok(())
}

// ---- schedule-dump and param-table ----

fn schedule_dump(cfg: &RunConfig, out: &mut OutputDir, _m: &mut RunManifest) -> Result<()> {
    let c = &cfg.values;
    let sched = build_schedule(c, cfg.seed)?;
    let rows: usize = c.get("dump.rows")?;
    if rows < 2 {
        bail!("dump.rows must be at least 2");
    }
    let mut t = Table::new(&["t", "alpha", "sigma2", "lambda", "p_lambda"]);
    let mut pts = Vec::with_capacity(rows);
    for i in 0..rows {
        let tt = i as f64 / (rows - 1) as f64;
        let s = sched.sample_at(tt)?;
        t.push_nums(&[tt, s.alpha, s.sigma2, s.lambda, sched.lambda_density(s.lambda)?]);
        pts.push((tt, s.lambda));
    }
    out.table("schedule.csv", &t)?;
    if svg_enabled(c)? {
        out.write("schedule.svg", &plot(sched.name(), "t", "log-SNR", &[Series::line("lambda", pts)]))?;
    }
    Ok(())
}

fn param_table(cfg: &RunConfig, out: &mut OutputDir, m: &mut RunManifest) -> Result<()> {
    let lambda: f64 = cfg.values.get("dump.lambda")?;
    let s = ScheduleSample::from_lambda(0.5, lambda);
    m.metric("alpha", num(s.alpha));
    m.metric("sigma", num(s.sigma()));
    let mut t = Table::new(&["from", "to", "coef_z", "coef_pred", "loss_factor"]);
    for r in conversion_table(&s)? {
        t.push(vec![
            r.from.name().to_string(),
            r.to.name().to_string(),
            num(r.coef_z),
            num(r.coef_pred),
            num(r.loss_factor),
        ]);
    }
    out.table("param_table.csv", &t)?;
    Ok(())
}
