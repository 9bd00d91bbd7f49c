//! Monte Carlo estimators of the diffusion loss: discrete-time `𝓛_T`,
//! continuous-time weighted `𝓛_w` under uniform time or importance-sampled
//! noise levels, the KL over a sub-interval, the weighted-ELBO identity,
//! the adaptive noise-level density and the importance-sampling variance
//! gap.
//!
//! Estimates are computed in parallel over fixed-size chunks; each chunk
//! draws from its own RNG stream and per-sample terms are concatenated in
//! sample order, so results are reproducible regardless of thread count.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::diffusion::{generative_mean, posterior_params, stream_rng, Denoiser};
use crate::error::{Result, VdmError};
use crate::oracle::AnalyticGaussianOracle;
use crate::param::{convert, loss_factor, target, Prediction, PredictionKind};
use crate::schedule::{weighting_cdf_check, NoiseSchedule, ScheduleSample, WeightingClass, WeightingFn};
use crate::tensor::Tensor;

const CHUNK: usize = 4096;

/// A Monte Carlo estimate with its per-sample terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEstimate {
    pub value: f64,
    pub n_samples: usize,
    pub per_sample: Vec<f64>,
    pub std_error: f64,
}

impl LossEstimate {
    pub fn from_samples(per_sample: Vec<f64>) -> Self {
        let n = per_sample.len();
        let value = if n == 0 { 0.0 } else { per_sample.iter().sum::<f64>() / n as f64 };
        let std_error = if n < 2 {
            0.0
        } else {
            let ss: f64 = per_sample.iter().map(|v| (v - value).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
        };
        Self {
            value,
            n_samples: n,
            per_sample,
            std_error,
        }
    }

    /// Sample standard deviation of the per-sample terms.
    pub fn sample_std(&self) -> f64 {
        self.std_error * (self.n_samples as f64).sqrt()
    }
}

/// Where data points come from.
#[derive(Debug, Clone, Copy)]
pub enum DataSource<'a> {
    /// A single data point: estimates `𝓛(x)` for that `x`.
    Point(&'a Tensor),
    /// Rows of a dataset drawn uniformly.
    Empirical(&'a Tensor),
    /// Fresh draws from Gaussian data.
    Gaussian(&'a AnalyticGaussianOracle),
}

impl DataSource<'_> {
    pub fn dim(&self) -> usize {
        match self {
            DataSource::Point(x) => x.len(),
            DataSource::Empirical(d) => d.cols(),
            DataSource::Gaussian(o) => o.dim(),
        }
    }

    fn draw(&self, rng: &mut impl Rng, out: &mut [f64]) -> Result<()> {
        match self {
            DataSource::Point(x) => out.copy_from_slice(x.data()),
            DataSource::Empirical(d) => {
                if d.rows() == 0 {
                    return Err(VdmError::EmptyDataset);
                }
                let i = rng.random_range(0..d.rows());
                out.copy_from_slice(d.row(i));
            }
            DataSource::Gaussian(o) => {
                for (j, v) in out.iter_mut().enumerate() {
                    let e: f64 = rng.sample(StandardNormal);
                    *v = o.mean()[j] + o.var()[j].sqrt() * e;
                }
            }
        }
        Ok(())
    }
}

/// One noise level visited by a Monte Carlo sample and the factor on
/// `‖ε − ε̂‖²` there.
type Level = (ScheduleSample, f64);

/// Runs `n_mc` samples; each sample draws one `x`, a list of levels, and
/// contributes `Σ_k weight_k·‖ε_k − ε̂_k‖²` with independent noise per level.
fn estimate<F>(data: &DataSource, net: &dyn Denoiser, n_mc: usize, rng: &mut impl Rng, levels: F) -> Result<LossEstimate>
where
    F: Fn(&mut ChaCha8Rng) -> Result<Vec<Level>> + Sync,
{
    let d = data.dim();
    let base: u64 = rng.random();
    let n_chunks = n_mc.div_ceil(CHUNK);
    let kind = net.kind();
    let parts: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| -> Result<Vec<f64>> {
            let mut r = stream_rng(base, c as u64);
            let m = CHUNK.min(n_mc - c * CHUNK);
            let mut owner = Vec::new();
            let mut samples = Vec::new();
            let mut weights = Vec::new();
            let mut xs = Vec::new();
            let mut eps = Vec::new();
            let mut x = vec![0.0; d];
            for j in 0..m {
                data.draw(&mut r, &mut x)?;
                for (s, w) in levels(&mut r)? {
                    owner.push(j);
                    samples.push(s);
                    weights.push(w);
                    xs.extend_from_slice(&x);
                    for _ in 0..d {
                        eps.push(r.sample::<f64, _>(StandardNormal));
                    }
                }
            }
            let rows = samples.len();
            let mut per = vec![0.0; m];
            if rows == 0 {
                return Ok(per);
            }
            let xt = Tensor::new(vec![rows, d], xs)?;
            let et = Tensor::new(vec![rows, d], eps)?;
            let mut z = et.clone();
            for i in 0..rows {
                let (a, sg) = (samples[i].alpha, samples[i].sigma());
                let xi = xt.row(i).to_vec();
                for (zv, xv) in z.row_mut(i).iter_mut().zip(xi) {
                    *zv = a * xv + sg * *zv;
                }
            }
            let out = net.predict_rows(&z, &samples)?;
            for i in 0..rows {
                if weights[i] == 0.0 {
                    continue;
                }
                let s = &samples[i];
                let (a, b) = kind.coordinates(s.alpha, s.sigma());
                let mut err = 0.0;
                for ((xv, ev), pv) in xt.row(i).iter().zip(et.row(i)).zip(out.row(i)) {
                    let e = a * xv + b * ev - pv;
                    err += e * e;
                }
                let f = if kind == PredictionKind::Eps {
                    1.0
                } else {
                    loss_factor(kind, PredictionKind::Eps, s)?
                };
                per[owner[i]] += weights[i] * f * err;
            }
            Ok(per)
        })
        .collect::<Result<_>>()?;
    let per: Vec<f64> = parts.into_iter().flatten().collect();
    if per.iter().any(|v| !v.is_finite()) {
        return Err(VdmError::NonFinite("loss estimate"));
    }
    Ok(LossEstimate::from_samples(per))
}

/// `½(SNR(s) − SNR(t))‖x − x̂‖²`.
pub fn kl_term(x: &Tensor, z_t: &Tensor, pred: &Prediction, s: &ScheduleSample, t: &ScheduleSample) -> Result<f64> {
    if s.t >= t.t {
        return Err(VdmError::Ordering { s: s.t, t: t.t });
    }
    let xh = convert(pred, z_t, t, PredictionKind::X)?;
    Ok(0.5 * snr_difference(s, t) * x.sq_dist(&xh.value)?)
}

/// `SNR(s) − SNR(t) = SNR(t)·expm1(λ_s − λ_t)`.
pub fn snr_difference(s: &ScheduleSample, t: &ScheduleSample) -> f64 {
    t.snr() * (s.lambda - t.lambda).exp_m1()
}

/// `SNR(s)/SNR(t) − 1` computed as `expm1(γ_t − γ_s)`.
pub fn loss_constant_stable(gamma_s: f64, gamma_t: f64) -> f64 {
    (gamma_t - gamma_s).exp_m1()
}

/// `SNR(s)/SNR(t) − 1` computed literally.
pub fn loss_constant_naive(s: &ScheduleSample, t: &ScheduleSample) -> f64 {
    let snr = |p: &ScheduleSample| p.alpha2() / p.sigma2;
    snr(s) / snr(t) - 1.0
}

/// KL between `q(z_s | z_t, x)` and `p(z_s | z_t)` straight from the two
/// Gaussians: `‖μ_Q − μ_θ‖² / (2σ²_Q)`.
pub fn kl_from_means(x: &Tensor, z_t: &Tensor, pred: &Prediction, s: &ScheduleSample, t: &ScheduleSample) -> Result<f64> {
    let post = posterior_params(s, t)?;
    let mq = post.mean(z_t, x)?;
    let mp = generative_mean(pred, z_t, s, t)?;
    Ok(mq.sq_dist(&mp)? / (2.0 * post.sigma2_q))
}

/// `𝓛_T` with `i ~ U{1..T}`:
/// `(T/2)·(SNR(s)/SNR(t) − 1)‖ε − ε̂‖²` per sample.
pub fn discrete_loss(
    data: &DataSource,
    net: &dyn Denoiser,
    sched: &NoiseSchedule,
    steps: usize,
    n_mc: usize,
    rng: &mut impl Rng,
) -> Result<LossEstimate> {
    if steps == 0 || n_mc == 0 {
        return Err(VdmError::Precondition("discrete loss needs T >= 1 and n_mc >= 1".into()));
    }
    let grid: Vec<ScheduleSample> = (0..=steps)
        .map(|i| sched.sample_at(i as f64 / steps as f64))
        .collect::<Result<_>>()?;
    let half_t = 0.5 * steps as f64;
    estimate(data, net, n_mc, rng, |r| {
        let i = if steps == 1 { 1 } else { r.random_range(1..=steps) };
        let (s, t) = (&grid[i - 1], &grid[i]);
        Ok(vec![(*t, half_t * loss_constant_stable(-s.lambda, -t.lambda))])
    })
}

/// `𝓛_T` summing every step, with fresh noise per step.
pub fn discrete_loss_exhaustive(
    data: &DataSource,
    net: &dyn Denoiser,
    sched: &NoiseSchedule,
    steps: usize,
    n_mc: usize,
    rng: &mut impl Rng,
) -> Result<LossEstimate> {
    if steps == 0 || n_mc == 0 {
        return Err(VdmError::Precondition("discrete loss needs T >= 1 and n_mc >= 1".into()));
    }
    let grid: Vec<ScheduleSample> = (0..=steps)
        .map(|i| sched.sample_at(i as f64 / steps as f64))
        .collect::<Result<_>>()?;
    let levels: Vec<Level> = (1..=steps)
        .map(|i| (grid[i], 0.5 * loss_constant_stable(-grid[i - 1].lambda, -grid[i].lambda)))
        .collect();
    estimate(data, net, n_mc, rng, |_| Ok(levels.clone()))
}

/// Proposal over noise levels for importance sampling.
#[derive(Debug, Clone, Copy)]
pub enum LambdaProposal<'a> {
    /// Uniform on `[λ_min, λ_max]` of the loss schedule.
    Uniform,
    /// The density implied by another schedule.
    Schedule(&'a NoiseSchedule),
    /// A histogram density adapted to the loss.
    Adaptive(&'a AdaptiveScheduleState),
}

impl LambdaProposal<'_> {
    fn sample(&self, sched: &NoiseSchedule, r: &mut impl Rng) -> Result<f64> {
        match self {
            LambdaProposal::Uniform => Ok(r.random_range(sched.lambda_min()..=sched.lambda_max())),
            LambdaProposal::Schedule(p) => p.lambda(r.random_range(0.0..=1.0)),
            LambdaProposal::Adaptive(a) => Ok(a.sample(r)),
        }
    }

    pub fn density(&self, sched: &NoiseSchedule, lambda: f64) -> f64 {
        match self {
            LambdaProposal::Uniform => {
                if lambda < sched.lambda_min() || lambda > sched.lambda_max() {
                    0.0
                } else {
                    1.0 / (sched.lambda_max() - sched.lambda_min())
                }
            }
            LambdaProposal::Schedule(p) => p.lambda_density(lambda).unwrap_or(0.0),
            LambdaProposal::Adaptive(a) => a.pdf(lambda),
        }
    }
}

/// How noise levels are drawn by [`continuous_loss`].
#[derive(Debug, Clone, Copy)]
pub enum TimeDistribution<'a> {
    /// `t ~ U(0,1)`; per-sample factor `½·w(λ_t)·(−dλ/dt)`.
    UniformT,
    /// `λ ~ p`; per-sample factor `½·w(λ)/p(λ)`.
    ImportanceLambda(LambdaProposal<'a>),
}

const SUPPORT_SCAN: usize = 1001;

/// `𝓛_w = ½ ∫ w(λ)·E‖ε − ε̂‖² dλ` over the schedule's `[λ_min, λ_max]`.
pub fn continuous_loss(
    data: &DataSource,
    net: &dyn Denoiser,
    sched: &NoiseSchedule,
    weighting: &WeightingFn,
    n_mc: usize,
    rng: &mut impl Rng,
    time_dist: TimeDistribution,
) -> Result<LossEstimate> {
    if n_mc == 0 {
        return Err(VdmError::Precondition("continuous loss needs n_mc >= 1".into()));
    }
    match time_dist {
        TimeDistribution::UniformT => estimate(data, net, n_mc, rng, |r| {
            let t = r.random_range(0.0..=1.0);
            let s = sched.sample_at(t)?;
            let w = weighting.eval(s.lambda);
            Ok(vec![(s, 0.5 * w * -sched.dlambda_dt(t)?)])
        }),
        TimeDistribution::ImportanceLambda(p) => {
            let (lo, hi) = (sched.lambda_min(), sched.lambda_max());
            for i in 0..SUPPORT_SCAN {
                let l = lo + (hi - lo) * i as f64 / (SUPPORT_SCAN - 1) as f64;
                if weighting.eval(l) > 0.0 && !(p.density(sched, l) > 0.0) {
                    return Err(VdmError::InvalidImportance { lambda: l });
                }
            }
            estimate(data, net, n_mc, rng, |r| {
                let l = p.sample(sched, r)?;
                let dens = p.density(sched, l);
                let w = weighting.eval(l);
                if dens <= 0.0 {
                    return Err(VdmError::InvalidImportance { lambda: l });
                }
                let t = sched.t_of_lambda(l.clamp(lo, hi))?;
                Ok(vec![(ScheduleSample::from_lambda(t, l), 0.5 * w / dens)])
            })
        }
    }
}

/// `𝓛(t₀; x) = ½ ∫_{λ_min}^{λ(t₀)} E‖ε − ε̂‖² dλ`, the KL from `t₀` to 1,
/// with `t ~ U(t₀, 1)`.
pub fn partial_kl(
    data: &DataSource,
    net: &dyn Denoiser,
    sched: &NoiseSchedule,
    t0: f64,
    n_mc: usize,
    rng: &mut impl Rng,
) -> Result<LossEstimate> {
    if !(0.0..=1.0).contains(&t0) {
        return Err(VdmError::Domain {
            value: t0,
            domain: "t0 in [0, 1]",
        });
    }
    if n_mc == 0 {
        return Err(VdmError::Precondition("partial KL needs n_mc >= 1".into()));
    }
    if t0 == 1.0 {
        return Ok(LossEstimate::from_samples(vec![0.0; n_mc]));
    }
    estimate(data, net, n_mc, rng, |r| {
        let t = r.random_range(t0..=1.0);
        Ok(vec![(sched.sample_at(t)?, 0.5 * (1.0 - t0) * -sched.dlambda_dt(t)?)])
    })
}

/// Both sides of `𝓛_w = ∫ p_w(t)·𝓛(t) dt + w(λ_max)·𝓛(0)` (the
/// `w(λ_min)·𝓛(1)` term vanishes), where `p_w(t) = d/dt w(λ_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityReport {
    pub class: WeightingClass,
    /// `𝓛_w` by [`continuous_loss`] under uniform time.
    pub weighted: LossEstimate,
    /// The integral of partial KLs plus the endpoint term.
    pub integral_of_elbos: LossEstimate,
    /// Estimate of the endpoint term `w(λ_max)·𝓛(0)`.
    pub endpoint_term: f64,
    /// `w(λ_max)` and `w(λ_min)`.
    pub w_endpoints: (f64, f64),
}

impl IdentityReport {
    pub fn residual(&self) -> f64 {
        (self.weighted.value - self.integral_of_elbos.value).abs()
    }

    /// Three combined standard errors.
    pub fn mc_band(&self) -> f64 {
        3.0 * (self.weighted.std_error.powi(2) + self.integral_of_elbos.std_error.powi(2)).sqrt()
    }
}

/// Inverse of the monotone `t ↦ w(λ_t)` at level `target` by bisection.
fn invert_weight(w: &WeightingFn, sched: &NoiseSchedule, target: f64) -> Result<f64> {
    let (mut a, mut b) = (0.0_f64, 1.0_f64);
    for _ in 0..60 {
        let m = 0.5 * (a + b);
        if w.eval(sched.lambda(m)?) < target {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

/// Estimates both sides of the weighted-ELBO identity for a monotone
/// weighting. The right side samples `t ~ p_w` by inverting
/// `w(λ_t)`, then `t′ ~ U(t, 1)` for `𝓛(t)`.
pub fn monotone_weighting_identity_check(
    data: &DataSource,
    net: &dyn Denoiser,
    sched: &NoiseSchedule,
    w: &WeightingFn,
    n_mc: usize,
    rng: &mut impl Rng,
) -> Result<IdentityReport> {
    let report = weighting_cdf_check(w, sched)?;
    if !matches!(report.class, WeightingClass::Cdf | WeightingClass::CdfAfterRenormalization) {
        return Err(VdmError::Precondition(format!(
            "weighting {} is not a CDF in t: {:?}",
            w.name(),
            report.class
        )));
    }
    let (a0, a1) = (report.w_at_0, report.w_at_1);
    let mass = a1 - a0;
    let weighted = continuous_loss(data, net, sched, w, n_mc, rng, TimeDistribution::UniformT)?;
    let integral_of_elbos = estimate(data, net, n_mc, rng, |r| {
        let u: f64 = r.random_range(0.0..=1.0);
        let t = invert_weight(w, sched, a0 + u * mass)?;
        let tp = r.random_range(t..=1.0);
        let t0 = r.random_range(0.0..=1.0);
        Ok(vec![
            (sched.sample_at(tp)?, mass * 0.5 * (1.0 - t) * -sched.dlambda_dt(tp)?),
            (sched.sample_at(t0)?, a0 * 0.5 * -sched.dlambda_dt(t0)?),
        ])
    })?;
    let endpoint_term = a0 * partial_kl(data, net, sched, 0.0, n_mc, rng)?.value;
    Ok(IdentityReport {
        class: report.class,
        weighted,
        integral_of_elbos,
        endpoint_term,
        w_endpoints: (a0, a1),
    })
}

/// Histogram density over `λ` proportional to an exponential moving
/// average of the observed weighted loss per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveScheduleState {
    lambda_min: f64,
    lambda_max: f64,
    decay: f64,
    ema: Vec<f64>,
    counts: Vec<u64>,
}

impl AdaptiveScheduleState {
    pub const DEFAULT_BINS: usize = 64;
    pub const DEFAULT_DECAY: f64 = 0.99;

    pub fn new(lambda_min: f64, lambda_max: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(lambda_min < lambda_max) {
            return Err(VdmError::Precondition("adaptive density needs bins > 0 and lambda_min < lambda_max".into()));
        }
        Ok(Self {
            lambda_min,
            lambda_max,
            decay: Self::DEFAULT_DECAY,
            ema: vec![0.0; bins],
            counts: vec![0; bins],
        })
    }

    pub fn bins(&self) -> usize {
        self.ema.len()
    }

    pub fn bin_width(&self) -> f64 {
        (self.lambda_max - self.lambda_min) / self.bins() as f64
    }

    pub fn bin_of(&self, lambda: f64) -> usize {
        let b = ((lambda - self.lambda_min) / self.bin_width()).floor();
        (b.max(0.0) as usize).min(self.bins() - 1)
    }

    pub fn bin_center(&self, b: usize) -> f64 {
        self.lambda_min + (b as f64 + 0.5) * self.bin_width()
    }

    /// Folds one observation of `w(λ)·‖ε − ε̂‖²` into its bin.
    pub fn update(&mut self, lambda: f64, observed_weighted_loss: f64) -> Result<()> {
        if lambda < self.lambda_min || lambda > self.lambda_max || lambda.is_nan() {
            return Err(VdmError::Domain {
                value: lambda,
                domain: "lambda in [lambda_min, lambda_max]",
            });
        }
        if !(observed_weighted_loss >= 0.0) || !observed_weighted_loss.is_finite() {
            return Err(VdmError::Domain {
                value: observed_weighted_loss,
                domain: "finite non-negative loss",
            });
        }
        let b = self.bin_of(lambda);
        self.ema[b] = self.decay * self.ema[b] + (1.0 - self.decay) * observed_weighted_loss;
        self.counts[b] += 1;
        Ok(())
    }

    /// Bias-corrected per-bin averages; bins never observed take the mean
    /// of the observed ones (all equal when nothing was observed).
    fn levels(&self) -> Vec<f64> {
        let corrected: Vec<Option<f64>> = self
            .ema
            .iter()
            .zip(&self.counts)
            .map(|(&e, &n)| (n > 0).then(|| e / (1.0 - self.decay.powi(n.min(i32::MAX as u64) as i32))))
            .collect();
        let seen: Vec<f64> = corrected.iter().flatten().copied().collect();
        let fill = if seen.is_empty() { 1.0 } else { seen.iter().sum::<f64>() / seen.len() as f64 };
        corrected.into_iter().map(|c| c.unwrap_or(fill)).collect()
    }

    /// Probability of each bin; sums to 1.
    pub fn density(&self) -> Vec<f64> {
        let lv = self.levels();
        let total: f64 = lv.iter().sum();
        if total <= 0.0 {
            return vec![1.0 / self.bins() as f64; self.bins()];
        }
        lv.iter().map(|v| v / total).collect()
    }

    /// Density with respect to `λ`.
    pub fn pdf(&self, lambda: f64) -> f64 {
        if lambda < self.lambda_min || lambda > self.lambda_max {
            return 0.0;
        }
        self.density()[self.bin_of(lambda)] / self.bin_width()
    }

    pub fn sample(&self, r: &mut impl Rng) -> f64 {
        let d = self.density();
        let u: f64 = r.random_range(0.0..1.0);
        let mut acc = 0.0;
        let mut b = d.len() - 1;
        for (i, p) in d.iter().enumerate() {
            acc += p;
            if u < acc {
                b = i;
                break;
            }
        }
        self.lambda_min + (b as f64 + r.random_range(0.0..1.0)) * self.bin_width()
    }
}

/// `∫ (1 − w(λ)/p(λ))·h²(λ)·w(λ) dλ` from quadrature nodes: the variance
/// reduction of sampling `λ ~ p` instead of `λ ~ w` (with `w` normalized).
/// Positive means `p` is the better proposal.
pub fn variance_gap(lambdas: &[f64], quad_weights: &[f64], h: &[f64], w: &[f64], p: &[f64]) -> Result<f64> {
    let n = lambdas.len();
    if [quad_weights.len(), h.len(), w.len(), p.len()].iter().any(|&m| m != n) {
        return Err(VdmError::Dimension {
            expected: vec![n],
            got: vec![quad_weights.len(), h.len(), w.len(), p.len()],
        });
    }
    let mut acc = 0.0;
    for i in 0..n {
        if w[i] == 0.0 || h[i] == 0.0 {
            continue;
        }
        if !(p[i] > 0.0) {
            return Err(VdmError::InvalidImportance { lambda: lambdas[i] });
        }
        acc += quad_weights[i] * (1.0 - w[i] / p[i]) * h[i] * h[i] * w[i];
    }
    Ok(acc)
}

/// Trapezoid nodes and weights on `n` points of `[lo, hi]`.
pub fn trapezoid(lo: f64, hi: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let h = (hi - lo) / (n - 1) as f64;
    let nodes = (0..n).map(|i| if i + 1 == n { hi } else { lo + h * i as f64 }).collect();
    let weights = (0..n)
        .map(|i| if i == 0 || i + 1 == n { 0.5 * h } else { h })
        .collect();
    (nodes, weights)
}

/// `‖target − prediction‖²` in the prediction's own space.
pub fn native_sq_error(pred: &Prediction, x: &Tensor, eps: &Tensor, sample: &ScheduleSample) -> Result<f64> {
    target(pred.kind, x, eps, sample)?.sq_dist(&pred.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::diffuse;
    use crate::oracle::unit_gaussian_continuous_loss;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn estimate_statistics() {
        let e = LossEstimate::from_samples(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.value, 2.5);
        assert_relative_eq!(e.std_error, (5.0f64 / 3.0).sqrt() / 2.0, max_relative = 1e-15);
    }

    #[test]
    fn kl_term_example_and_cross_check() {
        // SNR(s) = 4.2632 (α²=0.81, σ²=0.19), SNR(t) = 0.5625 (α²=0.36, σ²=0.64)
        let s = ScheduleSample { t: 0.3, alpha: 0.9, sigma2: 0.19, lambda: (0.81f64 / 0.19).ln() };
        let t = ScheduleSample { t: 0.6, alpha: 0.6, sigma2: 0.64, lambda: (0.36f64 / 0.64).ln() };
        let x = Tensor::vector(vec![1.0]);
        let z = Tensor::vector(vec![0.7]);
        let pred = Prediction::new(PredictionKind::X, Tensor::vector(vec![0.9]), t.lambda);
        let kl = kl_term(&x, &z, &pred, &s, &t).unwrap();
        assert!((kl - 0.018503).abs() < 1e-6);
        assert_relative_eq!(kl, kl_from_means(&x, &z, &pred, &s, &t).unwrap(), max_relative = 1e-10);
        let perfect = Prediction::new(PredictionKind::X, x.clone(), t.lambda);
        assert_eq!(kl_term(&x, &z, &perfect, &s, &t).unwrap(), 0.0);
    }

    #[test]
    fn stable_loss_constant_matches_ratio_form() {
        let sched = NoiseSchedule::cosine(-6.0, 6.0).unwrap();
        for (a, b) in [(0.1, 0.2), (0.4, 0.9), (0.0, 1.0)] {
            let s = sched.sample_at(a).unwrap();
            let t = sched.sample_at(b).unwrap();
            let st = loss_constant_stable(-s.lambda, -t.lambda);
            assert_relative_eq!(st, loss_constant_naive(&s, &t), max_relative = 1e-10);
            assert_relative_eq!(st * t.snr(), snr_difference(&s, &t), max_relative = 1e-12);
        }
    }

    #[test]
    fn single_step_needs_no_index_sampling() {
        let sched = NoiseSchedule::linear(-6.0, 6.0).unwrap();
        let o = AnalyticGaussianOracle::unit(1);
        let data = DataSource::Gaussian(&o);
        let a = discrete_loss(&data, &o, &sched, 1, 20_000, &mut rng(3)).unwrap();
        let b = discrete_loss_exhaustive(&data, &o, &sched, 1, 20_000, &mut rng(3)).unwrap();
        assert_eq!(a.per_sample, b.per_sample);
        let exact = o.discrete_loss_exact(&sched, 1).unwrap();
        assert!((a.value - exact).abs() < 4.0 * a.std_error);
    }

    #[test]
    fn perfect_denoiser_has_zero_loss() {
        let sched = NoiseSchedule::linear(-6.0, 6.0).unwrap();
        let x = Tensor::vector(vec![0.3, -1.0]);
        let point = AnalyticGaussianOracle::new(x.data().to_vec(), vec![0.0, 0.0]).unwrap();
        let data = DataSource::Point(&x);
        let e = continuous_loss(&data, &point, &sched, &WeightingFn::Uniform, 1000, &mut rng(1), TimeDistribution::UniformT).unwrap();
        assert_eq!((e.value, e.std_error), (0.0, 0.0));
        let d = discrete_loss(&data, &point, &sched, 10, 100, &mut rng(1)).unwrap();
        assert_eq!(d.value, 0.0);
    }

    #[test]
    fn partial_kl_endpoints_and_half_interval() {
        let sched = NoiseSchedule::linear(-6.0, 6.0).unwrap();
        let o = AnalyticGaussianOracle::unit(1);
        let data = DataSource::Gaussian(&o);
        assert_eq!(partial_kl(&data, &o, &sched, 1.0, 10, &mut rng(0)).unwrap().value, 0.0);
        let half = partial_kl(&data, &o, &sched, 0.5, 200_000, &mut rng(4)).unwrap();
        let expect = unit_gaussian_continuous_loss(-6.0, 0.0);
        assert!((expect - 0.3453).abs() < 1e-4);
        assert!((half.value - expect).abs() < 3.5 * half.std_error, "{} vs {expect}", half.value);
        assert!(partial_kl(&data, &o, &sched, 1.5, 10, &mut rng(0)).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let sched = NoiseSchedule::cosine(-6.0, 6.0).unwrap();
        let o = AnalyticGaussianOracle::unit(2);
        let data = DataSource::Gaussian(&o);
        let a = continuous_loss(&data, &o, &sched, &WeightingFn::Uniform, 10_000, &mut rng(5), TimeDistribution::UniformT).unwrap();
        let b = continuous_loss(&data, &o, &sched, &WeightingFn::Uniform, 10_000, &mut rng(5), TimeDistribution::UniformT).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn importance_support_is_checked() {
        let sched = NoiseSchedule::linear(-6.0, 6.0).unwrap();
        let narrow = NoiseSchedule::linear(-3.0, 3.0).unwrap();
        let o = AnalyticGaussianOracle::unit(1);
        let data = DataSource::Gaussian(&o);
        let r = continuous_loss(
            &data,
            &o,
            &sched,
            &WeightingFn::Uniform,
            10,
            &mut rng(0),
            TimeDistribution::ImportanceLambda(LambdaProposal::Schedule(&narrow)),
        );
        assert!(matches!(r, Err(VdmError::InvalidImportance { .. })));
    }

    #[test]
    fn native_forms_agree() {
        // x, ε and v forms of one error give the same ε-space value
        let t = ScheduleSample::from_lambda(0.4, 1.3);
        let x = Tensor::vector(vec![0.2, -0.7]);
        let eps = Tensor::vector(vec![1.1, 0.4]);
        let z = diffuse(&x, &t, &eps).unwrap();
        let xh = Prediction::new(PredictionKind::X, Tensor::vector(vec![0.1, -0.3]), t.lambda);
        let eh = convert(&xh, &z, &t, PredictionKind::Eps).unwrap();
        let vh = convert(&xh, &z, &t, PredictionKind::V).unwrap();
        let ee = native_sq_error(&eh, &x, &eps, &t).unwrap();
        for p in [&xh, &vh] {
            let f = loss_factor(p.kind, PredictionKind::Eps, &t).unwrap();
            assert_relative_eq!(f * native_sq_error(p, &x, &eps, &t).unwrap(), ee, max_relative = 1e-10);
        }
    }

    #[test]
    fn adaptive_density_fixed_points() {
        let mut a = AdaptiveScheduleState::new(-6.0, 6.0, 64).unwrap();
        let d0 = a.density();
        assert!(d0.iter().all(|p| (p - 1.0 / 64.0).abs() < 1e-15));
        let mut r = rng(2);
        for _ in 0..20_000 {
            let l = r.random_range(-6.0..=6.0);
            a.update(l, 2.0).unwrap();
        }
        assert!(a.density().iter().all(|p| (p - 1.0 / 64.0).abs() < 1e-12));
        let mut one = AdaptiveScheduleState::new(-6.0, 6.0, 4).unwrap();
        for _ in 0..100 {
            one.update(-5.0, 3.0).unwrap();
            one.update(-1.0, 1.0).unwrap();
            one.update(1.0, 0.0).unwrap();
            one.update(5.0, 0.0).unwrap();
        }
        let d = one.density();
        assert_relative_eq!(d[0], 0.75, max_relative = 1e-12);
        assert_relative_eq!(d[1], 0.25, max_relative = 1e-12);
        assert_eq!(d[2], 0.0);
        assert!(one.update(7.0, 1.0).is_err());
        let s: f64 = (0..4).map(|b| one.pdf(one.bin_center(b)) * one.bin_width()).sum();
        assert_relative_eq!(s, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn variance_gap_cases() {
        let (nodes, q) = trapezoid(-6.0, 6.0, 2001);
        let h: Vec<f64> = nodes.iter().map(|l| crate::schedule::sigmoid(*l)).collect();
        let w: Vec<f64> = vec![1.0 / 12.0; nodes.len()];
        let zero = variance_gap(&nodes, &q, &h, &w, &w).unwrap();
        assert_eq!(zero, 0.0);
        // p ∝ |h|·w
        let norm: f64 = nodes.iter().zip(&q).map(|(l, qi)| qi * crate::schedule::sigmoid(*l) / 12.0).sum();
        let opt: Vec<f64> = h.iter().map(|hi| hi / 12.0 / norm).collect();
        let best = variance_gap(&nodes, &q, &h, &w, &opt).unwrap();
        assert!(best > 0.0);
        for shift in [-4.0, -2.0, 2.0, 4.0] {
            let cand: Vec<f64> = nodes.iter().map(|l| crate::schedule::sigmoid(*l + shift)).collect();
            let c: f64 = cand.iter().zip(&q).map(|(a, b)| a * b).sum();
            let cand: Vec<f64> = cand.iter().map(|v| v / c).collect();
            assert!(variance_gap(&nodes, &q, &h, &w, &cand).unwrap() <= best);
        }
        // mass far from h
        let peaked: Vec<f64> = nodes.iter().map(|l| (-(l + 5.5).powi(2) * 8.0).exp()).collect();
        let c: f64 = peaked.iter().zip(&q).map(|(a, b)| a * b).sum();
        let peaked: Vec<f64> = peaked.iter().map(|v| (v / c).max(1e-300)).collect();
        assert!(variance_gap(&nodes, &q, &h, &w, &peaked).unwrap() < 0.0);
        let mut holes = w.clone();
        holes[1000] = 0.0;
        assert!(variance_gap(&nodes, &q, &h, &w, &holes).is_err());
    }
}
