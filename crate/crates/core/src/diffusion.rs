//! Forward marginals, transitions between noise levels, the top-down
//! posterior `q(z_s | z_t, x)`, generative transitions and ancestral
//! sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Result, VdmError};
use crate::nn::DenoiserNet;
use crate::param::{convert, convert_rows, Prediction, PredictionKind, SINGULAR_THRESHOLD};
use crate::schedule::{NoiseSchedule, ScheduleSample};
use crate::tensor::Tensor;

/// Anything that predicts from noisy latents. Row `i` of `z` is at noise
/// level `samples[i]`.
pub trait Denoiser: Sync {
    fn kind(&self) -> PredictionKind;

    fn predict_rows(&self, z: &Tensor, samples: &[ScheduleSample]) -> Result<Tensor>;

    /// Prediction for a latent (or a batch of latents) at one noise level.
    fn predict(&self, z: &Tensor, sample: &ScheduleSample) -> Result<Prediction> {
        let flat = Tensor::new(vec![z.rows(), z.cols()], z.data().to_vec())?;
        let out = self.predict_rows(&flat, &vec![*sample; z.rows()])?;
        Ok(Prediction::new(
            self.kind(),
            out.reshape(z.shape().to_vec())?,
            sample.lambda,
        ))
    }
}

impl Denoiser for DenoiserNet {
    fn kind(&self) -> PredictionKind {
        DenoiserNet::kind(self)
    }

    fn predict_rows(&self, z: &Tensor, samples: &[ScheduleSample]) -> Result<Tensor> {
        let lambdas: Vec<f64> = samples.iter().map(|s| s.lambda).collect();
        self.forward_batch(z, &lambdas)
    }
}

/// `z_t = α_t x + σ_t ε`.
pub fn diffuse(x: &Tensor, sample: &ScheduleSample, eps: &Tensor) -> Result<Tensor> {
    x.axpby(sample.alpha, eps, sample.sigma())
}

/// Parameters of `q(z_t | z_s) = N(α_{t|s} z_s, σ²_{t|s})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionParams {
    pub alpha_ts: f64,
    pub sigma2_ts: f64,
}

pub fn transition_params(s: &ScheduleSample, t: &ScheduleSample) -> Result<TransitionParams> {
    if s.t > t.t {
        return Err(VdmError::Ordering { s: s.t, t: t.t });
    }
    if s.t == t.t {
        return Ok(TransitionParams {
            alpha_ts: 1.0,
            sigma2_ts: 0.0,
        });
    }
    let alpha_ts = t.alpha / s.alpha;
    let sigma2_ts = t.sigma2 - alpha_ts * alpha_ts * s.sigma2;
    if !(sigma2_ts > 0.0) {
        return Err(VdmError::ScheduleMonotonicity {
            s: s.t,
            t: t.t,
            sigma2_ts,
        });
    }
    Ok(TransitionParams { alpha_ts, sigma2_ts })
}

/// `q(z_s | z_t, x) = N(coef_z·z_t + coef_x·x, sigma2_q)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorParams {
    pub coef_z: f64,
    pub coef_x: f64,
    pub sigma2_q: f64,
}

impl PosteriorParams {
    pub fn mean(&self, z_t: &Tensor, x: &Tensor) -> Result<Tensor> {
        z_t.axpby(self.coef_z, x, self.coef_x)
    }
}

/// Moment-matched posterior from the transition parameters. `s = t` gives
/// the point mass at `z_t`.
pub fn posterior_params(s: &ScheduleSample, t: &ScheduleSample) -> Result<PosteriorParams> {
    let tp = transition_params(s, t)?;
    posterior_from_transition(s, t, &tp)
}

/// Same as [`posterior_params`] for a caller-supplied transition.
pub fn posterior_from_transition(
    s: &ScheduleSample,
    t: &ScheduleSample,
    tp: &TransitionParams,
) -> Result<PosteriorParams> {
    if t.sigma2 <= 0.0 {
        return Err(VdmError::EndpointSingularity {
            what: "sigma2_t",
            value: t.sigma2,
        });
    }
    Ok(PosteriorParams {
        coef_z: tp.alpha_ts * s.sigma2 / t.sigma2,
        coef_x: s.alpha * tp.sigma2_ts / t.sigma2,
        sigma2_q: tp.sigma2_ts * s.sigma2 / t.sigma2,
    })
}

/// `c = −expm1(γ_s − γ_t) = 1 − SNR(t)/SNR(s)`, in `(0, 1)` for `γ_s < γ_t`.
pub fn stable_c(gamma_s: f64, gamma_t: f64) -> Result<f64> {
    if !(gamma_s < gamma_t) {
        return Err(VdmError::Ordering {
            s: gamma_s,
            t: gamma_t,
        });
    }
    Ok(-(gamma_s - gamma_t).exp_m1())
}

/// The posterior written through `c`: `σ²_Q = σ²_s·c`,
/// `coef_z = (α_s/α_t)(1 − c)`, `coef_x = α_s·c`.
pub fn posterior_params_stable(
    gamma_s: f64,
    gamma_t: f64,
    s: &ScheduleSample,
    t: &ScheduleSample,
) -> Result<PosteriorParams> {
    let c = stable_c(gamma_s, gamma_t)?;
    let ratio_snr = (gamma_s - gamma_t).exp();
    Ok(PosteriorParams {
        coef_z: s.alpha / t.alpha * ratio_snr,
        coef_x: s.alpha * c,
        sigma2_q: s.sigma2 * c,
    })
}

/// `μ = (α_s/α_t)(z_t + σ_t·expm1(γ_s − γ_t)·ε̂)`.
pub fn posterior_mean_eps_stable(
    gamma_s: f64,
    gamma_t: f64,
    s: &ScheduleSample,
    t: &ScheduleSample,
    z_t: &Tensor,
    eps_hat: &Tensor,
) -> Result<Tensor> {
    stable_c(gamma_s, gamma_t)?;
    let k = s.alpha / t.alpha;
    z_t.axpby(k, eps_hat, k * t.sigma() * (gamma_s - gamma_t).exp_m1())
}

fn check_pred_level(pred: &Prediction, t: &ScheduleSample) -> Result<()> {
    if (pred.lambda - t.lambda).abs() > 1e-9 * (1.0 + t.lambda.abs()) {
        return Err(VdmError::Contract(format!(
            "prediction made at lambda={} used at lambda={}",
            pred.lambda, t.lambda
        )));
    }
    Ok(())
}

/// Mean of `p(z_s | z_t)`, using the closed form for the prediction's
/// kind. Energy gradients have no row of their own; convert them first.
pub fn generative_mean(pred: &Prediction, z_t: &Tensor, s: &ScheduleSample, t: &ScheduleSample) -> Result<Tensor> {
    pred.value.same_shape(z_t)?;
    check_pred_level(pred, t)?;
    let tp = transition_params(s, t)?;
    let (a_ts, s2_ts) = (tp.alpha_ts, tp.sigma2_ts);
    let (a_t, sig_t) = (t.alpha, t.sigma());
    let eps_row = |eps: &Tensor| -> Result<Tensor> {
        if sig_t < SINGULAR_THRESHOLD {
            return Err(VdmError::EndpointSingularity {
                what: "sigma",
                value: sig_t,
            });
        }
        z_t.axpby(1.0 / a_ts, eps, -s2_ts / (a_ts * sig_t))
    };
    match pred.kind {
        PredictionKind::X => posterior_from_transition(s, t, &tp)?.mean(z_t, &pred.value),
        PredictionKind::Eps => eps_row(&pred.value),
        PredictionKind::Score => z_t.axpby(1.0 / a_ts, &pred.value, s2_ts / a_ts),
        PredictionKind::V => {
            let r2 = a_t * a_t + sig_t * sig_t;
            if sig_t < SINGULAR_THRESHOLD {
                return Err(VdmError::EndpointSingularity {
                    what: "sigma",
                    value: sig_t,
                });
            }
            z_t.axpby(
                (1.0 - s2_ts / r2) / a_ts,
                &pred.value,
                -s2_ts * s.alpha / (sig_t * r2),
            )
        }
        PredictionKind::U => {
            // ε̂ = (z + α û)/(α + σ)
            let q = a_t + sig_t;
            let eps = z_t.axpby(1.0 / q, &pred.value, a_t / q)?;
            eps_row(&eps)
        }
        PredictionKind::EnergyGrad => Err(VdmError::Unsupported(
            "energy-gradient predictions have no posterior-mean row; convert to score first".into(),
        )),
    }
}

/// Variance used by the ancestral sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplerVariance {
    /// `σ²_s·c`, the posterior variance.
    #[default]
    Posterior,
    /// `1 − α²_s·c`, an alternative reading of the update rule; kept for
    /// comparison only.
    PrintedAlternative,
}

impl SamplerVariance {
    pub fn variance(self, s: &ScheduleSample, c: f64) -> f64 {
        match self {
            SamplerVariance::Posterior => s.sigma2 * c,
            SamplerVariance::PrintedAlternative => 1.0 - s.alpha2() * c,
        }
    }
}

/// One reverse step `z_s = (α_s/α_t)(z_t − σ_t c ε̂) + σ_Q·noise`.
pub fn ancestral_step(
    pred: &Prediction,
    z_t: &Tensor,
    s: &ScheduleSample,
    t: &ScheduleSample,
    noise: &Tensor,
    variance: SamplerVariance,
) -> Result<Tensor> {
    check_pred_level(pred, t)?;
    noise.same_shape(z_t)?;
    let c = stable_c(-s.lambda, -t.lambda)?;
    let eps = convert(pred, z_t, t, PredictionKind::Eps)?.value;
    let k = s.alpha / t.alpha;
    let mean = z_t.axpby(k, &eps, -k * t.sigma() * c)?;
    mean.axpby(1.0, noise, variance.variance(s, c).sqrt())
}

/// `z_A = (α_A/α_B)·z_B` for two specifications at the same SNR.
pub fn rescale_latent(z_b: &Tensor, alpha_a: f64, alpha_b: f64) -> Result<Tensor> {
    if alpha_b.abs() < SINGULAR_THRESHOLD {
        return Err(VdmError::EndpointSingularity {
            what: "alpha_b",
            value: alpha_b,
        });
    }
    Ok(z_b.scale(alpha_a / alpha_b))
}

/// Latents on an ascending time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPath {
    times: Vec<f64>,
    latents: Vec<Tensor>,
}

impl LatentPath {
    pub fn new(times: Vec<f64>, latents: Vec<Tensor>) -> Result<Self> {
        if times.len() != latents.len() {
            return Err(VdmError::Dimension {
                expected: vec![times.len()],
                got: vec![latents.len()],
            });
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(VdmError::Precondition("path times must be strictly increasing".into()));
        }
        if let Some(first) = latents.first() {
            for l in &latents[1..] {
                first.same_shape(l)?;
            }
        }
        Ok(Self { times, latents })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn latents(&self) -> &[Tensor] {
        &self.latents
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerOptions {
    /// Number of reverse steps `T`.
    pub steps: usize,
    pub variance: SamplerVariance,
    /// Chain whose full trajectory is recorded.
    pub trace_chain: Option<usize>,
    /// Chains advanced together in one batched network call.
    pub chunk: usize,
}

impl SamplerOptions {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            variance: SamplerVariance::Posterior,
            trace_chain: None,
            chunk: 256,
        }
    }
}

/// RNG for stream `stream` under a base seed.
pub fn stream_rng(base: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(base);
    r.set_stream(stream);
    r
}

/// Runs `n` independent reverse chains from `z_1 ~ N(0, I)` down to `t = 0`
/// and returns `z_0` for each, plus the traced chain if requested. Each
/// chain draws from its own RNG stream, so results do not depend on the
/// thread count.
pub fn ancestral_sample(
    net: &dyn Denoiser,
    sched: &NoiseSchedule,
    n: usize,
    dim: usize,
    opts: &SamplerOptions,
    rng: &mut impl Rng,
) -> Result<(Tensor, Option<LatentPath>)> {
    if opts.steps == 0 || opts.chunk == 0 {
        return Err(VdmError::Precondition("sampler needs steps >= 1 and chunk >= 1".into()));
    }
    let steps = opts.steps;
    let grid: Vec<ScheduleSample> = (0..=steps)
        .map(|i| sched.sample_at(i as f64 / steps as f64))
        .collect::<Result<_>>()?;
    let base: u64 = rng.random();
    let n_chunks = n.div_ceil(opts.chunk);
    type ChunkOut = (Vec<f64>, Option<Vec<Tensor>>);
    let chunks: Vec<ChunkOut> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| -> Result<ChunkOut> {
            let lo = ci * opts.chunk;
            let hi = (lo + opts.chunk).min(n);
            let m = hi - lo;
            let mut rngs: Vec<ChaCha8Rng> = (lo..hi).map(|i| stream_rng(base, i as u64)).collect();
            let mut z = Tensor::zeros(&[m, dim]);
            for (r, row) in rngs.iter_mut().zip(0..m) {
                for v in z.row_mut(row) {
                    *v = r.sample(StandardNormal);
                }
            }
            let traced = opts.trace_chain.filter(|&c| (lo..hi).contains(&c)).map(|c| c - lo);
            let mut trace = traced.map(|r| vec![Tensor::vector(z.row(r).to_vec())]);
            for i in (1..=steps).rev() {
                let (s, t) = (&grid[i - 1], &grid[i]);
                let out = net.predict_rows(&z, &vec![*t; m])?;
                let eps = convert_rows(net.kind(), &out, &z, &vec![*t; m], PredictionKind::Eps)?;
                let c = stable_c(-s.lambda, -t.lambda)?;
                let k = s.alpha / t.alpha;
                let noise_sd = opts.variance.variance(s, c).sqrt();
                let ke = -k * t.sigma() * c;
                for (row, r) in rngs.iter_mut().enumerate() {
                    let e = eps.row(row).to_vec();
                    for (v, ei) in z.row_mut(row).iter_mut().zip(e) {
                        let nz: f64 = r.sample(StandardNormal);
                        *v = k * *v + ke * ei + noise_sd * nz;
                    }
                }
                if let (Some(r), Some(tr)) = (traced, trace.as_mut()) {
                    tr.push(Tensor::vector(z.row(r).to_vec()));
                }
            }
            z.ensure_finite("sampler state")?;
            Ok((z.into_data(), trace))
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(n * dim);
    let mut path = None;
    for (d, tr) in chunks {
        data.extend(d);
        if let Some(mut tr) = tr {
            tr.reverse();
            let times = grid.iter().map(|g| g.t).collect();
            path = Some(LatentPath::new(times, tr)?);
        }
    }
    Ok((Tensor::new(vec![n, dim], data)?, path))
}
