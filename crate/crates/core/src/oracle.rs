//! Reference computations: the Bayes-optimal denoiser for Gaussian data and
//! its closed-form losses, a brute-force grid posterior, the five-cluster
//! toy dataset and a Kolmogorov–Smirnov normality test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::diffusion::{transition_params, Denoiser};
use crate::error::{Result, VdmError};
use crate::param::{Prediction, PredictionKind};
use crate::schedule::{NoiseSchedule, ScheduleSample, WeightingFn};
use crate::tensor::Tensor;

/// Diagonal Gaussian data `x ~ N(mean, diag(var))`; a zero variance is a
/// point mass.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticGaussianOracle {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl AnalyticGaussianOracle {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(VdmError::Dimension {
                expected: vec![mean.len()],
                got: vec![var.len()],
            });
        }
        if var.iter().any(|v| !(*v >= 0.0)) {
            return Err(VdmError::Precondition("oracle variances must be >= 0".into()));
        }
        Ok(Self { mean, var })
    }

    /// Standard normal data in `dim` dimensions.
    pub fn unit(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    /// `E[x | z_t]` for one coordinate.
    fn posterior_mean(&self, j: usize, z: f64, s: &ScheduleSample) -> f64 {
        let (m, v) = (self.mean[j], self.var[j]);
        m + s.alpha * v * (z - s.alpha * m) / (s.alpha2() * v + s.sigma2)
    }

    /// `x̂ = E[x | z_t]` shaped like `z`.
    pub fn optimal_denoiser(&self, z: &Tensor, sample: &ScheduleSample) -> Result<Prediction> {
        self.predict(z, sample)
    }

    /// `E‖x − x̂‖²` summed over coordinates.
    pub fn x_mse(&self, sample: &ScheduleSample) -> f64 {
        self.var
            .iter()
            .map(|v| sample.sigma2 * v / (sample.alpha2() * v + sample.sigma2))
            .sum()
    }

    /// `E‖ε − ε̂‖² = SNR·E‖x − x̂‖²`.
    pub fn eps_mse(&self, sample: &ScheduleSample) -> f64 {
        if self.var.iter().all(|&v| v == 1.0) {
            // SNR·σ²/(α²+σ²) with α²+σ² = 1
            return self.dim() as f64 * sample.alpha2();
        }
        sample.snr() * self.x_mse(sample)
    }

    /// Exact `𝓛_T` with this denoiser: `½ Σ_i (SNR(s_i) − SNR(t_i))·E‖x − x̂‖²`.
    pub fn discrete_loss_exact(&self, sched: &NoiseSchedule, steps: usize) -> Result<f64> {
        let mut acc = 0.0;
        for i in 1..=steps {
            let s = sched.sample_at((i - 1) as f64 / steps as f64)?;
            let t = sched.sample_at(i as f64 / steps as f64)?;
            // SNR(s) − SNR(t) = SNR(t)·expm1(λ_s − λ_t)
            acc += t.snr() * (s.lambda - t.lambda).exp_m1() * self.x_mse(&t);
        }
        Ok(0.5 * acc)
    }

    /// `½ ∫ w(λ)·E‖ε − ε̂‖² dλ` over `[λ_lo, λ_hi]` by the composite
    /// trapezoid rule on `n` points.
    pub fn weighted_loss_quadrature(&self, w: &WeightingFn, lambda_lo: f64, lambda_hi: f64, n: usize) -> f64 {
        let h = (lambda_hi - lambda_lo) / (n - 1) as f64;
        let f = |i: usize| {
            let l = if i + 1 == n { lambda_hi } else { lambda_lo + h * i as f64 };
            w.eval(l) * self.eps_mse(&ScheduleSample::from_lambda(0.0, l))
        };
        let inner: f64 = (1..n - 1).map(f).sum();
        0.5 * h * (inner + 0.5 * (f(0) + f(n - 1)))
    }

    /// Draws `n` data points as a `[n, dim]` tensor.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            for j in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                data.push(self.mean[j] + self.var[j].sqrt() * e);
            }
        }
        Tensor::new(vec![n, d], data).expect("sample shape")
    }
}

/// For unit-variance data and `w ≡ 1`: `½(softplus(λ_max) − softplus(λ_min))`
/// per dimension.
pub fn unit_gaussian_continuous_loss(lambda_min: f64, lambda_max: f64) -> f64 {
    use crate::schedule::softplus;
    0.5 * (softplus(lambda_max) - softplus(lambda_min))
}

impl Denoiser for AnalyticGaussianOracle {
    fn kind(&self) -> PredictionKind {
        PredictionKind::X
    }

    fn predict_rows(&self, z: &Tensor, samples: &[ScheduleSample]) -> Result<Tensor> {
        if z.cols() != self.dim() || samples.len() != z.rows() {
            return Err(VdmError::Dimension {
                expected: vec![samples.len(), self.dim()],
                got: z.shape().to_vec(),
            });
        }
        let mut out = z.clone();
        for (i, s) in samples.iter().enumerate() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = self.posterior_mean(j, *v, s);
            }
        }
        Ok(out)
    }
}

/// A uniform 1D grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Grid {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        Self { lo, hi, n }
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.hi
        } else {
            self.lo + self.step() * i as f64
        }
    }
}

/// Largest normalized mass allowed in the two edge cells of a grid.
pub const GRID_EDGE_MASS: f64 = 1e-6;

/// Mean and variance of `q(z_s | z_t, x) ∝ q(z_t | z_s)·q(z_s | x)` by
/// pointwise evaluation on `grid`. `s = t` returns the point mass at `z_t`.
pub fn grid_bayes_posterior(
    x: f64,
    z_t: f64,
    s: &ScheduleSample,
    t: &ScheduleSample,
    grid: &Grid,
) -> Result<(f64, f64)> {
    let tp = transition_params(s, t)?;
    if tp.sigma2_ts == 0.0 {
        return Ok((z_t, 0.0));
    }
    let logp: Vec<f64> = (0..grid.n)
        .map(|i| {
            let zs = grid.point(i);
            let lik = z_t - tp.alpha_ts * zs;
            let pri = zs - s.alpha * x;
            -0.5 * lik * lik / tp.sigma2_ts - 0.5 * pri * pri / s.sigma2
        })
        .collect();
    let mx = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logp.iter().map(|l| (l - mx).exp()).collect();
    let total: f64 = w.iter().sum();
    let edge_mass = (w[0] + w[grid.n - 1]) / total;
    if edge_mass > GRID_EDGE_MASS {
        return Err(VdmError::Coverage { edge_mass });
    }
    let mean = (0..grid.n).map(|i| w[i] * grid.point(i)).sum::<f64>() / total;
    let var = (0..grid.n)
        .map(|i| {
            let d = grid.point(i) - mean;
            w[i] * d * d
        })
        .sum::<f64>()
        / total;
    Ok((mean, var))
}

/// Grid posterior on an automatically placed grid: a coarse pass over the
/// prior `q(z_s | x)` locates the mode and spread, and a second pass of
/// `n` points spans the mode ± 10 estimated standard deviations.
pub fn grid_bayes_posterior_auto(x: f64, z_t: f64, s: &ScheduleSample, t: &ScheduleSample, n: usize) -> Result<(f64, f64)> {
    let tp = transition_params(s, t)?;
    if tp.sigma2_ts == 0.0 {
        return Ok((z_t, 0.0));
    }
    // the likelihood peak may sit far from the prior; span both
    let prior_c = s.alpha * x;
    let lik_c = z_t / tp.alpha_ts;
    let half = 12.0 * s.sigma();
    let coarse = Grid::new(prior_c.min(lik_c) - half, prior_c.max(lik_c) + half, 20_001);
    let logp = |zs: f64| {
        let lik = z_t - tp.alpha_ts * zs;
        let pri = zs - prior_c;
        -0.5 * lik * lik / tp.sigma2_ts - 0.5 * pri * pri / s.sigma2
    };
    let (mut best, mut best_l) = (coarse.point(0), f64::NEG_INFINITY);
    for i in 0..coarse.n {
        let l = logp(coarse.point(i));
        if l > best_l {
            best_l = l;
            best = coarse.point(i);
        }
    }
    // curvature of the log density gives the spread
    let h = (coarse.step()).max(1e-6 * (1.0 + best.abs()));
    let curv = -(logp(best + h) - 2.0 * logp(best) + logp(best - h)) / (h * h);
    let sd = if curv > 0.0 { curv.recip().sqrt() } else { s.sigma() };
    grid_bayes_posterior(x, z_t, s, t, &Grid::new(best - 10.0 * sd, best + 10.0 * sd, n))
}

/// Standardized 2D point cloud with the mixture component of each point.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset2D {
    pub points: Tensor,
    pub labels: Vec<usize>,
    /// Component centers in standardized coordinates.
    pub centers: Vec<[f64; 2]>,
    /// Component standard deviation per coordinate, standardized.
    pub component_std: [f64; 2],
    /// Raw per-coordinate mean and scale removed by standardization.
    pub shift: [f64; 2],
    pub scale: [f64; 2],
}

impl Dataset2D {
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    /// Fraction of `samples` rows within `k` component standard deviations
    /// (Euclidean, using the larger coordinate std) of some center.
    pub fn fraction_near_centers(&self, samples: &Tensor, k: f64) -> f64 {
        let r = k * self.component_std[0].max(self.component_std[1]);
        let near = (0..samples.rows())
            .filter(|&i| {
                let p = samples.row(i);
                self.centers.iter().any(|c| {
                    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
                    dx * dx + dy * dy <= r * r
                })
            })
            .count();
        near as f64 / samples.rows().max(1) as f64
    }
}

pub const FIVE_CLUSTER_RADIUS: f64 = 2.0;
pub const FIVE_CLUSTER_STD: f64 = 0.2;

/// Equal-weight mixture of five isotropic Gaussians (std 0.2) centered on
/// a circle of radius 2, standardized to zero mean and unit variance per
/// coordinate.
pub fn five_clusters(n: usize, seed: u64) -> Result<Dataset2D> {
    if n < 5 {
        return Err(VdmError::Precondition(format!("five_clusters needs n >= 5, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw_centers: Vec<[f64; 2]> = (0..5)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / 5.0;
            [FIVE_CLUSTER_RADIUS * a.cos(), FIVE_CLUSTER_RADIUS * a.sin()]
        })
        .collect();
    let mut labels = Vec::with_capacity(n);
    let mut raw = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let k = rng.random_range(0..5usize);
        labels.push(k);
        for c in raw_centers[k] {
            let e: f64 = rng.sample(StandardNormal);
            raw.push(c + FIVE_CLUSTER_STD * e);
        }
    }
    let mut shift = [0.0; 2];
    let mut scale = [0.0; 2];
    for j in 0..2 {
        let m = (0..n).map(|i| raw[2 * i + j]).sum::<f64>() / n as f64;
        let v = (0..n).map(|i| (raw[2 * i + j] - m).powi(2)).sum::<f64>() / n as f64;
        shift[j] = m;
        scale[j] = v.sqrt();
    }
    let pts: Vec<f64> = raw
        .iter()
        .enumerate()
        .map(|(i, v)| (v - shift[i % 2]) / scale[i % 2])
        .collect();
    let centers = raw_centers
        .iter()
        .map(|c| [(c[0] - shift[0]) / scale[0], (c[1] - shift[1]) / scale[1]])
        .collect();
    Ok(Dataset2D {
        points: Tensor::new(vec![n, 2], pts)?,
        labels,
        centers,
        component_std: [FIVE_CLUSTER_STD / scale[0], FIVE_CLUSTER_STD / scale[1]],
        shift,
        scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// `Q(x) = 2 Σ_{k≥1} (−1)^{k−1} exp(−2k²x²)`, the Kolmogorov tail.
fn kolmogorov_tail(x: f64) -> f64 {
    if x < 0.2 {
        return 1.0;
    }
    let mut acc = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * x * x).exp();
        acc += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * acc).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov–Smirnov test against `N(0, 1)`, with the
/// asymptotic p-value (Stephens' finite-sample correction).
pub fn ks_test_standard_normal(samples: &[f64]) -> Result<KsResult> {
    if samples.is_empty() {
        return Err(VdmError::EmptyDataset);
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut xs = samples.to_vec();
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(VdmError::NonFinite("KS samples"));
    }
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let f = normal.cdf(*x);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_tail((sn + 0.12 + 0.11 / sn) * d),
    })
}
