//! A Gaussian VAE baseline, aggregate posteriors as Gaussian mixtures and
//! the hole metric comparing them with the standard normal prior.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::error::{Result, VdmError};
use crate::loss::LossEstimate;
use crate::nn::{Mlp, Sgd};
use crate::schedule::ScheduleSample;
use crate::tensor::Tensor;

pub const DEFAULT_OBS_VAR: f64 = 0.1;

/// Encoder `x ↦ (μ, log σ²)` of `q(z|x)`, decoder `z ↦` mean of
/// `p(x|z) = N(·, obs_var·I)`, prior `N(0, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub latent_dim: usize,
    pub data_dim: usize,
    pub obs_var: f64,
}

/// `KL(N(μ, diag v) ‖ N(0, I)) = ½ Σ (v + μ² − 1 − ln v)`.
pub fn kl_to_standard_normal(mu: &[f64], var: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(var)
        .map(|(m, v)| v + m * m - 1.0 - v.ln())
        .sum::<f64>()
}

impl VaeModel {
    pub fn new(data_dim: usize, latent_dim: usize, hidden: &[usize], obs_var: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(obs_var > 0.0) {
            return Err(VdmError::Precondition("observation variance must be > 0".into()));
        }
        let mut enc = vec![data_dim];
        enc.extend_from_slice(hidden);
        enc.push(2 * latent_dim);
        let mut dec = vec![latent_dim];
        dec.extend(hidden.iter().rev());
        dec.push(data_dim);
        Ok(Self {
            encoder: Mlp::new(&enc, rng)?,
            decoder: Mlp::new(&dec, rng)?,
            latent_dim,
            data_dim,
            obs_var,
        })
    }

    /// `(μ, log σ²)`, each `[n, latent_dim]`.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = self.encoder.forward(x)?;
        let (n, k) = (out.rows(), self.latent_dim);
        let mut mu = Vec::with_capacity(n * k);
        let mut lv = Vec::with_capacity(n * k);
        for i in 0..n {
            mu.extend_from_slice(&out.row(i)[..k]);
            lv.extend_from_slice(&out.row(i)[k..]);
        }
        Ok((Tensor::new(vec![n, k], mu)?, Tensor::new(vec![n, k], lv)?))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.forward(z)
    }

    fn log_lik(&self, x: &[f64], mean: &[f64]) -> f64 {
        let d = x.len() as f64;
        let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
        -0.5 * sq / self.obs_var - 0.5 * d * (2.0 * PI * self.obs_var).ln()
    }
}

/// Per-row VLB `E_q[log p(x|z)] − KL(q(z|x) ‖ p(z))` with the expectation
/// over `n_mc` reparameterized draws `z = μ + σ⊙ε` and the KL in closed
/// form. The estimate's `per_sample` holds one value per data row.
pub fn vae_vlb(model: &VaeModel, x: &Tensor, n_mc: usize, rng: &mut impl Rng) -> Result<LossEstimate> {
    if x.rows() == 0 {
        return Err(VdmError::EmptyDataset);
    }
    if n_mc == 0 {
        return Err(VdmError::Precondition("vae_vlb needs n_mc >= 1".into()));
    }
    let (mu, lv) = model.encode(x)?;
    let k = model.latent_dim;
    let n = x.rows();
    let mut z = Tensor::zeros(&[n * n_mc, k]);
    for i in 0..n {
        for m in 0..n_mc {
            for j in 0..k {
                let e: f64 = rng.sample(StandardNormal);
                z.row_mut(i * n_mc + m)[j] = mu.get2(i, j) + (0.5 * lv.get2(i, j)).exp() * e;
            }
        }
    }
    let xh = model.decode(&z)?;
    let mut per = Vec::with_capacity(n);
    for i in 0..n {
        let rec: f64 = (0..n_mc)
            .map(|m| model.log_lik(x.row(i), xh.row(i * n_mc + m)))
            .sum::<f64>()
            / n_mc as f64;
        let var: Vec<f64> = lv.row(i).iter().map(|v| v.exp()).collect();
        let v = rec - kl_to_standard_normal(mu.row(i), &var);
        if !v.is_finite() {
            return Err(VdmError::NonFinite("VAE log-likelihood"));
        }
        per.push(v);
    }
    Ok(LossEstimate::from_samples(per))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeTrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for VaeTrainOptions {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 256,
            lr: 0.01,
            momentum: 0.9,
        }
    }
}

/// Minibatch negative VLB (up to the Gaussian normalizer) with the
/// reparameterization noise `eps` given, and its gradients for the
/// encoder and decoder parameters.
pub fn vae_objective(model: &VaeModel, x: &Tensor, eps: &Tensor) -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
    let (b, k) = (x.rows(), model.latent_dim);
    if eps.shape() != [b, k] {
        return Err(VdmError::Dimension {
            expected: vec![b, k],
            got: eps.shape().to_vec(),
        });
    }
    let n_enc = model.encoder.params().len();
    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let e = g.input(eps.clone());
    let enc = model.encoder.build(&mut g, xn, 0)?;
    let mu = g.slice_cols(enc, 0, k)?;
    let lv = g.slice_cols(enc, k, 2 * k)?;
    let half = g.scale(lv, 0.5);
    let sd = g.exp(half);
    let noise = g.mul(sd, e)?;
    let z = g.add(mu, noise)?;
    let xh = model.decoder.build(&mut g, z, n_enc)?;
    let diff = g.sub(xn, xh)?;
    let sq = g.square(diff);
    let rec = g.sum(sq);
    let rec = g.scale(rec, 0.5 / (model.obs_var * b as f64));
    let var = g.exp(lv);
    let mu2 = g.square(mu);
    let kl = g.add(var, mu2)?;
    let kl = g.sub(kl, lv)?;
    let kl = g.add_scalar(kl, -1.0);
    let kl = g.sum(kl);
    let kl = g.scale(kl, 0.5 / b as f64);
    let loss = g.add(rec, kl)?;
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    Ok((
        value,
        model.encoder.params().grads(&grads, 0),
        model.decoder.params().grads(&grads, n_enc),
    ))
}

/// Minimizes the negative VLB by SGD with momentum; returns the per-step
/// negative VLB of each minibatch.
pub fn train_vae(model: &mut VaeModel, data: &Tensor, opts: &VaeTrainOptions, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if data.rows() == 0 {
        return Err(VdmError::EmptyDataset);
    }
    let (d, k) = (model.data_dim, model.latent_dim);
    let mut opt_e = Sgd::new(opts.lr, opts.momentum);
    let mut opt_d = Sgd::new(opts.lr, opts.momentum);
    let constant = 0.5 * d as f64 * (2.0 * PI * model.obs_var).ln();
    let mut curve = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        let b = opts.batch;
        let mut xb = Vec::with_capacity(b * d);
        for _ in 0..b {
            xb.extend_from_slice(data.row(rng.random_range(0..data.rows())));
        }
        let eps: Vec<f64> = (0..b * k).map(|_| rng.sample(StandardNormal)).collect();
        let x = Tensor::new(vec![b, d], xb)?;
        let (value, ge, gd) = vae_objective(model, &x, &Tensor::new(vec![b, k], eps)?)?;
        if !value.is_finite() {
            return Err(VdmError::NonFinite("VAE training loss"));
        }
        curve.push(value + constant);
        opt_e.step(model.encoder.params_mut(), &ge)?;
        opt_d.step(model.decoder.params_mut(), &gd)?;
    }
    Ok(curve)
}

/// Equal-weight mixture of diagonal Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub means: Tensor,
    pub vars: Tensor,
}

impl GaussianMixture {
    pub fn new(means: Tensor, vars: Tensor) -> Result<Self> {
        means.same_shape(&vars)?;
        if means.rows() == 0 {
            return Err(VdmError::EmptyDataset);
        }
        if vars.data().iter().any(|v| !(*v > 0.0)) {
            return Err(VdmError::Precondition("mixture variances must be > 0".into()));
        }
        Ok(Self { means, vars })
    }

    pub fn components(&self) -> usize {
        self.means.rows()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn density(&self, z: &[f64]) -> f64 {
        let n = self.components();
        let mut acc = 0.0;
        for i in 0..n {
            let mut lp = 0.0;
            for (j, zj) in z.iter().enumerate() {
                let (m, v) = (self.means.get2(i, j), self.vars.get2(i, j));
                lp += -0.5 * (zj - m) * (zj - m) / v - 0.5 * (2.0 * PI * v).ln();
            }
            acc += lp.exp();
        }
        acc / n as f64
    }

    /// Densities at every row of `points`.
    pub fn densities(&self, points: &Tensor) -> Vec<f64> {
        (0..points.rows())
            .into_par_iter()
            .map(|i| self.density(points.row(i)))
            .collect()
    }

    /// One draw from each component, in component order.
    pub fn sample_each(&self, rng: &mut impl Rng) -> Tensor {
        let mut out = self.means.clone();
        for i in 0..self.components() {
            for j in 0..self.dim() {
                let e: f64 = rng.sample(StandardNormal);
                out.row_mut(i)[j] += self.vars.get2(i, j).sqrt() * e;
            }
        }
        out
    }
}

/// `q(z) = (1/N) Σ_i q(z | x_i)` for the VAE encoder.
pub fn aggregate_posterior(model: &VaeModel, data: &Tensor) -> Result<GaussianMixture> {
    if data.rows() == 0 {
        return Err(VdmError::EmptyDataset);
    }
    let (mu, lv) = model.encode(data)?;
    GaussianMixture::new(mu, lv.map(f64::exp))
}

/// `q(z_1) = (1/N) Σ_i N(α_1 x_i, σ²_1 I)` for the forward diffusion.
pub fn diffusion_marginal(data: &Tensor, at: &ScheduleSample) -> Result<GaussianMixture> {
    GaussianMixture::new(data.scale(at.alpha), Tensor::full(data.shape(), at.sigma2))
}

/// Evaluates `q(z)` on grid points.
pub fn aggregate_posterior_density(model: &VaeModel, data: &Tensor, z_grid: &Tensor) -> Result<Vec<f64>> {
    Ok(aggregate_posterior(model, data)?.densities(z_grid))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoleReport {
    /// [`HOLE_PERCENTILE`] quantile of `q(z)` at draws `z ~ q(z | x_i)`.
    pub threshold: f64,
    /// Fraction of prior draws with `q(z)` below the threshold.
    pub metric: f64,
}

pub const HOLE_PERCENTILE: f64 = 0.001;
/// Reference draws per mixture component used to locate the threshold.
pub const HOLE_REFERENCE_DRAWS: usize = 10;

/// Fraction of prior samples landing where the aggregate posterior is
/// rarer than its own [`HOLE_PERCENTILE`] quantile.
pub fn hole_metric(q: &GaussianMixture, n_prior_samples: usize, rng: &mut impl Rng) -> Result<HoleReport> {
    hole_metric_at(q, HOLE_PERCENTILE, n_prior_samples, rng)
}

/// [`hole_metric`] with an explicit percentile in `(0, 1)`.
pub fn hole_metric_at(q: &GaussianMixture, percentile: f64, n_prior_samples: usize, rng: &mut impl Rng) -> Result<HoleReport> {
    if !(percentile > 0.0 && percentile < 1.0) {
        return Err(VdmError::Domain {
            value: percentile,
            domain: "percentile in (0, 1)",
        });
    }
    if n_prior_samples == 0 {
        return Err(VdmError::Precondition("hole metric needs prior samples".into()));
    }
    let mut dens = Vec::with_capacity(HOLE_REFERENCE_DRAWS * q.components());
    for _ in 0..HOLE_REFERENCE_DRAWS {
        dens.extend(q.densities(&q.sample_each(rng)));
    }
    dens.sort_by(|a, b| a.partial_cmp(b).expect("finite density"));
    let idx = ((percentile * dens.len() as f64).floor() as usize).min(dens.len() - 1);
    let threshold = dens[idx];
    let k = q.dim();
    let prior: Vec<f64> = (0..n_prior_samples * k).map(|_| rng.sample(StandardNormal)).collect();
    let prior = Tensor::new(vec![n_prior_samples, k], prior)?;
    let below = q.densities(&prior).iter().filter(|&&d| d < threshold).count();
    Ok(HoleReport {
        threshold,
        metric: below as f64 / n_prior_samples as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kl_examples() {
        assert_eq!(kl_to_standard_normal(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
        assert!((kl_to_standard_normal(&[1.0], &[1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mixture_of_prior_is_prior() {
        let q = GaussianMixture::new(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(), Tensor::full(&[1, 2], 1.0)).unwrap();
        let p = q.density(&[0.3, -1.2]);
        let expect = (-0.5_f64 * (0.09 + 1.44)).exp() / (2.0 * PI);
        assert!((p - expect).abs() < 1e-15);
    }

    #[test]
    fn symmetric_mixture_is_symmetric_and_normalized() {
        let q = GaussianMixture::new(
            Tensor::matrix(2, 2, vec![1.0, 0.5, -1.0, -0.5]).unwrap(),
            Tensor::full(&[2, 2], 0.3),
        )
        .unwrap();
        let n = 301;
        let h = 12.0 / (n - 1) as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let z = [-6.0 + h * i as f64, -6.0 + h * j as f64];
                let d = q.density(&z);
                assert!((d - q.density(&[-z[0], -z[1]])).abs() <= 1e-12);
                total += d * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-3);
        assert!(GaussianMixture::new(Tensor::zeros(&[0, 2]), Tensor::zeros(&[0, 2])).is_err());
    }

    #[test]
    fn hole_metric_calibration_and_extreme() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 2000;
        let prior = GaussianMixture::new(Tensor::zeros(&[n, 2]), Tensor::full(&[n, 2], 1.0)).unwrap();
        let m = hole_metric(&prior, 50_000, &mut rng).unwrap();
        assert!((m.metric - HOLE_PERCENTILE).abs() < 0.6 * HOLE_PERCENTILE, "{}", m.metric);
        let coarse = hole_metric_at(&prior, 0.01, 20_000, &mut rng).unwrap();
        assert!((coarse.metric - 0.01).abs() < 0.004, "{}", coarse.metric);
        assert!(hole_metric_at(&prior, 1.0, 10, &mut rng).is_err());
        let spike = GaussianMixture::new(Tensor::zeros(&[200, 2]), Tensor::full(&[200, 2], 1e-4)).unwrap();
        assert!(hole_metric(&spike, 5000, &mut rng).unwrap().metric > 0.99);
    }
}
