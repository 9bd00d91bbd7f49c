use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vdm_core::diffusion::Denoiser;
use vdm_core::loss::{
    continuous_loss, discrete_loss, discrete_loss_exhaustive, monotone_weighting_identity_check, AdaptiveScheduleState,
    DataSource, TimeDistribution,
};
use vdm_core::oracle::AnalyticGaussianOracle;
use vdm_core::param::{convert, target, PredictionKind};
use vdm_core::vae::{vae_vlb, VaeModel};
use vdm_core::{NoiseSchedule, ScheduleSample, Tensor, WeightingFn};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Closed-form VLB of a VAE whose encoder and decoder are affine.
fn linear_vae_vlb(m: &VaeModel, x: f64) -> f64 {
    let (mu, lv) = m.encode(&Tensor::matrix(1, 1, vec![x]).unwrap()).unwrap();
    let (mu, var) = (mu.data()[0], lv.data()[0].exp());
    let p = m.decoder.params();
    let w = p.get(p.find("layer0.weight").unwrap()).data()[0];
    let b = p.get(p.find("layer0.bias").unwrap()).data()[0];
    let v = m.obs_var;
    let rec = -0.5 * ((x - w * mu - b).powi(2) + w * w * var) / v - 0.5 * (2.0 * PI * v).ln();
    let kl = 0.5 * (var + mu * mu - 1.0 - var.ln());
    rec - kl
}

#[test]
fn vlb_never_exceeds_the_exact_evidence() {
    for seed in 0..20 {
        let m = VaeModel::new(1, 1, &[], 0.1 + 0.05 * seed as f64, &mut rng(seed)).unwrap();
        let p = m.decoder.params();
        let w = p.get(p.find("layer0.weight").unwrap()).data()[0];
        let b = p.get(p.find("layer0.bias").unwrap()).data()[0];
        // marginal of z ~ N(0,1), x | z ~ N(wz + b, v)
        let var_x = w * w + m.obs_var;
        for x in [-2.0, -0.3, 0.0, 0.8, 3.0] {
            let evidence = -0.5 * (x - b) * (x - b) / var_x - 0.5 * (2.0 * PI * var_x).ln();
            let vlb = linear_vae_vlb(&m, x);
            assert!(evidence - vlb >= -1e-9, "seed {seed} x {x}: {vlb} > {evidence}");
        }
    }
}

#[test]
fn monte_carlo_vlb_matches_closed_form() {
    let m = VaeModel::new(1, 1, &[], 0.2, &mut rng(3)).unwrap();
    for x in [-1.0, 0.5] {
        let est = vae_vlb(&m, &Tensor::matrix(1, 1, vec![x]).unwrap(), 50_000, &mut rng(4)).unwrap();
        let exact = linear_vae_vlb(&m, x);
        // the per-row estimate averages 50k draws; bound its error by the
        // spread of single-draw log-likelihoods
        let single = vae_vlb(&m, &Tensor::matrix(2000, 1, vec![x; 2000]).unwrap(), 1, &mut rng(5)).unwrap();
        let se = single.sample_std() / (50_000f64).sqrt();
        assert!((est.value - exact).abs() < 4.0 * se + 1e-12, "{} vs {exact}", est.value);
    }
}

#[test]
fn oracle_eps_error_is_snr_times_x_error() {
    let o = AnalyticGaussianOracle::new(vec![0.4, -1.0], vec![0.5, 2.0]).unwrap();
    let n = 200_000;
    for lambda in [-3.0, 0.0, 2.5] {
        let s = ScheduleSample::from_lambda(0.5, lambda);
        let mut r = rng(9);
        let x = o.sample(n, &mut r);
        let e = Tensor::new(vec![n, 2], (0..2 * n).map(|_| r.sample(StandardNormal)).collect()).unwrap();
        let z = vdm_core::diffusion::diffuse(&x, &s, &e).unwrap();
        let xh = o.predict_rows(&z, &vec![s; n]).unwrap();
        let eh = vdm_core::param::convert_rows(PredictionKind::X, &xh, &z, &vec![s; n], PredictionKind::Eps).unwrap();
        let eps_err: Vec<f64> = (0..n)
            .map(|i| eh.row(i).iter().zip(e.row(i)).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        let x_err: Vec<f64> = (0..n)
            .map(|i| xh.row(i).iter().zip(x.row(i)).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let se = |v: &[f64]| {
            let m = mean(v);
            (v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (v.len() - 1) as f64 / v.len() as f64).sqrt()
        };
        assert!((mean(&x_err) - o.x_mse(&s)).abs() < 3.0 * se(&x_err));
        assert!((mean(&eps_err) - o.eps_mse(&s)).abs() < 3.0 * se(&eps_err));
        assert!((o.eps_mse(&s) - s.snr() * o.x_mse(&s)).abs() < 1e-12 * o.eps_mse(&s));
        // the target of the eps kind is the noise itself
        assert_eq!(target(PredictionKind::Eps, &x, &e, &s).unwrap(), e);
    }
}

#[test]
fn discrete_estimator_is_unbiased() {
    let sched = NoiseSchedule::cosine(-6.0, 6.0).unwrap();
    let o = AnalyticGaussianOracle::new(vec![0.3], vec![0.6]).unwrap();
    let data = DataSource::Gaussian(&o);
    let steps = 8;
    let mut r = rng(21);
    let ests: Vec<f64> = (0..100)
        .map(|_| discrete_loss(&data, &o, &sched, steps, 2000, &mut r).unwrap().value)
        .collect();
    let mean = ests.iter().sum::<f64>() / 100.0;
    let se = (ests.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 99.0 / 100.0).sqrt();
    let ex = discrete_loss_exhaustive(&data, &o, &sched, steps, 100_000, &mut r).unwrap();
    assert!((mean - ex.value).abs() < 3.0 * (se * se + ex.std_error * ex.std_error).sqrt(), "{mean} vs {}", ex.value);
    let exact = o.discrete_loss_exact(&sched, steps).unwrap();
    assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact}");
}

#[test]
fn continuous_loss_depends_only_on_the_endpoints() {
    let o = AnalyticGaussianOracle::new(vec![0.0, 1.0], vec![0.3, 1.5]).unwrap();
    let data = DataSource::Gaussian(&o);
    let w = WeightingFn::Uniform;
    let exact = o.weighted_loss_quadrature(&w, -5.0, 7.0, 20_000);
    for sched in [
        NoiseSchedule::linear(-5.0, 7.0).unwrap(),
        NoiseSchedule::cosine(-5.0, 7.0).unwrap(),
        NoiseSchedule::flow_linear(-5.0, 7.0).unwrap(),
    ] {
        let est = continuous_loss(&data, &o, &sched, &w, 100_000, &mut rng(2), TimeDistribution::UniformT).unwrap();
        assert!(est.value.is_finite() && est.value >= -1e-3);
        assert!((est.value - exact).abs() < 3.0 * est.std_error, "{}: {} vs {exact}", sched.name(), est.value);
    }
}

#[test]
fn adaptive_density_tracks_the_optimal_eps_loss() {
    let o = AnalyticGaussianOracle::unit(1);
    let mut st = AdaptiveScheduleState::new(-6.0, 6.0, AdaptiveScheduleState::DEFAULT_BINS).unwrap();
    let mut r = rng(17);
    let batch = 64;
    for _ in 0..10_000 {
        let lambda = r.random_range(-6.0..6.0);
        let s = ScheduleSample::from_lambda(0.5, lambda);
        let x: Vec<f64> = (0..batch).map(|_| r.sample(StandardNormal)).collect();
        let eps: Vec<f64> = (0..batch).map(|_| r.sample(StandardNormal)).collect();
        let sigma = s.sigma2.sqrt();
        let z: Vec<f64> = x.iter().zip(&eps).map(|(a, e)| s.alpha * a + sigma * e).collect();
        let z = Tensor::matrix(batch, 1, z).unwrap();
        let pred = o.predict(&z, &s).unwrap();
        let eps_hat = convert(&pred, &z, &s, PredictionKind::Eps).unwrap();
        let loss = eps.iter().zip(eps_hat.value.data()).map(|(e, h)| (e - h) * (e - h)).sum::<f64>() / batch as f64;
        st.update(lambda, loss).unwrap();
    }
    // optimal ε-loss for unit-variance data is α² = 1/(1 + e^(−λ))
    let shape: Vec<f64> = (0..st.bins()).map(|b| 1.0 / (1.0 + (-st.bin_center(b)).exp())).collect();
    let total: f64 = shape.iter().sum();
    let l1: f64 = st.density().iter().zip(&shape).map(|(d, s)| (d - s / total).abs()).sum();
    assert!(l1 < 0.05, "L1 {l1}");
}

#[test]
fn identity_for_uniform_and_point_mass_time_densities() {
    let sched = NoiseSchedule::linear(-6.0, 6.0).unwrap();
    let o = AnalyticGaussianOracle::unit(1);
    let data = DataSource::Gaussian(&o);
    // on the linear schedule t = (6 − λ)/12, so this w is the CDF of U(0, 1)
    let uniform = WeightingFn::tabulate(-6.0, 6.0, 2, |l| (6.0 - l) / 12.0);
    let rep = monotone_weighting_identity_check(&data, &o, &sched, &uniform, 100_000, &mut rng(31)).unwrap();
    assert!(rep.w_endpoints.0.abs() < 1e-12 && (rep.w_endpoints.1 - 1.0).abs() < 1e-12);
    assert!(rep.residual() <= rep.mc_band(), "{} vs {}", rep.weighted.value, rep.integral_of_elbos.value);

    // all of the mass of p_w sits in the last 1% of t
    let spike = WeightingFn::Table {
        lambdas: vec![-6.0, -5.9],
        values: vec![1.0, 0.0],
    };
    let rep = monotone_weighting_identity_check(&data, &o, &sched, &spike, 100_000, &mut rng(32)).unwrap();
    assert!(rep.weighted.value.abs() < 1e-3, "{}", rep.weighted.value);
    assert!(rep.integral_of_elbos.value.abs() < 1e-3, "{}", rep.integral_of_elbos.value);
    assert!(rep.residual() <= rep.mc_band().max(1e-4));
}
