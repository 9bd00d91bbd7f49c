//! Registered invariants run by the `verify` command. Every check reports
//! an observed value, its expected value and an absolute tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vdm_core::diffusion::{
    ancestral_sample, diffuse, generative_mean, posterior_params, posterior_params_stable, PosteriorParams,
    SamplerOptions,
};
use vdm_core::gradcheck::{standard_suite, GRAD_CHECK_TOL};
use vdm_core::loss::{
    continuous_loss, loss_constant_naive, loss_constant_stable, monotone_weighting_identity_check, native_sq_error,
    DataSource, TimeDistribution,
};
use vdm_core::nn::MonotonicNet;
use vdm_core::oracle::{grid_bayes_posterior_auto, unit_gaussian_continuous_loss, AnalyticGaussianOracle};
use vdm_core::param::{convert, target, translate_loss, PredictionKind};
use vdm_core::schedule::{weighting_cdf_check, WeightingClass};
use vdm_core::{NoiseSchedule, Prediction, ScheduleSample, Tensor, WeightingFn};

use crate::output::{num, Table};

/// Posterior `q(z_s | z_t, x)` under test.
pub type PosteriorFn = fn(&ScheduleSample, &ScheduleSample) -> vdm_core::Result<PosteriorParams>;

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub posterior: PosteriorFn,
    /// Random schedule pairs for the conjugacy check.
    pub pairs: usize,
    /// Random `(x, ε, λ)` draws for the parameterization checks.
    pub draws: usize,
    /// Monte Carlo sample size for the estimator checks.
    pub mc_samples: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            posterior: posterior_params,
            pairs: 100,
            draws: 1000,
            mc_samples: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub check: &'static str,
    pub expected: f64,
    pub observed: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    fn new(check: &'static str, expected: f64, observed: f64, tolerance: f64) -> Self {
        let pass = observed.is_finite() && (observed - expected).abs() <= tolerance;
        Self {
            check,
            expected,
            observed,
            tolerance,
            pass,
        }
    }
}

type Check = fn(&VerifyOptions, &mut ChaCha8Rng) -> vdm_core::Result<CheckRow>;

/// The registered invariants, in report order.
pub const INVARIANTS: &[(&str, Check)] = &[
    ("conjugacy", conjugacy),
    ("continuous_loss_closed_form", continuous_closed_form),
    ("discrete_loss_decreases_with_steps", discrete_decreasing),
    ("conversion_round_trip", conversion_round_trip),
    ("posterior_mean_rows_agree", posterior_mean_rows),
    ("loss_translation", loss_translation),
    ("stable_matches_naive", stable_matches_naive),
    ("stable_at_tiny_gap", stable_at_tiny_gap),
    ("schedule_endpoints", schedule_endpoints),
    ("schedule_monotone", schedule_monotone),
    ("lambda_density_normalized", lambda_density_normalized),
    ("weighting_cdf_classes", weighting_classes),
    ("monotone_weighting_identity", weighting_identity),
    ("gradient_check", gradient_check),
    ("forward_process_variance", forward_variance),
    ("single_step_sampler_moments", single_step_moments),
];

/// Runs every invariant. A check that errors is reported as failed with a
/// NaN observation.
pub fn run_invariants(opts: &VerifyOptions, seed: u64) -> Vec<CheckRow> {
    INVARIANTS
        .iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            f(opts, &mut rng).unwrap_or(CheckRow {
                check: name,
                expected: 0.0,
                observed: f64::NAN,
                tolerance: 0.0,
                pass: false,
            })
        })
        .collect()
}

pub fn report_table(rows: &[CheckRow]) -> Table {
    let mut t = Table::new(&["check", "expected", "observed", "tolerance", "pass"]);
    for r in rows {
        t.push(vec![
            r.check.to_string(),
            num(r.expected),
            num(r.observed),
            num(r.tolerance),
            r.pass.to_string(),
        ]);
    }
    t
}

fn close(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

fn fixed_schedules() -> Vec<NoiseSchedule> {
    vec![
        NoiseSchedule::linear(-6.0, 6.0).expect("valid"),
        NoiseSchedule::cosine(-6.0, 6.0).expect("valid"),
        NoiseSchedule::flow_linear(-6.0, 6.0).expect("valid"),
        NoiseSchedule::learned(MonotonicNet::seeded(3, 16, -6.0, 6.0)),
    ]
}

/// Grid-Bayes posterior against the closed form on random schedule pairs.
fn conjugacy(o: &VerifyOptions, r: &mut ChaCha8Rng) -> vdm_core::Result<CheckRow> {
    let scheds = fixed_schedules();
    let mut worst: f64 = 0.0;
    for _ in 0..o.pairs {
        let sched = &scheds[r.random_range(0..scheds.len())];
        let a: f64 = r.random_range(0.0..1.0);
        let b: f64 = r.random_range(0.0..1.0);
        let (ts, tt) = (a.min(b), a.max(b).max(a.min(b) + 1e-3).min(1.0));
        let (s, t) = (sched.sample_at(ts)?, sched.sample_at(tt)?);
        let x = normal(r);
        let z = t.alpha * x + t.sigma() * normal(r);
        let (gm, gv) = grid_bayes_posterior_auto(x, z, &s, &t, 4001)?;
        let p = (o.posterior)(&s, &t)?;
        worst = worst
            .max((gm - (p.coef_z * z + p.coef_x * x)).abs())
            .max((gv - p.sigma2_q).abs());
    }
    Ok(CheckRow::new("conjugacy", 0.0, worst, 1e-4))
}

fn continuous_closed_form(o: &VerifyOptions, r: &mut ChaCha8Rng) -> vdm_core::Result<CheckRow> {
    let oracle = AnalyticGaussianOracle::unit(1);
    let sched = NoiseSchedule::linear(-6.0, 6.0)?;
    let est = continuous_loss(
        &DataSource::Gaussian(&oracle),
        &oracle,
        &sched,
        &WeightingFn::Uniform,
        o.mc_samples,
        r,
        TimeDistribution::UniformT,
    )?;
    Ok(CheckRow::new(
        "continuous_loss_closed_form",
        unit_gaussian_continuous_loss(-6.0, 6.0),
        est.value,
        3.0 * est.std_error,
    ))
}

/// Number of doublings `T → 2T` that fail to lower the exact loss.
fn discrete_decreasing(_: &VerifyOptions, _: &mut ChaCha8Rng) -> vdm_core::Result<CheckRow> {
    let oracle = AnalyticGaussianOracle::unit(1);
    let sched = NoiseSchedule::linear(-6.0, 6.0)?;
    let vals: Vec<f64> = (3..=9)
        .map(|k| oracle.discrete_loss_exact(&sched, 1 << k))
        .collect::<vdm_core::Result<_>>()?;
    let bad = vals.windows(2).filter(|w| !(w[1] < w[0])).count();
    Ok(CheckRow::new("discrete_loss_decreases_with_steps", 0.0, bad as f64, 0.0))
}

struct Draw {
    s: ScheduleSample,
    x: Tensor,
    e: Tensor,
    z: Tensor,
}

fn draw(r: &mut ChaCha8Rng) -> vdm_core::Result<Draw> {
    let s = ScheduleSample::from_lambda(0.5, r.random_range(-8.0..=8.0));
    let x = Tensor::vector(vec![normal(r), normal(r)]);
    let e = Tensor::vector(vec![normal(r), normal(r)]);
    let z = diffuse(&x, &s, &e)?;
    Ok(Draw { s, x, e, z })
}

fn conversion_round_trip(o: &VerifyOptions, r: &mut ChaCha8Rng) -> vdm_core::Result<CheckRow> {
    let mut worst: f64 = 0.0;
    for _ in 0..o.draws {
        let d = draw(r)?;
        for from in PredictionKind::ALL {
            let p = Prediction::new(from, target(from, &d.x, &d.e, &d.s)?, d.s.lambda);
            for to in PredictionKind::ALL {
                let q = convert(&p, &d.z, &d.s, to)?;
                let back = convert(&q, &d.z, &d.s, from)?;
                let expect = target(to, &d.x, &d.e, &d.s)?;
                for (a, b) in q.value.data().iter().zip(expect.data()) {
                    worst = worst.max(close(*a, *b));
                }
                for (a, b) in back.value.data().iter().zip(p.value.data()) {
                    worst = worst.max(close(*a, *b));
                }
            }
        }
    }
    Ok(CheckRow::new("conversion_round_trip", 0.0, worst, 1e-12))
}

fn with_error(d: &Draw, r: &mut ChaCha8Rng) -> vdm_core::Result<Prediction> {
    let err = Tensor::vector(vec![0.3 * normal(r), 0.3 * normal(r)]);
    Ok(Prediction::new(PredictionKind::X, d.x.axpby(1.0, &err, 1.0)?, d.s.lambda))
}

fn posterior_mean_rows(o: &VerifyOptions, r: &mut ChaCha8Rng) -> vdm_core::Result<CheckRow> {
    let mut worst: f64 = 0.0;
    for _ in 0..o.draws {
        let d = draw(r)?;
        let lam_s = (d.s.lambda + r.random_range(0.01..4.0)).min(9.0);
        let s = ScheduleSample::from_lambda(0.25, lam_s);
        let px = with_error(&d, r)?;
        let reference = generative_mean(&px, &d.z, &s, &d.s)?;
        for k in PredictionKind::MEAN_KINDS {
            let mu = generative_mean(&convert(&px, &d.z, &d.s, k)?, &d.z, &s, &d.s)?;
            for (a, b) in mu.data().iter().zip(reference.data()) {
                worst = worst.max(close(*a, *b));
            }
        }
    }
    Ok(CheckRow::new("posterior_mean_rows_agree", 0.0, worst, 1e-12))
}

fn loss_translation(o: &VerifyOptions, r: &mut ChaCha8Rng) -> vdm_core::Result<CheckRow> {
    let mut worst: f64 = 0.0;
    for _ in 0..o.draws {
        let d = draw(r)?;
        let px = with_error(&d, r)?;
        for from in PredictionKind::ALL {
            let pa = convert(&px, &d.z, &d.s, from)?;
            let ea = native_sq_error(&pa, &d.x, &d.e, &d.s)?;
            for to in PredictionKind::ALL {
                let pb = convert(&px, &d.z, &d.s, to)?;
                let eb = native_sq_error(&pb, &d.x, &d.e, &d.s)?;
                worst = worst.max(close(translate_loss(ea, from, to, &d.s)?, eb));
            }
        }
    }
    Ok(CheckRow::new("loss_translation", 0.0, worst, 1e-10))
}

fn stable_matches_naive(o: &VerifyOptions, r: &mut ChaCha8Rng) -> vdm_core::Result<CheckRow> {
    let mut worst: f64 = 0.0;
    for _ in 0..o.draws {
        let lt = r.random_range(-8.0..8.0);
        let t = ScheduleSample::from_lambda(0.6, lt);
        let s = ScheduleSample::from_lambda(0.2, lt + r.random_range(0.1..6.0));
        let direct = posterior_params(&s, &t)?;
        let stable = posterior_params_stable(s.gamma(), t.gamma(), &s, &t)?;
        let ls = loss_constant_stable(s.gamma(), t.gamma());
        worst = worst
            .max((direct.sigma2_q - stable.sigma2_q).abs() / stable.sigma2_q)
            .max((direct.coef_z - stable.coef_z).abs() / stable.coef_z.abs())
            .max((direct.coef_x - stable.coef_x).abs() / stable.coef_x.abs())
            .max((loss_constant_naive(&s, &t) - ls).abs() / ls);
    }
    Ok(CheckRow::new("stable_matches_naive", 0.0, worst, 1e-10))
}

/// At `γ_t − γ_s = 1e-12` the stable loss constant and posterior variance
/// against their leading Taylor terms.
fn stable_at_tiny_gap(_: &VerifyOptions, _: &mut ChaCha8Rng) -> vdm_core::Result<CheckRow> {
    let mut worst: f64 = 0.0;
    for gs in [-5.0, 0.0, 3.0] {
        let gt = gs + 1e-12;
        // the representable gap
        let d = gt - gs;
        let (s, t) = (ScheduleSample::from_gamma(0.4, gs), ScheduleSample::from_gamma(0.5, gt));
        let ls = loss_constant_stable(gs, gt);
        worst = worst.max((ls - (d + d * d / 2.0)).abs() / d);
        let p = posterior_params_stable(gs, gt, &s, &t)?;
        let expect = s.sigma2 * (d - d * d / 2.0);
        worst = worst.max((p.sigma2_q - expect).abs() / expect);
    }
    Ok(CheckRow::new("stable_at_tiny_gap", 0.0, worst, 1e-6))
}

fn schedule_endpoints(_: &VerifyOptions, _: &mut ChaCha8Rng) -> vdm_core::Result<CheckRow> {
    let mut worst: f64 = 0.0;
    for s in fixed_schedules() {
        worst = worst
            .max((s.lambda(0.0)? - 6.0).abs())
            .max((s.lambda(1.0)? + 6.0).abs());
    }
    Ok(CheckRow::new("schedule_endpoints", 0.0, worst, 1e-9))
}

fn schedule_monotone(_: &VerifyOptions, _: &mut ChaCha8Rng) -> vdm_core::Result<CheckRow> {
    let mut bad = 0;
    for s in fixed_schedules() {
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let l = s.lambda(i as f64 / 1000.0)?;
            if !(l < prev) {
                bad += 1;
            }
            prev = l;
        }
    }
    Ok(CheckRow::new("schedule_monotone", 0.0, bad as f64, 0.0))
}

/// Simpson's rule on `p(λ)` over `[λ_min, λ_max]`.
fn lambda_density_normalized(_: &VerifyOptions, _: &mut ChaCha8Rng) -> vdm_core::Result<CheckRow> {
    let n = 2000;
    let mut worst: f64 = 0.0;
    for s in fixed_schedules() {
        let h = 12.0 / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * s.lambda_density(-6.0 + h * i as f64)?;
        }
        worst = worst.max((acc * h / 3.0 - 1.0).abs());
    }
    Ok(CheckRow::new("lambda_density_normalized", 0.0, worst, 1e-4))
}

/// Misclassified fixtures among uniform, sigmoid and a Gaussian bump.
fn weighting_classes(_: &VerifyOptions, _: &mut ChaCha8Rng) -> vdm_core::Result<CheckRow> {
    let s = NoiseSchedule::linear(-6.0, 6.0)?;
    let fixtures = [
        (WeightingFn::Uniform, WeightingClass::NotNormalized),
        (WeightingFn::sigmoid_monotone(), WeightingClass::CdfAfterRenormalization),
        (
            WeightingFn::tabulate(-6.0, 6.0, 4001, |l| (-l * l).exp()),
            WeightingClass::NonMonotone,
        ),
    ];
    let mut bad = 0;
    for (w, class) in fixtures {
        if weighting_cdf_check(&w, &s)?.class != class {
            bad += 1;
        }
    }
    Ok(CheckRow::new("weighting_cdf_classes", 0.0, bad as f64, 0.0))
}

fn weighting_identity(o: &VerifyOptions, r: &mut ChaCha8Rng) -> vdm_core::Result<CheckRow> {
    let oracle = AnalyticGaussianOracle::unit(1);
    let sched = NoiseSchedule::linear(-6.0, 6.0)?;
    let rep = monotone_weighting_identity_check(
        &DataSource::Gaussian(&oracle),
        &oracle,
        &sched,
        &WeightingFn::sigmoid_monotone(),
        o.mc_samples,
        r,
    )?;
    Ok(CheckRow::new(
        "monotone_weighting_identity",
        rep.weighted.value,
        rep.integral_of_elbos.value,
        1e-3 + rep.mc_band(),
    ))
}

fn gradient_check(_: &VerifyOptions, r: &mut ChaCha8Rng) -> vdm_core::Result<CheckRow> {
    let worst = standard_suite(r.random())?
        .iter()
        .map(|g| g.max_rel_error)
        .fold(0.0, f64::max);
    Ok(CheckRow::new("gradient_check", 0.0, worst, GRAD_CHECK_TOL))
}

/// Largest standardized deviation of `Var(z_t)` from 1 for unit data.
fn forward_variance(o: &VerifyOptions, r: &mut ChaCha8Rng) -> vdm_core::Result<CheckRow> {
    let sched = NoiseSchedule::cosine(-6.0, 6.0)?;
    let n = o.mc_samples;
    let mut worst: f64 = 0.0;
    for t in [0.0, 0.5, 1.0] {
        let s = sched.sample_at(t)?;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let z = s.alpha * normal(r) + s.sigma() * normal(r);
            acc += z;
            acc2 += z * z;
        }
        let m = acc / n as f64;
        let v = (acc2 - n as f64 * m * m) / (n - 1) as f64;
        worst = worst.max((v - 1.0).abs() / (2.0 / n as f64).sqrt());
    }
    Ok(CheckRow::new("forward_process_variance", 0.0, worst, 4.0))
}

/// Closed-form output mean and variance of one reverse step from pure
/// noise with the exact denoiser for `N(mean, var)` data.
pub fn single_step_closed_form(mean: f64, var: f64, sched: &NoiseSchedule) -> vdm_core::Result<(f64, f64)> {
    let (s, t) = (sched.sample_at(0.0)?, sched.sample_at(1.0)?);
    let c = 1.0 - (t.lambda - s.lambda).exp();
    let k = s.alpha / t.alpha;
    // x̂(z) = mean + g·(z − α_t·mean)
    let g = t.alpha * var / (t.alpha2() * var + t.sigma2);
    // μ(z) = k((1 − c)z + c·α_t·x̂(z)) = a·z + b
    let a = k * ((1.0 - c) + c * t.alpha * g);
    let b = k * c * t.alpha * (mean - g * t.alpha * mean);
    Ok((b, a * a + s.sigma2 * c))
}

/// Largest z-score of the single-step output moments.
fn single_step_moments(o: &VerifyOptions, r: &mut ChaCha8Rng) -> vdm_core::Result<CheckRow> {
    let (m, v) = (0.7, 0.5);
    let oracle = AnalyticGaussianOracle::new(vec![m], vec![v])?;
    let sched = NoiseSchedule::linear(-6.0, 6.0)?;
    let n = o.mc_samples;
    let (out, _) = ancestral_sample(&oracle, &sched, n, 1, &SamplerOptions::new(1), r)?;
    let (em, ev) = single_step_closed_form(m, v, &sched)?;
    let mean = out.sum() / n as f64;
    let var = out.data().iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / (n - 1) as f64;
    let zm = (mean - em).abs() / (ev / n as f64).sqrt();
    let zv = (var - ev).abs() / (ev * (2.0 / (n - 1) as f64).sqrt());
    Ok(CheckRow::new("single_step_sampler_moments", 0.0, zm.max(zv), 3.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use vdm_core::diffusion::{posterior_from_transition, transition_params};

    fn small() -> VerifyOptions {
        VerifyOptions {
            pairs: 20,
            draws: 50,
            mc_samples: 20_000,
            ..Default::default()
        }
    }

    fn sign_bug(s: &ScheduleSample, t: &ScheduleSample) -> vdm_core::Result<PosteriorParams> {
        let mut tp = transition_params(s, t)?;
        tp.sigma2_ts = -tp.sigma2_ts;
        posterior_from_transition(s, t, &tp)
    }

    #[test]
    fn all_registered_invariants_pass() {
        let rows = run_invariants(&small(), 1);
        assert_eq!(rows.len(), INVARIANTS.len());
        for (r, (name, _)) in rows.iter().zip(INVARIANTS) {
            assert_eq!(r.check, *name);
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn injected_sign_bug_fails_conjugacy_only_there() {
        let opts = VerifyOptions {
            posterior: sign_bug,
            ..small()
        };
        let row = conjugacy(&opts, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(!row.pass, "{row:?}");
        let good = conjugacy(&small(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(good.pass, "{good:?}");
    }

    #[test]
    fn single_step_closed_form_for_degenerate_data() {
        // point-mass data: x̂ is the mean regardless of z
        let sched = NoiseSchedule::linear(-6.0, 6.0).unwrap();
        let (s, t) = (sched.sample_at(0.0).unwrap(), sched.sample_at(1.0).unwrap());
        let (m, v) = single_step_closed_form(1.5, 0.0, &sched).unwrap();
        let c = -(s.gamma() - t.gamma()).exp_m1();
        let p = posterior_params(&s, &t).unwrap();
        assert!((m - p.coef_x * 1.5).abs() < 1e-12);
        assert!((v - (p.coef_z * p.coef_z + s.sigma2 * c)).abs() < 1e-12);
    }
}
