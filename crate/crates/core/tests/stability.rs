mod support;

use support::exact::{rel_err, Fx};
use vdm_core::diffusion::{posterior_mean_eps_stable, posterior_params, posterior_params_stable};
use vdm_core::loss::{loss_constant_naive, loss_constant_stable};
use vdm_core::{ScheduleSample, Tensor};

#[test]
fn reference_arithmetic_reproduces_double_precision_values() {
    for x in [-7.5, -1.0, -1e-9, 0.3, 2.0, 9.0] {
        assert!(rel_err(Fx::from_f64(x).expm1().to_f64(), f64::exp_m1(x)) < 1e-15);
        assert!(rel_err(Fx::from_f64(x).sigmoid().to_f64(), 1.0 / (1.0 + (-x).exp())) < 1e-15);
    }
    assert_eq!(Fx::from_f64(0.1).to_f64(), 0.1);
}

#[test]
fn stable_forms_hold_at_infinitesimal_gaps() {
    for gamma_s in [-7.0, -2.5, 0.0, 1.3, 6.0] {
        for delta in [1e-12, 1e-10, 1e-8] {
            let gamma_t = gamma_s + delta;
            let s = ScheduleSample::from_gamma(0.4, gamma_s);
            let t = ScheduleSample::from_gamma(0.4 + 1e-9, gamma_t);
            let (gs, gt) = (Fx::from_f64(gamma_s), Fx::from_f64(gamma_t));
            let d = gt.sub(&gs);
            // c = 1 − e^{−d}
            let c = d.neg().expm1().neg();
            let sig2_s = gs.sigmoid();
            let exact_sigma2_q = sig2_s.mul(&c).to_f64();
            let exact_loss_const = d.expm1().to_f64();
            let ratio = gs.neg().sigmoid().div(&gt.neg().sigmoid()).to_f64().sqrt();
            let sigma_t = gt.sigmoid().to_f64().sqrt();

            let st = posterior_params_stable(gamma_s, gamma_t, &s, &t).unwrap();
            assert!(st.sigma2_q.is_finite() && rel_err(st.sigma2_q, exact_sigma2_q) < 1e-6, "{gamma_s} {delta}");
            let lc = loss_constant_stable(gamma_s, gamma_t);
            assert!(lc.is_finite() && rel_err(lc, exact_loss_const) < 1e-6);

            // each coefficient of μ on its own: z = 0, then ε̂ = 0
            let mu_at = |z: f64, e: f64| {
                posterior_mean_eps_stable(gamma_s, gamma_t, &s, &t, &Tensor::vector(vec![z]), &Tensor::vector(vec![e]))
                    .unwrap()
                    .data()[0]
            };
            let exact_eps_coef = ratio * sigma_t * d.neg().expm1().to_f64();
            let eps_coef = mu_at(0.0, 1.0);
            assert!(eps_coef.is_finite() && rel_err(eps_coef, exact_eps_coef) < 1e-6, "{gamma_s} {delta}");
            assert!(rel_err(mu_at(1.0, 0.0), ratio) < 1e-6);
        }
    }
}

#[test]
fn naive_forms_lose_precision_where_stable_forms_do_not() {
    let (gamma_s, gamma_t) = (0.0, 1e-12);
    let s = ScheduleSample::from_gamma(0.4, gamma_s);
    let t = ScheduleSample::from_gamma(0.4 + 1e-9, gamma_t);
    let d = Fx::from_f64(gamma_t).sub(&Fx::from_f64(gamma_s));
    let exact = d.expm1().to_f64();
    let naive = loss_constant_naive(&s, &t);
    assert!(rel_err(naive, exact) > 1e-6 || !naive.is_finite());
    let exact_q = Fx::from_f64(gamma_s).sigmoid().mul(&d.neg().expm1().neg()).to_f64();
    let direct = posterior_params(&s, &t).map(|p| p.sigma2_q);
    assert!(direct.map_or(true, |v| rel_err(v, exact_q) > 1e-6));
}

#[test]
fn stable_and_naive_agree_when_well_conditioned() {
    for gamma_s in [-6.0, -1.0, 0.5, 4.0] {
        for delta in [1e-3, 0.1, 1.0, 5.0] {
            let gamma_t = gamma_s + delta;
            let s = ScheduleSample::from_gamma(0.2, gamma_s);
            let t = ScheduleSample::from_gamma(0.7, gamma_t);
            let a = posterior_params(&s, &t).unwrap();
            let b = posterior_params_stable(gamma_s, gamma_t, &s, &t).unwrap();
            assert!(rel_err(a.sigma2_q, b.sigma2_q) < 1e-10);
            assert!(rel_err(a.coef_z, b.coef_z) < 1e-10);
            assert!(rel_err(a.coef_x, b.coef_x) < 1e-10);
            assert!(rel_err(loss_constant_naive(&s, &t), loss_constant_stable(gamma_s, gamma_t)) < 1e-10);
        }
    }
}
