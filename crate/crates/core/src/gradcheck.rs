//! Central finite-difference checks of every trainable parameter against
//! the reverse-mode gradients used in training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::nn::{DenoiserConfig, DenoiserNet, MonotonicNet, ParamSet};
use crate::param::PredictionKind;
use crate::schedule::{NoiseSchedule, ScheduleSample};
use crate::tensor::Tensor;
use crate::train::{denoiser_objective, joint_objective};
use crate::vae::{vae_objective, VaeModel};

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_TOL: f64 = 1e-5;
/// Denominator floor so that near-zero gradients are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Worst agreement over the elements of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub model: String,
    pub param: String,
    pub elements: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRAD_CHECK_TOL
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares `analytic` (one gradient per tensor of the set picked by
/// `set`) with central differences of `loss`, element by element.
pub fn check_param_set<M: Clone>(
    name: &str,
    model: &M,
    set: impl Fn(&mut M) -> &mut ParamSet,
    analytic: &[Tensor],
    loss: impl Fn(&M) -> Result<f64>,
) -> Result<Vec<GradCheck>> {
    let mut probe = model.clone();
    let n = set(&mut probe).len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let len = set(&mut probe).get(i).len();
        let pname = set(&mut probe).name(i).to_string();
        let mut worst: f64 = 0.0;
        for k in 0..len {
            let orig = set(&mut probe).get(i).data()[k];
            set(&mut probe).get_mut(i).data_mut()[k] = orig + GRAD_CHECK_STEP;
            let up = loss(&probe)?;
            set(&mut probe).get_mut(i).data_mut()[k] = orig - GRAD_CHECK_STEP;
            let down = loss(&probe)?;
            set(&mut probe).get_mut(i).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
            worst = worst.max(relative_error(analytic[i].data()[k], numeric));
        }
        out.push(GradCheck {
            model: name.to_string(),
            param: pname,
            elements: len,
            max_rel_error: worst,
        });
    }
    Ok(out)
}

fn normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape matches data")
}

/// Checks the denoiser objective for every prediction kind, the joint
/// denoiser and schedule objective and the VAE objective on small models.
pub fn standard_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, d) = (12, 2);
    let x = normal(&[b, d], &mut rng);
    let eps = normal(&[b, d], &mut rng);
    let sched = NoiseSchedule::linear(-4.0, 4.0)?;
    let times: Vec<f64> = (0..b).map(|i| (i as f64 + 0.5) / b as f64).collect();
    let samples: Vec<ScheduleSample> = times.iter().map(|&t| sched.sample_at(t)).collect::<Result<_>>()?;
    let weights: Vec<f64> = samples.iter().map(|s| 0.5 + 0.1 * s.lambda.abs()).collect();
    let mut out = Vec::new();

    for (j, kind) in PredictionKind::ALL.into_iter().enumerate() {
        let net = DenoiserNet::new(DenoiserConfig::new(d, vec![6, 5], kind), seed + j as u64)?;
        let (_, grads) = denoiser_objective(&net, &samples, &weights, &x, &eps)?;
        out.extend(check_param_set(
            &format!("denoiser[{}]", kind.name()),
            &net,
            |m| m.params_mut(),
            &grads,
            |m| Ok(denoiser_objective(m, &samples, &weights, &x, &eps)?.0),
        )?);
    }

    let net = DenoiserNet::new(DenoiserConfig::new(d, vec![6], PredictionKind::Eps), seed + 10)?;
    let mut mono = MonotonicNet::new(5, -4.0, 4.0, &mut rng)?;
    mono.learn_endpoints = true;
    let pair = (net, mono);
    let jg = joint_objective(&pair.0, &pair.1, &times, &x, &eps)?;
    out.extend(check_param_set(
        "joint.denoiser",
        &pair,
        |m| m.0.params_mut(),
        &jg.net,
        |m| Ok(joint_objective(&m.0, &m.1, &times, &x, &eps)?.loss),
    )?);
    out.extend(check_param_set(
        "joint.schedule",
        &pair,
        |m| m.1.params_mut(),
        &jg.schedule,
        |m| Ok(joint_objective(&m.0, &m.1, &times, &x, &eps)?.second_moment),
    )?);

    let vae = VaeModel::new(d, 2, &[5], 0.1, &mut rng)?;
    let ve = normal(&[b, 2], &mut rng);
    let (_, ge, gd) = vae_objective(&vae, &x, &ve)?;
    out.extend(check_param_set(
        "vae.encoder",
        &vae,
        |m| m.encoder.params_mut(),
        &ge,
        |m| Ok(vae_objective(m, &x, &ve)?.0),
    )?);
    out.extend(check_param_set(
        "vae.decoder",
        &vae,
        |m| m.decoder.params_mut(),
        &gd,
        |m| Ok(vae_objective(m, &x, &ve)?.0),
    )?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_parameter_passes() {
        let report = standard_suite(4).unwrap();
        assert!(report.len() > 20);
        for r in &report {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let net = DenoiserNet::new(DenoiserConfig::new(1, vec![3], PredictionKind::X), 1).unwrap();
        let x = Tensor::matrix(2, 1, vec![0.5, -1.0]).unwrap();
        let e = Tensor::matrix(2, 1, vec![0.1, 0.3]).unwrap();
        let s = ScheduleSample::from_lambda(0.5, 0.0);
        let (_, mut grads) = denoiser_objective(&net, &[s; 2], &[1.0; 2], &x, &e).unwrap();
        grads[0].data_mut()[0] += 0.01;
        let r = check_param_set("x", &net, |m| m.params_mut(), &grads, |m| {
            Ok(denoiser_objective(m, &[s; 2], &[1.0; 2], &x, &e)?.0)
        })
        .unwrap();
        assert!(!r[0].passed());
        assert!(r[1..].iter().all(GradCheck::passed));
    }
}
