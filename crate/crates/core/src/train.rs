//! Training the denoiser (and optionally a learned schedule) by stochastic
//! gradient descent on the diffusion loss.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Graph;
use crate::error::{Result, VdmError};
use crate::loss::loss_constant_stable;
use crate::nn::{DenoiserNet, MonotonicNet, Sgd};
use crate::param::{conversion_coeffs, PredictionKind};
use crate::schedule::{NoiseSchedule, ScheduleKind, ScheduleSample, WeightingFn};
use crate::tensor::Tensor;

/// The objective minimized each step, always measured on `‖ε − ε̂‖²`.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainObjective {
    /// Continuous-time `½·w(λ_t)·(−dλ/dt)·‖ε − ε̂‖²` with `t ~ U(0,1)`.
    Continuous(WeightingFn),
    /// Unweighted `‖ε − ε̂‖²`.
    Simple,
    /// `(T/2)·expm1(λ_s − λ_t)·‖ε − ε̂‖²` with `i ~ U{1..T}`.
    Discrete(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub objective: TrainObjective,
    /// Place batch times on a randomly shifted regular grid instead of
    /// independently; unbiased and lower variance.
    pub stratified: bool,
    /// Anneal the denoiser learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    /// Learning rate for a learned schedule, trained to minimize the
    /// second moment of the per-sample loss. Ignored for fixed schedules.
    pub schedule_lr: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 128,
            lr: Sgd::DEFAULT_LR,
            momentum: Sgd::DEFAULT_MOMENTUM,
            objective: TrainObjective::Continuous(WeightingFn::Uniform),
            stratified: true,
            cosine_decay: false,
            schedule_lr: 1e-4,
        }
    }
}

/// Per-step minibatch losses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

fn draw_times(n: usize, stratified: bool, rng: &mut impl Rng) -> Vec<f64> {
    if stratified {
        let u: f64 = rng.random_range(0.0..1.0);
        (0..n).map(|i| ((i as f64 + u) / n as f64).min(1.0)).collect()
    } else {
        (0..n).map(|_| rng.random_range(0.0..=1.0)).collect()
    }
}

/// Trains `net` on rows of `data`. A learned schedule is updated jointly;
/// that path requires an ε-predicting network and the continuous `w ≡ 1`
/// objective.
pub fn train_denoiser(
    net: &mut DenoiserNet,
    sched: &mut NoiseSchedule,
    data: &Tensor,
    opts: &TrainOptions,
    rng: &mut impl Rng,
) -> Result<TrainReport> {
    if data.rows() == 0 {
        return Err(VdmError::EmptyDataset);
    }
    if data.cols() != net.config().dim {
        return Err(VdmError::Dimension {
            expected: vec![data.rows(), net.config().dim],
            got: data.shape().to_vec(),
        });
    }
    let learned = matches!(sched.kind(), ScheduleKind::Learned(_));
    if learned && (net.kind() != PredictionKind::Eps || opts.objective != TrainObjective::Continuous(WeightingFn::Uniform)) {
        return Err(VdmError::Unsupported(
            "joint schedule learning needs an eps network and the unweighted continuous loss".into(),
        ));
    }
    let mut opt = Sgd::new(opts.lr, opts.momentum);
    let mut sched_opt = Sgd::new(opts.schedule_lr, opts.momentum);
    let mut report = TrainReport::default();
    let (b, d) = (opts.batch, data.cols());
    for step in 0..opts.steps {
        if opts.cosine_decay {
            let frac = step as f64 / opts.steps as f64;
            opt.lr = opts.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        }
        let mut xb = Vec::with_capacity(b * d);
        for _ in 0..b {
            xb.extend_from_slice(data.row(rng.random_range(0..data.rows())));
        }
        let eps: Vec<f64> = (0..b * d).map(|_| rng.sample(StandardNormal)).collect();
        let x = Tensor::new(vec![b, d], xb)?;
        let e = Tensor::new(vec![b, d], eps)?;
        let loss_value = if let ScheduleKind::Learned(mono) = sched.kind_mut() {
            let times = draw_times(b, opts.stratified, rng);
            let jg = joint_objective(net, mono, &times, &x, &e)?;
            check_loss(jg.loss, &report)?;
            let mut gs = jg.schedule;
            mono.mask_grads(&mut gs);
            opt.step(net.params_mut(), &jg.net)?;
            sched_opt.step(mono.params_mut(), &gs)?;
            jg.loss
        } else {
            let (samples, weights) = draw_levels(sched, &opts.objective, b, opts.stratified, rng)?;
            let (v, grads) = denoiser_objective(net, &samples, &weights, &x, &e)?;
            check_loss(v, &report)?;
            opt.step(net.params_mut(), &grads)?;
            v
        };
        report.losses.push(loss_value);
    }
    Ok(report)
}

fn check_loss(v: f64, report: &TrainReport) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(VdmError::Diverged {
            step: report.losses.len(),
            last_finite: report.losses.last().copied(),
        })
    }
}

/// Noise levels and per-row loss weights for one minibatch.
fn draw_levels(
    sched: &NoiseSchedule,
    objective: &TrainObjective,
    b: usize,
    stratified: bool,
    rng: &mut impl Rng,
) -> Result<(Vec<ScheduleSample>, Vec<f64>)> {
    let mut samples = Vec::with_capacity(b);
    let mut weights = Vec::with_capacity(b);
    match objective {
        TrainObjective::Continuous(w) => {
            for t in draw_times(b, stratified, rng) {
                let s = sched.sample_at(t)?;
                weights.push(0.5 * w.eval(s.lambda) * -sched.dlambda_dt(t)?);
                samples.push(s);
            }
        }
        TrainObjective::Simple => {
            for t in draw_times(b, stratified, rng) {
                samples.push(sched.sample_at(t)?);
                weights.push(1.0);
            }
        }
        TrainObjective::Discrete(steps) => {
            let steps = *steps;
            if steps == 0 {
                return Err(VdmError::Precondition("discrete objective needs T >= 1".into()));
            }
            for _ in 0..b {
                let i = rng.random_range(1..=steps);
                let s = sched.sample_at((i - 1) as f64 / steps as f64)?;
                let t = sched.sample_at(i as f64 / steps as f64)?;
                weights.push(0.5 * steps as f64 * loss_constant_stable(-s.lambda, -t.lambda));
                samples.push(t);
            }
        }
    }
    Ok((samples, weights))
}

/// `mean_i weights[i]·‖ε_i − ε̂_i‖²` at fixed noise levels, where `ε̂` is
/// the network output converted to the ε kind. Returns the loss and its
/// gradient for every network parameter.
pub fn denoiser_objective(
    net: &DenoiserNet,
    samples: &[ScheduleSample],
    weights: &[f64],
    x: &Tensor,
    eps: &Tensor,
) -> Result<(f64, Vec<Tensor>)> {
    let b = x.rows();
    if samples.len() != b || weights.len() != b || x.shape() != eps.shape() {
        return Err(VdmError::Contract(format!(
            "minibatch of {b} rows with {} levels and {} weights",
            samples.len(),
            weights.len()
        )));
    }
    let mut z = x.clone();
    for (i, s) in samples.iter().enumerate() {
        for (zv, ev) in z.row_mut(i).iter_mut().zip(eps.row(i)) {
            *zv = s.alpha * *zv + s.sigma() * ev;
        }
    }
    let mut g = Graph::new();
    let zn = g.input(z);
    let ln = g.input(Tensor::new(vec![b, 1], samples.iter().map(|s| s.lambda).collect())?);
    let out = net.build(&mut g, zn, ln, 0)?;
    let eps_hat = if net.kind() == PredictionKind::Eps {
        out
    } else {
        let mut cz = Vec::with_capacity(b);
        let mut cp = Vec::with_capacity(b);
        for s in samples {
            let (a, c) = conversion_coeffs(net.kind(), PredictionKind::Eps, s.alpha, s.sigma())?;
            cz.push(a);
            cp.push(c);
        }
        let czn = g.input(Tensor::new(vec![b, 1], cz)?);
        let cpn = g.input(Tensor::new(vec![b, 1], cp)?);
        let part_z = g.mul_col(zn, czn)?;
        let part_p = g.mul_col(out, cpn)?;
        g.add(part_z, part_p)?
    };
    let en = g.input(eps.clone());
    let diff = g.sub(en, eps_hat)?;
    let sq = g.square(diff);
    let rows = g.sum_cols(sq);
    let wn = g.input(Tensor::new(vec![b, 1], weights.to_vec())?);
    let weighted = g.mul(rows, wn)?;
    let loss = g.mean(weighted);
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    Ok((value, net.params().grads(&grads, 0)))
}

/// Loss and gradients of the joint denoiser and schedule objective.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGradients {
    /// `mean_i ½·γ′(t_i)·‖ε_i − ε̂_i‖²`.
    pub loss: f64,
    /// Mean of the squared per-row terms.
    pub second_moment: f64,
    /// d loss / d denoiser parameters.
    pub net: Vec<Tensor>,
    /// d second_moment / d schedule parameters.
    pub schedule: Vec<Tensor>,
}

/// The unweighted continuous loss with `z_t` built from the schedule
/// network inside the graph, so that gradients reach its parameters.
pub fn joint_objective(
    net: &DenoiserNet,
    mono: &MonotonicNet,
    times: &[f64],
    x: &Tensor,
    eps: &Tensor,
) -> Result<JointGradients> {
    let b = x.rows();
    if net.kind() != PredictionKind::Eps {
        return Err(VdmError::Unsupported("joint schedule learning needs an eps network".into()));
    }
    if times.len() != b || x.shape() != eps.shape() {
        return Err(VdmError::Contract(format!("minibatch of {b} rows with {} times", times.len())));
    }
    let offset = net.params().len();
    let mut g = Graph::new();
    let tn = g.input(Tensor::new(vec![b, 1], times.to_vec())?);
    let gamma = mono.build(&mut g, tn, offset)?;
    let gprime = mono.build_derivative(&mut g, tn, offset)?;
    let neg = g.scale(gamma, -1.0);
    let a2 = g.sigmoid(neg);
    let s2 = g.sigmoid(gamma);
    let alpha = g.sqrt(a2);
    let sigma = g.sqrt(s2);
    let xn = g.input(x.clone());
    let en = g.input(eps.clone());
    let xa = g.mul_col(xn, alpha)?;
    let es = g.mul_col(en, sigma)?;
    let z = g.add(xa, es)?;
    let out = net.build(&mut g, z, neg, 0)?;
    let diff = g.sub(en, out)?;
    let sq = g.square(diff);
    let rows = g.sum_cols(sq);
    let per = g.mul(rows, gprime)?;
    let per = g.scale(per, 0.5);
    let loss = g.mean(per);
    let per_sq = g.square(per);
    let second = g.mean(per_sq);
    let value = g.value(loss).data()[0];
    let second_value = g.value(second).data()[0];
    let grads = g.backward(loss)?;
    let net_grads = net.params().grads(&grads, 0);
    let sgrads = g.backward(second)?;
    Ok(JointGradients {
        loss: value,
        second_moment: second_value,
        net: net_grads,
        schedule: mono.params().grads(&sgrads, offset),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DenoiserConfig;
    use crate::oracle::five_clusters;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let data = five_clusters(200, 1).unwrap().points;
        let mut net = DenoiserNet::new(DenoiserConfig::new(2, vec![16], PredictionKind::Eps), 3).unwrap();
        let before = net.clone();
        let mut sched = NoiseSchedule::linear(-6.0, 6.0).unwrap();
        let opts = TrainOptions { steps: 5, lr: 0.0, ..Default::default() };
        train_denoiser(&mut net, &mut sched, &data, &opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn divergence_is_reported_with_the_step() {
        let data = five_clusters(200, 1).unwrap().points;
        let mut net = DenoiserNet::new(DenoiserConfig::new(2, vec![16], PredictionKind::Eps), 3).unwrap();
        let mut sched = NoiseSchedule::linear(-6.0, 6.0).unwrap();
        let opts = TrainOptions { steps: 200, lr: 1e6, ..Default::default() };
        match train_denoiser(&mut net, &mut sched, &data, &opts, &mut ChaCha8Rng::seed_from_u64(0)) {
            Err(VdmError::Diverged { step, .. }) => assert!(step < 200),
            Err(VdmError::NonFinite(_)) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn same_seed_same_curve() {
        let data = five_clusters(200, 1).unwrap().points;
        let run = || {
            let mut net = DenoiserNet::new(DenoiserConfig::new(2, vec![16], PredictionKind::V), 3).unwrap();
            let mut sched = NoiseSchedule::cosine(-6.0, 6.0).unwrap();
            let opts = TrainOptions { steps: 20, lr: 1e-3, ..Default::default() };
            train_denoiser(&mut net, &mut sched, &data, &opts, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn learned_schedule_moves_and_keeps_endpoints() {
        let data = five_clusters(200, 1).unwrap().points;
        let mut net = DenoiserNet::new(DenoiserConfig::new(2, vec![16], PredictionKind::Eps), 3).unwrap();
        let mono = MonotonicNet::seeded(2, 8, -6.0, 6.0);
        let mut sched = NoiseSchedule::learned(mono.clone());
        let opts = TrainOptions { steps: 20, lr: 1e-3, schedule_lr: 1e-2, ..Default::default() };
        train_denoiser(&mut net, &mut sched, &data, &opts, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let ScheduleKind::Learned(after) = sched.kind() else { panic!() };
        assert_ne!(after, &mono);
        assert_eq!(after.endpoints(), (-6.0, 6.0));
        assert_eq!(sched.lambda(0.0).unwrap(), 6.0);
    }
}
