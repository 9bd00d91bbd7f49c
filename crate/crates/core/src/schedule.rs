//! Noise schedules over log-SNR, the implied density over noise levels, and
//! weighting functions.
//!
//! Every schedule is variance preserving and is described by the map
//! `t ↦ λ_t = log(α_t²/σ_t²)`, strictly decreasing on `[0, 1]` from
//! `λ_max` to `λ_min`. Given `λ`, `α² = sigmoid(λ)` and `σ² = sigmoid(−λ)`;
//! equivalently `σ² = sigmoid(γ)` with `γ = −λ`.

use crate::error::{Result, VdmError};
use crate::nn::MonotonicNet;

pub const DEFAULT_LAMBDA_MIN: f64 = -6.0;
pub const DEFAULT_LAMBDA_MAX: f64 = 6.0;

/// Step for the central difference defining `p_w(t)`.
pub const WEIGHT_DENSITY_STEP: f64 = 1e-4;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Schedule quantities at one time point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSample {
    pub t: f64,
    pub alpha: f64,
    pub sigma2: f64,
    pub lambda: f64,
}

impl ScheduleSample {
    /// Variance-preserving sample at log-SNR `lambda`.
    pub fn from_lambda(t: f64, lambda: f64) -> Self {
        Self {
            t,
            alpha: sigmoid(lambda).sqrt(),
            sigma2: sigmoid(-lambda),
            lambda,
        }
    }

    /// From `γ = −λ`, so that `σ² = sigmoid(γ)`.
    pub fn from_gamma(t: f64, gamma: f64) -> Self {
        Self::from_lambda(t, -gamma)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    pub fn alpha2(&self) -> f64 {
        self.alpha * self.alpha
    }

    pub fn gamma(&self) -> f64 {
        -self.lambda
    }

    pub fn snr(&self) -> f64 {
        self.lambda.exp()
    }
}

/// `α = sqrt(1 − σ²/𝕍[x])`, the signal scale that keeps `𝕍[z_t] = 𝕍[x]`.
pub fn vp_alpha_from_sigma(sigma2: f64, data_variance: f64) -> Result<f64> {
    if !(sigma2 > 0.0 || sigma2 == 0.0) || sigma2 >= data_variance {
        return Err(VdmError::InfeasibleVp {
            sigma2,
            data_variance,
        });
    }
    Ok((1.0 - sigma2 / data_variance).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    /// `λ_t = λ_max − (λ_max − λ_min)·t`.
    LinearLambda,
    /// `α = cos φ`, `σ = sin φ` with the angle `φ` linear in `t` between the
    /// angles of the two endpoints. With unbounded endpoints this is the
    /// usual `α_t = cos(πt/2)`.
    Cosine,
    /// `α = 1 − u`, `σ = u` (up to the VP rescaling of the latent) with `u`
    /// restricted to the interior interval whose log-SNR spans the endpoints.
    FlowLinear,
    /// `λ_t = −γ_η(t)` from a monotonic network.
    Learned(MonotonicNet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    lambda_min: f64,
    lambda_max: f64,
}

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(VdmError::Domain {
            value: t,
            domain: "t in [0, 1]",
        })
    }
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, lambda_min: f64, lambda_max: f64) -> Result<Self> {
        if !(lambda_min.is_finite() && lambda_max.is_finite() && lambda_min < lambda_max) {
            return Err(VdmError::Precondition(format!(
                "schedule endpoints need lambda_min < lambda_max, got [{lambda_min}, {lambda_max}]"
            )));
        }
        if let ScheduleKind::Learned(net) = &kind {
            let (g0, g1) = net.endpoints();
            return Ok(Self {
                lambda_min: -g1,
                lambda_max: -g0,
                kind: ScheduleKind::Learned(net.clone()),
            });
        }
        Ok(Self {
            kind,
            lambda_min,
            lambda_max,
        })
    }

    pub fn linear(lambda_min: f64, lambda_max: f64) -> Result<Self> {
        Self::new(ScheduleKind::LinearLambda, lambda_min, lambda_max)
    }

    pub fn cosine(lambda_min: f64, lambda_max: f64) -> Result<Self> {
        Self::new(ScheduleKind::Cosine, lambda_min, lambda_max)
    }

    pub fn flow_linear(lambda_min: f64, lambda_max: f64) -> Result<Self> {
        Self::new(ScheduleKind::FlowLinear, lambda_min, lambda_max)
    }

    /// Learned schedule; endpoints are read from the network.
    pub fn learned(net: MonotonicNet) -> Self {
        let (g0, g1) = net.endpoints();
        Self {
            lambda_min: -g1,
            lambda_max: -g0,
            kind: ScheduleKind::Learned(net),
        }
    }

    /// Parses `linear-lambda`, `cosine` or `flow-linear`. Learned schedules
    /// are built from a network instead.
    pub fn from_name(name: &str, lambda_min: f64, lambda_max: f64) -> Result<Self> {
        let kind = match name {
            "linear-lambda" | "linear" => ScheduleKind::LinearLambda,
            "cosine" => ScheduleKind::Cosine,
            "flow-linear" => ScheduleKind::FlowLinear,
            other => {
                return Err(VdmError::Lookup {
                    kind: "schedule",
                    name: other.to_string(),
                })
            }
        };
        Self::new(kind, lambda_min, lambda_max)
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ScheduleKind::LinearLambda => "linear-lambda",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::FlowLinear => "flow-linear",
            ScheduleKind::Learned(_) => "learned",
        }
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    pub fn kind_mut(&mut self) -> &mut ScheduleKind {
        &mut self.kind
    }

    pub fn lambda_min(&self) -> f64 {
        match &self.kind {
            ScheduleKind::Learned(net) => -net.endpoints().1,
            _ => self.lambda_min,
        }
    }

    pub fn lambda_max(&self) -> f64 {
        match &self.kind {
            ScheduleKind::Learned(net) => -net.endpoints().0,
            _ => self.lambda_max,
        }
    }

    fn cosine_angles(&self) -> (f64, f64) {
        let phi = |l: f64| (-l / 2.0).exp().atan();
        (phi(self.lambda_max), phi(self.lambda_min))
    }

    fn flow_interval(&self) -> (f64, f64) {
        // λ = 2·log((1−u)/u)  ⇔  u = sigmoid(−λ/2)
        (sigmoid(-self.lambda_max / 2.0), sigmoid(-self.lambda_min / 2.0))
    }

    /// `λ_t`.
    pub fn lambda(&self, t: f64) -> Result<f64> {
        check_t(t)?;
        Ok(self.lambda_unchecked(t))
    }

    fn lambda_unchecked(&self, t: f64) -> f64 {
        let (lo, hi) = (self.lambda_min, self.lambda_max);
        match &self.kind {
            ScheduleKind::LinearLambda => hi - (hi - lo) * t,
            ScheduleKind::Cosine => {
                let (p0, p1) = self.cosine_angles();
                let phi = p0 + (p1 - p0) * t;
                -2.0 * phi.tan().ln()
            }
            ScheduleKind::FlowLinear => {
                let (u0, u1) = self.flow_interval();
                let u = u0 + (u1 - u0) * t;
                2.0 * ((1.0 - u) / u).ln()
            }
            ScheduleKind::Learned(net) => -net.eval_unchecked(t),
        }
    }

    /// `γ_t = −λ_t`.
    pub fn gamma(&self, t: f64) -> Result<f64> {
        Ok(-self.lambda(t)?)
    }

    /// `dλ/dt` in closed form.
    pub fn dlambda_dt(&self, t: f64) -> Result<f64> {
        check_t(t)?;
        let (lo, hi) = (self.lambda_min, self.lambda_max);
        Ok(match &self.kind {
            ScheduleKind::LinearLambda => -(hi - lo),
            ScheduleKind::Cosine => {
                let (p0, p1) = self.cosine_angles();
                let phi = p0 + (p1 - p0) * t;
                -4.0 * (p1 - p0) / (2.0 * phi).sin()
            }
            ScheduleKind::FlowLinear => {
                let (u0, u1) = self.flow_interval();
                let u = u0 + (u1 - u0) * t;
                -2.0 * (u1 - u0) / (u * (1.0 - u))
            }
            ScheduleKind::Learned(net) => -net.derivative_unchecked(t),
        })
    }

    /// `γ′(t) = −dλ/dt`.
    pub fn gamma_prime(&self, t: f64) -> Result<f64> {
        Ok(-self.dlambda_dt(t)?)
    }

    pub fn sample_at(&self, t: f64) -> Result<ScheduleSample> {
        Ok(ScheduleSample::from_lambda(t, self.lambda(t)?))
    }

    fn check_lambda(&self, lambda: f64) -> Result<()> {
        let (lo, hi) = (self.lambda_min(), self.lambda_max());
        let slack = 1e-12 * (1.0 + hi.abs().max(lo.abs()));
        if lambda < lo - slack || lambda > hi + slack || lambda.is_nan() {
            return Err(VdmError::Domain {
                value: lambda,
                domain: "lambda in [lambda_min, lambda_max]",
            });
        }
        Ok(())
    }

    /// The time at which the schedule reaches `lambda`.
    pub fn t_of_lambda(&self, lambda: f64) -> Result<f64> {
        self.check_lambda(lambda)?;
        let (lo, hi) = (self.lambda_min, self.lambda_max);
        let t = match &self.kind {
            ScheduleKind::LinearLambda => (hi - lambda) / (hi - lo),
            ScheduleKind::Cosine => {
                let (p0, p1) = self.cosine_angles();
                let phi = (-lambda / 2.0).exp().atan();
                (phi - p0) / (p1 - p0)
            }
            ScheduleKind::FlowLinear => {
                let (u0, u1) = self.flow_interval();
                (sigmoid(-lambda / 2.0) - u0) / (u1 - u0)
            }
            ScheduleKind::Learned(_) => {
                // λ decreasing in t: bisection
                let (mut a, mut b) = (0.0_f64, 1.0_f64);
                for _ in 0..200 {
                    let m = 0.5 * (a + b);
                    if self.lambda_unchecked(m) > lambda {
                        a = m;
                    } else {
                        b = m;
                    }
                    if b - a < 1e-15 {
                        break;
                    }
                }
                0.5 * (a + b)
            }
        };
        Ok(t.clamp(0.0, 1.0))
    }

    /// Density over noise levels implied by `t ~ U(0,1)`:
    /// `p(λ) = −dt/dλ = 1/|dλ/dt|` evaluated at `t(λ)`.
    pub fn lambda_density(&self, lambda: f64) -> Result<f64> {
        let t = self.t_of_lambda(lambda)?;
        Ok(-1.0 / self.dlambda_dt(t)?)
    }

    /// `(α, σ)` of the non-VP flow-matching latent `z = (1−u)x + uε` at
    /// time `t`; only defined for the flow-linear schedule.
    pub fn flow_coefficients(&self, t: f64) -> Result<(f64, f64)> {
        check_t(t)?;
        match self.kind {
            ScheduleKind::FlowLinear => {
                let (u0, u1) = self.flow_interval();
                let u = u0 + (u1 - u0) * t;
                Ok((1.0 - u, u))
            }
            _ => Err(VdmError::Unsupported(format!(
                "flow coefficients of a {} schedule",
                self.name()
            ))),
        }
    }
}

/// Per-noise-level weighting of the diffusion loss, evaluated on `λ`.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightingFn {
    /// `w ≡ 1`: the plain variational bound.
    Uniform,
    /// `w = 1/γ′(t(λ))`, the weighting implied by the unweighted ε-loss
    /// under the given schedule.
    SimpleImplied(NoiseSchedule),
    /// `w = SNR = e^λ`.
    Snr,
    /// `w = sigmoid(bias − λ)`, monotone increasing in `t`.
    Sigmoid { bias: f64 },
    /// Piecewise-linear interpolation through `(λ_i, w_i)`, ascending `λ_i`;
    /// constant extrapolation outside the table.
    Table { lambdas: Vec<f64>, values: Vec<f64> },
}

impl WeightingFn {
    pub fn sigmoid_monotone() -> Self {
        WeightingFn::Sigmoid { bias: 0.0 }
    }

    /// Tabulates `f` on `n` evenly spaced points of `[lo, hi]`.
    pub fn tabulate(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> Self {
        let lambdas: Vec<f64> = (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect();
        let values = lambdas.iter().map(|&l| f(l)).collect();
        WeightingFn::Table { lambdas, values }
    }

    pub fn eval(&self, lambda: f64) -> f64 {
        match self {
            WeightingFn::Uniform => 1.0,
            WeightingFn::SimpleImplied(s) => match s.lambda_density(lambda) {
                Ok(p) => p,
                Err(_) => f64::NAN,
            },
            WeightingFn::Snr => lambda.exp(),
            WeightingFn::Sigmoid { bias } => sigmoid(bias - lambda),
            WeightingFn::Table { lambdas, values } => interp(lambdas, values, lambda),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeightingFn::Uniform => "uniform",
            WeightingFn::SimpleImplied(_) => "simple-implied",
            WeightingFn::Snr => "snr",
            WeightingFn::Sigmoid { .. } => "sigmoid-monotone",
            WeightingFn::Table { .. } => "custom-table",
        }
    }
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    match xs.len() {
        0 => f64::NAN,
        1 => ys[0],
        _ => {
            if x <= xs[0] {
                return ys[0];
            }
            if x >= xs[xs.len() - 1] {
                return ys[ys.len() - 1];
            }
            let j = xs.partition_point(|&v| v <= x);
            let (x0, x1, y0, y1) = (xs[j - 1], xs[j], ys[j - 1], ys[j]);
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        }
    }
}

/// The weighting a named training objective optimizes.
///
/// `uniform-vlb` is `w ≡ 1`; `simple-eps` (unweighted ε-loss under uniform
/// `t`) is `1/γ′`; `eps-in-x-space` is the weighting `SNR` that the same
/// unweighted ε-loss places on the squared error in data space.
pub fn implied_weighting(objective: &str, sched: &NoiseSchedule) -> Result<WeightingFn> {
    match objective {
        "uniform-vlb" => Ok(WeightingFn::Uniform),
        "simple-eps" => Ok(WeightingFn::SimpleImplied(sched.clone())),
        "eps-in-x-space" => Ok(WeightingFn::Snr),
        other => Err(VdmError::Lookup {
            kind: "objective",
            name: other.to_string(),
        }),
    }
}

/// Outcome of checking whether `t ↦ w(λ_t)` is a cumulative distribution
/// function on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightingClass {
    /// All three conditions hold.
    Cdf,
    /// Values in `[0,1]` and non-decreasing but endpoints off by more than
    /// the tolerance; an affine map `(w − w₀)/(w₁ − w₀)` makes it a CDF.
    CdfAfterRenormalization,
    /// Non-decreasing but flat, so no affine map normalizes it.
    NotNormalized,
    /// Decreases somewhere in `t`: the objective minimizes the ELBO at some
    /// noise levels.
    NonMonotone,
    /// Leaves `[0,1]` while non-decreasing.
    OutOfRange,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdfReport {
    pub in_unit_interval: bool,
    pub non_decreasing: bool,
    pub normalized: bool,
    pub w_at_0: f64,
    pub w_at_1: f64,
    pub class: WeightingClass,
    /// `(t, p_w(t))` on the scan grid; present when `class` is a CDF class.
    pub density: Option<Vec<(f64, f64)>>,
}

const CDF_SCAN_POINTS: usize = 1001;
const CDF_ENDPOINT_TOL: f64 = 1e-3;
const CDF_MONOTONE_SLACK: f64 = 1e-12;

/// `p_w(t) = d/dt w(λ_t)` by central differences (one-sided at the ends).
pub fn weighting_time_density(w: &WeightingFn, sched: &NoiseSchedule, t: f64) -> Result<f64> {
    check_t(t)?;
    let h = WEIGHT_DENSITY_STEP;
    let (a, b) = ((t - h).max(0.0), (t + h).min(1.0));
    Ok((w.eval(sched.lambda(b)?) - w.eval(sched.lambda(a)?)) / (b - a))
}

pub fn weighting_cdf_check(w: &WeightingFn, sched: &NoiseSchedule) -> Result<CdfReport> {
    let n = CDF_SCAN_POINTS;
    let values: Vec<f64> = (0..n)
        .map(|i| sched.lambda(i as f64 / (n - 1) as f64).map(|l| w.eval(l)))
        .collect::<Result<_>>()?;
    let in_unit_interval = values.iter().all(|v| (0.0..=1.0).contains(v));
    let non_decreasing = values
        .windows(2)
        .all(|p| p[1] - p[0] >= -CDF_MONOTONE_SLACK);
    let (w0, w1) = (values[0], values[n - 1]);
    let normalized = w0.abs() <= CDF_ENDPOINT_TOL && (w1 - 1.0).abs() <= CDF_ENDPOINT_TOL;
    let class = if !non_decreasing {
        WeightingClass::NonMonotone
    } else if !in_unit_interval {
        WeightingClass::OutOfRange
    } else if normalized {
        WeightingClass::Cdf
    } else if w1 - w0 > CDF_ENDPOINT_TOL {
        WeightingClass::CdfAfterRenormalization
    } else {
        WeightingClass::NotNormalized
    };
    let density = match class {
        WeightingClass::Cdf | WeightingClass::CdfAfterRenormalization => Some(
            (0..n)
                .map(|i| {
                    let t = i as f64 / (n - 1) as f64;
                    weighting_time_density(w, sched, t).map(|p| (t, p))
                })
                .collect::<Result<_>>()?,
        ),
        _ => None,
    };
    Ok(CdfReport {
        in_unit_interval,
        non_decreasing,
        normalized,
        w_at_0: w0,
        w_at_1: w1,
        class,
        density,
    })
}
