//! Output parameterizations, their exact linear inter-conversions and the
//! translation of squared-error losses between them.
//!
//! Every kind is a fixed linear combination `a·x + b·ε` of the data and the
//! noise at a given `(α, σ)`:
//!
//! | kind          | target            | `(a, b)`      |
//! |---------------|-------------------|---------------|
//! | `X`           | `x`               | `(1, 0)`      |
//! | `Eps`         | `ε`               | `(0, 1)`      |
//! | `Score`       | `−ε/σ`            | `(0, −1/σ)`   |
//! | `V`           | `αε − σx`         | `(−σ, α)`     |
//! | `U`           | `ε − x`           | `(−1, 1)`     |
//! | `EnergyGrad`  | `∇E = −score`     | `(0, 1/σ)`    |
//!
//! Since `z = αx + σε`, any kind converts to any other as `c_z·z + c_p·p`.

use crate::error::{Result, VdmError};
use crate::schedule::ScheduleSample;
use crate::tensor::Tensor;

/// Divisors below this raise [`VdmError::EndpointSingularity`].
pub const SINGULAR_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PredictionKind {
    X,
    Eps,
    Score,
    V,
    U,
    EnergyGrad,
}

impl PredictionKind {
    pub const ALL: [PredictionKind; 6] = [
        PredictionKind::X,
        PredictionKind::Eps,
        PredictionKind::Score,
        PredictionKind::V,
        PredictionKind::U,
        PredictionKind::EnergyGrad,
    ];

    /// The five kinds with a posterior-mean row.
    pub const MEAN_KINDS: [PredictionKind; 5] = [
        PredictionKind::X,
        PredictionKind::Eps,
        PredictionKind::Score,
        PredictionKind::V,
        PredictionKind::U,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PredictionKind::X => "x",
            PredictionKind::Eps => "eps",
            PredictionKind::Score => "score",
            PredictionKind::V => "v",
            PredictionKind::U => "u",
            PredictionKind::EnergyGrad => "energy",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "x" => PredictionKind::X,
            "eps" => PredictionKind::Eps,
            "score" => PredictionKind::Score,
            "v" => PredictionKind::V,
            "u" => PredictionKind::U,
            "energy" => PredictionKind::EnergyGrad,
            other => {
                return Err(VdmError::Lookup {
                    kind: "prediction kind",
                    name: other.to_string(),
                })
            }
        })
    }

    /// `(a, b)` such that the target of this kind is `a·x + b·ε`.
    pub fn coordinates(self, alpha: f64, sigma: f64) -> (f64, f64) {
        match self {
            PredictionKind::X => (1.0, 0.0),
            PredictionKind::Eps => (0.0, 1.0),
            PredictionKind::Score => (0.0, -1.0 / sigma),
            PredictionKind::V => (-sigma, alpha),
            PredictionKind::U => (-1.0, 1.0),
            PredictionKind::EnergyGrad => (0.0, 1.0 / sigma),
        }
    }
}

/// A network output tagged with its kind and the log-SNR it refers to.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub kind: PredictionKind,
    pub value: Tensor,
    pub lambda: f64,
}

impl Prediction {
    pub fn new(kind: PredictionKind, value: Tensor, lambda: f64) -> Self {
        Self {
            kind,
            value,
            lambda,
        }
    }
}

fn guard(what: &'static str, value: f64) -> Result<f64> {
    if value.abs() < SINGULAR_THRESHOLD {
        Err(VdmError::EndpointSingularity { what, value })
    } else {
        Ok(value)
    }
}

/// `(c_z, c_p)` with `to = c_z·z + c_p·from`, written out per pair. Fails
/// exactly when the pair's formula divides by `α` or `σ` and that divisor
/// is below [`SINGULAR_THRESHOLD`].
pub fn conversion_coeffs(from: PredictionKind, to: PredictionKind, alpha: f64, sigma: f64) -> Result<(f64, f64)> {
    use PredictionKind::*;
    if from == to {
        return Ok((0.0, 1.0));
    }
    // energy gradients are negated scores
    match (from, to) {
        (EnergyGrad, Score) | (Score, EnergyGrad) => return Ok((0.0, -1.0)),
        (EnergyGrad, _) => {
            let (cz, cp) = conversion_coeffs(Score, to, alpha, sigma)?;
            return Ok((cz, -cp));
        }
        (_, EnergyGrad) => {
            let (cz, cp) = conversion_coeffs(from, Score, alpha, sigma)?;
            return Ok((-cz, -cp));
        }
        _ => {}
    }
    let (a, s) = (alpha, sigma);
    let r2 = a * a + s * s;
    let q = a + s;
    Ok(match (from, to) {
        (X, Eps) => {
            let s = guard("sigma", s)?;
            (1.0 / s, -a / s)
        }
        (X, Score) => {
            let s = guard("sigma", s)?;
            (-1.0 / (s * s), a / (s * s))
        }
        (X, V) => {
            let s = guard("sigma", s)?;
            (a / s, -r2 / s)
        }
        (X, U) => {
            let s = guard("sigma", s)?;
            (1.0 / s, -q / s)
        }
        (Eps, X) => {
            let a = guard("alpha", a)?;
            (1.0 / a, -s / a)
        }
        (Eps, Score) => (0.0, -1.0 / guard("sigma", s)?),
        (Eps, V) => {
            let a = guard("alpha", a)?;
            (-s / a, r2 / a)
        }
        (Eps, U) => {
            let a = guard("alpha", a)?;
            (-1.0 / a, q / a)
        }
        (Score, X) => {
            let a = guard("alpha", a)?;
            (1.0 / a, s * s / a)
        }
        (Score, Eps) => (0.0, -s),
        (Score, V) => {
            let a = guard("alpha", a)?;
            (-s / a, -s * r2 / a)
        }
        (Score, U) => {
            let a = guard("alpha", a)?;
            (-1.0 / a, -q * s / a)
        }
        (V, X) => (a / r2, -s / r2),
        (V, Eps) => (s / r2, a / r2),
        (V, Score) => {
            let s = guard("sigma", s)?;
            (-1.0 / r2, -a / (s * r2))
        }
        (V, U) => ((s - a) / r2, q / r2),
        (U, X) => (1.0 / q, -s / q),
        (U, Eps) => (1.0 / q, a / q),
        (U, Score) => {
            let s = guard("sigma", s)?;
            (-1.0 / (s * q), -a / (s * q))
        }
        (U, V) => ((a - s) / q, r2 / q),
        _ => unreachable!("energy and identity handled above"),
    })
}

/// Converts a prediction at `sample` to another kind.
pub fn convert(pred: &Prediction, z: &Tensor, sample: &ScheduleSample, to: PredictionKind) -> Result<Prediction> {
    pred.value.same_shape(z)?;
    let (cz, cp) = conversion_coeffs(pred.kind, to, sample.alpha, sample.sigma())?;
    Ok(Prediction {
        kind: to,
        value: z.axpby(cz, &pred.value, cp)?,
        lambda: pred.lambda,
    })
}

/// Row-wise conversion of a `[n, d]` batch where row `i` refers to
/// `samples[i]`.
pub fn convert_rows(
    from: PredictionKind,
    value: &Tensor,
    z: &Tensor,
    samples: &[ScheduleSample],
    to: PredictionKind,
) -> Result<Tensor> {
    value.same_shape(z)?;
    if samples.len() != z.rows() {
        return Err(VdmError::Dimension {
            expected: vec![z.rows()],
            got: vec![samples.len()],
        });
    }
    let mut out = value.clone();
    if from == to {
        return Ok(out);
    }
    for (i, s) in samples.iter().enumerate() {
        let (cz, cp) = conversion_coeffs(from, to, s.alpha, s.sigma())?;
        for (o, zi) in out.row_mut(i).iter_mut().zip(z.row(i)) {
            *o = cz * zi + cp * *o;
        }
    }
    Ok(out)
}

/// The exact target of `kind` for data `x` and noise `eps`.
pub fn target(kind: PredictionKind, x: &Tensor, eps: &Tensor, sample: &ScheduleSample) -> Result<Tensor> {
    if matches!(kind, PredictionKind::Score | PredictionKind::EnergyGrad) {
        guard("sigma", sample.sigma())?;
    }
    let (a, b) = kind.coordinates(sample.alpha, sample.sigma());
    x.axpby(a, eps, b)
}

/// The factor `m` with `target − prediction = m·(x − x̂)` for consistent
/// predictions.
fn error_multiplier(kind: PredictionKind, alpha: f64, sigma: f64) -> f64 {
    let (a, s) = (alpha, sigma);
    match kind {
        PredictionKind::X => 1.0,
        PredictionKind::Eps => -a / s,
        PredictionKind::Score => a / (s * s),
        PredictionKind::V => -(a * a + s * s) / s,
        PredictionKind::U => -(a + s) / s,
        PredictionKind::EnergyGrad => -a / (s * s),
    }
}

/// `f` such that `‖to − t̂o‖² = f·‖from − f̂rom‖²` for predictions linked
/// by [`convert`].
pub fn loss_factor(from: PredictionKind, to: PredictionKind, sample: &ScheduleSample) -> Result<f64> {
    if from == to {
        return Ok(1.0);
    }
    let (a, s) = (sample.alpha, sample.sigma());
    if from != PredictionKind::X || to != PredictionKind::X {
        guard("sigma", s)?;
    }
    if matches!(
        from,
        PredictionKind::Eps | PredictionKind::Score | PredictionKind::EnergyGrad
    ) {
        guard("alpha", a)?;
    }
    let r = error_multiplier(to, a, s) / error_multiplier(from, a, s);
    Ok(r * r)
}

/// Translates a squared error measured in `from` space into `to` space.
pub fn translate_loss(sq_err: f64, from: PredictionKind, to: PredictionKind, sample: &ScheduleSample) -> Result<f64> {
    if !(sq_err >= 0.0) {
        return Err(VdmError::Domain {
            value: sq_err,
            domain: "squared error >= 0",
        });
    }
    Ok(sq_err * loss_factor(from, to, sample)?)
}

/// Squared errors of two linked predictions, measured directly and via
/// [`translate_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslationResidual {
    pub direct: f64,
    pub translated: f64,
}

impl TranslationResidual {
    pub fn abs(&self) -> f64 {
        (self.direct - self.translated).abs()
    }

    /// `|direct − translated| ≤ tol·(1 + direct)`.
    pub fn within(&self, tol: f64) -> bool {
        self.abs() <= tol * (1.0 + self.direct.abs())
    }
}

/// Measures `pred_a`'s error, translates it into `pred_b`'s kind and
/// compares with `pred_b`'s direct error.
pub fn direct_vs_translated(
    x: &Tensor,
    eps: &Tensor,
    pred_a: &Prediction,
    pred_b: &Prediction,
    sample: &ScheduleSample,
) -> Result<TranslationResidual> {
    let ea = target(pred_a.kind, x, eps, sample)?.sq_dist(&pred_a.value)?;
    let eb = target(pred_b.kind, x, eps, sample)?.sq_dist(&pred_b.value)?;
    Ok(TranslationResidual {
        direct: eb,
        translated: translate_loss(ea, pred_a.kind, pred_b.kind, sample)?,
    })
}

/// One row of the conversion table.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversionRow {
    pub from: PredictionKind,
    pub to: PredictionKind,
    pub coef_z: f64,
    pub coef_pred: f64,
    pub loss_factor: f64,
}

/// Every ordered pair of distinct kinds at one schedule point.
pub fn conversion_table(sample: &ScheduleSample) -> Result<Vec<ConversionRow>> {
    let mut rows = Vec::new();
    for from in PredictionKind::ALL {
        for to in PredictionKind::ALL {
            if from == to {
                continue;
            }
            let (cz, cp) = conversion_coeffs(from, to, sample.alpha, sample.sigma())?;
            rows.push(ConversionRow {
                from,
                to,
                coef_z: cz,
                coef_pred: cp,
                loss_factor: loss_factor(from, to, sample)?,
            });
        }
    }
    Ok(rows)
}
