//! Parameter storage, a tanh MLP, the λ-conditioned denoiser, the monotonic
//! schedule network, SGD with momentum and flat-CSV checkpoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{Result, VdmError};
use crate::param::PredictionKind;
use crate::schedule::sigmoid;
use crate::tensor::{gemm, Tensor};

/// Named parameter tensors. A parameter's key in a [`Graph`] is its index
/// plus the offset the owner was built with.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Gradients for every parameter, in order, from a reverse pass where
    /// this set was inserted with key offset `offset`.
    pub fn grads(&self, g: &Gradients, offset: usize) -> Vec<Tensor> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| g.param(offset + i, v))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }
}

fn uniform_init(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("init shape")
}

/// Affine layers with tanh between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: ParamSet,
}

impl Mlp {
    /// Fan-in scaled uniform initialization `U(−1/√fan_in, 1/√fan_in)`.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(VdmError::Precondition(format!(
                "an MLP needs at least input and output widths, all positive: {sizes:?}"
            )));
        }
        let mut params = ParamSet::new();
        for (l, w) in sizes.windows(2).enumerate() {
            let bound = 1.0 / (w[0] as f64).sqrt();
            params.push(format!("layer{l}.weight"), uniform_init(rng, w[0], w[1], bound));
            params.push(format!("layer{l}.bias"), uniform_init(rng, 1, w[1], bound).reshape(vec![w[1]])?);
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Sets every weight and bias of the last layer to zero.
    pub fn zero_last_layer(&mut self) {
        let l = self.n_layers() - 1;
        for i in [2 * l, 2 * l + 1] {
            self.params.get_mut(i).data_mut().fill(0.0);
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.rows();
        if x.cols() != self.sizes[0] {
            return Err(VdmError::Dimension {
                expected: vec![n, self.sizes[0]],
                got: x.shape().to_vec(),
            });
        }
        let mut h = x.data().to_vec();
        for l in 0..self.n_layers() {
            let (k, m) = (self.sizes[l], self.sizes[l + 1]);
            let w = self.params.get(2 * l);
            let b = self.params.get(2 * l + 1);
            let mut out = Vec::with_capacity(n * m);
            for _ in 0..n {
                out.extend_from_slice(b.data());
            }
            gemm(n, k, m, &h, false, w.data(), false, &mut out, 1.0);
            if l + 1 < self.n_layers() {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = out;
        }
        Tensor::new(vec![n, self.sizes[self.n_layers()]], h)
    }

    /// Records the forward pass on `g`, with parameter keys starting at
    /// `offset`.
    pub fn build(&self, g: &mut Graph, x: NodeId, offset: usize) -> Result<NodeId> {
        let mut h = x;
        for l in 0..self.n_layers() {
            let w = g.param(offset + 2 * l, self.params.get(2 * l));
            let b = g.param(offset + 2 * l + 1, self.params.get(2 * l + 1));
            let a = g.matmul(h, w)?;
            h = g.add_bias(a, b)?;
            if l + 1 < self.n_layers() {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    /// Data dimensionality.
    pub dim: usize,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    /// Number of sinusoidal frequency pairs in the λ embedding.
    pub n_freq: usize,
    /// What the output head predicts.
    pub kind: PredictionKind,
    /// Adds the input latent to the head output; the head starts at zero,
    /// so a fresh residual network is the identity.
    pub residual: bool,
}

impl DenoiserConfig {
    pub fn new(dim: usize, hidden: Vec<usize>, kind: PredictionKind) -> Self {
        Self {
            dim,
            hidden,
            n_freq: 4,
            kind,
            residual: false,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        1 + 2 * self.n_freq
    }
}

/// Time embedding `[λ/4, sin(2^k λ/4), cos(2^k λ/4)]` for `k < n_freq`.
pub fn lambda_embedding(lambda: f64, n_freq: usize) -> Vec<f64> {
    let base = lambda / 4.0;
    let mut out = Vec::with_capacity(1 + 2 * n_freq);
    out.push(base);
    for k in 0..n_freq {
        let a = base * (1u64 << k) as f64;
        out.push(a.sin());
        out.push(a.cos());
    }
    out
}

/// MLP on `[z, embed(λ)]` producing a prediction of `z`'s shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    config: DenoiserConfig,
    mlp: Mlp,
}

impl DenoiserNet {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![config.dim + config.embedding_dim()];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(config.dim);
        let mut mlp = Mlp::new(&sizes, &mut rng)?;
        if config.residual {
            mlp.zero_last_layer();
        }
        Ok(Self { config, mlp })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn kind(&self) -> PredictionKind {
        self.config.kind
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn params(&self) -> &ParamSet {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.mlp.params_mut()
    }

    fn check_input(&self, z: &Tensor, n_lambda: usize) -> Result<()> {
        if z.cols() != self.config.dim || (n_lambda != z.rows()) {
            return Err(VdmError::Dimension {
                expected: vec![n_lambda, self.config.dim],
                got: z.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn features(&self, z: &Tensor, lambdas: &[f64]) -> Result<Tensor> {
        let e = self.config.embedding_dim();
        let d = self.config.dim;
        let mut data = Vec::with_capacity(z.rows() * (d + e));
        for (i, &l) in lambdas.iter().enumerate() {
            data.extend_from_slice(z.row(i));
            data.extend(lambda_embedding(l, self.config.n_freq));
        }
        Tensor::new(vec![z.rows(), d + e], data)
    }

    /// Raw network output for each row of `z`, row `i` conditioned on
    /// `lambdas[i]`.
    pub fn forward_batch(&self, z: &Tensor, lambdas: &[f64]) -> Result<Tensor> {
        self.check_input(z, lambdas.len())?;
        z.ensure_finite("denoiser input")?;
        if lambdas.iter().any(|l| !l.is_finite()) {
            return Err(VdmError::NonFinite("denoiser lambda"));
        }
        let out = self.mlp.forward(&self.features(z, lambdas)?)?;
        let out = if self.config.residual {
            let zz = Tensor::new(out.shape().to_vec(), z.data().to_vec())?;
            out.axpby(1.0, &zz, 1.0)?
        } else {
            out
        };
        out.ensure_finite("denoiser output")?;
        Ok(out)
    }

    /// Output for one latent (or a batch sharing one noise level), shaped
    /// like `z`.
    pub fn forward(&self, z: &Tensor, lambda: f64) -> Result<crate::param::Prediction> {
        let rows = z.rows();
        let flat = Tensor::new(vec![rows, z.cols()], z.data().to_vec())?;
        let out = self.forward_batch(&flat, &vec![lambda; rows])?;
        Ok(crate::param::Prediction {
            kind: self.config.kind,
            value: out.reshape(z.shape().to_vec())?,
            lambda,
        })
    }

    /// Records the λ embedding of a `[n,1]` column of log-SNR values.
    pub fn build_embedding(&self, g: &mut Graph, lambda: NodeId) -> Result<NodeId> {
        let base = g.scale(lambda, 0.25);
        let mut parts = vec![base];
        for k in 0..self.config.n_freq {
            let a = g.scale(base, (1u64 << k) as f64);
            parts.push(g.sin(a));
            parts.push(g.cos(a));
        }
        g.concat_cols(&parts)
    }

    /// Records the forward pass. `z` is `[n, dim]`, `lambda` is `[n, 1]`.
    pub fn build(&self, g: &mut Graph, z: NodeId, lambda: NodeId, offset: usize) -> Result<NodeId> {
        let emb = self.build_embedding(g, lambda)?;
        let x = g.concat_cols(&[z, emb])?;
        let out = self.mlp.build(g, x, offset)?;
        if self.config.residual {
            g.add(out, z)
        } else {
            Ok(out)
        }
    }
}

/// Positive-weight network `γ̃(t) = a·t + Σ_j v_j·sigmoid(w_j t + b_j)`
/// with `a, v, w > 0` stored as logs, mapped affinely so that
/// `γ(0) = γ_min` and `γ(1) = γ_max` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicNet {
    params: ParamSet,
    width: usize,
    /// Whether the optimizer may move `γ_min` and `γ_max`.
    pub learn_endpoints: bool,
}

const MONO_LOG_A: usize = 0;
const MONO_LOG_W1: usize = 1;
const MONO_B1: usize = 2;
const MONO_LOG_W2: usize = 3;
const MONO_GAMMA_MIN: usize = 4;
const MONO_GAMMA_MAX: usize = 5;

impl MonotonicNet {
    pub const DEFAULT_WIDTH: usize = 64;

    pub fn new(width: usize, gamma_min: f64, gamma_max: f64, rng: &mut impl Rng) -> Result<Self> {
        if width == 0 || !(gamma_min < gamma_max) || !gamma_min.is_finite() || !gamma_max.is_finite() {
            return Err(VdmError::Precondition(format!(
                "monotonic net needs width > 0 and gamma_min < gamma_max, got {width}, [{gamma_min}, {gamma_max}]"
            )));
        }
        let mut params = ParamSet::new();
        params.push("log_linear", Tensor::matrix(1, 1, vec![0.0])?);
        let w1: Vec<f64> = (0..width).map(|_| rng.random_range(0.0..3.0_f64)).collect();
        let b1: Vec<f64> = w1
            .iter()
            .map(|lw| -lw.exp() * rng.random_range(0.0..1.0_f64))
            .collect();
        let w2: Vec<f64> = (0..width)
            .map(|_| rng.random_range(-2.0..0.0_f64) - (width as f64).ln())
            .collect();
        params.push("log_hidden_weight", Tensor::matrix(1, width, w1)?);
        params.push("hidden_bias", Tensor::vector(b1));
        params.push("log_out_weight", Tensor::matrix(width, 1, w2)?);
        params.push("gamma_min", Tensor::scalar(gamma_min));
        params.push("gamma_max", Tensor::scalar(gamma_max));
        Ok(Self {
            params,
            width,
            learn_endpoints: false,
        })
    }

    pub fn seeded(seed: u64, width: usize, gamma_min: f64, gamma_max: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(width, gamma_min, gamma_max, &mut rng).expect("valid monotonic net")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// `(γ_min, γ_max)`.
    pub fn endpoints(&self) -> (f64, f64) {
        (
            self.params.get(MONO_GAMMA_MIN).data()[0],
            self.params.get(MONO_GAMMA_MAX).data()[0],
        )
    }

    fn raw(&self, t: f64) -> f64 {
        let a = self.params.get(MONO_LOG_A).data()[0].exp();
        let w1 = self.params.get(MONO_LOG_W1).data();
        let b1 = self.params.get(MONO_B1).data();
        let w2 = self.params.get(MONO_LOG_W2).data();
        let mut acc = a * t;
        for j in 0..self.width {
            acc += w2[j].exp() * sigmoid(w1[j].exp() * t + b1[j]);
        }
        acc
    }

    fn raw_derivative(&self, t: f64) -> f64 {
        let a = self.params.get(MONO_LOG_A).data()[0].exp();
        let w1 = self.params.get(MONO_LOG_W1).data();
        let b1 = self.params.get(MONO_B1).data();
        let w2 = self.params.get(MONO_LOG_W2).data();
        let mut acc = a;
        for j in 0..self.width {
            let h = sigmoid(w1[j].exp() * t + b1[j]);
            acc += w2[j].exp() * w1[j].exp() * h * (1.0 - h);
        }
        acc
    }

    /// `dγ/dt` without the domain check.
    pub fn derivative_unchecked(&self, t: f64) -> f64 {
        let (g0, g1) = self.endpoints();
        (g1 - g0) * self.raw_derivative(t) / (self.raw(1.0) - self.raw(0.0))
    }

    /// `γ(t)` without the domain check.
    pub fn eval_unchecked(&self, t: f64) -> f64 {
        let (g0, g1) = self.endpoints();
        let (r0, r1) = (self.raw(0.0), self.raw(1.0));
        let r = (self.raw(t) - r0) / (r1 - r0);
        (1.0 - r) * g0 + r * g1
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(VdmError::Domain {
                value: t,
                domain: "t in [0, 1]",
            });
        }
        Ok(self.eval_unchecked(t))
    }

    fn build_raw(&self, g: &mut Graph, t: NodeId, offset: usize) -> Result<NodeId> {
        let la = g.param(offset + MONO_LOG_A, self.params.get(MONO_LOG_A));
        let lw1 = g.param(offset + MONO_LOG_W1, self.params.get(MONO_LOG_W1));
        let b1 = g.param(offset + MONO_B1, self.params.get(MONO_B1));
        let lw2 = g.param(offset + MONO_LOG_W2, self.params.get(MONO_LOG_W2));
        let a = g.exp(la);
        let w1 = g.exp(lw1);
        let w2 = g.exp(lw2);
        let lin = g.matmul(t, a)?;
        let pre = g.matmul(t, w1)?;
        let pre = g.add_bias(pre, b1)?;
        let h = g.sigmoid(pre);
        let hid = g.matmul(h, w2)?;
        g.add(lin, hid)
    }

    /// Records `γ(t)` for a `[n,1]` column of times.
    pub fn build(&self, g: &mut Graph, t: NodeId, offset: usize) -> Result<NodeId> {
        let n = g.value(t).rows();
        let r = self.build_raw(g, t, offset)?;
        let t0 = g.input(Tensor::matrix(1, 1, vec![0.0])?);
        let t1 = g.input(Tensor::matrix(1, 1, vec![1.0])?);
        let r0 = self.build_raw(g, t0, offset)?;
        let r1 = self.build_raw(g, t1, offset)?;
        let span = g.sub(r1, r0)?;
        let inv = g.recip(span);
        let r0b = g.broadcast_rows(r0, n);
        let invb = g.broadcast_rows(inv, n);
        let num = g.sub(r, r0b)?;
        let frac = g.mul(num, invb)?;
        let g0 = g.param(offset + MONO_GAMMA_MIN, self.params.get(MONO_GAMMA_MIN));
        let g1 = g.param(offset + MONO_GAMMA_MAX, self.params.get(MONO_GAMMA_MAX));
        let range = g.sub(g1, g0)?;
        let g0b = g.broadcast_rows(g0, n);
        let rangeb = g.broadcast_rows(range, n);
        let scaled = g.mul(frac, rangeb)?;
        g.add(g0b, scaled)
    }

    /// Records `dγ/dt` for a `[n,1]` column of times.
    pub fn build_derivative(&self, g: &mut Graph, t: NodeId, offset: usize) -> Result<NodeId> {
        let n = g.value(t).rows();
        let la = g.param(offset + MONO_LOG_A, self.params.get(MONO_LOG_A));
        let lw1 = g.param(offset + MONO_LOG_W1, self.params.get(MONO_LOG_W1));
        let b1 = g.param(offset + MONO_B1, self.params.get(MONO_B1));
        let lw2 = g.param(offset + MONO_LOG_W2, self.params.get(MONO_LOG_W2));
        let a = g.exp(la);
        let w1 = g.exp(lw1);
        let w2 = g.exp(lw2);
        let pre = g.matmul(t, w1)?;
        let pre = g.add_bias(pre, b1)?;
        let h = g.sigmoid(pre);
        let h2 = g.square(h);
        let slope = g.sub(h, h2)?;
        let w1b = g.broadcast_rows(w1, n);
        let slope = g.mul(slope, w1b)?;
        let hid = g.matmul(slope, w2)?;
        let ab = g.broadcast_rows(a, n);
        let raw = g.add(hid, ab)?;
        let t0 = g.input(Tensor::matrix(1, 1, vec![0.0])?);
        let t1 = g.input(Tensor::matrix(1, 1, vec![1.0])?);
        let r0 = self.build_raw(g, t0, offset)?;
        let r1 = self.build_raw(g, t1, offset)?;
        let span = g.sub(r1, r0)?;
        let inv = g.recip(span);
        let g0 = g.param(offset + MONO_GAMMA_MIN, self.params.get(MONO_GAMMA_MIN));
        let g1 = g.param(offset + MONO_GAMMA_MAX, self.params.get(MONO_GAMMA_MAX));
        let range = g.sub(g1, g0)?;
        let rangeb = g.broadcast_rows(range, n);
        let invb = g.broadcast_rows(inv, n);
        let factor = g.mul(rangeb, invb)?;
        g.mul(raw, factor)
    }

    /// Zeroes endpoint gradients unless endpoints are learnable.
    pub fn mask_grads(&self, grads: &mut [Tensor]) {
        if !self.learn_endpoints {
            grads[MONO_GAMMA_MIN].data_mut().fill(0.0);
            grads[MONO_GAMMA_MAX].data_mut().fill(0.0);
        }
    }
}

/// Gradient descent with heavy-ball momentum:
/// `v ← μ·v + g`, `θ ← θ − η·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub const DEFAULT_LR: f64 = 1e-3;
    pub const DEFAULT_MOMENTUM: f64 = 0.9;

    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(VdmError::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        for (i, g) in grads.iter().enumerate() {
            g.ensure_finite("gradient")?;
            let v = &mut self.velocity[i];
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi + gi;
            }
            if self.lr == 0.0 {
                continue;
            }
            for (p, vi) in params.get_mut(i).data_mut().iter_mut().zip(v.data()) {
                *p -= self.lr * vi;
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_VERSION: &str = "# vdm-lab checkpoint v1";

/// Writes parameter sets as long-format CSV: one row per scalar with
/// columns `name,shape,index,value`, where `shape` is `x`-separated and
/// values use 17 significant digits. Rows whose name starts with `@` carry
/// metadata in the `value` column.
pub fn write_checkpoint(meta: &[(&str, String)], sets: &[(&str, &ParamSet)]) -> String {
    let mut out = String::new();
    out.push_str(CHECKPOINT_VERSION);
    out.push('\n');
    out.push_str("name,shape,index,value\n");
    for (k, v) in meta {
        out.push_str(&format!("@{k},,,{v}\n"));
    }
    for (prefix, set) in sets {
        for (name, t) in set.iter() {
            let shape = t
                .shape()
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("x");
            for (i, v) in t.data().iter().enumerate() {
                out.push_str(&format!("{prefix}.{name},{shape},{i},{v:.16e}\n"));
            }
        }
    }
    out
}

/// Parsed checkpoint contents.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every tensor named `prefix.<param>` into `set`, checking
    /// shapes.
    pub fn load_into(&self, prefix: &str, set: &mut ParamSet) -> Result<()> {
        for i in 0..set.len() {
            let full = format!("{prefix}.{}", set.name(i));
            let t = self
                .tensor(&full)
                .ok_or_else(|| VdmError::Checkpoint(format!("missing tensor {full}")))?;
            if t.shape() != set.get(i).shape() {
                return Err(VdmError::Checkpoint(format!(
                    "{full}: shape {:?} does not match {:?}",
                    t.shape(),
                    set.get(i).shape()
                )));
            }
            *set.get_mut(i) = t.clone();
        }
        Ok(())
    }
}

pub fn read_checkpoint(text: &str) -> Result<Checkpoint> {
    let bad = |m: String| VdmError::Checkpoint(m);
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_VERSION) {
        return Err(bad("missing or unknown version line".into()));
    }
    if lines.next() != Some("name,shape,index,value") {
        return Err(bad("missing header".into()));
    }
    let mut ck = Checkpoint::default();
    let mut current: Option<(String, Vec<usize>, Vec<f64>)> = None;
    let flush = |cur: Option<(String, Vec<usize>, Vec<f64>)>, ck: &mut Checkpoint| -> Result<()> {
        if let Some((name, shape, data)) = cur {
            let t = Tensor::new(shape, data).map_err(|e| VdmError::Checkpoint(format!("{name}: {e}")))?;
            ck.tensors.push((name, t));
        }
        Ok(())
    };
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.splitn(4, ',').collect();
        if cols.len() != 4 {
            return Err(bad(format!("line {}: expected 4 columns", ln + 3)));
        }
        if let Some(key) = cols[0].strip_prefix('@') {
            ck.meta.push((key.to_string(), cols[3].to_string()));
            continue;
        }
        let shape: Vec<usize> = cols[1]
            .split('x')
            .map(|s| s.parse().map_err(|_| bad(format!("line {}: bad shape", ln + 3))))
            .collect::<Result<_>>()?;
        let idx: usize = cols[2]
            .parse()
            .map_err(|_| bad(format!("line {}: bad index", ln + 3)))?;
        let val: f64 = cols[3]
            .parse()
            .map_err(|_| bad(format!("line {}: bad value", ln + 3)))?;
        let same = matches!(&current, Some((n, s, _)) if n == cols[0] && *s == shape);
        if !same {
            flush(current.take(), &mut ck)?;
            current = Some((cols[0].to_string(), shape, Vec::new()));
        }
        let cur = current.as_mut().expect("current tensor");
        if idx != cur.2.len() {
            return Err(bad(format!("line {}: index {idx} out of order", ln + 3)));
        }
        cur.2.push(val);
    }
    flush(current, &mut ck)?;
    Ok(ck)
}
