//! The conditional noise-prediction network and its gradients.
//!
//! The network maps `(x_t, prompt token, timestep)` to a predicted noise
//! vector. Conditioning is a learned embedding row per prompt token plus
//! fixed sinusoidal timestep features, both concatenated with `x_t` at the
//! input layer. All arithmetic is 64-bit. Gradients are computed by
//! layer-wise reverse mode: the forward pass caches activations and the
//! backward pass accumulates vector-Jacobian products into a flat gradient
//! aligned with the parameter vector.

use std::ops::Range;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::dpo::OptimizerConfig;
use crate::error::{Result, SailError};
use crate::schedule::NoiseSchedule;

/// A discrete conditioning token. Regular prompts are `0..vocab_size`;
/// the index `vocab_size` itself is the reserved null token used for
/// unconditional passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PromptToken(pub u32);

impl std::fmt::Display for PromptToken {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the post-activation value.
    fn derivative_from_output(&self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(SailError::Config(format!(
                "arch.activation: unknown activation `{other}` (expected tanh|relu)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }
}

/// Architecture descriptor: sizes of every block of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchDescriptor {
    /// Data dimensionality D.
    pub data_dim: usize,
    /// Number of regular prompt tokens K; the embedding table holds K+1
    /// rows, the last one being the null token.
    pub vocab_size: usize,
    /// Width of the learned prompt embedding (0 disables conditioning).
    pub embed_dim: usize,
    /// Width of the sinusoidal timestep features (must be even; 0 disables).
    pub time_dim: usize,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        ArchDescriptor {
            data_dim: 2,
            vocab_size: 8,
            embed_dim: 8,
            time_dim: 16,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
        }
    }
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(SailError::Config("arch.data_dim: must be >= 1".into()));
        }
        if self.vocab_size == 0 {
            return Err(SailError::Config("arch.vocab_size: must be >= 1".into()));
        }
        if self.time_dim % 2 != 0 {
            return Err(SailError::Config(format!(
                "arch.time_dim: must be even, got {}",
                self.time_dim
            )));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(SailError::Config("arch.hidden: widths must be >= 1".into()));
        }
        Ok(())
    }

    /// The reserved unconditional token.
    pub fn null_token(&self) -> PromptToken {
        PromptToken(self.vocab_size as u32)
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.embed_dim + self.time_dim
    }

    /// Widths of the linear layers as (in, out) pairs, hidden plus output.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim();
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.data_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        let embed = (self.vocab_size + 1) * self.embed_dim;
        embed
            + self
                .layer_dims()
                .iter()
                .map(|(i, o)| i * o + o)
                .sum::<usize>()
    }

    /// Named tensor slices of the flat parameter vector, in storage order:
    /// the embedding table first, then each layer's weights and biases.
    pub fn param_layout(&self) -> Vec<(String, Range<usize>)> {
        let mut layout = Vec::new();
        let mut off = 0;
        let embed = (self.vocab_size + 1) * self.embed_dim;
        layout.push(("embed".to_string(), off..off + embed));
        off += embed;
        for (l, (i, o)) in self.layer_dims().iter().enumerate() {
            layout.push((format!("layer{l}.w"), off..off + i * o));
            off += i * o;
            layout.push((format!("layer{l}.b"), off..off + o));
            off += o;
        }
        layout
    }

    /// Canonical one-line text form, stable across save/load.
    pub fn to_descriptor_string(&self) -> String {
        format!(
            "data_dim={} vocab_size={} embed_dim={} time_dim={} hidden={} activation={}",
            self.data_dim,
            self.vocab_size,
            self.embed_dim,
            self.time_dim,
            if self.hidden.is_empty() {
                "-".to_string()
            } else {
                self.hidden
                    .iter()
                    .map(|h| h.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            },
            self.activation.as_str()
        )
    }

    pub fn from_descriptor_string(s: &str) -> Result<Self> {
        let mut arch = ArchDescriptor {
            data_dim: 0,
            vocab_size: 0,
            embed_dim: 0,
            time_dim: 0,
            hidden: vec![],
            activation: Activation::Tanh,
        };
        for field in s.split_whitespace() {
            let (key, value) = field.split_once('=').ok_or_else(|| SailError::Config(
                format!("arch descriptor: malformed field `{field}`"),
            ))?;
            let parse_usize = |v: &str| {
                v.parse::<usize>().map_err(|_| {
                    SailError::Config(format!("arch descriptor: bad value for `{key}`: {v}"))
                })
            };
            match key {
                "data_dim" => arch.data_dim = parse_usize(value)?,
                "vocab_size" => arch.vocab_size = parse_usize(value)?,
                "embed_dim" => arch.embed_dim = parse_usize(value)?,
                "time_dim" => arch.time_dim = parse_usize(value)?,
                "hidden" => {
                    arch.hidden = if value == "-" {
                        vec![]
                    } else {
                        value
                            .split(',')
                            .map(|v| {
                                v.parse::<usize>().map_err(|_| {
                                    SailError::Config(format!(
                                        "arch descriptor: bad hidden width `{v}`"
                                    ))
                                })
                            })
                            .collect::<Result<_>>()?
                    }
                }
                "activation" => arch.activation = Activation::parse(value)?,
                other => {
                    return Err(SailError::Config(format!(
                        "arch descriptor: unknown field `{other}`"
                    )))
                }
            }
        }
        arch.validate()?;
        Ok(arch)
    }
}

/// Fixed sinusoidal timestep features: `dim/2` sines followed by `dim/2`
/// cosines over geometrically spaced frequencies.
pub fn time_features(t: usize, dim: usize) -> Vec<f64> {
    if dim == 0 {
        return vec![];
    }
    let half = dim / 2;
    let mut feats = vec![0.0; dim];
    for i in 0..half {
        let exponent = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = (-(10_000.0f64.ln()) * exponent).exp();
        feats[i] = (t as f64 * freq).sin();
        feats[half + i] = (t as f64 * freq).cos();
    }
    feats
}

/// Cached activations from one forward pass, consumed by [`DenoiserModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    y: PromptToken,
    /// Concatenated input `[x_t, embed, time]`.
    input: Vec<f64>,
    /// Post-activation values of each hidden layer.
    hidden: Vec<Vec<f64>>,
}

/// Anything that predicts the injected noise from a noised point. The
/// trained model implements this; analytic test predictors can too.
pub trait NoisePredictor {
    fn data_dim(&self) -> usize;
    fn predict(&self, x_t: &[f64], y: PromptToken, t: usize) -> Result<Vec<f64>>;
}

/// The conditional noise predictor: architecture plus a flat parameter
/// vector in the order given by [`ArchDescriptor::param_layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    arch: ArchDescriptor,
    params: Vec<f64>,
}

impl DenoiserModel {
    /// Fan-in-scaled symmetric uniform initialization, deterministic in the seed.
    /// Biases start at zero.
    pub fn init(arch: ArchDescriptor, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = vec![0.0; arch.param_count()];
        let layout = arch.param_layout();
        for (name, range) in &layout {
            if name == "embed" {
                if arch.embed_dim > 0 {
                    let bound = 1.0 / (arch.embed_dim as f64).sqrt();
                    for p in &mut params[range.clone()] {
                        *p = rng.gen_range(-bound..bound);
                    }
                }
            } else if name.ends_with(".w") {
                let idx: usize = name
                    .trim_start_matches("layer")
                    .trim_end_matches(".w")
                    .parse()
                    .expect("layout names are well-formed");
                let (fan_in, _) = arch.layer_dims()[idx];
                let bound = 1.0 / (fan_in as f64).sqrt();
                for p in &mut params[range.clone()] {
                    *p = rng.gen_range(-bound..bound);
                }
            }
            // biases stay zero
        }
        Ok(DenoiserModel { arch, params })
    }

    pub fn zeros(arch: ArchDescriptor) -> Result<Self> {
        arch.validate()?;
        let n = arch.param_count();
        Ok(DenoiserModel {
            arch,
            params: vec![0.0; n],
        })
    }

    /// Build from an explicit parameter vector; length and finiteness checked.
    pub fn with_params(arch: ArchDescriptor, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(SailError::Config(format!(
                "params length {} does not match architecture ({} expected)",
                params.len(),
                arch.param_count()
            )));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(SailError::Numeric(format!(
                "non-finite parameter at index {i}"
            )));
        }
        Ok(DenoiserModel { arch, params })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn params_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.to_le_bytes());
        }
        format!("{:x}", hasher.finalize())
    }

    fn check_token(&self, y: PromptToken) -> Result<()> {
        if y.0 as usize > self.arch.vocab_size {
            return Err(SailError::Domain(format!(
                "prompt token {} out of vocabulary (valid: 0..={} incl. null token)",
                y.0, self.arch.vocab_size
            )));
        }
        Ok(())
    }

    fn build_input(&self, x_t: &[f64], y: PromptToken, t: usize) -> Result<Vec<f64>> {
        self.check_token(y)?;
        if x_t.len() != self.arch.data_dim {
            return Err(SailError::Domain(format!(
                "input point has dim {} but model expects {}",
                x_t.len(),
                self.arch.data_dim
            )));
        }
        let mut input = Vec::with_capacity(self.arch.input_dim());
        input.extend_from_slice(x_t);
        if self.arch.embed_dim > 0 {
            let start = y.0 as usize * self.arch.embed_dim;
            input.extend_from_slice(&self.params[start..start + self.arch.embed_dim]);
        }
        input.extend(time_features(t, self.arch.time_dim));
        Ok(input)
    }

    /// Deterministic noise prediction for one point.
    pub fn predict_noise(&self, x_t: &[f64], y: PromptToken, t: usize) -> Result<Vec<f64>> {
        Ok(self.forward_traced(x_t, y, t)?.0)
    }

    /// Forward pass that also returns the cached activations needed by
    /// [`DenoiserModel::backward`].
    pub fn forward_traced(
        &self,
        x_t: &[f64],
        y: PromptToken,
        t: usize,
    ) -> Result<(Vec<f64>, ForwardTrace)> {
        let input = self.build_input(x_t, y, t)?;
        let dims = self.arch.layer_dims();
        let layout = self.arch.param_layout();is
        // layout[0] is embed; layers start at index 1, two entries each.
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(self.arch.hidden.len());
        let mut act = input.clone();
        for (l, (in_dim, out_dim)) in dims.iter().enumerate() {
            let w = &self.params[layout[1 + 2 * l].1.clone()];
            let b = &self.params[layout[1 + 2 * l + 1].1.clone()];
            let mut z = vec![0.0; *out_dim];
            for o in 0..*out_dim {
                let row = &w[o * in_dim..(o + 1) * in_dim];
                let mut acc = b[o];
                for (wi, ai) in row.iter().zip(&act) {
                    acc += wi * ai;
                }
                z[o] = acc;
            }
            if l + 1 < dims.len() {
                for v in &mut z {
                    *v = self.arch.activation.apply(*v);
                }
                hidden.push(z.clone());
                act = z;
            } else {
                act = z; // output layer is linear
            }
        }
        Ok((
            act,
            ForwardTrace {
                y,
                input,
                hidden,
            },
        ))
    }

    /// Accumulate `d(loss)/d(params)` for one forward pass into `grad`,
    /// given `d(loss)/d(output)`. `grad` must be param-sized.
    pub fn backward(&self, trace: &ForwardTrace, grad_out: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        debug_assert_eq!(grad_out.len(), self.arch.data_dim);
        let dims = self.arch.layer_dims();
        let layout = self.arch.param_layout();

        let mut upstream = grad_out.to_vec();
        for l in (0..dims.len()).rev() {
            let (in_dim, out_dim) = dims[l];
            let w_range = layout[1 + 2 * l].1.clone();
            let b_range = layout[1 + 2 * l + 1].1.clone();
            let prev_act: &[f64] = if l == 0 {
                &trace.input
            } else {
                &trace.hidden[l - 1]
            };
            // For hidden layers the upstream gradient passes through the
            // activation first; the output layer is linear.
            let gz: Vec<f64> = if l + 1 < dims.len() {
                trace.hidden[l]
                    .iter()
                    .zip(&upstream)
                    .map(|(a, g)| g * self.arch.activation.derivative_from_output(*a))
                    .collect()
            } else {
                upstream.clone()
            };
            {
                let gw = &mut grad[w_range.clone()];
                for o in 0..out_dim {
                    let row = &mut gw[o * in_dim..(o + 1) * in_dim];
                    let g = gz[o];
                    for (ri, ai) in row.iter_mut().zip(prev_act) {
                        *ri += g * ai;
                    }
                }
            }
            {
                let gb = &mut grad[b_range];
                for (bi, g) in gb.iter_mut().zip(&gz) {
                    *bi += g;
                }
            }
            // Propagate to the previous activation.
            let w = &self.params[w_range];
            let mut down = vec![0.0; in_dim];
            for o in 0..out_dim {
                let row = &w[o * in_dim..(o + 1) * in_dim];
                let g = gz[o];
                for (di, wi) in down.iter_mut().zip(row) {
                    *di += g * wi;
                }
            }
            upstream = down;
        }

        // The embedding slice of the input gradient flows into the table row.
        if self.arch.embed_dim > 0 {
            let row_start = trace.y.0 as usize * self.arch.embed_dim;
            let g_embed = &upstream[self.arch.data_dim..self.arch.data_dim + self.arch.embed_dim];
            let table = &mut grad[layout[0].1.clone()];
            for (gi, g) in table[row_start..row_start + self.arch.embed_dim]
                .iter_mut()
                .zip(g_embed)
            {
                *gi += g;
            }
        }
    }
}

impl NoisePredictor for DenoiserModel {
    fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    fn predict(&self, x_t: &[f64], y: PromptToken, t: usize) -> Result<Vec<f64>> {
        self.predict_noise(x_t, y, t)
    }
}

/// One forward-pass request of a batch loss.
#[derive(Debug, Clone)]
pub struct EvalPoint {
    pub x: Vec<f64>,
    pub y: PromptToken,
    pub t: usize,
}

/// Loss value plus its partial derivatives: one gradient per requested
/// output and an optional direct parameter-space term (e.g. a norm penalty).
pub struct LossEval {
    pub value: f64,
    pub output_grads: Vec<Vec<f64>>,
    pub param_grad: Option<Vec<f64>>,
}

/// A differentiable scalar loss over a batch of model outputs (and,
/// optionally, the raw parameters). Implementations supply the forward-pass
/// points and, given the outputs, the loss with its partials.
pub trait BatchLoss {
    fn eval_points(&self) -> &[EvalPoint];
    fn eval(&self, outputs: &[Vec<f64>], params: &[f64]) -> Result<LossEval>;
}

/// Evaluate the loss value only (no gradients). Used by finite-difference
/// checks, which perturb parameters and re-evaluate.
pub fn eval_loss(model: &DenoiserModel, loss: &dyn BatchLoss) -> Result<f64> {
    let outputs = loss
        .eval_points()
        .iter()
        .map(|p| model.predict_noise(&p.x, p.y, p.t))
        .collect::<Result<Vec<_>>>()?;
    Ok(loss.eval(&outputs, model.params())?.value)
}

/// Loss value and its exact gradient over the flat parameter vector.
pub fn loss_gradient(model: &DenoiserModel, loss: &dyn BatchLoss) -> Result<(f64, Vec<f64>)> {
    let points = loss.eval_points();
    let mut outputs = Vec::with_capacity(points.len());
    let mut traces = Vec::with_capacity(points.len());
    for p in points {
        let (out, trace) = model.forward_traced(&p.x, p.y, p.t)?;
        outputs.push(out);
        traces.push(trace);
    }
    let eval = loss.eval(&outputs, model.params())?;
    if !eval.value.is_finite() {
        return Err(SailError::Numeric(format!(
            "loss evaluated to non-finite value {}",
            eval.value
        )));
    }
    let mut grad = vec![0.0; model.params().len()];
    for (trace, gout) in traces.iter().zip(&eval.output_grads) {
        model.backward(trace, gout, &mut grad);
    }
    if let Some(pg) = &eval.param_grad {
        for (g, p) in grad.iter_mut().zip(pg) {
            *g += p;
        }
    }
    Ok((eval.value, grad))
}

/// Denoising regression: mean over the batch of `||eps - model(x_t)||^2`.
pub struct DenoisingRegressionLoss {
    points: Vec<EvalPoint>,
    targets: Vec<Vec<f64>>,
}

impl DenoisingRegressionLoss {
    /// `items` are `(x0, y, t, eps)`; the noised input is formed with the
    /// schedule and the target is the injected noise itself.
    pub fn new(
        items: &[(Vec<f64>, PromptToken, usize, Vec<f64>)],
        schedule: &NoiseSchedule,
    ) -> Result<Self> {
        let mut points = Vec::with_capacity(items.len());
        let mut targets = Vec::with_capacity(items.len());
        for (x0, y, t, eps) in items {
            points.push(EvalPoint {
                x: schedule.forward_diffuse(x0, *t, eps)?,
                y: *y,
                t: *t,
            });
            targets.push(eps.clone());
        }
        Ok(DenoisingRegressionLoss { points, targets })
    }
}

impl BatchLoss for DenoisingRegressionLoss {
    fn eval_points(&self) -> &[EvalPoint] {
        &self.points
    }

    fn eval(&self, outputs: &[Vec<f64>], _params: &[f64]) -> Result<LossEval> {
        let n = outputs.len() as f64;
        let mut value = 0.0;
        let mut grads = Vec::with_capacity(outputs.len());
        for (i, (out, target)) in outputs.iter().zip(&self.targets).enumerate() {
            let mut sample = 0.0;
            let mut g = Vec::with_capacity(out.len());
            for (o, e) in out.iter().zip(target) {
                let d = o - e;
                sample += d * d;
                g.push(2.0 * d / n);
            }
            if !sample.is_finite() {
                return Err(SailError::Numeric(format!(
                    "non-finite regression loss at batch index {i}"
                )));
            }
            value += sample / n;
            grads.push(g);
        }
        Ok(LossEval {
            value,
            output_grads: grads,
            param_grad: None,
        })
    }
}

/// Train a fresh model by denoising regression on conditional samples.
///
/// Returns the model and the per-step loss curve. Emits a warning if the
/// final recorded loss stays above `loss_threshold`.
pub fn pretrain_base(
    data: &[(PromptToken, Vec<f64>)],
    arch: &ArchDescriptor,
    schedule: &NoiseSchedule,
    opt: &OptimizerConfig,
    null_dropout: f64,
    loss_threshold: f64,
    rng_seed: u64,
) -> Result<(DenoiserModel, Vec<f64>)> {
    if data.is_empty() {
        return Err(SailError::Config("pretrain: empty dataset".into()));
    }
    for token in 0..arch.vocab_size {
        if !data.iter().any(|(y, _)| y.0 as usize == token) {
            return Err(SailError::Config(format!(
                "pretrain: no samples for prompt token {token}"
            )));
        }
    }
    if !(0.0..=1.0).contains(&null_dropout) {
        return Err(SailError::Config(format!(
            "pretrain.null_dropout: must be in [0, 1], got {null_dropout}"
        )));
    }
    opt.validate()?;

    let mut model = DenoiserModel::init(arch.clone(), rng_seed)?;
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed.wrapping_add(1));
    let mut adam = crate::dpo::AdamW::new(model.params().len(), opt.clone());
    let steps = opt.max_steps.unwrap_or(0);
    let mut losses = Vec::with_capacity(steps);
    let t_max = schedule.num_timesteps();

    for step in 0..steps {
        let mut items = Vec::with_capacity(opt.batch_size);
        for _ in 0..opt.batch_size {
            let (y, x0) = &data[rng.gen_range(0..data.len())];
            let y = if null_dropout > 0.0 && rng.gen::<f64>() < null_dropout {
                arch.null_token()
            } else {
                *y
            };
            let t = rng.gen_range(0..t_max);
            let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
            items.push((x0.clone(), y, t, eps));
        }
        let loss = DenoisingRegressionLoss::new(&items, schedule)?;
        let (value, grad) = loss_gradient(&model, &loss)?;
        adam.step(model.params_mut(), &grad).map_err(|e| {
            SailError::Numeric(format!("pretrain step {step}: {e}"))
        })?;
        losses.push(value);
    }

    if let Some(last) = losses.last() {
        if *last > loss_threshold {
            log::warn!(
                "pretrain: final loss {last:.4} above threshold {loss_threshold}; consider more steps"
            );
        }
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{build_schedule, ScheduleKind};

    fn tiny_arch() -> ArchDescriptor {
        ArchDescriptor {
            data_dim: 2,
            vocab_size: 3,
            embed_dim: 4,
            time_dim: 4,
            hidden: vec![5],
            activation: Activation::Tanh,
        }
    }

    #[test]
    fn zero_params_give_zero_output() {
        let model = DenoiserModel::zeros(tiny_arch()).unwrap();
        let out = model.predict_noise(&[0.3, -0.7], PromptToken(1), 5).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let model = DenoiserModel::init(tiny_arch(), 42).unwrap();
        let a = model.predict_noise(&[0.1, 0.2], PromptToken(0), 3).unwrap();
        let b = model.predict_noise(&[0.1, 0.2], PromptToken(0), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hand_built_linear_model_is_a_times_x() {
        // Scalar data, no conditioning, no hidden layers: out = w*x + b.
        let arch = ArchDescriptor {
            data_dim: 1,
            vocab_size: 1,
            embed_dim: 0,
            time_dim: 0,
            hidden: vec![],
            activation: Activation::Tanh,
        };
        assert_eq!(arch.param_count(), 2);
        let a = -1.75;
        let model = DenoiserModel::with_params(arch, vec![a, 0.0]).unwrap();
        for x in [-2.0, 0.0, 0.5, 3.25] {
            let out = model.predict_noise(&[x], PromptToken(0), 0).unwrap();
            assert!((out[0] - a * x).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_vocabulary_token_is_domain_error() {
        let model = DenoiserModel::zeros(tiny_arch()).unwrap();
        // vocab_size 3 -> tokens 0..=3 valid (3 is the null token), 4 is not.
        assert!(model.predict_noise(&[0.0, 0.0], PromptToken(3), 0).is_ok());
        let err = model
            .predict_noise(&[0.0, 0.0], PromptToken(4), 0)
            .unwrap_err();
        assert!(matches!(err, SailError::Domain(_)));
    }

    #[test]
    fn param_layout_covers_params_exactly() {
        let arch = tiny_arch();
        let layout = arch.param_layout();
        let mut expected = 0;
        for (_, range) in &layout {
            assert_eq!(range.start, expected);
            expected = range.end;
        }
        assert_eq!(expected, arch.param_count());
    }

    #[test]
    fn descriptor_string_round_trips() {
        for arch in [tiny_arch(), ArchDescriptor::default(), ArchDescriptor {
            hidden: vec![],
            embed_dim: 0,
            ..tiny_arch()
        }] {
            let s = arch.to_descriptor_string();
            let back = ArchDescriptor::from_descriptor_string(&s).unwrap();
            assert_eq!(arch, back);
        }
    }

    struct ParamNormLoss;

    impl BatchLoss for ParamNormLoss {
        fn eval_points(&self) -> &[EvalPoint] {
            &[]
        }
        fn eval(&self, _outputs: &[Vec<f64>], params: &[f64]) -> Result<LossEval> {
            Ok(LossEval {
                value: params.iter().map(|p| p * p).sum::<f64>() / 2.0,
                output_grads: vec![],
                param_grad: Some(params.to_vec()),
            })
        }
    }

    struct ConstantLoss(f64);

    impl BatchLoss for ConstantLoss {
        fn eval_points(&self) -> &[EvalPoint] {
            &[]
        }
        fn eval(&self, _outputs: &[Vec<f64>], _params: &[f64]) -> Result<LossEval> {
            Ok(LossEval {
                value: self.0,
                output_grads: vec![],
                param_grad: None,
            })
        }
    }

    #[test]
    fn quadratic_loss_gradient_is_params() {
        let model = DenoiserModel::init(tiny_arch(), 3).unwrap();
        let (value, grad) = loss_gradient(&model, &ParamNormLoss).unwrap();
        let expect: f64 = model.params().iter().map(|p| p * p).sum::<f64>() / 2.0;
        assert!((value - expect).abs() < 1e-15);
        assert_eq!(grad, model.params());
    }

    #[test]
    fn constant_loss_gradient_is_zero() {
        let model = DenoiserModel::init(tiny_arch(), 3).unwrap();
        let (value, grad) = loss_gradient(&model, &ConstantLoss(4.25)).unwrap();
        assert_eq!(value, 4.25);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    /// Central finite differences over randomly chosen coordinates.
    pub(crate) fn finite_difference_check(
        model: &DenoiserModel,
        loss: &dyn BatchLoss,
        coords: usize,
        seed: u64,
    ) -> f64 {
        let (_, grad) = loss_gradient(model, loss).unwrap();
        let h = 1e-6;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..coords {
            let i = rng.gen_range(0..model.params().len());
            let mut plus = model.clone();
            plus.params_mut()[i] += h;
            let mut minus = model.clone();
            minus.params_mut()[i] -= h;
            let fd = (eval_loss(&plus, loss).unwrap() - eval_loss(&minus, loss).unwrap())
                / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(1e-8);
            worst = worst.max((grad[i] - fd).abs() / denom);
        }
        worst
    }

    #[test]
    fn regression_loss_gradient_matches_finite_differences() {
        let schedule = build_schedule(20, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for trial in 0..5 {
            let arch = ArchDescriptor {
                data_dim: 2,
                vocab_size: 3,
                embed_dim: rng.gen_range(0..4),
                time_dim: 2 * rng.gen_range(0..3),
                hidden: vec![rng.gen_range(1..8)],
                activation: Activation::Tanh,
            };
            let model = DenoiserModel::init(arch, 100 + trial).unwrap();
            let items: Vec<_> = (0..3)
                .map(|_| {
                    let x0: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
                    let eps: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
                    (x0, PromptToken(rng.gen_range(0..3)), rng.gen_range(0..20), eps)
                })
                .collect();
            let loss = DenoisingRegressionLoss::new(&items, &schedule).unwrap();
            let worst = finite_difference_check(&model, &loss, 20, 200 + trial);
            assert!(worst <= 1e-5, "trial {trial}: worst rel err {worst}");
        }
    }

    #[test]
    fn prompt_relabeling_with_permuted_embeddings_is_consistent() {
        let arch = tiny_arch();
        let model = DenoiserModel::init(arch.clone(), 9).unwrap();
        // Swap tokens 0 and 2 together with their embedding rows.
        let mut permuted = model.params().to_vec();
        let e = arch.embed_dim;
        for i in 0..e {
            permuted.swap(i, 2 * e + i);
        }
        let swapped = DenoiserModel::with_params(arch, permuted).unwrap();
        let x = [0.4, -1.1];
        let a = model.predict_noise(&x, PromptToken(0), 7).unwrap();
        let b = swapped.predict_noise(&x, PromptToken(2), 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pretrain_zero_steps_keeps_initialization() {
        let schedule = build_schedule(10, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let arch = tiny_arch();
        let data: Vec<_> = (0..arch.vocab_size)
            .map(|y| (PromptToken(y as u32), vec![0.5, -0.5]))
            .collect();
        let opt = OptimizerConfig {
            max_steps: Some(0),
            ..OptimizerConfig::default()
        };
        let (model, losses) =
            pretrain_base(&data, &arch, &schedule, &opt, 0.1, 1.0, 77).unwrap();
        let fresh = DenoiserModel::init(arch, 77).unwrap();
        assert_eq!(model.params(), fresh.params());
        assert!(losses.is_empty());
    }

    #[test]
    fn pretrain_is_deterministic_and_loss_decreases() {
        let schedule = build_schedule(20, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let arch = ArchDescriptor {
            data_dim: 2,
            vocab_size: 2,
            embed_dim: 4,
            time_dim: 8,
            hidden: vec![16],
            activation: Activation::Tanh,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut data = Vec::new();
        for y in 0..2u32 {
            let center = if y == 0 { 1.5 } else { -1.5 };
            for _ in 0..64 {
                let x0 = vec![
                    center + 0.3 * rng.sample::<f64, _>(StandardNormal),
                    0.3 * rng.sample::<f64, _>(StandardNormal),
                ];
                data.push((PromptToken(y), x0));
            }
        }
        let opt = OptimizerConfig {
            step_size: 1e-3,
            batch_size: 32,
            max_steps: Some(400),
            ..OptimizerConfig::default()
        };
        let (m1, losses) = pretrain_base(&data, &arch, &schedule, &opt, 0.1, 10.0, 21).unwrap();
        let (m2, _) = pretrain_base(&data, &arch, &schedule, &opt, 0.1, 10.0, 21).unwrap();
        assert_eq!(m1.params(), m2.params());
        let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "loss did not decrease: head {head}, tail {tail}");
    }

    #[test]
    fn missing_prompt_samples_is_config_error() {
        let schedule = build_schedule(10, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let arch = tiny_arch();
        let data = vec![(PromptToken(0), vec![0.0, 0.0])];
        let err = pretrain_base(
            &data,
            &arch,
            &schedule,
            &OptimizerConfig::default(),
            0.1,
            1.0,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, SailError::Config(_)));
    }
}
