//! Invertible conditional building blocks: activation normalization, fixed
//! channel permutations, and conditional affine couplings, composed into a
//! bijection with exact log-determinant tracking.
//!
//! Couplings bound their scales through `exp(alpha * tanh(raw))`, so a single
//! layer can expand by at most `e^alpha`. Inverse evaluation carries a
//! saturation guard: activations beyond the guard threshold are treated as an
//! exploding inverse, saturated to infinity, and reported instead of
//! silently propagating garbage.

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{all_finite, max_abs, Conv2d, Linear, ParamStore, Tape, TapeBinding, Var};
use crate::{Error, Result};

/// Default saturation threshold for inverse evaluation. Image data lives in
/// [0, 1] and latents near N(0, 1); inverse activations two orders of
/// magnitude beyond that range are treated as exploded.
pub const DEFAULT_GUARD: f32 = 256.0;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Conditioning activations derived from the LR image. `None` features mean
/// an unconditional stack. The same context must be used for forward and
/// inverse; inverse evaluation treats it as a constant.
#[derive(Debug, Clone)]
pub struct ConditioningContext {
    features: Option<ArrayD<f32>>,
    pub spatial_shape: Option<(usize, usize)>,
}

impl ConditioningContext {
    pub fn none() -> Self {
        Self { features: None, spatial_shape: None }
    }

    /// Spatial features `[N, F, H, W]` for convolutional stacks.
    pub fn conv(features: ArrayD<f32>) -> Result<Self> {
        if !all_finite(&features) {
            return Err(Error::NonFiniteInput("conditioning features".into()));
        }
        let shape = features.shape();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "conv conditioning must be [N,F,H,W], got {shape:?}"
            )));
        }
        let spatial = (shape[2], shape[3]);
        Ok(Self { features: Some(features), spatial_shape: Some(spatial) })
    }

    /// Per-sample feature vectors `[N, F]` for vector stacks.
    pub fn vector(features: ArrayD<f32>) -> Result<Self> {
        if !all_finite(&features) {
            return Err(Error::NonFiniteInput("conditioning features".into()));
        }
        if features.ndim() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "vector conditioning must be [N,F], got {:?}",
                features.shape()
            )));
        }
        Ok(Self { features: Some(features), spatial_shape: None })
    }

    pub fn features(&self) -> Option<&ArrayD<f32>> {
        self.features.as_ref()
    }
}

/// Structured report of an exploding inverse. `inverse_step` counts positions
/// along the inverse pass: 0 is the latent input itself, `i >= 1` means the
/// value produced by inverting the stack's layer `layers[len - i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonFiniteReport {
    pub inverse_step: usize,
    pub layer_kind: &'static str,
    pub max_abs: f32,
}

/// Per-sample outcome of one inverse/sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDiagnostics {
    pub nonfinite: bool,
    pub first_bad_layer: Option<usize>,
    /// Sampling temperature, when the latent was drawn rather than supplied.
    pub temperature_used: Option<f32>,
    /// Magnitude that tripped the guard, when one did.
    pub max_abs: Option<f32>,
}

impl SampleDiagnostics {
    pub fn clean(temperature: Option<f32>) -> Self {
        Self { nonfinite: false, first_bad_layer: None, temperature_used: temperature, max_abs: None }
    }

    pub fn from_report(report: &NonFiniteReport, temperature: Option<f32>) -> Self {
        Self {
            nonfinite: true,
            first_bad_layer: Some(report.inverse_step),
            temperature_used: temperature,
            max_abs: Some(report.max_abs),
        }
    }
}

// ---- layers ----

#[derive(Debug, Clone)]
pub struct ActNorm {
    pub scale: crate::nn::ParamId,
    pub bias: crate::nn::ParamId,
    pub lanes: usize,
    pub initialized: bool,
}

#[derive(Debug, Clone)]
pub struct Permutation {
    pub perm: Vec<usize>,
    pub inv: Vec<usize>,
    pub seed: u64,
}

impl Permutation {
    pub fn random(lanes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..lanes).collect();
        perm.shuffle(&mut rng);
        Self::from_indices(perm, seed)
    }

    pub fn from_indices(perm: Vec<usize>, seed: u64) -> Self {
        let mut inv = vec![0usize; perm.len()];
        for (k, &src) in perm.iter().enumerate() {
            inv[src] = k;
        }
        Self { perm, inv, seed }
    }
}

/// Two-layer conditioner emitting `(raw_scale, shift)`; the final layer is
/// zero-initialized so the coupling starts as the identity.
#[derive(Debug, Clone)]
pub enum CouplingNet {
    Conv { c1: Conv2d, c2: Conv2d },
    Fc { l1: Linear, l2: Linear },
}

#[derive(Debug, Clone)]
pub struct AffineCoupling {
    pub keep: usize,
    pub change: usize,
    pub net: CouplingNet,
    pub alpha: f32,
}

#[derive(Debug, Clone)]
pub enum LayerOp {
    ActNorm(ActNorm),
    Permutation(Permutation),
    Coupling(AffineCoupling),
}

/// One invertible layer; `index` is its position in the forward ordering.
#[derive(Debug, Clone)]
pub struct InvertibleLayer {
    pub index: usize,
    pub op: LayerOp,
}

impl InvertibleLayer {
    pub fn kind(&self) -> &'static str {
        match &self.op {
            LayerOp::ActNorm(_) => "activation-normalization",
            LayerOp::Permutation(_) => "fixed-permutation",
            LayerOp::Coupling(_) => "conditional-affine-coupling",
        }
    }

    /// Forward transform on the tape; returns the output and, when the layer
    /// changes volume, its per-sample log-det contribution `[N]`.
    pub fn forward_t(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        u: Var,
        ctx: Option<Var>,
    ) -> (Var, Option<Var>) {
        match &self.op {
            LayerOp::ActNorm(an) => {
                let s = bind.var(tape, an.scale);
                let b = bind.var(tape, an.bias);
                let y0 = tape.mul_axis1(u, s);
                let y = tape.add_axis1(y0, b);
                // ld = spatial_size * sum(ln|s|), identical for every sample
                let spatial: usize = tape.shape(u)[2..].iter().product();
                let lns = tape.ln_abs(s);
                let tot = tape.sum_all(lns);
                let tot = tape.mul_scalar(tot, spatial as f32);
                let n = tape.shape(u)[0];
                let zeros = tape.leaf(ArrayD::zeros(ndarray::IxDyn(&[n])));
                let ld = tape.add_bscalar(zeros, tot);
                (y, Some(ld))
            }
            LayerOp::Permutation(p) => (tape.permute_axis1(u, &p.perm), None),
            LayerOp::Coupling(c) => {
                let u1 = tape.narrow_axis1(u, 0, c.keep);
                let u2 = tape.narrow_axis1(u, c.keep, c.change);
                let (bounded, t) = coupling_params(tape, bind, c, u1, ctx);
                let s = tape.exp(bounded);
                let scaled = tape.mul(u2, s);
                let v2 = tape.add(scaled, t);
                let y = tape.concat_axis1(&[u1, v2]);
                let ld = tape.sum_per_sample(bounded);
                (y, Some(ld))
            }
        }
    }

    /// Inverse transform on the tape.
    pub fn inverse_t(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        v: Var,
        ctx: Option<Var>,
    ) -> Var {
        match &self.op {
            LayerOp::ActNorm(an) => {
                let s = bind.var(tape, an.scale);
                let b = bind.var(tape, an.bias);
                let centered = {
                    let nb = tape.neg(b);
                    tape.add_axis1(v, nb)
                };
                let sinv = tape.recip(s);
                tape.mul_axis1(centered, sinv)
            }
            LayerOp::Permutation(p) => tape.permute_axis1(v, &p.inv),
            LayerOp::Coupling(c) => {
                let v1 = tape.narrow_axis1(v, 0, c.keep);
                let v2 = tape.narrow_axis1(v, c.keep, c.change);
                let (bounded, t) = coupling_params(tape, bind, c, v1, ctx);
                let nb = tape.neg(bounded);
                let sinv = tape.exp(nb);
                let shifted = tape.sub(v2, t);
                let u2 = tape.mul(shifted, sinv);
                tape.concat_axis1(&[v1, u2])
            }
        }
    }
}

/// Run the conditioner and split its output into the tanh-bounded log-scale
/// and the shift.
fn coupling_params(
    tape: &mut Tape,
    bind: &TapeBinding,
    c: &AffineCoupling,
    kept: Var,
    ctx: Option<Var>,
) -> (Var, Var) {
    let input = match ctx {
        Some(f) => tape.concat_axis1(&[kept, f]),
        None => kept,
    };
    let raw = match &c.net {
        CouplingNet::Conv { c1, c2 } => {
            let h = c1.apply(tape, bind, input);
            let h = tape.leaky_relu(h, 0.2);
            c2.apply(tape, bind, h)
        }
        CouplingNet::Fc { l1, l2 } => {
            let h = l1.apply(tape, bind, input);
            let h = tape.leaky_relu(h, 0.2);
            l2.apply(tape, bind, h)
        }
    };
    let raw_s = tape.narrow_axis1(raw, 0, c.change);
    let t = tape.narrow_axis1(raw, c.change, c.change);
    let tanhd = tape.tanh(raw_s);
    let bounded = tape.mul_scalar(tanhd, c.alpha);
    (bounded, t)
}

// ---- stack ----

/// An ordered pile of invertible layers sharing one resolution and one
/// conditioning tensor. Inverse composition order is the exact reverse of
/// the forward order.
#[derive(Debug, Clone, Default)]
pub struct FlowStack {
    pub layers: Vec<InvertibleLayer>,
}

impl FlowStack {
    /// Forward pass on the tape; returns `(z, per-sample logdet [N])`.
    pub fn forward_t(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        y: Var,
        ctx: Option<Var>,
    ) -> (Var, Var) {
        let n = tape.shape(y)[0];
        let mut ld = tape.leaf(ArrayD::zeros(ndarray::IxDyn(&[n])));
        let mut cur = y;
        for layer in &self.layers {
            let (next, contrib) = layer.forward_t(tape, bind, cur, ctx);
            if let Some(c) = contrib {
                ld = tape.add(ld, c);
            }
            cur = next;
        }
        (cur, ld)
    }

    /// Inverse pass on the tape, without diagnostics.
    pub fn inverse_t(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        z: Var,
        ctx: Option<Var>,
    ) -> Var {
        let mut cur = z;
        for layer in self.layers.iter().rev() {
            cur = layer.inverse_t(tape, bind, cur, ctx);
        }
        cur
    }

    /// Inverse pass with the saturation guard. Activations whose magnitude
    /// exceeds `guard` (or that are already non-finite) mark the run as an
    /// exploding inverse; offending entries are saturated to +/-inf and the
    /// pass continues so callers can still inspect the output.
    pub fn inverse_diag_t(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        z: Var,
        ctx: Option<Var>,
        guard: f32,
    ) -> (Var, Option<NonFiniteReport>) {
        let mut report = None;
        let mut cur = z;
        let mut check = |tape: &mut Tape, cur: Var, step: usize, kind: &'static str| -> Var {
            let val = tape.value(cur);
            let bad = val.iter().any(|v| !v.is_finite() || v.abs() > guard);
            if !bad {
                return cur;
            }
            if report.is_none() {
                report = Some(NonFiniteReport {
                    inverse_step: step,
                    layer_kind: kind,
                    max_abs: max_abs(val),
                });
            }
            let saturated = val.mapv(|v| {
                if v.is_finite() && v.abs() <= guard {
                    v
                } else if v.is_nan() {
                    f32::NAN
                } else if v > 0.0 {
                    f32::INFINITY
                } else {
                    f32::NEG_INFINITY
                }
            });
            tape.leaf(saturated)
        };
        cur = check(tape, cur, 0, "latent-input");
        for (i, layer) in self.layers.iter().rev().enumerate() {
            cur = layer.inverse_t(tape, bind, cur, ctx);
            cur = check(tape, cur, i + 1, layer.kind());
        }
        (cur, report)
    }

    /// Data-dependent activation-norm init: run the forward pass on a batch,
    /// setting each uninitialized act-norm so its output has zero mean and
    /// unit variance per lane before continuing through it.
    pub fn initialize_actnorms(
        &mut self,
        store: &mut ParamStore,
        batch: &ArrayD<f32>,
        ctx: Option<&ArrayD<f32>>,
    ) {
        let mut cur = batch.clone();
        for layer in &mut self.layers {
            if let LayerOp::ActNorm(an) = &mut layer.op {
                if !an.initialized {
                    let lanes = cur.shape()[1];
                    let mut scale = ArrayD::zeros(ndarray::IxDyn(&[lanes]));
                    let mut bias = ArrayD::zeros(ndarray::IxDyn(&[lanes]));
                    for k in 0..lanes {
                        let lane = cur.index_axis(ndarray::Axis(1), k);
                        let n = lane.len() as f64;
                        let mean = lane.iter().map(|&v| v as f64).sum::<f64>() / n;
                        let var = lane
                            .iter()
                            .map(|&v| {
                                let d = v as f64 - mean;
                                d * d
                            })
                            .sum::<f64>()
                            / n;
                        let std = var.sqrt().max(1e-4);
                        scale[[k]] = (1.0 / std) as f32;
                        bias[[k]] = (-mean / std) as f32;
                    }
                    *store.get_mut(an.scale) = scale;
                    *store.get_mut(an.bias) = bias;
                    an.initialized = true;
                }
            }
            // advance through the (possibly re-parameterized) layer
            let mut tape = Tape::no_grad();
            let bind = TapeBinding::new(store);
            let u = tape.leaf(cur);
            let c = ctx.map(|f| tape.leaf(f.clone()));
            let (out, _) = layer.forward_t(&mut tape, &bind, u, c);
            cur = tape.value(out).clone();
        }
    }
}

// ---- builders ----

pub struct StackConfig {
    pub steps: usize,
    pub hidden: usize,
    pub alpha: f32,
    pub seed: u64,
}

/// Glow-style stack over `[N, C, H, W]` activations: `steps` repetitions of
/// (act-norm, permutation, conv coupling). `ctx_channels = 0` builds an
/// unconditional stack.
pub fn conv_stack(
    store: &mut ParamStore,
    channels: usize,
    ctx_channels: usize,
    cfg: &StackConfig,
) -> FlowStack {
    assert!(channels >= 2, "conv_stack needs at least 2 channels");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let keep = channels / 2;
    let change = channels - keep;
    let mut layers = Vec::new();
    for step in 0..cfg.steps {
        layers.push(LayerOp::ActNorm(ActNorm {
            scale: store.add(ArrayD::ones(ndarray::IxDyn(&[channels]))),
            bias: store.add(ArrayD::zeros(ndarray::IxDyn(&[channels]))),
            lanes: channels,
            initialized: false,
        }));
        layers.push(LayerOp::Permutation(Permutation::random(
            channels,
            cfg.seed.wrapping_add(step as u64 + 1),
        )));
        let cin = keep + ctx_channels;
        let c1 = Conv2d::new(store, &mut rng, cin, cfg.hidden, 3, 1, 1);
        let c2 = Conv2d::zeros(store, cfg.hidden, 2 * change, 3, 1, 1);
        layers.push(LayerOp::Coupling(AffineCoupling {
            keep,
            change,
            net: CouplingNet::Conv { c1, c2 },
            alpha: cfg.alpha,
        }));
    }
    FlowStack {
        layers: layers
            .into_iter()
            .enumerate()
            .map(|(index, op)| InvertibleLayer { index, op })
            .collect(),
    }
}

/// Stack over `[N, D]` vectors with fully-connected couplings.
pub fn vector_stack(
    store: &mut ParamStore,
    dim: usize,
    ctx_dim: usize,
    cfg: &StackConfig,
) -> FlowStack {
    assert!(dim >= 2, "vector_stack needs at least 2 dims");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let keep = dim / 2;
    let change = dim - keep;
    let mut layers = Vec::new();
    for step in 0..cfg.steps {
        layers.push(LayerOp::ActNorm(ActNorm {
            scale: store.add(ArrayD::ones(ndarray::IxDyn(&[dim]))),
            bias: store.add(ArrayD::zeros(ndarray::IxDyn(&[dim]))),
            lanes: dim,
            initialized: false,
        }));
        layers.push(LayerOp::Permutation(Permutation::random(
            dim,
            cfg.seed.wrapping_add(step as u64 + 1),
        )));
        let l1 = Linear::new(store, &mut rng, keep + ctx_dim, cfg.hidden);
        let l2 = Linear::zeros(store, cfg.hidden, 2 * change);
        layers.push(LayerOp::Coupling(AffineCoupling {
            keep,
            change,
            net: CouplingNet::Fc { l1, l2 },
            alpha: cfg.alpha,
        }));
    }
    FlowStack {
        layers: layers
            .into_iter()
            .enumerate()
            .map(|(index, op)| InvertibleLayer { index, op })
            .collect(),
    }
}

// ---- standalone conditional flow ----

/// A self-contained flow over one input shape with a standard-normal prior:
/// the composition `z = f(y; ctx)` plus exact log-det accounting.
pub struct ConditionalFlow {
    pub stack: FlowStack,
    pub store: ParamStore,
    /// Per-sample input shape (without the batch axis).
    pub input_shape: Vec<usize>,
    pub guard: f32,
}

impl ConditionalFlow {
    fn check_input(&self, y: &ArrayD<f32>) -> Result<()> {
        if y.shape().len() != self.input_shape.len() + 1
            || y.shape()[1..] != self.input_shape[..]
        {
            return Err(Error::ShapeMismatch(format!(
                "flow expects [N, {:?}], got {:?}",
                self.input_shape,
                y.shape()
            )));
        }
        Ok(())
    }

    fn resolve_ctx<'t>(
        &self,
        tape: &mut Tape,
        ctx: &ConditioningContext,
    ) -> Option<Var> {
        ctx.features().map(|f| tape.leaf(f.clone()))
    }

    /// `z = f(y; ctx)` with the per-sample log-det (f64-accumulated).
    pub fn flow_forward(
        &self,
        y: &ArrayD<f32>,
        ctx: &ConditioningContext,
    ) -> Result<(ArrayD<f32>, Vec<f64>)> {
        self.check_input(y)?;
        if !all_finite(y) {
            return Err(Error::NonFiniteInput("flow_forward input".into()));
        }
        let mut tape = Tape::no_grad();
        let bind = TapeBinding::new(&self.store);
        let yv = tape.leaf(y.clone());
        let cv = self.resolve_ctx(&mut tape, ctx);
        // layer-by-layer with finite checks so failures name the layer
        let n = y.shape()[0];
        let mut ld = vec![0.0f64; n];
        let mut cur = yv;
        for layer in &self.stack.layers {
            let (next, contrib) = layer.forward_t(&mut tape, &bind, cur, cv);
            if let Some(c) = contrib {
                let cvals = tape.value(c);
                for (acc, &v) in ld.iter_mut().zip(cvals.iter()) {
                    *acc += v as f64;
                }
            }
            if !all_finite(tape.value(next)) {
                return Err(Error::NonFiniteInput(format!(
                    "forward layer {} ({})",
                    layer.index,
                    layer.kind()
                )));
            }
            cur = next;
        }
        Ok((tape.value(cur).clone(), ld))
    }

    /// `y = f^{-1}(z; ctx)`; an exploding inverse is an error carrying the
    /// first bad step and the offending magnitude.
    pub fn flow_inverse(
        &self,
        z: &ArrayD<f32>,
        ctx: &ConditioningContext,
    ) -> Result<ArrayD<f32>> {
        let (y, report) = self.flow_inverse_diag(z, ctx);
        match report {
            None => Ok(y),
            Some(r) => Err(Error::NonFiniteInverse {
                layer_index: r.inverse_step,
                kind: r.layer_kind,
                max_abs: r.max_abs,
            }),
        }
    }

    /// Inverse that always returns the (possibly saturated) output plus the
    /// diagnostic, for %Inf accounting.
    pub fn flow_inverse_diag(
        &self,
        z: &ArrayD<f32>,
        ctx: &ConditioningContext,
    ) -> (ArrayD<f32>, Option<NonFiniteReport>) {
        let mut tape = Tape::no_grad();
        let bind = TapeBinding::new(&self.store);
        let zv = tape.leaf(z.clone());
        let cv = self.resolve_ctx(&mut tape, ctx);
        let (out, report) = self.stack.inverse_diag_t(&mut tape, &bind, zv, cv, self.guard);
        (tape.value(out).clone(), report)
    }

    /// Standard-normal log-density of `f(y; ctx)` plus the log-det, per sample.
    pub fn log_prob(&self, y: &ArrayD<f32>, ctx: &ConditioningContext) -> Result<Vec<f64>> {
        let (z, ld) = self.flow_forward(y, ctx)?;
        let n = y.shape()[0];
        let per = z.len() / n;
        let mut out = Vec::with_capacity(n);
        let flat: Vec<f32> = z.iter().cloned().collect();
        for i in 0..n {
            let mut acc = 0.0f64;
            for &v in &flat[i * per..(i + 1) * per] {
                let v = v as f64;
                acc += -0.5 * v * v - 0.5 * LN_2PI;
            }
            out.push(acc + ld[i]);
        }
        Ok(out)
    }

    /// Dimensionality of one sample.
    pub fn dim(&self) -> usize {
        self.input_shape.iter().product()
    }
}

/// Randomize a stack's parameters into a realistic non-identity regime:
/// act-norm scales are log-normal (bounded away from zero, as trained
/// normalizers are), biases and all conditioner weights are Gaussian. Gives
/// a non-trivial volume-changing flow for tests and toy models.
pub fn randomize_stack(stack: &FlowStack, store: &mut ParamStore, seed: u64, weight_std: f32) {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |store: &mut ParamStore, id: crate::nn::ParamId, std: f32, lognormal: bool| {
        for v in store.get_mut(id).iter_mut() {
            let r: f32 = StandardNormal.sample(&mut rng);
            *v = if lognormal { (r * std).exp() } else { r * std };
        }
    };
    for layer in &stack.layers {
        match &layer.op {
            LayerOp::ActNorm(an) => {
                fill(store, an.scale, 0.3, true);
                fill(store, an.bias, 0.3, false);
            }
            LayerOp::Permutation(_) => {}
            LayerOp::Coupling(c) => match &c.net {
                CouplingNet::Conv { c1, c2 } => {
                    fill(store, c1.w, weight_std, false);
                    fill(store, c1.b, weight_std * 0.5, false);
                    fill(store, c2.w, weight_std, false);
                    fill(store, c2.b, weight_std * 0.5, false);
                }
                CouplingNet::Fc { l1, l2 } => {
                    fill(store, l1.w, weight_std, false);
                    fill(store, l1.b, weight_std * 0.5, false);
                    fill(store, l2.w, weight_std, false);
                    fill(store, l2.b, weight_std * 0.5, false);
                }
            },
        }
    }
}
