//! Task network over spectral input, its regularizers and the total loss.
//!
//! Layout: fixed per-channel input standardization, a 1x1 fuse convolution
//! from the 192 spectral channels, three residual stages, global average
//! pooling and a linear classifier. The channel gate lives in the same
//! parameter store and is trained jointly.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{gate_loss, GateLossKind, GateModule, GATE_HIDDEN};
use crate::spectrum::SPECTRAL_CHANNELS;
use crate::tensor::{BatchStats, BufferId, CustomOp, ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const NUM_CLASSES: usize = 5;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Two 3x3 convolutions.
    Basic,
    /// 1x1 reduce, 3x3, 1x1 expand at a quarter of the output width.
    #[default]
    Bottleneck,
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "basic" => Ok(BlockKind::Basic),
            "bottleneck" => Ok(BlockKind::Bottleneck),
            other => Err(Error::invalid(format!("unknown block kind {other:?}"))),
        }
    }
}

/// Which reading of the fuse-layer constraint to apply.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FuseLossKind {
    /// `max(0.5 - f, 0)` with `f` the normalized participation ratio of the
    /// per-input-channel L1 mass.
    #[default]
    Participation,
    /// `max(0.5 - mean |W|, 0)`.
    MeanAbs,
}

impl fmt::Display for FuseLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FuseLossKind::Participation => "participation",
            FuseLossKind::MeanAbs => "mean-abs",
        })
    }
}

impl FromStr for FuseLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "participation" => Ok(FuseLossKind::Participation),
            "mean-abs" | "meanabs" => Ok(FuseLossKind::MeanAbs),
            other => Err(Error::invalid(format!("unknown fuse loss {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub fuse_width: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub block: BlockKind,
    pub num_classes: usize,
    pub gate_hidden: usize,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: SPECTRAL_CHANNELS,
            fuse_width: 64,
            stage_widths: vec![64, 128, 256],
            blocks_per_stage: 2,
            block: BlockKind::Bottleneck,
            num_classes: NUM_CLASSES,
            gate_hidden: GATE_HIDDEN,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.stage_widths.last().copied().unwrap_or(self.fuse_width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.fuse_width == 0 || self.num_classes == 0 || self.gate_hidden == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.stage_widths.contains(&0) || self.blocks_per_stage == 0 {
            return Err(Error::Config(
                "every stage needs a positive width and at least one block".into(),
            ));
        }
        if self.block == BlockKind::Bottleneck && self.stage_widths.iter().any(|w| w % 4 != 0) {
            return Err(Error::Config(
                "bottleneck stage widths must be divisible by 4".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics in normalization layers.
    Eval,
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    mean: BufferId,
    var: BufferId,
}

#[derive(Clone, Debug)]
struct ConvNorm {
    weight: ParamId,
    stride: usize,
    pad: usize,
    norm: usize,
}

#[derive(Clone, Debug)]
struct Block {
    convs: Vec<ConvNorm>,
    shortcut: Option<ConvNorm>,
}

/// Output of one forward pass.
pub struct Forward<T: Real> {
    pub logits: Var,
    /// Pooled penultimate features, `[B, feature_dim]`.
    pub features: Var,
    /// One entry per normalization layer in training mode, empty otherwise.
    pub norm_stats: Vec<BatchStats<T>>,
}

struct Builder<'a, T: Real, R: Rng> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    norms: Vec<Norm>,
}

impl<T: Real, R: Rng> Builder<'_, T, R> {
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        zero_gamma: bool,
    ) -> Result<ConvNorm> {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let rng = &mut *self.rng;
        let w = Tensor::from_fn(vec![cout, cin, k, k], |_| T::of(normal.sample(rng)));
        let weight = self.store.add(format!("{name}.weight"), w)?;
        let norm = self.norm(&format!("{name}.bn"), cout, zero_gamma)?;
        Ok(ConvNorm {
            weight,
            stride,
            pad: k / 2,
            norm,
        })
    }

    fn norm(&mut self, name: &str, c: usize, zero_gamma: bool) -> Result<usize> {
        let g = if zero_gamma { T::zero() } else { T::one() };
        let n = Norm {
            gamma: self
                .store
                .add(format!("{name}.gamma"), Tensor::full(vec![c], g))?,
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(vec![c]))?,
            mean: self
                .store
                .add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![c]))?,
            var: self
                .store
                .add_buffer(format!("{name}.running_var"), Tensor::full(vec![c], T::one()))?,
        };
        self.norms.push(n);
        Ok(self.norms.len() - 1)
    }
}

/// The task network plus its gate and all parameters.
#[derive(Clone, Debug)]
pub struct TaskModel<T: Real = f32> {
    config: ModelConfig,
    store: ParamStore<T>,
    input_mean: BufferId,
    input_std: BufferId,
    gate: GateModule,
    fuse: ConvNorm,
    blocks: Vec<Block>,
    head_weight: ParamId,
    head_bias: ParamId,
    norms: Vec<Norm>,
}

impl<T: Real> TaskModel<T> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let c_in = config.in_channels;
        let input_mean = store.add_buffer("input.mean", Tensor::zeros(vec![c_in]))?;
        let input_std = store.add_buffer("input.std", Tensor::full(vec![c_in], T::one()))?;
        let gate = GateModule::new(&mut store, rng, "gate", c_in, config.gate_hidden)?;
        let mut b = Builder {
            store: &mut store,
            rng,
            norms: Vec::new(),
        };
        let fuse = b.conv("fuse", c_in, config.fuse_width, 1, 1, false)?;
        let mut blocks = Vec::new();
        let mut width = config.fuse_width;
        for (si, &out) in config.stage_widths.iter().enumerate() {
            for bi in 0..config.blocks_per_stage {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let name = format!("stage{}.block{}", si + 1, bi + 1);
                let convs = match config.block {
                    BlockKind::Basic => vec![
                        b.conv(&format!("{name}.conv1"), width, out, 3, stride, false)?,
                        b.conv(&format!("{name}.conv2"), out, out, 3, 1, true)?,
                    ],
                    BlockKind::Bottleneck => {
                        let mid = out / 4;
                        vec![
                            b.conv(&format!("{name}.conv1"), width, mid, 1, 1, false)?,
                            b.conv(&format!("{name}.conv2"), mid, mid, 3, stride, false)?,
                            b.conv(&format!("{name}.conv3"), mid, out, 1, 1, true)?,
                        ]
                    }
                };
                let shortcut = if stride != 1 || width != out {
                    Some(b.conv(&format!("{name}.shortcut"), width, out, 1, stride, false)?)
                } else {
                    None
                };
                blocks.push(Block { convs, shortcut });
                width = out;
            }
        }
        let norms = std::mem::take(&mut b.norms);
        let bound = 1.0 / (width as f64).sqrt();
        let uniform = Uniform::new_inclusive(-bound, bound).expect("valid range");
        let hw = Tensor::from_fn(vec![config.num_classes, width], |_| T::of(uniform.sample(rng)));
        let head_weight = store.add("head.weight", hw)?;
        let head_bias = store.add("head.bias", Tensor::zeros(vec![config.num_classes]))?;
        Ok(Self {
            config,
            store,
            input_mean,
            input_std,
            gate,
            fuse,
            blocks,
            head_weight,
            head_bias,
            norms,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn gate(&self) -> &GateModule {
        &self.gate
    }

    pub fn fuse_weight_id(&self) -> ParamId {
        self.fuse.weight
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> TaskModel<U> {
        TaskModel {
            config: self.config.clone(),
            store: self.store.cast(),
            input_mean: self.input_mean,
            input_std: self.input_std,
            gate: self.gate.clone(),
            fuse: self.fuse.clone(),
            blocks: self.blocks.clone(),
            head_weight: self.head_weight,
            head_bias: self.head_bias,
            norms: self.norms.clone(),
        }
    }

    /// Sets the fixed per-channel standardization applied to every input.
    pub fn set_input_stats(&mut self, mean: &[T], std: &[T]) -> Result<()> {
        let c = self.config.in_channels;
        if mean.len() != c || std.len() != c {
            return Err(Error::ChannelCount {
                expected: c,
                got: mean.len().min(std.len()),
            });
        }
        if std.iter().any(|&s| !(s > T::zero()) || !s.is_finite()) {
            return Err(Error::invalid("input std must be positive and finite"));
        }
        self.store
            .buffer_mut(self.input_mean)
            .data_mut()
            .copy_from_slice(mean);
        self.store
            .buffer_mut(self.input_std)
            .data_mut()
            .copy_from_slice(std);
        Ok(())
    }

    /// Standardizes a `[B, C, H, W]` buffer in place.
    pub fn normalize_input(&self, data: &mut [T], spatial: usize) {
        let mean = self.store.buffer(self.input_mean).data();
        let std = self.store.buffer(self.input_std).data();
        let c = mean.len();
        for (idx, plane) in data.chunks_mut(spatial).enumerate() {
            let ch = idx % c;
            let inv = T::one() / std[ch];
            for v in plane {
                *v = (*v - mean[ch]) * inv;
            }
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.store.bind(tape)
    }

    /// Gate activations `[B, C]` for a standardized batch.
    pub fn gate_forward(&self, tape: &mut Tape<T>, bound: &[Var], x: Var) -> Result<Var> {
        self.gate.forward(tape, bound, x)
    }

    /// Logits and features for a standardized `[B, 192, H, W]` batch.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &[Var], x: Var, mode: Mode) -> Result<Forward<T>> {
        let xs = tape.shape(x);
        if xs.len() != 4 || xs[1] != self.config.in_channels {
            return Err(Error::ChannelCount {
                expected: self.config.in_channels,
                got: xs.get(1).copied().unwrap_or(0),
            });
        }
        let mut stats = Vec::new();
        let h = self.conv_norm(tape, bound, x, &self.fuse, mode, &mut stats)?;
        let mut h = tape.relu(h);
        for block in &self.blocks {
            let mut y = h;
            for (i, conv) in block.convs.iter().enumerate() {
                y = self.conv_norm(tape, bound, y, conv, mode, &mut stats)?;
                if i + 1 < block.convs.len() {
                    y = tape.relu(y);
                }
            }
            let skip = match &block.shortcut {
                Some(sc) => self.conv_norm(tape, bound, h, sc, mode, &mut stats)?,
                None => h,
            };
            let sum = tape.add(y, skip)?;
            h = tape.relu(sum);
        }
        let features = tape.global_avg_pool(h)?;
        let logits = tape.linear(
            features,
            bound[self.head_weight.index()],
            bound[self.head_bias.index()],
        )?;
        Ok(Forward {
            logits,
            features,
            norm_stats: stats,
        })
    }

    fn conv_norm(
        &self,
        tape: &mut Tape<T>,
        bound: &[Var],
        x: Var,
        conv: &ConvNorm,
        mode: Mode,
        stats: &mut Vec<BatchStats<T>>,
    ) -> Result<Var> {
        let y = tape.conv2d(x, bound[conv.weight.index()], conv.stride, conv.pad)?;
        let n = &self.norms[conv.norm];
        let (gamma, beta) = (bound[n.gamma.index()], bound[n.beta.index()]);
        let eps = T::of(BN_EPS);
        match mode {
            Mode::Train => {
                let (out, s) = tape.batch_norm(y, gamma, beta, eps)?;
                stats.push(s);
                Ok(out)
            }
            Mode::Eval => {
                let mean = self.store.buffer(n.mean).data().to_vec();
                let var = self.store.buffer(n.var).data().to_vec();
                tape.channel_affine(y, gamma, beta, &mean, &var, eps)
            }
        }
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        if stats.len() != self.norms.len() {
            return Err(Error::invalid(format!(
                "{} batch statistics for {} normalization layers",
                stats.len(),
                self.norms.len()
            )));
        }
        let m = T::of(self.config.bn_momentum);
        for (n, s) in self.norms.iter().zip(stats) {
            let unbias = if s.count > 1 {
                T::of(s.count as f64 / (s.count - 1) as f64)
            } else {
                T::one()
            };
            for (r, &v) in self.store.buffer_mut(n.mean).data_mut().iter_mut().zip(&s.mean) {
                *r = (T::one() - m) * *r + m * v;
            }
            for (r, &v) in self.store.buffer_mut(n.var).data_mut().iter_mut().zip(&s.var) {
                *r = (T::one() - m) * *r + m * v * unbias;
            }
        }
        Ok(())
    }
}

struct FuseLossOp {
    kind: FuseLossKind,
    cout: usize,
    cin: usize,
}

/// Returns `(loss, dloss/dW)`.
fn fuse_loss_eval<T: Real>(w: &[T], cout: usize, cin: usize, kind: FuseLossKind) -> (T, Vec<T>) {
    let half = T::of(0.5);
    let mut grad = vec![T::zero(); w.len()];
    match kind {
        FuseLossKind::MeanAbs => {
            let n = T::of(w.len() as f64);
            let mean = w.iter().map(|x| x.abs()).sum::<T>() / n;
            if mean >= half {
                return (T::zero(), grad);
            }
            for (g, &x) in grad.iter_mut().zip(w) {
                *g = -sign(x) / n;
            }
            (half - mean, grad)
        }
        FuseLossKind::Participation => {
            let mut mass = vec![T::zero(); cin];
            for row in w.chunks(cin).take(cout) {
                for (a, &x) in mass.iter_mut().zip(row) {
                    *a += x.abs();
                }
            }
            let total: T = mass.iter().copied().sum();
            let sq: T = mass.iter().map(|&a| a * a).sum();
            let c = T::of(cin as f64);
            if !(sq > T::min_positive_value()) {
                return (half - T::one() / c, grad);
            }
            let f = total * total / (c * sq);
            if f >= half {
                return (T::zero(), grad);
            }
            let two = T::of(2.0);
            let dfa: Vec<T> = mass
                .iter()
                .map(|&a| two * total * (sq - total * a) / (c * sq * sq))
                .collect();
            for (row, grow) in w.chunks(cin).zip(grad.chunks_mut(cin)) {
                for ((g, &x), &d) in grow.iter_mut().zip(row).zip(&dfa) {
                    *g = -d * sign(x);
                }
            }
            (half - f, grad)
        }
    }
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl<T: Real> CustomOp<T> for FuseLossOp {
    fn name(&self) -> &'static str {
        "fuse_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let (_, grad) = fuse_loss_eval(inputs[0].data(), self.cout, self.cin, self.kind);
        vec![Some(grad.into_iter().map(|d| d * g[0]).collect())]
    }
}

/// Fuse-layer channel-utilization penalty on a `[out, in, 1, 1]` weight.
pub fn fuse_loss<T: Real>(tape: &mut Tape<T>, weight: Var, kind: FuseLossKind) -> Result<Var> {
    let ws = tape.shape(weight).to_vec();
    if ws.len() != 4 || ws[2] != 1 || ws[3] != 1 || ws[0] == 0 || ws[1] == 0 {
        return Err(Error::invalid(format!(
            "fuse_loss needs a [out, in, 1, 1] weight, got {ws:?}"
        )));
    }
    let (cout, cin) = (ws[0], ws[1]);
    let (loss, _) = fuse_loss_eval(tape.value(weight).data(), cout, cin, kind);
    Ok(tape.custom(
        &[weight],
        Tensor::scalar(loss),
        Box::new(FuseLossOp { kind, cout, cin }),
    ))
}

/// Fuse penalty from raw `[out * in]` weights.
pub fn fuse_loss_value(weights: &[f64], cout: usize, cin: usize, kind: FuseLossKind) -> f64 {
    fuse_loss_eval(weights, cout, cin, kind).0
}

/// Effective fraction of input channels in use, in `[1/in, 1]`.
pub fn fuse_participation(weights: &[f32], cin: usize) -> f64 {
    let mut mass = vec![0.0f64; cin];
    for row in weights.chunks(cin) {
        for (a, &x) in mass.iter_mut().zip(row) {
            *a += x.abs() as f64;
        }
    }
    let total: f64 = mass.iter().sum();
    let sq: f64 = mass.iter().map(|a| a * a).sum();
    if sq <= 0.0 {
        1.0 / cin as f64
    } else {
        total * total / (cin as f64 * sq)
    }
}

/// Per-term values of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_gate: f64,
    pub l_fuse: f64,
    pub total: f64,
    pub lambda: f64,
    /// Weight on `l_fuse`: 1 for the full objective, 0 for the baseline.
    pub fuse_weight: f64,
}

impl LossBreakdown {
    pub fn new(l_ce: f64, l_gate: f64, l_fuse: f64, lambda: f64) -> Self {
        Self::weighted(l_ce, l_gate, l_fuse, lambda, 1.0)
    }

    pub fn weighted(l_ce: f64, l_gate: f64, l_fuse: f64, lambda: f64, fuse_weight: f64) -> Self {
        Self {
            l_ce,
            l_gate,
            l_fuse,
            total: l_ce + lambda * l_gate + fuse_weight * l_fuse,
            lambda,
            fuse_weight,
        }
    }

    /// Largest deviation of `total` from the recombined terms.
    pub fn identity_residual(&self) -> f64 {
        (self.total - (self.l_ce + self.lambda * self.l_gate + self.fuse_weight * self.l_fuse)).abs()
    }
}

/// Loss-term settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub gate_kind: GateLossKind,
    pub fuse_kind: FuseLossKind,
    pub fuse_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.18,
            gate_kind: GateLossKind::Normalized,
            fuse_kind: FuseLossKind::Participation,
            fuse_weight: 1.0,
        }
    }
}

/// Records `l_ce + lambda * l_gate + fuse_weight * l_fuse` and reports the
/// terms as recorded on the tape.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    gates: Var,
    fuse_weight: Var,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    if tape.shape(gates).first() != tape.shape(logits).first() {
        return Err(Error::shape("total_loss", tape.shape(logits), tape.shape(gates)));
    }
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    let lg = gate_loss(tape, gates, cfg.gate_kind)?;
    let lf = fuse_loss(tape, fuse_weight, cfg.fuse_kind)?;
    let total = tape.weighted_sum(&[
        (ce, T::one()),
        (lg, T::of(cfg.lambda)),
        (lf, T::of(cfg.fuse_weight)),
    ])?;
    let v = |tape: &Tape<T>, x: Var| tape.value(x).item().as_f64();
    let mut breakdown =
        LossBreakdown::weighted(v(tape, ce), v(tape, lg), v(tape, lf), cfg.lambda, cfg.fuse_weight);
    breakdown.total = v(tape, total);
    Ok((total, breakdown))
}
