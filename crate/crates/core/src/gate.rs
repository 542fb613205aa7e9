//! Channel-attention gate and the four channel identification strategies.
//!
//! The gate pools each spectral channel over space, runs a bottleneck
//! perceptron (`192 -> 48 -> 192`) and squashes with a sigmoid. A value near 1
//! marks a channel as domain-invariant (kept, `F_I`), near 0 as domain-variant
//! (`F_V`, open to intervention).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectrum::{FREQS, SPECTRAL_CHANNELS};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const GATE_HIDDEN: usize = 48;

/// How per-sample gate activations become the channel split used by the
/// do-operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Per-sample threshold at `mu`.
    Oe,
    /// Batch-mean activations used directly as soft blend weights.
    Boe,
    /// Batch-mean activations thresholded at `mu`, one mask for the batch.
    Bae,
    /// A fixed channel set; gate activations are ignored.
    Fe,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Oe => "oe",
            Strategy::Boe => "boe",
            Strategy::Bae => "bae",
            Strategy::Fe => "fe",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "oe" => Ok(Strategy::Oe),
            "boe" => Ok(Strategy::Boe),
            "bae" => Ok(Strategy::Bae),
            "fe" => Ok(Strategy::Fe),
            other => Err(Error::invalid(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Whether the gate regularizer is divided by the channel count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateLossKind {
    /// Batch-mean activation summed over channels, divided by the channel
    /// count. Lies in `(0, 1)`.
    #[default]
    Normalized,
    /// Batch-mean activation summed over channels.
    RawSum,
}

impl FromStr for GateLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normalized" => Ok(GateLossKind::Normalized),
            "rawsum" | "raw-sum" => Ok(GateLossKind::RawSum),
            other => Err(Error::invalid(format!("unknown gate loss {other:?}"))),
        }
    }
}

/// Gate activations for a batch, row-major `[batch, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateOutput {
    channels: usize,
    values: Vec<f32>,
}

impl GateOutput {
    pub fn new(channels: usize, values: Vec<f32>) -> Result<Self> {
        if channels == 0 || !values.len().is_multiple_of(channels) {
            return Err(Error::invalid(format!(
                "{} gate values do not split into rows of {channels}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::invalid(format!("gate value {v} outside (0, 1)")));
        }
        Ok(Self { channels, values })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let channels = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != channels) {
            return Err(Error::invalid("ragged gate rows"));
        }
        Self::new(channels, rows.concat())
    }

    pub fn batch(&self) -> usize {
        self.values.len() / self.channels
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Column means over the batch.
    pub fn batch_mean(&self) -> Vec<f32> {
        let b = self.batch();
        let mut mean = vec![0.0f64; self.channels];
        for i in 0..b {
            for (m, &v) in mean.iter_mut().zip(self.row(i)) {
                *m += v as f64;
            }
        }
        mean.into_iter().map(|m| (m / b as f64) as f32).collect()
    }
}

/// Hard channel split: `true` keeps the channel (`F_I`), `false` marks it
/// for intervention (`F_V`).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ChannelMask {
    bits: Vec<bool>,
}

impl ChannelMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn all(channels: usize, value: bool) -> Self {
        Self {
            bits: vec![value; channels],
        }
    }

    pub fn from_indices(channels: usize, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut bits = vec![false; channels];
        for i in indices {
            *bits
                .get_mut(i)
                .ok_or_else(|| Error::invalid(format!("channel {i} out of range")))? = true;
        }
        Ok(Self { bits })
    }

    /// The same zigzag frequencies selected in each of the three colors.
    pub fn from_frequencies(freqs: impl IntoIterator<Item = usize> + Clone) -> Result<Self> {
        let mut indices = Vec::new();
        for color in 0..3 {
            for k in freqs.clone() {
                if k >= FREQS {
                    return Err(Error::invalid(format!("frequency {k} out of range")));
                }
                indices.push(color * FREQS + k);
            }
        }
        Self::from_indices(SPECTRAL_CHANNELS, indices)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_invariant(&self, ch: usize) -> bool {
        self.bits[ch]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn as_weights<T: Real>(&self) -> Vec<T> {
        self.bits
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect()
    }

    /// Parses a fixed channel set: whitespace/comma separated channel indices
    /// in `0..192`, `#` comments allowed.
    pub fn parse_index_list(text: &str) -> Result<Self> {
        let mut indices = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("");
            for tok in line.split(|c: char| c == ',' || c.is_whitespace()) {
                if tok.is_empty() {
                    continue;
                }
                indices.push(
                    tok.parse::<usize>()
                        .map_err(|_| Error::invalid(format!("bad channel index {tok:?}")))?,
                );
            }
        }
        Self::from_indices(SPECTRAL_CHANNELS, indices)
    }
}

/// Default fixed set: the 24 lowest zigzag frequencies of every color.
pub fn default_fixed_set() -> ChannelMask {
    ChannelMask::from_frequencies(0..24).expect("in range")
}

/// Result of channel identification.
#[derive(Clone, Debug, PartialEq)]
pub enum Identification {
    PerSample(Vec<ChannelMask>),
    Shared(ChannelMask),
    /// Blend weights in `(0, 1)`, one per channel.
    Soft(Vec<f32>),
}

impl Identification {
    /// Number of kept channels (for soft weights, those above one half),
    /// averaged over samples for per-sample masks.
    pub fn mean_popcount(&self) -> f64 {
        match self {
            Identification::PerSample(m) if !m.is_empty() => {
                m.iter().map(|x| x.popcount() as f64).sum::<f64>() / m.len() as f64
            }
            Identification::PerSample(_) => 0.0,
            Identification::Shared(m) => m.popcount() as f64,
            Identification::Soft(w) => w.iter().filter(|&&x| x > 0.5).count() as f64,
        }
    }
}

pub fn identify_channels(
    gates: &GateOutput,
    strategy: Strategy,
    mu: f32,
    fixed_set: Option<&ChannelMask>,
) -> Result<Identification> {
    if !(0.0..1.0).contains(&mu) {
        return Err(Error::invalid(format!("mu = {mu} outside [0, 1)")));
    }
    if gates.batch() == 0 {
        return Err(Error::invalid("channel identification on an empty batch"));
    }
    Ok(match strategy {
        Strategy::Oe => Identification::PerSample(
            (0..gates.batch())
                .map(|i| ChannelMask::new(gates.row(i).iter().map(|&g| g > mu).collect()))
                .collect(),
        ),
        Strategy::Boe => Identification::Soft(gates.batch_mean()),
        Strategy::Bae => Identification::Shared(ChannelMask::new(
            gates.batch_mean().iter().map(|&g| g > mu).collect(),
        )),
        Strategy::Fe => {
            let set = fixed_set.ok_or_else(|| Error::invalid("FE strategy needs a fixed channel set"))?;
            if set.len() != gates.channels() {
                return Err(Error::ChannelCount {
                    expected: gates.channels(),
                    got: set.len(),
                });
            }
            Identification::Shared(set.clone())
        }
    })
}

/// Records channel identification on the tape. Returns a mask of shape
/// `[B, C]` (OE) or `[C]` (all others). Hard masks pass gradients straight
/// through to the activations they were thresholded from.
pub fn select_channels<T: Real>(
    tape: &mut Tape<T>,
    gates: Var,
    strategy: Strategy,
    mu: T,
    fixed_set: &ChannelMask,
) -> Result<Var> {
    match strategy {
        Strategy::Oe => Ok(tape.straight_through_threshold(gates, mu)),
        Strategy::Boe => tape.batch_mean(gates),
        Strategy::Bae => {
            let mean = tape.batch_mean(gates)?;
            Ok(tape.straight_through_threshold(mean, mu))
        }
        Strategy::Fe => {
            let c = tape.shape(gates)[1];
            if fixed_set.len() != c {
                return Err(Error::ChannelCount {
                    expected: c,
                    got: fixed_set.len(),
                });
            }
            Ok(tape.constant(Tensor::new(vec![c], fixed_set.as_weights())?))
        }
    }
}

/// Gate regularizer on the tape.
pub fn gate_loss<T: Real>(tape: &mut Tape<T>, gates: Var, kind: GateLossKind) -> Result<Var> {
    let shape = tape.shape(gates);
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::invalid(format!(
            "gate_loss needs [B, C] gates, got {shape:?}"
        )));
    }
    let batch = shape[0];
    Ok(match kind {
        GateLossKind::Normalized => tape.mean_all(gates),
        GateLossKind::RawSum => {
            let s = tape.sum_all(gates);
            tape.scale(s, T::one() / T::of(batch as f64))
        }
    })
}

/// Gate regularizer computed directly from activations.
pub fn gate_loss_value(gates: &GateOutput, kind: GateLossKind) -> f64 {
    let sum: f64 = gates.batch_mean().iter().map(|&g| g as f64).sum();
    match kind {
        GateLossKind::Normalized => sum / gates.channels() as f64,
        GateLossKind::RawSum => sum,
    }
}

/// Pool, bottleneck perceptron, sigmoid.
#[derive(Clone, Debug)]
pub struct GateModule {
    channels: usize,
    hidden: usize,
    fc1_weight: ParamId,
    fc1_bias: ParamId,
    fc2_weight: ParamId,
    fc2_bias: ParamId,
}

impl GateModule {
    /// He-initialized first layer; zero second layer, so every activation
    /// starts at exactly one half.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        channels: usize,
        hidden: usize,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, (2.0 / channels as f64).sqrt()).expect("valid std");
        let w1 = Tensor::from_fn(vec![hidden, channels], |_| T::of(normal.sample(rng)));
        Ok(Self {
            channels,
            hidden,
            fc1_weight: store.add(format!("{prefix}.fc1.weight"), w1)?,
            fc1_bias: store.add(format!("{prefix}.fc1.bias"), Tensor::zeros(vec![hidden]))?,
            fc2_weight: store.add(
                format!("{prefix}.fc2.weight"),
                Tensor::zeros(vec![channels, hidden]),
            )?,
            fc2_bias: store.add(format!("{prefix}.fc2.bias"), Tensor::zeros(vec![channels]))?,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.fc1_weight, self.fc1_bias, self.fc2_weight, self.fc2_bias]
    }

    /// `x: [B, C, H, W]` spectral batch to `[B, C]` activations in `(0, 1)`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &[Var], x: Var) -> Result<Var> {
        let c = tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(Error::ChannelCount {
                expected: self.channels,
                got: c,
            });
        }
        let pooled = tape.global_avg_pool(x)?;
        let h = tape.linear(
            pooled,
            bound[self.fc1_weight.index()],
            bound[self.fc1_bias.index()],
        )?;
        let h = tape.relu(h);
        let logits = tape.linear(h, bound[self.fc2_weight.index()], bound[self.fc2_bias.index()])?;
        Ok(tape.sigmoid(logits))
    }
}
