//! Batch-level do-operations on spectral channels.
//!
//! Each sample `i` is paired with a partner `p(i)`. Channels the mask keeps
//! stay with `i`; the remaining channels are taken from the partner
//! (exchange) or restandardized to the partner's per-channel statistics
//! (match). Masks are per-channel weights `m` in `[0, 1]`:
//! `out_i = m * x_i + (1 - m) * t_i` where `t_i` is the exchanged or matched
//! map. Hard weights select bitwise.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{ChannelMask, Identification};
use crate::spectrum::SpectralTensor;
use crate::tensor::{CustomOp, Real, Tape, Tensor, Var};

/// Guard added to the standard deviation in match restandardization.
pub const MATCH_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DoMode {
    #[default]
    Exchange,
    Match,
}

impl fmt::Display for DoMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DoMode::Exchange => "exchange",
            DoMode::Match => "match",
        })
    }
}

impl FromStr for DoMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exchange" | "ex" => Ok(DoMode::Exchange),
            "match" | "ma" => Ok(DoMode::Match),
            other => Err(Error::invalid(format!("unknown do mode {other:?}"))),
        }
    }
}

/// Partner assignment: sample `i` draws its intervened channels from
/// `perm[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pairing {
    perm: Vec<usize>,
}

impl Pairing {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid(format!("{perm:?} is not a permutation")));
            }
        }
        Ok(Self { perm })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            perm: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn partner(&self, i: usize) -> usize {
        self.perm[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        Self { perm: inv }
    }

    pub fn is_derangement(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i != p)
    }

    pub fn is_involution(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| self.perm[p] == i)
    }
}

/// Uniform random derangement by rejection; identity for a single sample.
pub fn make_pairing(batch_size: usize, rng: &mut impl Rng) -> Pairing {
    if batch_size <= 1 {
        return Pairing::identity(batch_size);
    }
    let mut perm: Vec<usize> = (0..batch_size).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Pairing { perm };
        }
    }
}

/// Channel weights as a flat buffer: `[C]` shared or `[B * C]` per sample.
#[derive(Clone, Copy, Debug)]
struct MaskView<'a, T> {
    weights: &'a [T],
    per_sample: bool,
}

impl<T: Real> MaskView<'_, T> {
    fn get(&self, i: usize, c: usize, channels: usize) -> T {
        if self.per_sample {
            self.weights[i * channels + c]
        } else {
            self.weights[c]
        }
    }
}

/// Blend where `m` is exactly 0 or 1 picks one side bitwise.
fn blend<T: Real>(m: T, keep: T, other: T) -> T {
    if m == T::one() {
        keep
    } else if m == T::zero() {
        other
    } else {
        m * keep + (T::one() - m) * other
    }
}

/// Population mean and standard deviation of one map.
fn map_stats<T: Real>(x: &[T]) -> (T, T) {
    let n = T::of(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    batch: usize,
    channels: usize,
    spatial: usize,
}

impl Dims {
    fn slot(&self, i: usize, c: usize) -> std::ops::Range<usize> {
        let base = (i * self.channels + c) * self.spatial;
        base..base + self.spatial
    }
}

fn do_forward<T: Real>(x: &[T], d: Dims, mask: MaskView<'_, T>, perm: &[usize], mode: DoMode) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let eps = T::of(MATCH_EPS);
    for i in 0..d.batch {
        let j = perm[i];
        for c in 0..d.channels {
            let m = mask.get(i, c, d.channels);
            let xi = &x[d.slot(i, c)];
            let xj = &x[d.slot(j, c)];
            let o = &mut out[d.slot(i, c)];
            if m == T::one() {
                o.copy_from_slice(xi);
                continue;
            }
            match mode {
                DoMode::Exchange => {
                    for ((o, &a), &b) in o.iter_mut().zip(xi).zip(xj) {
                        *o = blend(m, a, b);
                    }
                }
                DoMode::Match => {
                    let (mu_i, sd_i) = map_stats(xi);
                    let (mu_j, sd_j) = map_stats(xj);
                    let k = sd_j / (sd_i + eps);
                    for (o, &a) in o.iter_mut().zip(xi) {
                        *o = blend(m, a, (a - mu_i) * k + mu_j);
                    }
                }
            }
        }
    }
    out
}

struct DoOp {
    dims: Dims,
    perm: Vec<usize>,
    per_sample: bool,
    mode: DoMode,
}

impl<T: Real> CustomOp<T> for DoOp {
    fn name(&self) -> &'static str {
        match self.mode {
            DoMode::Exchange => "exchange_do",
            DoMode::Match => "match_do",
        }
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        let mask = MaskView {
            weights: inputs[1].data(),
            per_sample: self.per_sample,
        };
        let d = self.dims;
        let mut dx = vec![T::zero(); x.len()];
        let mut dm = vec![T::zero(); inputs[1].numel()];
        let eps = T::of(MATCH_EPS);
        let n = T::of(d.spatial as f64);
        for i in 0..d.batch {
            let j = self.perm[i];
            for c in 0..d.channels {
                let m = mask.get(i, c, d.channels);
                let (ri, rj) = (d.slot(i, c), d.slot(j, c));
                let gi = &g[ri.clone()];
                let mslot = if self.per_sample { i * d.channels + c } else { c };
                match self.mode {
                    DoMode::Exchange => {
                        let mut acc = T::zero();
                        for s in 0..d.spatial {
                            let (a, b) = (x[ri.start + s], x[rj.start + s]);
                            acc += gi[s] * (a - b);
                            dx[ri.start + s] += m * gi[s];
                            dx[rj.start + s] += (T::one() - m) * gi[s];
                        }
                        dm[mslot] += acc;
                    }
                    DoMode::Match => {
                        let xi = &x[ri.clone()];
                        let xj = &x[rj.clone()];
                        let (mu_i, sd_i) = map_stats(xi);
                        let (mu_j, sd_j) = map_stats(xj);
                        let den = sd_i + eps;
                        let mut acc = T::zero();
                        let mut sum_dz = T::zero();
                        let mut sum_dz_hat = T::zero();
                        let mut sum_dhat = T::zero();
                        let mut sum_dhat_c = T::zero();
                        for s in 0..d.spatial {
                            let hat = (xi[s] - mu_i) / den;
                            let z = hat * sd_j + mu_j;
                            acc += gi[s] * (xi[s] - z);
                            dx[ri.start + s] += m * gi[s];
                            let dz = (T::one() - m) * gi[s];
                            sum_dz += dz;
                            sum_dz_hat += dz * hat;
                            let dhat = dz * sd_j;
                            sum_dhat += dhat;
                            sum_dhat_c += dhat * (xi[s] - mu_i);
                        }
                        dm[mslot] += acc;
                        // Through the own-sample standardization.
                        let mean_dhat = sum_dhat / n;
                        for s in 0..d.spatial {
                            let centered = xi[s] - mu_i;
                            let mut v = (g[ri.start + s] * (T::one() - m) * sd_j - mean_dhat) / den;
                            if sd_i > T::zero() {
                                v -= centered * sum_dhat_c / (n * sd_i * den * den);
                            }
                            dx[ri.start + s] += v;
                        }
                        // Through the partner's mean and standard deviation.
                        for s in 0..d.spatial {
                            let mut v = sum_dz / n;
                            if sd_j > T::zero() {
                                v += sum_dz_hat * (xj[s] - mu_j) / (n * sd_j);
                            }
                            dx[rj.start + s] += v;
                        }
                    }
                }
            }
        }
        vec![Some(dx), Some(dm)]
    }
}

/// Records a do-operation on the tape. `x` is `[B, C, H, W]`; `mask` is
/// `[C]` (shared) or `[B, C]` (per sample).
pub fn do_operation<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    mask: Var,
    pairing: &Pairing,
    mode: DoMode,
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ms = tape.shape(mask).to_vec();
    if xs.len() != 4 || xs[0] == 0 {
        return Err(Error::invalid(format!(
            "do-operation needs a non-empty [B, C, H, W] batch, got {xs:?}"
        )));
    }
    let dims = Dims {
        batch: xs[0],
        channels: xs[1],
        spatial: xs[2] * xs[3],
    };
    let per_sample = match ms.as_slice() {
        [c] if *c == dims.channels => false,
        [b, c] if *b == dims.batch && *c == dims.channels => true,
        _ => return Err(Error::shape("do_operation", &xs, &ms)),
    };
    if pairing.len() != dims.batch {
        return Err(Error::invalid(format!(
            "pairing of {} samples for a batch of {}",
            pairing.len(),
            dims.batch
        )));
    }
    if mode == DoMode::Match && dims.spatial < 2 {
        return Err(Error::invalid(
            "match needs at least two spatial positions per channel",
        ));
    }
    let out = do_forward(
        tape.value(x).data(),
        dims,
        MaskView {
            weights: tape.value(mask).data(),
            per_sample,
        },
        pairing.as_slice(),
        mode,
    );
    let out = Tensor::new(xs, out)?;
    let op = DoOp {
        dims,
        perm: pairing.as_slice().to_vec(),
        per_sample,
        mode,
    };
    Ok(tape.custom(&[x, mask], out, Box::new(op)))
}

fn batch_dims(batch: &[SpectralTensor]) -> Result<Dims> {
    let first = batch
        .first()
        .ok_or_else(|| Error::invalid("do-operation on an empty batch"))?;
    if let Some(bad) = batch.iter().find(|s| s.shape() != first.shape()) {
        return Err(Error::invalid(format!(
            "mixed spectral shapes {:?} and {:?} in one batch",
            first.shape(),
            bad.shape()
        )));
    }
    Ok(Dims {
        batch: batch.len(),
        channels: first.channels(),
        spatial: first.plane_len(),
    })
}

fn mask_weights(mask: &Identification, d: Dims) -> Result<(Vec<f32>, bool)> {
    let check = |len: usize| {
        if len == d.channels {
            Ok(())
        } else {
            Err(Error::ChannelCount {
                expected: d.channels,
                got: len,
            })
        }
    };
    match mask {
        Identification::Shared(m) => {
            check(m.len())?;
            Ok((m.as_weights(), false))
        }
        Identification::Soft(w) => {
            check(w.len())?;
            Ok((w.clone(), false))
        }
        Identification::PerSample(ms) => {
            if ms.len() != d.batch {
                return Err(Error::invalid(format!(
                    "{} per-sample masks for a batch of {}",
                    ms.len(),
                    d.batch
                )));
            }
            let mut w = Vec::with_capacity(d.batch * d.channels);
            for m in ms {
                check(m.len())?;
                w.extend(m.as_weights::<f32>());
            }
            Ok((w, true))
        }
    }
}

fn apply(
    batch: &[SpectralTensor],
    mask: &Identification,
    pairing: &Pairing,
    mode: DoMode,
) -> Result<Vec<SpectralTensor>> {
    let d = batch_dims(batch)?;
    let (weights, per_sample) = mask_weights(mask, d)?;
    if pairing.len() != d.batch {
        return Err(Error::invalid(format!(
            "pairing of {} samples for a batch of {}",
            pairing.len(),
            d.batch
        )));
    }
    if d.batch == 1 {
        warn!("do-operation on a single-sample batch pairs the sample with itself");
    }
    if mode == DoMode::Match && d.spatial < 2 {
        return Err(Error::invalid(
            "match needs at least two spatial positions per channel",
        ));
    }
    let flat: Vec<f32> = batch.iter().flat_map(|s| s.data().iter().copied()).collect();
    let out = do_forward(
        &flat,
        d,
        MaskView {
            weights: &weights,
            per_sample,
        },
        pairing.as_slice(),
        mode,
    );
    let (rows, cols, _) = batch[0].shape();
    out.chunks(d.channels * d.spatial)
        .map(|chunk| SpectralTensor::new(rows, cols, chunk.to_vec()))
        .collect()
}

/// Sample `i` keeps its mask-true channels and takes every other channel
/// wholesale from its partner. Soft weights blend the two.
pub fn exchange_do(
    batch: &[SpectralTensor],
    mask: &Identification,
    pairing: &Pairing,
) -> Result<Vec<SpectralTensor>> {
    apply(batch, mask, pairing, DoMode::Exchange)
}

/// Sample `i` keeps its mask-true channels; every other channel is shifted
/// and scaled to the partner's mean and standard deviation.
pub fn match_do(
    batch: &[SpectralTensor],
    mask: &Identification,
    pairing: &Pairing,
) -> Result<Vec<SpectralTensor>> {
    apply(batch, mask, pairing, DoMode::Match)
}

/// Convenience wrapper for a single shared hard mask.
pub fn do_shared(
    batch: &[SpectralTensor],
    mask: &ChannelMask,
    pairing: &Pairing,
    mode: DoMode,
) -> Result<Vec<SpectralTensor>> {
    apply(batch, &Identification::Shared(mask.clone()), pairing, mode)
}
