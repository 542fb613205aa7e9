//! Training loop and clean evaluation.
//!
//! One step: standardize the batch, run the gate, identify channels, apply
//! the do-operation with probability `p_do`, run the task network and
//! minimize `l_ce + lambda * l_gate + fuse_weight * l_fuse`. The baseline is
//! the same loop with the gate term, fuse term and intervention switched off.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_manifest, resolve_path, Split, SyntheticSample};
use crate::error::{Error, Result};
use crate::gate::{default_fixed_set, select_channels, ChannelMask, GateLossKind, Strategy};
use crate::intervene::{do_operation, make_pairing, DoMode};
use crate::model::{total_loss, FuseLossKind, LossConfig, Mode, ModelConfig, TaskModel, NUM_CLASSES};
use crate::rng::SeedStreams;
use crate::spectrum::{
    cache_read, dct_decompose, hflip_spectrum, ImageTensor, SpectralTensor, SPECTRAL_CHANNELS,
};
use crate::tensor::{read_checkpoint, write_checkpoint, Sgd, Tape, Tensor};

/// Largest tolerated gap between the recorded total and its recombined terms.
pub const LOSS_IDENTITY_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Erm,
    Caudr,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Erm => "ERM",
            Method::Caudr => "CauDR",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "erm" => Ok(Method::Erm),
            "caudr" => Ok(Method::Caudr),
            other => Err(Error::invalid(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Multiplier on `lr` for the gate parameters.
    pub gate_lr_scale: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub mu: f64,
    pub strategy: Strategy,
    pub do_mode: DoMode,
    pub p_do: f64,
    pub seed: u64,
    pub lr_milestones: Vec<f64>,
    pub lr_factor: f64,
    pub gate_loss: GateLossKind,
    pub fuse_loss: FuseLossKind,
    /// Weight on the fuse term: 1 for the full objective, 0 for the baseline.
    pub fuse_weight: f64,
    /// Zigzag-ordered channel indices for the fixed strategy.
    pub fe_set: Option<Vec<usize>>,
    pub hflip: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 5e-4,
            gate_lr_scale: 1.0,
            weight_decay: 1e-4,
            momentum: 0.9,
            batch_size: 96,
            lambda: 0.18,
            mu: 0.4,
            strategy: Strategy::Bae,
            do_mode: DoMode::Exchange,
            p_do: 0.5,
            seed: 0,
            lr_milestones: vec![0.3, 0.6],
            lr_factor: 0.1,
            gate_loss: GateLossKind::Normalized,
            fuse_loss: FuseLossKind::Participation,
            fuse_weight: 1.0,
            fe_set: None,
            hflip: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings sized for a single CPU core and 64x64 synthetic images.
    pub fn desk() -> Self {
        Self {
            steps: 1500,
            lr: DESK_LR,
            gate_lr_scale: DESK_GATE_LR_SCALE,
            batch_size: 32,
            ..Self::default()
        }
    }

    /// The baseline: same loop, no gate penalty, no fuse penalty, no
    /// intervention.
    pub fn erm(&self) -> Self {
        Self {
            lambda: 0.0,
            p_do: 0.0,
            fuse_weight: 0.0,
            ..self.clone()
        }
    }

    /// Reads a TOML or JSON (by extension) config file. Missing fields take
    /// the full-scale defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn for_method(&self, method: Method) -> Self {
        match method {
            Method::Erm => self.erm(),
            Method::Caudr => self.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if !(self.lr > 0.0) || !(self.gate_lr_scale >= 0.0) {
            return bad("lr must be positive and gate_lr_scale non-negative");
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("weight_decay must be >= 0 and momentum in [0, 1)");
        }
        if self.batch_size == 0 || (self.p_do > 0.0 && self.batch_size < 2) {
            return bad("batch_size must be >= 2 when interventions are enabled");
        }
        if !(0.0..=1.0).contains(&self.p_do) {
            return bad("p_do must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.mu) {
            return bad("mu must lie in [0, 1)");
        }
        if !(self.lambda >= 0.0) || !(self.fuse_weight >= 0.0) {
            return bad("lambda and fuse_weight must be non-negative");
        }
        if self.lr_milestones.iter().any(|m| !(*m > 0.0 && *m < 1.0))
            || self.lr_milestones.windows(2).any(|w| w[0] >= w[1])
        {
            return bad("lr milestones must be strictly increasing inside (0, 1)");
        }
        if !(self.lr_factor > 0.0) {
            return bad("lr_factor must be positive");
        }
        self.model.validate()?;
        self.fixed_set()?;
        Ok(())
    }

    pub fn fixed_set(&self) -> Result<ChannelMask> {
        match &self.fe_set {
            Some(idx) => ChannelMask::from_indices(SPECTRAL_CHANNELS, idx.iter().copied()),
            None => Ok(default_fixed_set()),
        }
    }
}

/// Desk-scale base learning rate for training from random initialization.
pub const DESK_LR: f64 = 0.05;
/// Desk-scale gate learning-rate multiplier.
pub const DESK_GATE_LR_SCALE: f64 = 10.0;

/// Piecewise-constant decay by `lr_factor` at each milestone fraction.
pub fn lr_schedule(step: usize, config: &TrainConfig) -> f64 {
    let passed = config
        .lr_milestones
        .iter()
        .filter(|&&m| step as f64 >= m * config.steps as f64)
        .count();
    config.lr * config.lr_factor.powi(passed as i32)
}

/// One decomposed sample with its mirrored twin.
#[derive(Clone, Debug)]
pub struct SpectralSample {
    pub spectrum: SpectralTensor,
    pub flipped: SpectralTensor,
    pub grade: usize,
    pub domain: u32,
}

/// Decomposed dataset held in memory.
#[derive(Clone, Debug, Default)]
pub struct SpectralSet {
    pub samples: Vec<SpectralSample>,
}

impl SpectralSet {
    pub fn from_images<'a>(items: impl IntoIterator<Item = (&'a ImageTensor, usize, u32)>) -> Result<Self> {
        let mut samples = Vec::new();
        for (image, grade, domain) in items {
            if grade >= NUM_CLASSES {
                return Err(Error::invalid(format!("grade {grade} outside 0..5")));
            }
            samples.push(SpectralSample {
                spectrum: dct_decompose(image)?,
                flipped: dct_decompose(&image.hflip())?,
                grade,
                domain,
            });
        }
        let set = Self { samples };
        set.check_shapes()?;
        Ok(set)
    }

    pub fn from_synthetic(data: &[SyntheticSample]) -> Result<Self> {
        Self::from_images(data.iter().map(|s| (&s.image, s.grade, s.domain)))
    }

    /// Loads every manifest entry. Images are center-cropped and resized to
    /// `size`; `.cdct` entries are read from the coefficient cache as is.
    pub fn from_manifest(path: impl AsRef<Path>, size: usize) -> Result<Self> {
        let path = path.as_ref();
        let manifest = load_manifest(path)?;
        let mut samples = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let file = resolve_path(path, r);
            let spectrum = if file.extension().is_some_and(|e| e == "cdct") {
                cache_read(&file)?
            } else {
                dct_decompose(&ImageTensor::load_square(&file, size)?)?
            };
            samples.push(SpectralSample {
                flipped: hflip_spectrum(&spectrum),
                spectrum,
                grade: r.grade,
                domain: r.domain,
            });
        }
        let set = Self { samples };
        set.check_shapes()?;
        Ok(set)
    }

    fn check_shapes(&self) -> Result<()> {
        if let Some(first) = self.samples.first() {
            let shape = first.spectrum.shape();
            if self.samples.iter().any(|s| s.spectrum.shape() != shape) {
                return Err(Error::invalid("samples of different sizes in one dataset"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn domains(&self) -> BTreeSet<u32> {
        self.samples.iter().map(|s| s.domain).collect()
    }

    pub fn indices_in(&self, domains: &BTreeSet<u32>) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| domains.contains(&self.samples[i].domain))
            .collect()
    }

    pub fn indices_of(&self, domain: u32) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].domain == domain)
            .collect()
    }

    /// `(block_rows, block_cols)` of every sample.
    pub fn block_shape(&self) -> Option<(usize, usize)> {
        self.samples
            .first()
            .map(|s| (s.spectrum.block_rows(), s.spectrum.block_cols()))
    }

    /// Per-channel mean and standard deviation over the given samples.
    pub fn channel_stats(&self, indices: &[usize]) -> (Vec<f32>, Vec<f32>) {
        let mut sum = vec![0.0f64; SPECTRAL_CHANNELS];
        let mut sq = vec![0.0f64; SPECTRAL_CHANNELS];
        let mut count = 0usize;
        for &i in indices {
            let s = &self.samples[i].spectrum;
            count += s.plane_len();
            for ch in 0..SPECTRAL_CHANNELS {
                for &v in s.channel(ch) {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n - m * m).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        (mean.into_iter().map(|m| m as f32).collect(), std)
    }

    /// Stacks samples into a `[B, 192, rows, cols]` tensor.
    pub fn batch(&self, indices: &[usize], flips: &[bool]) -> Tensor<f32> {
        let (rows, cols) = self.block_shape().unwrap_or((0, 0));
        let mut data = Vec::with_capacity(indices.len() * SPECTRAL_CHANNELS * rows * cols);
        for (k, &i) in indices.iter().enumerate() {
            let s = &self.samples[i];
            let src = if flips.get(k).copied().unwrap_or(false) {
                &s.flipped
            } else {
                &s.spectrum
            };
            data.extend_from_slice(src.data());
        }
        Tensor::new(vec![indices.len(), SPECTRAL_CHANNELS, rows, cols], data)
            .expect("consistent sample shapes")
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l_ce: f64,
    pub l_gate: f64,
    pub l_fuse: f64,
    pub total: f64,
    pub lr: f64,
    pub mask_popcount: f64,
    pub intervened: bool,
}

pub struct TrainOutcome {
    pub model: TaskModel<f32>,
    pub log: Vec<StepLog>,
    /// Kept-channel count of the mask on a final pass over the training data.
    pub final_popcount: f64,
}

/// Cycles through shuffled epochs of the training indices.
struct BatchSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(pool: Vec<usize>) -> Self {
        Self {
            order: Vec::new(),
            cursor: 0,
            pool,
        }
    }

    fn next(&mut self, size: usize, rng: &mut impl Rng) -> Vec<usize> {
        if self.cursor + size > self.order.len() {
            self.order = self.pool.clone();
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        batch
    }
}

/// Trains on the split's training domains.
pub fn train(config: &TrainConfig, split: &Split, data: &SpectralSet) -> Result<TrainOutcome> {
    train_with(config, split, data, |_| {})
}

/// [`train`] with a callback per logged step.
pub fn train_with(
    config: &TrainConfig,
    split: &Split,
    data: &SpectralSet,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let pool = data.indices_in(&split.train_domains);
    if pool.len() < config.batch_size {
        return Err(Error::invalid(format!(
            "{} training samples for a batch of {}",
            pool.len(),
            config.batch_size
        )));
    }
    let streams = SeedStreams::new(config.seed);
    let mut model = TaskModel::<f32>::new(config.model.clone(), &mut streams.stream("init"))?;
    let (mean, std) = data.channel_stats(&pool);
    model.set_input_stats(&mean, &std)?;
    let mut sgd = Sgd::new(model.store(), config.momentum as f32, config.weight_decay as f32);
    let gate_params: Vec<usize> = model.gate().param_ids().iter().map(|p| p.index()).collect();
    let fixed = config.fixed_set()?;
    let loss_cfg = LossConfig {
        lambda: config.lambda,
        gate_kind: config.gate_loss,
        fuse_kind: config.fuse_loss,
        fuse_weight: config.fuse_weight,
    };
    let mut shuffle = streams.stream("shuffle");
    let mut augment = streams.stream("augment");
    let mut do_rng = streams.stream("do");
    let mut pairing_rng = streams.stream("pairing");
    let mut sampler = BatchSampler::new(pool.clone());
    let spatial = {
        let (r, c) = data.block_shape().unwrap_or((0, 0));
        r * c
    };
    let mut log = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let idx = sampler.next(config.batch_size, &mut shuffle);
        let flips: Vec<bool> = idx
            .iter()
            .map(|_| config.hflip && augment.random_bool(0.5))
            .collect();
        let mut x = data.batch(&idx, &flips);
        model.normalize_input(x.data_mut(), spatial);
        let labels: Vec<usize> = idx.iter().map(|&i| data.samples[i].grade).collect();
        let intervene = do_rng.random_bool(config.p_do);

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let xv = tape.constant(x);
        let gates = model.gate_forward(&mut tape, &bound, xv)?;
        let mask = select_channels(&mut tape, gates, config.strategy, config.mu as f32, &fixed)?;
        let popcount = mask_popcount(tape.value(mask));
        let input = if intervene {
            let pairing = make_pairing(config.batch_size, &mut pairing_rng);
            do_operation(&mut tape, xv, mask, &pairing, config.do_mode)?
        } else {
            xv
        };
        let fwd = model.forward(&mut tape, &bound, input, Mode::Train)?;
        let fuse_w = bound[model.fuse_weight_id().index()];
        let (total, breakdown) = total_loss(&mut tape, fwd.logits, &labels, gates, fuse_w, &loss_cfg)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("{breakdown:?}"),
            });
        }
        let residual = breakdown.identity_residual();
        assert!(
            residual <= LOSS_IDENTITY_TOL * breakdown.total.abs().max(1.0),
            "loss identity broken at step {step}: residual {residual:e}"
        );
        let mut grads = tape.backward(total)?;
        let mut slots: Vec<Option<Vec<f32>>> = bound.iter().map(|&v| grads.take(v)).collect();
        if config.gate_lr_scale != 1.0 {
            let s = config.gate_lr_scale as f32;
            for &g in &gate_params {
                if let Some(v) = slots[g].as_mut() {
                    v.iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        let lr = lr_schedule(step, config);
        sgd.step(model.store_mut(), &slots, lr as f32);
        model.update_running_stats(&fwd.norm_stats)?;

        let entry = StepLog {
            step: step + 1,
            l_ce: breakdown.l_ce,
            l_gate: breakdown.l_gate,
            l_fuse: breakdown.l_fuse,
            total: breakdown.total,
            lr,
            mask_popcount: popcount,
            intervened: intervene,
        };
        if step % 100 == 0 {
            debug!(
                "step {} ce {:.4} gate {:.4} fuse {:.4} popcount {:.1}",
                entry.step, entry.l_ce, entry.l_gate, entry.l_fuse, entry.mask_popcount
            );
        }
        on_step(&entry);
        log.push(entry);
    }
    let final_popcount = final_mask_popcount(&model, config, data, &pool)?;
    info!(
        "trained {} steps on domains {:?}, final popcount {final_popcount:.1}",
        config.steps, split.train_domains
    );
    Ok(TrainOutcome {
        model,
        log,
        final_popcount,
    })
}

fn mask_popcount(mask: &Tensor<f32>) -> f64 {
    let c = *mask.shape().last().unwrap_or(&1);
    let rows = (mask.numel() / c.max(1)).max(1);
    mask.data().iter().filter(|&&m| m > 0.5).count() as f64 / rows as f64
}

/// Mask popcount from batch-mean gates over the whole training pool.
fn final_mask_popcount(
    model: &TaskModel<f32>,
    config: &TrainConfig,
    data: &SpectralSet,
    pool: &[usize],
) -> Result<f64> {
    let gates = gate_activations(model, data, pool)?;
    let c = SPECTRAL_CHANNELS;
    let b = gates.len() / c;
    let gates = Tensor::new(vec![b, c], gates)?;
    let mut tape = Tape::new();
    let g = tape.constant(gates);
    let mask = select_channels(
        &mut tape,
        g,
        config.strategy,
        config.mu as f32,
        &config.fixed_set()?,
    )?;
    Ok(mask_popcount(tape.value(mask)))
}

/// Gate activations `[N * 192]` for the given samples.
pub fn gate_activations(model: &TaskModel<f32>, data: &SpectralSet, indices: &[usize]) -> Result<Vec<f32>> {
    let spatial = data.block_shape().map_or(0, |(r, c)| r * c);
    let mut out = Vec::with_capacity(indices.len() * SPECTRAL_CHANNELS);
    for chunk in indices.chunks(EVAL_BATCH) {
        let mut x = data.batch(chunk, &[]);
        model.normalize_input(x.data_mut(), spatial);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let xv = tape.constant(x);
        let g = model.gate_forward(&mut tape, &bound, xv)?;
        out.extend_from_slice(tape.value(g).data());
    }
    Ok(out)
}

const EVAL_BATCH: usize = 64;

/// Clean evaluation-mode forward pass: `(logits [N * classes], features
/// [N * feature_dim])`.
pub fn predict(
    model: &TaskModel<f32>,
    data: &SpectralSet,
    indices: &[usize],
) -> Result<(Vec<f32>, Vec<f32>)> {
    let spatial = data.block_shape().map_or(0, |(r, c)| r * c);
    let mut logits = Vec::new();
    let mut features = Vec::new();
    for chunk in indices.chunks(EVAL_BATCH) {
        let mut x = data.batch(chunk, &[]);
        model.normalize_input(x.data_mut(), spatial);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let xv = tape.constant(x);
        let out = model.forward(&mut tape, &bound, xv, Mode::Eval)?;
        logits.extend_from_slice(tape.value(out.logits).data());
        features.extend_from_slice(tape.value(out.features).data());
    }
    Ok((logits, features))
}

/// Accuracy summary for one evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub accuracy: f64,
    pub per_class_accuracy: [f64; NUM_CLASSES],
    pub class_counts: [usize; NUM_CLASSES],
    pub n_samples: usize,
}

impl Accuracy {
    pub fn from_predictions(predicted: &[usize], labels: &[usize]) -> Result<Self> {
        if predicted.len() != labels.len() {
            return Err(Error::invalid("prediction and label counts differ"));
        }
        let mut correct = [0usize; NUM_CLASSES];
        let mut counts = [0usize; NUM_CLASSES];
        for (&p, &l) in predicted.iter().zip(labels) {
            if l >= NUM_CLASSES {
                return Err(Error::invalid(format!("label {l} outside 0..5")));
            }
            counts[l] += 1;
            if p == l {
                correct[l] += 1;
            }
        }
        let mut per_class = [0.0; NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            per_class[c] = if counts[c] > 0 {
                correct[c] as f64 / counts[c] as f64
            } else {
                0.0
            };
        }
        let n = labels.len();
        Ok(Self {
            accuracy: if n > 0 {
                correct.iter().sum::<usize>() as f64 / n as f64
            } else {
                0.0
            },
            per_class_accuracy: per_class,
            class_counts: counts,
            n_samples: n,
        })
    }
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f32::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

/// Accuracy of a trained model on the given samples, without intervention.
pub fn evaluate_indices(model: &TaskModel<f32>, data: &SpectralSet, indices: &[usize]) -> Result<Accuracy> {
    let (logits, _) = predict(model, data, indices)?;
    let k = model.config().num_classes;
    let predicted: Vec<usize> = logits.chunks(k).map(argmax).collect();
    let labels: Vec<usize> = indices.iter().map(|&i| data.samples[i].grade).collect();
    Accuracy::from_predictions(&predicted, &labels)
}

/// Accuracy on the split's held-out domain.
pub fn evaluate(model: &TaskModel<f32>, split: &Split, data: &SpectralSet) -> Result<Accuracy> {
    evaluate_indices(model, data, &data.indices_of(split.test_domain))
}

/// Writes the checkpoint and its config sidecar (`<path>.json`).
pub fn save_model(model: &TaskModel<f32>, config: &TrainConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_checkpoint(path, &model.store().named_tensors())?;
    std::fs::write(sidecar(path), serde_json::to_string_pretty(config)?)?;
    Ok(())
}

/// Rebuilds a model from a checkpoint and its config sidecar.
pub fn load_model(path: impl AsRef<Path>) -> Result<(TaskModel<f32>, TrainConfig)> {
    let path = path.as_ref();
    let config: TrainConfig = serde_json::from_str(&std::fs::read_to_string(sidecar(path))?)?;
    let mut model = TaskModel::<f32>::new(config.model.clone(), &mut SeedStreams::new(0).stream("init"))?;
    model.store_mut().load_named(&read_checkpoint(path)?)?;
    Ok((model, config))
}

pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_log(log: &[StepLog], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for entry in log {
        serde_json::to_writer(&mut out, entry)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<StepLog>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
