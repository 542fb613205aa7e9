//! Multi-domain datasets: CSV manifests for real corpora, a synthetic
//! generator with device-style appearance shifts, and leave-one-domain-out
//! splits.

use std::collections::{BTreeSet, HashSet};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NUM_CLASSES;
use crate::rng::SeedStreams;
use crate::spectrum::{forward_blocks, inverse_blocks, ImageTensor, BLOCK, COLORS, FREQS};

/// Class counts G0..G4 for four imaging devices; rows are domains 1..4.
pub const REFERENCE_CLASS_COUNTS: [[usize; NUM_CLASSES]; 4] = [
    [168, 25, 157, 86, 58],
    [918, 222, 396, 352, 112],
    [631, 24, 365, 73, 58],
    [711, 6, 110, 349, 261],
];

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_path: String,
    pub grade: usize,
    pub domain: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub domains: BTreeSet<u32>,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn new(domains: BTreeSet<u32>, records: Vec<SampleRecord>) -> Result<Self> {
        let m = Self { domains, records };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.contains(&0) {
            return Err(Error::invalid("domain ids start at 1"));
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.grade >= NUM_CLASSES {
                return Err(Error::invalid(format!(
                    "{}: grade {} outside 0..5",
                    r.image_path, r.grade
                )));
            }
            if !self.domains.contains(&r.domain) {
                return Err(Error::invalid(format!(
                    "{}: undeclared domain {}",
                    r.image_path, r.domain
                )));
            }
            if !seen.insert(r.image_path.as_str()) {
                return Err(Error::invalid(format!("duplicate path {}", r.image_path)));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Manifest {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut declared: Option<BTreeSet<u32>> = None;
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        let mut pending = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(list) = comment.trim().strip_prefix("domains:") {
                    let mut set = BTreeSet::new();
                    for tok in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                        let id: u32 = tok
                            .parse()
                            .map_err(|_| err(line_no, format!("bad domain id {tok:?}")))?;
                        if id == 0 {
                            return Err(err(line_no, "domain ids start at 1".into()));
                        }
                        set.insert(id);
                    }
                    declared = Some(set);
                }
                continue;
            }
            if line.eq_ignore_ascii_case("path,grade,domain") {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [path, grade, domain] = fields[..] else {
                return Err(err(line_no, format!("expected 3 fields, got {}", fields.len())));
            };
            if path.is_empty() {
                return Err(err(line_no, "empty path".into()));
            }
            let grade: usize = grade
                .parse()
                .map_err(|_| err(line_no, format!("bad grade {grade:?}")))?;
            if grade >= NUM_CLASSES {
                return Err(err(line_no, format!("grade {grade} outside 0..5")));
            }
            let domain: u32 = domain
                .parse()
                .map_err(|_| err(line_no, format!("bad domain {domain:?}")))?;
            if domain == 0 {
                return Err(err(line_no, "domain ids start at 1".into()));
            }
            if !seen.insert(path.to_string()) {
                return Err(err(line_no, format!("duplicate path {path}")));
            }
            pending.push((line_no, domain));
            records.push(SampleRecord {
                image_path: path.to_string(),
                grade,
                domain,
            });
        }
        let domains = match declared {
            Some(set) => {
                if let Some(&(line, d)) = pending.iter().find(|(_, d)| !set.contains(d)) {
                    return Err(err(line, format!("domain {d} not in the declared set")));
                }
                set
            }
            None => {
                if !records.is_empty() {
                    warn!(
                        "{}: no '# domains:' header, using the domains present",
                        origin.display()
                    );
                }
                records.iter().map(|r| r.domain).collect()
            }
        };
        if records.is_empty() {
            warn!("{}: manifest has no samples", origin.display());
        }
        Ok(Self { domains, records })
    }

    /// Canonical text form.
    pub fn to_text(&self) -> String {
        let ids: Vec<String> = self.domains.iter().map(u32::to_string).collect();
        let mut out = format!("# domains: {}\npath,grade,domain\n", ids.join(","));
        for r in &self.records {
            let _ = writeln!(out, "{},{},{}", r.image_path, r.grade, r.domain);
        }
        out
    }

    pub fn domain_records(&self, domain: u32) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.domain == domain)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    Manifest::parse(&text, path)
}

pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    manifest.validate()?;
    std::fs::write(path, manifest.to_text())?;
    Ok(())
}

/// Image path of a record, relative paths taken from the manifest directory.
pub fn resolve_path(manifest_path: &Path, record: &SampleRecord) -> PathBuf {
    let p = Path::new(&record.image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_domains: BTreeSet<u32>,
    pub test_domain: u32,
}

impl Split {
    pub fn new(train_domains: BTreeSet<u32>, test_domain: u32) -> Result<Self> {
        if train_domains.contains(&test_domain) {
            return Err(Error::invalid(format!(
                "test domain {test_domain} is also a training domain"
            )));
        }
        if train_domains.is_empty() {
            return Err(Error::invalid("split without training domains"));
        }
        Ok(Self {
            train_domains,
            test_domain,
        })
    }

    pub fn is_train(&self, domain: u32) -> bool {
        self.train_domains.contains(&domain)
    }
}

/// One split per domain, holding that domain out.
pub fn make_lodo_splits(domains: &BTreeSet<u32>) -> Result<Vec<Split>> {
    if domains.len() < 2 {
        return Err(Error::invalid(format!(
            "leave-one-domain-out needs at least 2 domains, got {}",
            domains.len()
        )));
    }
    domains
        .iter()
        .map(|&test| Split::new(domains.iter().copied().filter(|&d| d != test).collect(), test))
        .collect()
}

/// Appearance of one synthetic imaging device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub domain_id: u32,
    /// Multiplicative gain per zigzag frequency, applied in every color.
    pub band_gains: Vec<f32>,
    /// Additive RGB offset.
    pub color_shift: [f32; 3],
    pub noise_sigma: f32,
    /// Seeds the class patterns; domains with equal seeds share them.
    pub seed: u64,
}

impl SyntheticDomainSpec {
    pub fn identity(domain_id: u32, seed: u64) -> Self {
        Self {
            domain_id,
            band_gains: vec![1.0; FREQS],
            color_shift: [0.0; 3],
            noise_sigma: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.domain_id == 0 {
            return Err(Error::Config("domain ids start at 1".into()));
        }
        if self.band_gains.len() != FREQS {
            return Err(Error::Config(format!(
                "domain {}: {} band gains, expected {FREQS}",
                self.domain_id,
                self.band_gains.len()
            )));
        }
        if self.band_gains.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
            return Err(Error::Config(format!(
                "domain {}: gains must be positive",
                self.domain_id
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "domain {}: negative noise sigma",
                self.domain_id
            )));
        }
        if self.color_shift.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config(format!(
                "domain {}: non-finite color shift",
                self.domain_id
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.band_gains.iter().all(|&g| g == 1.0) && self.color_shift == [0.0; 3] && self.noise_sigma == 0.0
    }
}

/// A domain as written in a benchmark file. Gains are given as inclusive
/// zigzag ranges `[lo, hi, gain]`; frequencies not covered keep gain 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub id: u32,
    pub seed: u64,
    #[serde(default)]
    pub gain_bands: Vec<(usize, usize, f32)>,
    #[serde(default)]
    pub color_shift: [f32; 3],
    #[serde(default)]
    pub noise_sigma: f32,
}

impl DomainEntry {
    pub fn to_spec(&self) -> Result<SyntheticDomainSpec> {
        let mut gains = vec![1.0; FREQS];
        for &(lo, hi, g) in &self.gain_bands {
            if lo > hi || hi >= FREQS {
                return Err(Error::Config(format!("domain {}: bad band {lo}..={hi}", self.id)));
            }
            gains[lo..=hi].iter_mut().for_each(|x| *x = g);
        }
        let spec = SyntheticDomainSpec {
            domain_id: self.id,
            band_gains: gains,
            color_shift: self.color_shift,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// A synthetic benchmark definition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_per_cell")]
    pub n_per_cell: usize,
    /// Draw per-domain class counts from the reference device ratios
    /// instead of a balanced grid.
    #[serde(default)]
    pub reference_class_ratios: bool,
    pub domains: Vec<DomainEntry>,
}

fn default_image_size() -> usize {
    64
}

fn default_per_cell() -> usize {
    40
}

/// The checked-in four-domain benchmark definition.
pub const CANONICAL_BENCHMARK: &str = include_str!("../benchmarks/synth4.toml");

impl SynthConfig {
    pub fn canonical() -> Self {
        Self::from_toml(CANONICAL_BENCHMARK).expect("canonical benchmark parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(BLOCK) {
            return Err(Error::Config(format!(
                "image_size {} is not a positive multiple of 8",
                self.image_size
            )));
        }
        if self.n_per_cell == 0 {
            return Err(Error::Config("n_per_cell must be positive".into()));
        }
        let mut ids = HashSet::new();
        for d in &self.domains {
            if !ids.insert(d.id) {
                return Err(Error::Config(format!("domain {} listed twice", d.id)));
            }
            d.to_spec()?;
        }
        Ok(())
    }

    pub fn specs(&self) -> Result<Vec<SyntheticDomainSpec>> {
        self.domains.iter().map(DomainEntry::to_spec).collect()
    }

    /// Number of samples per class for each domain, in domain order.
    pub fn class_counts(&self) -> Vec<[usize; NUM_CLASSES]> {
        let total = self.n_per_cell * NUM_CLASSES;
        (0..self.domains.len())
            .map(|i| {
                if !self.reference_class_ratios {
                    return [self.n_per_cell; NUM_CLASSES];
                }
                let row = REFERENCE_CLASS_COUNTS[i % REFERENCE_CLASS_COUNTS.len()];
                let sum: usize = row.iter().sum();
                let mut counts = [0; NUM_CLASSES];
                for (c, &n) in counts.iter_mut().zip(&row) {
                    *c = ((n * total) as f64 / sum as f64).round().max(1.0) as usize;
                }
                counts
            })
            .collect()
    }

    pub fn generate(&self) -> Result<Vec<SyntheticSample>> {
        let specs = self.specs()?;
        let counts = self.class_counts();
        let mut out = Vec::new();
        for (spec, counts) in specs.iter().zip(&counts) {
            for (class, &n) in counts.iter().enumerate() {
                for idx in 0..n {
                    out.push(synth_sample(spec, class, idx, self.image_size)?);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: ImageTensor,
    pub grade: usize,
    pub domain: u32,
}

/// `n_per_cell` samples of every class for every domain, domain-major then
/// class-major.
pub fn synth_generate(
    specs: &[SyntheticDomainSpec],
    classes: usize,
    n_per_cell: usize,
    image_size: usize,
) -> Result<Vec<SyntheticSample>> {
    if classes == 0 || classes > NUM_CLASSES {
        return Err(Error::invalid(format!("{classes} classes, supported 1..=5")));
    }
    if image_size == 0 || !image_size.is_multiple_of(BLOCK) {
        return Err(Error::invalid(format!(
            "image size {image_size} is not a multiple of 8"
        )));
    }
    let mut out = Vec::with_capacity(specs.len() * classes * n_per_cell);
    for spec in specs {
        spec.validate()?;
        for class in 0..classes {
            for idx in 0..n_per_cell {
                out.push(synth_sample(spec, class, idx, image_size)?);
            }
        }
    }
    Ok(out)
}

fn synth_sample(
    spec: &SyntheticDomainSpec,
    class: usize,
    idx: usize,
    size: usize,
) -> Result<SyntheticSample> {
    let streams = SeedStreams::new(spec.seed);
    let mut pattern_rng = streams.indexed("pattern", ((class as u64) << 32) | idx as u64);
    let base = base_pattern(class, size, &mut pattern_rng)?;
    let image = if spec.is_identity() {
        base
    } else {
        let mut noise_rng = streams.indexed(
            "noise",
            ((spec.domain_id as u64) << 48) ^ ((class as u64) << 32) ^ idx as u64,
        );
        apply_domain(&base, spec, &mut noise_rng)?
    };
    Ok(SyntheticSample {
        image,
        grade: class,
        domain: spec.domain_id,
    })
}

/// Band gains in DCT space, then color shift, pixel noise and clamping.
pub fn apply_domain(
    base: &ImageTensor,
    spec: &SyntheticDomainSpec,
    rng: &mut impl Rng,
) -> Result<ImageTensor> {
    spec.validate()?;
    let (h, w) = (base.height(), base.width());
    let pixels: Vec<f64> = base.data().iter().map(|&v| v as f64).collect();
    let mut coefs = forward_blocks(&pixels, h, w)?;
    let plane = (h / BLOCK) * (w / BLOCK);
    for color in 0..COLORS {
        for (k, &g) in spec.band_gains.iter().enumerate() {
            let ch = &mut coefs[(color * FREQS + k) * plane..][..plane];
            ch.iter_mut().for_each(|c| *c *= g as f64);
        }
    }
    let pixels = inverse_blocks(&coefs, h / BLOCK, w / BLOCK)?;
    let noise = Normal::new(0.0, spec.noise_sigma as f64).map_err(|e| Error::Config(e.to_string()))?;
    let data = pixels
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let n = if spec.noise_sigma > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            (v + spec.color_shift[i % COLORS] as f64 + n).clamp(0.0, 1.0) as f32
        })
        .collect();
    ImageTensor::new(h, w, data)
}

struct Pose {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    scale: f64,
}

impl Pose {
    /// Pattern-frame coordinates of pixel `(y, x)`.
    fn local(&self, y: f64, x: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        (
            (self.cos * dx + self.sin * dy) / self.scale,
            (-self.sin * dx + self.cos * dy) / self.scale,
        )
    }
}

fn gauss(u: f64, v: f64, cu: f64, cv: f64, sigma: f64) -> f64 {
    let d2 = (u - cu).powi(2) + (v - cv).powi(2);
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Soft step: 1 well inside, 0 well outside, width about one pixel.
fn inside(d: f64) -> f64 {
    1.0 / (1.0 + (d * 2.0).exp())
}

fn shape_intensity(class: usize, u: f64, v: f64) -> f64 {
    match class {
        0 => gauss(u, v, 0.0, 0.0, 9.0),
        1 => {
            let r = (u * u + v * v).sqrt();
            inside((r - 15.0).abs() - 3.0)
        }
        2 => gauss(u, v, -12.0, 0.0, 6.0).max(gauss(u, v, 12.0, 0.0, 6.0)),
        3 => (0..3)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / 3.0 - PI / 2.0;
                gauss(u, v, 14.0 * a.cos(), 14.0 * a.sin(), 5.0)
            })
            .fold(0.0, f64::max),
        _ => {
            let bar = |a: f64, b: f64| inside((a.abs() - 20.0).max(b.abs() - 3.0));
            bar(u, v).max(bar(v, u))
        }
    }
}

/// One class pattern at a random pose, with class-independent fine texture.
pub fn base_pattern(class: usize, size: usize, rng: &mut impl Rng) -> Result<ImageTensor> {
    if class >= NUM_CLASSES {
        return Err(Error::invalid(format!("class {class} outside 0..5")));
    }
    let half = size as f64 / 2.0;
    let unit = size as f64 / 64.0;
    let theta = rng.random_range(0.0..2.0 * PI);
    let pose = Pose {
        cx: half + rng.random_range(-6.0..6.0) * unit,
        cy: half + rng.random_range(-6.0..6.0) * unit,
        cos: theta.cos(),
        sin: theta.sin(),
        scale: rng.random_range(0.85..1.15) * unit,
    };
    let background = rng.random_range(0.15..0.25);
    let amplitude = rng.random_range(0.35..0.45);
    let tint = [1.0, 0.8, 0.6];
    let gratings: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let period = rng.random_range(2.0..5.0) * unit;
            let angle = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.01..0.025);
            (
                2.0 * PI * angle.cos() / period,
                2.0 * PI * angle.sin() / period,
                phase,
                amp,
            )
        })
        .collect();
    ImageTensor::from_fn(size, size, |y, x, c| {
        let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
        let (u, v) = pose.local(yf, xf);
        let texture: f64 = gratings
            .iter()
            .map(|&(ky, kx, ph, a)| a * (ky * yf + kx * xf + ph).sin())
            .sum();
        let value = background + tint[c] * amplitude * shape_intensity(class, u, v) + texture;
        value.clamp(0.0, 1.0) as f32
    })
}

/// Horizontal flip with probability one half. Returns whether it flipped.
pub fn augment_hflip(image: &ImageTensor, rng: &mut impl Rng) -> (ImageTensor, bool) {
    if rng.random_bool(0.5) {
        (image.hflip(), true)
    } else {
        (image.clone(), false)
    }
}
