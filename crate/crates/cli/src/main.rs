use std::collections::BTreeSet;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use caudr::bench::{grid_values, run_benchmark, run_grid, GRID_LAMBDA_RANGE, GRID_LR_RANGE};
use caudr::data::{
    load_manifest, make_lodo_splits, resolve_path, write_manifest, Manifest, SampleRecord, Split, SynthConfig,
};
use caudr::features::dump_features;
use caudr::gate::{ChannelMask, GateLossKind, Strategy};
use caudr::intervene::DoMode;
use caudr::model::{BlockKind, FuseLossKind};
use caudr::spectrum::{
    band_reconstruct, band_swap, cache_read, cache_write, dct_decompose, idct_reconstruct, ImageTensor,
    SpectralTensor,
};
use caudr::train::{
    evaluate, evaluate_indices, load_model, save_model, train_with, write_log, Method, SpectralSet,
    TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "caudr",
    version,
    about = "Frequency-channel interventions for domain generalization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-domain benchmark to PNGs plus a manifest.
    SynthGen(SynthGenArgs),
    /// Decompose every manifest image once and write coefficient caches.
    PrecomputeDct(PrecomputeArgs),
    /// Train one model with one domain held out.
    Train(TrainCmd),
    /// Evaluate a checkpoint on a held-out domain.
    Eval(EvalCmd),
    /// Both methods over every leave-one-domain-out split and seed.
    Bench(BenchCmd),
    /// Penultimate features and a 2-D PCA projection as CSV.
    DumpFeatures(DumpCmd),
    /// Rebuild an image from a band of zigzag frequencies.
    Reconstruct(ReconstructCmd),
    /// Held-out accuracy over a lambda by learning-rate grid.
    Grid(GridCmd),
}

#[derive(Args)]
struct DataArgs {
    /// Synthetic benchmark definition (TOML). The built-in four-domain
    /// benchmark is used when neither this nor --manifest is given.
    #[arg(long, conflicts_with = "manifest")]
    synth: Option<PathBuf>,
    /// CSV manifest of images or `.cdct` coefficient caches.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Side length manifest images are cropped and resized to.
    #[arg(long, default_value_t = 64)]
    image_size: usize,
}

impl DataArgs {
    fn load(&self) -> Result<SpectralSet> {
        let set = match (&self.manifest, &self.synth) {
            (Some(m), _) => SpectralSet::from_manifest(m, self.image_size)
                .with_context(|| format!("loading manifest {}", m.display()))?,
            (None, Some(s)) => SpectralSet::from_synthetic(&SynthConfig::load(s)?.generate()?)?,
            (None, None) => SpectralSet::from_synthetic(&SynthConfig::canonical().generate()?)?,
        };
        info!("{} samples over domains {:?}", set.len(), set.domains());
        Ok(set)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// TOML or JSON training config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the full-scale defaults instead of the desk-scale ones.
    #[arg(long)]
    full_scale: bool,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    gate_lr_scale: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    /// oe, boe, bae or fe.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// exchange or match.
    #[arg(long = "do")]
    do_mode: Option<DoMode>,
    #[arg(long)]
    p_do: Option<f64>,
    #[arg(long, env = "CAUDR_SEED")]
    seed: Option<u64>,
    /// Comma-separated fractions of the step budget.
    #[arg(long, value_delimiter = ',')]
    lr_milestones: Option<Vec<f64>>,
    #[arg(long)]
    lr_factor: Option<f64>,
    /// normalized or raw-sum.
    #[arg(long)]
    gate_loss: Option<GateLossKind>,
    /// participation or mean-abs.
    #[arg(long)]
    fuse_loss: Option<FuseLossKind>,
    #[arg(long)]
    fuse_weight: Option<f64>,
    /// Channel indices for the fixed strategy, inline or a file path.
    #[arg(long)]
    fe_set: Option<String>,
    #[arg(long)]
    no_hflip: bool,
    /// bottleneck or basic.
    #[arg(long)]
    block: Option<BlockKind>,
}

impl TrainArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match (&self.config, self.full_scale) {
            (Some(p), _) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            (None, true) => TrainConfig::default(),
            (None, false) => TrainConfig::desk(),
        };
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f.clone() { c.$f = v; })*};
        }
        set!(
            steps,
            lr,
            gate_lr_scale,
            weight_decay,
            momentum,
            batch_size,
            lambda,
            mu,
            strategy,
            do_mode,
            p_do,
            seed
        );
        set!(lr_milestones, lr_factor, gate_loss, fuse_loss, fuse_weight);
        if let Some(b) = self.block {
            c.model.block = b;
        }
        if self.no_hflip {
            c.hflip = false;
        }
        if let Some(spec) = &self.fe_set {
            let text = if Path::new(spec).is_file() {
                fs::read_to_string(spec)?
            } else {
                spec.clone()
            };
            let mask = ChannelMask::parse_index_list(&text)?;
            c.fe_set = Some((0..mask.len()).filter(|&i| mask.is_invariant(i)).collect());
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct SynthGenArgs {
    /// Benchmark definition; defaults to the built-in four-domain one.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_per_cell: Option<usize>,
    /// Per-domain class counts follow the reference device ratios.
    #[arg(long)]
    reference_ratios: bool,
}

#[derive(Args)]
struct PrecomputeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    held_out: u32,
    /// caudr or erm.
    #[arg(long, default_value = "caudr")]
    method: Method,
    /// Checkpoint path; the config is written next to it as `<out>.json`.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines step log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    held_out: u32,
}

#[derive(Args)]
struct BenchCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Machine-readable report.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Rendered text table.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args)]
struct DumpCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Restrict to these domains.
    #[arg(long, value_delimiter = ',')]
    domains: Option<Vec<u32>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReconstructCmd {
    /// PNG/JPEG image or `.cdct` cache.
    #[arg(long)]
    input: PathBuf,
    /// Inclusive zigzag band, `lo:hi`.
    #[arg(long, value_parser = parse_band)]
    band: (usize, usize),
    #[arg(long)]
    out: PathBuf,
    /// Crop and resize image inputs to this side length.
    #[arg(long)]
    size: Option<usize>,
    /// Keep the band of the input and take every other frequency from this
    /// image, written to --partner-out.
    #[arg(long, requires = "partner_out")]
    partner: Option<PathBuf>,
    #[arg(long)]
    partner_out: Option<PathBuf>,
    /// Clamp output pixels to [0, 1] before writing.
    #[arg(long)]
    clamp: bool,
}

#[derive(Args)]
struct GridCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    held_out: u32,
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    lrs: Option<Vec<f64>>,
    /// Points per axis when --lambdas or --lrs is omitted.
    #[arg(long, default_value_t = 4)]
    points: usize,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    json: Option<PathBuf>,
}

fn parse_band(s: &str) -> std::result::Result<(usize, usize), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected lo:hi")?;
    let lo: usize = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: usize = hi.trim().parse().map_err(|e| format!("{e}"))?;
    if lo > hi || hi > 63 {
        return Err(format!("band {lo}:{hi} must satisfy lo <= hi <= 63"));
    }
    Ok((lo, hi))
}

fn split_for(data: &SpectralSet, held_out: u32) -> Result<Split> {
    make_lodo_splits(&data.domains())?
        .into_iter()
        .find(|s| s.test_domain == held_out)
        .with_context(|| format!("domain {held_out} is not in the dataset"))
}

fn synth_gen(a: &SynthGenArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::canonical(),
    };
    if let Some(n) = a.n_per_cell {
        cfg.n_per_cell = n;
    }
    cfg.reference_class_ratios |= a.reference_ratios;
    cfg.validate()?;
    let samples = cfg.generate()?;
    let mut records = Vec::with_capacity(samples.len());
    let mut counters = std::collections::HashMap::new();
    for s in &samples {
        let idx = counters.entry((s.domain, s.grade)).or_insert(0usize);
        let rel = format!("domain{}/g{}_{:04}.png", s.domain, s.grade, idx);
        *idx += 1;
        let path = a.out.join(&rel);
        fs::create_dir_all(path.parent().expect("nested path"))?;
        s.image.save_png(&path)?;
        records.push(SampleRecord {
            image_path: rel,
            grade: s.grade,
            domain: s.domain,
        });
    }
    let domains: BTreeSet<u32> = cfg.domains.iter().map(|d| d.id).collect();
    let manifest_path = a.out.join("manifest.csv");
    write_manifest(&Manifest::new(domains, records)?, &manifest_path)?;
    println!("wrote {} images and {}", samples.len(), manifest_path.display());
    Ok(())
}

fn precompute(a: &PrecomputeArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    fs::create_dir_all(&a.out)?;
    let mut records = Vec::with_capacity(manifest.records.len());
    for (i, r) in manifest.records.iter().enumerate() {
        let img = ImageTensor::load_square(resolve_path(&a.manifest, r), a.image_size)
            .with_context(|| format!("decoding {}", r.image_path))?;
        let stem = Path::new(&r.image_path)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("img");
        let rel = format!("{i:06}_{stem}.cdct");
        cache_write(&dct_decompose(&img)?, a.out.join(&rel))?;
        records.push(SampleRecord {
            image_path: rel,
            ..r.clone()
        });
    }
    let path = a.out.join("manifest.csv");
    write_manifest(&Manifest::new(manifest.domains.clone(), records)?, &path)?;
    println!(
        "cached {} spectra; manifest at {}",
        manifest.records.len(),
        path.display()
    );
    Ok(())
}

fn train_cmd(a: &TrainCmd) -> Result<()> {
    let cfg = a.train.resolve()?.for_method(a.method);
    let data = a.data.load()?;
    let split = split_for(&data, a.held_out)?;
    let out = train_with(&cfg, &split, &data, |l| {
        if l.step % 100 == 0 {
            info!(
                "step {} total {:.4} ce {:.4} popcount {:.1}",
                l.step, l.total, l.l_ce, l.mask_popcount
            );
        }
    })?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_model(&out.model, &cfg, &a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log.jsonl"));
    write_log(&out.log, &log_path)?;
    let test = evaluate(&out.model, &split, &data)?;
    let train_acc = evaluate_indices(&out.model, &data, &data.indices_in(&split.train_domains))?;
    let summary = serde_json::json!({
        "method": a.method.to_string(),
        "held_out": a.held_out,
        "test": test,
        "train_accuracy": train_acc.accuracy,
        "final_popcount": out.final_popcount,
        "checkpoint": a.out,
        "log": log_path,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn eval_cmd(a: &EvalCmd) -> Result<()> {
    let (model, _) =
        load_model(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let data = a.data.load()?;
    let split = split_for(&data, a.held_out)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&evaluate(&model, &split, &data)?)?
    );
    Ok(())
}

fn bench_cmd(a: &BenchCmd) -> Result<()> {
    let cfg = a.train.resolve()?;
    let data = a.data.load()?;
    let bench = run_benchmark(&cfg, &a.seeds, &data, |r| {
        info!(
            "{} domain {} seed {}: {:.4}",
            r.label, r.test_domain, r.seed, r.test_accuracy
        )
    })?;
    let table = bench.table();
    print!("{table}");
    if let Some(p) = &a.table {
        fs::write(p, &table)?;
    }
    if let Some(p) = &a.json {
        fs::write(p, serde_json::to_string_pretty(&bench)?)?;
    }
    Ok(())
}

fn dump_cmd(a: &DumpCmd) -> Result<()> {
    let (model, _) = load_model(&a.checkpoint)?;
    let data = a.data.load()?;
    let indices: Vec<usize> = match &a.domains {
        Some(d) => data.indices_in(&d.iter().copied().collect()),
        None => (0..data.len()).collect(),
    };
    let mut out = BufWriter::new(fs::File::create(&a.out)?);
    let n = dump_features(&model, &data, &indices, &mut out)?;
    println!("wrote {n} rows to {}", a.out.display());
    Ok(())
}

fn load_spectrum(path: &Path, size: Option<usize>) -> Result<SpectralTensor> {
    if path.extension().is_some_and(|e| e == "cdct") {
        return Ok(cache_read(path)?);
    }
    let img = match size {
        Some(s) => ImageTensor::load_square(path, s)?,
        None => ImageTensor::load(path)?,
    };
    Ok(dct_decompose(&img)?)
}

fn write_image(img: ImageTensor, clamp: bool, path: &Path) -> Result<()> {
    let img = if clamp { img.clamped() } else { img };
    img.save_png(path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn reconstruct_cmd(a: &ReconstructCmd) -> Result<()> {
    let spec = load_spectrum(&a.input, a.size)?;
    let (lo, hi) = a.band;
    write_image(band_reconstruct(&spec, lo, hi)?, a.clamp, &a.out)?;
    if let (Some(partner), Some(out)) = (&a.partner, &a.partner_out) {
        let donor = load_spectrum(partner, a.size.or(Some(spec.block_rows() * 8)))?;
        if donor.shape() != spec.shape() {
            bail!(
                "partner spectrum {:?} differs from input {:?}",
                donor.shape(),
                spec.shape()
            );
        }
        write_image(
            idct_reconstruct(&band_swap(&spec, &donor, lo, hi)?)?,
            a.clamp,
            out,
        )?;
    }
    Ok(())
}

fn grid_cmd(a: &GridCmd) -> Result<()> {
    let cfg = a.train.resolve()?;
    let data = a.data.load()?;
    let split = split_for(&data, a.held_out)?;
    let lambdas = a
        .lambdas
        .clone()
        .unwrap_or_else(|| grid_values(GRID_LAMBDA_RANGE.0, GRID_LAMBDA_RANGE.1, a.points, false));
    let lrs = a
        .lrs
        .clone()
        .unwrap_or_else(|| grid_values(GRID_LR_RANGE.0, GRID_LR_RANGE.1, a.points, true));
    let points = run_grid(&cfg, &lambdas, &lrs, &split, &a.seeds, &data)?;
    println!("{:>8} {:>10} {:>9} {:>9}", "lambda", "lr", "accuracy", "popcount");
    for p in &points {
        println!(
            "{:>8.3} {:>10.2e} {:>9.4} {:>9.1}",
            p.lambda, p.lr, p.accuracy_mean, p.popcount_mean
        );
    }
    if let Some(path) = &a.json {
        fs::write(path, serde_json::to_string_pretty(&points)?)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::SynthGen(a) => synth_gen(&a),
        Command::PrecomputeDct(a) => precompute(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Bench(a) => bench_cmd(&a),
        Command::DumpFeatures(a) => dump_cmd(&a),
        Command::Reconstruct(a) => reconstruct_cmd(&a),
        Command::Grid(a) => grid_cmd(&a),
    }
}
