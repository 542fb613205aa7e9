//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any hard criterion fails.
//!
//! `ACCEPTANCE_ONLY=1,2,5` restricts the run to the listed criteria.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use caudr::bench::{mean_std, render_table, run_benchmark, run_protocol, EvalReport, RunRecord};
use caudr::data::{Split, SynthConfig};
use caudr::gate::{identify_channels, select_channels, ChannelMask, GateOutput, Identification, Strategy};
use caudr::intervene::{do_operation, exchange_do, make_pairing, match_do, DoMode, Pairing, MATCH_EPS};
use caudr::model::{fuse_loss_value, FuseLossKind};
use caudr::spectrum::{
    dct_decompose, forward_blocks, idct_reconstruct, inverse_blocks, ImageTensor, SpectralTensor,
    SPECTRAL_CHANNELS,
};
use caudr::tensor::{Tape, Tensor};
use caudr::train::{save_model, train, write_log, SpectralSet, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smallest accepted gap between the two methods' leave-one-domain-out
/// averages on the canonical benchmark, in accuracy (fraction) units.
const MIN_MARGIN: f64 = 0.05;
const MIN_TRAIN_ACCURACY: f64 = 0.90;
const SEEDS: [u64; 3] = [0, 1, 2];
const MU_GRID: [f32; 6] = [0.1, 0.2, 0.4, 0.6, 0.8, 0.9];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

struct Suite {
    data: Option<SpectralSet>,
    exchange_runs: Option<Vec<RunRecord>>,
}

impl Suite {
    fn data(&mut self) -> &SpectralSet {
        self.data.get_or_insert_with(|| {
            let samples = SynthConfig::canonical()
                .generate()
                .expect("canonical benchmark generates");
            SpectralSet::from_synthetic(&samples).expect("canonical benchmark decomposes")
        })
    }
}

fn held_out(domain: u32, data: &SpectralSet) -> Split {
    let train: BTreeSet<u32> = data.domains().into_iter().filter(|&d| d != domain).collect();
    Split::new(train, domain).expect("valid split")
}

fn random_image(rng: &mut ChaCha8Rng) -> ImageTensor {
    ImageTensor::new(64, 64, (0..64 * 64 * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn dct_round_trip(budget: Duration) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut max_err, mut max_energy, mut max_err64) = (0.0f32, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let img = random_image(&mut rng);
        let spec = dct_decompose(&img).unwrap();
        let back = idct_reconstruct(&spec).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            max_err = max_err.max((a - b).abs());
        }
        let e_pix: f64 = img.data().iter().map(|&v| (v as f64).powi(2)).sum();
        let e_coef: f64 = spec.data().iter().map(|&v| (v as f64).powi(2)).sum();
        max_energy = max_energy.max(((e_pix - e_coef) / e_pix).abs());

        let wide: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
        let c = forward_blocks(&wide, 64, 64).unwrap();
        let back64 = inverse_blocks(&c, 8, 8).unwrap();
        for (a, b) in wide.iter().zip(&back64) {
            max_err64 = max_err64.max((a - b).abs());
        }
    }
    let t = start.elapsed();
    outcome(
        max_err < 1e-4 && max_energy < 1e-5 && max_err64 < 1e-9 && t < budget,
        format!("max round-trip error {max_err:.2e} (f64 {max_err64:.2e}), Parseval relative gap {max_energy:.2e}, {t:.1?}"),
    )
}

fn gradient_suite(budget: Duration) -> Outcome {
    let start = Instant::now();
    let checks = match common::gradient_suite() {
        Ok(c) => c,
        Err(e) => return outcome(false, format!("gradient suite errored: {e}")),
    };
    let t = start.elapsed();
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} {:.2e}", c.name, c.error))
        .collect();
    let worst = checks
        .iter()
        .map(|c| format!("{} {:.1e}", c.name, c.error))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        failed.is_empty() && t < budget,
        if failed.is_empty() {
            format!("{} checks, {t:.1?}: {worst}", checks.len())
        } else {
            format!("failed: {}", failed.join("; "))
        },
    )
}

fn bae_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut monotone = true;
    for trial in 0..50 {
        let b = 2 + trial % 31;
        let values: Vec<f32> = (0..b * SPECTRAL_CHANNELS)
            .map(|_| rng.random_range(0.0005f32..0.9995))
            .collect();
        let gates = GateOutput::new(SPECTRAL_CHANNELS, values.clone()).unwrap();
        let col_mean: Vec<f64> = (0..SPECTRAL_CHANNELS)
            .map(|c| {
                (0..b)
                    .map(|i| values[i * SPECTRAL_CHANNELS + c] as f64)
                    .sum::<f64>()
                    / b as f64
            })
            .collect();
        let mut previous: Option<ChannelMask> = None;
        for &mu in &MU_GRID {
            let Identification::Shared(mask) = identify_channels(&gates, Strategy::Bae, mu, None).unwrap()
            else {
                return outcome(false, "BAE did not produce a shared mask");
            };
            let expected: Vec<bool> = col_mean.iter().map(|&m| m > mu as f64).collect();
            mismatches += mask.bits().iter().zip(&expected).filter(|(a, b)| a != b).count();

            let mut tape = Tape::<f32>::new();
            let g = tape.constant(Tensor::new(vec![b, SPECTRAL_CHANNELS], values.clone()).unwrap());
            let taped = select_channels(
                &mut tape,
                g,
                Strategy::Bae,
                mu,
                &ChannelMask::all(SPECTRAL_CHANNELS, true),
            )
            .unwrap();
            let taped: Vec<bool> = tape.value(taped).data().iter().map(|&v| v > 0.5).collect();
            mismatches += taped.iter().zip(&expected).filter(|(a, b)| a != b).count();

            if let Some(prev) = &previous {
                monotone &= mask.is_subset_of(prev);
            }
            previous = Some(mask);
        }
    }
    outcome(
        mismatches == 0 && monotone,
        format!(
            "50 batches x {} thresholds: {mismatches} mismatched channels, nested masks: {monotone}",
            MU_GRID.len()
        ),
    )
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, rows: usize) -> Vec<SpectralTensor> {
    (0..b)
        .map(|_| {
            let n = rows * rows * SPECTRAL_CHANNELS;
            let scale: f32 = rng.random_range(0.1..3.0);
            SpectralTensor::new(
                rows,
                rows,
                (0..n).map(|_| scale * rng.random_range(-1.0f32..1.0)).collect(),
            )
            .unwrap()
        })
        .collect()
}

fn population_stats(v: &[f32]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    (
        m,
        (v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n).sqrt(),
    )
}

fn intervention_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut involution, mut untouched, mut conserved, mut taped_agree) = (true, true, true, true);
    let (mut match_err, mut raw_err) = (0.0f64, 0.0f64);
    for trial in 0..20 {
        let b = 2 * (1 + trial % 5);
        let batch = random_batch(&mut rng, b, 8);
        let mask = ChannelMask::new((0..SPECTRAL_CHANNELS).map(|_| rng.random_bool(0.4)).collect());
        let id = Identification::Shared(mask.clone());
        let swap = Pairing::new((0..b).map(|i| i ^ 1).collect()).unwrap();
        let once = exchange_do(&batch, &id, &swap).unwrap();
        involution &= exchange_do(&once, &id, &swap).unwrap() == batch;

        let pairing = make_pairing(b, &mut rng);
        let ex = exchange_do(&batch, &id, &pairing).unwrap();
        for ch in 0..SPECTRAL_CHANNELS {
            if mask.is_invariant(ch) {
                untouched &= batch.iter().zip(&ex).all(|(a, o)| {
                    a.channel(ch)
                        .iter()
                        .zip(o.channel(ch))
                        .all(|(x, y)| x.to_bits() == y.to_bits())
                });
            }
            let slices = |set: &[SpectralTensor]| {
                let mut v: Vec<Vec<u32>> = set
                    .iter()
                    .map(|s| s.channel(ch).iter().map(|x| x.to_bits()).collect())
                    .collect();
                v.sort();
                v
            };
            conserved &= slices(&batch) == slices(&ex);
        }

        let ma = match_do(&batch, &id, &pairing).unwrap();
        for (i, o) in ma.iter().enumerate() {
            let partner = &batch[pairing.partner(i)];
            for ch in (0..SPECTRAL_CHANNELS).filter(|&c| !mask.is_invariant(c)) {
                let (pm, ps) = population_stats(partner.channel(ch));
                let own = population_stats(batch[i].channel(ch)).1;
                if ps > 1e-3 && own > 1e-3 {
                    let (om, os) = population_stats(o.channel(ch));
                    let target = ps * own / (own + MATCH_EPS);
                    match_err = match_err.max((pm - om).abs()).max((target - os).abs());
                    raw_err = raw_err.max((ps - os).abs());
                }
            }
        }

        for (mode, expected) in [(DoMode::Exchange, &ex), (DoMode::Match, &ma)] {
            let mut tape = Tape::<f32>::new();
            let stacked: Vec<f32> = batch.iter().flat_map(|s| s.data().to_vec()).collect();
            let x = tape.constant(Tensor::new(vec![b, SPECTRAL_CHANNELS, 8, 8], stacked).unwrap());
            let m = tape.constant(Tensor::new(vec![SPECTRAL_CHANNELS], mask.as_weights::<f32>()).unwrap());
            let out = do_operation(&mut tape, x, m, &pairing, mode).unwrap();
            let flat: Vec<f32> = expected.iter().flat_map(|s| s.data().to_vec()).collect();
            taped_agree &= tape
                .value(out)
                .data()
                .iter()
                .zip(&flat)
                .all(|(a, e)| (a - e).abs() <= 1e-5 * e.abs().max(1.0));
        }
    }
    outcome(
        involution && untouched && conserved && match_err < 1e-4 && taped_agree,
        format!(
            "involution {involution}, invariant channels untouched {untouched}, slices conserved {conserved}, \
             match statistics error {match_err:.2e} (unshrunk std gap {raw_err:.2e}), training path agrees {taped_agree}"
        ),
    )
}

fn loss_identities(suite: &mut Suite) -> Outcome {
    let c = SPECTRAL_CHANNELS;
    let out = 64;
    let uniform = vec![1.0; out * c];
    let mut one_hot = vec![0.0; out * c];
    let mut split = vec![0.0; out * c];
    for o in 0..out {
        one_hot[o * c] = 0.7;
        for k in 0..96 {
            split[o * c + 2 * k] = 0.3;
        }
    }
    let kind = FuseLossKind::Participation;
    let (u, h, s) = (
        fuse_loss_value(&uniform, out, c, kind),
        fuse_loss_value(&one_hot, out, c, kind),
        fuse_loss_value(&split, out, c, kind),
    );
    let analytic = u.abs() < 1e-12 && (h - 0.49479).abs() < 1e-4 && s.abs() < 1e-12;

    let data = suite.data();
    let split4 = held_out(4, data);
    let cfg = TrainConfig {
        steps: 200,
        ..TrainConfig::desk()
    };
    let log = match train(&cfg, &split4, data) {
        Ok(o) => o.log,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let worst = log
        .iter()
        .map(|l| (l.total - (l.l_ce + cfg.lambda * l.l_gate + l.l_fuse)).abs())
        .fold(0.0f64, f64::max);
    outcome(
        analytic && worst <= 1e-6 && log.len() == 200,
        format!("fuse loss uniform {u:.2e}, one-hot {h:.5}, half split {s:.2e}; worst total residual over {} steps {worst:.2e}", log.len()),
    )
}

fn lambda_sparsity(suite: &mut Suite, budget: Duration) -> Outcome {
    let start = Instant::now();
    let data = suite.data();
    let split = held_out(4, data);
    let mut means = Vec::new();
    for lambda in [0.05, 0.8] {
        let mut pops = Vec::new();
        for seed in SEEDS {
            let cfg = TrainConfig {
                lambda,
                seed,
                ..TrainConfig::desk()
            };
            match train(&cfg, &split, data) {
                Ok(o) => pops.push(o.final_popcount),
                Err(e) => return outcome(false, format!("lambda {lambda} seed {seed}: {e}")),
            }
        }
        means.push((lambda, mean_std(&pops).0, pops));
    }
    let t = start.elapsed();
    outcome(
        means[1].1 < means[0].1 && t < budget,
        format!(
            "mean popcount {:.1} at lambda {} ({:?}) vs {:.1} at lambda {} ({:?}), {t:.0?}",
            means[0].1, means[0].0, means[0].2, means[1].1, means[1].0, means[1].2
        ),
    )
}

fn generalization(suite: &mut Suite, budget: Duration) -> Outcome {
    let start = Instant::now();
    let data = suite.data();
    let bench = match run_benchmark(&TrainConfig::desk(), &SEEDS, data, |_| {}) {
        Ok(b) => b,
        Err(e) => return outcome(false, format!("benchmark failed: {e}")),
    };
    let t = start.elapsed();
    println!("{}", bench.table());
    let finite = bench.runs.iter().all(|r| r.final_total_loss.is_finite());
    let (erm_train, caudr_train) = (bench.erm.train_accuracy(), bench.caudr.train_accuracy());
    let margin = bench.margin();
    let passed = finite
        && margin >= MIN_MARGIN
        && bench.caudr.average > bench.erm.average
        && erm_train > MIN_TRAIN_ACCURACY
        && caudr_train > MIN_TRAIN_ACCURACY
        && t < budget;
    suite.exchange_runs = Some(
        bench
            .runs
            .iter()
            .filter(|r| r.label == "CauDR")
            .cloned()
            .collect(),
    );
    outcome(
        passed,
        format!(
            "CauDR {:.4} vs ERM {:.4} (margin {:.4}, required {MIN_MARGIN}); train accuracy {caudr_train:.4} / {erm_train:.4}; {} runs, {t:.0?}",
            bench.caudr.average,
            bench.erm.average,
            margin,
            bench.runs.len()
        ),
    )
}

fn exchange_vs_match(suite: &mut Suite) -> Outcome {
    let exchange = match suite.exchange_runs.take() {
        Some(r) => r,
        None => match run_protocol("Ex+BAE", &TrainConfig::desk(), &SEEDS, suite.data(), |_| {}) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("exchange runs failed: {e}")),
        },
    };
    let cfg = TrainConfig {
        do_mode: DoMode::Match,
        ..TrainConfig::desk()
    };
    let matched = match run_protocol("Ma+BAE", &cfg, &SEEDS, suite.data(), |_| {}) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("match runs failed: {e}")),
    };
    let ex = EvalReport::from_runs("Ex+BAE", &exchange).unwrap();
    let ma = EvalReport::from_runs("Ma+BAE", &matched).unwrap();
    println!("{}", render_table(&[&ex, &ma]));
    outcome(
        ex.average >= ma.average,
        format!("exchange {:.4} vs match {:.4}", ex.average, ma.average),
    )
}

fn determinism(suite: &mut Suite) -> Outcome {
    let data = suite.data();
    let split = held_out(2, data);
    let cfg = TrainConfig {
        steps: 300,
        seed: 7,
        ..TrainConfig::desk()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut artifacts = Vec::new();
    for k in 0..2 {
        let out = match train(&cfg, &split, data) {
            Ok(o) => o,
            Err(e) => return outcome(false, format!("run {k}: {e}")),
        };
        let ckpt = dir.path().join(format!("run{k}.ckpt"));
        let log = dir.path().join(format!("run{k}.jsonl"));
        save_model(&out.model, &cfg, &ckpt).unwrap();
        write_log(&out.log, &log).unwrap();
        artifacts.push((std::fs::read(&log).unwrap(), std::fs::read(&ckpt).unwrap()));
    }
    let same_log = artifacts[0].0 == artifacts[1].0;
    let same_ckpt = artifacts[0].1 == artifacts[1].1;
    outcome(
        same_log && same_ckpt,
        format!(
            "logs identical {same_log} ({} bytes), checkpoints identical {same_ckpt} ({} bytes)",
            artifacts[0].0.len(),
            artifacts[0].1.len()
        ),
    )
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|s| s.contains(&n));
    let mut suite = Suite {
        data: None,
        exchange_runs: None,
    };
    let mut lines = Vec::new();
    let mut failed_hard = false;
    let mut record = |n: usize, name: &str, soft: bool, o: Outcome| {
        let verdict = match (o.passed, soft) {
            (true, _) => "PASS",
            (false, true) => "FAIL (soft)",
            (false, false) => "FAIL",
        };
        failed_hard |= !o.passed && !soft;
        let line = format!("criterion {n} [{name}]: {verdict} - {}", o.detail);
        println!("{line}");
        lines.push(line);
    };
    if wanted(1) {
        record(
            1,
            "dct round trip",
            false,
            dct_round_trip(Duration::from_secs(10)),
        );
    }
    if wanted(2) {
        record(
            2,
            "gradient suite",
            false,
            gradient_suite(Duration::from_secs(60)),
        );
    }
    if wanted(3) {
        record(3, "batch-average threshold", false, bae_oracle());
    }
    if wanted(4) {
        record(4, "intervention algebra", false, intervention_algebra());
    }
    if wanted(5) {
        record(5, "loss identities", false, loss_identities(&mut suite));
    }
    if wanted(6) {
        record(
            6,
            "lambda sparsity",
            false,
            lambda_sparsity(&mut suite, Duration::from_secs(600)),
        );
    }
    if wanted(7) {
        record(
            7,
            "generalization ordering",
            false,
            generalization(&mut suite, Duration::from_secs(1800)),
        );
    }
    if wanted(8) {
        record(8, "exchange vs match", true, exchange_vs_match(&mut suite));
    }
    if wanted(9) {
        record(9, "determinism", false, determinism(&mut suite));
    }
    println!("\nsummary");
    for l in &lines {
        println!("  {l}");
    }
    if failed_hard {
        std::process::exit(1);
    }
}
