//! Leave-one-domain-out benchmark: repeated training runs per split and seed,
//! summary statistics and the rendered comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{make_lodo_splits, Split};
use crate::error::{Error, Result};
use crate::model::NUM_CLASSES;
use crate::train::{evaluate, evaluate_indices, train, Method, SpectralSet, TrainConfig};

/// Mean and sample standard deviation (`n - 1` denominator; 0 for `n < 2`).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Outcome of one training run on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub test_domain: u32,
    pub seed: u64,
    pub test_accuracy: f64,
    pub per_class_accuracy: [f64; NUM_CLASSES],
    pub n_samples: usize,
    pub train_accuracy: f64,
    pub final_popcount: f64,
    pub final_total_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub accuracy_mean: f64,
    /// Sample standard deviation across seeds.
    pub accuracy_std: f64,
    pub per_class_accuracy: [f64; NUM_CLASSES],
    pub n_samples: usize,
    pub accuracies: Vec<f64>,
    pub train_accuracy_mean: f64,
    pub popcount_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub per_split: BTreeMap<u32, SplitReport>,
    /// Mean over splits of `accuracy_mean`.
    pub average: f64,
    pub seeds: Vec<u64>,
}

impl EvalReport {
    /// Aggregates runs by held-out domain.
    pub fn from_runs(label: impl Into<String>, runs: &[RunRecord]) -> Result<Self> {
        let mut grouped: BTreeMap<u32, Vec<&RunRecord>> = BTreeMap::new();
        for r in runs {
            grouped.entry(r.test_domain).or_default().push(r);
        }
        if grouped.is_empty() {
            return Err(Error::invalid("no runs to summarize"));
        }
        let mut seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let mut per_split = BTreeMap::new();
        for (domain, rs) in grouped {
            let accuracies: Vec<f64> = rs.iter().map(|r| r.test_accuracy).collect();
            let (mean, std) = mean_std(&accuracies);
            let mut per_class = [0.0; NUM_CLASSES];
            for r in &rs {
                for (acc, v) in per_class.iter_mut().zip(r.per_class_accuracy) {
                    *acc += v / rs.len() as f64;
                }
            }
            let train: Vec<f64> = rs.iter().map(|r| r.train_accuracy).collect();
            let pop: Vec<f64> = rs.iter().map(|r| r.final_popcount).collect();
            per_split.insert(
                domain,
                SplitReport {
                    accuracy_mean: mean,
                    accuracy_std: std,
                    per_class_accuracy: per_class,
                    n_samples: rs[0].n_samples,
                    accuracies,
                    train_accuracy_mean: mean_std(&train).0,
                    popcount_mean: mean_std(&pop).0,
                },
            );
        }
        let means: Vec<f64> = per_split.values().map(|s| s.accuracy_mean).collect();
        Ok(Self {
            label: label.into(),
            average: mean_std(&means).0,
            per_split,
            seeds,
        })
    }

    /// Mean in-domain training accuracy over splits.
    pub fn train_accuracy(&self) -> f64 {
        let v: Vec<f64> = self.per_split.values().map(|s| s.train_accuracy_mean).collect();
        mean_std(&v).0
    }

    pub fn popcount(&self) -> f64 {
        let v: Vec<f64> = self.per_split.values().map(|s| s.popcount_mean).collect();
        mean_std(&v).0
    }
}

/// Trains and evaluates one configuration on one split.
pub fn run_once(label: &str, config: &TrainConfig, split: &Split, data: &SpectralSet) -> Result<RunRecord> {
    let outcome = train(config, split, data)?;
    let test = evaluate(&outcome.model, split, data)?;
    let train_acc = evaluate_indices(&outcome.model, data, &data.indices_in(&split.train_domains))?;
    let last = outcome.log.last().map_or(f64::NAN, |l| l.total);
    info!(
        "{label} test domain {} seed {}: test {:.4} train {:.4} popcount {:.1}",
        split.test_domain, config.seed, test.accuracy, train_acc.accuracy, outcome.final_popcount
    );
    Ok(RunRecord {
        label: label.to_string(),
        test_domain: split.test_domain,
        seed: config.seed,
        test_accuracy: test.accuracy,
        per_class_accuracy: test.per_class_accuracy,
        n_samples: test.n_samples,
        train_accuracy: train_acc.accuracy,
        final_popcount: outcome.final_popcount,
        final_total_loss: last,
    })
}

/// Every LODO split times every seed for one configuration.
pub fn run_protocol(
    label: &str,
    config: &TrainConfig,
    seeds: &[u64],
    data: &SpectralSet,
    mut on_run: impl FnMut(&RunRecord),
) -> Result<Vec<RunRecord>> {
    let domains = data.domains();
    if domains.len() < 3 {
        warn!("{} domains; leave-one-out results will be thin", domains.len());
    }
    let mut runs = Vec::new();
    for split in make_lodo_splits(&domains)? {
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                ..config.clone()
            };
            let run = run_once(label, &cfg, &split, data)?;
            on_run(&run);
            runs.push(run);
        }
    }
    Ok(runs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub erm: EvalReport,
    pub caudr: EvalReport,
    pub runs: Vec<RunRecord>,
}

impl Benchmark {
    pub fn margin(&self) -> f64 {
        self.caudr.average - self.erm.average
    }

    pub fn table(&self) -> String {
        render_table(&[&self.erm, &self.caudr])
    }
}

/// Both methods over every split and seed.
pub fn run_benchmark(
    config: &TrainConfig,
    seeds: &[u64],
    data: &SpectralSet,
    mut on_run: impl FnMut(&RunRecord),
) -> Result<Benchmark> {
    if data.domains().len() < 3 {
        return Err(Error::invalid("the benchmark needs at least 3 domains"));
    }
    let mut runs = Vec::new();
    let mut reports = Vec::new();
    for method in [Method::Erm, Method::Caudr] {
        let label = method.to_string();
        let r = run_protocol(&label, &config.for_method(method), seeds, data, &mut on_run)?;
        reports.push(EvalReport::from_runs(&label, &r)?);
        runs.extend(r);
    }
    let caudr = reports.pop().expect("two reports");
    let erm = reports.pop().expect("two reports");
    Ok(Benchmark { erm, caudr, runs })
}

/// Aligned text table: one row per report, `mean ± std` per held-out domain
/// in percent, then the average of the domain means.
pub fn render_table(reports: &[&EvalReport]) -> String {
    let domains: Vec<u32> = {
        let mut d: Vec<u32> = reports.iter().flat_map(|r| r.per_split.keys().copied()).collect();
        d.sort_unstable();
        d.dedup();
        d
    };
    let mut header = vec!["Method".to_string()];
    header.extend(domains.iter().map(|d| format!("Domain {d}")));
    header.push("Average".into());
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.label.clone()];
        for d in &domains {
            row.push(match r.per_split.get(d) {
                Some(s) => format!("{:.2} ± {:.2}", 100.0 * s.accuracy_mean, 100.0 * s.accuracy_std),
                None => "-".into(),
            });
        }
        row.push(format!("{:.2}", 100.0 * r.average));
        rows.push(row);
    }
    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, &w))| {
                let pad = w - cell.chars().count();
                if c == 0 {
                    format!("{cell}{}", " ".repeat(pad))
                } else {
                    format!("{}{cell}", " ".repeat(pad))
                }
            })
            .collect();
        let _ = writeln!(out, "{}", cells.join(" | ").trim_end());
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            let _ = writeln!(out, "{}", rule.join("-+-"));
        }
    }
    let seeds = reports.first().map(|r| r.seeds.len()).unwrap_or(0);
    let _ = writeln!(
        out,
        "accuracy in %, mean ± sample standard deviation over {seeds} seeds; Average is the mean of the domain means"
    );
    out
}

/// One cell of a lambda by learning-rate grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda: f64,
    pub lr: f64,
    pub accuracy_mean: f64,
    pub popcount_mean: f64,
}

pub const GRID_LAMBDA_RANGE: (f64, f64) = (0.05, 0.8);
pub const GRID_LR_RANGE: (f64, f64) = (2.5e-5, 1e-2);

/// Evenly spaced grid on a linear (`log = false`) or log scale.
pub fn grid_values(lo: f64, hi: f64, n: usize, log: bool) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            if log {
                (lo.ln() + t * (hi.ln() - lo.ln())).exp()
            } else {
                lo + t * (hi - lo)
            }
        })
        .collect()
}

/// Held-out accuracy of the full method for each `(lambda, lr)` pair on one
/// split.
pub fn run_grid(
    config: &TrainConfig,
    lambdas: &[f64],
    lrs: &[f64],
    split: &Split,
    seeds: &[u64],
    data: &SpectralSet,
) -> Result<Vec<GridPoint>> {
    let mut points = Vec::new();
    for &lambda in lambdas {
        if !(GRID_LAMBDA_RANGE.0..=GRID_LAMBDA_RANGE.1).contains(&lambda) {
            warn!("lambda {lambda} outside the usual search range");
        }
        for &lr in lrs {
            if !(GRID_LR_RANGE.0..=GRID_LR_RANGE.1).contains(&lr) {
                warn!("lr {lr} outside the usual search range");
            }
            let mut acc = Vec::new();
            let mut pop = Vec::new();
            for &seed in seeds {
                let cfg = TrainConfig {
                    lambda,
                    lr,
                    seed,
                    ..config.clone()
                };
                let run = run_once("grid", &cfg, split, data)?;
                acc.push(run.test_accuracy);
                pop.push(run.final_popcount);
            }
            points.push(GridPoint {
                lambda,
                lr,
                accuracy_mean: mean_std(&acc).0,
                popcount_mean: mean_std(&pop).0,
            });
        }
    }
    Ok(points)
}
