//! Transfer evaluation: plan greedily on a recovered reward inside a
//! perturbed gridworld and score the resulting behaviour with the ground
//! truth.

use std::fmt::Write as _;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::RewardFunction;
use crate::mdp::{apply_perturbation, GridWorld, Perturbation};
use crate::solver::{rollout, value_iteration_table, HardPolicy};

pub const VI_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RewardScaling {
    /// Zero mean and unit variance over table entries.
    #[default]
    Standardize,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferResult {
    pub method_label: String,
    pub lambda_used: f64,
    pub perturbation: String,
    pub seed: u64,
    /// Mean over rollouts.
    pub ground_truth_return: f64,
    /// Sample standard deviation over rollouts.
    pub return_std: f64,
    pub n_rollouts: usize,
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub result: TransferResult,
    pub policy: HardPolicy,
}

pub fn standardize(table: &Array2<f64>) -> Array2<f64> {
    let n = table.len() as f64;
    let mean = table.sum() / n;
    let var = table.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd > 0.0 && sd.is_finite() {
        table.mapv(|v| (v - mean) / sd)
    } else {
        table.mapv(|v| v - mean)
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Hard value iteration on the recovered reward in the perturbed world,
/// then `n_rollouts` episodes scored with the ground truth.
pub fn transfer_eval<R: RewardFunction + ?Sized>(
    recovered: &R,
    base: &GridWorld,
    pert: &Perturbation,
    n_rollouts: usize,
    seed: u64,
    scaling: RewardScaling,
) -> Result<TransferOutcome> {
    if n_rollouts == 0 {
        return Err(Error::InvalidInput("n_rollouts must be at least 1".into()));
    }
    let world = apply_perturbation(base, pert)?;
    let table = recovered.reward_table(&world.mdp)?;
    if let Some(v) = table.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("recovered reward has non-finite entry {v}")));
    }
    let table = match scaling {
        RewardScaling::Standardize => standardize(&table),
        RewardScaling::Raw => table,
    };
    let policy = value_iteration_table(&world.mdp, &table, VI_TOLERANCE)?;
    let ro = rollout(&world.mdp, &policy, n_rollouts, seed, &base.truth)?;
    let (mean, std) = mean_std(&ro.returns);
    Ok(TransferOutcome {
        result: TransferResult {
            method_label: String::new(),
            lambda_used: 0.0,
            perturbation: pert.label(),
            seed,
            ground_truth_return: mean,
            return_std: std,
            n_rollouts,
        },
        policy,
    })
}

/// One method of a sweep: a label and the regularization weight reported in
/// the results.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec<C> {
    pub label: String,
    pub lambda: f64,
    pub config: C,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepFailure {
    pub method_label: String,
    pub seed: u64,
    pub perturbation: Option<String>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub method_label: String,
    pub lambda_used: f64,
    pub perturbation: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
    pub n_rollouts: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SweepTable {
    pub rows: Vec<TransferResult>,
    pub failures: Vec<SweepFailure>,
}

#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    pub n_rollouts: usize,
    pub scaling: RewardScaling,
    pub jobs: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            n_rollouts: 10,
            scaling: RewardScaling::Standardize,
            jobs: 1,
        }
    }
}

/// Trains every (method, seed) pair with `train` and evaluates the result
/// under every perturbation. Failures are recorded and skipped. Rows come
/// out in (method, seed, perturbation) order regardless of `jobs`.
pub fn sweep<C, R, F>(
    methods: &[MethodSpec<C>],
    perts: &[Perturbation],
    seeds: &[u64],
    world: &GridWorld,
    opts: SweepOptions,
    train: F,
) -> Result<SweepTable>
where
    C: Sync,
    R: RewardFunction + Send,
    F: Fn(&MethodSpec<C>, u64) -> Result<R> + Sync,
{
    if perts.is_empty() {
        return Err(Error::InvalidInput("sweep needs at least one perturbation".into()));
    }
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidInput("sweep needs at least one method and one seed".into()));
    }
    let cells: Vec<(usize, u64)> = (0..methods.len())
        .flat_map(|m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let run_cell = |&(m, seed): &(usize, u64)| -> (Vec<TransferResult>, Vec<SweepFailure>) {
        let method = &methods[m];
        let mut rows = Vec::new();
        let mut failures = Vec::new();
        let reward = match train(method, seed) {
            Ok(r) => r,
            Err(e) => {
                failures.push(SweepFailure {
                    method_label: method.label.clone(),
                    seed,
                    perturbation: None,
                    error: e.to_string(),
                });
                return (rows, failures);
            }
        };
        for p in perts {
            match transfer_eval(&reward, world, p, opts.n_rollouts, seed, opts.scaling) {
                Ok(out) => rows.push(TransferResult {
                    method_label: method.label.clone(),
                    lambda_used: method.lambda,
                    ..out.result
                }),
                Err(e) => failures.push(SweepFailure {
                    method_label: method.label.clone(),
                    seed,
                    perturbation: Some(p.label()),
                    error: e.to_string(),
                }),
            }
        }
        (rows, failures)
    };
    let results: Vec<(Vec<TransferResult>, Vec<SweepFailure>)> = if opts.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        pool.install(|| cells.par_iter().map(run_cell).collect())
    } else {
        cells.iter().map(run_cell).collect()
    };
    let mut table = SweepTable::default();
    for (rows, failures) in results {
        table.rows.extend(rows);
        table.failures.extend(failures);
    }
    for f in &table.failures {
        log::warn!("sweep cell {} seed {} failed: {}", f.method_label, f.seed, f.error);
    }
    Ok(table)
}

/// Mean and sample standard deviation across seeds per (method,
/// perturbation), in order of first appearance.
pub fn aggregate(rows: &[TransferResult]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let k = (r.method_label.clone(), r.perturbation.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(m, p)| {
            let group: Vec<&TransferResult> = rows
                .iter()
                .filter(|r| r.method_label == m && r.perturbation == p)
                .collect();
            let values: Vec<f64> = group.iter().map(|r| r.ground_truth_return).collect();
            let (mean, std) = mean_std(&values);
            AggregateRow {
                lambda_used: group[0].lambda_used,
                method_label: m,
                perturbation: p,
                mean,
                std,
                n_seeds: group.len(),
                n_rollouts: group.iter().map(|r| r.n_rollouts).sum(),
            }
        })
        .collect()
}

pub const RESULTS_HEADER: &str = "method,lambda,perturbation,seed,return_mean,return_std,n_rollouts";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Per-seed rows followed by one aggregate row (seed `all`) per group.
pub fn results_csv(rows: &[TransferResult]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            csv_field(&r.method_label),
            r.lambda_used,
            csv_field(&r.perturbation),
            r.seed,
            r.ground_truth_return,
            r.return_std,
            r.n_rollouts
        );
    }
    for a in aggregate(rows) {
        let _ = writeln!(
            out,
            "{},{},{},all,{},{},{}",
            csv_field(&a.method_label),
            a.lambda_used,
            csv_field(&a.perturbation),
            a.mean,
            a.std,
            a.n_rollouts
        );
    }
    out
}

/// `mean ± std` with three decimals.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.3} ± {std:.3}")
}

/// Ranks starting at 1, ties receive the average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of average ranks).
/// Zero when either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidInput("spearman needs two equal-length inputs of size >= 2".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}
