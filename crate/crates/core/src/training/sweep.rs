//! PEFT-kind x lambda x seed sweep over the training protocol.
//!
//! Cells sharing a `(kind, seed)` pair also share everything upstream
//! of `lambda` (model init, split, warmup, trunk cache): the sweep
//! prepares once per pair, snapshots the parameters, and resets them
//! before each `lambda` run. Results are bitwise independent of the
//! worker count because every cell depends only on its own
//! `(kind, lambda, seed)` coordinates.

use super::{prepare, train_prepared, RunRecord, TrainConfig, TrunkCache};
use crate::autodiff::Element;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::peft::PeftKind;
use crate::task::Task;
use serde::{Deserialize, Serialize};
use std::sync::Mutex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Base run configuration; `seed`, `objective.lambda`, and
    /// `model.peft.kind` are overridden per cell.
    pub train: TrainConfig,
    pub peft_kinds: Vec<PeftKind>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            train: TrainConfig::default(),
            peft_kinds: vec![PeftKind::Adapter],
            lambdas: vec![0.0, 0.01, 0.1, 1.0],
            seeds: vec![0, 1, 2],
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.peft_kinds.is_empty() || self.lambdas.is_empty() || self.seeds.is_empty() {
            return Err(Error::config(
                "sweep needs at least one peft kind, one lambda, and one seed",
            ));
        }
        if self.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::config("lambdas must be finite and >= 0"));
        }
        for (i, k) in self.peft_kinds.iter().enumerate() {
            if self.peft_kinds[..i].contains(k) {
                return Err(Error::config(format!("duplicate peft kind {k}")));
            }
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(Error::config(format!("duplicate seed {s}")));
            }
        }
        Ok(())
    }

    fn cell_config(&self, kind: PeftKind, lambda: f64, seed: u64) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.model.peft.kind = kind;
        cfg.seed = seed;
        cfg.objective.lambda = lambda;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellOutcome {
    Ok(RunRecord),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub peft: PeftKind,
    pub lambda: f64,
    pub seed: u64,
    pub outcome: CellOutcome,
}

/// One `(peft kind, lambda)` aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub peft: PeftKind,
    /// Per-task best-validation accuracy, averaged over successful
    /// seeds; `None` when every seed failed.
    pub mean_acc: Option<Vec<f64>>,
    pub seeds_ok: usize,
    pub seeds_total: usize,
    /// `ok`, `partial`, or `failed`.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub config: SweepConfig,
    pub tasks: Vec<Task>,
    pub cells: Vec<SweepCell>,
    pub rows: Vec<SweepRow>,
}

/// Run every `(kind, lambda, seed)` cell, with `(kind, seed)` groups
/// distributed over at most `jobs` worker threads. A cell failure
/// (non-finite loss or gradient) is recorded in its row rather than
/// aborting the sweep.
pub fn run_matrix<E: Element>(
    cfg: &SweepConfig,
    dataset: &Dataset,
    jobs: usize,
) -> Result<SweepResult> {
    cfg.validate()?;
    // One work unit = one (kind, seed) pair: shared prepare + cache.
    let units: Vec<(usize, usize)> = (0..cfg.peft_kinds.len())
        .flat_map(|ki| (0..cfg.seeds.len()).map(move |si| (ki, si)))
        .collect();
    let jobs = jobs.max(1).min(units.len());
    let results: Mutex<Vec<(usize, usize, usize, CellOutcome)>> = Mutex::new(Vec::new());

    let run_unit_group = |unit_group: &[(usize, usize)]| {
        for &(ki, si) in unit_group {
            let kind = cfg.peft_kinds[ki];
            let seed = cfg.seeds[si];
            let base = cfg.cell_config(kind, cfg.lambdas[0], seed);
            let prepared = match prepare::<E>(&base, dataset) {
                Ok(p) => p,
                Err(e) => {
                    let mut out = results.lock().expect("poisoned");
                    for li in 0..cfg.lambdas.len() {
                        out.push((ki, li, si, CellOutcome::Failed(format!("prepare: {e}"))));
                    }
                    continue;
                }
            };
            let snapshot = prepared.model.state();
            let mut cache = TrunkCache::new();
            for (li, &lambda) in cfg.lambdas.iter().enumerate() {
                let outcome = prepared
                    .model
                    .set_state(&snapshot)
                    .and_then(|()| {
                        let cell = cfg.cell_config(kind, lambda, seed);
                        train_prepared(&cell, dataset, &prepared, &mut cache, None)
                    })
                    .map(CellOutcome::Ok)
                    .unwrap_or_else(|e| CellOutcome::Failed(e.to_string()));
                results
                    .lock()
                    .expect("poisoned")
                    .push((ki, li, si, outcome));
            }
        }
    };

    if jobs == 1 {
        run_unit_group(&units);
    } else {
        // deal units round-robin so long groups spread across workers
        let groups: Vec<Vec<(usize, usize)>> = (0..jobs)
            .map(|w| units.iter().copied().skip(w).step_by(jobs).collect())
            .collect();
        std::thread::scope(|scope| {
            for group in &groups {
                scope.spawn(|| run_unit_group(group));
            }
        });
    }

    let mut collected = results.into_inner().expect("poisoned");
    collected.sort_by_key(|&(ki, li, si, _)| (ki, li, si));
    let cells: Vec<SweepCell> = collected
        .into_iter()
        .map(|(ki, li, si, outcome)| SweepCell {
            peft: cfg.peft_kinds[ki],
            lambda: cfg.lambdas[li],
            seed: cfg.seeds[si],
            outcome,
        })
        .collect();

    let tasks = cfg.train.model.tasks.clone();
    let n_seeds = cfg.seeds.len();
    let rows = cfg
        .peft_kinds
        .iter()
        .enumerate()
        .flat_map(|(ki, &kind)| {
            let cells = &cells;
            let tasks = &tasks;
            cfg.lambdas.iter().enumerate().map(move |(li, &lambda)| {
                let start = (ki * cfg.lambdas.len() + li) * n_seeds;
                let group = &cells[start..start + n_seeds];
                let ok: Vec<&RunRecord> = group
                    .iter()
                    .filter_map(|c| match &c.outcome {
                        CellOutcome::Ok(r) => Some(r),
                        CellOutcome::Failed(_) => None,
                    })
                    .collect();
                let mean_acc = (!ok.is_empty()).then(|| {
                    (0..tasks.len())
                        .map(|t| {
                            ok.iter().map(|r| r.best_val_acc[t]).sum::<f64>() / ok.len() as f64
                        })
                        .collect::<Vec<f64>>()
                });
                let status = if ok.len() == group.len() {
                    "ok"
                } else if ok.is_empty() {
                    "failed"
                } else {
                    "partial"
                };
                SweepRow {
                    lambda,
                    peft: kind,
                    mean_acc,
                    seeds_ok: ok.len(),
                    seeds_total: group.len(),
                    status: status.to_string(),
                }
            })
        })
        .collect();

    Ok(SweepResult {
        config: cfg.clone(),
        tasks,
        cells,
        rows,
    })
}
