//! Report assembly: the ablation table, label-correlation audit,
//! heatmap files, and a human-readable summary.
//!
//! Every writer is deterministic — equal inputs give byte-identical
//! files — so reports can be diffed across machines.

use crate::dataset::corr::{correlation_matrix, CorrKind};
use crate::dataset::Dataset;
use crate::error::Result;
use crate::training::SweepResult;
use crate::viz::heatmap::{write_pgm, ActivationMap};
use serde::Serialize;
use std::path::{Path, PathBuf};

/// `lambda,peft,seed_mean_acc_<task>...,status` — one row per sweep
/// lambda, accuracies averaged over successful seeds (empty cells when
/// every seed failed).
pub fn write_ablation_csv(path: &Path, result: &SweepResult) -> Result<()> {
    let mut out = String::from("lambda,peft");
    for t in &result.tasks {
        out.push_str(&format!(",seed_mean_acc_{t}"));
    }
    out.push_str(",status\n");
    for row in &result.rows {
        out.push_str(&format!("{},{}", row.lambda, row.peft));
        match &row.mean_acc {
            Some(acc) => {
                for v in acc {
                    out.push_str(&format!(",{v}"));
                }
            }
            None => {
                for _ in &result.tasks {
                    out.push(',');
                }
            }
        }
        out.push_str(&format!(",{}\n", row.status));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Serialize)]
struct Correlations {
    tasks: Vec<String>,
    target: Vec<Vec<f64>>,
    empirical_pearson: Vec<Vec<f64>>,
    empirical_spearman: Vec<Vec<f64>>,
    n_samples: usize,
}

/// Audit the dataset's label correlations against its generator target.
pub fn write_correlations_json(path: &Path, dataset: &Dataset) -> Result<()> {
    let columns = dataset.label_columns();
    let pearson = correlation_matrix(&columns, CorrKind::Pearson)?;
    let spearman = correlation_matrix(&columns, CorrKind::Spearman)?;
    let doc = Correlations {
        tasks: crate::task::Task::ALL
            .iter()
            .map(|t| t.to_string())
            .collect(),
        target: dataset
            .config
            .target_corr
            .iter()
            .map(|r| r.to_vec())
            .collect(),
        empirical_pearson: pearson,
        empirical_spearman: spearman,
        n_samples: dataset.len(),
    };
    let mut json = serde_json::to_vec_pretty(&doc)?;
    json.push(b'\n');
    std::fs::write(path, json)?;
    Ok(())
}

/// Write each map as `heatmap_<task>_layer<l>_<tap>.pgm`.
pub fn write_heatmaps(out_dir: &Path, maps: &[ActivationMap]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for map in maps {
        let name = format!(
            "heatmap_{}_layer{}_{}.pgm",
            map.task,
            map.layer,
            map.tap.name()
        );
        let path = out_dir.join(name);
        write_pgm(&path, &map.upsampled, map.image_size, map.image_size)?;
        written.push(path);
    }
    Ok(written)
}

/// Markdown overview of a sweep: setup, the ablation table, and notes.
pub fn write_summary_md(
    path: &Path,
    result: &SweepResult,
    dataset: Option<&Dataset>,
    maps: &[ActivationMap],
) -> Result<()> {
    let mut out = String::from("# Sweep summary\n\n");
    let cfg = &result.config;
    let kinds: Vec<String> = cfg.peft_kinds.iter().map(|k| k.to_string()).collect();
    out.push_str(&format!(
        "- PEFT kinds: {} (r = {})\n- Seeds: {:?}\n- Epochs per run: {}\n- Augmentation: {:?}\n",
        kinds.join(", "),
        cfg.train.model.peft.r,
        cfg.seeds,
        cfg.train.epochs,
        cfg.train.augment,
    ));
    if let Some(ds) = dataset {
        out.push_str(&format!(
            "- Dataset: {} samples, {}x{} px\n",
            ds.len(),
            ds.image_size,
            ds.image_size
        ));
    }
    out.push_str("\n## Mean best validation accuracy by lambda\n\n");
    out.push_str("| peft | lambda |");
    for t in &result.tasks {
        out.push_str(&format!(" {t} |"));
    }
    out.push_str(" mean | status |\n|---|---|");
    for _ in &result.tasks {
        out.push_str("---|");
    }
    out.push_str("---|---|\n");
    for row in &result.rows {
        out.push_str(&format!("| {} | {} |", row.peft, row.lambda));
        match &row.mean_acc {
            Some(acc) => {
                for v in acc {
                    out.push_str(&format!(" {v:.4} |"));
                }
                let mean = acc.iter().sum::<f64>() / acc.len() as f64;
                out.push_str(&format!(" {mean:.4} |"));
            }
            None => {
                for _ in 0..=result.tasks.len() {
                    out.push_str(" - |");
                }
            }
        }
        out.push_str(&format!(" {} |\n", row.status));
    }
    if !maps.is_empty() {
        out.push_str("\n## Activation heatmaps\n\n");
        for map in maps {
            out.push_str(&format!(
                "- `heatmap_{}_layer{}_{}.pgm`{}\n",
                map.task,
                map.layer,
                map.tap.name(),
                if map.degenerate {
                    " (degenerate: constant activation)"
                } else {
                    ""
                }
            ));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write the full report; returns the paths written.
pub fn emit_report(
    out_dir: &Path,
    result: &SweepResult,
    dataset: Option<&Dataset>,
    maps: &[ActivationMap],
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let ablation = out_dir.join("ablation.csv");
    write_ablation_csv(&ablation, result)?;
    written.push(ablation);

    if let Some(ds) = dataset {
        let corr = out_dir.join("correlations.json");
        write_correlations_json(&corr, ds)?;
        written.push(corr);
    }
    written.extend(write_heatmaps(out_dir, maps)?);

    let summary = out_dir.join("summary.md");
    write_summary_md(&summary, result, dataset, maps)?;
    written.push(summary);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::GeneratorConfig;
    use crate::peft::PeftKind;
    use crate::task::Task;
    use crate::training::{CellOutcome, SweepCell, SweepConfig, SweepRow};

    fn fixture() -> SweepResult {
        let row = |lambda: f64, mean_acc: Option<Vec<f64>>, status: &str, ok: usize| SweepRow {
            lambda,
            peft: PeftKind::Adapter,
            mean_acc,
            seeds_ok: ok,
            seeds_total: 2,
            status: status.to_string(),
        };
        SweepResult {
            config: SweepConfig::default(),
            tasks: Task::ALL.to_vec(),
            cells: vec![SweepCell {
                peft: PeftKind::Adapter,
                lambda: 0.1,
                seed: 0,
                outcome: CellOutcome::Failed("synthetic".into()),
            }],
            rows: vec![
                row(0.0, Some(vec![0.5, 0.625, 0.4375]), "ok", 2),
                row(0.1, None, "failed", 0),
            ],
        }
    }

    #[test]
    fn ablation_schema_and_failure_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ablation.csv");
        write_ablation_csv(&path, &fixture()).unwrap();
        let csv = std::fs::read_to_string(&path).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "lambda,peft,seed_mean_acc_steatosis,seed_mean_acc_ballooning,\
             seed_mean_acc_inflammation,status"
        );
        assert_eq!(lines.next().unwrap(), "0,adapter,0.5,0.625,0.4375,ok");
        assert_eq!(lines.next().unwrap(), "0.1,adapter,,,,failed");
        assert!(lines.next().is_none());
    }

    #[test]
    fn correlations_json_reports_target_and_empirical() {
        let dataset = crate::dataset::generate(&GeneratorConfig {
            n_samples: 60,
            image_size: 8,
            seed: 5,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("correlations.json");
        write_correlations_json(&path, &dataset).unwrap();
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(doc["n_samples"], 60);
        assert_eq!(doc["target"][0][0], 1.0);
        let p = doc["empirical_pearson"][0][1].as_f64().unwrap();
        assert!((-1.0..=1.0).contains(&p));
        assert_eq!(doc["empirical_spearman"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn report_is_byte_stable() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let result = fixture();
        let a = emit_report(dir_a.path(), &result, None, &[]).unwrap();
        let b = emit_report(dir_b.path(), &result, None, &[]).unwrap();
        assert_eq!(a.len(), b.len());
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
        }
    }

    #[test]
    fn summary_lists_rows_and_degenerate_maps() {
        let dir = tempfile::tempdir().unwrap();
        let map = ActivationMap {
            task: Task::Ballooning,
            layer: 7,
            tap: crate::viz::ActivationTap::Up,
            side: 2,
            grid: vec![0.0; 4],
            image_size: 4,
            upsampled: vec![0.0; 16],
            degenerate: true,
        };
        let path = dir.path().join("summary.md");
        write_summary_md(&path, &fixture(), None, &[map]).unwrap();
        let md = std::fs::read_to_string(&path).unwrap();
        assert!(md.contains("| 0 | 0.5000 | 0.6250 | 0.4375 |"));
        assert!(md.contains("| 0.1 | - | - | - | - | failed |"));
        assert!(md.contains("degenerate"));
    }
}
