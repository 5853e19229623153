//! Prune-then-quantize versus quantize-then-prune comparisons.

use std::fmt::Write as _;
use std::path::Path;

use qprune::pipeline::WrapSpec;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::runner::{read_summary, run, Summary, SUMMARY_FILE};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.md";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub label: String,
    pub summary: Summary,
}

/// Side-by-side comparison of runs; column order follows the input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub columns: Vec<Column>,
}

fn all_wraps(cfg: &mut ExperimentConfig) -> impl Iterator<Item = &mut WrapSpec> {
    cfg.wraps.values_mut()
}

/// Builds the prune-then-quantize and quantize-then-prune variants of `base`.
///
/// Relative offsets within each operator family are kept. With `a` the
/// earliest start of any operator, the leading family starts at `a` and
/// the trailing family starts where the leading family's last operator
/// has finished: the end of its last pruning repetition, or the start of
/// its last quantizer.
pub fn mirrored_variants(base: &ExperimentConfig) -> Result<(ExperimentConfig, ExperimentConfig)> {
    let mut prune_starts = Vec::new();
    let mut prune_ends = Vec::new();
    let mut quant_starts = Vec::new();
    for w in base.wraps.values() {
        for p in [&w.weight_prune, &w.feature_prune].into_iter().flatten() {
            prune_starts.push(p.start_step);
            prune_ends.push(p.end_step());
        }
        for q in [&w.weight_quantize, &w.feature_quantize].into_iter().flatten() {
            quant_starts.push(q.quantize_step);
        }
    }
    let (Some(&p_min), Some(&q_min)) = (prune_starts.iter().min(), quant_starts.iter().min()) else {
        return Err(HarnessError::Config {
            field: "wraps".into(),
            line: None,
            message: "order sweep needs at least one prune and one quantize operator".into(),
        });
    };
    let a = p_min.min(q_min);
    let prune_span = prune_ends.iter().max().copied().unwrap_or(p_min) - p_min;
    let quant_span = quant_starts.iter().max().copied().unwrap_or(q_min) - q_min;

    let shift = |cfg: &mut ExperimentConfig, prune_at: u64, quant_at: u64| {
        for w in all_wraps(cfg) {
            for p in [&mut w.weight_prune, &mut w.feature_prune].into_iter().flatten() {
                p.start_step = prune_at + (p.start_step - p_min);
            }
            for q in [&mut w.weight_quantize, &mut w.feature_quantize].into_iter().flatten() {
                q.quantize_step = quant_at + (q.quantize_step - q_min);
            }
        }
    };

    let mut pq = base.clone();
    shift(&mut pq, a, a + prune_span);
    pq.out = base.out.join("pq");
    let mut qp = base.clone();
    shift(&mut qp, a + quant_span, a);
    qp.out = base.out.join("qp");
    for (label, v) in [("prune-then-quantize", &pq), ("quantize-then-prune", &qp)] {
        let last = v
            .wraps
            .values()
            .flat_map(|w| {
                [&w.weight_prune, &w.feature_prune]
                    .into_iter()
                    .flatten()
                    .map(|p| p.end_step())
                    .chain([&w.weight_quantize, &w.feature_quantize].into_iter().flatten().map(|q| q.quantize_step))
            })
            .max()
            .unwrap_or(0);
        if last > v.steps {
            return Err(HarnessError::Config {
                field: "steps".into(),
                line: None,
                message: format!("{label} variant needs {last} steps, run has {}", v.steps),
            });
        }
    }
    Ok((pq, qp))
}

/// Runs labelled configs on up to `threads` worker threads.
pub fn run_all(configs: Vec<(String, ExperimentConfig)>, threads: usize) -> Result<Report> {
    let threads = threads.max(1);
    let mut results: Vec<Option<Result<Summary>>> = (0..configs.len()).map(|_| None).collect();
    for chunk_start in (0..configs.len()).step_by(threads) {
        let chunk = &configs[chunk_start..(chunk_start + threads).min(configs.len())];
        let done: Vec<Result<Summary>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|(_, cfg)| s.spawn(|| run(cfg))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
                .collect()
        });
        for (i, r) in done.into_iter().enumerate() {
            results[chunk_start + i] = Some(r);
        }
    }
    let columns = configs
        .into_iter()
        .zip(results)
        .map(|((label, _), r)| Ok(Column { label, summary: r.expect("every run finished")? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(Report { columns })
}

/// Runs both order variants of `base` and writes the report under `base.out`.
pub fn sweep_order(base: &ExperimentConfig, threads: usize) -> Result<Report> {
    base.validate()?;
    let (pq, qp) = mirrored_variants(base)?;
    let report = run_all(vec![("P-Q".into(), pq), ("Q-P".into(), qp)], threads)?;
    write_report(&base.out, &report)?;
    Ok(report)
}

pub fn write_report(dir: &Path, report: &Report) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write_atomic(&dir.join(REPORT_JSON), &serde_json::to_vec_pretty(report)?)?;
    write_atomic(&dir.join(REPORT_TEXT), render(report).as_bytes())
}

/// Markdown table with one column per run.
pub fn render(report: &Report) -> String {
    let mut s = String::new();
    let cols = &report.columns;
    let row = |s: &mut String, name: &str, f: &dyn Fn(&Summary) -> String| {
        let _ = write!(s, "| {name} |");
        for c in cols {
            let _ = write!(s, " {} |", f(&c.summary));
        }
        s.push('\n');
    };
    let _ = write!(s, "| |");
    for c in cols {
        let _ = write!(s, " {} |", c.label);
    }
    s.push('\n');
    s.push_str("|---|");
    s.push_str(&"---|".repeat(cols.len()));
    s.push('\n');
    row(&mut s, "order", &|m| m.order.clone().unwrap_or_else(|| "-".into()));
    row(&mut s, "metric", &|m| format!("{} {:.4}", m.metric_name, m.final_metric));
    row(&mut s, "weights (Mb)", &|m| format!("{:.6}", m.footprint.weights_mb));
    row(&mut s, "activations (Mb)", &|m| format!("{:.6}", m.footprint.activations_mb));
    row(&mut s, "footprint (Mb)", &|m| format!("{:.6}", m.footprint.total_mb));
    row(&mut s, "PD", &|m| format!("{:.4}", m.performance_density));
    row(&mut s, "sparsity", &|m| {
        m.achieved_sparsity
            .iter()
            .map(|e| format!("{}{}={}", e.layer, &e.tensor[..1], e.achieved))
            .collect::<Vec<_>>()
            .join(" ")
    });
    s
}

/// Collects `summary.json` from `dir` and its immediate subdirectories,
/// labelled by directory name and sorted by label.
pub fn collect(dir: &Path) -> Result<Report> {
    let mut columns = Vec::new();
    let own = dir.join(SUMMARY_FILE);
    if own.exists() {
        let label = dir.file_name().map_or(".".into(), |n| n.to_string_lossy().into_owned());
        columns.push(Column {
            label,
            summary: read_summary(&own)?,
        });
    }
    let mut subdirs: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| HarnessError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SUMMARY_FILE).exists())
        .collect();
    subdirs.sort();
    for p in subdirs {
        columns.push(Column {
            label: p.file_name().expect("directory entry").to_string_lossy().into_owned(),
            summary: read_summary(&p.join(SUMMARY_FILE))?,
        });
    }
    Ok(Report { columns })
}
