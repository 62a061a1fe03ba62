//! CSV outputs. Column order is part of the interface.

use std::io::{self, Write};

use teleforge_core::rewards::MetricsReport;

use crate::experiment::{AblationRow, ComparisonReport, Condition, ControllerKind, EpisodeResult, Interval, Metric};

/// `comparison.csv`: one row per metric, controllers nested in conditions.
pub const COMPARISON_HEADER: [&str; 5] = ["metric", "no_force_ik", "no_force_ours", "force_ik", "force_ours"];

/// `comparison_detail.csv`: the same cells with their intervals.
pub const COMPARISON_DETAIL_HEADER: [&str; 7] =
    ["controller", "condition", "metric", "mean", "half_width_95", "seeds", "episodes"];

/// `ablation.csv`, force condition only.
pub const ABLATION_HEADER: [&str; 8] = [
    "variant",
    "error_cm",
    "error_cm_hw95",
    "smooth",
    "smooth_hw95",
    "success_pct",
    "success_pct_hw95",
    "episodes",
];

/// Leading columns of `episodes.csv`; the metric columns follow.
pub const EPISODE_KEY_HEADER: [&str; 5] = ["controller", "condition", "task", "seed_index", "seed"];

fn num(v: f64) -> String {
    format!("{v:.6}")
}

fn line<W: Write>(out: &mut W, fields: &[String]) -> io::Result<()> {
    writeln!(out, "{}", fields.join(","))
}

fn header<W: Write>(out: &mut W, cols: &[&str]) -> io::Result<()> {
    writeln!(out, "{}", cols.join(","))
}

pub fn write_comparison<W: Write>(report: &ComparisonReport, mut out: W) -> io::Result<()> {
    header(&mut out, &COMPARISON_HEADER)?;
    for metric in Metric::ALL {
        let mut row = vec![metric.label().to_string()];
        for condition in Condition::ALL {
            for controller in [ControllerKind::Ik, ControllerKind::Policy] {
                row.push(
                    report
                        .cell(controller, condition, metric)
                        .map_or_else(String::new, |c| num(c.interval.mean)),
                );
            }
        }
        line(&mut out, &row)?;
    }
    Ok(())
}

pub fn write_comparison_detail<W: Write>(report: &ComparisonReport, mut out: W) -> io::Result<()> {
    header(&mut out, &COMPARISON_DETAIL_HEADER)?;
    for c in &report.cells {
        line(
            &mut out,
            &[
                c.controller.label().to_string(),
                c.condition.label().to_string(),
                c.metric.label().to_string(),
                num(c.interval.mean),
                num(c.interval.half_width),
                c.interval.n.to_string(),
                c.episodes.to_string(),
            ],
        )?;
    }
    Ok(())
}

pub fn write_episodes<W: Write>(results: &[EpisodeResult], mut out: W) -> io::Result<()> {
    let cols: Vec<&str> = EPISODE_KEY_HEADER.iter().chain(MetricsReport::CSV_HEADER.iter()).copied().collect();
    header(&mut out, &cols)?;
    for r in results {
        let mut row = vec![
            r.controller.label().to_string(),
            r.spec.condition.label().to_string(),
            r.spec.task.kind.name().to_string(),
            r.spec.seed_index.to_string(),
            r.spec.seed.to_string(),
        ];
        row.extend(r.metrics.csv_row());
        line(&mut out, &row)?;
    }
    Ok(())
}

pub fn write_ablation<W: Write>(rows: &[AblationRow], mut out: W) -> io::Result<()> {
    header(&mut out, &ABLATION_HEADER)?;
    for r in rows {
        let pair = |i: &Interval| [num(i.mean), num(i.half_width)];
        let mut fields = vec![r.label()];
        fields.extend(pair(&r.error_cm));
        fields.extend(pair(&r.smooth));
        fields.extend(pair(&r.success_pct));
        fields.push(r.episodes.to_string());
        line(&mut out, &fields)?;
    }
    Ok(())
}

/// Writes `contents` to `dir/name`, creating `dir`.
pub fn write_file(
    dir: &std::path::Path,
    name: &str,
    contents: impl FnOnce(&mut Vec<u8>) -> io::Result<()>,
) -> Result<std::path::PathBuf, crate::HarnessError> {
    let path = dir.join(name);
    let mut buf = Vec::new();
    contents(&mut buf).map_err(|e| crate::HarnessError::io(name, e))?;
    std::fs::create_dir_all(dir).map_err(|e| crate::HarnessError::io(dir.display().to_string(), e))?;
    std::fs::write(&path, buf).map_err(|e| crate::HarnessError::io(path.display().to_string(), e))?;
    Ok(path)
}
