//! Report emission and diagnostic CSV files.
//!
//! Machine formats (CSV, JSON lines) keep full `f64` precision; the pretty
//! table rounds to two decimals and shows accuracies in percent.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use apex_core::inference::AlphaRow;
use apex_core::training::LossRecord;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::experiment::RunReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    JsonLines,
    PrettyTable,
}

impl FromStr for ReportFormat {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json-lines" | "jsonl" => Ok(ReportFormat::JsonLines),
            "pretty-table" | "table" => Ok(ReportFormat::PrettyTable),
            other => Err(HarnessError::Config(format!(
                "unknown report format {other:?} (expected csv, json-lines or pretty-table)"
            ))),
        }
    }
}

/// One aggregated configuration as a flat CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
    pub zero_shot_base_acc: f64,
    pub zero_shot_novel_acc: f64,
    pub zero_shot_hm: f64,
    pub no_ensemble_base_acc: f64,
    pub no_ensemble_novel_acc: f64,
    pub fixed_ensemble_novel_acc: f64,
    pub rtd: f64,
    pub separability_intra: f64,
    pub separability_inter: f64,
    pub separability_ratio: f64,
    pub alpha_mean: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Seeds joined with `;`.
    pub seeds: String,
}

impl SummaryRow {
    pub fn new(label: &str, r: &RunReport) -> Self {
        Self {
            label: label.to_string(),
            base_acc: r.base_acc,
            novel_acc: r.novel_acc,
            hm: r.hm,
            zero_shot_base_acc: r.zero_shot_base_acc,
            zero_shot_novel_acc: r.zero_shot_novel_acc,
            zero_shot_hm: r.zero_shot_hm,
            no_ensemble_base_acc: r.no_ensemble_base_acc,
            no_ensemble_novel_acc: r.no_ensemble_novel_acc,
            fixed_ensemble_novel_acc: r.fixed_ensemble_novel_acc,
            rtd: r.rtd,
            separability_intra: r.separability.intra,
            separability_inter: r.separability.inter,
            separability_ratio: r.separability.ratio,
            alpha_mean: r.alpha_stats.mean,
            alpha_min: r.alpha_stats.min,
            alpha_max: r.alpha_stats.max,
            seeds: r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";"),
        }
    }
}

/// A labeled report; the label names the configuration (e.g. a sweep point).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledReport {
    pub label: String,
    pub report: RunReport,
}

/// Serializes reports in `format`. JSON lines carry the full report, per-seed
/// measurements included; CSV and the table carry one summary row each.
pub fn emit_report(reports: &[LabeledReport], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::JsonLines => json_lines(reports),
        ReportFormat::Csv => {
            let rows: Vec<SummaryRow> = reports.iter().map(|r| SummaryRow::new(&r.label, &r.report)).collect();
            csv_string(&rows)
        }
        ReportFormat::PrettyTable => Ok(pretty_summary(reports)),
    }
}

pub fn parse_json_lines(text: &str) -> Result<Vec<LabeledReport>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| HarnessError::Serialize(e.to_string())))
        .collect()
}

fn json_lines<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| HarnessError::Serialize(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

fn csv_string<T: Serialize>(records: &[T]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for r in records {
        writer.serialize(r).map_err(|e| HarnessError::Serialize(e.to_string()))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| HarnessError::Serialize(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| HarnessError::Serialize(e.to_string()))
}

fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(&headers.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
    for row in rows {
        out.push_str(&line(row));
    }
    out
}

fn pretty_summary(reports: &[LabeledReport]) -> String {
    let pct = |x: f64| format!("{:.2}", 100.0 * x);
    let two = |x: f64| format!("{x:.2}");
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|l| {
            let r = &l.report;
            vec![
                l.label.clone(),
                pct(r.base_acc),
                pct(r.novel_acc),
                pct(r.hm),
                pct(r.zero_shot_base_acc),
                pct(r.zero_shot_novel_acc),
                pct(r.zero_shot_hm),
                pct(r.no_ensemble_novel_acc),
                two(r.rtd),
                two(r.separability.ratio),
                two(r.alpha_stats.mean),
            ]
        })
        .collect();
    table(
        &[
            "Config", "Base", "Novel", "HM", "ZS Base", "ZS Novel", "ZS HM", "No-Ens Novel", "RTD",
            "Sep. ratio", "Mean alpha",
        ],
        &rows,
    )
}

/// Emits arbitrary flat records: CSV and JSON lines at full precision, or a
/// table with numbers to two decimals.
pub fn emit_records<T: Serialize>(records: &[T], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => csv_string(records),
        ReportFormat::JsonLines => json_lines(records),
        ReportFormat::PrettyTable => {
            let values: Vec<serde_json::Map<String, serde_json::Value>> = records
                .iter()
                .map(|r| match serde_json::to_value(r) {
                    Ok(serde_json::Value::Object(m)) => Ok(flatten(m)),
                    Ok(_) => Err(HarnessError::Serialize("record is not a struct".into())),
                    Err(e) => Err(HarnessError::Serialize(e.to_string())),
                })
                .collect::<Result<_>>()?;
            let headers: Vec<String> = values.first().map(|m| m.keys().cloned().collect()).unwrap_or_default();
            let rows: Vec<Vec<String>> = values
                .iter()
                .map(|m| {
                    m.values()
                        .map(|v| match v {
                            serde_json::Value::Number(n) if n.is_f64() => format!("{:.2}", n.as_f64().unwrap_or(f64::NAN)),
                            serde_json::Value::String(s) => s.clone(),
                            other => other.to_string(),
                        })
                        .collect()
                })
                .collect();
            let headers: Vec<&str> = headers.iter().map(String::as_str).collect();
            Ok(table(&headers, &rows))
        }
    }
}

/// One level of nesting, `outer.inner` keys.
fn flatten(m: serde_json::Map<String, serde_json::Value>) -> serde_json::Map<String, serde_json::Value> {
    let mut out = serde_json::Map::new();
    for (k, v) in m {
        match v {
            serde_json::Value::Object(inner) => {
                for (ik, iv) in inner {
                    out.insert(format!("{k}.{ik}"), iv);
                }
            }
            other => {
                out.insert(k, other);
            }
        }
    }
    out
}

/// `class_id,d_avg,d_nn,alpha`.
pub fn alpha_table_csv(rows: &[AlphaRow]) -> Result<String> {
    csv_string(rows)
}

/// `step,epoch,lr,loss`.
pub fn loss_trace_csv(records: &[LossRecord]) -> Result<String> {
    csv_string(records)
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| HarnessError::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(HarnessError::io(path, e));
    }
    Ok(())
}
