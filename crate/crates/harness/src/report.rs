//! CSV tables and the JSON summary of a set of runs.
//!
//! Column layouts:
//!
//! * `headline.csv`: `label,seed,NDS,mAP,mATE,mASE,mAOE,mAVE,mAAE,long_tail_mAP`
//! * `per_class_ap.csv`: `label,seed` then one AP column per class in
//!   [`ObjectClass::ALL`] order; blank when the class was absent from both
//!   ground truth and predictions.
//! * `robustness.csv`: `label,seed,masked` then the eight headline metrics.
//! * `ablation.csv`: `label,seed,NDS,mAP`.
//!
//! Every table has one row per run (per run and mask setting for
//! robustness), in input order.

use std::path::{Path, PathBuf};

use gtbev::scene::io::{self, Validate};
use gtbev::scene::{ObjectClass, SceneError};
use serde::{Deserialize, Serialize};

use crate::experiments::{AblationReport, RobustnessReport, RobustnessRow, RunRecord, ABLATION};
use crate::HarnessError;

pub const SUMMARY_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryRun {
    pub label: String,
    pub seed: u64,
    #[serde(rename = "NDS")]
    pub nds: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "long_tail_mAP")]
    pub long_tail_map: f64,
    pub masked_nds: f64,
    pub masked_map: f64,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryMean {
    pub label: String,
    pub runs: usize,
    #[serde(rename = "NDS")]
    pub nds: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "long_tail_mAP")]
    pub long_tail_map: f64,
    pub masked_nds: f64,
    pub masked_map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub format_version: u32,
    pub runs: Vec<SummaryRun>,
    /// One entry per configuration present, in ablation order.
    pub means: Vec<SummaryMean>,
}

impl Validate for Summary {
    fn validate(&self) -> Result<(), SceneError> {
        if self.format_version != SUMMARY_VERSION {
            return Err(SceneError::invalid(
                "format_version",
                format!("{} is not {SUMMARY_VERSION}", self.format_version),
            ));
        }
        if self.runs.is_empty() {
            return Err(SceneError::invalid("runs", "empty"));
        }
        let unit = |path: String, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(SceneError::invalid(path, format!("{v} not in [0, 1]")))
            }
        };
        for (i, r) in self.runs.iter().enumerate() {
            for (name, v) in [
                ("NDS", r.nds),
                ("mAP", r.map),
                ("long_tail_mAP", r.long_tail_map),
                ("masked_nds", r.masked_nds),
                ("masked_map", r.masked_map),
            ] {
                unit(format!("runs[{i}].{name}"), v)?;
            }
        }
        let total: usize = self.means.iter().map(|m| m.runs).sum();
        if total != self.runs.len() {
            return Err(SceneError::invalid(
                "means",
                format!("cover {total} runs, expected {}", self.runs.len()),
            ));
        }
        Ok(())
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

pub fn summarize(records: &[RunRecord]) -> Summary {
    let runs: Vec<SummaryRun> = records
        .iter()
        .map(|r| SummaryRun {
            label: r.label.clone(),
            seed: r.seed,
            nds: r.report.nds,
            map: r.report.map,
            long_tail_map: r.report.long_tail_map,
            masked_nds: r.masked_report.nds,
            masked_map: r.masked_report.map,
            wall_clock_s: r.wall_clock_s,
        })
        .collect();
    let mut labels: Vec<String> = ABLATION.iter().map(|s| s.label().to_string()).collect();
    for r in &runs {
        if !labels.contains(&r.label) {
            labels.push(r.label.clone());
        }
    }
    let means = labels
        .into_iter()
        .filter_map(|label| {
            let of: Vec<&SummaryRun> = runs.iter().filter(|r| r.label == label).collect();
            (!of.is_empty()).then(|| SummaryMean {
                runs: of.len(),
                nds: mean(of.iter().map(|r| r.nds)),
                map: mean(of.iter().map(|r| r.map)),
                long_tail_map: mean(of.iter().map(|r| r.long_tail_map)),
                masked_nds: mean(of.iter().map(|r| r.masked_nds)),
                masked_map: mean(of.iter().map(|r| r.masked_map)),
                label,
            })
        })
        .collect();
    Summary {
        format_version: SUMMARY_VERSION,
        runs,
        means,
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, HarnessError> {
    let file = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> HarnessError {
    HarnessError::io(path, std::io::Error::other(e))
}

fn write_rows<R: Serialize>(
    path: &Path,
    rows: impl IntoIterator<Item = R>,
) -> Result<(), HarnessError> {
    let mut w = csv_writer(path)?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

#[derive(Serialize)]
struct HeadlineRow<'a> {
    label: &'a str,
    seed: u64,
    #[serde(rename = "NDS")]
    nds: f64,
    #[serde(rename = "mAP")]
    map: f64,
    #[serde(rename = "mATE")]
    mate: f64,
    #[serde(rename = "mASE")]
    mase: f64,
    #[serde(rename = "mAOE")]
    maoe: f64,
    #[serde(rename = "mAVE")]
    mave: f64,
    #[serde(rename = "mAAE")]
    maae: f64,
    #[serde(rename = "long_tail_mAP")]
    long_tail_map: f64,
}

pub fn write_headline(path: &Path, records: &[RunRecord]) -> Result<(), HarnessError> {
    write_rows(
        path,
        records.iter().map(|r| HeadlineRow {
            label: &r.label,
            seed: r.seed,
            nds: r.report.nds,
            map: r.report.map,
            mate: r.report.mate,
            mase: r.report.mase,
            maoe: r.report.maoe,
            mave: r.report.mave,
            maae: r.report.maae,
            long_tail_map: r.report.long_tail_map,
        }),
    )
}

pub fn per_class_header() -> Vec<&'static str> {
    let mut h = vec!["label", "seed"];
    h.extend(ObjectClass::ALL.iter().map(|c| c.name()));
    h
}

pub fn write_per_class(path: &Path, records: &[RunRecord]) -> Result<(), HarnessError> {
    let mut w = csv_writer(path)?;
    w.write_record(per_class_header())
        .map_err(|e| csv_err(path, e))?;
    for r in records {
        let mut row = vec![r.label.clone(), r.seed.to_string()];
        row.extend(ObjectClass::ALL.iter().map(|&c| {
            r.report
                .class_ap(c)
                .map(|v| v.to_string())
                .unwrap_or_default()
        }));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn write_robustness(path: &Path, report: &RobustnessReport) -> Result<(), HarnessError> {
    write_rows(path, report.rows.iter())
}

/// Robustness rows taken from the evaluations stored in the records.
pub fn robustness_from_records(records: &[RunRecord]) -> Vec<RobustnessRow> {
    records
        .iter()
        .flat_map(|r| {
            [
                RobustnessRow::new(&r.label, r.seed, false, &r.report),
                RobustnessRow::new(&r.label, r.seed, true, &r.masked_report),
            ]
        })
        .collect()
}

pub fn write_ablation(path: &Path, report: &AblationReport) -> Result<(), HarnessError> {
    write_rows(path, report.rows.iter())
}

/// Writes every table and `summary.json` into `dir`; returns the paths
/// written. Without a robustness report the stored masked evaluations of
/// the records fill `robustness.csv`.
pub fn emit(
    dir: &Path,
    records: &[RunRecord],
    robustness: Option<&RobustnessReport>,
) -> Result<Vec<PathBuf>, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::Validation("no run records to report".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let paths: Vec<PathBuf> = [
        "headline.csv",
        "per_class_ap.csv",
        "robustness.csv",
        "ablation.csv",
        "summary.json",
    ]
    .iter()
    .map(|f| dir.join(f))
    .collect();
    write_headline(&paths[0], records)?;
    write_per_class(&paths[1], records)?;
    match robustness {
        Some(r) => write_robustness(&paths[2], r)?,
        None => write_rows(&paths[2], robustness_from_records(records))?,
    }
    write_ablation(&paths[3], &AblationReport::from_records(records, 0.0))?;
    io::save(&summarize(records), &paths[4])?;
    Ok(paths)
}
