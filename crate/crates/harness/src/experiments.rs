//! Run records and the ablation and camera-masking protocols.

use std::path::{Path, PathBuf};
use std::time::Instant;

use gtbev::metrics::MetricsReport;
use gtbev::model::checkpoint::Checkpoint;
use gtbev::scene::io::{self, Validate};
use gtbev::scene::SceneError;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, GtFlowSwitches};
use crate::data::{build, Dataset, Split};
use crate::eval::{evaluate_checkpoint, evaluate_detector, MaskPolicy};
use crate::train::{checkpoint, train, TrainHistory};
use crate::HarnessError;

pub const RECORD_VERSION: u32 = 1;
const MASK_SEED_SALT: u64 = 0x6d61_736b_5f76_6965;

/// The ablation rows in order: baseline, contrastive BEV guidance, BEV plus
/// ground-truth query guidance.
pub const ABLATION: [GtFlowSwitches; 3] = [
    GtFlowSwitches::BASELINE,
    GtFlowSwitches::BEV,
    GtFlowSwitches::BEV_AND_DEC,
];

/// Seed of the one-view mask stream. It depends only on the dataset, so
/// every checkpoint sees the same masked views.
pub fn mask_policy(config: &ExperimentConfig) -> MaskPolicy {
    MaskPolicy::RandomOneView {
        seed: config.dataset.seed ^ MASK_SEED_SALT,
    }
}

/// File stem of a run: `none_seed0`, `bev_seed0`, `bev_dec_seed0`.
pub fn run_stem(switches: GtFlowSwitches, seed: u64) -> String {
    let slug = match (switches.gt_bev, switches.gt_qi) {
        (false, false) => "none",
        (true, false) => "bev",
        (true, true) => "bev_dec",
        (false, true) => "dec",
    };
    format!("{slug}_seed{seed}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub format_version: u32,
    pub label: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub history: TrainHistory,
    /// Checkpoint file name, relative to the record's directory.
    pub checkpoint: String,
    pub report: MetricsReport,
    pub masked_report: MetricsReport,
    pub mask_policy: MaskPolicy,
    pub detector_parameters: usize,
    pub wall_clock_s: f64,
}

impl Validate for RunRecord {
    fn validate(&self) -> Result<(), SceneError> {
        if self.format_version != RECORD_VERSION {
            return Err(SceneError::invalid(
                "format_version",
                format!("{} is not {RECORD_VERSION}", self.format_version),
            ));
        }
        if self.label != self.config.gt_flow.label() {
            return Err(SceneError::invalid(
                "label",
                format!("{:?} does not match config.gt_flow", self.label),
            ));
        }
        self.config
            .validate()
            .map_err(|e| SceneError::invalid("config", e.to_string()))?;
        self.report.validate()?;
        self.masked_report.validate()?;
        if let Some(i) = self.history.steps.iter().position(|l| !l.is_finite()) {
            if self.history.skipped_steps == 0 {
                return Err(SceneError::invalid(
                    format!("history.steps[{i}]"),
                    "non-finite loss without a skipped step",
                ));
            }
        }
        Ok(())
    }
}

impl RunRecord {
    pub fn checkpoint_path(&self, record_dir: &Path) -> PathBuf {
        record_dir.join(&self.checkpoint)
    }
}

/// A finished run: its record and final checkpoint.
pub struct Run {
    pub record: RunRecord,
    pub checkpoint: Checkpoint,
}

impl Run {
    /// Writes `<stem>.gtbv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, HarnessError> {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let ck = self.record.checkpoint_path(dir);
        self.checkpoint
            .save(&ck)
            .map_err(|e| HarnessError::checkpoint(&ck, e))?;
        let path = dir.join(format!(
            "{}.json",
            run_stem(self.record.config.gt_flow, self.record.seed)
        ));
        io::save(&self.record, &path)?;
        Ok(path)
    }
}

/// Trains `config` under `seed` and evaluates the final detector with and
/// without a masked view.
pub fn run(
    config: &ExperimentConfig,
    seed: u64,
    train_set: &Dataset,
    eval_set: &Dataset,
) -> Result<Run, HarnessError> {
    config.validate()?;
    let start = Instant::now();
    let trained = train(config, seed, train_set)?;
    let policy = mask_policy(config);
    let report = evaluate_detector(&trained.detector, eval_set, MaskPolicy::None)?;
    let masked_report = evaluate_detector(&trained.detector, eval_set, policy)?;
    let ck = checkpoint(config, seed, &trained);
    let record = RunRecord {
        format_version: RECORD_VERSION,
        label: config.gt_flow.label().into(),
        seed,
        config: config.clone(),
        checkpoint: format!("{}.gtbv", run_stem(config.gt_flow, seed)),
        detector_parameters: trained.detector.num_parameters(),
        history: trained.history,
        report,
        masked_report,
        mask_policy: policy,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    log::info!(
        "{} seed {}: NDS {:.4} mAP {:.4} in {:.1}s",
        record.label,
        seed,
        record.report.nds,
        record.report.map,
        record.wall_clock_s
    );
    Ok(Run {
        record,
        checkpoint: ck,
    })
}

pub fn load_record(path: &Path) -> Result<RunRecord, HarnessError> {
    Ok(io::load(path)?)
}

/// Loads the checkpoint a record names, rejecting a missing file.
pub fn load_checkpoint(record: &RunRecord, record_dir: &Path) -> Result<Checkpoint, HarnessError> {
    let path = record.checkpoint_path(record_dir);
    if !path.is_file() {
        return Err(HarnessError::Validation(format!(
            "missing checkpoint {}",
            path.display()
        )));
    }
    Checkpoint::load(&path).map_err(|e| HarnessError::checkpoint(&path, e))
}

/// Evaluation of a stored run under `policy`, from its checkpoint alone.
pub fn reevaluate(
    record: &RunRecord,
    record_dir: &Path,
    eval_set: &Dataset,
    policy: MaskPolicy,
) -> Result<MetricsReport, HarnessError> {
    let ck = load_checkpoint(record, record_dir)?;
    evaluate_checkpoint(&ck, &record.config, eval_set, policy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessRow {
    pub label: String,
    pub seed: u64,
    pub masked: bool,
    #[serde(rename = "NDS")]
    pub nds: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mATE")]
    pub mate: f64,
    #[serde(rename = "mASE")]
    pub mase: f64,
    #[serde(rename = "mAOE")]
    pub maoe: f64,
    #[serde(rename = "mAVE")]
    pub mave: f64,
    #[serde(rename = "mAAE")]
    pub maae: f64,
    #[serde(rename = "long_tail_mAP")]
    pub long_tail_map: f64,
}

impl RobustnessRow {
    pub fn new(label: &str, seed: u64, masked: bool, r: &MetricsReport) -> Self {
        Self {
            label: label.into(),
            seed,
            masked,
            nds: r.nds,
            map: r.map,
            mate: r.mate,
            mase: r.mase,
            maoe: r.maoe,
            mave: r.mave,
            maae: r.maae,
            long_tail_map: r.long_tail_map,
        }
    }

    /// The eight metric columns in table order.
    pub fn metrics(&self) -> [f64; 8] {
        [
            self.nds,
            self.map,
            self.mate,
            self.mase,
            self.maoe,
            self.mave,
            self.maae,
            self.long_tail_map,
        ]
    }
}

/// Unmasked and one-view-masked metrics of each checkpoint, in pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessReport {
    pub mask_policy: MaskPolicy,
    pub rows: Vec<RobustnessRow>,
}

pub const ROBUSTNESS_COLUMNS: [&str; 8] = [
    "NDS",
    "mAP",
    "mATE",
    "mASE",
    "mAOE",
    "mAVE",
    "mAAE",
    "long_tail_mAP",
];

impl Validate for RobustnessReport {
    fn validate(&self) -> Result<(), SceneError> {
        if !self.rows.len().is_multiple_of(2) {
            return Err(SceneError::invalid(
                "rows",
                "rows must come in unmasked/masked pairs",
            ));
        }
        for (i, pair) in self.rows.chunks(2).enumerate() {
            let (a, b) = (&pair[0], &pair[1]);
            if a.masked || !b.masked || a.label != b.label || a.seed != b.seed {
                return Err(SceneError::invalid(
                    format!("rows[{}]", 2 * i),
                    "expected an unmasked row followed by its masked twin",
                ));
            }
        }
        for (i, row) in self.rows.iter().enumerate() {
            for (name, v) in ROBUSTNESS_COLUMNS.iter().zip(row.metrics()) {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(SceneError::invalid(
                        format!("rows[{i}].{name}"),
                        format!("{v} is not a valid metric"),
                    ));
                }
            }
        }
        Ok(())
    }
}

impl RobustnessReport {
    /// Pairs whose masked NDS exceeds the unmasked NDS.
    pub fn nds_increases(&self) -> Vec<(&RobustnessRow, &RobustnessRow)> {
        self.rows
            .chunks(2)
            .filter(|p| p[1].nds > p[0].nds)
            .map(|p| (&p[0], &p[1]))
            .collect()
    }
}

/// Record paths of the baseline and full-guidance runs of every seed in
/// `config`.
pub fn robustness_records(config: &ExperimentConfig, dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for &seed in &config.seeds {
        for sw in [GtFlowSwitches::BASELINE, GtFlowSwitches::BEV_AND_DEC] {
            out.push(dir.join(format!("{}.json", run_stem(sw, seed))));
        }
    }
    out
}

/// Re-evaluates each stored run from its checkpoint with no view masked and
/// with one random view masked, on the eval set of `config`.
pub fn robustness(
    config: &ExperimentConfig,
    records: &[PathBuf],
) -> Result<RobustnessReport, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::Validation("no run records given".into()));
    }
    let eval_set = build(config, Split::Eval);
    let policy = mask_policy(config);
    let mut rows = Vec::with_capacity(2 * records.len());
    for path in records {
        if !path.is_file() {
            return Err(HarnessError::Validation(format!(
                "missing run record {}",
                path.display()
            )));
        }
        let record = load_record(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let ck = load_checkpoint(&record, dir)?;
        let plain = evaluate_checkpoint(&ck, &record.config, &eval_set, MaskPolicy::None)?;
        let masked = evaluate_checkpoint(&ck, &record.config, &eval_set, policy)?;
        rows.push(RobustnessRow::new(
            &record.label,
            record.seed,
            false,
            &plain,
        ));
        rows.push(RobustnessRow::new(
            &record.label,
            record.seed,
            true,
            &masked,
        ));
    }
    Ok(RobustnessReport {
        mask_policy: policy,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub label: String,
    pub seed: u64,
    #[serde(rename = "NDS")]
    pub nds: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationMean {
    pub label: String,
    pub runs: usize,
    #[serde(rename = "NDS")]
    pub nds: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationReport {
    /// Configuration-major: every seed of `none`, then `BEV`, then `BEV&Dec`.
    pub rows: Vec<AblationRow>,
    pub means: Vec<AblationMean>,
    pub wall_clock_s: f64,
}

impl AblationReport {
    pub fn from_records(records: &[RunRecord], wall_clock_s: f64) -> Self {
        let rows: Vec<AblationRow> = records
            .iter()
            .map(|r| AblationRow {
                label: r.label.clone(),
                seed: r.seed,
                nds: r.report.nds,
                map: r.report.map,
            })
            .collect();
        let means = ABLATION
            .iter()
            .filter_map(|sw| {
                let of: Vec<&AblationRow> = rows.iter().filter(|r| r.label == sw.label()).collect();
                (!of.is_empty()).then(|| AblationMean {
                    label: sw.label().into(),
                    runs: of.len(),
                    nds: of.iter().map(|r| r.nds).sum::<f64>() / of.len() as f64,
                    map: of.iter().map(|r| r.map).sum::<f64>() / of.len() as f64,
                })
            })
            .collect();
        Self {
            rows,
            means,
            wall_clock_s,
        }
    }

    pub fn mean(&self, label: &str) -> Option<&AblationMean> {
        self.means.iter().find(|m| m.label == label)
    }

    pub fn row(&self, label: &str, seed: u64) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.label == label && r.seed == seed)
    }
}

/// Trains and evaluates the three guidance configurations under every seed
/// of `config`, in parallel over runs. Runs are saved into `out` when given.
pub fn ablation(
    config: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<(AblationReport, Vec<RunRecord>), HarnessError> {
    config.validate()?;
    let start = Instant::now();
    let train_set = build(config, Split::Train);
    let eval_set = build(config, Split::Eval);
    let jobs: Vec<(GtFlowSwitches, u64)> = ABLATION
        .iter()
        .flat_map(|&sw| config.seeds.iter().map(move |&s| (sw, s)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(sw, seed)| {
            let r = run(&config.with_switches(sw), seed, &train_set, &eval_set)?;
            if let Some(dir) = out {
                r.save(dir)?;
            }
            Ok(r.record)
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let report = AblationReport::from_records(&records, start.elapsed().as_secs_f64());
    Ok((report, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.dataset.train_scenes = 4;
        c.dataset.eval_scenes = 3;
        c.batch_size = 2;
        c.epochs = 1;
        c.seeds = vec![0, 1];
        c
    }

    #[test]
    fn stems_are_distinct() {
        let stems: std::collections::BTreeSet<String> = ABLATION
            .iter()
            .flat_map(|&sw| (0..3).map(move |s| run_stem(sw, s)))
            .collect();
        assert_eq!(stems.len(), 9);
        assert_eq!(run_stem(GtFlowSwitches::BEV_AND_DEC, 4), "bev_dec_seed4");
    }

    #[test]
    fn ablation_grid_shape_and_labels() {
        let c = tiny();
        let (rep, records) = ablation(&c, None).unwrap();
        assert_eq!(rep.rows.len(), 3 * c.seeds.len());
        let labels: Vec<&str> = rep.means.iter().map(|m| m.label.as_str()).collect();
        assert_eq!(labels, ["none", "BEV", "BEV&Dec"]);
        for (row, rec) in rep.rows.iter().zip(&records) {
            let r = &rec.report;
            assert_eq!(row.nds, gtbev::metrics::nds(r.map, r.tp_errors()));
        }
        let params: Vec<usize> = records.iter().map(|r| r.detector_parameters).collect();
        assert!(params.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn record_round_trip_and_reevaluation() {
        let c = tiny();
        let dir = tempfile::tempdir().unwrap();
        let train_set = build(&c, Split::Train);
        let eval_set = build(&c, Split::Eval);
        let r = run(&c, 3, &train_set, &eval_set).unwrap();
        let path = r.save(dir.path()).unwrap();
        let back = load_record(&path).unwrap();
        assert_eq!(back, r.record);
        let again = reevaluate(&back, dir.path(), &eval_set, MaskPolicy::None).unwrap();
        assert_eq!(again, back.report);
        let masked = reevaluate(&back, dir.path(), &eval_set, back.mask_policy).unwrap();
        assert_eq!(masked, back.masked_report);
    }

    #[test]
    fn robustness_rejects_missing_checkpoint() {
        let c = tiny();
        let dir = tempfile::tempdir().unwrap();
        let e = robustness(&c, &robustness_records(&c, dir.path())).unwrap_err();
        assert_eq!(e.exit_code(), 2);

        let train_set = build(&c, Split::Train);
        let eval_set = build(&c, Split::Eval);
        let path = run(&c, 0, &train_set, &eval_set)
            .unwrap()
            .save(dir.path())
            .unwrap();
        std::fs::remove_file(dir.path().join(run_stem(c.gt_flow, 0) + ".gtbv")).unwrap();
        let e = robustness(&c, &[path]).unwrap_err();
        assert!(e.to_string().contains("missing checkpoint"), "{e}");
    }

    #[test]
    fn robustness_report_pairs_rows() {
        let c = tiny();
        let dir = tempfile::tempdir().unwrap();
        let (_, _) = ablation(&c, Some(dir.path())).unwrap();
        let rep = robustness(&c, &robustness_records(&c, dir.path())).unwrap();
        assert_eq!(rep.rows.len(), 2 * 2 * c.seeds.len());
        rep.validate().unwrap();
        assert_eq!(
            rep,
            robustness(&c, &robustness_records(&c, dir.path())).unwrap()
        );
        let text = io::to_json(&rep).unwrap();
        for col in ROBUSTNESS_COLUMNS {
            assert!(text.contains(&format!("\"{col}\"")), "{col}");
        }
        let back: RobustnessReport = io::from_json(&text).unwrap();
        assert_eq!(back, rep);
    }
}
