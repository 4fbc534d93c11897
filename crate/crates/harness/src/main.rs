use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gtbev::metrics;
use gtbev::model::checkpoint::Checkpoint;
use gtbev::scene::io::{self, DatasetManifest};
use gtbev_harness::data::{build, from_manifest, manifest, Split};
use gtbev_harness::eval::{evaluate_checkpoint, load_detector, predictions, MaskPolicy};
use gtbev_harness::experiments::{
    self, load_record, robustness_records, run, RobustnessReport, RunRecord,
};
use gtbev_harness::{report, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(
    name = "gtbev",
    about = "BEV detection with ground-truth-flow training: data, training, evaluation, reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); defaults apply to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this seed only instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the dataset manifest and the train and eval scene sets, or the
    /// scenes of a given manifest.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train the configured guidance setting; writes a run record and
    /// checkpoint per seed.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the eval split; writes a metrics report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Mask one random view per scene, drawn from this seed.
        #[arg(long)]
        mask_seed: Option<u64>,
        /// Also write the detections here.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Score a prediction file against a ground-truth scene set.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-class AP as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Re-evaluate stored baseline and full-guidance runs with and without a
    /// masked view.
    Robustness {
        #[command(flatten)]
        common: Common,
        /// Directory holding the run records and checkpoints.
        #[arg(long)]
        runs: PathBuf,
    },
    /// Train and evaluate the three guidance settings for every seed.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Tables and summary from the run records in a directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut config = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        config.seeds = vec![s];
    }
    config.output_dir = c.out.display().to_string();
    config.validate()?;
    Ok(config)
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn ensure_parent(file: &Path) -> Result<(), HarnessError> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn generate(common: &Common, manifest_path: Option<&Path>) -> Result<(), HarnessError> {
    create_dir(&common.out)?;
    if let Some(path) = manifest_path {
        let m: DatasetManifest = io::load(path)?;
        io::save(&from_manifest(&m), common.out.join("scenes.json"))?;
        return Ok(());
    }
    let config = load_config(common)?;
    io::save(&manifest(&config), common.out.join("manifest.json"))?;
    io::save(
        &build(&config, Split::Train).scene_set(),
        common.out.join("train.json"),
    )?;
    io::save(
        &build(&config, Split::Eval).scene_set(),
        common.out.join("eval.json"),
    )?;
    Ok(())
}

fn train_cmd(common: &Common) -> Result<(), HarnessError> {
    let config = load_config(common)?;
    let train_set = build(&config, Split::Train);
    let eval_set = build(&config, Split::Eval);
    for &seed in &config.seeds {
        let path = run(&config, seed, &train_set, &eval_set)?.save(&common.out)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn eval_cmd(
    common: &Common,
    checkpoint: &Path,
    mask_seed: Option<u64>,
    predictions_out: Option<&Path>,
) -> Result<(), HarnessError> {
    let config = load_config(common)?;
    let ck = Checkpoint::load(checkpoint).map_err(|e| HarnessError::checkpoint(checkpoint, e))?;
    let policy = match mask_seed {
        Some(seed) => MaskPolicy::RandomOneView { seed },
        None => MaskPolicy::None,
    };
    let eval_set = build(&config, Split::Eval);
    let report = evaluate_checkpoint(&ck, &config, &eval_set, policy)?;
    ensure_parent(&common.out)?;
    io::save(&report, &common.out)?;
    if let Some(p) = predictions_out {
        let det = load_detector(&ck, &config)?;
        ensure_parent(p)?;
        io::save(&predictions(&det, &eval_set, policy)?, p)?;
    }
    println!("NDS {:.4} mAP {:.4}", report.nds, report.map);
    Ok(())
}

fn metrics_cmd(pred: &Path, gt: &Path, out: &Path, csv: Option<&Path>) -> Result<(), HarnessError> {
    let report = metrics::evaluate_files(pred, gt)?;
    ensure_parent(out)?;
    io::save(&report, out)?;
    if let Some(p) = csv {
        let mut w =
            csv::Writer::from_path(p).map_err(|e| HarnessError::io(p, std::io::Error::other(e)))?;
        let wr = |w: &mut csv::Writer<std::fs::File>, rec: Vec<String>| {
            w.write_record(rec)
                .map_err(|e| HarnessError::io(p, std::io::Error::other(e)))
        };
        wr(&mut w, vec!["class".into(), "AP".into()])?;
        for c in gtbev::scene::ObjectClass::ALL {
            let ap = report
                .class_ap(c)
                .map(|v| v.to_string())
                .unwrap_or_default();
            wr(&mut w, vec![c.name().into(), ap])?;
        }
        w.flush().map_err(|e| HarnessError::io(p, e))?;
    }
    println!("NDS {:.4} mAP {:.4}", report.nds, report.map);
    Ok(())
}

fn robustness_cmd(common: &Common, runs: &Path) -> Result<(), HarnessError> {
    let config = load_config(common)?;
    let rep = experiments::robustness(&config, &robustness_records(&config, runs))?;
    create_dir(&common.out)?;
    io::save(&rep, common.out.join("robustness.json"))?;
    report::write_robustness(&common.out.join("robustness.csv"), &rep)?;
    for (plain, masked) in rep.nds_increases() {
        log::warn!(
            "{} seed {}: masked NDS {:.4} above unmasked {:.4}",
            plain.label,
            plain.seed,
            masked.nds,
            plain.nds
        );
    }
    Ok(())
}

fn ablate_cmd(common: &Common) -> Result<(), HarnessError> {
    let config = load_config(common)?;
    let (rep, _) = experiments::ablation(&config, Some(&common.out))?;
    io::save(&rep, common.out.join("ablation.json")).map_err(HarnessError::from)?;
    report::write_ablation(&common.out.join("ablation.csv"), &rep)?;
    for m in &rep.means {
        println!(
            "{:8} NDS {:.4} mAP {:.4} over {} seeds",
            m.label, m.nds, m.map, m.runs
        );
    }
    println!("wall clock {:.1}s", rep.wall_clock_s);
    Ok(())
}

/// Run records in `dir`, in ablation order then by seed.
fn records_in(dir: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let entries = std::fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut records = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| HarnessError::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.ends_with(".json") && name.contains("_seed") {
            records.push(load_record(&path)?);
        }
    }
    let order = |r: &RunRecord| {
        let pos = experiments::ABLATION
            .iter()
            .position(|s| s.label() == r.label)
            .unwrap_or(usize::MAX);
        (pos, r.seed)
    };
    records.sort_by_key(order);
    Ok(records)
}

fn report_cmd(runs: &Path, out: &Path) -> Result<(), HarnessError> {
    let records = records_in(runs)?;
    let robust_path = runs.join("robustness.json");
    let robust: Option<RobustnessReport> = if robust_path.is_file() {
        Some(io::load(&robust_path)?)
    } else {
        None
    };
    for p in report::emit(out, &records, robust.as_ref())? {
        println!("{}", p.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Generate { common, manifest } => generate(&common, manifest.as_deref()),
        Command::Train { common } => train_cmd(&common),
        Command::Eval {
            common,
            checkpoint,
            mask_seed,
            predictions,
        } => eval_cmd(&common, &checkpoint, mask_seed, predictions.as_deref()),
        Command::Metrics { pred, gt, out, csv } => metrics_cmd(&pred, &gt, &out, csv.as_deref()),
        Command::Robustness { common, runs } => robustness_cmd(&common, &runs),
        Command::Ablate { common } => ablate_cmd(&common),
        Command::Report { runs, out } => report_cmd(&runs, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
