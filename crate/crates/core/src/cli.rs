//! `ctcloud synth|train|eval|gradcheck --config <file> [--set key=value]... --out <dir>`
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{self, Dataset, Task};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::gradcheck::run_suite;
use crate::metrics::{evaluate_classification, evaluate_segmentation, ClassificationMetrics, SegmentationMetrics};
use crate::networks::{ClassificationModel, ModelConfig, PointModel, SegmentationModel};
use crate::params::Checkpoint;
use crate::training::{train, AugmentPreset, History, TrainState};

#[derive(Debug, Parser)]
#[command(name = "ctcloud", version, about = "CT-block point-cloud networks: data, training, evaluation, gradient checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth(CommonArgs),
    /// Train a model; writes metrics.csv and checkpoints.
    Train(CommonArgs),
    /// Evaluate a checkpoint; writes metrics.json.
    Eval(CommonArgs),
    /// Finite-difference gradient checks; writes gradcheck.csv.
    Gradcheck(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.lr0=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(cmd: &Command) -> Result<()> {
    let (args, f): (&CommonArgs, fn(&RunConfig, &Path) -> Result<()>) = match cmd {
        Command::Synth(a) => (a, cmd_synth),
        Command::Train(a) => (a, cmd_train),
        Command::Eval(a) => (a, cmd_eval),
        Command::Gradcheck(a) => (a, cmd_gradcheck),
    };
    // A config that does not parse into a valid run is a usage error.
    let cfg = RunConfig::load(args.config.as_deref(), &args.set).map_err(|e| match e {
        Error::Config(m) => Error::Usage(m),
        other => other,
    })?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    cfg.echo(&args.out)?;
    f(&cfg, &args.out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (per_class, n_points, n_train, n_test) = cfg.data.sizes();
    let mut ds = match cfg.data.task {
        Task::Classification => data::gen_shapes(per_class, n_points, cfg.seed())?,
        Task::PartSegmentation => data::gen_part_shapes(per_class, n_points, cfg.seed())?,
    };
    ds.assign_split(n_train, n_test)?;
    let manifest = data::save_dataset(out, &ds)?;
    println!(
        "wrote {} clouds ({} train, {} test) to {}",
        ds.items.len(),
        ds.split.train.len(),
        ds.split.test.len(),
        manifest.display()
    );
    Ok(())
}

fn load_manifest(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.data.manifest.as_ref().ok_or_else(|| Error::Config("data.manifest is not set".into()))?;
    data::load_dataset(path)
}

/// Model settings matched to the dataset's point and channel counts.
fn model_config(cfg: &RunConfig, ds: &Dataset) -> Result<(ModelConfig, usize)> {
    let mut m = cfg.model.resolve()?;
    let n = ds.num_points().ok_or_else(|| Error::Data("clouds differ in point count".into()))?;
    if let Some(want) = m.num_points {
        if want != n {
            return Err(Error::Config(format!("model.num_points = {} but the dataset has {} points", want, n)));
        }
    }
    m.num_points = Some(n);
    m.in_channels = ds.in_channels();
    Ok((m, n))
}

enum AnyModel {
    Cls(ClassificationModel),
    Seg(SegmentationModel),
}

fn build_model(cfg: &RunConfig, ds: &Dataset) -> Result<AnyModel> {
    let (m, n) = model_config(cfg, ds)?;
    Ok(match ds.task {
        Task::Classification => AnyModel::Cls(ClassificationModel::new(&m, n, ds.class_names.len(), cfg.seed())?),
        Task::PartSegmentation => {
            let layout = ds.layout.clone().ok_or_else(|| Error::Data("segmentation data without part layout".into()))?;
            AnyModel::Seg(SegmentationModel::new(&m, n, layout, cfg.seed())?)
        }
    })
}

#[derive(Serialize)]
#[serde(untagged)]
enum AnyMetrics {
    Cls(ClassificationMetrics),
    Seg(SegmentationMetrics),
}

fn evaluate_any(model: &AnyModel, ds: &Dataset, clouds: &[&PointCloud], cfg: &RunConfig, multi: bool) -> Result<AnyMetrics> {
    let e = &cfg.eval;
    let scales = multi.then_some((e.scales.as_slice(), e.scale_mode));
    Ok(match model {
        AnyModel::Cls(m) => AnyMetrics::Cls(evaluate_classification(m, clouds, ds.class_names.len(), e.batch_size, scales)?),
        AnyModel::Seg(m) => {
            let layout = ds.layout.as_ref().expect("segmentation model has a layout");
            AnyMetrics::Seg(evaluate_segmentation(m, clouds, layout, &ds.class_names, e.batch_size, scales)?)
        }
    })
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_manifest(cfg)?;
    let mut model = build_model(cfg, &ds)?;
    let preset = match (cfg.train.augment.preset, ds.task) {
        (AugmentPreset::Auto, Task::Classification) => AugmentPreset::Classification,
        (AugmentPreset::Auto, Task::PartSegmentation) => AugmentPreset::Segmentation,
        (p, _) => p,
    };
    let history = match &mut model {
        AnyModel::Cls(m) => train_any(m, cfg, &ds, out, preset, |m, c| {
            Ok(evaluate_classification(m, c, ds.class_names.len(), cfg.eval.batch_size, None)?.overall_accuracy)
        })?,
        AnyModel::Seg(m) => {
            let layout = ds.layout.clone().expect("segmentation model has a layout");
            train_any(m, cfg, &ds, out, preset, |m, c| {
                Ok(evaluate_segmentation(m, c, &layout, &ds.class_names, cfg.eval.batch_size, None)?.piou)
            })?
        }
    };
    if let Some(last) = history.last() {
        println!(
            "epoch {}: train loss {:.4}, train acc {:.4}{}",
            last.epoch,
            last.train_loss,
            last.train_acc,
            last.eval.map(|e| format!(", eval {:.4}", e)).unwrap_or_default()
        );
    }
    Ok(())
}

fn train_any<M: PointModel>(
    model: &mut M,
    cfg: &RunConfig,
    ds: &Dataset,
    out: &Path,
    preset: AugmentPreset,
    eval: impl Fn(&M, &[&PointCloud]) -> Result<f64>,
) -> Result<History> {
    let tcfg = cfg.train_config();
    let mut state = match &cfg.resume {
        Some(p) => TrainState::resume(&Checkpoint::load(p)?, model.store_mut(), &tcfg)?,
        None => TrainState::new(&tcfg),
    };
    state.checkpoint(model.store()).save(&out.join("init.ckpt"))?;
    let train_set = ds.train();
    let test_set = ds.test();
    let metrics_path = out.join("metrics.csv");
    let mut rows = History::default();
    let mut best = f64::NEG_INFINITY;
    let stop = cfg.stop_after.unwrap_or(usize::MAX);
    if state.epochs_done >= stop.min(tcfg.epochs) {
        write(&metrics_path, &rows.to_csv())?;
        state.checkpoint(model.store()).save(&out.join("final.ckpt"))?;
        return Ok(rows);
    }
    let history = train(
        model,
        &train_set,
        &tcfg,
        preset,
        &mut state,
        |m| if test_set.is_empty() { Ok(None) } else { eval(m, &test_set).map(Some) },
        |m, st, row| {
            rows.rows.push(row.clone());
            write(&metrics_path, &rows.to_csv())?;
            let ck = st.checkpoint(m.store());
            ck.save(&out.join("last.ckpt"))?;
            if let Some(e) = row.eval {
                if e > best {
                    best = e;
                    ck.save(&out.join("best.ckpt"))?;
                }
            }
            Ok(st.epochs_done < stop)
        },
    )?;
    state.checkpoint(model.store()).save(&out.join("final.ckpt"))?;
    Ok(history)
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_manifest(cfg)?;
    let ck_path = cfg.eval.checkpoint.as_ref().ok_or_else(|| Error::Config("eval.checkpoint is not set".into()))?;
    let ck = Checkpoint::load(ck_path)?;
    let mut model = build_model(cfg, &ds)?;
    match &mut model {
        AnyModel::Cls(m) => ck.restore_into(m.store_mut())?,
        AnyModel::Seg(m) => ck.restore_into(m.store_mut())?,
    }
    let clouds: Vec<&PointCloud> = match cfg.eval.split.as_str() {
        "test" => ds.test(),
        "train" => ds.train(),
        "all" => ds.items.iter().collect(),
        other => return Err(Error::Config(format!("eval.split {:?} is not test, train or all", other))),
    };
    if clouds.is_empty() {
        return Err(Error::Data(format!("split {:?} is empty", cfg.eval.split)));
    }
    let metrics = evaluate_any(&model, &ds, &clouds, cfg, cfg.eval.multi_scale)?;
    #[derive(Serialize)]
    struct Out<'a> {
        task: Task,
        split: &'a str,
        multi_scale: bool,
        #[serde(flatten)]
        metrics: &'a AnyMetrics,
    }
    let text = serde_json::to_string_pretty(&Out {
        task: ds.task,
        split: &cfg.eval.split,
        multi_scale: cfg.eval.multi_scale,
        metrics: &metrics,
    })
    .expect("metrics serialize");
    write(&out.join("metrics.json"), &(text.clone() + "\n"))?;
    println!("{}", text);
    Ok(())
}

pub fn cmd_gradcheck(cfg: &RunConfig, out: &Path) -> Result<()> {
    let report = run_suite(&cfg.gradcheck)?;
    write(&out.join("gradcheck.csv"), &report.to_csv())?;
    print!("{}", report.to_table());
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Numeric("gradient check failed".into()))
    }
}
