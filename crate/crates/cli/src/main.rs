//! `dsfpn` command-line driver.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dsfpn::dataset::{self, coco_read, coco_write, read_ppm, synth_generate, DetectionRecord};
use dsfpn::experiments::{run_ablation, Ablation, AblationSettings, ConvergenceReport, RunManifest};
use dsfpn::instrument::{export_feature_maps, grad_probe, GradProbeReport};
use dsfpn::metrics::{dets_from_records, evaluate_all, gts_from_dataset};
use dsfpn::model::{Model, ModelConfig};
use dsfpn::training::{train, EvalSets, TrainConfig};
use dsfpn::{Error, Result};

#[derive(Parser)]
#[command(name = "dsfpn", version, about = "Dually supervised FPN detector on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset (PPM images + COCO JSON).
    Synth {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector.
    Train {
        /// Experiment JSON: {"model": {...}, "train": {...}}; all fields optional.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training annotations (COCO JSON).
        #[arg(long)]
        data: PathBuf,
        /// Validation annotations, evaluated during and after training.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        eval_interval: Option<usize>,
    },
    /// Evaluate a checkpoint (or a detections file) and print metrics as JSON.
    Eval {
        #[arg(long, required_unless_present = "detections")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Evaluate this results file instead of running a model.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Detect objects in one PPM image and print detections as JSON.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Per-layer gradient norms with dual supervision on and off at the same
    /// initialisation.
    Probe {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        n: usize,
        /// Annotations to draw batches from (default: 64 synthetic images).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write channel-summed pyramid maps of one image as PGM files.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Path prefix of the output files.
        #[arg(long, default_value = "features")]
        out: PathBuf,
    },
    /// Run an ablation and write CSV/markdown tables.
    Ablate {
        #[arg(long, value_parser = ["ds_dc", "box_source", "convergence"])]
        which: String,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Settings JSON (dataset sizes, schedule, base model config).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        train_images: Option<usize>,
        #[arg(long)]
        val_images: Option<usize>,
        #[arg(long)]
        eval_interval: Option<usize>,
    },
}

/// One experiment: model and schedule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExperimentConfig {
    model: ModelConfig,
    train: TrainConfig,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config {
        field: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn load_experiment(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = match path {
        Some(p) => read_json(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(cfg)
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    emit(&format!("{}\n", serde_json::to_string_pretty(v)?))
}

fn to_records(image_id: u64, dets: &[dsfpn::Detection]) -> Vec<DetectionRecord> {
    dets.iter()
        .map(|d| DetectionRecord {
            image_id,
            category_id: d.label as u64 + 1,
            bbox: d.bbox.to_xywh(),
            score: d.score,
            segmentation: d.mask.as_ref().map(|m| m.to_rle()),
        })
        .collect()
}

fn cmd_synth(n: u64, size: usize, classes: usize, seed: u64, out: &Path) -> Result<()> {
    let d = synth_generate(n as usize, size, classes, seed)?;
    coco_write(&d, &out.join("annotations.json"))?;
    eprintln!("wrote {} images to {}", d.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    val: Option<&Path>,
    out: &Path,
    iterations: Option<usize>,
    seed: Option<u64>,
    eval_interval: Option<usize>,
) -> Result<()> {
    let mut exp = load_experiment(config)?;
    if let Some(i) = iterations {
        exp.train.iterations = i;
        exp.train.lr_steps.retain(|&s| s < i);
    }
    if let Some(s) = seed {
        exp.train.seed = s;
    }
    if let Some(e) = eval_interval {
        exp.train.eval_interval = e;
    }
    if exp.train.log_every == 0 {
        exp.train.log_every = 100;
    }
    let train_data = coco_read(data)?;
    exp.model.num_classes = train_data.num_classes();
    if train_data.image_size > 0 {
        exp.model.image_size = train_data.image_size;
    }
    exp.model.validate()?;
    exp.train.validate()?;
    let val_data = val.map(coco_read).transpose()?;
    let mut manifest = RunManifest::new("train", vec![exp.train.seed], exp.model.clone(), exp.train.clone());
    manifest.files = vec!["log.csv".into(), "final/".into()];
    if val_data.is_some() {
        manifest.files.extend(["best/".into(), "eval.json".into()]);
    }
    manifest.write(out)?;
    let mut model = Model::new(exp.model.clone(), exp.train.seed)?;
    let sets = EvalSets {
        train: None,
        val: val_data.as_ref(),
    };
    let run = train(&mut model, &exp.train, &train_data, &sets, Some(out))?;
    if let Some(last) = run.evals.last().and_then(|e| e.val) {
        fs::write(out.join("eval.json"), serde_json::to_string_pretty(&last)?)?;
        print_json(&last)?;
    }
    eprintln!("trained {} iterations ({} skipped); checkpoint in {}", run.log.len(), run.skipped, out.join("final").display());
    Ok(())
}

fn cmd_eval(checkpoint: Option<&Path>, data: &Path, detections: Option<&Path>) -> Result<()> {
    let d = coco_read(data)?;
    let report = match detections {
        Some(p) => {
            let records = dataset::read_detections(p)?;
            let sizes: BTreeMap<u64, (usize, usize)> = d.samples.iter().map(|s| (s.id, (d.image_size, d.image_size))).collect();
            evaluate_all(&dets_from_records(&records, &sizes)?, &gts_from_dataset(&d))?
        }
        None => {
            let model = Model::load(checkpoint.expect("clap enforces one of the two"))?.stripped()?;
            model.evaluate(&d)?
        }
    };
    print_json(&report)
}

fn cmd_infer(checkpoint: &Path, image: &Path) -> Result<()> {
    let model = Model::load(checkpoint)?.stripped()?;
    let img = read_ppm(image)?;
    print_json(&to_records(0, &model.forward_infer(&img)?))
}

#[derive(Serialize)]
struct ProbeOutput {
    ds_on: GradProbeReport,
    ds_off: GradProbeReport,
    /// Earliest bottom-up layer, DS on / DS off.
    earliest_layer: String,
    ratio: f64,
}

fn cmd_probe(config: Option<&Path>, n: usize, data: Option<&Path>, seed: u64, out: Option<&Path>) -> Result<()> {
    let exp = load_experiment(config)?;
    let d = match data {
        Some(p) => coco_read(p)?,
        None => synth_generate(64, exp.model.image_size, exp.model.num_classes, seed)?,
    };
    let on = Model::new(ModelConfig { ds_enabled: true, ..exp.model.clone() }, seed)?;
    let off = Model::new(ModelConfig { ds_enabled: false, ..exp.model.clone() }, seed)?;
    let sampling = exp.train.sampling();
    let b = exp.train.batch_size;
    let ds_on = grad_probe(&on, &d, n, b, &sampling, seed, "ds_on")?;
    let ds_off = grad_probe(&off, &d, n, b, &sampling, seed, "ds_off")?;
    let earliest_layer = "backbone.0.conv1".to_string();
    let ratio = ds_on.get(&earliest_layer).unwrap_or(0.0) / ds_off.get(&earliest_layer).unwrap_or(f64::NAN);
    let result = ProbeOutput {
        ds_on,
        ds_off,
        earliest_layer,
        ratio,
    };
    if let Some(p) = out {
        fs::write(p, serde_json::to_string_pretty(&result)?)?;
    }
    print_json(&result)
}

fn cmd_export(checkpoint: &Path, image: &Path, out: &Path) -> Result<()> {
    let model = Model::load(checkpoint)?;
    let img = read_ppm(image)?;
    let paths = export_feature_maps(&model, &img, out)?;
    emit(&paths.iter().map(|p| format!("{}\n", p.display())).collect::<String>())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    which: &str,
    seeds: Vec<u64>,
    out: &Path,
    config: Option<&Path>,
    iterations: Option<usize>,
    train_images: Option<usize>,
    val_images: Option<usize>,
    eval_interval: Option<usize>,
) -> Result<()> {
    let which: Ablation = which.parse()?;
    let mut s: AblationSettings = match config {
        Some(p) => read_json(p)?,
        None => AblationSettings::default(),
    };
    s.seeds = seeds;
    if let Some(i) = iterations {
        s.train.iterations = i;
        s.train.lr_steps = vec![i * 3 / 4];
        if !s.train.iterations.is_multiple_of(s.eval_interval) {
            s.eval_interval = i;
        }
    }
    if let Some(v) = train_images {
        s.train_images = v;
    }
    if let Some(v) = val_images {
        s.val_images = v;
    }
    if let Some(v) = eval_interval {
        s.eval_interval = v;
    }
    let table = run_ablation(which, &s, Some(out))?;
    emit(&table.to_csv())?;
    eprint!("{}", table.to_markdown());
    if which == Ablation::Convergence {
        let c = ConvergenceReport::compare(&table.rows[0], &table.rows[1]);
        let (base, ds) = c.medians();
        fs::write(out.join("convergence.json"), serde_json::to_string_pretty(&c)?)?;
        eprintln!("median iterations to half the baseline's final AP50: baseline {base}, dsfpn {ds}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            n,
            size,
            classes,
            seed,
            out,
        } => cmd_synth(n, size, classes, seed, &out),
        Command::Train {
            config,
            data,
            val,
            out,
            iterations,
            seed,
            eval_interval,
        } => cmd_train(config.as_deref(), &data, val.as_deref(), &out, iterations, seed, eval_interval),
        Command::Eval {
            checkpoint,
            data,
            detections,
        } => cmd_eval(checkpoint.as_deref(), &data, detections.as_deref()),
        Command::Infer { checkpoint, image } => cmd_infer(&checkpoint, &image),
        Command::Probe {
            config,
            n,
            data,
            seed,
            out,
        } => cmd_probe(config.as_deref(), n, data.as_deref(), seed, out.as_deref()),
        Command::ExportFeatures { checkpoint, image, out } => cmd_export(&checkpoint, &image, &out),
        Command::Ablate {
            which,
            seeds,
            out,
            config,
            iterations,
            train_images,
            val_images,
            eval_interval,
        } => cmd_ablate(&which, seeds, &out, config.as_deref(), iterations, train_images, val_images, eval_interval),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
