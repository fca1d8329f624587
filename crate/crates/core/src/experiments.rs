//! Ablation harness: the DS×DC grid, the auxiliary box-source sweep, and
//! paired learning curves, each averaged over seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{synth_generate, Dataset};
use crate::error::{Error, Result};
use crate::instrument::{learning_curve, LearningCurve};
use crate::model::{Model, ModelConfig};
use crate::training::TrainConfig;

pub const THREADS_ENV: &str = "DSFPN_THREADS";

/// Snapshot written next to every run's artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seeds: Vec<u64>,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    /// SHA-256 over the package version and both configs.
    pub content_hash: String,
    /// Artifact paths relative to the run directory.
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seeds: Vec<u64>, model_config: ModelConfig, train_config: TrainConfig) -> Self {
        let mut h = Sha256::new();
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        h.update(serde_json::to_vec(&model_config).expect("config serialises"));
        h.update(serde_json::to_vec(&train_config).expect("config serialises"));
        h.update(command.as_bytes());
        let content_hash = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            command: command.into(),
            seeds,
            model_config,
            train_config,
            content_hash,
            files: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    DsDc,
    BoxSource,
    Convergence,
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ds_dc" => Ok(Ablation::DsDc),
            "box_source" => Ok(Ablation::BoxSource),
            "convergence" => Ok(Ablation::Convergence),
            other => Err(Error::InvalidArgument(format!(
                "unknown ablation `{other}` (expected ds_dc, box_source or convergence)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub train_images: usize,
    pub val_images: usize,
    pub image_size: usize,
    pub num_classes: usize,
    /// Seed of the synthetic train/val data (shared by every run).
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    /// Evaluation interval of the learning curves.
    pub eval_interval: usize,
    /// Starting point for every row; the ablation toggles its own fields.
    pub base: ModelConfig,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            train_images: 500,
            val_images: 100,
            image_size: 64,
            num_classes: 3,
            data_seed: 2024,
            seeds: vec![0, 1, 2],
            train: TrainConfig::default(),
            eval_interval: 250,
            base: ModelConfig::default(),
        }
    }
}

impl AblationSettings {
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        Ok((
            synth_generate(self.train_images, self.image_size, self.num_classes, self.data_seed)?,
            synth_generate(self.val_images, self.image_size, self.num_classes, self.data_seed.wrapping_add(1))?,
        ))
    }
}

/// One configuration of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub ds: bool,
    pub dc: bool,
    pub box_source: Option<usize>,
    pub config: ModelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub curve: LearningCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowResult {
    pub row: AblationRow,
    pub seeds: Vec<SeedResult>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

impl RowResult {
    pub fn ap50(&self) -> (f64, f64) {
        mean_sd(&self.seeds.iter().map(|s| s.ap50).collect::<Vec<_>>())
    }
    pub fn ap(&self) -> (f64, f64) {
        mean_sd(&self.seeds.iter().map(|s| s.ap).collect::<Vec<_>>())
    }
    pub fn ap75(&self) -> (f64, f64) {
        mean_sd(&self.seeds.iter().map(|s| s.ap75).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub which: Ablation,
    pub rows: Vec<RowResult>,
}

pub const TABLE_HEADER: &str = "row,ds,dc,box_source,ap_mean,ap_sd,ap50_mean,ap50_sd,ap75_mean,ap75_sd,seeds";

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{TABLE_HEADER}\n");
        for r in &self.rows {
            let (a, asd) = r.ap();
            let (a50, a50sd) = r.ap50();
            let (a75, a75sd) = r.ap75();
            let _ = writeln!(
                s,
                "{},{},{},{},{a:.6},{asd:.6},{a50:.6},{a50sd:.6},{a75:.6},{a75sd:.6},{}",
                r.row.label,
                r.row.ds as u8,
                r.row.dc as u8,
                r.row.box_source.map(|b| b.to_string()).unwrap_or_default(),
                r.seeds.len()
            );
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mark = |b: bool| if b { "✓" } else { "✗" };
        let pm = |(m, sd): (f64, f64)| format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * sd);
        let mut s = String::new();
        match self.which {
            Ablation::BoxSource => {
                s.push_str("| aux boxes | AP | AP50 | AP75 |\n|---|---|---|---|\n");
                for r in &self.rows {
                    let _ = writeln!(s, "| {} | {} | {} | {} |", r.row.label, pm(r.ap()), pm(r.ap50()), pm(r.ap75()));
                }
            }
            _ => {
                s.push_str("| DS | DC | AP | AP50 | AP75 |\n|---|---|---|---|---|\n");
                for r in &self.rows {
                    let _ = writeln!(
                        s,
                        "| {} | {} | {} | {} | {} |",
                        mark(r.row.ds),
                        mark(r.row.dc),
                        pm(r.ap()),
                        pm(r.ap50()),
                        pm(r.ap75())
                    );
                }
            }
        }
        s
    }

    /// Long-format learning curves: `row,seed,iteration,train_ap50,val_ap50,val_ap`.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("row,seed,iteration,train_ap50,val_ap50,val_ap\n");
        for r in &self.rows {
            for sr in &r.seeds {
                for p in &sr.curve.points {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{}",
                        r.row.label, sr.seed, p.iteration, p.train_ap50, p.val_ap50, p.val_ap
                    );
                }
            }
        }
        s
    }
}

/// The configurations an ablation trains.
pub fn ablation_rows(which: Ablation, base: &ModelConfig) -> Vec<AblationRow> {
    let row = |label: String, ds: bool, dc: bool, source: Option<usize>, stages: usize| {
        let config = ModelConfig {
            ds_enabled: ds,
            dc_enabled: dc,
            num_stages: stages,
            aux_box_source: source.unwrap_or(0),
            ..base.clone()
        };
        AblationRow {
            label,
            ds,
            dc,
            box_source: source,
            config,
        }
    };
    match which {
        Ablation::DsDc => [(false, false), (true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(ds, dc)| row(format!("ds{}_dc{}", ds as u8, dc as u8), ds, dc, None, base.num_stages))
            .collect(),
        Ablation::BoxSource => (0..3)
            .map(|s| row(format!("stage{s}"), true, base.dc_enabled, Some(s), 3))
            .collect(),
        Ablation::Convergence => vec![
            row("baseline".into(), false, false, None, base.num_stages),
            row("dsfpn".into(), true, true, None, base.num_stages),
        ],
    }
}

/// Worker count: `DSFPN_THREADS` if set, else the available parallelism.
pub fn thread_budget() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains every (row, seed) pair. Jobs are independent and each is fully
/// determined by its seed, so the thread count does not affect results.
pub fn run_ablation(which: Ablation, settings: &AblationSettings, out: Option<&Path>) -> Result<AblationTable> {
    let mut base = settings.base.clone();
    base.image_size = settings.image_size;
    base.num_classes = settings.num_classes;
    let rows = ablation_rows(which, &base);
    for r in &rows {
        r.config.validate()?;
    }
    settings.train.validate()?;
    let (train_data, val_data) = settings.datasets()?;
    let jobs: Vec<(usize, u64)> = (0..rows.len())
        .flat_map(|r| settings.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<SeedResult>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = thread_budget().min(jobs.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                if j >= jobs.len() {
                    break;
                }
                let (r, seed) = jobs[j];
                let row = &rows[r];
                let run_dir = out.map(|d| d.join(&row.label).join(format!("seed{seed}")));
                let res = (|| {
                    let mut model = Model::new(row.config.clone(), seed)?;
                    let cfg = TrainConfig {
                        seed,
                        ..settings.train.clone()
                    };
                    let curve = learning_curve(&mut model, &cfg, &train_data, &val_data, settings.eval_interval, run_dir.as_deref())?;
                    let report = model.evaluate(&val_data)?.bbox;
                    if let Some(dir) = &run_dir {
                        fs::write(dir.join("curve.csv"), curve.to_csv())?;
                    }
                    Ok(SeedResult {
                        seed,
                        ap: report.ap,
                        ap50: report.ap50,
                        ap75: report.ap75,
                        curve,
                    })
                })();
                if std::env::var_os("DSFPN_QUIET").is_none() {
                    match &res {
                        Ok(s) => eprintln!("[{}] seed {seed}: AP50 {:.4}", row.label, s.ap50),
                        Err(e) => eprintln!("[{}] seed {seed}: failed: {e}", row.label),
                    }
                }
                results.lock().expect("no poisoned workers")[j] = Some(res);
            });
        }
    });
    let mut flat = results.into_inner().expect("no poisoned workers").into_iter();
    let mut table = AblationTable {
        which,
        rows: Vec::with_capacity(rows.len()),
    };
    for row in rows {
        let mut seeds = Vec::with_capacity(settings.seeds.len());
        for _ in &settings.seeds {
            seeds.push(flat.next().flatten().expect("every job ran")?);
        }
        table.rows.push(RowResult { row, seeds });
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("table.csv"), table.to_csv())?;
        fs::write(dir.join("table.md"), table.to_markdown())?;
        fs::write(dir.join("curves.csv"), table.curves_csv())?;
        let mut manifest = RunManifest::new(
            &format!("ablate {which:?}"),
            settings.seeds.clone(),
            base,
            settings.train.clone(),
        );
        manifest.files = vec!["table.csv".into(), "table.md".into(), "curves.csv".into()];
        manifest.write(dir)?;
    }
    Ok(table)
}

/// Per-seed convergence comparison between two rows of a table: iterations
/// each needs to reach half of `reference`'s final val AP50.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub seeds: Vec<u64>,
    pub thresholds: Vec<f64>,
    pub reference_iters: Vec<Option<usize>>,
    pub candidate_iters: Vec<Option<usize>>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl ConvergenceReport {
    pub fn compare(reference: &RowResult, candidate: &RowResult) -> Self {
        let mut r = ConvergenceReport {
            seeds: Vec::new(),
            thresholds: Vec::new(),
            reference_iters: Vec::new(),
            candidate_iters: Vec::new(),
        };
        for (a, b) in reference.seeds.iter().zip(&candidate.seeds) {
            let tau = 0.5 * a.curve.final_val_ap50().unwrap_or(0.0);
            r.seeds.push(a.seed);
            r.thresholds.push(tau);
            r.reference_iters.push(a.curve.iterations_to(tau));
            r.candidate_iters.push(b.curve.iterations_to(tau));
        }
        r
    }

    /// Median iterations-to-threshold (a curve that never reaches it counts
    /// as infinitely slow).
    pub fn medians(&self) -> (f64, f64) {
        let f = |v: &[Option<usize>]| median(v.iter().map(|x| x.map_or(f64::INFINITY, |i| i as f64)).collect());
        (f(&self.reference_iters), f(&self.candidate_iters))
    }
}
