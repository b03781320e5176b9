//! Seeded experiment runs and arm comparison suites.
//!
//! Layout of a run directory:
//!
//! ```text
//! <out>/seed-<s>/metrics.csv      metric log
//! <out>/seed-<s>/reliability.csv  final reliability table
//! <out>/seed-<s>/checkpoint.bin   final model and margin trackers
//! <out>/summary.csv               mean/std of the final test metrics
//! ```
//!
//! A suite writes one such directory per arm plus `<out>/comparison.csv`.
//! Summaries are computed from the final values exactly as written in the
//! per-seed metric logs, so they can be recomputed from those files.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use calibratemix::calibration::sig6;
use calibratemix::checkpoint::Checkpoint;
use calibratemix::data::{
    gaussian_blobs, gen_gaussian_classes, gen_two_moons, hadamard_blobs, load_csv, load_idx,
    subsample_labels, Dataset, SplitSpec,
};
use calibratemix::numerics::Rng;
use calibratemix::trainer::{metrics_csv, train_run};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::arms;
use crate::config::{BlobLayout, DatasetConfig, ExperimentConfig, ResolvedTrainer};
use crate::error::{CliError, Result};

/// Final test metrics of one seed, as written to its metric log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedFinal {
    pub seed: u64,
    pub ece: f64,
    pub error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std, n }
    }
}

/// The unsplit dataset for `seed`. Generated datasets draw from
/// `dataset.seed + seed`; file datasets ignore the seed.
pub fn base_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    Ok(match cfg {
        DatasetConfig::Gaussian {
            classes,
            dim,
            samples,
            separation,
            std,
            layout,
            seed: data_seed,
        } => {
            let blobs = match layout {
                BlobLayout::Axis => gaussian_blobs(*classes, *dim, *separation, *std),
                BlobLayout::Hadamard => hadamard_blobs(*classes, *dim, *separation, *std)?,
            };
            gen_gaussian_classes(&blobs, *samples, &mut Rng::new(data_seed.wrapping_add(seed)))?
        }
        DatasetConfig::TwoMoons {
            samples,
            noise,
            seed: data_seed,
        } => gen_two_moons(*samples, *noise, &mut Rng::new(data_seed.wrapping_add(seed)))?,
        DatasetConfig::Csv { path } => load_csv(path)?,
        DatasetConfig::Idx { images, labels } => load_idx(images, labels)?,
    })
}

/// The split dataset a given seed trains and evaluates on.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    let raw = base_dataset(&cfg.dataset, seed)?;
    Ok(subsample_labels(
        &raw,
        &SplitSpec {
            labels_per_class: cfg.split.labels_per_class,
            test_fraction: cfg.split.test_fraction,
            seed,
        },
    )?)
}

/// Digest of a split: per-sample tag, input bits and labels.
fn split_digest(ds: &Dataset) -> [u8; 32] {
    let mut h = Sha256::new();
    for (tag, x) in ds.tags().iter().zip(ds.inputs()) {
        h.update([*tag as u8]);
        x.iter().for_each(|v| h.update(v.to_le_bytes()));
    }
    let labeled = ds.labeled_set();
    labeled.ids.iter().zip(&labeled.labels).for_each(|(id, y)| {
        h.update(id.0.to_le_bytes());
        h.update((*y as u64).to_le_bytes());
    });
    ds.test_set()
        .labels
        .iter()
        .for_each(|y| h.update((*y as u64).to_le_bytes()));
    h.finalize().into()
}

/// Hash identifying the splits of every seed, in seed order.
pub fn split_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut h = Sha256::new();
    for &seed in &cfg.seeds {
        h.update(seed.to_le_bytes());
        h.update(split_digest(&prepare(cfg, seed)?));
    }
    Ok(hex::encode(&h.finalize()[..8]))
}

/// Writes through a temporary file in the same directory and renames it
/// into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let io = |e: std::io::Error| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(contents).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn parse_sig6(s: String) -> f64 {
    s.parse().expect("sig6 output parses as f64")
}

/// Trains one seed and writes its files under `dir`.
pub fn run_seed(
    cfg: &ExperimentConfig,
    trainer: &ResolvedTrainer,
    seed: u64,
    dir: &Path,
) -> Result<SeedFinal> {
    let ds = prepare(cfg, seed)?;
    let tc = trainer.trainer_config(ds.classes(), &cfg.model.hidden, &cfg.evaluation);
    let run = match train_run(&tc, &cfg.augmentation.spec(), &ds, seed) {
        Ok(run) => run,
        Err(abort) => {
            // keep whatever was logged before the failure
            write_atomic(&dir.join("metrics.csv"), metrics_csv(&abort.history).as_bytes())?;
            write_atomic(&dir.join("abort.txt"), format!("{abort}\n").as_bytes())?;
            return Err(abort.error.into());
        }
    };
    let report = run
        .final_report
        .as_ref()
        .ok_or_else(|| CliError::Usage("no test split to evaluate".into()))?;
    write_atomic(&dir.join("metrics.csv"), metrics_csv(&run.history).as_bytes())?;
    write_atomic(&dir.join("reliability.csv"), report.reliability_csv().as_bytes())?;
    let checkpoint = Checkpoint {
        step: run.state.step,
        model: run.state.model,
        aum: Some(run.state.aum),
        apm: Some(run.state.apm),
    };
    write_atomic(&dir.join("checkpoint.bin"), &checkpoint.to_bytes())?;
    Ok(SeedFinal {
        seed,
        ece: parse_sig6(sig6(report.ece)),
        error: parse_sig6(sig6(report.error_rate)),
    })
}

pub const SUMMARY_HEADER: &str = "metric,mean,std,n";

pub fn summary_csv(finals: &[SeedFinal]) -> String {
    let ece = Stat::of(&finals.iter().map(|f| f.ece).collect::<Vec<_>>());
    let err = Stat::of(&finals.iter().map(|f| f.error).collect::<Vec<_>>());
    format!(
        "{SUMMARY_HEADER}\ntest_ece,{},{},{}\ntest_error,{},{},{}\n",
        ece.mean, ece.std, ece.n, err.mean, err.std, err.n
    )
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn run_seeds(cfg: &ExperimentConfig, trainer: &ResolvedTrainer, out: &Path) -> Vec<(u64, Result<SeedFinal>)> {
    cfg.seeds
        .par_iter()
        .map(|&seed| (seed, run_seed(cfg, trainer, seed, &seed_dir(out, seed))))
        .collect()
}

/// Runs every seed of `cfg` into `out` and writes the summary. Seeds that
/// fail keep their partial logs; the summary is only written when all
/// seeds finish.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SeedFinal>> {
    let results = run_seeds(cfg, &cfg.trainer, out);
    let mut finals = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(f) => finals.push(f),
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    if !failures.is_empty() {
        return Err(CliError::Failed { failures });
    }
    write_atomic(&out.join("summary.csv"), summary_csv(&finals).as_bytes())?;
    Ok(finals)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmOutcome {
    pub arm: String,
    pub split_hash: String,
    /// Per-seed finals, or the failure messages.
    pub result: std::result::Result<Vec<SeedFinal>, Vec<String>>,
}

pub const COMPARISON_HEADER: &str = "arm,metric,mean,std,n,status,split_hash";

pub fn comparison_csv(arms: &[ArmOutcome]) -> String {
    let mut out = format!("{COMPARISON_HEADER}\n");
    for a in arms {
        match &a.result {
            Ok(finals) => {
                let ece = Stat::of(&finals.iter().map(|f| f.ece).collect::<Vec<_>>());
                let err = Stat::of(&finals.iter().map(|f| f.error).collect::<Vec<_>>());
                for (metric, s) in [("test_ece", ece), ("test_error", err)] {
                    out.push_str(&format!(
                        "{},{metric},{},{},{},ok,{}\n",
                        a.arm, s.mean, s.std, s.n, a.split_hash
                    ));
                }
            }
            Err(_) => {
                for metric in ["test_ece", "test_error"] {
                    out.push_str(&format!("{},{metric},,,0,failed,{}\n", a.arm, a.split_hash));
                }
            }
        }
    }
    out
}

/// Runs every arm on every seed with identical splits, writing each arm
/// under `<out>/<arm>` and the comparison table at `<out>/comparison.csv`.
/// A failing arm is reported in the table; the others still complete.
pub fn run_suite(cfg: &ExperimentConfig, arm_names: &[String], out: &Path) -> Result<Vec<ArmOutcome>> {
    if arm_names.len() < 2 {
        return Err(CliError::Usage(format!(
            "a suite needs at least 2 arms, got {}",
            arm_names.len()
        )));
    }
    let trainers = arm_names
        .iter()
        .map(|name| arms::apply(name, &cfg.trainer_section)?.resolve())
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, u64)> = (0..arm_names.len())
        .flat_map(|a| cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let results: Vec<Result<SeedFinal>> = jobs
        .par_iter()
        .map(|&(a, seed)| run_seed(cfg, &trainers[a], seed, &seed_dir(&out.join(&arm_names[a]), seed)))
        .collect();

    let mut outcomes = Vec::new();
    for (a, name) in arm_names.iter().enumerate() {
        let mut finals = Vec::new();
        let mut failures = Vec::new();
        for ((arm, seed), r) in jobs.iter().zip(&results) {
            if *arm != a {
                continue;
            }
            match r {
                Ok(f) => finals.push(*f),
                Err(e) => failures.push(format!("seed {seed}: {e}")),
            }
        }
        let arm_cfg = ExperimentConfig {
            trainer: trainers[a].clone(),
            ..cfg.clone()
        };
        let result = if failures.is_empty() {
            write_atomic(
                &out.join(name).join("summary.csv"),
                summary_csv(&finals).as_bytes(),
            )?;
            Ok(finals)
        } else {
            Err(failures)
        };
        outcomes.push(ArmOutcome {
            arm: name.clone(),
            split_hash: split_hash(&arm_cfg)?,
            result,
        });
    }
    write_atomic(&out.join("comparison.csv"), comparison_csv(&outcomes).as_bytes())?;
    Ok(outcomes)
}
