use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::commands::{build_bundle, ratio_tag};
use super::config::{ExperimentConfig, ModelKind};
use super::manifest::RunManifest;
use crate::error::{NcvError, Result};
use crate::game::Game;
use crate::metrics::{baseline_fit, evaluate, val_test_gap, BaselineConfig, BaselineKind, MetricsReport};

pub const TABLE_FILE: &str = "table.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// One (clean ratio, model, mask size, seed) training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepJob {
    pub clean_ratio: f64,
    pub model: ModelKind,
    /// NCV only.
    pub mask_size: Option<usize>,
    pub seed: u64,
}

impl SweepJob {
    pub fn cell(&self) -> String {
        let mut s = format!("{}-{:?}", ratio_tag(self.clean_ratio), self.model).to_lowercase();
        if let Some(m) = self.mask_size {
            let _ = write!(s, "-m{m}");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub job: SweepJob,
    pub val: MetricsReport,
    pub test: MetricsReport,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub clean_ratio: f64,
    pub model: ModelKind,
    pub mask_size: Option<usize>,
    pub seeds: usize,
    pub val_mean: f64,
    pub val_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
    pub gap_mean: f64,
    pub gap_std: f64,
    /// Test soundness; NCV only.
    pub soundness_mean: Option<f64>,
    pub soundness_std: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub records: Vec<RunRecord>,
    pub cells: Vec<CellSummary>,
    /// `(cell/seed, error)` for runs that failed.
    pub failures: Vec<(String, String)>,
    pub out: PathBuf,
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Fraction pair as a percentage string, `xx.xx ± yy.yy`.
pub fn format_pm(mean: f64, std: f64) -> String {
    format!("{:.2} ± {:.2}", mean * 100.0, std * 100.0)
}

/// Worker count: `NCV_THREADS` when set, otherwise the available cores.
pub fn thread_count() -> usize {
    std::env::var("NCV_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn sweep_jobs(cfg: &ExperimentConfig) -> Vec<SweepJob> {
    let mut jobs = Vec::new();
    for &clean_ratio in &cfg.sweep.clean_ratios {
        for &model in &cfg.sweep.models {
            let sizes: Vec<Option<usize>> = match (model, &cfg.sweep.mask_sizes) {
                (ModelKind::Ncv, Some(ms)) => ms.iter().copied().map(Some).collect(),
                (ModelKind::Ncv, None) => vec![Some(cfg.game.mask_size)],
                _ => vec![None],
            };
            for mask_size in sizes {
                for &seed in &cfg.sweep.seeds {
                    jobs.push(SweepJob {
                        clean_ratio,
                        model,
                        mask_size,
                        seed,
                    });
                }
            }
        }
    }
    jobs
}

/// Generates the job's dataset and trains and scores its model.
pub fn run_job(cfg: &ExperimentConfig, job: &SweepJob) -> Result<RunRecord> {
    let data_seed = cfg.dataset.seed.wrapping_add(job.seed);
    let bundle = build_bundle(cfg, job.clean_ratio, data_seed)?;
    let (val, test) = match job.model {
        ModelKind::Ncv => {
            let mut gc = cfg.game.clone();
            gc.seed = job.seed;
            if let Some(m) = job.mask_size {
                gc.mask_size = m;
            }
            let started = Instant::now();
            let mut game = Game::for_bundle(gc, &bundle)?;
            game.train(&bundle)?;
            let mut val = evaluate(&game, &bundle.val, "val")?;
            let mut test = evaluate(&game, &bundle.test, "test")?;
            let secs = started.elapsed().as_secs_f64();
            val.wall_clock_seconds = secs;
            test.wall_clock_seconds = secs;
            (val, test)
        }
        ModelKind::Linear | ModelKind::NonlinearMlp => {
            let kind = if job.model == ModelKind::Linear {
                BaselineKind::Linear
            } else {
                BaselineKind::NonlinearMlp
            };
            let bc = BaselineConfig {
                seed: job.seed,
                ..cfg.baseline.clone()
            };
            let (model, _) = baseline_fit(&bundle.train, kind, &bc)?;
            (model.report(&bundle.val, "val", job.seed)?, model.report(&bundle.test, "test", job.seed)?)
        }
    };
    let gap = val_test_gap(&val, &test);
    Ok(RunRecord {
        job: job.clone(),
        val,
        test,
        gap,
    })
}

fn summarize(cfg: &ExperimentConfig, records: &[RunRecord]) -> Vec<CellSummary> {
    let mut cells = Vec::new();
    let mut seen: Vec<String> = Vec::new();
    for job in sweep_jobs(cfg) {
        let key = job.cell();
        if seen.contains(&key) {
            continue;
        }
        seen.push(key.clone());
        let runs: Vec<&RunRecord> = records.iter().filter(|r| r.job.cell() == key).collect();
        if runs.is_empty() {
            continue;
        }
        let col = |f: &dyn Fn(&RunRecord) -> f64| runs.iter().map(|r| f(r)).collect::<Vec<_>>();
        let (val_mean, val_std) = mean_std(&col(&|r| r.val.completeness));
        let (test_mean, test_std) = mean_std(&col(&|r| r.test.completeness));
        let (gap_mean, gap_std) = mean_std(&col(&|r| r.gap));
        let sound: Vec<f64> = runs.iter().filter_map(|r| r.test.soundness).collect();
        let (soundness_mean, soundness_std) = if sound.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&sound);
            (Some(m), Some(s))
        };
        cells.push(CellSummary {
            clean_ratio: job.clean_ratio,
            model: job.model,
            mask_size: job.mask_size,
            seeds: runs.len(),
            val_mean,
            val_std,
            test_mean,
            test_std,
            gap_mean,
            gap_std,
            soundness_mean,
            soundness_std,
        });
    }
    cells
}

fn opt(v: Option<impl ToString>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_tables(out: &Path, cells: &[CellSummary]) -> Result<()> {
    let mut table = String::from("clean_ratio,model,mask_size,seeds,val_acc,test_acc,gap\n");
    let mut summary = String::from(
        "clean_ratio,model,mask_size,seeds,val_mean,val_std,test_mean,test_std,gap_mean,gap_std,soundness_mean,soundness_std\n",
    );
    for c in cells {
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{}",
            c.clean_ratio,
            c.model.label(),
            opt(c.mask_size),
            c.seeds,
            format_pm(c.val_mean, c.val_std),
            format_pm(c.test_mean, c.test_std),
            format_pm(c.gap_mean, c.gap_std),
        );
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            c.clean_ratio,
            c.model.label(),
            opt(c.mask_size),
            c.seeds,
            c.val_mean,
            c.val_std,
            c.test_mean,
            c.test_std,
            c.gap_mean,
            c.gap_std,
            opt(c.soundness_mean),
            opt(c.soundness_std),
        );
    }
    fs::write(out.join(TABLE_FILE), table)?;
    fs::write(out.join(SUMMARY_FILE), summary)?;
    Ok(())
}

/// Runs every job on a thread pool, saving each record as it completes.
/// Failed runs are reported in the output; the tables cover the rest.
pub fn sweep(cfg: &ExperimentConfig, out: &Path) -> Result<SweepOutput> {
    cfg.validate()?;
    let jobs = sweep_jobs(cfg);
    fs::create_dir_all(out.join("runs"))?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<std::result::Result<RunRecord, String>>>> = Mutex::new(vec![None; jobs.len()]);
    let workers = thread_count().min(jobs.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let outcome = run_job(cfg, job).and_then(|rec| {
                    let dir = out.join("runs").join(job.cell());
                    fs::create_dir_all(&dir)?;
                    let path = dir.join(format!("seed_{}.json", job.seed));
                    fs::write(path, serde_json::to_string_pretty(&rec)? + "\n")?;
                    Ok(rec)
                });
                slots.lock().unwrap()[i] = Some(outcome.map_err(|e| e.to_string()));
            });
        }
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (job, slot) in jobs.iter().zip(slots.into_inner().unwrap()) {
        match slot {
            Some(Ok(r)) => records.push(r),
            Some(Err(e)) => failures.push((format!("{}/seed_{}", job.cell(), job.seed), e)),
            None => failures.push((format!("{}/seed_{}", job.cell(), job.seed), "not run".into())),
        }
    }
    let cells = summarize(cfg, &records);
    write_tables(out, &cells)?;
    let mut manifest = RunManifest::new("sweep", cfg, cfg.sweep.seeds.clone());
    manifest.notes.push(format!("{} runs, {} failed, {workers} worker threads", jobs.len(), failures.len()));
    for (name, err) in &failures {
        manifest.notes.push(format!("failed {name}: {err}"));
    }
    manifest.record(out, Path::new(TABLE_FILE))?;
    manifest.record(out, Path::new(SUMMARY_FILE))?;
    for r in &records {
        manifest.record(out, &Path::new("runs").join(r.job.cell()).join(format!("seed_{}.json", r.job.seed)))?;
    }
    manifest.write(out)?;
    Ok(SweepOutput {
        records,
        cells,
        failures,
        out: out.to_path_buf(),
    })
}

impl SweepOutput {
    /// Errors when any run failed; the partial results stay on disk.
    pub fn check(&self) -> Result<()> {
        match self.failures.first() {
            None => Ok(()),
            Some((name, err)) => Err(NcvError::contract(format!(
                "{} of {} sweep runs failed; first: {name}: {err}",
                self.failures.len(),
                self.failures.len() + self.records.len()
            ))),
        }
    }
}
