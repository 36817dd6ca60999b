//! Sweeps: a base run config plus named overrides, each run executed in its
//! own child process so a crash only fails that run.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use ncsl_core::config::RunConfig;
use ncsl_core::eval::{write_records, ModelRecord};

use crate::pipeline::{arch_label, ordering_label, seed_override, SEED_ENV};

/// ```toml
/// base = "configs/tiny.toml"
/// output_dir = "runs/subsets"
/// seeds = [0, 1, 2]
///
/// [[runs]]
/// name = "frac-0.1"
/// set = { "dataset.fraction" = 0.1 }
/// ```
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Run config every entry starts from.
    pub base: PathBuf,
    pub output_dir: PathBuf,
    /// Defaults to the base config's seed.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    /// Train a linear probe for every run (needed by the predictor).
    #[serde(default = "yes")]
    pub probe: bool,
    /// Defaults to `records.csv` in `output_dir`.
    #[serde(default)]
    pub records: Option<PathBuf>,
    pub runs: Vec<SweepRun>,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRun {
    pub name: String,
    /// Dotted config paths and their replacement values.
    #[serde(default)]
    pub set: toml::Table,
}

/// One materialized run.
#[derive(Clone, Debug)]
pub struct Job {
    pub id: String,
    pub config: RunConfig,
    pub config_path: PathBuf,
    pub record_path: PathBuf,
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).with_context(|| format!("empty override key {key:?}"))?;
    let mut t = table;
    for p in parts {
        let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry.as_table_mut().with_context(|| format!("override {key:?}: `{p}` is not a table"))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing sweep {}", path.display()))?;
        if cfg.runs.is_empty() {
            bail!("sweep {} lists no runs", path.display());
        }
        Ok(cfg)
    }

    pub fn records_path(&self) -> PathBuf {
        self.records.clone().unwrap_or_else(|| self.output_dir.join("records.csv"))
    }

    /// Every (run, seed) pair with its config validated. The seed override
    /// from the environment replaces the seed list.
    pub fn jobs(&self) -> Result<Vec<Job>> {
        let text = fs::read_to_string(&self.base).with_context(|| format!("reading base config {}", self.base.display()))?;
        let base: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", self.base.display()))?;
        let seeds = match (seed_override()?, &self.seeds) {
            (Some(s), _) => vec![s],
            (None, Some(s)) if !s.is_empty() => s.clone(),
            (None, _) => vec![RunConfig::from_toml_str(&text)?.seed],
        };
        let mut jobs = Vec::new();
        for run in &self.runs {
            for &seed in &seeds {
                let id = format!("{}-s{seed}", run.name);
                let mut t = base.clone();
                for (k, v) in &run.set {
                    set_dotted(&mut t, k, v.clone())?;
                }
                let dir = self.output_dir.join(&id);
                t.insert("seed".into(), toml::Value::Integer(seed as i64));
                t.insert("output_dir".into(), toml::Value::String(dir.to_string_lossy().into_owned()));
                let config = RunConfig::from_toml_str(&toml::to_string(&t)?).with_context(|| format!("sweep run {id}"))?;
                jobs.push(Job { config_path: self.output_dir.join(format!("{id}.toml")), record_path: dir.join("record.json"), id, config });
            }
        }
        let mut ids: Vec<&str> = jobs.iter().map(|j| j.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            bail!("duplicate sweep run id {}", w[0]);
        }
        Ok(jobs)
    }
}

fn failed_record(job: &Job, why: String) -> ModelRecord {
    let c = &job.config;
    ModelRecord {
        model_id: job.id.clone(),
        variant: Some(c.variant.name().into()),
        ordering: Some(ordering_label(c)),
        arch: Some(arch_label(c)),
        fraction: Some(c.dataset.fraction),
        seed: Some(c.seed),
        status: format!("failed: {why}"),
        ..Default::default()
    }
}

fn last_line(path: &Path) -> String {
    fs::read_to_string(path).ok().and_then(|s| s.lines().rev().find(|l| !l.trim().is_empty()).map(str::to_string)).unwrap_or_default()
}

fn run_job(exe: &Path, job: &Job, probe: bool) -> ModelRecord {
    if let Some(rec) = fs::read_to_string(&job.record_path).ok().and_then(|s| serde_json::from_str::<ModelRecord>(&s).ok()) {
        if !rec.failed() {
            log::info!("{}: record exists, skipping", job.id);
            return rec;
        }
    }
    let attempt = || -> Result<ModelRecord> {
        fs::create_dir_all(&job.config.output_dir)?;
        fs::write(&job.config_path, job.config.to_toml_string()?)?;
        let log_path = job.config.output_dir.join("run.log");
        let mut cmd = Command::new(exe);
        cmd.arg("run-one").arg("--config").arg(&job.config_path).arg("--id").arg(&job.id).arg("--record").arg(&job.record_path);
        if !probe {
            cmd.arg("--no-probe");
        }
        let status = cmd
            .env_remove(SEED_ENV)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(fs::File::create(&log_path)?)
            .status()
            .with_context(|| format!("spawning {}", exe.display()))?;
        if !status.success() {
            bail!("{status}; {}", last_line(&log_path));
        }
        let text = fs::read_to_string(&job.record_path)?;
        Ok(serde_json::from_str(&text)?)
    };
    match attempt() {
        Ok(r) => {
            log::info!("{}: done", job.id);
            r
        }
        Err(e) => {
            log::error!("{}: {e:#}", job.id);
            failed_record(job, format!("{e:#}"))
        }
    }
}

/// Runs every job with at most `jobs` children at a time and writes the
/// collated records, failures included, in sweep order.
pub fn run_sweep(sweep: &SweepConfig, jobs: usize, exe: &Path) -> Result<(PathBuf, Vec<ModelRecord>)> {
    let list = sweep.jobs()?;
    fs::create_dir_all(&sweep.output_dir)?;
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<ModelRecord>>> = list.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, list.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = list.get(i) else { break };
                let rec = run_job(exe, job, sweep.probe);
                *slots[i].lock().unwrap() = Some(rec);
            });
        }
    });
    let records: Vec<ModelRecord> = slots.into_iter().map(|m| m.into_inner().unwrap().expect("every job ran")).collect();
    let path = sweep.records_path();
    write_records(&path, &records)?;
    Ok((path, records))
}
