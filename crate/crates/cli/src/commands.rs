//! Subcommand implementations. Each returns data so tests can drive them
//! without a process boundary.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::info;
use loraloop::continual::{
    evaluate_row, loss_log_csv, pretrain, run_method, Method, MetricsReport, Pretrained, RunOutput,
};
use loraloop::generator::{sample_cfg_many, GeneratorView, Provenance};
use loraloop::lora::AdapterRegistry;
use loraloop::taskgen::{make_suite, write_pgm, SuiteConfig};
use serde::{Deserialize, Serialize};

use crate::config::{get_key, set_key, ExperimentConfig};
use crate::store::{self, read_json, write_json};

pub const WORKERS_ENV: &str = "LORALOOP_WORKERS";
pub const MANIFEST_VERSION: u32 = 1;

/// Worker count after applying the environment cap.
pub fn capped_workers(configured: usize) -> usize {
    let cap = std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0);
    cap.map_or(configured, |c| configured.min(c)).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub name: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterRecord {
    pub task: usize,
    pub path: String,
    pub classes: Vec<String>,
    pub storage_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub config_hash: String,
    pub suite_hash: String,
    pub seed: u64,
    pub method: String,
    pub checkpoints: Vec<CheckpointRecord>,
    pub adapters: Vec<AdapterRecord>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub report: MetricsReport,
}

pub fn run_dir_name(cfg: &ExperimentConfig, seed: u64) -> String {
    format!("{}-seed{seed}", &cfg.hash()[..16])
}

/// Keys whose values change the pretrained artifacts.
fn pretrain_key(cfg: &ExperimentConfig, seed: u64) -> String {
    let mut s = seed.to_string();
    for k in crate::config::key_names().filter(|k| {
        ["suite.", "vlm.", "generator.", "pretrain."].iter().any(|p| k.starts_with(p))
            || *k == "loop.importance_decay"
    }) {
        s.push_str(&format!(";{k}={}", get_key(cfg, k).unwrap()));
    }
    s
}

/// Runs seeds and writes run directories, reusing pretrained artifacts
/// across calls with identical pretraining settings.
#[derive(Default)]
pub struct Runner {
    cache: HashMap<String, Pretrained>,
}

impl Runner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pretrained(&mut self, cfg: &ExperimentConfig, seed: u64) -> Result<&Pretrained> {
        let key = pretrain_key(cfg, seed);
        if !self.cache.contains_key(&key) {
            info!("pretraining for seed {seed}");
            let pre = pretrain(&cfg.run_config(seed)).context("pretraining")?;
            self.cache.insert(key.clone(), pre);
        }
        Ok(&self.cache[&key])
    }

    /// One seed into `out/<hash>-seed<s>`. Completed directories are never
    /// touched again.
    pub fn run_seed(&mut self, cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<RunSummary> {
        let dir = out.join(run_dir_name(cfg, seed));
        if dir.exists() {
            bail!(
                "run directory {} already exists; refusing to overwrite a completed run",
                dir.display()
            );
        }
        let mut run_cfg = cfg.run_config(seed);
        run_cfg.workers = capped_workers(run_cfg.workers);
        let output = {
            let pre = self.pretrained(cfg, seed)?;
            let output = run_method(pre, &run_cfg)?;
            (output, pre.clone())
        };
        let (output, pre) = output;
        std::fs::create_dir_all(out)?;
        let tmp = out.join(format!(".{}.partial-{}", run_dir_name(cfg, seed), std::process::id()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir_all(&tmp)?;
        let per_seed = ExperimentConfig {
            seeds: vec![seed],
            ..cfg.clone()
        };
        write_run(&tmp, &per_seed, seed, &pre, &output)?;
        std::fs::rename(&tmp, &dir).with_context(|| format!("finalizing {}", dir.display()))?;
        info!("wrote {}", dir.display());
        Ok(RunSummary {
            dir,
            report: output.report,
        })
    }
}

fn write_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    seed: u64,
    pre: &Pretrained,
    out: &RunOutput,
) -> Result<()> {
    std::fs::write(dir.join("config.conf"), cfg.to_conf_string())?;
    std::fs::write(dir.join("matrix.csv"), out.matrix.to_csv())?;
    std::fs::write(dir.join("losses.csv"), loss_log_csv(&out.loss_log))?;
    write_json(&dir.join("metrics.json"), &out.report)?;

    let ckpt = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt)?;
    let mut checkpoints = vec![CheckpointRecord {
        name: "vlm_f0".into(),
        path: "checkpoints/vlm_f0.llcp".into(),
        sha256: store::save_vlm(&ckpt, "vlm_f0", &pre.vlm)?,
    }];
    let method = cfg.run.method;
    if method != Method::ZeroShot {
        checkpoints.push(CheckpointRecord {
            name: "vlm_final".into(),
            path: "checkpoints/vlm_final.llcp".into(),
            sha256: store::save_vlm(&ckpt, "vlm_final", &out.model)?,
        });
    }
    if matches!(method, Method::LoraLoop | Method::FrozenGeneratorReplay) {
        checkpoints.push(CheckpointRecord {
            name: "generator_base".into(),
            path: "checkpoints/generator_base.llcp".into(),
            sha256: store::save_generator(&ckpt, "generator_base", &pre.generator)?,
        });
    }
    let mut adapters = Vec::new();
    if !out.registry.is_empty() {
        out.registry.save_dir(&dir.join("adapters"))?;
        for e in out.registry.entries() {
            adapters.push(AdapterRecord {
                task: e.task,
                path: format!("adapters/adapter_task{}.llcp", e.task),
                classes: e.classes.iter().cloned().collect(),
                storage_bytes: e.adapter.storage_bytes(),
            });
        }
    }
    if let Some(replay) = &out.replay {
        replay.save_dir(&dir.join("replay"))?;
    }
    let manifest = RunManifest {
        version: MANIFEST_VERSION,
        config_hash: cfg.hash(),
        suite_hash: cfg.suite_hash(),
        seed,
        method: cfg.run_config(seed).method.name(),
        checkpoints,
        adapters,
    };
    write_json(&dir.join("run_manifest.json"), &manifest)
}

pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RunSummary>> {
    let mut runner = Runner::new();
    cfg.seeds
        .iter()
        .map(|&s| runner.run_seed(cfg, s, out))
        .collect()
}

/// A loaded run directory.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub manifest: RunManifest,
    pub metrics: MetricsReport,
}

pub fn load_run(dir: &Path) -> Result<RunRecord> {
    let config = ExperimentConfig::load(&dir.join("config.conf"))?;
    Ok(RunRecord {
        dir: dir.to_path_buf(),
        config,
        manifest: read_json(&dir.join("run_manifest.json"))?,
        metrics: read_json(&dir.join("metrics.json"))?,
    })
}

// ---- ablate ----------------------------------------------------------------

/// One grid axis: a config key and its values.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, vals) = s
            .split_once('=')
            .context("grid axis must look like key=v1,v2")?;
        let values: Vec<String> = vals.split(',').map(|v| v.trim().to_string()).collect();
        ensure!(values.iter().all(|v| !v.is_empty()), "empty value in axis `{s}`");
        Ok(Axis {
            key: key.trim().to_string(),
            values,
        })
    }
}

/// Named grids mirroring the paper's ablation tables.
pub fn preset(name: &str) -> Result<Vec<Axis>> {
    let axis = |k: &str, v: &[&str]| Axis {
        key: k.into(),
        values: v.iter().map(|s| s.to_string()).collect(),
    };
    Ok(match name {
        "components" => vec![
            axis("loss.use_awc", &["false", "true"]),
            axis("loop.adapters", &["false", "true"]),
            axis("loop.filter", &["false", "true"]),
        ],
        "rank" => vec![axis("lora.rank", &["2", "4", "8", "16"])],
        "l" => vec![axis("loop.l", &["2", "4", "8", "16"])],
        "lora_policy" => vec![axis("loop.lora_policy", &["top_and_bottom", "random", "top"])],
        "filter_policy" => vec![axis("loop.filter_policy", &["top", "middle", "random", "bottom"])],
        "m_pre" => vec![axis("loop.m_pre", &["2", "4", "8", "16"])],
        other => bail!(
            "unknown preset `{other}` (components, rank, l, lora_policy, filter_policy, m_pre)"
        ),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub settings: Vec<(String, String)>,
    pub seeds: usize,
    /// (mean, std) of Transfer, Avg, Last.
    pub stats: Option<[(f64, f64); 3]>,
    pub error: Option<String>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn cells(axes: &[Axis]) -> Vec<Vec<(String, String)>> {
    axes.iter().fold(vec![Vec::new()], |acc, ax| {
        acc.into_iter()
            .flat_map(|prefix| {
                ax.values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push((ax.key.clone(), v.clone()));
                    p
                })
            })
            .collect()
    })
}

/// Runs every cell over the configured seeds. A failing cell is recorded
/// and the grid continues.
pub fn cmd_ablate(base: &ExperimentConfig, axes: &[Axis], out: &Path) -> Result<Vec<CellResult>> {
    for ax in axes {
        ensure!(
            get_key(base, &ax.key).is_some(),
            "unknown config key `{}` in grid",
            ax.key
        );
    }
    let mut runner = Runner::new();
    let mut results = Vec::new();
    for settings in cells(axes) {
        let mut cfg = base.clone();
        let outcome = (|| -> Result<[(f64, f64); 3]> {
            for (k, v) in &settings {
                set_key(&mut cfg, k, v)?;
            }
            cfg.run_config(cfg.seeds[0]).validate()?;
            let mut t = Vec::new();
            let mut a = Vec::new();
            let mut l = Vec::new();
            for &seed in &cfg.seeds {
                let dir = out.join(run_dir_name(&cfg, seed));
                let report = if dir.join("metrics.json").exists() {
                    load_run(&dir)?.metrics
                } else {
                    runner.run_seed(&cfg, seed, out)?.report
                };
                t.push(report.transfer.unwrap_or(f64::NAN));
                a.push(report.avg.context("report without Avg")?);
                l.push(report.last.context("report without Last")?);
            }
            Ok([mean_std(&t), mean_std(&a), mean_std(&l)])
        })();
        let (stats, error) = match outcome {
            Ok(s) => (Some(s), None),
            Err(e) => {
                log::warn!("cell {settings:?} failed: {e:#}");
                (None, Some(format!("{e:#}")))
            }
        };
        results.push(CellResult {
            settings,
            seeds: base.seeds.len(),
            stats,
            error,
        });
    }
    Ok(results)
}

pub fn ablation_csv(results: &[CellResult]) -> String {
    let mut out = String::new();
    if let Some(first) = results.first() {
        for (k, _) in &first.settings {
            out.push_str(k);
            out.push(',');
        }
    }
    out.push_str("seeds,transfer_mean,transfer_std,avg_mean,avg_std,last_mean,last_std,error\n");
    for r in results {
        for (_, v) in &r.settings {
            out.push_str(v);
            out.push(',');
        }
        out.push_str(&r.seeds.to_string());
        match r.stats {
            Some(s) => {
                for (m, sd) in s {
                    out.push_str(&format!(",{m:.6},{sd:.6}"));
                }
                out.push(',');
            }
            None => out.push_str(",,,,,,,"),
        }
        if let Some(e) = &r.error {
            out.push_str(&format!("\"{}\"", e.replace('"', "'")));
        }
        out.push('\n');
    }
    out
}

// ---- report ----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub run: String,
    pub method: String,
    pub seed: u64,
    pub transfer: Option<f64>,
    pub avg: f64,
    pub last: f64,
    pub d_transfer: Option<f64>,
    pub d_avg: f64,
    pub d_last: f64,
    pub storage_bytes: Option<u64>,
}

pub fn report_rows(runs: &[RunRecord], reference: &RunRecord) -> Result<Vec<ReportRow>> {
    let r = &reference.metrics;
    runs.iter()
        .map(|run| {
            ensure!(
                run.manifest.suite_hash == reference.manifest.suite_hash,
                "{} uses a different task suite than the reference {}",
                run.dir.display(),
                reference.dir.display()
            );
            let m = &run.metrics;
            let (avg, last) = (m.avg.context("missing Avg")?, m.last.context("missing Last")?);
            Ok(ReportRow {
                run: run
                    .dir
                    .file_name()
                    .map_or_else(|| run.dir.display().to_string(), |n| n.to_string_lossy().into()),
                method: m.method.clone(),
                seed: m.seed,
                transfer: m.transfer,
                avg,
                last,
                d_transfer: m.transfer.zip(r.transfer).map(|(a, b)| a - b),
                d_avg: avg - r.avg.context("reference without Avg")?,
                d_last: last - r.last.context("reference without Last")?,
                storage_bytes: m.storage_bytes,
            })
        })
        .collect()
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{:.2}", 100.0 * v))
}

fn signed(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{:+.2}", 100.0 * v))
}

pub fn report_markdown(rows: &[ReportRow]) -> String {
    let mut out = String::from(
        "| run | method | seed | Transfer | Δ | Avg. | Δ | Last | Δ | storage (bytes) |\n\
         |---|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.run,
            r.method,
            r.seed,
            pct(r.transfer),
            signed(r.d_transfer),
            pct(Some(r.avg)),
            signed(Some(r.d_avg)),
            pct(Some(r.last)),
            signed(Some(r.d_last)),
            r.storage_bytes.map_or("-".into(), |b| b.to_string()),
        ));
    }
    out
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut out =
        String::from("run,method,seed,transfer,d_transfer,avg,d_avg,last,d_last,storage_bytes\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.run,
            r.method,
            r.seed,
            opt(r.transfer),
            opt(r.d_transfer),
            r.avg,
            r.d_avg,
            r.last,
            r.d_last,
            r.storage_bytes.map_or(String::new(), |b| b.to_string()),
        ));
    }
    out
}

// ---- gen-preview -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreviewEntry {
    pub file: String,
    pub generator: String,
    pub seed: u64,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreviewManifest {
    pub class: String,
    pub adapter_task: Option<usize>,
    pub mean_base_confidence: Option<f64>,
    pub mean_adapted_confidence: Option<f64>,
    pub entries: Vec<PreviewEntry>,
}

/// Writes `count` base and `count` adapted samples of `class`, scored by
/// the run's final VLM.
pub fn cmd_gen_preview(run_dir: &Path, class: &str, count: usize, out: &Path) -> Result<PreviewManifest> {
    let run = load_run(run_dir)?;
    let seed = run.manifest.seed;
    let rc = run.config.run_config(seed);
    let ckpt = run_dir.join("checkpoints");
    ensure!(
        ckpt.join("generator_base.llcp").exists(),
        "run {} has no generator checkpoint",
        run_dir.display()
    );
    let base = store::load_generator(&ckpt, "generator_base", rc.generator.clone())?;
    let registry = if run_dir.join("adapters").exists() {
        AdapterRegistry::load_dir(&run_dir.join("adapters"))?
    } else {
        AdapterRegistry::new()
    };
    let suite = make_suite(&SuiteConfig {
        seed,
        ..rc.suite.clone()
    })?;
    let trained: Vec<String> = suite
        .base
        .class_names()
        .into_iter()
        .chain(suite.tasks.iter().flat_map(|t| t.class_names()))
        .collect();
    ensure!(
        trained.iter().any(|c| c == class) && base.class_row(class).is_ok(),
        "class `{class}` is not in the run's class pool"
    );
    let mut scorer = store::load_vlm(&ckpt, "vlm_final", rc.vlm.clone(), seed)?;
    scorer.ensure_classes(&[class])?;
    let tokens = scorer.prompt_tokens(class)?;
    std::fs::create_dir_all(out)?;
    let seeds: Vec<u64> = (0..count as u64).collect();
    let adapter_task = registry.lookup(class).map(|e| e.task);
    let mut entries = Vec::new();
    let mut means = [None, None];
    for (g, view) in [
        GeneratorView::base(&base),
        registry.select_generator(&base, class),
    ]
    .into_iter()
    .enumerate()
    {
        let prov = if g == 0 {
            Provenance::Base
        } else {
            adapter_task.map_or(Provenance::Base, Provenance::Adapter)
        };
        let label = if g == 0 { "base" } else { "adapted" };
        let cands = sample_cfg_many(&view, class, rc.generator.guidance, &seeds, prov)?;
        let mut sum = 0.0;
        for (i, c) in cands.iter().enumerate() {
            let file = format!("{label}_{i:03}.pgm");
            write_pgm(&out.join(&file), &c.sample)?;
            let confidence = scorer.confidence(&c.sample, &tokens)?;
            sum += confidence;
            entries.push(PreviewEntry {
                file,
                generator: prov.to_string(),
                seed: c.seed,
                confidence,
            });
        }
        if count > 0 {
            means[g] = Some(sum / count as f64);
        }
    }
    let manifest = PreviewManifest {
        class: class.to_string(),
        adapter_task,
        mean_base_confidence: means[0],
        mean_adapted_confidence: means[1],
        entries,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

// ---- taskgen dump ----------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DumpFile {
    pub file: String,
    pub split: String,
    pub class: String,
    pub label: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DumpTask {
    pub name: String,
    pub dir: String,
    pub classes: Vec<loraloop::taskgen::ClassSpec>,
    pub domain: loraloop::taskgen::DomainSpec,
    pub files: Vec<DumpFile>,
}

/// Writes every task's images as PGM plus `manifest.json`. `per_class`
/// limits the images written per class and split.
pub fn cmd_taskgen_dump(suite_cfg: &SuiteConfig, out: &Path, per_class: Option<usize>) -> Result<Vec<DumpTask>> {
    let suite = make_suite(suite_cfg)?;
    let mut tasks = Vec::new();
    for (j, task) in std::iter::once(&suite.base).chain(&suite.tasks).enumerate() {
        let dir_name = format!("task{j}");
        let dir = out.join(&dir_name);
        std::fs::create_dir_all(&dir)?;
        let mut files = Vec::new();
        for (split, data) in [("train", &task.train), ("test", &task.test)] {
            let mut written = vec![0usize; task.classes.len()];
            for i in 0..data.len() {
                let label = data.labels[i];
                if per_class.is_some_and(|p| written[label] >= p) {
                    continue;
                }
                written[label] += 1;
                let file = format!("{split}_{i:05}.pgm");
                let img = loraloop::numcore::Tensor::new(vec![data.images.cols()], data.images.row(i).to_vec())?;
                write_pgm(&dir.join(&file), &img)?;
                files.push(DumpFile {
                    file,
                    split: split.into(),
                    class: task.classes[label].name.clone(),
                    label,
                });
            }
        }
        tasks.push(DumpTask {
            name: task.name.clone(),
            dir: dir_name,
            classes: task.classes.clone(),
            domain: task.domain.clone(),
            files,
        });
    }
    write_json(&out.join("manifest.json"), &tasks)?;
    Ok(tasks)
}

// ---- eval ------------------------------------------------------------------

/// Re-scores a stored VLM checkpoint on every column of the run's suite.
pub fn cmd_eval(run_dir: &Path, checkpoint: &str) -> Result<Vec<f64>> {
    let run = load_run(run_dir)?;
    let seed = run.manifest.seed;
    let rc = run.config.run_config(seed);
    let model = store::load_vlm(&run_dir.join("checkpoints"), checkpoint, rc.vlm.clone(), seed)?;
    let suite = make_suite(&SuiteConfig {
        seed,
        ..rc.suite.clone()
    })?;
    Ok(evaluate_row(&model, &suite, rc.class_incremental)?)
}
