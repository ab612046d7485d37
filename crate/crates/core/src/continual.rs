//! The continual-learning loop with generator replay, its baselines, the
//! accuracy matrix and the Transfer / Avg / Last metrics.

use std::collections::BTreeSet;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::distill::{
    compute_gift_loss, GiftInputs, ImportanceMap, LossParts, LossWeights, ReplayBatch,
    TeacherSnapshot,
};
use crate::error::{Error, Result};
use crate::generator::{
    sample_cfg_many, train_generator, GeneratedCandidate, GeneratorConfig, GeneratorModel,
    Provenance,
};
use crate::lora::{adapter_rng, finetune_adapter, AdapterRegistry, LoraConfig};
use crate::numcore::rng::label_hash;
use crate::numcore::{RngStream, Tape, Tensor};
use crate::selection::{filter_candidates, select_lora_data_with, Policy, ReplaySet};
use crate::taskgen::{make_suite, Dataset, SuiteConfig, Task, TaskSequence};
use crate::vlm::{DualEncoder, LabeledBatch, VlmConfig};

pub const METRICS_VERSION: u32 = 1;

/// Which training procedure a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Method {
    LoraLoop,
    ZeroShot,
    ContinualFinetune,
    L2Anchor,
    RealReplay { budget: usize },
    FrozenGeneratorReplay,
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::LoraLoop => "lora_loop".into(),
            Method::ZeroShot => "zero_shot".into(),
            Method::ContinualFinetune => "continual_finetune".into(),
            Method::L2Anchor => "l2_anchor".into(),
            Method::RealReplay { budget } => format!("real_replay({budget})"),
            Method::FrozenGeneratorReplay => "frozen_generator_replay".into(),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "lora_loop" => Method::LoraLoop,
            "zero_shot" => Method::ZeroShot,
            "continual_finetune" => Method::ContinualFinetune,
            "l2_anchor" => Method::L2Anchor,
            "frozen_generator_replay" => Method::FrozenGeneratorReplay,
            other => {
                let budget = other
                    .strip_prefix("real_replay(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|b| b.parse().ok())
                    .ok_or_else(|| Error::invalid(format!("unknown method `{other}`")))?;
                Method::RealReplay { budget }
            }
        })
    }
}

/// Pretraining of the VLM on the base pool and of the generator on the
/// clean corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub vlm_steps: usize,
    pub vlm_batch: usize,
    pub gen_epochs: usize,
    pub gen_batch: usize,
    /// Accumulate importance during VLM pretraining so the first task's
    /// anchor penalty already protects base-pool knowledge.
    pub seed_importance: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            vlm_steps: 1500,
            vlm_batch: 64,
            gen_epochs: 30,
            gen_batch: 64,
            seed_importance: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub suite: SuiteConfig,
    pub vlm: VlmConfig,
    pub generator: GeneratorConfig,
    pub lora: LoraConfig,
    pub pretrain: PretrainConfig,
    pub method: Method,
    pub steps_per_task: usize,
    pub batch: usize,
    /// Share of each step's batch drawn from replay.
    pub replay_fraction: f64,
    /// Generate and replay synthetic samples (step 1).
    pub replay: bool,
    /// Train and route through per-task adapters (step 3).
    pub adapters: bool,
    /// Draw M_pre candidates and keep the teacher's top-k. Off means
    /// M_pre = k with a random pick.
    pub filter: bool,
    pub m_pre: usize,
    pub k: usize,
    pub l: usize,
    pub filter_policy: Policy,
    pub lora_policy: Policy,
    pub weights: LossWeights,
    pub importance_decay: f64,
    pub l2_lambda: f64,
    pub transfer_includes_row0: bool,
    pub class_incremental: bool,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            suite: SuiteConfig::default(),
            vlm: VlmConfig::default(),
            generator: GeneratorConfig::default(),
            lora: LoraConfig {
                epochs: 200,
                optimizer: crate::numcore::AdamW {
                    lr: 3e-3,
                    ..Default::default()
                },
                ..LoraConfig::default()
            },
            pretrain: PretrainConfig::default(),
            method: Method::LoraLoop,
            steps_per_task: 300,
            batch: 32,
            replay_fraction: 0.5,
            replay: true,
            adapters: true,
            filter: true,
            m_pre: 8,
            k: 1,
            l: 2,
            filter_policy: Policy::Top,
            lora_policy: Policy::TopAndBottom,
            weights: desk_weights(),
            importance_decay: ImportanceMap::DEFAULT_DECAY,
            l2_lambda: 0.1,
            transfer_includes_row0: true,
            class_incremental: false,
            workers: 1,
        }
    }
}

/// Loss weights calibrated on the toy suite. Replay holds one sample per
/// class, so distillation and consolidation need more weight than the
/// nominal defaults to hold the base pool.
pub fn desk_weights() -> LossWeights {
    LossWeights {
        cd: 10.0,
        awc: 25.0,
        ..LossWeights::default()
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.k == 0 || self.m_pre == 0 {
            return Err(Error::invalid("batch, k and m_pre must be positive"));
        }
        if self.k > self.m_pre {
            return Err(Error::invalid(format!(
                "k = {} exceeds m_pre = {}",
                self.k, self.m_pre
            )));
        }
        if self.l == 0 || !self.l.is_multiple_of(2) {
            return Err(Error::invalid("l must be a positive even number"));
        }
        if !(0.0..1.0).contains(&self.replay_fraction) {
            return Err(Error::invalid("replay_fraction must lie in [0, 1)"));
        }
        if self.l2_lambda.is_nan() || self.l2_lambda < 0.0 {
            return Err(Error::invalid("l2_lambda must be ≥ 0"));
        }
        self.weights.validate()
    }

    /// Replay rows per step when replay is active.
    fn replay_rows(&self) -> usize {
        ((self.batch as f64 * self.replay_fraction).round() as usize).min(self.batch - 1)
    }
}

/// Ordered set of classes eligible for replay.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassPool {
    classes: Vec<String>,
}

impl ClassPool {
    pub fn new<S: AsRef<str>>(base: &[S]) -> Self {
        let mut pool = Self::default();
        pool.extend(base);
        pool
    }

    pub fn extend<S: AsRef<str>>(&mut self, classes: &[S]) {
        for c in classes {
            if !self.contains(c.as_ref()) {
                self.classes.push(c.as_ref().to_string());
            }
        }
    }

    pub fn contains(&self, class: &str) -> bool {
        self.classes.iter().any(|c| c == class)
    }

    pub fn names(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// `A[i][j]`: accuracy on column `j` (0 = base pool) after task `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    n: usize,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(n_tasks: usize) -> Self {
        Self {
            n: n_tasks,
            rows: Vec::with_capacity(n_tasks + 1),
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::invalid("matrix needs at least row 0"))?;
        let mut m = Self::new(n);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn n_tasks(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.n + 1
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j]
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if self.is_complete() {
            return Err(Error::invalid("matrix already has all rows"));
        }
        if row.len() != self.n + 1 {
            return Err(Error::invalid(format!(
                "row has {} entries, expected {}",
                row.len(),
                self.n + 1
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row");
        for j in 0..=self.n {
            out.push_str(&format!(",task{j}"));
        }
        out.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            out.push_str(&i.to_string());
            for v in r {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: usize,
    /// `None` when no row precedes the task (row 0 excluded, task 1).
    pub transfer: Option<f64>,
    pub avg: f64,
    pub last: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseColumn {
    pub initial: f64,
    pub avg: f64,
    pub last: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub method: String,
    pub seed: u64,
    pub n_tasks: usize,
    pub transfer_includes_row0: bool,
    pub per_task: Vec<TaskMetrics>,
    pub transfer: Option<f64>,
    pub avg: Option<f64>,
    pub last: Option<f64>,
    pub base: BaseColumn,
    pub storage_bytes: Option<u64>,
}

/// Mean taken as `x₀ + Σ(x − x₀)/n`, which is exact for constant inputs.
fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut it = xs.into_iter();
    let first = it.next()?;
    let (mut s, mut n) = (0.0, 1usize);
    for x in it {
        s += x - first;
        n += 1;
    }
    Some(first + s / n as f64)
}

/// Transfer / Avg / Last per task and their means over tasks `1..=n`.
pub fn compute_metrics(a: &AccuracyMatrix, include_row0: bool) -> Result<MetricsReport> {
    if !a.is_complete() {
        return Err(Error::invalid(format!(
            "matrix has {} of {} rows",
            a.rows.len(),
            a.n + 1
        )));
    }
    let n = a.n;
    let first = if include_row0 { 0 } else { 1 };
    let per_task: Vec<TaskMetrics> = (1..=n)
        .map(|j| TaskMetrics {
            task: j,
            transfer: mean((first..j).map(|i| a.get(i, j))),
            avg: mean((0..=n).map(|i| a.get(i, j))).unwrap(),
            last: a.get(n, j),
        })
        .collect();
    Ok(MetricsReport {
        version: METRICS_VERSION,
        method: String::new(),
        seed: 0,
        n_tasks: n,
        transfer_includes_row0: include_row0,
        transfer: mean(per_task.iter().filter_map(|t| t.transfer)),
        avg: mean(per_task.iter().map(|t| t.avg)),
        last: mean(per_task.iter().map(|t| t.last)),
        per_task,
        base: BaseColumn {
            initial: a.get(0, 0),
            avg: mean((0..=n).map(|i| a.get(i, 0))).unwrap(),
            last: a.get(n, 0),
        },
        storage_bytes: None,
    })
}

/// Artifacts shared by every method for one seed.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub suite: TaskSequence,
    pub vlm: DualEncoder,
    pub generator: GeneratorModel,
    pub importance: ImportanceMap,
}

/// Builds the suite and pretrains the VLM and generator.
pub fn pretrain(config: &RunConfig) -> Result<Pretrained> {
    let suite_cfg = SuiteConfig {
        seed: config.seed,
        ..config.suite.clone()
    };
    let suite = make_suite(&suite_cfg)?;
    pretrain_on(suite, config)
}

pub fn pretrain_on(suite: TaskSequence, config: &RunConfig) -> Result<Pretrained> {
    let root = RngStream::new(config.seed, label_hash("pretrain"));
    let base_names = suite.base.class_names();
    let mut vlm = DualEncoder::new(config.vlm.clone(), config.seed)?;
    vlm.ensure_classes(&base_names)?;
    let mut importance = ImportanceMap::new(vlm.params(), config.importance_decay)?;
    let mut rng = root.derive("vlm");
    let data = &suite.base.train;
    for _ in 0..config.pretrain.vlm_steps {
        let batch = draw_batch(data, config.pretrain.vlm_batch, &mut rng)?;
        let mut tape = Tape::new();
        let vars = vlm.bind(&mut tape, true)?;
        let loss = vlm.ce_loss(&mut tape, &vars, &batch, &base_names)?;
        vlm.backward(&mut tape, loss)?;
        if config.pretrain.seed_importance {
            importance.update(vlm.params())?;
        }
        vlm.apply_grads()?;
    }
    importance.reset_anchor(vlm.params())?;
    info!(
        "pretrained VLM: base accuracy {:.3}",
        vlm.evaluate_accuracy(&suite.base.test, &base_names)?
    );

    let classes = suite.all_class_names();
    let mut generator = GeneratorModel::new(config.generator.clone(), &classes, config.seed)?;
    let losses = train_generator(
        &mut generator,
        &suite.corpus,
        &classes,
        config.pretrain.gen_epochs,
        config.pretrain.gen_batch,
        &mut root.derive("generator"),
    )?;
    if let Some(last) = losses.last() {
        info!("pretrained generator: final loss {last:.4}");
    }
    Ok(Pretrained {
        suite,
        vlm,
        generator,
        importance,
    })
}

fn draw_batch(data: &Dataset, size: usize, rng: &mut RngStream) -> Result<LabeledBatch> {
    if data.is_empty() {
        return Err(Error::invalid("cannot draw a batch from an empty dataset"));
    }
    let idx: Vec<usize> = (0..size).map(|_| rng.below(data.len())).collect();
    LabeledBatch::new(
        data.images.select_rows(&idx),
        idx.iter().map(|&i| data.labels[i]).collect(),
    )
}

/// Everything one method run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub model: DualEncoder,
    pub matrix: AccuracyMatrix,
    pub report: MetricsReport,
    pub registry: AdapterRegistry,
    pub loss_log: Vec<LossRecord>,
    pub replay: Option<ReplaySet>,
    pub storage_bytes: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub task: usize,
    pub step: usize,
    pub parts: LossParts,
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut out = String::from("task,step,ce,cd,ita,awc,total\n");
    for r in log {
        let p = r.parts;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.task, r.step, p.ce, p.cd, p.ita, p.awc, p.total
        ));
    }
    out
}

fn task_step_err(task: usize, step: &'static str) -> impl Fn(Error) -> Error {
    move |e| e.in_task(task, step)
}

/// Evaluation classes of column `j`.
fn eval_classes(suite: &TaskSequence, j: usize, class_incremental: bool) -> Vec<String> {
    if class_incremental {
        suite.all_class_names()
    } else {
        suite.column(j).class_names()
    }
}

/// Test labels of column `j` re-indexed into `classes`.
fn eval_data(task: &Task, classes: &[String]) -> Result<Dataset> {
    let names = task.class_names();
    let map: Vec<usize> = names
        .iter()
        .map(|n| {
            classes
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| Error::UnknownClass(n.clone()))
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        images: task.test.images.clone(),
        labels: task.test.labels.iter().map(|&l| map[l]).collect(),
    })
}

/// One accuracy-matrix row for `model`.
pub fn evaluate_row(model: &DualEncoder, suite: &TaskSequence, class_incremental: bool) -> Result<Vec<f64>> {
    let mut model = model.clone();
    (0..=suite.n_tasks())
        .map(|j| {
            let classes = eval_classes(suite, j, class_incremental);
            model.ensure_classes(&classes)?;
            let data = eval_data(suite.column(j), &classes)?;
            model.evaluate_accuracy(&data, &classes)
        })
        .collect()
}

/// Per-candidate sampling seed, unique per (run seed, task, class, index).
pub fn candidate_seed(seed: u64, task: usize, class: &str, m: usize) -> u64 {
    use rand::RngCore;
    RngStream::new(seed, label_hash("candidates") ^ label_hash(class))
        .derive_n("task", task as u64)
        .derive_n("candidate", m as u64)
        .next_u64()
}

/// Generates, scores and filters replay candidates for every pool class.
fn build_synthetic_replay(
    pre: &Pretrained,
    config: &RunConfig,
    registry: &AdapterRegistry,
    pool: &ClassPool,
    teacher: &TeacherSnapshot,
    task: usize,
) -> Result<ReplaySet> {
    // Without filtering: M_pre = k and a random pick.
    let (m, policy) = if config.filter {
        (config.m_pre, config.filter_policy)
    } else {
        (config.k, Policy::Random)
    };
    let budget = config.k;
    let per_class = |class: &str| -> Result<Vec<GeneratedCandidate>> {
        let view = if config.adapters {
            registry.select_generator(&pre.generator, class)
        } else {
            crate::generator::GeneratorView::base(&pre.generator)
        };
        let prov = registry
            .lookup(class)
            .filter(|_| config.adapters)
            .map_or(Provenance::Base, |e| Provenance::Adapter(e.task));
        let seeds: Vec<u64> = (0..m).map(|i| candidate_seed(config.seed, task, class, i)).collect();
        let cands = sample_cfg_many(&view, class, config.generator.guidance, &seeds, prov)?;
        let mut rng = RngStream::new(config.seed, label_hash("filter") ^ label_hash(class))
            .derive_n("task", task as u64);
        filter_candidates(cands, budget, policy, teacher.model(), &mut rng)
    };
    let names = pool.names();
    let kept: Vec<Result<Vec<GeneratedCandidate>>> = if config.workers > 1 {
        let chunk = names.len().div_ceil(config.workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = names
                .chunks(chunk.max(1))
                .map(|part| s.spawn(move || part.iter().map(|c| per_class(c)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("replay worker panicked"))
                .collect()
        })
    } else {
        names.iter().map(|c| per_class(c)).collect()
    };
    let mut set = ReplaySet::new();
    for (class, k) in names.iter().zip(kept) {
        set.insert_class(class, k?)?;
    }
    Ok(set)
}

/// Real-image replay buffer: `budget` training images per class.
fn real_replay_set(
    suite: &TaskSequence,
    pool: &ClassPool,
    budget: usize,
    teacher: &TeacherSnapshot,
    seed: u64,
) -> Result<ReplaySet> {
    let mut set = ReplaySet::new();
    for class in pool.names() {
        let task = std::iter::once(&suite.base)
            .chain(&suite.tasks)
            .find(|t| t.classes.iter().any(|c| &c.name == class))
            .ok_or_else(|| Error::UnknownClass(class.clone()))?;
        let local = task.classes.iter().position(|c| &c.name == class).unwrap();
        let idx = task.train.indices_of(local);
        if idx.len() < budget {
            return Err(Error::invalid(format!(
                "class `{class}` has {} images, fewer than the replay budget {budget}",
                idx.len()
            )));
        }
        let mut rng = RngStream::new(seed, label_hash("real_replay") ^ label_hash(class));
        let pick = rng.sample_without_replacement(idx.len(), budget);
        let prompt = teacher.model().template().fill(class);
        let tokens = teacher.model().prompt_tokens(class)?;
        let cands = pick
            .into_iter()
            .map(|p| {
                let sample = Tensor::new(
                    vec![task.train.images.cols()],
                    task.train.images.row(idx[p]).to_vec(),
                )?;
                let confidence = teacher.model().confidence(&sample, &tokens)?;
                Ok(GeneratedCandidate {
                    sample,
                    prompt: prompt.clone(),
                    class: class.clone(),
                    seed: idx[p] as u64,
                    confidence: Some(confidence),
                    provenance: Provenance::Base,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        set.insert_class(class, cands)?;
    }
    Ok(set)
}

/// Bytes needed to keep `budget` real images per class.
pub fn real_replay_storage_bytes(classes: usize, budget: usize, pixels: usize) -> u64 {
    (classes * budget * pixels * std::mem::size_of::<f64>()) as u64
}

/// Replay rows for one step: distinct classes, one stored sample each.
fn draw_replay(
    set: &ReplaySet,
    rows: usize,
    student: &DualEncoder,
    rng: &mut RngStream,
) -> Result<Option<ReplayBatch>> {
    let classes: Vec<&str> = set.class_names().filter(|c| !set.entries(c).is_empty()).collect();
    let take = rows.min(classes.len());
    if take < 2 {
        return Ok(None);
    }
    let pick = rng.sample_without_replacement(classes.len(), take);
    let mut images = Vec::with_capacity(take);
    let mut prompts = Vec::with_capacity(take);
    for p in pick {
        let class = classes[p];
        let entries = set.entries(class);
        let e = &entries[rng.below(entries.len())];
        images.push(e.sample.clone());
        prompts.push(student.prompt_tokens(class)?);
    }
    Ok(Some(ReplayBatch {
        images: Tensor::stack_rows(&images)?,
        prompts,
    }))
}

/// Per-task streams shared by every method so identical configurations
/// draw identical task batches.
fn batch_rng(seed: u64, task: usize) -> RngStream {
    RngStream::new(seed, label_hash("vlm.batch")).derive_n("task", task as u64)
}

fn replay_rng(seed: u64, task: usize) -> RngStream {
    RngStream::new(seed, label_hash("vlm.replay")).derive_n("task", task as u64)
}

fn train_classes(suite: &TaskSequence, pool: &ClassPool, task: &Task, ci: bool) -> (Vec<String>, Dataset) {
    if !ci {
        return (task.class_names(), task.train.clone());
    }
    let mut classes = pool.names().to_vec();
    for c in task.class_names() {
        if !classes.contains(&c) {
            classes.push(c);
        }
    }
    let _ = suite;
    let data = eval_data(
        &Task {
            test: task.train.clone(),
            ..task.clone()
        },
        &classes,
    )
    .expect("task classes are in the unified set");
    (classes, data)
}

/// Runs the configured method on pretrained artifacts.
pub fn run_method(pre: &Pretrained, config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let mut out = match config.method {
        Method::ZeroShot => run_zero_shot(pre, config)?,
        Method::ContinualFinetune => run_continual_finetune(pre, config)?,
        Method::LoraLoop => run_lora_loop(pre, config)?,
        Method::FrozenGeneratorReplay => run_lora_loop(
            pre,
            &RunConfig {
                adapters: false,
                filter: false,
                replay: true,
                ..config.clone()
            },
        )?,
        Method::RealReplay { .. } => run_lora_loop(
            pre,
            &RunConfig {
                adapters: false,
                replay: true,
                ..config.clone()
            },
        )?,
        Method::L2Anchor => run_lora_loop(
            pre,
            &RunConfig {
                adapters: false,
                replay: false,
                weights: LossWeights::none(),
                ..config.clone()
            },
        )?,
    };
    out.report.method = config.method.name();
    out.report.seed = config.seed;
    out.report.storage_bytes = out.storage_bytes;
    Ok(out)
}

fn finish(
    model: DualEncoder,
    matrix: AccuracyMatrix,
    config: &RunConfig,
    registry: AdapterRegistry,
    loss_log: Vec<LossRecord>,
    replay: Option<ReplaySet>,
    storage_bytes: Option<u64>,
) -> Result<RunOutput> {
    let report = compute_metrics(&matrix, config.transfer_includes_row0)?;
    Ok(RunOutput {
        model,
        matrix,
        report,
        registry,
        loss_log,
        replay,
        storage_bytes,
    })
}

fn run_zero_shot(pre: &Pretrained, config: &RunConfig) -> Result<RunOutput> {
    let n = pre.suite.n_tasks();
    let row = evaluate_row(&pre.vlm, &pre.suite, config.class_incremental)?;
    let mut matrix = AccuracyMatrix::new(n);
    for _ in 0..=n {
        matrix.push_row(row.clone())?;
    }
    finish(pre.vlm.clone(), matrix, config, AdapterRegistry::new(), Vec::new(), None, None)
}

/// Cross-entropy finetuning task after task, nothing else.
pub fn run_continual_finetune(pre: &Pretrained, config: &RunConfig) -> Result<RunOutput> {
    let suite = &pre.suite;
    let n = suite.n_tasks();
    let mut f = pre.vlm.clone();
    let mut matrix = AccuracyMatrix::new(n);
    matrix.push_row(evaluate_row(&f, suite, config.class_incremental)?)?;
    let mut pool = ClassPool::new(&suite.base.class_names());
    let mut log = Vec::new();
    for i in 1..=n {
        let task = &suite.tasks[i - 1];
        let (classes, data) = train_classes(suite, &pool, task, config.class_incremental);
        f.ensure_classes(&classes).map_err(task_step_err(i, "finetune"))?;
        let mut rng = batch_rng(config.seed, i);
        for step in 0..config.steps_per_task {
            let batch = draw_batch(&data, config.batch, &mut rng)?;
            let ce = f
                .finetune_step(&batch, &classes, None::<crate::vlm::NoExtra>)
                .map_err(task_step_err(i, "finetune"))?;
            log.push(LossRecord {
                task: i,
                step,
                parts: LossParts {
                    ce,
                    total: ce,
                    ..LossParts::default()
                },
            });
        }
        pool.extend(&task.class_names());
        matrix.push_row(evaluate_row(&f, suite, config.class_incremental)?)?;
        info!("continual_finetune: task {i} done");
    }
    finish(f, matrix, config, AdapterRegistry::new(), log, None, None)
}

/// The generator-replay loop. With `adapters` off it is the frozen
/// generator baseline; with `replay` off and all weights disabled it
/// reduces to plain finetuning.
pub fn run_lora_loop(pre: &Pretrained, config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let suite = &pre.suite;
    let n = suite.n_tasks();
    let mut f = pre.vlm.clone();
    let mut matrix = AccuracyMatrix::new(n);
    matrix.push_row(evaluate_row(&f, suite, config.class_incremental)?)?;
    let mut pool = ClassPool::new(&suite.base.class_names());
    let mut registry = AdapterRegistry::new();
    let mut importance = pre.importance.clone();
    let l2 = config.method == Method::L2Anchor && config.l2_lambda > 0.0;
    let mut l2_anchor = if l2 {
        Some(ImportanceMap::uniform(f.params(), 1.0)?)
    } else {
        None
    };
    let real_budget = match config.method {
        Method::RealReplay { budget } => Some(budget),
        _ => None,
    };
    let mut log = Vec::new();
    let mut last_replay = None;

    for i in 1..=n {
        let task = &suite.tasks[i - 1];
        let teacher = TeacherSnapshot::new(&f, i - 1)?;

        // (1) Replay from generators routed through the registry, filtered
        // with the frozen f^{i-1}.
        let replay = if config.replay {
            let set = match real_budget {
                Some(b) => real_replay_set(suite, &pool, b, &teacher, config.seed),
                None => build_synthetic_replay(pre, config, &registry, &pool, &teacher, i),
            }
            .map_err(task_step_err(i, "replay"))?;
            teacher.verify().map_err(task_step_err(i, "replay"))?;
            debug!("task {i}: {} replay samples over {} classes", set.len(), set.num_classes());
            Some(set)
        } else {
            None
        };

        // (2) Finetune f^{i-1} → f^i.
        let (classes, data) = train_classes(suite, &pool, task, config.class_incremental);
        f.ensure_classes(&classes).map_err(task_step_err(i, "finetune"))?;
        if config.weights.awc_active() {
            importance.reset_anchor(f.params())?;
        }
        if let Some(a) = l2_anchor.as_mut() {
            a.grow(f.params())?;
        }
        let replay_rows = if replay.is_some() { config.replay_rows() } else { 0 };
        let task_rows = config.batch - replay_rows;
        let mut brng = batch_rng(config.seed, i);
        let mut rrng = replay_rng(config.seed, i);
        let pool_names = pool.names().to_vec();
        for step in 0..config.steps_per_task {
            let batch = draw_batch(&data, task_rows, &mut brng)?;
            let rb = match &replay {
                Some(set) => draw_replay(set, replay_rows, &f, &mut rrng)?,
                None => None,
            };
            let mut tape = Tape::new();
            let vars = f.bind(&mut tape, true)?;
            let inputs = GiftInputs {
                task_batch: &batch,
                task_classes: &classes[..],
                teacher: Some(&teacher),
                replay: rb.as_ref(),
                pool_classes: &pool_names[..],
                importance: Some(&importance),
            };
            let weights = if rb.is_some() {
                config.weights
            } else {
                LossWeights {
                    use_cd: false,
                    use_ita: false,
                    ..config.weights
                }
            };
            let (mut loss, mut parts) = compute_gift_loss(&mut tape, &f, &vars, &inputs, &weights)
                .map_err(task_step_err(i, "finetune"))?;
            if let Some(anchor) = &l2_anchor {
                let pen = crate::distill::loss_awc(&mut tape, &vars, anchor)?;
                let pen = tape.scale(pen, config.l2_lambda);
                loss = tape.add(loss, pen)?;
                parts.awc = tape.item(pen)?;
                parts.total = tape.item(loss)?;
            }
            f.backward(&mut tape, loss).map_err(task_step_err(i, "finetune"))?;
            if config.weights.awc_active() {
                importance.update_excluding_penalty(f.params(), config.weights.awc)?;
            }
            f.apply_grads().map_err(task_step_err(i, "finetune"))?;
            log.push(LossRecord { task: i, step, parts });
        }

        // (3) Adapter for C^i from exemplars picked by f^i.
        if config.adapters && config.replay {
            let snapshot = TeacherSnapshot::new(&f, i)?;
            let mut prng = RngStream::new(config.seed, label_hash("lora.select"))
                .derive_n("task", i as u64);
            let sel = select_lora_data_with(
                snapshot.model(),
                &task.train,
                &task.class_names(),
                config.l,
                config.lora_policy,
                &mut prng,
            )
            .map_err(task_step_err(i, "select_lora_data"))?;
            let adapter = finetune_adapter(
                &pre.generator,
                &sel.data,
                &config.lora,
                &mut adapter_rng(config.seed, i),
            )
            .map_err(task_step_err(i, "finetune_adapter"))?;
            registry
                .register(i, adapter, &task.class_names())
                .map_err(task_step_err(i, "register_adapter"))?;
        }

        // (4) Expand the pool.
        pool.extend(&task.class_names());
        matrix.push_row(evaluate_row(&f, suite, config.class_incremental)?)?;
        info!("{}: task {i} done", config.method);
        last_replay = replay;
    }

    let storage = match real_budget {
        Some(b) => Some(real_replay_storage_bytes(
            pool.len(),
            b,
            config.vlm.pixels,
        )),
        None if config.adapters && config.replay => Some(
            registry
                .entries()
                .iter()
                .map(|e| e.adapter.storage_bytes() as u64)
                .sum(),
        ),
        None => None,
    };
    finish(f, matrix, config, registry, log, last_replay, storage)
}

/// Classes covered by registered adapters.
pub fn registry_classes(registry: &AdapterRegistry) -> BTreeSet<String> {
    registry
        .entries()
        .iter()
        .flat_map(|e| e.classes.iter().cloned())
        .collect()
}
