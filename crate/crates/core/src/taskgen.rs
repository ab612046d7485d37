//! Procedural multi-domain task suites.
//!
//! Classes are 16×16 grayscale pattern renders drawn from five families on a
//! frequency × phase grid. Class names (`stripes-f3-p1`) are built from the
//! parameters, so prompt tokens are shared between classes and a text
//! encoder can compose unseen combinations. Each task applies its own
//! [`DomainSpec`] on top of the clean render.

use std::f64::consts::PI;
use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::rng::label_hash;
use crate::numcore::{RngStream, Tensor};

pub const SIDE: usize = 16;
pub const PIXELS: usize = SIDE * SIDE;
pub const FREQUENCIES: u8 = 4;
pub const PHASES: u8 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Stripes,
    Dots,
    Checker,
    Rings,
    Gradient,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Stripes,
        Family::Dots,
        Family::Checker,
        Family::Rings,
        Family::Gradient,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Stripes => "stripes",
            Family::Dots => "dots",
            Family::Checker => "checker",
            Family::Rings => "rings",
            Family::Gradient => "gradient",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub family: Family,
    /// Spatial frequency, 1..=4.
    pub frequency: u8,
    /// Phase (or direction for gradients), 0..=3 in quarter turns.
    pub phase: u8,
    pub thickness: f64,
    pub base_intensity: f64,
}

impl ClassSpec {
    pub fn new(family: Family, frequency: u8, phase: u8) -> Self {
        let thickness = match family {
            Family::Dots => 0.18,
            Family::Rings => 0.5,
            _ => 0.0,
        };
        Self {
            name: format!("{family}-f{frequency}-p{phase}"),
            family,
            frequency,
            phase,
            thickness,
            base_intensity: 0.5,
        }
    }

    /// Every class on the grid, in family-major order.
    pub fn grid() -> Vec<ClassSpec> {
        let mut out = Vec::new();
        for fam in Family::ALL {
            for f in 1..=FREQUENCIES {
                for p in 0..PHASES {
                    out.push(ClassSpec::new(fam, f, p));
                }
            }
        }
        out
    }

    fn tokens(&self) -> [String; 3] {
        [
            self.family.to_string(),
            format!("f{}", self.frequency),
            format!("p{}", self.phase),
        ]
    }

    /// Noise-free pattern value in `[0, 1]` at `(u, w)` ∈ (0,1)².
    fn pattern(&self, u: f64, w: f64, phase_jitter: f64) -> f64 {
        let f = f64::from(self.frequency);
        let phi = f64::from(self.phase) * PI / 2.0 + phase_jitter;
        match self.family {
            Family::Stripes => 0.5 + 0.5 * (2.0 * PI * f * u + phi).sin(),
            Family::Checker => {
                let s = (2.0 * PI * f * u + phi).sin() * (2.0 * PI * f * w).sin();
                0.5 + 0.5 * (4.0 * s).tanh()
            }
            Family::Dots => {
                let shift = phi / (2.0 * PI);
                let du = (f * u + shift).rem_euclid(1.0) - 0.5;
                let dw = (f * w + shift).rem_euclid(1.0) - 0.5;
                let r2 = (du * du + dw * dw) / (self.thickness * self.thickness);
                (-r2).exp()
            }
            Family::Rings => {
                let r = ((u - 0.5).powi(2) + (w - 0.5).powi(2)).sqrt();
                0.5 + 0.5 * (2.0 * PI * f * r / self.thickness + phi).cos()
            }
            Family::Gradient => {
                let dir = f64::from(self.phase) * PI / 2.0 + phase_jitter * 0.25;
                let proj = (u - 0.5) * dir.cos() + (w - 0.5) * dir.sin() + 0.5;
                let saw = (f * proj).rem_euclid(1.0);
                0.5 + 0.5 * (PI * saw).cos()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub invert: bool,
    pub gamma: f64,
    pub contrast: f64,
    pub noise: f64,
    /// Rotation angles in degrees (multiples of 90); one is drawn per sample.
    pub rotations: Vec<u16>,
    pub occlusion_prob: f64,
}

impl DomainSpec {
    pub fn identity() -> Self {
        Self {
            invert: false,
            gamma: 1.0,
            contrast: 1.0,
            noise: 0.0,
            rotations: vec![0],
            occlusion_prob: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

/// Renders one sample: jittered pattern, then the domain transform, clamped
/// to `[0, 1]`. Output shape `[16, 16]`.
pub fn render_sample(class: &ClassSpec, domain: &DomainSpec, seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed, label_hash(&class.name));
    let phase_jitter = 0.15 * rng.normal();
    let amp = 0.6 * (1.0 + 0.08 * rng.normal());
    let offset = class.base_intensity + 0.03 * rng.normal();
    let mut img = vec![0.0; PIXELS];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let u = (x as f64 + 0.5) / SIDE as f64;
            let w = (y as f64 + 0.5) / SIDE as f64;
            let v = class.pattern(u, w, phase_jitter);
            img[y * SIDE + x] = offset + amp * (v - 0.5) + 0.02 * rng.normal();
        }
    }

    // Domain draws come from their own stream so the clean render above is
    // identical across domains for a given seed.
    let mut drng = rng.derive("domain");
    let angle = domain.rotations[drng.below(domain.rotations.len())];
    let img = rotate(&img, angle);
    let mut img: Vec<f64> = img
        .into_iter()
        .map(|v| {
            let mut v = 0.5 + domain.contrast * (v - 0.5);
            if domain.invert {
                v = 1.0 - v;
            }
            v.clamp(0.0, 1.0).powf(domain.gamma)
        })
        .collect();
    if domain.occlusion_prob > 0.0 && drng.bernoulli(domain.occlusion_prob) {
        let (ox, oy) = (drng.below(SIDE - 5), drng.below(SIDE - 5));
        for y in oy..oy + 6 {
            for x in ox..ox + 6 {
                img[y * SIDE + x] = 0.5;
            }
        }
    }
    if domain.noise > 0.0 {
        for v in img.iter_mut() {
            *v += domain.noise * drng.normal();
        }
    }
    let data = img.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::new(vec![SIDE, SIDE], data).expect("finite render")
}

fn rotate(img: &[f64], angle: u16) -> Vec<f64> {
    let turns = (angle / 90) % 4;
    let mut out = img.to_vec();
    for _ in 0..turns {
        let src = out.clone();
        for y in 0..SIDE {
            for x in 0..SIDE {
                out[x * SIDE + (SIDE - 1 - y)] = src[y * SIDE + x];
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GapProfile {
    Mild,
    Hard,
}

impl std::str::FromStr for GapProfile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mild" => Ok(GapProfile::Mild),
            "hard" => Ok(GapProfile::Hard),
            other => Err(Error::invalid(format!("unknown gap profile `{other}`"))),
        }
    }
}

/// Domain for task `i` (1-based) of `n`.
pub fn task_domain(profile: GapProfile, i: usize, n: usize) -> DomainSpec {
    let s = i as f64 / n.max(1) as f64;
    match profile {
        GapProfile::Mild => DomainSpec {
            noise: 0.02 + 0.02 * s,
            ..DomainSpec::identity()
        },
        GapProfile::Hard => {
            let mut d = DomainSpec {
                noise: 0.04 + 0.06 * s,
                ..DomainSpec::identity()
            };
            match (i - 1) % 5 {
                0 => d.invert = true,
                1 => {
                    d.rotations = vec![90];
                    d.contrast = 0.7;
                }
                2 => {
                    d.gamma = 2.0;
                    d.occlusion_prob = 0.3;
                }
                3 => {
                    d.invert = true;
                    d.rotations = vec![270];
                }
                _ => {
                    d.rotations = vec![180];
                    d.gamma = 0.5;
                    d.contrast = 0.8;
                    d.occlusion_prob = 0.3;
                }
            }
            d
        }
    }
}

/// Writes a square grayscale image (values in `[0, 1]`) as binary PGM.
pub fn write_pgm(path: &std::path::Path, image: &Tensor) -> Result<()> {
    let side = (image.numel() as f64).sqrt().round() as usize;
    if side * side != image.numel() {
        return Err(Error::invalid(format!("{} pixels is not a square image", image.numel())));
    }
    let mut bytes = format!("P5\n{side} {side}\n255\n").into_bytes();
    bytes.extend(
        image
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Images as a `[N, PIXELS]` matrix with class indices local to the owner.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Indices of samples with label `c`, in dataset order.
    pub fn indices_of(&self, c: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == c).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Task {
    pub name: String,
    pub classes: Vec<ClassSpec>,
    pub domain: DomainSpec,
    pub train: Dataset,
    pub test: Dataset,
}

impl Task {
    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub base_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Clean renders per class in the generator's pretraining corpus.
    pub corpus_per_class: usize,
    pub gap: GapProfile,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_tasks: 5,
            classes_per_task: 8,
            base_classes: 16,
            train_per_class: 100,
            test_per_class: 50,
            corpus_per_class: 48,
            gap: GapProfile::Hard,
        }
    }
}

/// Base pool (task 0, identity domain), the task sequence, and the
/// generator's clean pretraining corpus over every class in the suite.
#[derive(Clone, Debug)]
pub struct TaskSequence {
    pub config: SuiteConfig,
    pub base: Task,
    pub tasks: Vec<Task>,
    pub corpus: Dataset,
    pub corpus_classes: Vec<String>,
}

impl TaskSequence {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Column `j` of the accuracy matrix: 0 is the base pool.
    pub fn column(&self, j: usize) -> &Task {
        if j == 0 {
            &self.base
        } else {
            &self.tasks[j - 1]
        }
    }

    pub fn all_class_names(&self) -> Vec<String> {
        self.corpus_classes.clone()
    }

    pub fn class_spec(&self, name: &str) -> Option<&ClassSpec> {
        std::iter::once(&self.base)
            .chain(&self.tasks)
            .flat_map(|t| &t.classes)
            .find(|c| c.name == name)
    }
}

fn sample_seed(suite_seed: u64, class: &str, split: &str, idx: usize) -> u64 {
    let rng = RngStream::new(suite_seed, label_hash(class) ^ label_hash(split));
    rng.derive_n("sample", idx as u64).next_u64()
}

fn render_split(
    seed: u64,
    classes: &[ClassSpec],
    domain: &DomainSpec,
    split: &str,
    per_class: usize,
) -> Dataset {
    let mut rows = Vec::with_capacity(classes.len() * per_class);
    let mut labels = Vec::with_capacity(classes.len() * per_class);
    for (ci, c) in classes.iter().enumerate() {
        for k in 0..per_class {
            let s = sample_seed(seed, &c.name, split, k);
            rows.push(render_sample(c, domain, s).reshape(vec![PIXELS]).unwrap());
            labels.push(ci);
        }
    }
    Dataset {
        images: Tensor::stack_rows(&rows).expect("uniform renders"),
        labels,
    }
}

/// Builds a deterministic suite from `config`.
pub fn make_suite(config: &SuiteConfig) -> Result<TaskSequence> {
    if config.classes_per_task < 2 || config.base_classes < 2 {
        return Err(Error::invalid("need at least 2 classes per task and in the base pool"));
    }
    if config.train_per_class < 2 || config.test_per_class < 1 {
        return Err(Error::invalid("train_per_class must be ≥ 2 and test_per_class ≥ 1"));
    }
    let mut grid = ClassSpec::grid();
    let needed = config.base_classes + config.n_tasks * config.classes_per_task;
    if needed > grid.len() {
        return Err(Error::invalid(format!(
            "suite needs {needed} classes but the pattern grid has {}",
            grid.len()
        )));
    }
    let mut rng = RngStream::new(config.seed, label_hash("suite"));
    for i in (1..grid.len()).rev() {
        let j = rng.below(i + 1);
        grid.swap(i, j);
    }

    // Base pool first takes classes that contribute unseen tokens, so every
    // family/frequency/phase token is covered when the pool is large enough.
    let mut seen = std::collections::HashSet::new();
    let mut base = Vec::new();
    let mut rest = Vec::new();
    for c in grid {
        let toks = c.tokens();
        if base.len() < config.base_classes && toks.iter().any(|t| !seen.contains(t)) {
            seen.extend(toks);
            base.push(c);
        } else {
            rest.push(c);
        }
    }
    while base.len() < config.base_classes {
        base.push(rest.remove(0));
    }

    let identity = DomainSpec::identity();
    let base_task = Task {
        name: "base".into(),
        train: render_split(config.seed, &base, &identity, "train", config.train_per_class),
        test: render_split(config.seed, &base, &identity, "test", config.test_per_class),
        domain: identity.clone(),
        classes: base,
    };
    let mut tasks = Vec::with_capacity(config.n_tasks);
    for i in 1..=config.n_tasks {
        let classes: Vec<ClassSpec> = rest.drain(..config.classes_per_task).collect();
        let domain = task_domain(config.gap, i, config.n_tasks);
        tasks.push(Task {
            name: format!("task{i}"),
            train: render_split(config.seed, &classes, &domain, "train", config.train_per_class),
            test: render_split(config.seed, &classes, &domain, "test", config.test_per_class),
            domain,
            classes,
        });
    }

    let all: Vec<ClassSpec> = std::iter::once(&base_task)
        .chain(&tasks)
        .flat_map(|t| t.classes.iter().cloned())
        .collect();
    let corpus = render_split(config.seed, &all, &identity, "corpus", config.corpus_per_class);
    Ok(TaskSequence {
        config: config.clone(),
        base: base_task,
        tasks,
        corpus,
        corpus_classes: all.into_iter().map(|c| c.name).collect(),
    })
}
