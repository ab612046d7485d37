//! Confidence-based selection: top-k filtering of generated replay
//! candidates, top-&-bottom exemplar selection for adapter finetuning, and
//! the ablation policies.
//!
//! Ties always resolve to the lower index.

use std::cmp::Ordering;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{GeneratedCandidate, Provenance};
use crate::lora::LoraData;
use crate::numcore::{RngStream, Tensor};
use crate::taskgen::Dataset;
use crate::vlm::DualEncoder;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredItem {
    pub id: usize,
    pub class: String,
    pub confidence: f64,
}

impl ScoredItem {
    pub fn new(id: usize, class: impl Into<String>, confidence: f64) -> Result<Self> {
        if !confidence.is_finite() {
            return Err(Error::NonFinite(format!("confidence of item {id}")));
        }
        Ok(Self {
            id,
            class: class.into(),
            confidence,
        })
    }
}

fn by_conf_desc(conf: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b))
}

fn by_conf_asc(conf: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| conf[a].total_cmp(&conf[b]).then(a.cmp(&b))
}

/// Indices sorted by `(−confidence, index)`.
pub fn rank_desc(conf: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..conf.len()).collect();
    idx.sort_by(by_conf_desc(conf));
    idx
}

/// The `k` highest-confidence indices, best first.
pub fn topk_indices(conf: &[f64], k: usize) -> Vec<usize> {
    let mut idx = rank_desc(conf);
    idx.truncate(k);
    idx
}

/// `l/2` highest-confidence indices followed by the `l/2` lowest among the
/// rest.
pub fn top_and_bottom_indices(conf: &[f64], l: usize) -> Result<Vec<usize>> {
    if l == 0 || !l.is_multiple_of(2) {
        return Err(Error::invalid(format!("l must be a positive even number, got {l}")));
    }
    if conf.len() < l {
        return Err(Error::invalid(format!(
            "need at least {l} items, got {}",
            conf.len()
        )));
    }
    let half = l / 2;
    let mut out = topk_indices(conf, half);
    let mut rest: Vec<usize> = (0..conf.len()).filter(|i| !out.contains(i)).collect();
    rest.sort_by(by_conf_asc(conf));
    out.extend_from_slice(&rest[..half]);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Top,
    Bottom,
    Middle,
    Random,
    TopAndBottom,
}

impl Policy {
    pub const ALL: [Policy; 5] = [
        Policy::Top,
        Policy::Bottom,
        Policy::Middle,
        Policy::Random,
        Policy::TopAndBottom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Top => "top",
            Policy::Bottom => "bottom",
            Policy::Middle => "middle",
            Policy::Random => "random",
            Policy::TopAndBottom => "top_and_bottom",
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown selection policy `{s}`")))
    }
}

/// Positions (into `conf`) chosen by `policy` under `budget`.
pub fn select_policy(
    conf: &[f64],
    budget: usize,
    policy: Policy,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    let n = conf.len();
    if budget > n {
        return Err(Error::invalid(format!("budget {budget} exceeds {n} items")));
    }
    Ok(match policy {
        Policy::Top => topk_indices(conf, budget),
        Policy::Bottom => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(by_conf_asc(conf));
            idx.truncate(budget);
            idx
        }
        Policy::Middle => {
            let start = (n - budget) / 2;
            rank_desc(conf)[start..start + budget].to_vec()
        }
        Policy::Random => rng.sample_without_replacement(n, budget),
        Policy::TopAndBottom => top_and_bottom_indices(conf, budget)?,
    })
}

/// Item ids chosen by `policy`.
pub fn select_items(
    items: &[ScoredItem],
    budget: usize,
    policy: Policy,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    let conf: Vec<f64> = items.iter().map(|i| i.confidence).collect();
    Ok(select_policy(&conf, budget, policy, rng)?
        .into_iter()
        .map(|p| items[p].id)
        .collect())
}

/// Scores candidates with the frozen `scorer`, caching each confidence.
pub fn score_candidates(
    candidates: &mut [GeneratedCandidate],
    scorer: &DualEncoder,
) -> Result<()> {
    if candidates.is_empty() {
        return Ok(());
    }
    let rows: Vec<Tensor> = candidates
        .iter()
        .map(|c| c.sample.clone().reshape(vec![c.sample.numel()]))
        .collect::<Result<_>>()?;
    let images = Tensor::stack_rows(&rows)?;
    let prompts: Vec<Vec<usize>> = candidates
        .iter()
        .map(|c| {
            scorer
                .tokenizer()
                .encode(&c.prompt)
                .ok_or_else(|| Error::UnknownClass(c.class.clone()))
        })
        .collect::<Result<_>>()?;
    let conf = scorer.confidences(&images, &prompts)?;
    for (c, v) in candidates.iter_mut().zip(conf) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("confidence for `{}`", c.class)));
        }
        c.confidence = Some(v);
    }
    Ok(())
}

/// Keeps `budget` candidates of one class chosen by `policy` on confidences
/// from the frozen `scorer`. `Policy::Top` is the paper's SampleTopK.
pub fn filter_candidates(
    mut candidates: Vec<GeneratedCandidate>,
    budget: usize,
    policy: Policy,
    scorer: &DualEncoder,
    rng: &mut RngStream,
) -> Result<Vec<GeneratedCandidate>> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidates to select from"));
    }
    if budget == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    score_candidates(&mut candidates, scorer)?;
    let conf: Vec<f64> = candidates.iter().map(|c| c.confidence.unwrap()).collect();
    let keep = select_policy(&conf, budget.min(conf.len()), policy, rng)?;
    let mut slots: Vec<Option<GeneratedCandidate>> = candidates.into_iter().map(Some).collect();
    Ok(keep.into_iter().map(|i| slots[i].take().unwrap()).collect())
}

/// The `k` most confident candidates, best first.
pub fn sample_topk(
    candidates: Vec<GeneratedCandidate>,
    k: usize,
    scorer: &DualEncoder,
) -> Result<Vec<GeneratedCandidate>> {
    let mut unused = RngStream::new(0, 0);
    filter_candidates(candidates, k, Policy::Top, scorer, &mut unused)
}

/// Exemplars picked from a task's training data for adapter finetuning.
#[derive(Clone, Debug)]
pub struct LoraSelection {
    /// Row indices into the task dataset.
    pub indices: Vec<usize>,
    pub confidences: Vec<f64>,
    pub data: LoraData,
}

/// Per class, `l` examples chosen by `policy` on the finetuned model's
/// confidence against the class prompt.
pub fn select_lora_data_with<S: AsRef<str>>(
    model: &DualEncoder,
    data: &Dataset,
    classes: &[S],
    l: usize,
    policy: Policy,
    rng: &mut RngStream,
) -> Result<LoraSelection> {
    if l == 0 || !l.is_multiple_of(2) {
        return Err(Error::invalid(format!("l must be a positive even number, got {l}")));
    }
    let mut indices = Vec::new();
    let mut confidences = Vec::new();
    let mut names = Vec::new();
    for (c, name) in classes.iter().enumerate() {
        let name = name.as_ref();
        let idx = data.indices_of(c);
        if idx.len() < l {
            return Err(Error::invalid(format!(
                "class `{name}` has {} examples, fewer than l = {l}",
                idx.len()
            )));
        }
        let prompt = model.prompt_tokens(name)?;
        let conf = model.confidences(&data.images.select_rows(&idx), &vec![prompt; idx.len()])?;
        for p in select_policy(&conf, l, policy, rng)? {
            indices.push(idx[p]);
            confidences.push(conf[p]);
            names.push(name.to_string());
        }
    }
    Ok(LoraSelection {
        data: LoraData {
            images: data.images.select_rows(&indices),
            classes: names,
        },
        indices,
        confidences,
    })
}

/// Half highest- and half lowest-confidence examples per class.
pub fn select_lora_data<S: AsRef<str>>(
    model: &DualEncoder,
    data: &Dataset,
    classes: &[S],
    l: usize,
) -> Result<LoraSelection> {
    let mut unused = RngStream::new(0, 0);
    select_lora_data_with(model, data, classes, l, Policy::TopAndBottom, &mut unused)
}

#[derive(Clone, Debug)]
pub struct ReplayEntry {
    /// Flattened `[pixels]` sample.
    pub sample: Tensor,
    pub prompt: String,
    pub confidence: f64,
    pub seed: u64,
    pub provenance: Provenance,
}

/// Selected synthetic replay samples keyed by class.
#[derive(Clone, Debug, Default)]
pub struct ReplaySet {
    classes: IndexMap<String, Vec<ReplayEntry>>,
}

impl ReplaySet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the scored candidates of one class (replacing earlier ones).
    pub fn insert_class(&mut self, class: &str, kept: Vec<GeneratedCandidate>) -> Result<()> {
        let entries = kept
            .into_iter()
            .map(|c| {
                if c.class != class {
                    return Err(Error::invalid(format!(
                        "candidate of `{}` filed under `{class}`",
                        c.class
                    )));
                }
                let confidence = c
                    .confidence
                    .ok_or_else(|| Error::invalid("replay candidates must be scored"))?;
                Ok(ReplayEntry {
                    sample: c.sample.clone().reshape(vec![c.sample.numel()])?,
                    prompt: c.prompt,
                    confidence,
                    seed: c.seed,
                    provenance: c.provenance,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.classes.insert(class.to_string(), entries);
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(String::as_str)
    }

    pub fn entries(&self, class: &str) -> &[ReplayEntry] {
        self.classes.get(class).map_or(&[], Vec::as_slice)
    }

    /// All `(class, entry)` pairs in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ReplayEntry)> {
        self.classes
            .iter()
            .flat_map(|(c, es)| es.iter().map(move |e| (c.as_str(), e)))
    }

    pub fn max_per_class(&self) -> usize {
        self.classes.values().map(Vec::len).max().unwrap_or(0)
    }

    /// Writes one PGM per entry plus `manifest.json`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Vec::new();
        for (n, (class, e)) in self.iter().enumerate() {
            let file = format!("{n:05}.pgm");
            crate::taskgen::write_pgm(&dir.join(&file), &e.sample)?;
            manifest.push(ReplayManifestEntry {
                file,
                class: class.to_string(),
                confidence: e.confidence,
                prompt: e.prompt.clone(),
                seed: e.seed,
                generator: e.provenance.to_string(),
            });
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReplayManifestEntry {
    pub file: String,
    pub class: String,
    pub confidence: f64,
    pub prompt: String,
    pub seed: u64,
    pub generator: String,
}
