//! Low-rank adapters for the generator, the class-keyed adapter registry
//! and per-task adapter finetuning.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{draw_noise_plan, GeneratorModel, GeneratorView, LAYERS};
use crate::numcore::rng::label_hash;
use crate::numcore::{checkpoint, randn, AdamW, ParamStore, RngStream, Tape, Tensor};

/// Low-rank delta for one weight matrix `W₀ ∈ [d_out, d_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    pub layer: String,
    /// `[d_out, r]`
    pub a: Tensor,
    /// `[r, d_in]`
    pub b: Tensor,
}

impl LoraLayer {
    pub fn d_out(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.b.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    rank: usize,
    alpha: f64,
    layers: Vec<LoraLayer>,
}

impl LoraAdapter {
    pub fn a_name(layer: &str) -> String {
        format!("{layer}.lora_a")
    }

    pub fn b_name(layer: &str) -> String {
        format!("{layer}.lora_b")
    }

    /// Fresh adapter: `A ~ N(0, 1/r)`, `B = 0`, so the adapted generator
    /// starts out identical to the base.
    pub fn init(
        base: &GeneratorModel,
        rank: usize,
        alpha: f64,
        targets: &[&str],
        rng: &mut RngStream,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("LoRA rank must be positive"));
        }
        let mut layers = Vec::with_capacity(targets.len());
        for &name in targets {
            let (d_out, d_in) = base.layer_shape(name)?;
            if rank > d_out.min(d_in) {
                return Err(Error::invalid(format!(
                    "rank {rank} exceeds min dim of `{name}` ({d_out}×{d_in})"
                )));
            }
            layers.push(LoraLayer {
                layer: name.to_string(),
                a: randn(rng, &[d_out, rank], (1.0 / rank as f64).sqrt()),
                b: Tensor::zeros(&[rank, d_in]),
            });
        }
        Self::from_layers(rank, alpha, layers)
    }

    pub fn from_layers(rank: usize, alpha: f64, layers: Vec<LoraLayer>) -> Result<Self> {
        if rank == 0 || !alpha.is_finite() {
            return Err(Error::invalid("adapter needs a positive rank and finite alpha"));
        }
        for l in &layers {
            if l.a.shape() != [l.d_out(), rank] || l.b.shape() != [rank, l.d_in()] {
                return Err(Error::invalid(format!(
                    "`{}`: A {:?} and B {:?} do not have rank {rank}",
                    l.layer,
                    l.a.shape(),
                    l.b.shape()
                )));
            }
        }
        Ok(Self {
            rank,
            alpha,
            layers,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `α / r`
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn layers(&self) -> &[LoraLayer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LoraLayer> {
        self.layers.iter().find(|l| l.layer == name)
    }

    pub fn is_noop(&self) -> bool {
        self.layers.iter().all(|l| l.b.data().iter().all(|&v| v == 0.0))
    }

    /// `Σ r·(d_in + d_out)` over targeted layers.
    pub fn storage_reals(&self) -> usize {
        self.layers
            .iter()
            .map(|l| self.rank * (l.d_in() + l.d_out()))
            .sum()
    }

    pub fn storage_bytes(&self) -> usize {
        self.storage_reals() * std::mem::size_of::<f64>()
    }

    /// `W₀ + (α/r)·A·B` for one layer, materialized (for inspection only).
    pub fn merged_weight(&self, base: &GeneratorModel, layer: &str) -> Result<Tensor> {
        let l = self
            .layer(layer)
            .ok_or_else(|| Error::UnknownParam(layer.to_string()))?;
        let w0 = base.params().get(layer)?;
        let (d_out, d_in) = (l.d_out(), l.d_in());
        let mut data = w0.data().to_vec();
        let s = self.scale();
        for i in 0..d_out {
            for k in 0..self.rank {
                let aik = l.a.data()[i * self.rank + k] * s;
                if aik == 0.0 {
                    continue;
                }
                for j in 0..d_in {
                    data[i * d_in + j] += aik * l.b.data()[k * d_in + j];
                }
            }
        }
        Tensor::new(vec![d_out, d_in], data)
    }

    fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for l in &self.layers {
            store.insert(Self::a_name(&l.layer), l.a.clone())?;
            store.insert(Self::b_name(&l.layer), l.b.clone())?;
        }
        Ok(store)
    }

    fn update_from_store(&mut self, store: &ParamStore) -> Result<()> {
        for l in &mut self.layers {
            l.a = store.get(&Self::a_name(&l.layer))?.clone();
            l.b = store.get(&Self::b_name(&l.layer))?.clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let alpha = Tensor::scalar(self.alpha);
        let mut entries: Vec<(String, &Tensor)> = vec![("alpha".into(), &alpha)];
        for l in &self.layers {
            entries.push((Self::a_name(&l.layer), &l.a));
            entries.push((Self::b_name(&l.layer), &l.b));
        }
        checkpoint::save(path, entries.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = checkpoint::load(path)?;
        let mut alpha = None;
        let mut layers: Vec<LoraLayer> = Vec::new();
        for (name, t) in entries {
            if name == "alpha" {
                alpha = Some(t.item()?);
            } else if let Some(layer) = name.strip_suffix(".lora_a") {
                layers.push(LoraLayer {
                    layer: layer.to_string(),
                    a: t,
                    b: Tensor::zeros(&[1]),
                });
            } else if let Some(layer) = name.strip_suffix(".lora_b") {
                let l = layers
                    .iter_mut()
                    .find(|l| l.layer == layer)
                    .ok_or_else(|| Error::Format(format!("`{name}` before its A matrix")))?;
                l.b = t;
            } else {
                return Err(Error::Format(format!("unexpected tensor `{name}`")));
            }
        }
        let alpha = alpha.ok_or_else(|| Error::Format("adapter without alpha".into()))?;
        let rank = layers
            .first()
            .map(|l| l.a.cols())
            .ok_or_else(|| Error::Format("adapter without layers".into()))?;
        Self::from_layers(rank, alpha, layers)
    }
}

/// Adapted view of `base`; checks that every adapter layer matches.
pub fn apply_adapter<'a>(
    base: &'a GeneratorModel,
    adapter: &'a LoraAdapter,
) -> Result<GeneratorView<'a>> {
    for l in adapter.layers() {
        let (d_out, d_in) = base
            .layer_shape(&l.layer)
            .map_err(|_| Error::invalid(format!("adapter layer `{}` not in base", l.layer)))?;
        if (d_out, d_in) != (l.d_out(), l.d_in()) {
            return Err(Error::invalid(format!(
                "adapter layer `{}` is {}×{} but base is {d_out}×{d_in}",
                l.layer,
                l.d_out(),
                l.d_in()
            )));
        }
    }
    Ok(GeneratorView {
        base,
        adapter: Some(adapter),
    })
}

#[derive(Clone, Debug)]
pub struct RegistryEntry {
    pub task: usize,
    pub adapter: LoraAdapter,
    pub classes: BTreeSet<String>,
}

/// Ordered `(adapter, class set)` pairs with pairwise-disjoint class sets.
#[derive(Clone, Debug, Default)]
pub struct AdapterRegistry {
    entries: Vec<RegistryEntry>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn register<S: AsRef<str>>(
        &mut self,
        task: usize,
        adapter: LoraAdapter,
        classes: &[S],
    ) -> Result<()> {
        let set: BTreeSet<String> = classes.iter().map(|c| c.as_ref().to_string()).collect();
        for e in &self.entries {
            if let Some(c) = e.classes.intersection(&set).next() {
                return Err(Error::invalid(format!(
                    "class `{c}` already covered by the adapter of task {}",
                    e.task
                )));
            }
        }
        self.entries.push(RegistryEntry {
            task,
            adapter,
            classes: set,
        });
        Ok(())
    }

    pub fn lookup(&self, class: &str) -> Option<&RegistryEntry> {
        self.entries.iter().find(|e| e.classes.contains(class))
    }

    /// The adapted generator for `class` if registered, else the base.
    pub fn select_generator<'a>(&'a self, base: &'a GeneratorModel, class: &str) -> GeneratorView<'a> {
        GeneratorView {
            base,
            adapter: self.lookup(class).map(|e| &e.adapter),
        }
    }

    /// Writes `adapter_task{i}.llcp` per entry and `registry.json`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = RegistryManifest::default();
        for e in &self.entries {
            let file = format!("adapter_task{}.llcp", e.task);
            e.adapter.save(&dir.join(&file))?;
            for c in &e.classes {
                manifest.classes.insert(c.clone(), file.clone());
            }
            manifest.adapters.push(ManifestEntry {
                task: e.task,
                file,
                rank: e.adapter.rank(),
                storage_bytes: e.adapter.storage_bytes(),
                classes: e.classes.iter().cloned().collect(),
            });
        }
        let path = dir.join("registry.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("registry.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: RegistryManifest = serde_json::from_str(&text)?;
        let mut reg = Self::new();
        for m in manifest.adapters {
            let adapter = LoraAdapter::load(&dir.join(&m.file))?;
            reg.register(m.task, adapter, &m.classes)?;
        }
        Ok(reg)
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct RegistryManifest {
    classes: std::collections::BTreeMap<String, String>,
    adapters: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    task: usize,
    file: String,
    rank: usize,
    storage_bytes: usize,
    classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: Option<f64>,
    pub epochs: usize,
    /// Optimizer steps per epoch, each over the full exemplar set.
    pub steps_per_epoch: usize,
    pub cond_dropout: f64,
    pub optimizer: AdamW,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: None,
            epochs: 100,
            steps_per_epoch: 1,
            cond_dropout: 0.0,
            optimizer: AdamW::default(),
        }
    }
}

/// Exemplars for adapter finetuning: pixel images `[N, pixels]` and their
/// class names.
#[derive(Clone, Debug)]
pub struct LoraData {
    pub images: Tensor,
    pub classes: Vec<String>,
}

/// Trains a fresh adapter on `data` with the base generator frozen.
pub fn finetune_adapter(
    base: &GeneratorModel,
    data: &LoraData,
    config: &LoraConfig,
    rng: &mut RngStream,
) -> Result<LoraAdapter> {
    if data.classes.is_empty() || data.images.rows() != data.classes.len() {
        return Err(Error::invalid("finetune_adapter needs one class per exemplar"));
    }
    let cond: Vec<usize> = data
        .classes
        .iter()
        .map(|c| base.class_row(c))
        .collect::<Result<_>>()?;
    let targets: Vec<&str> = LAYERS.iter().map(|(w, _)| *w).collect();
    let alpha = config.alpha.unwrap_or(config.rank as f64);
    let mut init_rng = rng.derive("lora.init");
    let mut adapter = LoraAdapter::init(base, config.rank, alpha, &targets, &mut init_rng)?;
    let mut store = adapter.to_store()?;
    let mut noise_rng = rng.derive("lora.noise");
    for epoch in 0..config.epochs {
        for _ in 0..config.steps_per_epoch {
            let plan = draw_noise_plan(
                base,
                data.images.rows(),
                &cond,
                &mut noise_rng,
                config.cond_dropout,
            )?;
            let view = GeneratorView {
                base,
                adapter: Some(&adapter),
            };
            let mut tape = Tape::new();
            let vars = view.bind(&mut tape, false, Some(&store))?;
            let loss = view.denoise_loss_planned(&mut tape, &vars, &data.images, &plan)?;
            if !tape.item(loss)?.is_finite() {
                return Err(Error::NonFinite(format!("adapter loss at epoch {epoch}")));
            }
            tape.backward(loss, &mut store)?;
            store.adamw_step(&config.optimizer)?;
            adapter.update_from_store(&store)?;
        }
    }
    Ok(adapter)
}

/// Seed-derived stream for a task's adapter finetune.
pub fn adapter_rng(seed: u64, task: usize) -> RngStream {
    RngStream::new(seed, label_hash("lora")).derive_n("task", task as u64)
}
