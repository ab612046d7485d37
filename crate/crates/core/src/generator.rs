//! Class-conditional denoising diffusion with classifier-free guidance.
//!
//! The denoiser is a 3-layer MLP over `[x_t, timestep embedding, class
//! embedding]` predicting the added noise. Row 0 of the class-condition
//! table is the unconditional (null) condition. Samples live in `[-1, 1]`
//! internally and are mapped back to `[0, 1]` pixel values on output.
//!
//! Schedule convention: step index `t ∈ [0, T)`, `ᾱ_t = ∏_{s ≤ t} (1 − β_s)`,
//! so `t = 0` is the least-noisy step and sampling runs `t = T−1 … 0`.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::numcore::rng::label_hash;
use crate::numcore::{randn, AdamW, ParamStore, RngStream, Tape, Tensor, Var};
use crate::taskgen::Dataset;
use crate::vlm::PromptTemplate;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas increasing linearly from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "betas must satisfy 0 < start ≤ end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|t| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// The 1000-step DDPM range (1e-4 → 0.02) rescaled to `steps` steps, so
    /// the last step is close to pure noise for short schedules too.
    pub fn ddpm(steps: usize) -> Result<Self> {
        let k = 1000.0 / steps.max(1) as f64;
        Self::linear(steps, 1e-4 * k, (0.02 * k).min(0.999))
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::invalid(format!(
                "timestep {t} out of range 0..{}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// `√ᾱ · x0 + √(1 − ᾱ) · noise`.
pub fn q_sample_with(x0: &Tensor, noise: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if x0.shape() != noise.shape() {
        return Err(Error::Shape {
            op: "q_sample",
            lhs: x0.shape().to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(noise.data())
        .map(|(x, n)| a * x + b * n)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Forward-process sample at step `t`.
pub fn q_sample(schedule: &NoiseSchedule, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
    schedule.check(t)?;
    q_sample_with(x0, noise, schedule.alpha_bar(t))
}

fn timestep_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for k in 0..half {
            let freq = (-(k as f64) / half as f64 * 10_000f64.ln()).exp();
            data.push((step as f64 * freq).sin());
        }
        for k in 0..half {
            let freq = (-(k as f64) / half as f64 * 10_000f64.ln()).exp();
            data.push((step as f64 * freq).cos());
        }
    }
    Tensor::new(vec![t.len(), dim], data).expect("finite embedding")
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub pixels: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Per-pixel std of training samples in `[-1, 1]` units.
    pub sigma_data: f64,
    pub guidance: f64,
    pub cond_dropout: f64,
    pub optimizer: AdamW,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            pixels: crate::taskgen::PIXELS,
            hidden: 128,
            time_dim: 16,
            cond_dim: 16,
            steps: 50,
            beta_start: 1e-3,
            beta_end: 0.2,
            sigma_data: 0.25,
            guidance: 7.5,
            cond_dropout: 0.1,
            optimizer: AdamW {
                lr: 1e-3,
                weight_decay: 0.0,
                ..AdamW::default()
            },
        }
    }
}

pub const COND_TABLE: &str = "cond.emb";
/// Weight matrices (`[d_out, d_in]`) and biases of the three layers.
pub const LAYERS: [(&str, &str); 3] = [("l1.w", "l1.b"), ("l2.w", "l2.b"), ("l3.w", "l3.b")];

#[derive(Clone, Debug)]
pub struct GeneratorModel {
    config: GeneratorConfig,
    params: ParamStore,
    classes: IndexMap<String, usize>,
    schedule: NoiseSchedule,
}

impl GeneratorModel {
    pub fn new<S: AsRef<str>>(config: GeneratorConfig, classes: &[S], seed: u64) -> Result<Self> {
        let mut rng = RngStream::new(seed, label_hash("generator.init"));
        let mut params = ParamStore::new();
        params.insert(
            COND_TABLE,
            randn(&mut rng, &[classes.len() + 1, config.cond_dim], 1.0),
        )?;
        let d_in = config.pixels + config.time_dim + config.cond_dim;
        let dims = [d_in, config.hidden, config.hidden, config.pixels];
        for (l, (w, b)) in LAYERS.iter().enumerate() {
            let gain = if l < 2 { 2.0 } else { 1.0 };
            let std = (gain / dims[l] as f64).sqrt();
            params.insert(*w, randn(&mut rng, &[dims[l + 1], dims[l]], std))?;
            params.insert(*b, Tensor::zeros(&[dims[l + 1]]))?;
        }
        Self::from_parts(config, params, classes)
    }

    pub fn from_parts<S: AsRef<str>>(
        config: GeneratorConfig,
        params: ParamStore,
        classes: &[S],
    ) -> Result<Self> {
        let mut map = IndexMap::new();
        for (i, c) in classes.iter().enumerate() {
            if map.insert(c.as_ref().to_string(), i + 1).is_some() {
                return Err(Error::invalid(format!("duplicate class `{}`", c.as_ref())));
            }
        }
        let rows = params.get(COND_TABLE)?.rows();
        if rows != classes.len() + 1 {
            return Err(Error::invalid(format!(
                "condition table has {rows} rows for {} classes plus the null row",
                classes.len()
            )));
        }
        let schedule = NoiseSchedule::linear(config.steps, config.beta_start, config.beta_end)?;
        Ok(Self {
            config,
            params,
            classes: map,
            schedule,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(String::as_str)
    }

    /// Condition-table row of a class (row 0 is unconditional).
    pub fn class_row(&self, class: &str) -> Result<usize> {
        self.classes
            .get(class)
            .copied()
            .ok_or_else(|| Error::UnknownClass(class.to_string()))
    }

    /// Weight matrix shape `[d_out, d_in]` of a named layer.
    pub fn layer_shape(&self, layer: &str) -> Result<(usize, usize)> {
        if !LAYERS.iter().any(|(w, _)| *w == layer) {
            return Err(Error::UnknownParam(layer.to_string()));
        }
        let s = self.params.get(layer)?.shape();
        Ok((s[0], s[1]))
    }

    pub fn checkpoint_hash(&self) -> Result<String> {
        crate::numcore::checkpoint::hash(self.params.iter())
    }
}

/// Weight, bias and optional LoRA `(A, B)` handles of one layer.
type LayerVars = (Var, Var, Option<(Var, Var)>);

/// Tape handles for a (possibly adapted) generator.
#[derive(Clone, Debug)]
pub struct GenVars {
    cond: Var,
    layers: Vec<LayerVars>,
    lora_scale: f64,
}

/// A base generator, optionally viewed through a LoRA adapter. Borrowing
/// both keeps the base weights untouched and avoids copying them.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorView<'a> {
    pub base: &'a GeneratorModel,
    pub adapter: Option<&'a LoraAdapter>,
}

impl<'a> GeneratorView<'a> {
    pub fn base(model: &'a GeneratorModel) -> Self {
        Self {
            base: model,
            adapter: None,
        }
    }

    pub fn is_adapted(&self) -> bool {
        self.adapter.is_some()
    }

    /// Binds parameters. Base weights are trainable only when `train_base`;
    /// adapter matrices come from `adapter_store` when given, else constants.
    pub fn bind(
        &self,
        tape: &mut Tape,
        train_base: bool,
        adapter_store: Option<&ParamStore>,
    ) -> Result<GenVars> {
        let base = &self.base.params;
        let get = |tape: &mut Tape, name: &str| -> Result<Var> {
            if train_base {
                tape.param(base, name)
            } else {
                Ok(tape.constant(base.get(name)?.clone()))
            }
        };
        let cond = get(tape, COND_TABLE)?;
        let mut layers = Vec::with_capacity(LAYERS.len());
        for (w, b) in LAYERS {
            let wv = get(tape, w)?;
            let bv = get(tape, b)?;
            let lora = match self.adapter.and_then(|a| a.layer(w)) {
                Some(l) => Some(match adapter_store {
                    Some(store) => (
                        tape.param(store, &LoraAdapter::a_name(w))?,
                        tape.param(store, &LoraAdapter::b_name(w))?,
                    ),
                    None => (tape.constant(l.a.clone()), tape.constant(l.b.clone())),
                }),
                None => None,
            };
            layers.push((wv, bv, lora));
        }
        Ok(GenVars {
            cond,
            layers,
            lora_scale: self.adapter.map_or(1.0, LoraAdapter::scale),
        })
    }

    /// Predicted noise for `x_t` (`[B, pixels]`) at steps `t` under
    /// condition rows `cond`.
    ///
    /// The output is preconditioned as `ε̂ = a_t·x_t + b_t·F`, where `a_t·x_t`
    /// is the best linear noise estimate for data of std `σ_d` and `b_t`
    /// scales the MLP output `F` so its target has unit variance at every
    /// step. A plain noise head would have to copy all of `x_t` through the
    /// narrower hidden layers.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &GenVars,
        x_t: Var,
        t: &[usize],
        cond: &[usize],
    ) -> Result<Var> {
        let b = tape.shape(x_t)[0];
        if t.len() != b || cond.len() != b {
            return Err(Error::invalid("one timestep and condition per row required"));
        }
        let temb = tape.constant(timestep_embedding(t, self.base.config.time_dim));
        let cemb = tape.gather_rows(vars.cond, cond)?;
        let mut h = tape.concat(&[x_t, temb, cemb])?;
        let last = vars.layers.len() - 1;
        for (l, &(w, bias, lora)) in vars.layers.iter().enumerate() {
            let mut y = tape.matmul_t(h, w)?;
            if let Some((a, bm)) = lora {
                let down = tape.matmul_t(h, bm)?;
                let up = tape.matmul_t(down, a)?;
                let up = tape.scale(up, vars.lora_scale);
                y = tape.add(y, up)?;
            }
            h = tape.add(y, bias)?;
            if l < last {
                h = tape.relu(h);
            }
        }
        let px = self.base.config.pixels;
        let sched = &self.base.schedule;
        let mut c_x = Vec::with_capacity(b * px);
        let mut c_0 = Vec::with_capacity(b * px);
        for &step in t {
            sched.check(step)?;
            let (a, c) = precondition(sched.alpha_bar(step), self.base.config.sigma_data);
            c_x.extend(std::iter::repeat_n(a, px));
            c_0.extend(std::iter::repeat_n(c, px));
        }
        let c_x = tape.constant(Tensor::new(vec![b, px], c_x)?);
        let c_0 = tape.constant(Tensor::new(vec![b, px], c_0)?);
        let skip = tape.mul(x_t, c_x)?;
        let head = tape.mul(h, c_0)?;
        tape.add(skip, head)
    }

    /// Noise prediction without gradients.
    pub fn predict_noise(&self, x_t: &Tensor, t: &[usize], cond: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false, None)?;
        let x = tape.constant(x_t.clone());
        let eps = self.forward(&mut tape, &vars, x, t, cond)?;
        Ok(tape.value(eps).clone())
    }

    /// Noise-prediction MSE for clean images `x0` (pixel values in `[0,1]`)
    /// with condition rows `cond`. Timesteps and noise come from `rng`; each
    /// condition is swapped for the null row with probability `cond_dropout`.
    pub fn denoise_loss(
        &self,
        tape: &mut Tape,
        vars: &GenVars,
        x0: &Tensor,
        cond: &[usize],
        rng: &mut RngStream,
        cond_dropout: f64,
    ) -> Result<Var> {
        let plan = draw_noise_plan(self.base, x0.rows(), cond, rng, cond_dropout)?;
        self.denoise_loss_planned(tape, vars, x0, &plan)
    }

    pub(crate) fn denoise_loss_planned(
        &self,
        tape: &mut Tape,
        vars: &GenVars,
        x0: &Tensor,
        plan: &NoisePlan,
    ) -> Result<Var> {
        let n = x0.rows();
        let sched = &self.base.schedule;
        let mut xt = Vec::with_capacity(x0.numel());
        for r in 0..n {
            let ab = sched.alpha_bar(plan.t[r]);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            let nrow = plan.noise.row(r);
            for (x, e) in x0.row(r).iter().zip(nrow) {
                xt.push(a * (2.0 * x - 1.0) + b * e);
            }
        }
        let xt = tape.constant(Tensor::new(x0.shape().to_vec(), xt)?);
        let pred = self.forward(tape, vars, xt, &plan.t, &plan.cond)?;
        noise_mse(tape, pred, &plan.noise)
    }
}

/// Mean squared error between predicted and true noise.
pub fn noise_mse(tape: &mut Tape, pred: Var, noise: &Tensor) -> Result<Var> {
    let target = tape.constant(noise.clone());
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// `(a_t, b_t)` for `ε̂ = a_t·x_t + b_t·F`.
fn precondition(alpha_bar: f64, sigma_data: f64) -> (f64, f64) {
    let s2 = sigma_data * sigma_data;
    let var_x = alpha_bar * s2 + 1.0 - alpha_bar;
    let a = (1.0 - alpha_bar).sqrt() / var_x;
    let b = (alpha_bar * s2 / var_x).sqrt();
    (a, b)
}

/// Timesteps, noise and (possibly dropped) conditions for one loss batch.
#[derive(Clone, Debug)]
pub struct NoisePlan {
    pub t: Vec<usize>,
    pub noise: Tensor,
    pub cond: Vec<usize>,
}

pub fn draw_noise_plan(
    model: &GeneratorModel,
    rows: usize,
    cond: &[usize],
    rng: &mut RngStream,
    cond_dropout: f64,
) -> Result<NoisePlan> {
    if rows == 0 {
        return Err(Error::invalid("denoise_loss on an empty batch"));
    }
    if cond.len() != rows {
        return Err(Error::invalid("one condition per sample required"));
    }
    if !(0.0..1.0).contains(&cond_dropout) {
        return Err(Error::invalid("cond_dropout must lie in [0, 1)"));
    }
    let steps = model.schedule.steps();
    let t: Vec<usize> = (0..rows).map(|_| rng.below(steps)).collect();
    let noise = Tensor::new(
        vec![rows, model.config.pixels],
        rng.normals(rows * model.config.pixels),
    )?;
    let cond = cond
        .iter()
        .map(|&c| {
            if cond_dropout > 0.0 && rng.bernoulli(cond_dropout) {
                0
            } else {
                c
            }
        })
        .collect();
    Ok(NoisePlan { t, noise, cond })
}

/// Which generator produced a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Provenance {
    Base,
    Adapter(usize),
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::Base => f.write_str("base"),
            Provenance::Adapter(i) => write!(f, "adapter_{i}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedCandidate {
    /// `[16, 16]` pixel values in `[0, 1]`.
    pub sample: Tensor,
    /// The filled prompt `T(c)`.
    pub prompt: String,
    pub class: String,
    pub seed: u64,
    pub confidence: Option<f64>,
    pub provenance: Provenance,
}

/// Per-step guidance record: both branch predictions and the combination.
#[derive(Clone, Debug)]
pub struct GuidanceStep {
    pub t: usize,
    pub eps_uncond: Tensor,
    pub eps_cond: Option<Tensor>,
    pub eps: Tensor,
}

fn side(pixels: usize) -> usize {
    (pixels as f64).sqrt().round() as usize
}

/// Ancestral sampler shared by the guided and unconditional paths.
/// `class_row = None` runs the unconditional branch only.
fn run_sampler(
    view: &GeneratorView<'_>,
    class_row: Option<usize>,
    guidance: f64,
    seeds: &[u64],
    mut trace: Option<&mut Vec<GuidanceStep>>,
) -> Result<Vec<Tensor>> {
    let model = view.base;
    let sched = &model.schedule;
    let px = model.config.pixels;
    let m = seeds.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut rngs: Vec<RngStream> = seeds
        .iter()
        .map(|&s| RngStream::new(s, label_hash("generator.sample")))
        .collect();
    let mut x: Vec<f64> = rngs.iter_mut().flat_map(|r| r.normals(px)).collect();

    let mut tape = Tape::new();
    let vars = view.bind(&mut tape, false, None)?;
    let frozen = tape.len();
    for t in (0..sched.steps()).rev() {
        // Conditional rows first, unconditional rows after; rows are
        // computed independently so batching does not change values.
        let (input, cond): (Vec<f64>, Vec<usize>) = match class_row {
            Some(c) => (
                x.iter().chain(x.iter()).copied().collect(),
                std::iter::repeat_n(c, m).chain(std::iter::repeat_n(0, m)).collect(),
            ),
            None => (x.clone(), vec![0; m]),
        };
        let rows = cond.len();
        let xin = tape.constant(Tensor::new(vec![rows, px], input)?);
        let eps_all = view.forward(&mut tape, &vars, xin, &vec![t; rows], &cond)?;
        let eps_all = tape.value(eps_all).data().to_vec();
        tape.truncate(frozen);

        let (eps_c, eps_u) = match class_row {
            Some(_) => (Some(eps_all[..m * px].to_vec()), eps_all[m * px..].to_vec()),
            None => (None, eps_all),
        };
        // (1 − s)·ε_u + s·ε_c equals ε_u + s(ε_c − ε_u), and is exact at
        // s = 0 and s = 1.
        let eps: Vec<f64> = match &eps_c {
            Some(c) => eps_u
                .iter()
                .zip(c)
                .map(|(u, c)| (1.0 - guidance) * u + guidance * c)
                .collect(),
            None => eps_u.clone(),
        };
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(GuidanceStep {
                t,
                eps_uncond: Tensor::new(vec![m, px], eps_u.clone())?,
                eps_cond: eps_c.map(|c| Tensor::new(vec![m, px], c)).transpose()?,
                eps: Tensor::new(vec![m, px], eps.clone())?,
            });
        }

        let ab = sched.alpha_bar(t);
        let ab_prev = if t > 0 { sched.alpha_bar(t - 1) } else { 1.0 };
        let beta = sched.beta(t);
        let coef_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let coef_xt = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        for (r, rng) in rngs.iter_mut().enumerate() {
            for j in 0..px {
                let i = r * px + j;
                let x0 = ((x[i] - (1.0 - ab).sqrt() * eps[i]) / ab.sqrt()).clamp(-1.0, 1.0);
                let mean = coef_x0 * x0 + coef_xt * x[i];
                x[i] = if t > 0 { mean + var.sqrt() * rng.normal() } else { mean };
            }
        }
    }
    let s = side(px);
    x.chunks(px)
        .map(|row| {
            let img = row.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect();
            Tensor::new(vec![s, s], img)
        })
        .collect()
}

/// Draws one guided sample per seed for `class`.
pub fn sample_cfg_many(
    view: &GeneratorView<'_>,
    class: &str,
    guidance: f64,
    seeds: &[u64],
    provenance: Provenance,
) -> Result<Vec<GeneratedCandidate>> {
    sample_cfg_traced(view, class, guidance, seeds, provenance, None)
}

pub fn sample_cfg_traced(
    view: &GeneratorView<'_>,
    class: &str,
    guidance: f64,
    seeds: &[u64],
    provenance: Provenance,
    trace: Option<&mut Vec<GuidanceStep>>,
) -> Result<Vec<GeneratedCandidate>> {
    if !(guidance >= 0.0 && guidance.is_finite()) {
        return Err(Error::invalid("guidance scale must be finite and ≥ 0"));
    }
    let row = view.base.class_row(class)?;
    let samples = run_sampler(view, Some(row), guidance, seeds, trace)?;
    let prompt = PromptTemplate::default().fill(class);
    Ok(samples
        .into_iter()
        .zip(seeds)
        .map(|(sample, &seed)| GeneratedCandidate {
            sample,
            prompt: prompt.clone(),
            class: class.to_string(),
            seed,
            confidence: None,
            provenance,
        })
        .collect())
}

/// One guided sample; deterministic in `(weights, class, guidance, seed)`.
pub fn sample_cfg(
    view: &GeneratorView<'_>,
    class: &str,
    guidance: f64,
    seed: u64,
) -> Result<GeneratedCandidate> {
    let prov = if view.is_adapted() {
        Provenance::Adapter(0)
    } else {
        Provenance::Base
    };
    Ok(sample_cfg_many(view, class, guidance, &[seed], prov)?.remove(0))
}

/// Samples using only the unconditional branch.
pub fn sample_unconditional(
    view: &GeneratorView<'_>,
    seeds: &[u64],
    trace: Option<&mut Vec<GuidanceStep>>,
) -> Result<Vec<Tensor>> {
    run_sampler(view, None, 0.0, seeds, trace)
}

/// Trains the base generator on `data` (labels index `classes`) for
/// `epochs` shuffled passes. Returns the per-step losses.
pub fn train_generator<S: AsRef<str>>(
    model: &mut GeneratorModel,
    data: &Dataset,
    classes: &[S],
    epochs: usize,
    batch: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::invalid("train_generator on an empty dataset"));
    }
    let rows: Vec<usize> = classes
        .iter()
        .map(|c| model.class_row(c.as_ref()))
        .collect::<Result<_>>()?;
    let cond_all: Vec<usize> = data.labels.iter().map(|&l| rows[l]).collect();
    let dropout = model.config.cond_dropout;
    let opt = model.config.optimizer;
    let mut losses = Vec::new();
    for epoch in 0..epochs {
        let order = rng.sample_without_replacement(data.len(), data.len());
        for chunk in order.chunks(batch.max(1)) {
            let x0 = data.images.select_rows(chunk);
            let cond: Vec<usize> = chunk.iter().map(|&i| cond_all[i]).collect();
            let plan = draw_noise_plan(model, chunk.len(), &cond, rng, dropout)?;
            let mut tape = Tape::new();
            let view = GeneratorView::base(model);
            let vars = view.bind(&mut tape, true, None)?;
            let loss = view.denoise_loss_planned(&mut tape, &vars, &x0, &plan)?;
            let value = tape.item(loss)?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("generator loss at epoch {epoch}")));
            }
            tape.backward(loss, &mut model.params)?;
            model.params.adamw_step(&opt)?;
            losses.push(value);
        }
    }
    Ok(losses)
}

/// Mean denoising loss over `data` with a fixed evaluation stream.
pub fn evaluate_denoise_loss<S: AsRef<str>>(
    view: &GeneratorView<'_>,
    data: &Dataset,
    classes: &[S],
    seed: u64,
) -> Result<f64> {
    let rows: Vec<usize> = classes
        .iter()
        .map(|c| view.base.class_row(c.as_ref()))
        .collect::<Result<_>>()?;
    let cond: Vec<usize> = data.labels.iter().map(|&l| rows[l]).collect();
    let mut rng = RngStream::new(seed, label_hash("generator.eval"));
    let mut tape = Tape::new();
    let vars = view.bind(&mut tape, false, None)?;
    let loss = view.denoise_loss(&mut tape, &vars, &data.images, &cond, &mut rng, 0.0)?;
    tape.item(loss)
}
