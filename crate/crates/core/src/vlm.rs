//! Toy dual-encoder vision-language model.
//!
//! The image tower is a 3-layer MLP over flattened pixels; the text tower
//! mean-pools prompt-token embeddings and applies one hidden layer. Both
//! emit un-normalized `embed_dim` vectors; cosine similarity is taken at the
//! use site. Class probabilities are
//! `softmax_i(cos(z, w_i) / τ)` with `τ = exp(log_tau)`.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numcore::{randn, AdamW, ParamStore, RngStream, Tape, Tensor, Var};
use crate::taskgen::Dataset;

#[derive(Clone, Debug, PartialEq)]
pub struct VlmConfig {
    pub pixels: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub token_dim: usize,
    pub text_hidden: usize,
    pub init_tau: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub learn_tau: bool,
    pub optimizer: AdamW,
}

impl Default for VlmConfig {
    fn default() -> Self {
        Self {
            pixels: crate::taskgen::PIXELS,
            hidden: 64,
            embed_dim: 32,
            token_dim: 32,
            text_hidden: 64,
            init_tau: 0.07,
            tau_min: 1e-3,
            tau_max: 100.0,
            learn_tau: true,
            optimizer: AdamW {
                lr: 1e-3,
                ..AdamW::default()
            },
        }
    }
}

/// Prompt template with a single `{c}` slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    template: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            template: "a photo of a {c}".into(),
        }
    }
}

impl PromptTemplate {
    pub fn new(template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        if template.matches("{c}").count() != 1 {
            return Err(Error::invalid("prompt template needs exactly one `{c}` slot"));
        }
        Ok(Self { template })
    }

    pub fn fill(&self, class: &str) -> String {
        self.template.replace("{c}", class)
    }

    pub fn as_str(&self) -> &str {
        &self.template
    }
}

/// Splits on whitespace and hyphens; ids are assigned in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: IndexMap<String, usize>,
}

impl Tokenizer {
    fn words(text: &str) -> impl Iterator<Item = &str> {
        text.split(|c: char| c.is_whitespace() || c == '-')
            .filter(|w| !w.is_empty())
    }

    /// Ids for `text`, adding unseen words to the vocabulary.
    pub fn encode_mut(&mut self, text: &str) -> Vec<usize> {
        Self::words(text)
            .map(|w| {
                let next = self.vocab.len();
                *self.vocab.entry(w.to_string()).or_insert(next)
            })
            .collect()
    }

    /// Ids for `text`; `None` if any word is out of vocabulary.
    pub fn encode(&self, text: &str) -> Option<Vec<usize>> {
        Self::words(text).map(|w| self.vocab.get(w).copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn words_in_order(&self) -> impl Iterator<Item = &str> {
        self.vocab.keys().map(String::as_str)
    }

    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut t = Self::default();
        for w in words {
            t.encode_mut(w);
        }
        t
    }
}

/// Images `[batch, pixels]` with labels indexing the active class list.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "batch has {} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Tape handles for every model parameter.
#[derive(Clone, Copy, Debug)]
pub struct VlmVars {
    img: [(Var, Var); 3],
    tok: Var,
    txt: [(Var, Var); 2],
    pub log_tau: Var,
}

impl VlmVars {
    /// `(parameter name, handle)` for every parameter.
    pub fn named(&self) -> Vec<(&'static str, Var)> {
        let mut out = Vec::with_capacity(12);
        for (l, &(w, b)) in self.img.iter().enumerate() {
            out.push((IMG_LAYERS[l].0, w));
            out.push((IMG_LAYERS[l].1, b));
        }
        out.push((TOKENS, self.tok));
        for (l, &(w, b)) in self.txt.iter().enumerate() {
            out.push((TXT_LAYERS[l].0, w));
            out.push((TXT_LAYERS[l].1, b));
        }
        out.push((LOG_TAU, self.log_tau));
        out
    }
}

const IMG_LAYERS: [(&str, &str); 3] = [
    ("img.w1", "img.b1"),
    ("img.w2", "img.b2"),
    ("img.w3", "img.b3"),
];
const TXT_LAYERS: [(&str, &str); 2] = [("txt.w1", "txt.b1"), ("txt.w2", "txt.b2")];
const TOKENS: &str = "txt.tok";
const LOG_TAU: &str = "log_tau";

#[derive(Clone, Debug)]
pub struct DualEncoder {
    config: VlmConfig,
    params: ParamStore,
    tokenizer: Tokenizer,
    template: PromptTemplate,
    token_rng: RngStream,
}

impl DualEncoder {
    pub fn new(config: VlmConfig, seed: u64) -> Result<Self> {
        let mut rng = RngStream::new(seed, crate::numcore::rng::label_hash("vlm.init"));
        let mut params = ParamStore::new();
        let dims = [config.pixels, config.hidden, config.hidden, config.embed_dim];
        for (l, (w, b)) in IMG_LAYERS.iter().enumerate() {
            let gain = if l < 2 { 2.0 } else { 1.0 };
            let std = (gain / dims[l] as f64).sqrt();
            params.insert(*w, randn(&mut rng, &[dims[l], dims[l + 1]], std))?;
            params.insert(*b, Tensor::zeros(&[dims[l + 1]]))?;
        }
        params.insert(TOKENS, randn(&mut rng, &[1, config.token_dim], 1.0))?;
        let tdims = [config.token_dim, config.text_hidden, config.embed_dim];
        for (l, (w, b)) in TXT_LAYERS.iter().enumerate() {
            let gain = if l == 0 { 2.0 } else { 1.0 };
            let std = (gain / tdims[l] as f64).sqrt();
            params.insert(*w, randn(&mut rng, &[tdims[l], tdims[l + 1]], std))?;
            params.insert(*b, Tensor::zeros(&[tdims[l + 1]]))?;
        }
        params.insert(LOG_TAU, Tensor::scalar(config.init_tau.ln()))?;
        params.set_trainable(LOG_TAU, config.learn_tau)?;
        let mut model = Self {
            config,
            params,
            tokenizer: Tokenizer::default(),
            template: PromptTemplate::default(),
            token_rng: rng.derive("tokens"),
        };
        // Row 0 of the token table belongs to the first template word.
        let first = model.template.fill("");
        model.tokenizer.encode_mut(first.split_whitespace().next().unwrap_or("a"));
        Ok(model)
    }

    /// Rebuilds a model from stored parameters and vocabulary.
    pub fn from_parts(
        config: VlmConfig,
        params: ParamStore,
        tokenizer: Tokenizer,
        seed: u64,
    ) -> Result<Self> {
        let rows = params.get(TOKENS)?.rows();
        if rows != tokenizer.len() {
            return Err(Error::invalid(format!(
                "token table has {rows} rows but vocabulary has {} words",
                tokenizer.len()
            )));
        }
        let mut params = params;
        params.set_trainable(LOG_TAU, config.learn_tau)?;
        Ok(Self {
            config,
            params,
            tokenizer,
            template: PromptTemplate::default(),
            token_rng: RngStream::new(seed, crate::numcore::rng::label_hash("vlm.init"))
                .derive("tokens"),
        })
    }

    pub fn config(&self) -> &VlmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    pub fn tau(&self) -> f64 {
        self.params.get(LOG_TAU).map(|t| t.data()[0].exp()).unwrap_or(f64::NAN)
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid("τ must be positive"));
        }
        self.params.assign(LOG_TAU, &Tensor::scalar(tau.ln()))
    }

    /// Registers prompt words for `classes`, growing the token table with a
    /// fresh Gaussian row for each unseen word.
    pub fn ensure_classes<S: AsRef<str>>(&mut self, classes: &[S]) -> Result<()> {
        for c in classes {
            let before = self.tokenizer.len();
            self.tokenizer.encode_mut(&self.template.fill(c.as_ref()));
            let added = self.tokenizer.len() - before;
            let have = self.params.get(TOKENS)?.rows();
            let missing = self.tokenizer.len().saturating_sub(have);
            if added > 0 && missing > 0 {
                let rows = self.token_rng.normals(missing * self.config.token_dim);
                self.params.append_rows(TOKENS, &rows)?;
            }
        }
        Ok(())
    }

    /// Token ids of `T(c)`.
    pub fn prompt_tokens(&self, class: &str) -> Result<Vec<usize>> {
        self.tokenizer
            .encode(&self.template.fill(class))
            .ok_or_else(|| Error::UnknownClass(class.to_string()))
    }

    /// Binds parameters on `tape`; frozen snapshots pass `trainable = false`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<VlmVars> {
        let mut get = |name: &str| -> Result<Var> {
            if trainable {
                tape.param(&self.params, name)
            } else {
                Ok(tape.constant(self.params.get(name)?.clone()))
            }
        };
        let img = [
            (get(IMG_LAYERS[0].0)?, get(IMG_LAYERS[0].1)?),
            (get(IMG_LAYERS[1].0)?, get(IMG_LAYERS[1].1)?),
            (get(IMG_LAYERS[2].0)?, get(IMG_LAYERS[2].1)?),
        ];
        let tok = get(TOKENS)?;
        let txt = [
            (get(TXT_LAYERS[0].0)?, get(TXT_LAYERS[0].1)?),
            (get(TXT_LAYERS[1].0)?, get(TXT_LAYERS[1].1)?),
        ];
        let log_tau = get(LOG_TAU)?;
        Ok(VlmVars {
            img,
            tok,
            txt,
            log_tau,
        })
    }

    /// Image embeddings `z` for `[batch, pixels]` input.
    pub fn image_forward(&self, tape: &mut Tape, vars: &VlmVars, images: Var) -> Result<Var> {
        let shape = tape.shape(images);
        if shape.len() != 2 || shape[1] != self.config.pixels {
            return Err(Error::Shape {
                op: "encode_image",
                lhs: shape.to_vec(),
                rhs: vec![self.config.pixels],
            });
        }
        let mut h = images;
        for (l, &(w, b)) in vars.img.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add(z, b)?;
            if l < 2 {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Text embeddings for token sequences, one row per prompt.
    pub fn tokens_forward(
        &self,
        tape: &mut Tape,
        vars: &VlmVars,
        prompts: &[Vec<usize>],
    ) -> Result<Var> {
        if prompts.is_empty() || prompts.iter().any(Vec::is_empty) {
            return Err(Error::invalid("empty prompt list or prompt"));
        }
        let flat: Vec<usize> = prompts.iter().flatten().copied().collect();
        let emb = tape.gather_rows(vars.tok, &flat)?;
        let mut pool = vec![0.0; prompts.len() * flat.len()];
        let mut offset = 0;
        for (r, p) in prompts.iter().enumerate() {
            let w = 1.0 / p.len() as f64;
            for k in 0..p.len() {
                pool[r * flat.len() + offset + k] = w;
            }
            offset += p.len();
        }
        let pool = tape.constant(Tensor::new(vec![prompts.len(), flat.len()], pool)?);
        let mut h = tape.matmul(pool, emb)?;
        for (l, &(w, b)) in vars.txt.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add(z, b)?;
            if l == 0 {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Text embeddings `w_i` of the class prompts.
    pub fn text_forward<S: AsRef<str>>(
        &self,
        tape: &mut Tape,
        vars: &VlmVars,
        classes: &[S],
    ) -> Result<Var> {
        let prompts = classes
            .iter()
            .map(|c| self.prompt_tokens(c.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        self.tokens_forward(tape, vars, &prompts)
    }

    /// `cos(z_b, w_c) / τ` for every image row and class row.
    pub fn logits(&self, tape: &mut Tape, vars: &VlmVars, z: Var, w: Var) -> Result<Var> {
        let zn = tape.normalize_rows(z)?;
        let wn = tape.normalize_rows(w)?;
        let sims = tape.matmul_t(zn, wn)?;
        let neg = tape.scale(vars.log_tau, -1.0);
        let inv_tau = tape.exp(neg);
        tape.mul(sims, inv_tau)
    }

    /// Mean cross-entropy of `logits` against `labels`.
    pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
        if labels.is_empty() {
            return Err(Error::invalid("cross-entropy over an empty batch"));
        }
        let ls = tape.log_softmax(logits);
        let picked = tape.pick(ls, labels)?;
        let m = tape.mean(picked);
        Ok(tape.scale(m, -1.0))
    }

    /// Cross-entropy of the batch against `classes`, built on `tape`.
    pub fn ce_loss<S: AsRef<str>>(
        &self,
        tape: &mut Tape,
        vars: &VlmVars,
        batch: &LabeledBatch,
        classes: &[S],
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::invalid("finetune on an empty batch"));
        }
        if let Some(&bad) = batch.labels.iter().find(|&&l| l >= classes.len()) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                classes.len()
            )));
        }
        let x = tape.constant(batch.images.clone());
        let z = self.image_forward(tape, vars, x)?;
        let w = self.text_forward(tape, vars, classes)?;
        let logits = self.logits(tape, vars, z, w)?;
        Self::cross_entropy(tape, logits, &batch.labels)
    }

    /// Backward from `loss` into this model's parameter grads.
    pub fn backward(&mut self, tape: &mut Tape, loss: Var) -> Result<f64> {
        let value = tape.item(loss)?;
        tape.backward(loss, &mut self.params)?;
        Ok(value)
    }

    /// Applies one AdamW step from the stored grads and clamps `τ`.
    pub fn apply_grads(&mut self) -> Result<()> {
        self.params.adamw_step(&self.config.optimizer)?;
        let (lo, hi) = (self.config.tau_min.ln(), self.config.tau_max.ln());
        let t = self.params.get_mut(LOG_TAU)?;
        let clamped = t.data()[0].clamp(lo, hi);
        t.data_mut()[0] = clamped;
        Ok(())
    }

    /// One supervised step: mean cross-entropy plus an optional extra term
    /// built on the same tape, then AdamW. Returns the total loss.
    pub fn finetune_step<S, F>(
        &mut self,
        batch: &LabeledBatch,
        classes: &[S],
        extra: Option<F>,
    ) -> Result<f64>
    where
        S: AsRef<str>,
        F: FnOnce(&mut Tape, &VlmVars) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, true)?;
        let mut loss = self.ce_loss(&mut tape, &vars, batch, classes)?;
        if let Some(f) = extra {
            let e = f(&mut tape, &vars)?;
            loss = tape.add(loss, e)?;
        }
        let value = self.backward(&mut tape, loss)?;
        self.apply_grads()?;
        Ok(value)
    }

    /// Un-normalized image embeddings.
    pub fn encode_images(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let x = tape.constant(images.clone());
        let z = self.image_forward(&mut tape, &vars, x)?;
        Ok(tape.value(z).clone())
    }

    pub fn encode_prompts(&self, prompts: &[Vec<usize>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let w = self.tokens_forward(&mut tape, &vars, prompts)?;
        Ok(tape.value(w).clone())
    }

    pub fn encode_classes<S: AsRef<str>>(&self, classes: &[S]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let w = self.text_forward(&mut tape, &vars, classes)?;
        Ok(tape.value(w).clone())
    }

    /// Log class probabilities `[batch, classes]`.
    pub fn class_log_probs<S: AsRef<str>>(&self, images: &Tensor, classes: &[S]) -> Result<Tensor> {
        if classes.is_empty() {
            return Err(Error::invalid("class_probabilities needs at least one class"));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let x = tape.constant(images.clone());
        let z = self.image_forward(&mut tape, &vars, x)?;
        let w = self.text_forward(&mut tape, &vars, classes)?;
        let logits = self.logits(&mut tape, &vars, z, w)?;
        let lp = tape.log_softmax(logits);
        Ok(tape.value(lp).clone())
    }

    /// `p(y_i | x)` for each image row over `classes`.
    pub fn class_probabilities<S: AsRef<str>>(
        &self,
        images: &Tensor,
        classes: &[S],
    ) -> Result<Tensor> {
        if classes.is_empty() {
            return Err(Error::invalid("class_probabilities needs at least one class"));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let x = tape.constant(images.clone());
        let z = self.image_forward(&mut tape, &vars, x)?;
        let w = self.text_forward(&mut tape, &vars, classes)?;
        let logits = self.logits(&mut tape, &vars, z, w)?;
        let p = tape.softmax(logits);
        Ok(tape.value(p).clone())
    }

    /// Cosine between one sample's image embedding and a prompt embedding.
    pub fn confidence(&self, sample: &Tensor, prompt: &[usize]) -> Result<f64> {
        let x = sample.clone().reshape(vec![1, sample.numel()])?;
        Ok(self.confidences(&x, &[prompt.to_vec()])?[0])
    }

    /// Row-wise confidences: image row `b` against `prompts[b]`.
    pub fn confidences(&self, images: &Tensor, prompts: &[Vec<usize>]) -> Result<Vec<f64>> {
        if images.rows() != prompts.len() {
            return Err(Error::invalid("one prompt per image required"));
        }
        let z = self.encode_images(images)?;
        let w = self.encode_prompts(prompts)?;
        (0..prompts.len())
            .map(|b| crate::numcore::cosine(z.row(b), w.row(b)))
            .collect()
    }

    /// Predicted class index per row; ties go to the lowest index.
    pub fn predict<S: AsRef<str>>(&self, images: &Tensor, classes: &[S]) -> Result<Vec<usize>> {
        let p = self.class_probabilities(images, classes)?;
        Ok((0..p.rows()).map(|r| argmax(p.row(r))).collect())
    }

    /// Fraction of samples whose arg-max class equals the label.
    pub fn evaluate_accuracy<S: AsRef<str>>(&self, data: &Dataset, classes: &[S]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("evaluate_accuracy on an empty dataset"));
        }
        let pred = self.predict(&data.images, classes)?;
        let hits = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / data.len() as f64)
    }

    /// Supervised training on `data` for `steps` minibatches.
    pub fn pretrain<S: AsRef<str>>(
        &mut self,
        data: &Dataset,
        classes: &[S],
        steps: usize,
        batch: usize,
        rng: &mut RngStream,
    ) -> Result<Vec<f64>> {
        self.ensure_classes(classes)?;
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let idx: Vec<usize> = (0..batch.min(data.len()))
                .map(|_| rng.below(data.len()))
                .collect();
            let b = LabeledBatch::new(
                data.images.select_rows(&idx),
                idx.iter().map(|&i| data.labels[i]).collect(),
            )?;
            losses.push(self.finetune_step(&b, classes, None::<NoExtra>)?);
        }
        Ok(losses)
    }
}

/// Placeholder type for `finetune_step` calls without an extra term.
pub type NoExtra = fn(&mut Tape, &VlmVars) -> Result<Var>;

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
