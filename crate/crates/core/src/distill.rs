//! The combined finetuning objective: supervised cross-entropy plus
//! distillation from the previous model (`cd`), image-text alignment on
//! replay (`ita`) and an importance-weighted anchor penalty (`awc`).

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tape, Tensor, Var};
use crate::vlm::{DualEncoder, LabeledBatch, VlmVars};

/// Frozen copy of the previous-task model.
#[derive(Clone, Debug)]
pub struct TeacherSnapshot {
    model: DualEncoder,
    task: usize,
    hash: String,
}

impl TeacherSnapshot {
    pub fn new(model: &DualEncoder, task: usize) -> Result<Self> {
        Ok(Self {
            model: model.clone(),
            task,
            hash: weights_hash(model.params())?,
        })
    }

    pub fn model(&self) -> &DualEncoder {
        &self.model
    }

    /// Index of the task whose training produced this model (0 = pretrained).
    pub fn task(&self) -> usize {
        self.task
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Checks the snapshot still matches the weights it was taken from.
    pub fn verify(&self) -> Result<()> {
        if weights_hash(self.model.params())? != self.hash {
            return Err(Error::invalid(format!(
                "teacher snapshot of task {} was modified",
                self.task
            )));
        }
        Ok(())
    }

    /// Teacher log-probabilities over `classes`, no gradient.
    pub fn log_probs<S: AsRef<str>>(&self, images: &Tensor, classes: &[S]) -> Result<Tensor> {
        self.model.class_log_probs(images, classes)
    }
}

/// Zero-pads `old` to the row count of `like`.
fn pad_rows(old: &Tensor, like: &Tensor) -> Result<Tensor> {
    if old.shape() == like.shape() {
        return Ok(old.clone());
    }
    if old.rank() == 2 && old.cols() == like.cols() && old.rows() < like.rows() {
        let mut data = old.data().to_vec();
        data.resize(like.numel(), 0.0);
        return Tensor::new(like.shape().to_vec(), data);
    }
    Err(Error::Shape {
        op: "importance",
        lhs: old.shape().to_vec(),
        rhs: like.shape().to_vec(),
    })
}

pub fn weights_hash(params: &ParamStore) -> Result<String> {
    crate::numcore::checkpoint::hash(params.iter())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cd: f64,
    pub ita: f64,
    pub awc: f64,
    pub use_cd: bool,
    pub use_ita: bool,
    pub use_awc: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cd: 1.0,
            ita: 0.5,
            awc: 10.0,
            use_cd: true,
            use_ita: true,
            use_awc: true,
        }
    }
}

impl LossWeights {
    /// Cross-entropy only.
    pub fn none() -> Self {
        Self {
            use_cd: false,
            use_ita: false,
            use_awc: false,
            ..Self::default()
        }
    }

    pub fn cd_active(&self) -> bool {
        self.use_cd && self.cd != 0.0
    }

    pub fn ita_active(&self) -> bool {
        self.use_ita && self.ita != 0.0
    }

    pub fn awc_active(&self) -> bool {
        self.use_awc && self.awc != 0.0
    }

    pub fn any_active(&self) -> bool {
        self.cd_active() || self.ita_active() || self.awc_active()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("cd", self.cd), ("ita", self.ita), ("awc", self.awc)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("λ_{name} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }
}

/// Per-parameter importance (EMA of squared gradients) and the anchor
/// weights the penalty pulls towards.
#[derive(Clone, Debug)]
pub struct ImportanceMap {
    decay: f64,
    importance: IndexMap<String, Tensor>,
    anchor: IndexMap<String, Tensor>,
}

impl ImportanceMap {
    pub const DEFAULT_DECAY: f64 = 0.99;

    /// Zero importance, anchored at the current trainable weights.
    pub fn new(params: &ParamStore, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::invalid("importance decay must lie in [0, 1)"));
        }
        let mut map = Self {
            decay,
            importance: IndexMap::new(),
            anchor: IndexMap::new(),
        };
        map.reset_anchor(params)?;
        Ok(map)
    }

    pub fn importance(&self, name: &str) -> Option<&Tensor> {
        self.importance.get(name)
    }

    pub fn anchor(&self, name: &str) -> Option<&Tensor> {
        self.anchor.get(name)
    }

    /// Snapshots the anchor at a task boundary. Importance tensors of
    /// parameters that gained rows (new prompt tokens) are zero-padded.
    pub fn reset_anchor(&mut self, params: &ParamStore) -> Result<()> {
        self.anchor.clear();
        for (name, t) in params.iter() {
            if !params.is_trainable(name)? {
                continue;
            }
            self.anchor.insert(name.to_string(), t.clone());
            let imp = match self.importance.get(name) {
                Some(old) => pad_rows(old, t)?,
                None => Tensor::zeros(t.shape()),
            };
            self.importance.insert(name.to_string(), imp);
        }
        Ok(())
    }

    /// Fixed `value` importance anchored at the current weights.
    pub fn uniform(params: &ParamStore, value: f64) -> Result<Self> {
        let mut map = Self::new(params, 0.0)?;
        for imp in map.importance.values_mut() {
            *imp = Tensor::full(imp.shape(), value);
        }
        Ok(map)
    }

    /// Follows parameters that gained rows without moving the anchor. New
    /// rows get zero importance.
    pub fn grow(&mut self, params: &ParamStore) -> Result<()> {
        for (name, t) in params.iter() {
            if let Some(imp) = self.importance.get_mut(name) {
                *imp = pad_rows(imp, t)?;
            }
            if let Some(a) = self.anchor.get_mut(name) {
                *a = pad_rows(a, t)?;
            }
        }
        Ok(())
    }

    /// `imp ← decay·imp + (1 − decay)·g²` from the grads currently held in
    /// `params`; parameters without a grad count as zero gradient.
    pub fn update(&mut self, params: &ParamStore) -> Result<()> {
        self.update_excluding_penalty(params, 0.0)
    }

    /// Like [`update`](Self::update), but first removes the gradient
    /// `2·λ·imp ⊙ (θ − anchor)` that `λ·loss_awc` with this map contributed.
    /// Without this the penalty feeds its own importance and diverges.
    pub fn update_excluding_penalty(&mut self, params: &ParamStore, lambda: f64) -> Result<()> {
        let d = self.decay;
        for (name, imp) in self.importance.iter_mut() {
            let t = params.get(name)?;
            if t.shape() != imp.shape() {
                return Err(Error::Shape {
                    op: "importance update",
                    lhs: imp.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            let anchor = self.anchor.get(name).map(|a| a.data());
            match t.grad() {
                Some(g) => {
                    for (j, (v, g)) in imp.data_mut().iter_mut().zip(g).enumerate() {
                        let own = match anchor {
                            Some(a) if lambda != 0.0 => 2.0 * lambda * *v * (t.data()[j] - a[j]),
                            _ => 0.0,
                        };
                        let g = g - own;
                        *v = d * *v + (1.0 - d) * g * g;
                    }
                }
                None => {
                    for v in imp.data_mut() {
                        *v *= d;
                    }
                }
            }
        }
        Ok(())
    }
}

/// `KL(p_teacher ‖ p_student)` averaged over replay rows. The teacher
/// enters as constants so it receives no gradient.
pub fn loss_cd<S: AsRef<str>>(
    tape: &mut Tape,
    student: &DualEncoder,
    vars: &VlmVars,
    teacher: &TeacherSnapshot,
    images: &Tensor,
    classes: &[S],
) -> Result<Var> {
    if classes.is_empty() {
        return Err(Error::invalid("distillation over an empty class pool"));
    }
    if images.rows() == 0 {
        return Err(Error::invalid("distillation on an empty replay batch"));
    }
    let lp_t = teacher.log_probs(images, classes)?;
    let x = tape.constant(images.clone());
    let z = student.image_forward(tape, vars, x)?;
    let w = student.text_forward(tape, vars, classes)?;
    let logits = student.logits(tape, vars, z, w)?;
    let lq = tape.log_softmax(logits);
    kl_from_log_probs(tape, &lp_t, lq)
}

/// Mean over rows of `Σ_c p_t (log p_t − log q)` with `log q` on the tape.
pub fn kl_from_log_probs(tape: &mut Tape, lp_t: &Tensor, lq: Var) -> Result<Var> {
    let rows = lp_t.rows();
    let p_t = Tensor::new(
        lp_t.shape().to_vec(),
        lp_t.data().iter().map(|v| v.exp()).collect(),
    )?;
    let lp = tape.constant(lp_t.clone());
    let diff = tape.sub(lp, lq)?;
    let p = tape.constant(p_t);
    let terms = tape.mul(diff, p)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, 1.0 / rows as f64))
}

/// Symmetric contrastive loss between replay images and their prompts,
/// summed over the image→text and text→image directions.
pub fn loss_ita(
    tape: &mut Tape,
    student: &DualEncoder,
    vars: &VlmVars,
    images: &Tensor,
    prompts: &[Vec<usize>],
) -> Result<Var> {
    let b = prompts.len();
    if b < 2 || images.rows() != b {
        return Err(Error::invalid("alignment needs at least two image-prompt pairs"));
    }
    let distinct: std::collections::HashSet<&Vec<usize>> = prompts.iter().collect();
    if distinct.len() < 2 {
        return Err(Error::invalid("alignment needs at least two distinct prompts"));
    }
    let x = tape.constant(images.clone());
    let z = student.image_forward(tape, vars, x)?;
    let w = student.tokens_forward(tape, vars, prompts)?;
    let logits = student.logits(tape, vars, z, w)?;
    contrastive_from_logits(tape, logits, b)
}

/// `CE(S, diag) + CE(Sᵀ, diag)` for a square similarity matrix `S`.
pub fn contrastive_from_logits(tape: &mut Tape, logits: Var, b: usize) -> Result<Var> {
    let diag: Vec<usize> = (0..b).collect();
    let i2t = DualEncoder::cross_entropy(tape, logits, &diag)?;
    let lt = tape.transpose(logits)?;
    let t2i = DualEncoder::cross_entropy(tape, lt, &diag)?;
    tape.add(i2t, t2i)
}

/// `Σ imp ⊙ (θ − anchor)²` over the bound student parameters.
pub fn loss_awc(tape: &mut Tape, vars: &VlmVars, importance: &ImportanceMap) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (name, v) in vars.named() {
        let (Some(imp), Some(anchor)) = (importance.importance(name), importance.anchor(name))
        else {
            continue;
        };
        if tape.shape(v) != anchor.shape() {
            return Err(Error::Shape {
                op: "loss_awc",
                lhs: tape.shape(v).to_vec(),
                rhs: anchor.shape().to_vec(),
            });
        }
        let a = tape.constant(anchor.clone());
        let diff = tape.sub(v, a)?;
        let sq = tape.square(diff);
        let i = tape.constant(imp.clone());
        let weighted = tape.mul(sq, i)?;
        let s = tape.sum(weighted);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| Error::invalid("importance map covers no bound parameter"))
}

/// Replay samples for one step: images with their prompts.
#[derive(Clone, Debug)]
pub struct ReplayBatch {
    pub images: Tensor,
    pub prompts: Vec<Vec<usize>>,
}

/// Values of each term for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    pub cd: f64,
    pub ita: f64,
    pub awc: f64,
    pub total: f64,
}

pub struct GiftInputs<'a, S: AsRef<str>> {
    pub task_batch: &'a LabeledBatch,
    pub task_classes: &'a [S],
    pub teacher: Option<&'a TeacherSnapshot>,
    pub replay: Option<&'a ReplayBatch>,
    /// Classes seen before the current task (the replay pool).
    pub pool_classes: &'a [S],
    pub importance: Option<&'a ImportanceMap>,
}

/// `CE + λ_CD·cd + λ_ITA·ita + λ_AWC·awc` on `tape`. A disabled term is
/// never built, so it contributes exactly nothing.
pub fn compute_gift_loss<S: AsRef<str>>(
    tape: &mut Tape,
    student: &DualEncoder,
    vars: &VlmVars,
    inputs: &GiftInputs<'_, S>,
    weights: &LossWeights,
) -> Result<(Var, LossParts)> {
    weights.validate()?;
    let mut parts = LossParts::default();
    let mut total = student.ce_loss(tape, vars, inputs.task_batch, inputs.task_classes)?;
    parts.ce = tape.item(total)?;
    if weights.cd_active() {
        let (teacher, replay) = match (inputs.teacher, inputs.replay) {
            (Some(t), Some(r)) => (t, r),
            _ => return Err(Error::invalid("distillation needs a teacher and replay samples")),
        };
        let cd = loss_cd(tape, student, vars, teacher, &replay.images, inputs.pool_classes)?;
        parts.cd = tape.item(cd)?;
        let cd = tape.scale(cd, weights.cd);
        total = tape.add(total, cd)?;
    }
    if weights.ita_active() {
        let replay = inputs
            .replay
            .ok_or_else(|| Error::invalid("alignment needs replay samples"))?;
        let ita = loss_ita(tape, student, vars, &replay.images, &replay.prompts)?;
        parts.ita = tape.item(ita)?;
        let ita = tape.scale(ita, weights.ita);
        total = tape.add(total, ita)?;
    }
    if weights.awc_active() {
        let imp = inputs
            .importance
            .ok_or_else(|| Error::invalid("AWC needs an importance map"))?;
        let awc = loss_awc(tape, vars, imp)?;
        parts.awc = tape.item(awc)?;
        let awc = tape.scale(awc, weights.awc);
        total = tape.add(total, awc)?;
    }
    parts.total = tape.item(total)?;
    Ok((total, parts))
}
