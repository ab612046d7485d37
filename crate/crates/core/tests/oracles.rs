//! Confidence-gap oracles on one pretrained hard suite.

use std::sync::OnceLock;

use loraloop::continual::*;
use loraloop::generator::{sample_cfg_many, GeneratorView, Provenance};
use loraloop::lora::{adapter_rng, apply_adapter, finetune_adapter, LoraData};
use loraloop::numcore::Tensor;
use loraloop::selection::score_candidates;
use loraloop::vlm::DualEncoder;

const SEED: u64 = 1;
const SAMPLES: usize = 32;

fn config() -> RunConfig {
    RunConfig {
        seed: SEED,
        ..RunConfig::default()
    }
}

fn pretrained() -> &'static Pretrained {
    static PRE: OnceLock<Pretrained> = OnceLock::new();
    PRE.get_or_init(|| pretrain(&config()).unwrap())
}

/// The VLM after sequential finetuning, which has seen the last task's domain.
fn finetuned() -> &'static DualEncoder {
    static FT: OnceLock<DualEncoder> = OnceLock::new();
    FT.get_or_init(|| {
        let cfg = RunConfig {
            method: Method::ContinualFinetune,
            ..config()
        };
        run_method(pretrained(), &cfg).unwrap().model
    })
}

fn seeds(offset: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| 1_000_000 * (offset + 1) + i).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Confidences of `view`'s samples for `classes`, `SAMPLES` in total.
fn sample_confidences(view: &GeneratorView<'_>, classes: &[String], scorer: &DualEncoder) -> Vec<f64> {
    let per = SAMPLES / classes.len();
    let guidance = view_guidance();
    let mut out = Vec::new();
    for (c, class) in classes.iter().enumerate() {
        let prov = if view.is_adapted() { Provenance::Adapter(0) } else { Provenance::Base };
        let mut cands = sample_cfg_many(view, class, guidance, &seeds(c as u64, per), prov).unwrap();
        score_candidates(&mut cands, scorer).unwrap();
        out.extend(cands.iter().map(|c| c.confidence.unwrap()));
    }
    out
}

fn view_guidance() -> f64 {
    pretrained().generator.config().guidance
}

#[test]
fn generator_samples_match_their_own_class() {
    let pre = pretrained();
    let classes = pre.suite.base.class_names();
    let view = GeneratorView::base(&pre.generator);
    let per = SAMPLES / classes.len();
    let (mut own, mut other) = (Vec::new(), Vec::new());
    for (c, class) in classes.iter().enumerate() {
        let cands = sample_cfg_many(&view, class, view_guidance(), &seeds(c as u64, per), Provenance::Base).unwrap();
        let wrong = &classes[(c + 1) % classes.len()];
        let right_prompt = pre.vlm.prompt_tokens(class).unwrap();
        let wrong_prompt = pre.vlm.prompt_tokens(wrong).unwrap();
        for cand in &cands {
            own.push(pre.vlm.confidence(&cand.sample, &right_prompt).unwrap());
            other.push(pre.vlm.confidence(&cand.sample, &wrong_prompt).unwrap());
        }
    }
    assert_eq!(own.len(), SAMPLES);
    assert!(mean(&own) > mean(&other), "own {} vs other {}", mean(&own), mean(&other));
}

#[test]
fn hard_task_samples_trail_real_images() {
    let pre = pretrained();
    let task = pre.suite.tasks.last().unwrap();
    let classes = task.class_names();
    let scorer = finetuned();
    let generated = sample_confidences(&GeneratorView::base(&pre.generator), &classes, scorer);

    let mut real = Vec::new();
    for (c, class) in classes.iter().enumerate() {
        let prompt = scorer.prompt_tokens(class).unwrap();
        for &i in task.test.indices_of(c).iter().take(SAMPLES / classes.len()) {
            let img = Tensor::new(vec![task.test.images.cols()], task.test.images.row(i).to_vec()).unwrap();
            real.push(scorer.confidence(&img, &prompt).unwrap());
        }
    }
    assert!(
        mean(&generated) < mean(&real),
        "generated {} vs real {}",
        mean(&generated),
        mean(&real)
    );
}

#[test]
fn adapter_closes_the_domain_gap() {
    let pre = pretrained();
    let cfg = config();
    let n = pre.suite.tasks.len();
    let task = &pre.suite.tasks[n - 1];
    let classes = task.class_names();
    let mut idx = Vec::new();
    for c in 0..classes.len() {
        idx.extend(task.train.indices_of(c).into_iter().take(cfg.l));
    }
    let data = LoraData {
        images: task.train.images.select_rows(&idx),
        classes: idx.iter().map(|&i| classes[task.train.labels[i]].clone()).collect(),
    };
    let adapter = finetune_adapter(&pre.generator, &data, &cfg.lora, &mut adapter_rng(SEED, n)).unwrap();
    let scorer = finetuned();
    let base = sample_confidences(&GeneratorView::base(&pre.generator), &classes, scorer);
    let adapted = sample_confidences(&apply_adapter(&pre.generator, &adapter).unwrap(), &classes, scorer);
    assert!(mean(&adapted) > mean(&base), "adapted {} vs base {}", mean(&adapted), mean(&base));
}
