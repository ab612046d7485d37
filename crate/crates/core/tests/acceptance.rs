//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Every tolerance is a constant below.
//!
//! Criteria 7 to 11 and 13 share one pretraining per seed on the `hard`
//! suite with the desk configuration.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use loraloop::continual::*;
use loraloop::distill::LossWeights;
use loraloop::generator::{
    sample_cfg_many, sample_cfg_traced, sample_unconditional, GeneratedCandidate, GeneratorConfig,
    GeneratorModel, GeneratorView, GuidanceStep, Provenance,
};
use loraloop::lora::{apply_adapter, finetune_adapter, LoraAdapter, LoraConfig, LoraData};
use loraloop::numcore::gradcheck::{max_relative_error, random_network};
use loraloop::numcore::rng::label_hash;
use loraloop::numcore::{RngStream, Tensor};
use loraloop::selection::{sample_topk, score_candidates, select_policy, Policy};
use loraloop::taskgen::{make_suite, PIXELS};
use loraloop::vlm::{argmax, DualEncoder, VlmConfig};

type R<T> = std::result::Result<T, Box<dyn std::error::Error>>;

const GRADCHECK_NETS: usize = 25;
const GRADCHECK_STEP: f64 = 1e-4;
const GRADCHECK_FLOOR: f64 = 1e-3;
const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(10);
const PROB_SUM_TOL: f64 = 1e-9;
const PROB_INPUTS: usize = 1000;
const NOOP_SEEDS: u64 = 16;
const SELECTION_INSTANCES: usize = 1000;
const SELECTION_MAX: usize = 64;
const TREND_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const GAP_SAMPLES: usize = 32;
const BOOTSTRAP_RESAMPLES: usize = 10_000;
const GAP_BUDGET: Duration = Duration::from_secs(10 * 60);
const ORDERING_MARGIN: f64 = 0.05;
const ORDERING_BUDGET: Duration = Duration::from_secs(30 * 60);
const BASE_RETENTION: f64 = 0.05;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> R<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

fn report(id: usize, name: &str, started: Instant, out: R<Verdict>) -> bool {
    let secs = started.elapsed().as_secs_f64();
    let (pass, detail) = match out {
        Ok(v) => (v.pass, v.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "{} [{id:>2}] {name}: {detail} ({secs:.1}s)",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// 1

fn gradient_correctness() -> R<Verdict> {
    let t = Instant::now();
    let mut rng = RngStream::new(2024, label_hash("acceptance.gradcheck"));
    let mut worst = 0.0f64;
    for _ in 0..GRADCHECK_NETS {
        let (inputs, build) = random_network(&mut rng);
        worst = worst.max(max_relative_error(&inputs, GRADCHECK_STEP, GRADCHECK_FLOOR, build)?);
    }
    let el = t.elapsed();
    verdict(
        worst < GRADCHECK_TOL && el < GRADCHECK_BUDGET,
        format!("max rel err {worst:.2e} < {GRADCHECK_TOL:e} over {GRADCHECK_NETS} nets in {el:.2?}"),
    )
}

// 2

fn probability_contract() -> R<Verdict> {
    let suite = make_suite(&common::tiny_config(7).suite)?;
    let classes = suite.all_class_names();
    let mut vlm = DualEncoder::new(VlmConfig::default(), 7)?;
    vlm.ensure_classes(&classes)?;
    let mut rng = RngStream::new(7, label_hash("acceptance.inputs"));
    let data: Vec<f64> = (0..PROB_INPUTS * PIXELS).map(|_| rng.uniform()).collect();
    let images = Tensor::new(vec![PROB_INPUTS, PIXELS], data)?;

    let reference: Vec<usize> = {
        let p = vlm.class_probabilities(&images, &classes)?;
        (0..p.rows()).map(|i| argmax(p.row(i))).collect()
    };
    let mut worst_sum = 0.0f64;
    let mut flips = 0usize;
    for tau in [0.01, 0.07, 0.5, 1.0, 10.0] {
        vlm.set_tau(tau)?;
        let p = vlm.class_probabilities(&images, &classes)?;
        for (i, &want) in reference.iter().enumerate() {
            worst_sum = worst_sum.max((p.row(i).iter().sum::<f64>() - 1.0).abs());
            flips += usize::from(argmax(p.row(i)) != want);
        }
    }
    verdict(
        worst_sum <= PROB_SUM_TOL && flips == 0,
        format!("max |Σp − 1| = {worst_sum:.1e}, argmax changes across τ: {flips} of {PROB_INPUTS}×5"),
    )
}

// 3 and 4 use small random generators.

fn random_generator(seed: u64) -> R<(GeneratorModel, Vec<String>)> {
    let classes: Vec<String> = (0..4).map(|c| format!("class{c}")).collect();
    let config = GeneratorConfig {
        hidden: 32,
        ..GeneratorConfig::default()
    };
    Ok((GeneratorModel::new(config, &classes, seed)?, classes))
}

fn steps_bit_eq(a: &[GuidanceStep], b: &[GuidanceStep]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.t == y.t
                && x.eps.bit_eq(&y.eps)
                && x.eps_uncond.bit_eq(&y.eps_uncond)
                && match (&x.eps_cond, &y.eps_cond) {
                    (Some(p), Some(q)) => p.bit_eq(q),
                    (None, None) => true,
                    _ => false,
                }
        })
}

fn lora_noop_identity() -> R<Verdict> {
    let (base, classes) = random_generator(3)?;
    let targets = ["l1.w", "l2.w", "l3.w"];
    let adapter = LoraAdapter::init(&base, 4, 4.0, &targets, &mut RngStream::new(3, 1))?;
    let adapted = apply_adapter(&base, &adapter)?;
    let seeds: Vec<u64> = (0..NOOP_SEEDS).collect();
    let mut identical = 0;
    for class in &classes {
        let (mut ta, mut tb) = (Vec::new(), Vec::new());
        let a = sample_cfg_traced(&GeneratorView::base(&base), class, 7.5, &seeds, Provenance::Base, Some(&mut ta))?;
        let b = sample_cfg_traced(&adapted, class, 7.5, &seeds, Provenance::Base, Some(&mut tb))?;
        let same = steps_bit_eq(&ta, &tb) && a.iter().zip(&b).all(|(x, y)| x.sample.bit_eq(&y.sample));
        identical += usize::from(same);
    }

    let before = base.checkpoint_hash()?;
    let mut rng = RngStream::new(3, 2);
    let images = Tensor::new(vec![4, PIXELS], (0..4 * PIXELS).map(|_| rng.uniform()).collect())?;
    let data = LoraData {
        images,
        classes: classes.clone(),
    };
    let trained = finetune_adapter(
        &base,
        &data,
        &LoraConfig {
            epochs: 5,
            ..LoraConfig::default()
        },
        &mut rng,
    )?;
    let after = base.checkpoint_hash()?;
    verdict(
        identical == classes.len() && before == after && !trained.is_noop(),
        format!(
            "{identical}/{} classes bit-identical over {NOOP_SEEDS} seeds; base hash {} after finetune",
            classes.len(),
            if before == after { "unchanged" } else { "CHANGED" }
        ),
    )
}

fn cfg_identities() -> R<Verdict> {
    let mut failures = Vec::new();
    let seeds: Vec<u64> = (0..4).collect();
    for model_seed in 0..3u64 {
        let (model, classes) = random_generator(100 + model_seed)?;
        let view = GeneratorView::base(&model);
        let (mut t0, mut t1, mut tu) = (Vec::new(), Vec::new(), Vec::new());
        let s0 = sample_cfg_traced(&view, &classes[1], 0.0, &seeds, Provenance::Base, Some(&mut t0))?;
        sample_cfg_traced(&view, &classes[1], 1.0, &seeds, Provenance::Base, Some(&mut t1))?;
        let su = sample_unconditional(&view, &seeds, Some(&mut tu))?;
        let zero_is_uncond = t0.iter().all(|s| s.eps.bit_eq(&s.eps_uncond))
            && t0.iter().zip(&tu).all(|(a, b)| a.eps.bit_eq(&b.eps))
            && s0.iter().zip(&su).all(|(a, b)| a.sample.bit_eq(b));
        let one_is_cond = t1
            .iter()
            .all(|s| s.eps_cond.as_ref().is_some_and(|c| s.eps.bit_eq(c)));
        if !zero_is_uncond {
            failures.push(format!("model {model_seed}: s=0"));
        }
        if !one_is_cond {
            failures.push(format!("model {model_seed}: s=1"));
        }
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            "s=0 equals the unconditional trajectory, s=1 the conditional prediction, on 3 models".into()
        } else {
            failures.join(", ")
        },
    )
}

// 5

/// Position of `i` in the `(−conf, index)` order, by counting.
fn rank_of(conf: &[f64], i: usize) -> usize {
    (0..conf.len())
        .filter(|&j| conf[j] > conf[i] || (conf[j] == conf[i] && j < i))
        .count()
}

fn oracle_desc(conf: &[f64]) -> Vec<usize> {
    let mut out = vec![0; conf.len()];
    for i in 0..conf.len() {
        out[rank_of(conf, i)] = i;
    }
    out
}

fn oracle_asc(conf: &[f64]) -> Vec<usize> {
    let neg: Vec<f64> = conf.iter().map(|c| -c).collect();
    oracle_desc(&neg)
}

fn oracle_policy(conf: &[f64], budget: usize, policy: Policy) -> Option<Vec<usize>> {
    let n = conf.len();
    Some(match policy {
        Policy::Top => oracle_desc(conf)[..budget].to_vec(),
        Policy::Bottom => oracle_asc(conf)[..budget].to_vec(),
        Policy::Middle => {
            let start = (n - budget) / 2;
            oracle_desc(conf)[start..start + budget].to_vec()
        }
        Policy::TopAndBottom => {
            let half = budget / 2;
            let top = oracle_desc(conf)[..half].to_vec();
            let rest: Vec<usize> = (0..n).filter(|i| !top.contains(i)).collect();
            let rest_conf: Vec<f64> = rest.iter().map(|&i| conf[i]).collect();
            let bottom = oracle_asc(&rest_conf);
            top.iter().copied().chain(bottom[..half].iter().map(|&p| rest[p])).collect()
        }
        Policy::Random => return None,
    })
}

fn selection_oracles() -> R<Verdict> {
    let mut rng = RngStream::new(5, label_hash("acceptance.selection"));
    let mut mismatches = Vec::new();
    let mut ties = 0usize;
    for inst in 0..SELECTION_INSTANCES {
        let n = 2 + rng.below(SELECTION_MAX - 1);
        // Every other instance draws from four levels so ties are common.
        let conf: Vec<f64> = (0..n)
            .map(|_| {
                if inst % 2 == 0 {
                    rng.below(4) as f64 * 0.25 - 0.5
                } else {
                    rng.uniform() * 2.0 - 1.0
                }
            })
            .collect();
        ties += usize::from((1..n).any(|i| conf[..i].contains(&conf[i])));
        let budget = 2 * (1 + rng.below(n / 2));
        for policy in Policy::ALL {
            let mut prng = RngStream::new(inst as u64, 9);
            let got = select_policy(&conf, budget, policy, &mut prng)?;
            let ok = match oracle_policy(&conf, budget, policy) {
                Some(want) => got == want,
                None => {
                    let mut s = got.clone();
                    s.sort_unstable();
                    s.dedup();
                    s.len() == budget && s.iter().all(|&i| i < n)
                }
            };
            if !ok {
                mismatches.push(format!("{policy}@{inst}"));
            }
        }
    }

    // sample_topk against per-candidate scoring; duplicated samples force ties.
    let suite = make_suite(&common::tiny_config(5).suite)?;
    let classes = suite.all_class_names();
    let mut scorer = DualEncoder::new(VlmConfig::default(), 5)?;
    scorer.ensure_classes(&classes)?;
    let topk_instances = SELECTION_INSTANCES / 10;
    for inst in 0..topk_instances {
        let n = 1 + rng.below(SELECTION_MAX);
        let class = &classes[rng.below(classes.len())];
        let mut samples: Vec<Tensor> = Vec::with_capacity(n);
        for _ in 0..n {
            let s = if !samples.is_empty() && rng.bernoulli(0.3) {
                samples[rng.below(samples.len())].clone()
            } else {
                Tensor::new(vec![16, 16], (0..PIXELS).map(|_| rng.uniform()).collect())?
            };
            samples.push(s);
        }
        let candidates: Vec<GeneratedCandidate> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| GeneratedCandidate {
                sample: s.clone(),
                prompt: scorer.template().fill(class),
                class: class.clone(),
                seed: i as u64,
                confidence: None,
                provenance: Provenance::Base,
            })
            .collect();
        let prompt = scorer.prompt_tokens(class)?;
        let conf: Vec<f64> = samples
            .iter()
            .map(|s| scorer.confidence(s, &prompt))
            .collect::<loraloop::Result<_>>()?;
        let k = 1 + rng.below(n);
        let want: Vec<u64> = oracle_desc(&conf)[..k].iter().map(|&i| i as u64).collect();
        let got: Vec<u64> = sample_topk(candidates, k, &scorer)?.iter().map(|c| c.seed).collect();
        if got != want {
            mismatches.push(format!("sample_topk@{inst}"));
        }
    }
    verdict(
        mismatches.is_empty(),
        format!(
            "{SELECTION_INSTANCES} policy instances ({ties} with ties) and {topk_instances} sample_topk instances; mismatches: {}",
            if mismatches.is_empty() { "none".into() } else { mismatches.join(" ") }
        ),
    )
}

// 6

fn metric_oracle() -> R<Verdict> {
    let a = AccuracyMatrix::from_rows(vec![
        vec![0.9, 0.4, 0.5],
        vec![0.85, 0.8, 0.6],
        vec![0.8, 0.7, 0.9],
    ])?;
    let t2 = compute_metrics(&a, true)?.per_task[1].clone();
    let fixture = t2.transfer == Some(0.55) && t2.avg == 2.0 / 3.0 && t2.last == 0.9;
    let c = compute_metrics(&AccuracyMatrix::from_rows(vec![vec![0.7; 4]; 4])?, true)?;
    let constant = [c.transfer, c.avg, c.last] == [Some(0.7); 3];
    verdict(
        fixture && constant,
        format!(
            "task 2: transfer {:?}, avg {}, last {}; constant 0.7 matrix: {:?} {:?} {:?}",
            t2.transfer, t2.avg, t2.last, c.transfer, c.avg, c.last
        ),
    )
}

// 7 to 11 and 13

struct SeedRuns {
    pre: Pretrained,
    lora: RunOutput,
    frozen: RunOutput,
    finetune: RunOutput,
    bottom: RunOutput,
    pretrain_time: Duration,
    lora_time: Duration,
}

fn desk_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        ..RunConfig::default()
    }
}

fn run_seed(seed: u64) -> R<SeedRuns> {
    let cfg = desk_config(seed);
    let t = Instant::now();
    let pre = pretrain(&cfg)?;
    let pretrain_time = t.elapsed();
    let t = Instant::now();
    let lora = run_method(&pre, &cfg)?;
    let lora_time = t.elapsed();
    let with = |m: Method| RunConfig {
        method: m,
        ..cfg.clone()
    };
    let frozen = run_method(&pre, &with(Method::FrozenGeneratorReplay))?;
    let finetune = run_method(&pre, &with(Method::ContinualFinetune))?;
    let bottom = run_method(
        &pre,
        &RunConfig {
            filter_policy: Policy::Bottom,
            ..cfg.clone()
        },
    )?;
    Ok(SeedRuns {
        pre,
        lora,
        frozen,
        finetune,
        bottom,
        pretrain_time,
        lora_time,
    })
}

fn baseline_equivalence(runs: &SeedRuns) -> R<Verdict> {
    let cfg = RunConfig {
        replay: false,
        adapters: false,
        weights: LossWeights::none(),
        ..desk_config(runs.pre.suite.config.seed)
    };
    let a = run_lora_loop(&runs.pre, &cfg)?;
    let b = run_continual_finetune(&runs.pre, &cfg)?;
    let bits = |m: &AccuracyMatrix| -> Vec<u64> { m.rows().iter().flatten().map(|v| v.to_bits()).collect() };
    let same_matrix = bits(&a.matrix) == bits(&b.matrix);
    let same_params = a.model.params().bit_eq(b.model.params());
    let same_losses = a.loss_log.len() == b.loss_log.len()
        && a.loss_log.iter().zip(&b.loss_log).all(|(x, y)| x.parts.ce.to_bits() == y.parts.ce.to_bits());
    verdict(
        same_matrix && same_params && same_losses,
        format!("matrix {same_matrix}, weights {same_params}, per-step CE {same_losses}"),
    )
}

/// Lower 2.5% quantile of the bootstrap distribution of the mean.
fn bootstrap_lower(diffs: &[f64], rng: &mut RngStream) -> f64 {
    let n = diffs.len();
    let mut means: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| (0..n).map(|_| diffs[rng.below(n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    means[BOOTSTRAP_RESAMPLES * 25 / 1000]
}

fn domain_gap_closure(all: &[SeedRuns]) -> R<Verdict> {
    let t = Instant::now();
    let (mut base_conf, mut adapted_conf, mut diffs) = (Vec::new(), Vec::new(), Vec::new());
    for runs in all {
        let gen = &runs.pre.generator;
        let guidance = gen.config().guidance;
        let scorer = &runs.lora.model;
        let seed = runs.pre.suite.config.seed;
        for entry in runs.lora.registry.entries() {
            let classes: Vec<&String> = entry.classes.iter().collect();
            let mut stream = RngStream::new(seed, label_hash("acceptance.gap")).derive_n("task", entry.task as u64);
            for (c, class) in classes.iter().enumerate() {
                let count = (GAP_SAMPLES - c).div_ceil(classes.len());
                let seeds: Vec<u64> = (0..count).map(|_| rand::RngCore::next_u64(&mut stream)).collect();
                let mut base = sample_cfg_many(&GeneratorView::base(gen), class, guidance, &seeds, Provenance::Base)?;
                let view = apply_adapter(gen, &entry.adapter)?;
                let mut adapted = sample_cfg_many(&view, class, guidance, &seeds, Provenance::Adapter(entry.task))?;
                score_candidates(&mut base, scorer)?;
                score_candidates(&mut adapted, scorer)?;
                for (b, a) in base.iter().zip(&adapted) {
                    let (b, a) = (b.confidence.unwrap(), a.confidence.unwrap());
                    base_conf.push(b);
                    adapted_conf.push(a);
                    diffs.push(a - b);
                }
            }
        }
    }
    let lower = bootstrap_lower(&diffs, &mut RngStream::new(8, label_hash("acceptance.bootstrap")));
    let prep: Duration = all.iter().map(|r| r.pretrain_time + r.lora_time).sum();
    let el = prep + t.elapsed();
    verdict(
        mean(&adapted_conf) > mean(&base_conf) && lower > 0.0 && el < GAP_BUDGET,
        format!(
            "adapted {:.4} vs base {:.4} over {} pairs; paired mean {:.4}, 95% bootstrap lower {lower:.4}; {el:.0?} incl. training",
            mean(&adapted_conf),
            mean(&base_conf),
            diffs.len(),
            mean(&diffs)
        ),
    )
}

fn last_of(o: &RunOutput) -> f64 {
    o.report.last.unwrap_or(f64::NAN)
}

fn method_ordering(all: &[SeedRuns], elapsed: Duration) -> R<Verdict> {
    let lora = mean(&all.iter().map(|r| last_of(&r.lora)).collect::<Vec<_>>());
    let frozen = mean(&all.iter().map(|r| last_of(&r.frozen)).collect::<Vec<_>>());
    let ft = mean(&all.iter().map(|r| last_of(&r.finetune)).collect::<Vec<_>>());
    verdict(
        lora >= frozen && frozen >= ft + ORDERING_MARGIN && lora >= ft + ORDERING_MARGIN && elapsed < ORDERING_BUDGET,
        format!("Last: lora_loop {lora:.4} ≥ frozen {frozen:.4} ≥ finetune {ft:.4} + {ORDERING_MARGIN}; {elapsed:.0?}"),
    )
}

fn stability(all: &[SeedRuns]) -> R<Verdict> {
    let transfer = |f: fn(&SeedRuns) -> &RunOutput| {
        mean(&all.iter().map(|r| f(r).report.transfer.unwrap_or(f64::NAN)).collect::<Vec<_>>())
    };
    let drop = |f: fn(&SeedRuns) -> &RunOutput| {
        mean(&all.iter().map(|r| f(r).report.base.initial - f(r).report.base.last).collect::<Vec<_>>())
    };
    let (tl, tf) = (transfer(|r| &r.lora), transfer(|r| &r.finetune));
    let (dl, df) = (drop(|r| &r.lora), drop(|r| &r.finetune));
    verdict(
        tl >= tf && dl.abs() <= BASE_RETENTION && df > BASE_RETENTION,
        format!(
            "Transfer lora_loop {tl:.4} ≥ finetune {tf:.4}; base-pool drop lora_loop {:.1} pts (≤ {:.0}), finetune {:.1} pts",
            dl * 100.0,
            BASE_RETENTION * 100.0,
            df * 100.0
        ),
    )
}

fn filter_ordering(all: &[SeedRuns]) -> R<Verdict> {
    let top = mean(&all.iter().map(|r| last_of(&r.lora)).collect::<Vec<_>>());
    let bottom = mean(&all.iter().map(|r| last_of(&r.bottom)).collect::<Vec<_>>());
    verdict(top >= bottom, format!("Last: top {top:.4} ≥ bottom {bottom:.4}"))
}

// 12

fn storage_accounting(runs: &SeedRuns) -> R<Verdict> {
    let table = real_replay_storage_bytes(40, 2, 256) == 163_840;

    let cfg = common::tiny_config(4);
    let pre = pretrain(&cfg)?;
    let budget = 3;
    let rr = run_method(
        &pre,
        &RunConfig {
            method: Method::RealReplay { budget },
            ..cfg.clone()
        },
    )?;
    // The buffer ends up holding the base pool and every task's classes.
    let s = &cfg.suite;
    let classes = s.base_classes + s.n_tasks * s.classes_per_task;
    let real = rr.storage_bytes == Some((classes * budget * PIXELS * 8) as u64);

    let gen = &runs.pre.generator;
    let mut expected = 0u64;
    for e in runs.lora.registry.entries() {
        for l in e.adapter.layers() {
            let (d_out, d_in) = gen.layer_shape(&l.layer)?;
            expected += (e.adapter.rank() * (d_in + d_out) * 8) as u64;
        }
    }
    let adapters = runs.lora.storage_bytes == Some(expected);
    verdict(
        table && real && adapters,
        format!(
            "40·2·256·8 = 163840 {table}; real_replay({budget}) {:?} {real}; adapters {:?} vs {expected} {adapters}",
            rr.storage_bytes, runs.lora.storage_bytes
        ),
    )
}

// 13

fn determinism(first: &SeedRuns) -> R<Verdict> {
    let cfg = desk_config(first.pre.suite.config.seed);
    let pre = pretrain(&cfg)?;
    let again = run_method(&pre, &cfg)?;
    let a = serde_json::to_string_pretty(&first.lora.report)?;
    let b = serde_json::to_string_pretty(&again.report)?;
    verdict(a == b, format!("metrics.json {} bytes, identical: {}", a.len(), a == b))
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    let mut run = |id: usize, name: &str, f: &mut dyn FnMut() -> R<Verdict>| {
        let t = Instant::now();
        results.push(report(id, name, t, f()));
    };
    run(1, "gradient correctness", &mut gradient_correctness);
    run(2, "probability contract", &mut probability_contract);
    run(3, "LoRA no-op identity", &mut lora_noop_identity);
    run(4, "CFG identities", &mut cfg_identities);
    run(5, "selection oracles", &mut selection_oracles);
    run(6, "metric oracle", &mut metric_oracle);

    let t = Instant::now();
    let mut trend = Vec::new();
    let mut trend_err = None;
    for &seed in &TREND_SEEDS {
        match run_seed(seed) {
            Ok(r) => {
                eprintln!(
                    "seed {seed}: lora_loop {:.4} frozen {:.4} finetune {:.4} bottom {:.4}",
                    last_of(&r.lora),
                    last_of(&r.frozen),
                    last_of(&r.finetune),
                    last_of(&r.bottom)
                );
                trend.push(r);
            }
            Err(e) => {
                trend_err = Some(format!("seed {seed}: {e}"));
                break;
            }
        }
    }
    let trend_time = t.elapsed();
    let trend_ok = |trend: &[SeedRuns]| -> R<()> {
        match &trend_err {
            Some(e) => Err(e.clone().into()),
            None if trend.is_empty() => Err("no seeds ran".into()),
            None => Ok(()),
        }
    };
    run(7, "baseline equivalence", &mut || {
        trend_ok(&trend)?;
        baseline_equivalence(&trend[0])
    });
    run(8, "domain-gap closure", &mut || {
        trend_ok(&trend)?;
        domain_gap_closure(&trend)
    });
    run(9, "method ordering", &mut || {
        trend_ok(&trend)?;
        method_ordering(&trend, trend_time)
    });
    run(10, "stability", &mut || {
        trend_ok(&trend)?;
        stability(&trend)
    });
    run(11, "filtering-policy ordering", &mut || {
        trend_ok(&trend)?;
        filter_ordering(&trend)
    });
    run(12, "storage accounting", &mut || {
        trend_ok(&trend)?;
        storage_accounting(&trend[0])
    });
    run(13, "determinism", &mut || {
        trend_ok(&trend)?;
        determinism(&trend[0])
    });

    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
