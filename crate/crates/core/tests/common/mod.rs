#![allow(dead_code)]

use loraloop::continual::{PretrainConfig, RunConfig};
use loraloop::lora::LoraConfig;
use loraloop::taskgen::SuiteConfig;

/// Seconds-scale configuration that still exercises every step of the loop.
pub fn tiny_config(seed: u64) -> RunConfig {
    let base = RunConfig::default();
    RunConfig {
        seed,
        suite: SuiteConfig {
            n_tasks: 2,
            classes_per_task: 3,
            base_classes: 4,
            train_per_class: 6,
            test_per_class: 4,
            corpus_per_class: 4,
            ..SuiteConfig::default()
        },
        pretrain: PretrainConfig {
            vlm_steps: 30,
            vlm_batch: 16,
            gen_epochs: 2,
            gen_batch: 16,
            seed_importance: true,
        },
        lora: LoraConfig {
            epochs: 3,
            ..base.lora.clone()
        },
        steps_per_task: 6,
        batch: 8,
        m_pre: 2,
        ..base
    }
}
