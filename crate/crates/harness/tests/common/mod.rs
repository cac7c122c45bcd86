#![allow(dead_code)]

use apex_core::encoders::EncoderConfig;
use apex_harness::experiment::ExperimentConfig;
use apex_harness::pretrain::PretrainConfig;
use apex_harness::synthetic::SyntheticDatasetSpec;
use apex_core::training::TrainConfig;
use apex_core::tuning::PromptConfig;

/// Small enough for debug-profile tests, large enough to learn something.
pub fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        data: SyntheticDatasetSpec {
            num_classes: 6,
            shots_per_base_class: 4,
            eval_samples_per_class: 6,
            ..SyntheticDatasetSpec::default()
        },
        encoder: EncoderConfig {
            visual_layers: 2,
            text_layers: 2,
            visual_dim: 12,
            text_dim: 12,
            heads: 2,
            patches: 6,
            patch_width: 6,
            token_seq_len: 4,
            vocab_size: 16,
            joint_dim: 8,
            ..EncoderConfig::default()
        },
        prompts: PromptConfig {
            visual_depth: 2,
            text_depth: 1,
            visual_len: 2,
            text_len: 2,
        },
        train: TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        },
        pretrain: PretrainConfig {
            classes: 40,
            ..PretrainConfig::default()
        },
        seeds: vec![0, 1],
        ..ExperimentConfig::default()
    }
}

use apex_core::metrics::Separability;
use apex_harness::experiment::{AlphaStats, SeedReport};

/// A seed report with hand-picked numbers, for aggregation and emission tests.
pub fn fake_seed_report(seed: u64, base_acc: f64, novel_acc: f64) -> SeedReport {
    SeedReport {
        seed,
        base_classes: vec![0, 2, 4],
        novel_classes: vec![1, 3],
        base_acc,
        novel_acc,
        zero_shot_base_acc: base_acc * 0.9,
        zero_shot_novel_acc: novel_acc * 0.95,
        no_ensemble_base_acc: base_acc,
        no_ensemble_novel_acc: novel_acc * 0.97,
        fixed_ensemble_novel_acc: novel_acc * 0.99,
        zero_shot_acc: 0.5 + seed as f64 / 100.0,
        rtd: 0.4,
        separability: Separability {
            intra: 0.8,
            inter: 0.3 + seed as f64 / 1000.0,
            ratio: 0.8 / (0.3 + seed as f64 / 1000.0),
        },
        alpha_stats: AlphaStats {
            mean: 0.2,
            min: 0.1 / (seed + 1) as f64,
            max: 0.3,
        },
        alpha_table: vec![],
        loss_trace: vec![],
    }
}
