#![allow(dead_code)]

use prsfda::data::{DomainSpec, SplitSizes};
use prsfda::model::ModelConfig;
use prsfda::pipeline::PhaseConfig;

/// Three well-separated classes on 12x12 images; trains in milliseconds.
pub fn tiny_spec(seed: u64) -> DomainSpec {
    DomainSpec {
        height: 12,
        width: 12,
        num_classes: 3,
        in_channels: 3,
        class_frequencies: vec![0.5, 0.3, 0.2],
        long_tail_classes: vec![],
        palette: vec![
            vec![0.2, 0.2, 0.5],
            vec![0.8, 0.3, 0.5],
            vec![0.4, 0.8, 0.5],
        ],
        palette_shift: vec![0.05, -0.05, 0.2],
        noise_sigma: 0.05,
        regions_per_image: 6,
        splits: SplitSizes {
            source_train: 8,
            source_val: 4,
            target_train: 6,
            target_eval: 4,
        },
        seed,
    }
}

pub fn tiny_config(seed: u64) -> PhaseConfig {
    PhaseConfig {
        model: ModelConfig {
            num_classes: 3,
            patch_size: 3,
            in_channels: 3,
            hidden_sizes: vec![8],
            head_lr_multiplier: 10.0,
        },
        source_epochs: 6,
        adapt_epochs: 2,
        self_train_epochs: 2,
        target_lr: 1e-3,
        seed,
        ..PhaseConfig::default()
    }
}
