#![allow(dead_code)]

use mtunet_core::data::{generate, Dataset, SynthConfig};
use mtunet_core::loss::SchemeKind;
use mtunet_core::model::{ModelConfig, Variant};
use mtunet_lab::TrainConfig;

pub fn tiny_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        height: 16,
        width: 16,
        samples_per_class: 10,
        blob_spread: 2.0,
        seed,
        ..SynthConfig::default()
    }
}

pub fn tiny_dataset() -> Dataset {
    generate(&tiny_synth(11)).unwrap()
}

pub fn tiny_config(variant: Variant, scheme: SchemeKind) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            input_height: 16,
            input_width: 16,
            depth: 2,
            base_features: 4,
            head_hidden: 8,
            variant,
            ..ModelConfig::default()
        },
        scheme,
        lr: 3e-3,
        patience: 3,
        batch_size: 4,
        max_epochs: 12,
        ..TrainConfig::default()
    }
}
