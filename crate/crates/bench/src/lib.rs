//! Fixtures shared by the benchmarks.

use cddm_core::dataset::{generate_dataset, Dataset, DatasetConfig, KnobRanges};
use cddm_core::diffusion::{DenoiserModel, ModelConfig, ModelKind};
use cddm_core::scenario::ScenarioConfig;

pub fn desk_scenario() -> ScenarioConfig {
    ScenarioConfig {
        num_ues: 6,
        pilot_length: 6,
        ..ScenarioConfig::desk()
    }
}

/// Small dataset drawn over the desk knob ranges.
pub fn dataset(samples: usize) -> Dataset {
    let cfg = DatasetConfig {
        knobs: KnobRanges {
            num_ues: (3, 8),
            pilot_lengths: vec![4, 6],
            max_target_distance: (2.5, 20.0),
            target_snr_db: (0.0, 10.0),
        },
        ..DatasetConfig::fixed(desk_scenario(), samples)
    };
    generate_dataset(&cfg).expect("valid bench dataset")
}

/// Untrained desk-size model; weights do not affect timing.
pub fn model(kind: ModelKind) -> DenoiserModel {
    let cfg = ModelConfig {
        kind,
        antennas: 4,
        steps: 20,
        ..ModelConfig::default()
    };
    DenoiserModel::new(&cfg, 1.0).expect("valid bench model")
}
