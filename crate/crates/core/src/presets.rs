//! Desk-scale experiment presets: small models and sample counts sized for
//! a laptop, with the full-scale counts available behind a config knob.

use crate::error::Result;
use crate::frustum::EnsembleSpec;
use crate::layers::IntegratorMode;
use crate::synth::Experiment;
use crate::train::TrainConfig;

pub const DESK_IMAGE_SIZE: usize = 32;
pub const DESK_WIDTH_SCALE: f64 = 0.125;
/// Per-class (train, val, test) counts of the desk presets.
pub const DESK_COUNTS: (usize, usize, usize) = (200, 50, 100);
/// Per-category split sizes of the full-scale corpus.
pub const FULL_SCALE_COUNTS: (usize, usize, usize) = (3519, 621, 460);
/// Learning-rate set trials sweep by default.
pub const LEARNING_RATES: [f64; 3] = [0.001, 0.005, 0.01];

#[derive(Debug, Clone)]
pub struct DeskPreset {
    pub experiment: Experiment,
    pub counts: (usize, usize, usize),
    pub image_size: usize,
    pub width_scale: f64,
    pub train: TrainConfig,
}

/// The desk preset of an experiment: 1/8-width ensemble on 32x32 images,
/// 10 epochs, reduced per-class counts.
pub fn desk_preset(experiment: Experiment) -> DeskPreset {
    let counts = match experiment {
        Experiment::BinaryIo | Experiment::EncryptedIo => DESK_COUNTS,
        // four classes: halve the per-class counts to keep totals even
        Experiment::BinaryBdoq => (DESK_COUNTS.0 / 2, DESK_COUNTS.1 / 2, DESK_COUNTS.2 / 2),
    };
    DeskPreset {
        experiment,
        counts,
        image_size: DESK_IMAGE_SIZE,
        width_scale: DESK_WIDTH_SCALE,
        train: TrainConfig {
            width_scale: DESK_WIDTH_SCALE,
            ..TrainConfig::default()
        },
    }
}

impl DeskPreset {
    pub fn ensemble_spec(&self) -> Result<EnsembleSpec> {
        EnsembleSpec::canonical(
            self.experiment.classes().len(),
            (self.image_size, self.image_size, 1),
            self.width_scale,
            IntegratorMode::DensePerClass,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_build() {
        for id in 1..=3 {
            let preset = desk_preset(Experiment::from_id(id).unwrap());
            let spec = preset.ensemble_spec().unwrap();
            assert_eq!(spec.width_scale(), 0.125);
            assert!(preset.counts.0 * spec.class_count == 400);
        }
    }
}
