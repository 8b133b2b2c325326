//! The run configuration: one JSON document covering every stage,
//! with command-line flags taking precedence over the file and the
//! file over built-in defaults. All stage seeds derive from the
//! single top-level seed, so a run is reproducible from one number.

use std::path::Path;

use serde::{Deserialize, Serialize};

use lesiontrack::error::{Error, Result};
use lesiontrack::refine::{RefineTrainConfig, RefinerConfig};
use lesiontrack::registration::RegistrationConfig;
use lesiontrack::sampling::{PairOrientation, PatchSpec, SynthConfig, Variant};
use lesiontrack::tracknet::{TrackerConfig, TrainConfig};

/// Environment variable consulted when neither the flag nor the
/// config file provides a seed.
pub const SEED_ENV: &str = "TRACKER_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; stage seeds are derived from it.
    pub seed: Option<u64>,
    pub patch: PatchSpec,
    /// Template input construction.
    pub variant: Variant,
    /// Synthetic dataset geometry (the training split's case count).
    pub synth: SynthConfig,
    /// Case count of the held-out test split.
    pub test_cases: usize,
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
    pub refiner: RefinerConfig,
    pub refine_train: RefineTrainConfig,
    pub registration: RegistrationConfig,
    /// Rank detections by cls x centerness (ablation toggle).
    pub use_centerness: bool,
    /// Training-time jitter of the search-patch center as a fraction
    /// of the search crop, so the network cannot learn that lesions
    /// always sit at the patch center.
    pub center_jitter: f64,
    /// Which exam of a pair provides the annotated template.
    pub orientation: PairOrientation,
}

/// Desk-scale patch geometry matched to the synthetic generator's
/// default spacing. The library's [`PatchSpec::default`] keeps the
/// full-resolution clinical geometry; at 0.28 mm the template crop is
/// exactly 128 px, so no resampling happens on the template side.
fn desk_patch() -> PatchSpec {
    PatchSpec {
        template_extent_mm: 35.84,
        search_extent_mm: 71.68,
        template_px: 128,
        search_px: 256,
        spacing_mm: 0.28,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            patch: desk_patch(),
            variant: Variant::MaskGuided,
            synth: SynthConfig::default(),
            test_cases: 10,
            tracker: TrackerConfig::for_variant(Variant::MaskGuided),
            train: TrainConfig::default(),
            refiner: RefinerConfig::default(),
            refine_train: RefineTrainConfig::default(),
            registration: RegistrationConfig::default(),
            use_centerness: true,
            center_jitter: 0.1,
            orientation: PairOrientation::LaterTemplate,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        // A bad or missing run config is an invocation problem, not a
        // data problem, so both failure modes classify as Config.
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("run config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("run config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Validate every stage configuration before any compute runs.
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.synth.validate()?;
        self.tracker.validate()?;
        self.train.validate()?;
        self.refiner.validate()?;
        self.refine_train.validate()?;
        self.registration.validate()?;
        let want = if self.variant.uses_mask() { 2 } else { 1 };
        if self.tracker.in_channels != want {
            return Err(Error::Config(format!(
                "tracker.in_channels must be {want} for the {:?} variant, got {}",
                self.variant, self.tracker.in_channels
            )));
        }
        if !(0.0..0.5).contains(&self.center_jitter) {
            return Err(Error::OutOfRange {
                what: "center_jitter",
                range: "[0, 0.5)",
                value: self.center_jitter,
            });
        }
        if (self.synth.spacing_mm - self.patch.spacing_mm).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "synth.spacing_mm {} differs from patch.spacing_mm {}",
                self.synth.spacing_mm, self.patch.spacing_mm
            )));
        }
        Ok(())
    }

    /// Resolve the master seed: flag > config file > TRACKER_SEED
    /// environment variable > 0.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag {
            return Ok(s);
        }
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(text) => text.parse::<u64>().map_err(|_| {
                Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {text:?}"))
            }),
            Err(_) => Ok(0),
        }
    }
}

/// Fixed stage labels, so every stage draws from an independent
/// stream of the master seed.
#[derive(Debug, Clone, Copy)]
pub enum SeedStage {
    GenerateTrain,
    GenerateTest,
    TrackerInit,
    TrackerTrain,
    RefinerInit,
    RefinerTrain,
    PairJitter,
}

/// splitmix64 finalizer over (seed, stage), the same mixing the
/// synthesizer uses per case.
pub fn stage_seed(seed: u64, stage: SeedStage) -> u64 {
    let mut z = seed ^ (stage as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
