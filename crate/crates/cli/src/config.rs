//! Run configuration: a single JSON file drives every subcommand.
//!
//! The schema is strict — unknown keys are rejected so stale configs fail
//! loudly instead of silently drifting. Model-scale presets bundle the
//! architecture dimensions with default optimizer settings; the larger
//! presets exist as named reference configurations and trigger a warning
//! when actually run, because they are sized for datacenter hardware.

use crate::commands::{CResult, CliError};
use plume_core::denoiser::{CondMode, DenoiserConfig};
use plume_core::diffusion::{ScheduleKind, DEFAULT_COND_DROP_PROB, DEFAULT_VLB_WEIGHT};
use plume_core::meshing::SdfConfig;
use plume_core::metrics::ClassifierConfig;
use plume_core::samplers::{
    BASE_SIGMA_MAX, BASE_S_CHURN, DEFAULT_RHO, DEFAULT_SAMPLER_STEPS, DEFAULT_SIGMA_MIN,
    UPSAMPLER_SIGMA_MAX, UPSAMPLER_S_CHURN,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable holding the worker-thread count used where commands
/// parallelize across independent files (evaluation). Defaults to the number
/// of available cores.
pub const THREADS_ENV: &str = "PLUME_THREADS";

/// Model-scale preset. `desk` is the size this workbench is built around;
/// the `paper_*` presets record the reference configurations of the original
/// large-scale models and are not runnable in reasonable time on a desktop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// Smoke-test scale: tiny transformers for fast pipeline tests.
    #[serde(rename = "tiny")]
    Tiny,
    /// Desktop scale: base 128x4 on 256 points, upsampler 96x4 to 1024.
    #[serde(rename = "desk")]
    Desk,
    /// Reference: base width 512, depth 12, lr 1e-4, 1024 points.
    #[serde(rename = "paper_40m")]
    Paper40m,
    /// Reference: base width 1024, depth 24, lr 7e-5.
    #[serde(rename = "paper_300m")]
    Paper300m,
    /// Reference: base width 2048, depth 24, lr 5e-5.
    #[serde(rename = "paper_1b")]
    Paper1b,
}

impl Default for Preset {
    fn default() -> Self {
        Preset::Desk
    }
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::Desk => "desk",
            Preset::Paper40m => "paper_40m",
            Preset::Paper300m => "paper_300m",
            Preset::Paper1b => "paper_1b",
        }
    }

    /// True for the datacenter-scale reference presets.
    pub fn is_reference_scale(&self) -> bool {
        matches!(self, Preset::Paper40m | Preset::Paper300m | Preset::Paper1b)
    }

    pub fn base_denoiser(&self, cond_mode: CondMode) -> DenoiserConfig {
        match self {
            Preset::Tiny => DenoiserConfig {
                width: 32,
                depth: 1,
                heads: 2,
                point_count: 256,
                cond_mode,
                num_classes: plume_core::dataset::NUM_CLASSES,
                image_size: 32,
                patch_size: 8,
                is_upsampler: false,
                cond_point_count: 0,
            },
            Preset::Desk => DenoiserConfig::desk_base(cond_mode),
            Preset::Paper40m => paper_base(512, 12, 8, cond_mode),
            Preset::Paper300m => paper_base(1024, 24, 16, cond_mode),
            Preset::Paper1b => paper_base(2048, 24, 32, cond_mode),
        }
    }

    pub fn upsampler_denoiser(&self, cond_mode: CondMode) -> DenoiserConfig {
        match self {
            Preset::Tiny => DenoiserConfig {
                width: 32,
                depth: 1,
                heads: 2,
                point_count: 768,
                cond_mode,
                num_classes: plume_core::dataset::NUM_CLASSES,
                image_size: 32,
                patch_size: 8,
                is_upsampler: true,
                cond_point_count: 256,
            },
            Preset::Desk => DenoiserConfig::desk_upsampler(cond_mode),
            // The reference stack uses one upsampler size (512x12) for every
            // base size: 1024 conditioning points, 3072 generated.
            Preset::Paper40m | Preset::Paper300m | Preset::Paper1b => DenoiserConfig {
                width: 512,
                depth: 12,
                heads: 8,
                point_count: 3072,
                cond_mode,
                num_classes: plume_core::dataset::NUM_CLASSES,
                image_size: 32,
                patch_size: 4,
                is_upsampler: true,
                cond_point_count: 1024,
            },
        }
    }

    pub fn sdf_config(&self) -> SdfConfig {
        match self {
            Preset::Tiny => SdfConfig {
                width: 32,
                heads: 2,
                encoder_depth: 2,
                decoder_depth: 1,
            },
            _ => SdfConfig::desk(),
        }
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        match self {
            Preset::Tiny => ClassifierConfig {
                width: 32,
                heads: 2,
                depth: 1,
                num_classes: plume_core::dataset::NUM_CLASSES,
            },
            _ => ClassifierConfig::desk(),
        }
    }

    /// Default batch size for diffusion-model training.
    pub fn default_diffusion_batch(&self) -> usize {
        match self {
            Preset::Tiny => 4,
            Preset::Desk => 32,
            _ => 64,
        }
    }

    /// Default Adam learning rate for diffusion-model training.
    pub fn default_diffusion_lr(&self) -> f64 {
        match self {
            Preset::Tiny => 1e-3,
            Preset::Desk => 7e-4,
            Preset::Paper40m => 1e-4,
            Preset::Paper300m => 7e-5,
            Preset::Paper1b => 5e-5,
        }
    }
}

fn paper_base(width: usize, depth: usize, heads: usize, cond_mode: CondMode) -> DenoiserConfig {
    DenoiserConfig {
        width,
        depth,
        heads,
        point_count: 1024,
        cond_mode,
        num_classes: plume_core::dataset::NUM_CLASSES,
        image_size: 32,
        patch_size: 4,
        is_upsampler: false,
        cond_point_count: 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondChoice {
    /// Unconditional model.
    None,
    /// Single learned class-embedding token.
    Vector,
    /// Grid of learned patch tokens from a rendered view.
    Grid,
}

impl CondChoice {
    pub fn to_mode(self) -> CondMode {
        match self {
            CondChoice::None => CondMode::None,
            CondChoice::Vector => CondMode::SingleVector,
            CondChoice::Grid => CondMode::TokenGrid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleChoice {
    Linear,
    Cosine,
}

impl ScheduleChoice {
    pub fn to_kind(self) -> ScheduleKind {
        match self {
            ScheduleChoice::Linear => ScheduleKind::Linear,
            ScheduleChoice::Cosine => ScheduleKind::Cosine,
        }
    }

    pub fn from_name(name: &str) -> CResult<Self> {
        match name {
            "linear" => Ok(ScheduleChoice::Linear),
            "cosine" => Ok(ScheduleChoice::Cosine),
            other => Err(CliError::Config(format!(
                "unknown schedule {other:?}; expected \"linear\" or \"cosine\""
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleChoice::Linear => "linear",
            ScheduleChoice::Cosine => "cosine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMethod {
    /// Second-order ODE sampler over the Karras sigma ladder.
    Heun,
    /// Stochastic ancestral sampler over the full discrete schedule.
    Ddpm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewSource {
    /// Condition on stored renders of dataset records.
    DatasetRender,
    /// Condition on a view image file supplied with `--image`.
    ImageFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Records per shape class; classes are interleaved round-robin.
    pub per_class_count: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            per_class_count: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Conditioning pathway for newly initialized diffusion models.
    pub cond_mode: CondChoice,
    /// Diffusion timestep count T.
    pub timesteps: usize,
    /// Noise schedule for the base model.
    pub base_schedule: ScheduleChoice,
    /// Noise schedule for the upsampler.
    pub upsampler_schedule: ScheduleChoice,
    /// Weight of the variational-bound term in the training loss.
    pub vlb_weight: f64,
    /// Probability of replacing conditioning with the learned null token
    /// during training (the low-res cloud of the upsampler is never dropped).
    pub cond_drop_prob: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            cond_mode: CondChoice::Grid,
            timesteps: plume_core::diffusion::DEFAULT_TIMESTEPS,
            base_schedule: ScheduleChoice::Cosine,
            upsampler_schedule: ScheduleChoice::Linear,
            vlb_weight: DEFAULT_VLB_WEIGHT,
            cond_drop_prob: DEFAULT_COND_DROP_PROB,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Absolute step target; `None` uses the per-kind default.
    pub steps: Option<u64>,
    /// Gradient-accumulation batch size; `None` uses the per-kind default.
    pub batch_size: Option<usize>,
    /// Adam learning rate; `None` uses the per-kind default.
    pub learning_rate: Option<f64>,
    /// Steps between checkpoint writes (a final write always happens).
    pub checkpoint_interval: u64,
    /// Steps between loss-log lines.
    pub log_interval: u64,
    /// Steps between sample-based metric snapshots for base/upsampler
    /// training (P-FID, P-IS, class retrieval precision); 0 disables them.
    pub eval_interval: u64,
    /// Clouds generated per metric snapshot.
    pub eval_sample_count: usize,
    /// Heun steps used for snapshot sampling (kept small on purpose).
    pub eval_sampler_steps: usize,
    /// Fraction of records held out from training draws, used for the
    /// classifier accuracy and SDF generalization measurements.
    pub holdout_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: None,
            batch_size: None,
            learning_rate: None,
            checkpoint_interval: 200,
            log_interval: 20,
            eval_interval: 0,
            eval_sample_count: 24,
            eval_sampler_steps: 8,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub method: SamplerMethod,
    /// Heun ladder length (ignored by ddpm, which walks all T steps).
    pub steps: usize,
    pub guidance_scale: f64,
    pub sigma_min: f64,
    pub sigma_max_base: f64,
    pub sigma_max_upsampler: f64,
    pub rho: f64,
    pub s_churn_base: f64,
    pub s_churn_upsampler: f64,
    /// Run the upsampler stage when its checkpoint is configured.
    pub use_upsampler: bool,
    /// Default sample count for `plume sample`.
    pub count: usize,
    pub view_source: ViewSource,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            method: SamplerMethod::Heun,
            steps: DEFAULT_SAMPLER_STEPS,
            guidance_scale: plume_core::diffusion::DEFAULT_GUIDANCE_SCALE,
            sigma_min: DEFAULT_SIGMA_MIN,
            sigma_max_base: BASE_SIGMA_MAX,
            sigma_max_upsampler: UPSAMPLER_SIGMA_MAX,
            rho: DEFAULT_RHO,
            s_churn_base: BASE_S_CHURN,
            s_churn_upsampler: UPSAMPLER_S_CHURN,
            use_upsampler: true,
            count: 8,
            view_source: ViewSource::DatasetRender,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Must equal [`SCHEMA_VERSION`].
    pub schema_version: u32,
    #[serde(default)]
    pub preset: Preset,
    pub seed: u64,
    /// Directory holding (or receiving) the dataset files.
    pub dataset_dir: PathBuf,
    /// Directory for checkpoints, logs, statistics, and default outputs.
    pub run_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sampler: SamplerSection,
}

impl RunConfig {
    /// A config with every defaultable field at its default.
    pub fn new(preset: Preset, seed: u64, dataset_dir: PathBuf, run_dir: PathBuf) -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            preset,
            seed,
            dataset_dir,
            run_dir,
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            sampler: SamplerSection::default(),
        }
    }

    /// Reads and validates a config file. All failures here are config
    /// errors (exit code 2).
    pub fn load(path: &Path) -> CResult<RunConfig> {
        let bytes = std::fs::read(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig = serde_json::from_slice(&bytes).map_err(|e| {
            CliError::Config(format!("{}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> CResult<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Runtime(format!("config not serializable: {e}")))?;
        text.push('\n');
        std::fs::write(path, text)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }

    pub fn validate(&self) -> CResult<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "config schema version is {}, this build supports {SCHEMA_VERSION}",
                self.schema_version
            ));
        }
        if self.dataset_dir.as_os_str().is_empty() {
            return bad("dataset_dir must not be empty".into());
        }
        if self.run_dir.as_os_str().is_empty() {
            return bad("run_dir must not be empty".into());
        }
        if self.dataset.per_class_count == 0 {
            return bad("dataset.per_class_count must be at least 1".into());
        }
        let m = &self.model;
        if m.timesteps < 2 {
            return bad(format!("model.timesteps must be at least 2, got {}", m.timesteps));
        }
        if !(m.vlb_weight.is_finite() && m.vlb_weight >= 0.0) {
            return bad(format!("model.vlb_weight must be finite and >= 0, got {}", m.vlb_weight));
        }
        if !(0.0..=1.0).contains(&m.cond_drop_prob) {
            return bad(format!(
                "model.cond_drop_prob must lie in [0, 1], got {}",
                m.cond_drop_prob
            ));
        }
        let t = &self.train;
        if t.steps == Some(u64::MAX) {
            return bad("train.steps is implausibly large".into());
        }
        if t.batch_size == Some(0) {
            return bad("train.batch_size must be at least 1".into());
        }
        if let Some(lr) = t.learning_rate {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("train.learning_rate must be finite and positive, got {lr}"));
            }
        }
        if t.checkpoint_interval == 0 || t.log_interval == 0 {
            return bad("train.checkpoint_interval and train.log_interval must be at least 1".into());
        }
        if !(0.0..=0.5).contains(&t.holdout_fraction) {
            return bad(format!(
                "train.holdout_fraction must lie in [0, 0.5], got {}",
                t.holdout_fraction
            ));
        }
        if t.eval_interval > 0 {
            if t.eval_sample_count == 0 {
                return bad("train.eval_sample_count must be at least 1 when snapshots are enabled".into());
            }
            if t.eval_sampler_steps < 2 {
                return bad("train.eval_sampler_steps must be at least 2".into());
            }
        }
        let s = &self.sampler;
        if s.steps < 2 {
            return bad(format!("sampler.steps must be at least 2, got {}", s.steps));
        }
        if !s.guidance_scale.is_finite() {
            return bad("sampler.guidance_scale must be finite".into());
        }
        if !(s.sigma_min > 0.0 && s.sigma_min < s.sigma_max_base) {
            return bad(format!(
                "sampler sigma range must satisfy 0 < sigma_min < sigma_max_base, got {} and {}",
                s.sigma_min, s.sigma_max_base
            ));
        }
        if s.sigma_min >= s.sigma_max_upsampler {
            return bad(format!(
                "sampler.sigma_max_upsampler must exceed sigma_min, got {}",
                s.sigma_max_upsampler
            ));
        }
        if !(s.rho > 0.0) {
            return bad(format!("sampler.rho must be positive, got {}", s.rho));
        }
        if s.s_churn_base < 0.0 || s.s_churn_upsampler < 0.0 {
            return bad("sampler churn values must be non-negative".into());
        }
        if s.count == 0 {
            return bad("sampler.count must be at least 1".into());
        }
        Ok(())
    }

    /// Hash of the canonical JSON serialization; identifies the exact
    /// configuration in sidecars and reports.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(&bytes);
        hex(&h.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Reads the worker-thread count from the environment, defaulting to the
/// number of available cores. A malformed value is a config error.
pub fn thread_count() -> CResult<usize> {
    thread_count_from(std::env::var(THREADS_ENV).ok())
}

fn thread_count_from(value: Option<String>) -> CResult<usize> {
    match value {
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
        None => Ok(std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_config() -> RunConfig {
        RunConfig::new(
            Preset::Desk,
            7,
            PathBuf::from("/tmp/ds"),
            PathBuf::from("/tmp/run"),
        )
    }

    #[test]
    fn round_trips_through_json_with_stable_hash() {
        let cfg = sample_config();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.content_hash(), back.content_hash());
        assert_eq!(cfg.content_hash().len(), 64);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        let mut v = serde_json::to_value(sample_config()).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(serde_json::from_value::<RunConfig>(v).is_err());

        let mut v = serde_json::to_value(sample_config()).unwrap();
        v["sampler"]["surprise"] = serde_json::json!(1);
        let err = serde_json::from_value::<RunConfig>(v).unwrap_err();
        assert!(err.to_string().contains("surprise"), "{err}");
    }

    #[test]
    fn schema_version_mismatch_is_a_config_error_naming_both() {
        let mut cfg = sample_config();
        cfg.schema_version = 9;
        let err = cfg.validate().unwrap_err();
        match err {
            CliError::Config(msg) => {
                assert!(msg.contains('9') && msg.contains('1'), "{msg}");
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn missing_sections_fall_back_to_defaults() {
        let text = r#"{
            "schema_version": 1,
            "seed": 3,
            "dataset_dir": "/tmp/a",
            "run_dir": "/tmp/b"
        }"#;
        let cfg: RunConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.preset, Preset::Desk);
        assert_eq!(cfg.sampler.steps, 64);
        assert_eq!(cfg.sampler.guidance_scale, 3.0);
        assert_eq!(cfg.model.timesteps, 1024);
        assert_eq!(cfg.dataset.per_class_count, 100);
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let mut cfg = sample_config();
        cfg.model.cond_drop_prob = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = sample_config();
        cfg.sampler.steps = 1;
        assert!(cfg.validate().is_err());

        let mut cfg = sample_config();
        cfg.train.holdout_fraction = 0.9;
        assert!(cfg.validate().is_err());

        let mut cfg = sample_config();
        cfg.train.learning_rate = Some(-1.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn preset_architectures_are_internally_consistent() {
        for preset in [
            Preset::Tiny,
            Preset::Desk,
            Preset::Paper40m,
            Preset::Paper300m,
            Preset::Paper1b,
        ] {
            for cond in [CondMode::None, CondMode::SingleVector, CondMode::TokenGrid] {
                let base = preset.base_denoiser(cond);
                base.validate().unwrap();
                assert!(!base.is_upsampler);
                let up = preset.upsampler_denoiser(cond);
                up.validate().unwrap();
                assert!(up.is_upsampler);
                assert!(up.cond_point_count > 0);
            }
            preset.sdf_config().validate().unwrap();
            preset.classifier_config().validate().unwrap();
        }
    }

    #[test]
    fn desk_preset_matches_the_published_defaults() {
        let base = Preset::Desk.base_denoiser(CondMode::TokenGrid);
        assert_eq!((base.width, base.depth, base.point_count), (128, 4, 256));
        let up = Preset::Desk.upsampler_denoiser(CondMode::TokenGrid);
        assert_eq!(
            (up.width, up.depth, up.point_count, up.cond_point_count),
            (96, 4, 768, 256)
        );
        assert_eq!(Preset::Desk.default_diffusion_batch(), 32);
        let s = SamplerSection::default();
        assert_eq!(s.steps, 64);
        assert_eq!(s.guidance_scale, 3.0);
        assert_eq!((s.s_churn_base, s.s_churn_upsampler), (3.0, 0.0));
        assert_eq!((s.sigma_max_base, s.sigma_max_upsampler), (120.0, 160.0));
    }

    #[test]
    fn reference_presets_record_the_large_scale_rows() {
        let b40 = Preset::Paper40m.base_denoiser(CondMode::TokenGrid);
        assert_eq!((b40.width, b40.depth), (512, 12));
        assert_eq!(Preset::Paper40m.default_diffusion_lr(), 1e-4);
        let b300 = Preset::Paper300m.base_denoiser(CondMode::TokenGrid);
        assert_eq!((b300.width, b300.depth), (1024, 24));
        assert_eq!(Preset::Paper300m.default_diffusion_lr(), 7e-5);
        let b1b = Preset::Paper1b.base_denoiser(CondMode::TokenGrid);
        assert_eq!((b1b.width, b1b.depth), (2048, 24));
        assert_eq!(Preset::Paper1b.default_diffusion_lr(), 5e-5);
        assert_eq!(Preset::Paper40m.default_diffusion_batch(), 64);
        assert!(Preset::Paper40m.is_reference_scale());
        assert!(!Preset::Desk.is_reference_scale());
    }

    #[test]
    fn thread_count_values_parse_or_reject() {
        assert_eq!(thread_count_from(Some("4".into())).unwrap(), 4);
        assert_eq!(thread_count_from(Some(" 2 ".into())).unwrap(), 2);
        assert!(thread_count_from(Some("0".into())).is_err());
        assert!(thread_count_from(Some("many".into())).is_err());
        assert!(thread_count_from(None).unwrap() >= 1);
    }
}
