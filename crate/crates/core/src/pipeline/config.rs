//! Training configuration and its `key = value` text format.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Every field has a key; unknown or repeated keys are errors. Keys not
//! present keep their defaults.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::PipelineError;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{Prediction, SamplingMode, ScheduleKind, ScheduleSpec};
use crate::hfpm::{HfpmConfig, HfpmVersion};
use crate::spectral::PhaseDistance;
use crate::vlg::{GuidanceStages, SimilarityMode, DEFAULT_NEGATIVE, DEFAULT_POSITIVE};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Wavelet levels `K`.
    pub levels: usize,
    /// Guidance stages `M ∈ {0, 1, 2, 3}`.
    pub guidance_stages: u8,
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampling_steps: usize,
    pub sampling_mode: SamplingMode,
    /// What the denoiser's raw output estimates.
    pub prediction: Prediction,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub iterations: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    /// `ϑ1`, amplitude weight.
    pub amplitude_weight: f64,
    /// `ϑ2`, phase weight.
    pub phase_weight: f64,
    pub phase_distance: PhaseDistance,
    /// `γ_0 … γ_4`.
    pub content_weights: [f64; 5],
    pub use_vlg: bool,
    pub use_hfpm: bool,
    pub use_content: bool,
    pub hfpm_version: HfpmVersion,
    pub similarity_mode: SimilarityMode,
    pub prompt_positive: String,
    pub prompt_negative: String,
    pub flip: bool,
    pub base_channels: usize,
    pub denoiser_levels: usize,
    pub attention_window: usize,
    pub hfpm_features: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            guidance_stages: 3,
            timesteps: 200,
            schedule: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 2e-2,
            sampling_steps: 10,
            sampling_mode: SamplingMode::Implicit,
            prediction: Prediction::Velocity,
            learning_rate: 1e-4,
            batch_size: 16,
            patch_size: 256,
            iterations: 200_000,
            checkpoint_every: 5_000,
            seed: 0,
            amplitude_weight: 1.0,
            phase_weight: 1.0,
            phase_distance: PhaseDistance::Raw,
            content_weights: [0.2; 5],
            use_vlg: true,
            use_hfpm: true,
            use_content: true,
            hfpm_version: HfpmVersion::V3,
            similarity_mode: SimilarityMode::Corrected,
            prompt_positive: DEFAULT_POSITIVE.into(),
            prompt_negative: DEFAULT_NEGATIVE.into(),
            flip: false,
            base_channels: 32,
            denoiser_levels: 2,
            attention_window: 32,
            hfpm_features: 16,
        }
    }
}

const KEYS: [&str; 32] = [
    "levels",
    "guidance_stages",
    "timesteps",
    "schedule",
    "beta_start",
    "beta_end",
    "sampling_steps",
    "sampling_mode",
    "prediction",
    "learning_rate",
    "batch_size",
    "patch_size",
    "iterations",
    "checkpoint_every",
    "seed",
    "amplitude_weight",
    "phase_weight",
    "phase_distance",
    "content_weights",
    "use_vlg",
    "use_hfpm",
    "use_content",
    "hfpm_version",
    "similarity_mode",
    "prompt_positive",
    "prompt_negative",
    "flip",
    "base_channels",
    "denoiser_levels",
    "attention_window",
    "hfpm_features",
    "preset",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, PipelineError> {
    value.parse().map_err(|_| PipelineError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_with<V>(key: &str, value: &str, f: impl Fn(&str) -> Result<V, String>) -> Result<V, PipelineError> {
    f(value).map_err(|e| PipelineError::Config(format!("{key}: {e}")))
}

fn phase_distance_name(d: PhaseDistance) -> &'static str {
    match d {
        PhaseDistance::Raw => "raw",
        PhaseDistance::Wrapped => "wrapped",
    }
}

impl TrainConfig {
    /// Small settings for CPU runs: batch 2, 64-pixel patches, a narrower
    /// network and a higher learning rate.
    pub fn smoke() -> Self {
        Self {
            batch_size: 2,
            patch_size: 64,
            iterations: 1_500,
            checkpoint_every: 500,
            learning_rate: 1e-3,
            base_channels: 16,
            hfpm_features: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: String| Err(PipelineError::Config(m));
        if self.levels == 0 {
            return fail("levels must be at least 1".into());
        }
        if self.guidance_stages > 3 {
            return fail(format!("guidance_stages must be 0..=3, got {}", self.guidance_stages));
        }
        let divisor = 1usize << (self.levels + self.denoiser_levels);
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(divisor) {
            return fail(format!(
                "patch_size {} must be a positive multiple of 2^(levels + denoiser_levels) = {divisor}",
                self.patch_size
            ));
        }
        if self.content_weights.iter().any(|&g| !(g >= 0.0) || !g.is_finite()) {
            return fail("content_weights must be finite and nonnegative".into());
        }
        if self.sampling_steps == 0 || self.sampling_steps > self.timesteps {
            return fail(format!("sampling_steps must be in 1..={}", self.timesteps));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive".into());
        }
        if self.batch_size == 0 || self.iterations == 0 || self.checkpoint_every == 0 {
            return fail("batch_size, iterations and checkpoint_every must be positive".into());
        }
        for (name, w) in [("amplitude_weight", self.amplitude_weight), ("phase_weight", self.phase_weight)] {
            if !(w >= 0.0 && w.is_finite()) {
                return fail(format!("{name} must be finite and nonnegative"));
            }
        }
        if self.prompt_positive.trim().is_empty() || self.prompt_negative.trim().is_empty() {
            return fail("prompts must be non-empty".into());
        }
        self.schedule_spec().build::<f64>().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.denoiser_config().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.hfpm_config().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            kind: self.schedule,
            steps: self.timesteps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    /// Denoiser for 3-channel latents.
    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            channels: 3,
            base_channels: self.base_channels,
            levels: self.denoiser_levels,
            attention_window: self.attention_window,
        }
    }

    pub fn hfpm_config(&self) -> HfpmConfig {
        HfpmConfig {
            channels: 3,
            features: self.hfpm_features,
            attention_window: self.attention_window,
        }
    }

    pub fn stages(&self) -> GuidanceStages {
        GuidanceStages(if self.use_vlg { self.guidance_stages } else { 0 })
    }

    /// Image sides must be multiples of this for the latent to fit the denoiser.
    pub fn size_divisor(&self) -> usize {
        1 << (self.levels + self.denoiser_levels)
    }

    /// Every key, in a fixed order, so that equal configs serialize identically.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let b = |v: bool| if v { "true" } else { "false" };
        let gammas: Vec<String> = self.content_weights.iter().map(|g| g.to_string()).collect();
        let rows: Vec<(&str, String)> = vec![
            ("levels", self.levels.to_string()),
            ("guidance_stages", self.guidance_stages.to_string()),
            ("timesteps", self.timesteps.to_string()),
            ("schedule", self.schedule.to_string()),
            ("beta_start", self.beta_start.to_string()),
            ("beta_end", self.beta_end.to_string()),
            ("sampling_steps", self.sampling_steps.to_string()),
            ("sampling_mode", self.sampling_mode.to_string()),
            ("prediction", self.prediction.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("iterations", self.iterations.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("seed", self.seed.to_string()),
            ("amplitude_weight", self.amplitude_weight.to_string()),
            ("phase_weight", self.phase_weight.to_string()),
            ("phase_distance", phase_distance_name(self.phase_distance).into()),
            ("content_weights", gammas.join(",")),
            ("use_vlg", b(self.use_vlg).into()),
            ("use_hfpm", b(self.use_hfpm).into()),
            ("use_content", b(self.use_content).into()),
            ("hfpm_version", self.hfpm_version.to_string()),
            ("similarity_mode", self.similarity_mode.to_string()),
            ("prompt_positive", self.prompt_positive.clone()),
            ("prompt_negative", self.prompt_negative.clone()),
            ("flip", b(self.flip).into()),
            ("base_channels", self.base_channels.to_string()),
            ("denoiser_levels", self.denoiser_levels.to_string()),
            ("attention_window", self.attention_window.to_string()),
            ("hfpm_features", self.hfpm_features.to_string()),
        ];
        for (k, v) in rows {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        let lines: Vec<(usize, &str, &str)> = text
            .lines()
            .enumerate()
            .filter_map(|(i, raw)| {
                let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
                if line.is_empty() {
                    return None;
                }
                Some(match line.split_once('=') {
                    Some((k, v)) => (i + 1, k.trim(), v.trim()),
                    None => (i + 1, line, "\u{0}"),
                })
            })
            .collect();
        // A preset, if given, replaces the defaults before other keys apply.
        if let Some(&(_, _, v)) = lines.iter().find(|(_, k, _)| *k == "preset") {
            cfg = match v {
                "default" => Self::default(),
                "smoke" => Self::smoke(),
                other => return Err(PipelineError::Config(format!("preset: unknown preset {other:?}"))),
            };
        }
        for (line_no, key, value) in lines {
            if value == "\u{0}" {
                return Err(PipelineError::Config(format!("line {line_no}: expected `key = value`")));
            }
            if !KEYS.contains(&key) {
                return Err(PipelineError::Config(format!("line {line_no}: unknown key {key:?}")));
            }
            if !seen.insert(key.to_string()) {
                return Err(PipelineError::Config(format!("line {line_no}: duplicate key {key:?}")));
            }
            let bool_of = |v: &str| match v {
                "true" => Ok(true),
                "false" => Ok(false),
                other => Err(format!("expected true or false, got {other:?}")),
            };
            match key {
                "preset" => {}
                "levels" => cfg.levels = parse(key, value)?,
                "guidance_stages" => cfg.guidance_stages = parse(key, value)?,
                "timesteps" => cfg.timesteps = parse(key, value)?,
                "schedule" => cfg.schedule = parse_with(key, value, ScheduleKind::from_str)?,
                "beta_start" => cfg.beta_start = parse(key, value)?,
                "beta_end" => cfg.beta_end = parse(key, value)?,
                "sampling_steps" => cfg.sampling_steps = parse(key, value)?,
                "sampling_mode" => cfg.sampling_mode = parse_with(key, value, SamplingMode::from_str)?,
                "prediction" => cfg.prediction = parse_with(key, value, Prediction::from_str)?,
                "learning_rate" => cfg.learning_rate = parse(key, value)?,
                "batch_size" => cfg.batch_size = parse(key, value)?,
                "patch_size" => cfg.patch_size = parse(key, value)?,
                "iterations" => cfg.iterations = parse(key, value)?,
                "checkpoint_every" => cfg.checkpoint_every = parse(key, value)?,
                "seed" => cfg.seed = parse(key, value)?,
                "amplitude_weight" => cfg.amplitude_weight = parse(key, value)?,
                "phase_weight" => cfg.phase_weight = parse(key, value)?,
                "phase_distance" => {
                    cfg.phase_distance = parse_with(key, value, |v| match v {
                        "raw" => Ok(PhaseDistance::Raw),
                        "wrapped" => Ok(PhaseDistance::Wrapped),
                        other => Err(format!("unknown phase distance {other:?}")),
                    })?
                }
                "content_weights" => {
                    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                    if parts.len() != 5 {
                        return Err(PipelineError::Config(format!(
                            "content_weights: expected 5 comma-separated values, got {}",
                            parts.len()
                        )));
                    }
                    for (slot, p) in cfg.content_weights.iter_mut().zip(parts) {
                        *slot = parse(key, p)?;
                    }
                }
                "use_vlg" => cfg.use_vlg = parse_with(key, value, bool_of)?,
                "use_hfpm" => cfg.use_hfpm = parse_with(key, value, bool_of)?,
                "use_content" => cfg.use_content = parse_with(key, value, bool_of)?,
                "hfpm_version" => cfg.hfpm_version = parse_with(key, value, HfpmVersion::from_str)?,
                "similarity_mode" => cfg.similarity_mode = parse_with(key, value, SimilarityMode::from_str)?,
                "prompt_positive" => cfg.prompt_positive = value.to_string(),
                "prompt_negative" => cfg.prompt_negative = value.to_string(),
                "flip" => cfg.flip = parse_with(key, value, bool_of)?,
                "base_channels" => cfg.base_channels = parse(key, value)?,
                "denoiser_levels" => cfg.denoiser_levels = parse(key, value)?,
                "attention_window" => cfg.attention_window = parse(key, value)?,
                "hfpm_features" => cfg.hfpm_features = parse(key, value)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}
