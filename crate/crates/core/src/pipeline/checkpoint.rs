//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! 8 bytes   magic "CFWDCKPT"
//! u32       format version (1)
//! u8        scalar width in bytes (4 = f32, 8 = f64)
//! u32 + n   training config, UTF-8 `key = value` text
//! u64       iteration counter
//! u8        schedule kind (0 = linear, 1 = cosine)
//! u32       schedule length T
//! f64, f64  β_start, β_end
//! section   denoiser parameters
//! section   HFPM parameters
//! ```
//!
//! A parameter section is a fingerprint string, a u32 record count and per
//! record a name, a u32 rank (4), the u32 dims and the scalars in row-major
//! order. Strings are a u32 byte length followed by UTF-8.

use std::path::Path;

use super::{PipelineError, TrainConfig};
use crate::denoiser::{init_params, DenoiserParams};
use crate::diffusion::{ScheduleKind, ScheduleSpec};
use crate::hfpm::{init_hfpm, HfpmParams};
use crate::nn::ParamStore;
use crate::records::{put_f64, put_store, put_str, put_u32, put_u64, Reader};
use crate::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CFWDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub iteration: u64,
    pub schedule: ScheduleSpec,
    pub denoiser: DenoiserParams<T>,
    pub hfpm: HfpmParams<T>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Freshly initialized networks for `config`, seeded from `config.seed`.
    pub fn initial(config: &TrainConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            iteration: 0,
            schedule: config.schedule_spec(),
            denoiser: init_params(config.seed, &config.denoiser_config())?,
            hfpm: init_hfpm(config.seed ^ 0x9e37_79b9_7f4a_7c15, &config.hfpm_config())?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        put_u32(&mut out, CHECKPOINT_VERSION);
        out.push(T::TAG);
        put_str(&mut out, &self.config.to_text());
        put_u64(&mut out, self.iteration);
        out.push(match self.schedule.kind {
            ScheduleKind::Linear => 0,
            ScheduleKind::Cosine => 1,
        });
        put_u32(&mut out, self.schedule.steps as u32);
        put_f64(&mut out, self.schedule.beta_start);
        put_f64(&mut out, self.schedule.beta_end);
        put_store(&mut out, &self.denoiser.store);
        put_store(&mut out, &self.hfpm.store);
        out
    }

    /// Parses and validates a checkpoint. Files written at the other scalar
    /// width are converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PipelineError> {
        let corrupt = PipelineError::CorruptCheckpoint;
        let mut r = Reader::new(bytes);
        if r.bytes(8).map_err(corrupt)? != CHECKPOINT_MAGIC {
            return Err(PipelineError::CorruptCheckpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32().map_err(corrupt)?;
        if version != CHECKPOINT_VERSION {
            return Err(PipelineError::CheckpointMismatch(format!(
                "format version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let tag = r.u8().map_err(corrupt)?;
        let text = r.string().map_err(corrupt)?;
        let config = TrainConfig::parse(&text)?;
        let iteration = r.u64().map_err(corrupt)?;
        let kind = match r.u8().map_err(corrupt)? {
            0 => ScheduleKind::Linear,
            1 => ScheduleKind::Cosine,
            other => return Err(PipelineError::CorruptCheckpoint(format!("schedule kind {other}"))),
        };
        let schedule = ScheduleSpec {
            kind,
            steps: r.u32().map_err(corrupt)? as usize,
            beta_start: r.f64().map_err(corrupt)?,
            beta_end: r.f64().map_err(corrupt)?,
        };
        let (den, hf): (ParamStore<T>, ParamStore<T>) = match tag {
            4 => (r.store::<f32>().map_err(corrupt)?.cast(), r.store::<f32>().map_err(corrupt)?.cast()),
            8 => (r.store::<f64>().map_err(corrupt)?.cast(), r.store::<f64>().map_err(corrupt)?.cast()),
            other => return Err(PipelineError::CorruptCheckpoint(format!("scalar width {other}"))),
        };
        if r.remaining() != 0 {
            return Err(PipelineError::CorruptCheckpoint(format!("{} trailing bytes", r.remaining())));
        }
        if schedule != config.schedule_spec() {
            return Err(PipelineError::CheckpointMismatch(format!(
                "schedule {schedule:?} disagrees with the stored config"
            )));
        }
        for (found, expected) in [
            (den.fingerprint(), config.denoiser_config().fingerprint()),
            (hf.fingerprint(), config.hfpm_config().fingerprint()),
        ] {
            if found != expected {
                return Err(PipelineError::CheckpointMismatch(format!(
                    "parameters {found:?}, config expects {expected:?}"
                )));
            }
        }
        let denoiser =
            DenoiserParams::from_store(den).map_err(|e| PipelineError::CheckpointMismatch(e.to_string()))?;
        let hfpm = HfpmParams::from_store(hf).map_err(|e| PipelineError::CheckpointMismatch(e.to_string()))?;
        Ok(Self {
            config,
            iteration,
            schedule,
            denoiser,
            hfpm,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Identifies the model for reports: architecture, levels and schedule.
    pub fn fingerprint(&self) -> String {
        format!(
            "{}; {}; K={}; schedule={} T={} beta={}..{}",
            self.denoiser.fingerprint(),
            self.hfpm.fingerprint(),
            self.config.levels,
            self.schedule.kind,
            self.schedule.steps,
            self.schedule.beta_start,
            self.schedule.beta_end
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            patch_size: 16,
            base_channels: 4,
            denoiser_levels: 1,
            hfpm_features: 4,
            attention_window: 8,
            ..TrainConfig::smoke()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let mut ck = Checkpoint::<f32>::initial(&tiny()).unwrap();
        ck.iteration = 42;
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let widened = Checkpoint::<f64>::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(widened.denoiser.store, ck.denoiser.store.cast::<f64>());
    }

    #[test]
    fn rejects_corruption_and_mismatch() {
        let ck = Checkpoint::<f32>::initial(&tiny()).unwrap();
        let bytes = ck.to_bytes();
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3]),
            Err(PipelineError::CorruptCheckpoint(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad), Err(PipelineError::CorruptCheckpoint(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad), Err(PipelineError::CheckpointMismatch(_))));

        // Parameters from a different architecture under an unchanged config.
        let mut other = ck.clone();
        let wide = TrainConfig {
            base_channels: 8,
            ..tiny()
        };
        other.denoiser = init_params(0, &wide.denoiser_config()).unwrap();
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&other.to_bytes()),
            Err(PipelineError::CheckpointMismatch(_))
        ));
        let mut bytes = ck.to_bytes();
        bytes.push(0);
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(PipelineError::CorruptCheckpoint(_))));
    }
}
