//! Subcommand implementations plus the error type and small shared helpers.

pub mod build_dataset;
pub mod eval;
pub mod export;
pub mod mesh;
pub mod sample;
pub mod sampling;
pub mod stats;
pub mod train;

use ndarray::Array2;
use plume_core::checkpoint::Checkpoint;
use plume_core::denoiser::PointDenoiser;
use plume_core::diffusion::NoiseSchedule;
use sha2::{Digest, Sha256};
use std::io::Read;
use std::path::Path;

/// Command failure, split by exit code: configuration problems (bad values,
/// missing inputs, mismatched artifacts) exit 2, everything that goes wrong
/// during execution exits 3.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<plume_core::error::Error> for CliError {
    fn from(e: plume_core::error::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CResult<T> = std::result::Result<T, CliError>;

/// Maps a core-library error into a config error; for use during the
/// validation phase where failures mean the run was set up wrong.
pub fn as_config<T>(r: plume_core::error::Result<T>) -> CResult<T> {
    r.map_err(|e| CliError::Config(e.to_string()))
}

// Conventional artifact names inside `run_dir`.
pub const CKPT_BASE: &str = "base.ckpt";
pub const CKPT_UPSAMPLER: &str = "upsampler.ckpt";
pub const CKPT_SDF: &str = "sdf.ckpt";
pub const CKPT_CLASSIFIER: &str = "classifier.ckpt";
pub const STATS_HI: &str = "stats_hi.ckpt";
pub const STATS_LO: &str = "stats_lo.ckpt";
pub const SAMPLE_SIDECAR: &str = "run.json";
pub const TIMING_FILE: &str = "timing.json";

/// Streaming SHA-256 of a file, as lowercase hex.
pub fn sha256_file(path: &Path) -> CResult<String> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = std::io::BufReader::new(file);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = reader
            .read(&mut buf)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(crate::config::hex(&hasher.finalize()))
}

pub fn to_f32(a: &Array2<f64>) -> Array2<f32> {
    a.mapv(|v| v as f32)
}

pub fn to_f64(a: &Array2<f32>) -> Array2<f64> {
    a.mapv(f64::from)
}

/// Writes pretty JSON with a trailing newline via a temp file and rename, so
/// readers never observe partial content.
pub fn write_json(path: &Path, value: &serde_json::Value) -> CResult<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("not serializable: {e}")))?;
    text.push('\n');
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| CliError::Runtime(format!("cannot move {} into place: {e}", path.display())))
}

/// Writes a checkpoint through a temp file and rename.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> CResult<()> {
    let tmp = path.with_extension("ckpt.tmp");
    ckpt.write(&tmp)?;
    std::fs::rename(&tmp, path)
        .map_err(|e| CliError::Runtime(format!("cannot move {} into place: {e}", path.display())))
}

/// Warns once when a datacenter-scale reference preset is about to run.
pub fn warn_reference_preset(cfg: &crate::config::RunConfig) {
    if cfg.preset.is_reference_scale() {
        eprintln!(
            "[plume] warning: preset {:?} records the large-scale reference configuration; \
             it is not sized for desktop hardware and this run may take an impractical time",
            cfg.preset.name()
        );
    }
}

/// Requires that a path exists, as a config error naming it.
pub fn require_exists(path: &Path, what: &str) -> CResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "missing {what}: {}",
            path.display()
        )))
    }
}

/// Loads a denoiser checkpoint and enforces the base/upsampler role. A
/// mismatch is refused with both configurations printed.
pub fn load_denoiser_checked(
    path: &Path,
    expect_upsampler: bool,
) -> CResult<(PointDenoiser<f32>, serde_json::Value)> {
    let (model, extra) = plume_core::checkpoint::load_model::<f32>(path)?;
    if model.config.is_upsampler != expect_upsampler {
        let role = |up: bool| if up { "an upsampler" } else { "a base model" };
        let cfg_json = serde_json::to_string(&model.config).unwrap_or_default();
        return Err(CliError::Config(format!(
            "{} holds {} but {} was requested;\n  checkpoint config: {}\n  expected: \"is_upsampler\": {}",
            path.display(),
            role(model.config.is_upsampler),
            role(expect_upsampler),
            cfg_json,
            expect_upsampler
        )));
    }
    Ok((model, extra))
}

/// Rebuilds the noise schedule a diffusion checkpoint was trained with, from
/// its stored metadata.
pub fn schedule_from_extra(path: &Path, extra: &serde_json::Value) -> CResult<NoiseSchedule> {
    let kind = extra
        .get("schedule")
        .and_then(|v| v.as_str())
        .ok_or_else(|| {
            CliError::Config(format!(
                "{}: checkpoint metadata lacks the noise-schedule name",
                path.display()
            ))
        })?;
    let timesteps = extra
        .get("timesteps")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| {
            CliError::Config(format!(
                "{}: checkpoint metadata lacks the timestep count",
                path.display()
            ))
        })? as usize;
    let choice = crate::config::ScheduleChoice::from_name(kind)?;
    Ok(plume_core::diffusion::make_schedule(
        choice.to_kind(),
        timesteps,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_hash_matches_a_known_vector() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"abc").unwrap();
        assert_eq!(
            sha256_file(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn json_writes_are_atomic_and_newline_terminated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        write_json(&path, &serde_json::json!({"a": 1})).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.ends_with('\n'));
        assert!(!path.with_extension("tmp").exists());
    }
}
