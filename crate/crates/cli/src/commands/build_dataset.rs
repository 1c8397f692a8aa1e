//! `build-dataset`: materializes the procedural dataset into `dataset_dir`.
//!
//! Rebuilding is idempotent: if a dataset with the same seed and size is
//! already present and its content hash still matches, the command succeeds
//! without touching it. A directory holding a *different* dataset is refused
//! rather than overwritten.

use super::{sha256_file, CResult, CliError};
use crate::config::RunConfig;
use crate::lockfile::DirLock;
use plume_core::dataset::{
    build_dataset, load_manifest, DatasetBuildConfig, MANIFEST_FILE, RECORDS_FILE,
};

pub fn run(cfg: &RunConfig) -> CResult<()> {
    let dir = &cfg.dataset_dir;
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let existing = load_manifest(dir).map_err(|e| {
            CliError::Config(format!(
                "{} holds an unreadable dataset manifest ({e}); remove the directory to rebuild",
                dir.display()
            ))
        })?;
        if existing.seed != cfg.seed || existing.per_class_count != cfg.dataset.per_class_count {
            return Err(CliError::Config(format!(
                "{} already holds a dataset built with seed {} and {} records per class, \
                 but this run asks for seed {} and {} per class; point dataset_dir elsewhere \
                 or remove the directory",
                dir.display(),
                existing.seed,
                existing.per_class_count,
                cfg.seed,
                cfg.dataset.per_class_count
            )));
        }
        let actual = sha256_file(&dir.join(RECORDS_FILE))?;
        if actual != existing.content_sha256 {
            return Err(CliError::Config(format!(
                "{} does not match its manifest (content hash {} vs recorded {}); \
                 remove the directory to rebuild",
                dir.join(RECORDS_FILE).display(),
                actual,
                existing.content_sha256
            )));
        }
        println!(
            "dataset already present at {} ({} records, content {})",
            dir.display(),
            existing.record_count,
            &existing.content_sha256[..12]
        );
        return Ok(());
    }

    let _lock = DirLock::acquire(dir)?;
    let build = DatasetBuildConfig {
        per_class_count: cfg.dataset.per_class_count,
        seed: cfg.seed,
    };
    let manifest = build_dataset(&build, dir)?;
    println!(
        "built dataset at {}: {} records ({} rejected), content {}",
        dir.display(),
        manifest.record_count,
        manifest.rejected_count,
        &manifest.content_sha256[..12]
    );
    for (name, count) in &manifest.class_counts {
        println!("  {name}: {count}");
    }
    Ok(())
}
