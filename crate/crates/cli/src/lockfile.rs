//! One writer per output directory, enforced with an exclusive lock file.

use crate::commands::{CResult, CliError};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const LOCK_FILE: &str = ".plume.lock";

/// Holds the lock for as long as the guard lives; the file is removed on
/// drop. A crash can leave a stale lock behind, in which case the error
/// message names the file to delete.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> CResult<DirLock> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Runtime(format!(
                    "another run is writing to {} (lock file {} exists); \
                     wait for it or delete the lock file if it is stale",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(CliError::Runtime(format!(
                "cannot create lock file {}: {e}",
                path.display()
            ))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
