//! Exclusive-run lock on an output directory.
//!
//! Two commands writing telemetry, checkpoints, and grids into the same
//! directory would interleave garbage, so each takes a lock file first.
//! Creation with `create_new` is atomic; the file holds the owning pid so
//! a human can tell a live collision from a stale leftover after a crash.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::CliError;

pub const LOCK_FILE: &str = "duogan.lock";

#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    /// Claims `dir` for this process. Fails if another invocation already
    /// holds it (or died without cleaning up; the message says which file
    /// to remove in that case).
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(LOCK_FILE);
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let owner = std::fs::read_to_string(&path).unwrap_or_default();
                let owner = owner.trim();
                Err(CliError::Config(format!(
                    "output directory {} is locked by another invocation (pid {}); \
                     if that process is gone, remove {}",
                    dir.display(),
                    if owner.is_empty() { "unknown" } else { owner },
                    path.display(),
                )))
            }
            Err(e) => Err(CliError::Runtime(format!(
                "cannot create lock {}: {e}",
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
