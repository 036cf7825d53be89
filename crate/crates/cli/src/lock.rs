use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use vigru::{Error, Result};

pub const LOCK_NAME: &str = ".vigru.lock";

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_NAME);
        let mut file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            let e = if e.kind() == ErrorKind::AlreadyExists {
                std::io::Error::new(
                    e.kind(),
                    "another run holds this output directory; remove the lock file if that run is gone",
                )
            } else {
                e
            };
            Error::io(&path, e)
        })?;
        writeln!(file, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
