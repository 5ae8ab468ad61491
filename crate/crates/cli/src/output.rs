//! Output directories that appear only on success.
//!
//! Artifacts are written into a hidden sibling directory and moved into
//! place by [`Staging::commit`]. On failure the staging directory is removed
//! and the destination receives a `.failed` marker holding the error.

use std::fs;
use std::path::{Path, PathBuf};

use crate::{CliError, CliResult};

pub const FAILED_MARKER: &str = ".failed";

pub struct Staging {
    dest: PathBuf,
    tmp: PathBuf,
}

impl Staging {
    pub fn new(dest: &Path) -> CliResult<Self> {
        let name = dest
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| CliError::Config(format!("invalid output path {}", dest.display())))?;
        let parent = dest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let tmp = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        Ok(Self {
            dest: dest.to_path_buf(),
            tmp,
        })
    }

    pub fn path(&self) -> &Path {
        &self.tmp
    }

    /// Moves every staged entry into the destination.
    pub fn commit(self) -> CliResult<()> {
        fs::create_dir_all(&self.dest)?;
        let _ = fs::remove_file(self.dest.join(FAILED_MARKER));
        for entry in fs::read_dir(&self.tmp)? {
            let entry = entry?;
            let target = self.dest.join(entry.file_name());
            if target.is_dir() {
                fs::remove_dir_all(&target)?;
            }
            fs::rename(entry.path(), target)?;
        }
        fs::remove_dir_all(&self.tmp)?;
        Ok(())
    }

    pub fn fail(self, err: &CliError) {
        let _ = fs::remove_dir_all(&self.tmp);
        let msg = match err {
            CliError::Config(m) | CliError::Runtime(m) => m,
        };
        if fs::create_dir_all(&self.dest).is_ok() {
            let _ = fs::write(self.dest.join(FAILED_MARKER), format!("{msg}\n"));
        }
    }
}

/// Runs `body` against a staging directory for `dest`.
pub fn staged(dest: &Path, body: impl FnOnce(&Path) -> CliResult<()>) -> CliResult<()> {
    let staging = Staging::new(dest)?;
    match body(staging.path()) {
        Ok(()) => staging.commit(),
        Err(e) => {
            staging.fail(&e);
            Err(e)
        }
    }
}
