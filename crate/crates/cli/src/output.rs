//! All-or-nothing output: every file is written to a temporary file next to
//! its destination and only renamed into place once all of them succeeded.

use std::io::Write;
use std::path::{Path, PathBuf};

use tempfile::{Builder, NamedTempFile};

use crate::error::{CliError, Result};

/// A temporary file that ends up with ordinary permissions (0644 before the
/// umask) rather than the private default of temporary files.
fn staging(dir: &Path) -> std::io::Result<NamedTempFile> {
    let mut b = Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        b.permissions(std::fs::Permissions::from_mode(0o644));
    }
    b.tempfile_in(dir)
}

#[derive(Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, path: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((path.into(), bytes));
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.files.iter().map(|(p, _)| p.as_path())
    }

    pub fn commit(self) -> Result<()> {
        let mut staged = Vec::with_capacity(self.files.len());
        for (path, bytes) in &self.files {
            let dir = match path.parent() {
                Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
                _ => PathBuf::from("."),
            };
            std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
            let mut tmp = staging(&dir).map_err(|e| CliError::io(&dir, e))?;
            tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
            tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
            staged.push((tmp, path));
        }
        for (tmp, path) in staged {
            tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
        }
        Ok(())
    }
}
