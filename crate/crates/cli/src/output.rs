use std::path::{Path, PathBuf};

use crate::failure::{CliResult, Failure};

/// The files one command writes into an output directory.
///
/// Existing outputs are refused up front unless `force` is set, so a
/// command either runs on a clean target or overwrites deliberately.
pub struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    pub fn prepare(dir: &Path, names: &[&str], force: bool) -> CliResult<Self> {
        if !force {
            let existing: Vec<String> = names
                .iter()
                .map(|n| dir.join(n))
                .filter(|p| p.exists())
                .map(|p| p.display().to_string())
                .collect();
            if !existing.is_empty() {
                return Err(Failure::config(
                    "outputs already exist; pass --force to overwrite",
                    existing,
                ));
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.written.push(path.clone());
        Ok(path)
    }

    /// Records a file produced by other code.
    pub fn record(&mut self, path: PathBuf) {
        self.written.push(path);
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}
