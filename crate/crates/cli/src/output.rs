//! Output files that are removed again if the command fails part-way.

use std::fs;
use std::path::{Path, PathBuf};

use sacl_core::{Error, Result};

pub struct Artifacts {
    dir: PathBuf,
    written: Vec<PathBuf>,
    created_dir: bool,
    committed: bool,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
            created_dir,
            committed: false,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.written
    }

    /// Keeps everything written so far.
    pub fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.written)
    }
}

impl Drop for Artifacts {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}
