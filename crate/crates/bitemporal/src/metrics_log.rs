//! Append-only JSON-lines metrics log, one record per epoch.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use bitemporal_core::trainer::EpochRecord;

use crate::error::{IoError, IoResult};

pub struct MetricsLog {
    path: PathBuf,
}

impl MetricsLog {
    pub fn create(path: &Path) -> IoResult<Self> {
        fs::write(path, b"").map_err(|e| IoError::file(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
        })
    }

    pub fn append(&self, record: &EpochRecord) -> IoResult<()> {
        let line = serde_json::to_string(record).map_err(|e| IoError::format(&self.path, e.to_string()))?;
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| IoError::file(&self.path, e))?;
        writeln!(f, "{line}").map_err(|e| IoError::file(&self.path, e))
    }

    pub fn read(path: &Path) -> IoResult<Vec<EpochRecord>> {
        let text = fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| IoError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: e.to_string(),
                })
            })
            .collect()
    }
}
