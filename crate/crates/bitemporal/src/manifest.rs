//! Line-delimited JSON dataset manifests.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use bitemporal_core::dataset::{DatasetManifest, ManifestItem, Split};
use bitemporal_core::Error;

use crate::error::{IoError, IoResult};

pub fn split_from_name(name: &str) -> Option<Split> {
    match name {
        "train" => Some(Split::Train),
        "val" => Some(Split::Val),
        "test" => Some(Split::Test),
        _ => None,
    }
}

pub fn manifest_path(dir: &Path, split: Split) -> std::path::PathBuf {
    dir.join(format!("{}.jsonl", split.name()))
}

/// One record per line with keys `pair_id`, `before`, `after`, `captions`.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> IoResult<()> {
    let file = fs::File::create(path).map_err(|e| IoError::file(path, e))?;
    let mut w = BufWriter::new(file);
    for item in &manifest.items {
        let line = serde_json::to_string(item).map_err(|e| IoError::format(path, e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| IoError::file(path, e))?;
    }
    w.flush().map_err(|e| IoError::file(path, e))
}

/// Reads a manifest whose split is named by the file stem
/// (`train.jsonl`, `val.jsonl`, `test.jsonl`).
pub fn load_manifest(path: &Path) -> IoResult<DatasetManifest> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    let split = split_from_name(stem).ok_or_else(|| {
        IoError::format(path, "manifest file name must be train, val or test with any extension")
    })?;
    load_manifest_as(path, split)
}

pub fn load_manifest_as(path: &Path, split: Split) -> IoResult<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: ManifestItem = serde_json::from_str(line).map_err(|e| IoError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        items.push(item);
    }
    let manifest = DatasetManifest { split, items };
    manifest.validate().map_err(|e| match e {
        Error::Validation(msg) => IoError::Core(Error::Validation(format!("{}: {msg}", path.display()))),
        other => IoError::Core(other),
    })?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_names() {
        for s in [Split::Train, Split::Val, Split::Test] {
            assert_eq!(split_from_name(s.name()), Some(s));
            assert!(manifest_path(Path::new("d"), s).ends_with(format!("{}.jsonl", s.name())));
        }
        assert_eq!(split_from_name("dev"), None);
    }
}
