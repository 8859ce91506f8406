//! On-disk dataset layout: `images/`, one manifest per split and the
//! duplicate-caption ledger.

use std::fs;
use std::path::{Path, PathBuf};

use bitemporal_core::dataset::{
    Corpus, Dataset, DatasetManifest, GeneratorConfig, ImagePair, ManifestItem, PairItem, Split,
};
use serde::{Deserialize, Serialize};

use crate::error::{IoError, IoResult};
use crate::images::{load_png, save_png};
use crate::manifest::{load_manifest_as, manifest_path, write_manifest};

pub const DUPLICATES_FILE: &str = "duplicates.json";
pub const GENERATOR_FILE: &str = "generator.json";

/// Pairs of pair ids that share a verbatim caption.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateLedger {
    pub pairs: Vec<(u64, u64)>,
}

fn create_dir(path: &Path) -> IoResult<()> {
    fs::create_dir_all(path).map_err(|e| IoError::file(path, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> IoResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| IoError::format(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| IoError::file(path, e))
}

pub fn write_corpus(corpus: &Corpus, config: &GeneratorConfig, dir: &Path) -> IoResult<()> {
    create_dir(&dir.join("images"))?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let mut items = Vec::new();
        for r in corpus.items.iter().filter(|r| r.split == split) {
            let id = r.pair.pair_id;
            let before = format!("images/{id:05}_before.png");
            let after = format!("images/{id:05}_after.png");
            save_png(&r.pair.before, &dir.join(&before))?;
            save_png(&r.pair.after, &dir.join(&after))?;
            items.push(ManifestItem {
                pair_id: id,
                before,
                after,
                captions: r.captions.clone(),
            });
        }
        write_manifest(&DatasetManifest { split, items }, &manifest_path(dir, split))?;
    }
    let ledger = DuplicateLedger {
        pairs: corpus.duplicate_ledger().into_iter().collect(),
    };
    write_json(&ledger, &dir.join(DUPLICATES_FILE))?;
    write_json(config, &dir.join(GENERATOR_FILE))
}

pub fn resolve(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}

/// Loads one split's manifest and images.
pub fn load_split(dir: &Path, split: Split) -> IoResult<Dataset> {
    let manifest = load_manifest_as(&manifest_path(dir, split), split)?;
    load_items(dir, &manifest)
}

pub fn load_items(dir: &Path, manifest: &DatasetManifest) -> IoResult<Dataset> {
    let mut items = Vec::with_capacity(manifest.items.len());
    for m in &manifest.items {
        let pair = ImagePair {
            pair_id: m.pair_id,
            before: load_png(&resolve(dir, &m.before))?,
            after: load_png(&resolve(dir, &m.after))?,
        };
        pair.validate()?;
        items.push(PairItem {
            pair_id: m.pair_id,
            pair,
            captions: m.captions.clone(),
        });
    }
    Ok(Dataset { items })
}

pub fn load_ledger(dir: &Path) -> IoResult<DuplicateLedger> {
    let path = dir.join(DUPLICATES_FILE);
    let text = fs::read_to_string(&path).map_err(|e| IoError::file(&path, e))?;
    serde_json::from_str(&text).map_err(|e| IoError::format(&path, e.to_string()))
}
