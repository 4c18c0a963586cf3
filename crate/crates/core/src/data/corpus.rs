use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
const MASK_EXTENSIONS: [&str; 1] = ["png"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

fn list_by_stem(dir: &Path, extensions: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !path.is_file() || !ext.is_some_and(|e| extensions.contains(&e.as_str())) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
            return Err(Error::Data(format!(
                "two files share the id {stem}: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Pair `root/images/*` with `root/masks/*` by filename stem, sorted by id.
///
/// Unmatched files are an error in `strict` mode and are skipped with a
/// warning otherwise.
pub fn load_corpus(root: &Path, strict: bool) -> Result<Vec<Sample>> {
    let image_dir = root.join("images");
    let mask_dir = root.join("masks");
    for d in [&image_dir, &mask_dir] {
        if !d.is_dir() {
            return Err(Error::Data(format!("corpus directory {} is missing", d.display())));
        }
    }
    let images = list_by_stem(&image_dir, &IMAGE_EXTENSIONS)?;
    let mut masks = list_by_stem(&mask_dir, &MASK_EXTENSIONS)?;
    let mut samples = Vec::with_capacity(images.len());
    let mut orphans = Vec::new();
    for (id, image_path) in images {
        match masks.remove(&id) {
            Some(mask_path) => samples.push(Sample {
                id,
                image_path,
                mask_path,
            }),
            None => orphans.push(format!("image {id} has no mask")),
        }
    }
    orphans.extend(masks.into_keys().map(|id| format!("mask {id} has no image")));
    orphans.sort();
    if !orphans.is_empty() {
        if strict {
            return Err(Error::Data(format!("unmatched corpus entries: {}", orphans.join("; "))));
        }
        for o in &orphans {
            log::warn!("skipping unmatched corpus entry: {o}");
        }
    }
    if samples.is_empty() {
        log::warn!("corpus at {} is empty", root.display());
    }
    Ok(samples)
}
