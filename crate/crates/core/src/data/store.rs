//! On-disk dataset layout: `images/<id>.ppm`, `masks/<id>.pgm` and a
//! manifest listing one id per line.

use std::path::Path;

use super::{pnm, Sample};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "ids.txt";

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(root: &Path, samples: &[(String, Sample)]) -> Result<()> {
    create_dir(&root.join("images"))?;
    create_dir(&root.join("masks"))?;
    let mut manifest = String::new();
    for (id, s) in samples {
        pnm::write_image(&root.join("images").join(format!("{id}.ppm")), &s.image)?;
        pnm::write_mask(&root.join("masks").join(format!("{id}.pgm")), &s.mask)?;
        manifest.push_str(id);
        manifest.push('\n');
    }
    let path = root.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Loads the samples listed in the manifest, in manifest order.
pub fn load_dataset(root: &Path) -> Result<Vec<(String, Sample)>> {
    let path = root.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for id in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let image = pnm::read_image(&root.join("images").join(format!("{id}.ppm")))?;
        let mask = pnm::read_mask(&root.join("masks").join(format!("{id}.pgm")))?;
        out.push((id.to_string(), Sample::new(image, mask)?));
    }
    if out.is_empty() {
        return Err(Error::usage(format!("dataset manifest {} lists no ids", path.display())));
    }
    Ok(out)
}

/// Sorted stems of the files in `dir` with extension `ext`.
pub fn list_ids(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}
