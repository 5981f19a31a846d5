//! Directory layout `<category>/train/good/*.png`,
//! `<category>/test/<defect>/*.png` and
//! `<category>/ground_truth/<defect>/<stem>_mask.png`.

use std::path::{Path, PathBuf};

use anomaly_tensor::{ops, Tensor};

use super::config::digest_parts;
use crate::compositor::{list_pngs, resize_image};
use crate::error::{Error, IoContext, Result};
use crate::image_io;

pub const GOOD: &str = "good";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TestItem {
    pub category: String,
    pub defect: String,
    pub stem: String,
    pub image: PathBuf,
    /// `None` for defect-free images.
    pub mask: Option<PathBuf>,
}

impl TestItem {
    pub fn anomalous(&self) -> bool {
        self.defect != GOOD
    }
}

fn subdirs(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).at(dir)? {
        let p = entry.at(dir)?.path();
        if p.is_dir() {
            if let Some(name) = p.file_name().and_then(|n| n.to_str()) {
                out.push(name.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Requested categories, or every subdirectory with a `train/good` folder.
pub fn categories(root: &Path, requested: &[String]) -> Result<Vec<String>> {
    if !root.is_dir() {
        return Err(Error::MissingPath(root.to_path_buf()));
    }
    if !requested.is_empty() {
        for c in requested {
            let p = root.join(c);
            if !p.is_dir() {
                return Err(Error::MissingPath(p));
            }
        }
        return Ok(requested.to_vec());
    }
    let found: Vec<String> = subdirs(root)?
        .into_iter()
        .filter(|c| root.join(c).join("train").join(GOOD).is_dir())
        .collect();
    if found.is_empty() {
        return Err(Error::Data(format!(
            "no category with train/good under {}",
            root.display()
        )));
    }
    Ok(found)
}

pub fn train_files(root: &Path, category: &str) -> Result<Vec<PathBuf>> {
    let dir = root.join(category).join("train").join(GOOD);
    let files = list_pngs(&dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("{} has no PNG images", dir.display())));
    }
    Ok(files)
}

pub fn test_items(root: &Path, category: &str) -> Result<Vec<TestItem>> {
    let test = root.join(category).join("test");
    if !test.is_dir() {
        return Err(Error::MissingPath(test));
    }
    let mut items = Vec::new();
    for defect in subdirs(&test)? {
        for image in list_pngs(&test.join(&defect))? {
            let stem = image
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let mask = if defect == GOOD {
                None
            } else {
                let m = root
                    .join(category)
                    .join("ground_truth")
                    .join(&defect)
                    .join(format!("{stem}_mask.png"));
                if !m.is_file() {
                    return Err(Error::MissingPath(m));
                }
                Some(m)
            };
            items.push(TestItem {
                category: category.to_string(),
                defect: defect.clone(),
                stem,
                image,
                mask,
            });
        }
    }
    if items.is_empty() {
        return Err(Error::Data(format!(
            "{} holds no test images",
            test.display()
        )));
    }
    Ok(items)
}

pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    resize_image(&image_io::load_rgb(path)?, size, size)
}

/// Binary mask resized with nearest-neighbor sampling.
pub fn load_mask(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let m = image_io::load_mask(path)?;
    let (h, w) = (m.shape()[0], m.shape()[1]);
    if (h, w) == (size, size) {
        return Ok(m);
    }
    let r = ops::resize_nearest(&m.reshape(&[1, 1, h, w])?, size, size)?;
    Ok(r.reshape(&[size, size])?)
}

pub fn load_test(item: &TestItem, size: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let image = load_image(&item.image, size)?;
    let mask = match &item.mask {
        Some(p) => load_mask(p, size)?,
        None => Tensor::zeros(&[size, size]),
    };
    Ok((image, mask))
}

/// Content digest of files, keyed by their path relative to `root`.
pub fn digest_files(root: &Path, files: &[PathBuf]) -> Result<String> {
    let mut parts: Vec<Vec<u8>> = Vec::with_capacity(files.len() * 2);
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(f);
        parts.push(rel.to_string_lossy().into_owned().into_bytes());
        parts.push(std::fs::read(f).at(f)?);
    }
    let refs: Vec<&[u8]> = parts.iter().map(|p| p.as_slice()).collect();
    Ok(digest_parts(&refs))
}
