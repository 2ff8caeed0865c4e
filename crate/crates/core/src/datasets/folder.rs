use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numkernel::Tensor;

/// Result of loading an image folder: the dataset plus files that failed to decode.
#[derive(Debug, Clone)]
pub struct FolderLoad {
    pub dataset: Dataset,
    pub skipped: Vec<PathBuf>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    v.sort();
    Ok(v)
}

/// One sub-directory per class (sorted by name gives the class index), each
/// holding PNG/JPEG files. Images are converted to RGB, bilinearly resized to
/// `target_hw` and scaled to `[0,1]`; ids are paths relative to `dir`.
pub fn load_image_folder(dir: impl AsRef<Path>, target_hw: (usize, usize), split: Split) -> Result<FolderLoad> {
    let dir = dir.as_ref();
    let (th, tw) = target_hw;
    if th == 0 || tw == 0 {
        return Err(Error::InvalidArgument("target size must be positive".into()));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!("no class directories in {}", dir.display())));
    }
    let mut class_names = Vec::new();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    let mut skipped = Vec::new();
    for (class, cdir) in class_dirs.iter().enumerate() {
        let name = cdir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let before = labels.len();
        for file in sorted_entries(cdir)?.into_iter().filter(|p| p.is_file()) {
            let img = match image::open(&file) {
                Ok(img) => img.to_rgb8(),
                Err(e) => {
                    log::warn!("skipping {}: {e}", file.display());
                    skipped.push(file);
                    continue;
                }
            };
            let img = if img.dimensions() == (tw as u32, th as u32) {
                img
            } else {
                image::imageops::resize(&img, tw as u32, th as u32, FilterType::Triangle)
            };
            for c in 0..3 {
                for y in 0..th {
                    for x in 0..tw {
                        data.push(f32::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0);
                    }
                }
            }
            labels.push(class);
            let rel = file.strip_prefix(dir).unwrap_or(&file);
            ids.push(rel.to_string_lossy().replace('\\', "/"));
        }
        if labels.len() == before {
            return Err(Error::Dataset(format!("class {name:?} has no readable images")));
        }
        class_names.push(name);
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, 3, th, tw], data)?;
    Ok(FolderLoad {
        dataset: Dataset::new(images, labels, class_names, split, ids)?,
        skipped,
    })
}
