use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numkernel::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads the four MNIST IDX files (plain or gzip) from `dir`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_split(dir, "train", Split::Train)?;
    let test = load_split(dir, "t10k", Split::Test)?;
    Ok((train, test))
}

fn load_split(dir: &Path, prefix: &str, split: Split) -> Result<Dataset> {
    let images = parse_idx_images(&read_maybe_gz(&locate(dir, &format!("{prefix}-images-idx3-ubyte"))?)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(&locate(dir, &format!("{prefix}-labels-idx1-ubyte"))?)?)?;
    let n = images.shape()[0];
    if labels.len() != n {
        return Err(Error::Dataset(format!(
            "{prefix}: {n} images but {} labels",
            labels.len()
        )));
    }
    let tag = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let ids = (0..n).map(|i| format!("{tag}/{i:05}")).collect();
    Dataset::new(
        images,
        labels,
        (0..10).map(|d| d.to_string()).collect(),
        split,
        ids,
    )
}

fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    let candidates = [
        dir.join(stem),
        dir.join(format!("{stem}.gz")),
        dir.join(stem.replacen("-idx", ".idx", 1)),
    ];
    candidates
        .iter()
        .find(|p| p.is_file())
        .cloned()
        .ok_or_else(|| Error::Dataset(format!("{stem} not found in {}", dir.display())))
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Dataset("IDX header truncated".into()))
}

/// IDX3 image file to `[N,1,rows,cols]`, pixels scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Dataset(format!(
            "IDX image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() < need {
        return Err(Error::Dataset(format!(
            "IDX image file truncated: {} of {need} pixel bytes",
            body.len()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let data = body[..need].iter().map(|&b| f32::from(b) / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Dataset(format!(
            "IDX label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Dataset(format!(
            "IDX label file truncated: {} of {n} labels",
            body.len()
        )));
    }
    Ok(body[..n].iter().map(|&b| usize::from(b)).collect())
}
