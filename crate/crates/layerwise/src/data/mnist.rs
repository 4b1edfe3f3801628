//! MNIST IDX loader. Big-endian headers; magic 2051 for image files and
//! 2049 for label files.

use std::io::Read;
use std::path::Path;

use ndarray::Array4;

use crate::data::{channel_stats, normalize_in_place, LabeledDataset, Split};
use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

/// Load the four standard IDX files from `dir`:
/// `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
/// `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`.
pub fn load_mnist(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let train_images = read_images(&dir.join("train-images-idx3-ubyte"))?;
    let train_labels = read_labels(&dir.join("train-labels-idx1-ubyte"))?;
    let test_images = read_images(&dir.join("t10k-images-idx3-ubyte"))?;
    let test_labels = read_labels(&dir.join("t10k-labels-idx1-ubyte"))?;

    let train = assemble(train_images, train_labels, Split::Train, None)?;
    let test = assemble(test_images, test_labels, Split::Test, Some(train.norm.clone()))?;
    Ok((train, test))
}

fn assemble(
    images: (Vec<u8>, usize, usize, usize),
    labels: Vec<u8>,
    split: Split,
    norm: Option<crate::data::ChannelStats>,
) -> Result<LabeledDataset> {
    let (raw, n, rows, cols) = images;
    if labels.len() != n {
        return Err(Error::Data(format!(
            "image/label count mismatch: {n} images vs {} labels",
            labels.len()
        )));
    }
    let mut tensor = Array4::<f32>::zeros((n, 1, rows, cols));
    {
        let out = tensor.as_slice_mut().unwrap();
        for (o, &b) in out.iter_mut().zip(raw.iter()) {
            *o = b as f32 / 255.0;
        }
    }
    let labels: Vec<usize> = labels
        .iter()
        .map(|&b| {
            let l = b as usize;
            if l > 9 {
                Err(Error::Data(format!("label {l} out of range 0..=9")))
            } else {
                Ok(l)
            }
        })
        .collect::<Result<_>>()?;
    let stats = norm.unwrap_or_else(|| channel_stats(&tensor));
    normalize_in_place(&mut tensor, &stats);
    Ok(LabeledDataset {
        images: tensor,
        labels,
        split,
        classes: 10,
        norm: stats,
    })
}

fn read_u32_be(file: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    file.read_exact(&mut buf)
        .map_err(|e| Error::Data(format!("{}: truncated {what}: {e}", path.display())))?;
    Ok(u32::from_be_bytes(buf))
}

fn read_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let magic = read_u32_be(&mut file, path, "magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Data(format!(
            "{}: unexpected magic {magic} (want {IMAGE_MAGIC})",
            path.display()
        )));
    }
    let n = read_u32_be(&mut file, path, "count")? as usize;
    let rows = read_u32_be(&mut file, path, "rows")? as usize;
    let cols = read_u32_be(&mut file, path, "cols")? as usize;
    let mut raw = vec![0u8; n * rows * cols];
    file.read_exact(&mut raw)
        .map_err(|e| Error::Data(format!("{}: truncated pixel data: {e}", path.display())))?;
    Ok((raw, n, rows, cols))
}

fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let magic = read_u32_be(&mut file, path, "magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Data(format!(
            "{}: unexpected magic {magic} (want {LABEL_MAGIC})",
            path.display()
        )));
    }
    let n = read_u32_be(&mut file, path, "count")? as usize;
    let mut raw = vec![0u8; n];
    file.read_exact(&mut raw)
        .map_err(|e| Error::Data(format!("{}: truncated label data: {e}", path.display())))?;
    Ok(raw)
}
