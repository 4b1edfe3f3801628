//! CIFAR-10 binary-format loader.
//!
//! Each of `data_batch_{1..5}.bin` and `test_batch.bin` holds 10,000 records
//! of 3073 bytes: one label byte followed by 3x1024 pixel bytes (R, G, B
//! planes, 32x32 row-major).

use std::io::Read;
use std::path::Path;

use ndarray::Array4;

use crate::data::{channel_stats, normalize_in_place, LabeledDataset, Split};
use crate::error::{Error, Result};

pub const RECORD_BYTES: usize = 3073;
pub const RECORDS_PER_FILE: usize = 10_000;
const PLANE: usize = 1024;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Load the six binary batch files from `dir`. Returns exactly 50,000
/// training and 10,000 test samples, per-channel normalized with constants
/// computed on the training split.
pub fn load_cifar10(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut train_images = Array4::<f32>::zeros((RECORDS_PER_FILE * 5, 3, 32, 32));
    let mut train_labels = Vec::with_capacity(RECORDS_PER_FILE * 5);
    for (i, name) in TRAIN_FILES.iter().enumerate() {
        read_batch_file(
            &dir.join(name),
            &mut train_images,
            i * RECORDS_PER_FILE,
            &mut train_labels,
        )?;
    }
    let mut test_images = Array4::<f32>::zeros((RECORDS_PER_FILE, 3, 32, 32));
    let mut test_labels = Vec::with_capacity(RECORDS_PER_FILE);
    read_batch_file(&dir.join(TEST_FILE), &mut test_images, 0, &mut test_labels)?;

    let stats = channel_stats(&train_images);
    normalize_in_place(&mut train_images, &stats);
    normalize_in_place(&mut test_images, &stats);

    Ok((
        LabeledDataset {
            images: train_images,
            labels: train_labels,
            split: Split::Train,
            classes: 10,
            norm: stats.clone(),
        },
        LabeledDataset {
            images: test_images,
            labels: test_labels,
            split: Split::Test,
            classes: 10,
            norm: stats,
        },
    ))
}

fn read_batch_file(
    path: &Path,
    images: &mut Array4<f32>,
    offset: usize,
    labels: &mut Vec<usize>,
) -> Result<()> {
    let mut file =
        std::fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut raw = Vec::with_capacity(RECORD_BYTES * RECORDS_PER_FILE);
    file.read_to_end(&mut raw)?;
    if raw.len() != RECORD_BYTES * RECORDS_PER_FILE {
        // identify where the record structure breaks
        let whole = raw.len() / RECORD_BYTES;
        return Err(Error::Data(format!(
            "{}: expected {} bytes ({} records of {RECORD_BYTES}), got {}; \
             record structure breaks at byte offset {}",
            path.display(),
            RECORD_BYTES * RECORDS_PER_FILE,
            RECORDS_PER_FILE,
            raw.len(),
            whole * RECORD_BYTES,
        )));
    }
    let inv = 1.0f32 / 255.0;
    for r in 0..RECORDS_PER_FILE {
        let rec = &raw[r * RECORD_BYTES..(r + 1) * RECORD_BYTES];
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Data(format!(
                "{}: record {r}: label byte {label} out of range 0..=9",
                path.display()
            )));
        }
        labels.push(label);
        let sample = images
            .index_axis_mut(ndarray::Axis(0), offset + r)
            .into_shape(3 * PLANE)
            .unwrap();
        let sample = sample.into_slice().unwrap();
        for (dst, &src) in sample.iter_mut().zip(rec[1..].iter()) {
            *dst = src as f32 * inv;
        }
    }
    Ok(())
}
