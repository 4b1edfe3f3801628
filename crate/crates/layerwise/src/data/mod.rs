//! Dataset ingestion and augmentation.

mod augment;
mod cifar;
mod mnist;
pub mod synth;

pub use augment::augment_batch;
pub use cifar::load_cifar10;
pub use mnist::load_mnist;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

/// Per-channel normalization constants, computed on the training split and
/// recorded so evaluation is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Normalized images plus class labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    /// `(n, channels, h, w)`, already per-channel normalized.
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
    pub split: Split,
    pub classes: usize,
    pub norm: ChannelStats,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n` samples (deterministic desk-scale subset).
    pub fn subset(&self, n: usize) -> LabeledDataset {
        let n = n.min(self.len());
        LabeledDataset {
            images: self
                .images
                .slice(ndarray::s![..n, .., .., ..])
                .to_owned(),
            labels: self.labels[..n].to_vec(),
            split: self.split,
            classes: self.classes,
            norm: self.norm.clone(),
        }
    }
}

/// Compute per-channel mean/std over a raw (unnormalized) image tensor.
pub(crate) fn channel_stats(images: &Array4<f32>) -> ChannelStats {
    let (n, c, h, w) = images.dim();
    let count = (n * h * w) as f64;
    let mut mean = vec![0.0f32; c];
    let mut std = vec![0.0f32; c];
    for ch in 0..c {
        let lane = images.index_axis(ndarray::Axis(1), ch);
        let m: f64 = lane.iter().map(|&v| v as f64).sum::<f64>() / count;
        let var: f64 = lane
            .iter()
            .map(|&v| {
                let d = v as f64 - m;
                d * d
            })
            .sum::<f64>()
            / count;
        mean[ch] = m as f32;
        std[ch] = (var.sqrt().max(1e-8)) as f32;
    }
    ChannelStats { mean, std }
}

pub(crate) fn normalize_in_place(images: &mut Array4<f32>, stats: &ChannelStats) {
    let c = images.dim().1;
    assert_eq!(stats.mean.len(), c);
    for ch in 0..c {
        let (m, s) = (stats.mean[ch], stats.std[ch]);
        let inv = 1.0 / s;
        images
            .index_axis_mut(ndarray::Axis(1), ch)
            .mapv_inplace(|v| (v - m) * inv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_zeroes_channel_means() {
        let images = Array4::from_shape_fn((10, 2, 4, 4), |(n, c, h, w)| {
            (n + c * 3 + h + w) as f32 * 0.1 + c as f32
        });
        let stats = channel_stats(&images);
        let mut norm = images.clone();
        normalize_in_place(&mut norm, &stats);
        let after = channel_stats(&norm);
        for c in 0..2 {
            assert!(after.mean[c].abs() < 1e-5);
            assert!((after.std[c] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn subset_takes_a_prefix() {
        let images = Array4::from_shape_fn((5, 1, 2, 2), |(n, ..)| n as f32);
        let ds = LabeledDataset {
            images,
            labels: vec![0, 1, 2, 3, 4],
            split: Split::Train,
            classes: 5,
            norm: ChannelStats {
                mean: vec![0.0],
                std: vec![1.0],
            },
        };
        let sub = ds.subset(3);
        assert_eq!(sub.len(), 3);
        assert_eq!(sub.labels, vec![0, 1, 2]);
        assert_eq!(sub.images[[2, 0, 0, 0]], 2.0);
    }
}
