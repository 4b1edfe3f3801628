//! Activation caching: the representation at the current depth for every
//! sample, held in memory or on disk, fingerprinted by the parameters that
//! produced it.

use std::io::{Read, Seek, SeekFrom, Write};
use std::path::PathBuf;
use std::sync::Mutex;

use ndarray::{Array4, Axis};
use sha2::{Digest, Sha256};

use crate::arch::BlockSpec;
use crate::config::CacheMode;
use crate::error::{Error, Result};
use crate::forward::block_forward_eval;
use crate::params::BlockParams;

/// Batch size used when materializing caches.
pub const CACHE_FORWARD_BATCH: usize = 256;

enum Store {
    Mem(Array4<f32>),
    Disk {
        file: Mutex<std::fs::File>,
        path: PathBuf,
        shape: (usize, usize, usize, usize),
    },
}

pub struct ActivationCache {
    store: Store,
    /// Depth of the representation: number of frozen blocks applied.
    pub depth: usize,
    /// Hash of the producing parameters (and depth); caches may only be
    /// reused by a consumer holding the same fingerprint.
    pub fingerprint: String,
}

/// Hash the frozen prefix: depth plus every parameter tensor in order.
pub fn prefix_fingerprint(blocks: &[BlockParams<f32>], depth: usize) -> String {
    let mut hasher = Sha256::new();
    hasher.update(u64::try_from(depth).unwrap().to_le_bytes());
    for b in &blocks[..depth] {
        hash_f32(&mut hasher, b.conv.kernel.iter());
        hash_f32(&mut hasher, b.conv.bias.iter());
        if let Some(bn) = &b.bn {
            hash_f32(&mut hasher, bn.scale.iter());
            hash_f32(&mut hasher, bn.shift.iter());
            hash_f32(&mut hasher, bn.running_mean.iter());
            hash_f32(&mut hasher, bn.running_var.iter());
        }
    }
    format!("{:x}", hasher.finalize())
}

fn hash_f32<'a>(hasher: &mut Sha256, values: impl Iterator<Item = &'a f32>) {
    for v in values {
        hasher.update(v.to_le_bytes());
    }
}

impl ActivationCache {
    /// Cache the raw (optionally input-downsampled) inputs: depth 0.
    pub fn from_inputs(
        images: &Array4<f32>,
        input_downsample: bool,
        mode: CacheMode,
        disk_dir: Option<&std::path::Path>,
    ) -> Result<Self> {
        let x0 = if input_downsample {
            crate::kernels::invertible_downsample(images)
        } else {
            images.clone()
        };
        Self::from_tensor(x0, 0, prefix_fingerprint(&[], 0), mode, disk_dir)
    }

    /// Advance a cache one block: apply the newly frozen block to every
    /// sample (eval mode), producing the cache for the next depth.
    pub fn advance(
        &self,
        blocks: &[BlockParams<f32>],
        specs: &[BlockSpec],
        mode: CacheMode,
        disk_dir: Option<&std::path::Path>,
    ) -> Result<Self> {
        let depth = self.depth;
        assert!(depth < blocks.len(), "cache advance past frozen depth");
        let n = self.len();
        let spec = &specs[depth];
        let (c, h, w) = (spec.out_width, spec.spatial_out.0, spec.spatial_out.1);
        let mut out = Array4::<f32>::zeros((n, c, h, w));
        let mut start = 0;
        while start < n {
            let end = (start + CACHE_FORWARD_BATCH).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let x = self.batch(&idx);
            let y = block_forward_eval(&x, &blocks[depth], spec);
            out.slice_mut(ndarray::s![start..end, .., .., ..]).assign(&y);
            start = end;
        }
        Self::from_tensor(
            out,
            depth + 1,
            prefix_fingerprint(blocks, depth + 1),
            mode,
            disk_dir,
        )
    }

    fn from_tensor(
        data: Array4<f32>,
        depth: usize,
        fingerprint: String,
        mode: CacheMode,
        disk_dir: Option<&std::path::Path>,
    ) -> Result<Self> {
        let store = match mode {
            CacheMode::Mem => Store::Mem(data),
            CacheMode::Disk => {
                let dir = disk_dir.ok_or_else(|| {
                    Error::Config("disk cache mode requires a cache directory".into())
                })?;
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("cache-depth{depth}-{}.bin", &fingerprint[..16]));
                let mut file = std::fs::File::create(&path)?;
                let slice = data.as_slice().expect("cache tensor must be contiguous");
                let bytes: Vec<u8> = slice.iter().flat_map(|v| v.to_le_bytes()).collect();
                file.write_all(&bytes)?;
                file.flush()?;
                let file = std::fs::File::open(&path)?;
                Store::Disk {
                    file: Mutex::new(file),
                    path,
                    shape: data.dim(),
                }
            }
        };
        Ok(Self {
            store,
            depth,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.shape().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        match &self.store {
            Store::Mem(a) => a.dim(),
            Store::Disk { shape, .. } => *shape,
        }
    }

    /// Gather the given sample indices into a contiguous batch.
    pub fn batch(&self, idx: &[usize]) -> Array4<f32> {
        let (_, c, h, w) = self.shape();
        match &self.store {
            Store::Mem(a) => {
                let mut out = Array4::<f32>::zeros((idx.len(), c, h, w));
                for (row, &i) in idx.iter().enumerate() {
                    out.index_axis_mut(Axis(0), row)
                        .assign(&a.index_axis(Axis(0), i));
                }
                out
            }
            Store::Disk { file, path, .. } => {
                let sample_len = c * h * w;
                let mut out = Array4::<f32>::zeros((idx.len(), c, h, w));
                let mut buf = vec![0u8; sample_len * 4];
                let mut file = file.lock().unwrap();
                for (row, &i) in idx.iter().enumerate() {
                    file.seek(SeekFrom::Start((i * sample_len * 4) as u64))
                        .unwrap_or_else(|e| panic!("cache {}: seek failed: {e}", path.display()));
                    file.read_exact(&mut buf)
                        .unwrap_or_else(|e| panic!("cache {}: read failed: {e}", path.display()));
                    let dst = out.index_axis_mut(Axis(0), row);
                    let dst = dst.into_slice().unwrap();
                    for (d, chunk) in dst.iter_mut().zip(buf.chunks_exact(4)) {
                        *d = f32::from_le_bytes(chunk.try_into().unwrap());
                    }
                }
                out
            }
        }
    }

    /// Verify a consumer's fingerprint before reuse.
    pub fn check_fingerprint(&self, expected: &str) -> Result<()> {
        if self.fingerprint != expected {
            return Err(Error::Data(format!(
                "activation cache fingerprint mismatch: cache built from {}, consumer expects {}",
                &self.fingerprint[..16.min(self.fingerprint.len())],
                &expected[..16.min(expected.len())]
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::init_block;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn spec(width_in: usize, width_out: usize, hw: usize) -> BlockSpec {
        BlockSpec {
            index: 0,
            downsample: None,
            in_width: width_in,
            conv_in: width_in,
            out_width: width_out,
            batchnorm: false,
            spatial_in: (hw, hw),
            spatial_out: (hw, hw),
        }
    }

    fn random_images(n: usize) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        Array4::from_shape_simple_fn((n, 3, 8, 8), || {
            { let v: f64 = StandardNormal.sample(&mut rng); v as f32 }
        })
    }

    #[test]
    fn depth_zero_cache_is_the_downsampled_input() {
        let images = random_images(5);
        let cache = ActivationCache::from_inputs(&images, true, CacheMode::Mem, None).unwrap();
        assert_eq!(cache.shape(), (5, 12, 4, 4));
        let back = crate::kernels::invertible_upsample(&cache.batch(&[0, 1, 2, 3, 4]));
        assert_eq!(back, images);
    }

    #[test]
    fn advance_equals_direct_recomputation() {
        let images = random_images(7);
        let s = spec(3, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let blocks = vec![init_block::<f32, _>(&mut rng, &s)];
        let cache0 = ActivationCache::from_inputs(&images, false, CacheMode::Mem, None).unwrap();
        let cache1 = cache0.advance(&blocks, std::slice::from_ref(&s), CacheMode::Mem, None).unwrap();
        let recomputed = crate::forward::forward_prefix(&images, &blocks, std::slice::from_ref(&s), false, 1);
        let idx: Vec<usize> = (0..7).collect();
        assert_eq!(cache1.batch(&idx), recomputed);
        assert_eq!(cache1.depth, 1);
    }

    #[test]
    fn disk_and_mem_stores_agree() {
        let dir = tempfile::tempdir().unwrap();
        let images = random_images(6);
        let mem = ActivationCache::from_inputs(&images, false, CacheMode::Mem, None).unwrap();
        let disk =
            ActivationCache::from_inputs(&images, false, CacheMode::Disk, Some(dir.path()))
                .unwrap();
        let idx = [3usize, 0, 5];
        assert_eq!(mem.batch(&idx), disk.batch(&idx));
        assert_eq!(mem.fingerprint, disk.fingerprint);
    }

    #[test]
    fn fingerprint_mismatch_is_detected() {
        let images = random_images(3);
        let cache = ActivationCache::from_inputs(&images, false, CacheMode::Mem, None).unwrap();
        assert!(cache.check_fingerprint(&cache.fingerprint.clone()).is_ok());
        assert!(cache.check_fingerprint("deadbeef0000000000").is_err());
    }
}
