//! Synthetic 10-class image dataset written in the exact CIFAR-10 binary
//! format, for self-contained runs on machines without the real archive.
//!
//! Each class is a *pair* of oriented gratings drawn from 8 orientations in
//! two frequency bands; the pairs overlap across classes, so detecting one
//! grating narrows the label down but never decides it. Heavy positional
//! jitter, distractor gratings, colored backgrounds and pixel noise keep a
//! linear model on raw pixels weak while rewarding orientation-selective
//! features and depth.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::cifar::{RECORDS_PER_FILE, RECORD_BYTES, TEST_FILE, TRAIN_FILES};
use crate::error::Result;

const SIZE: usize = 32;
const ORIENTATIONS: usize = 8;

/// Class -> (orientation index in the high band, orientation index in the
/// low band). Every orientation serves several classes, in each band.
const CLASS_PAIRS: [(usize, usize); 10] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 4),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 0),
    (0, 4),
    (2, 6),
];

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub seed: u64,
    /// Pixel noise standard deviation (in pattern-amplitude units).
    pub noise: f32,
    /// Number of distractor gratings per image.
    pub distractors: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            seed: 2024,
            noise: 0.6,
            distractors: 2,
        }
    }
}

/// Write a full synthetic archive (5 train batches + test batch, 10,000
/// records each) into `dir`. Deterministic given the options.
pub fn write_synthetic_cifar10(dir: &Path, opts: &SynthOptions) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, name) in TRAIN_FILES.iter().enumerate() {
        write_batch(&dir.join(name), opts, (i as u64) << 32, RECORDS_PER_FILE)?;
    }
    write_batch(&dir.join(TEST_FILE), opts, 5u64 << 32, RECORDS_PER_FILE)?;
    Ok(())
}

fn write_batch(path: &Path, opts: &SynthOptions, index_base: u64, records: usize) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    let mut record = [0u8; RECORD_BYTES];
    for r in 0..records {
        let mut rng = ChaCha8Rng::seed_from_u64(
            opts.seed ^ (index_base + r as u64).wrapping_mul(0x9e3779b97f4a7c15),
        );
        let class = rng.gen_range(0..10usize);
        record[0] = class as u8;
        render_image(class, opts, &mut rng, &mut record[1..]);
        out.write_all(&record)?;
    }
    out.flush()?;
    Ok(())
}

struct Patch {
    cy: f32,
    cx: f32,
    angle: f32,
    freq: f32,
    phase: f32,
    sigma: f32,
    amp: f32,
    color: [f32; 3],
}

fn random_patch<R: Rng>(
    rng: &mut R,
    orientation: usize,
    freq: f32,
    amp: f32,
) -> Patch {
    let jitter: f32 = rng.gen_range(-0.13..0.13); // ~±7.5 degrees
    let angle = orientation as f32 * std::f32::consts::PI / ORIENTATIONS as f32 + jitter;
    Patch {
        cy: rng.gen_range(7.0..25.0),
        cx: rng.gen_range(7.0..25.0),
        angle,
        freq,
        phase: rng.gen_range(0.0..std::f32::consts::TAU),
        sigma: rng.gen_range(4.2..5.8),
        amp,
        color: [
            rng.gen_range(0.5..1.0),
            rng.gen_range(0.5..1.0),
            rng.gen_range(0.5..1.0),
        ],
    }
}

/// Render one image as R,G,B planes into `pixels` (3072 bytes).
fn render_image<R: Rng>(class: usize, opts: &SynthOptions, rng: &mut R, pixels: &mut [u8]) {
    let (hi, lo) = CLASS_PAIRS[class];
    let f_hi = 1.9; // radians per pixel, high band
    let f_lo = 0.95;

    let mut patches = Vec::with_capacity(2 + opts.distractors);
    patches.push(random_patch(rng, hi, f_hi, 1.0));
    patches.push(random_patch(rng, lo, f_lo, 1.0));
    for _ in 0..opts.distractors {
        let o = rng.gen_range(0..ORIENTATIONS);
        let f = if rng.gen_bool(0.5) { f_hi } else { f_lo };
        patches.push(random_patch(rng, o, f, 0.55));
    }

    // smooth colored background: one random low-frequency wave per channel
    let bg: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(-0.25..0.25f32),          // ky
                rng.gen_range(-0.25..0.25f32),          // kx
                rng.gen_range(0.0..std::f32::consts::TAU), // phase
                rng.gen_range(0.15..0.45f32),           // amplitude
            )
        })
        .collect();

    let mut canvas = [[0.0f32; SIZE * SIZE]; 3];
    for p in &patches {
        let (sin_a, cos_a) = p.angle.sin_cos();
        let inv_2s2 = 1.0 / (2.0 * p.sigma * p.sigma);
        let lo_y = (p.cy - 3.0 * p.sigma).max(0.0) as usize;
        let hi_y = ((p.cy + 3.0 * p.sigma) as usize).min(SIZE - 1);
        let lo_x = (p.cx - 3.0 * p.sigma).max(0.0) as usize;
        let hi_x = ((p.cx + 3.0 * p.sigma) as usize).min(SIZE - 1);
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                let dy = y as f32 - p.cy;
                let dx = x as f32 - p.cx;
                let along = dx * cos_a + dy * sin_a;
                let env = (-(dy * dy + dx * dx) * inv_2s2).exp();
                let v = p.amp * env * (along * p.freq + p.phase).cos();
                for ch in 0..3 {
                    canvas[ch][y * SIZE + x] += v * p.color[ch];
                }
            }
        }
    }

    for ch in 0..3 {
        let (ky, kx, phase, amp) = bg[ch];
        for y in 0..SIZE {
            for x in 0..SIZE {
                let wave = amp * (ky * y as f32 + kx * x as f32 + phase).cos();
                let noise: f32 = StandardNormal.sample(rng);
                let v = canvas[ch][y * SIZE + x] + wave + opts.noise * noise;
                let byte = (v * 52.0 + 128.0).clamp(0.0, 255.0) as u8;
                pixels[ch * SIZE * SIZE + y * SIZE + x] = byte;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_cifar10;

    #[test]
    fn archive_is_loadable_and_balanced() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions::default();
        // full-size generation is exercised by the acceptance suite; keep
        // the unit test quick by writing one batch and checking structure
        write_batch(&dir.path().join("data_batch_1.bin"), &opts, 0, RECORDS_PER_FILE).unwrap();
        let meta = std::fs::metadata(dir.path().join("data_batch_1.bin")).unwrap();
        assert_eq!(meta.len() as usize, RECORD_BYTES * RECORDS_PER_FILE);
        let raw = std::fs::read(dir.path().join("data_batch_1.bin")).unwrap();
        let mut counts = [0usize; 10];
        for r in 0..RECORDS_PER_FILE {
            counts[raw[r * RECORD_BYTES] as usize] += 1;
        }
        for (c, &n) in counts.iter().enumerate() {
            assert!(n > 700, "class {c} badly underrepresented: {n}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions::default();
        write_batch(&dir.path().join("a.bin"), &opts, 7, 50).unwrap();
        write_batch(&dir.path().join("b.bin"), &opts, 7, 50).unwrap();
        let a = std::fs::read(dir.path().join("a.bin")).unwrap();
        let b = std::fs::read(dir.path().join("b.bin")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    #[ignore = "writes the full 184MB archive; run explicitly"]
    fn full_archive_roundtrips_through_the_loader() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_cifar10(dir.path(), &SynthOptions::default()).unwrap();
        let (train, test) = load_cifar10(dir.path()).unwrap();
        assert_eq!(train.len(), 50_000);
        assert_eq!(test.len(), 10_000);
    }
}
