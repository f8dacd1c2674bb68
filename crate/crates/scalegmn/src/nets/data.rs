//! Desk-scale image data: a synthetic 10-class 8x8 grayscale set built from
//! fixed class prototypes plus gaussian noise, and a binary loader for
//! external grayscale datasets behind the same interface.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{NetError, Result};
use crate::rng::substream;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;
const SIDE: usize = 8;
const NOISE_STD: f64 = 0.16;

/// A labeled batch of images, pixels in `[0,1]`, shape `[n, c, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub pixels: Tensor,
    pub labels: Vec<usize>,
}

impl ImageBatch {
    pub fn new(pixels: Tensor, labels: Vec<usize>) -> Result<Self> {
        if pixels.shape().len() != 4 || pixels.shape()[0] != labels.len() {
            return Err(NetError::BadFormat(format!(
                "pixels {:?} vs {} labels",
                pixels.shape(),
                labels.len()
            )));
        }
        Ok(ImageBatch { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copy of the rows at `indices`.
    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let s = self.pixels.shape();
        let px = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(indices.len() * px);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.pixels.data()[i * px..(i + 1) * px]);
            labels.push(self.labels[i]);
        }
        ImageBatch {
            pixels: Tensor::new(vec![indices.len(), s[1], s[2], s[3]], data).expect("select shape"),
            labels,
        }
    }
}

/// Train/val/test splits of one dataset.
#[derive(Debug, Clone)]
pub struct ToyData {
    pub train: ImageBatch,
    pub val: ImageBatch,
    pub test: ImageBatch,
}

/// Deterministic synthetic dataset: ten smooth prototype images, one per
/// class, with per-sample gaussian noise. Splits use independent draws and
/// balanced labels (counts within one of each other).
pub fn toy_dataset(seed: u64, n_train: usize, n_val: usize, n_test: usize) -> Result<ToyData> {
    for &n in &[n_train, n_val, n_test] {
        if n < NUM_CLASSES {
            return Err(NetError::BadFormat(format!("split of {} smaller than {} classes", n, NUM_CLASSES)));
        }
    }
    let mut proto_rng = substream(seed, "toy-prototypes");
    let prototypes: Vec<Vec<f64>> = (0..NUM_CLASSES).map(|_| prototype(&mut proto_rng)).collect();
    let train = sample_split(&prototypes, n_train, &mut substream(seed, "toy-train"))?;
    let val = sample_split(&prototypes, n_val, &mut substream(seed, "toy-val"))?;
    let test = sample_split(&prototypes, n_test, &mut substream(seed, "toy-test"))?;
    Ok(ToyData { train, val, test })
}

fn prototype<R: Rng>(rng: &mut R) -> Vec<f64> {
    let mut img: Vec<f64> = (0..SIDE * SIDE).map(|_| rng.random::<f64>()).collect();
    for _ in 0..2 {
        img = box_blur(&img);
    }
    let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    img.iter().map(|v| 0.15 + 0.7 * (v - lo) / (hi - lo).max(1e-12)).collect()
}

fn box_blur(img: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; SIDE * SIDE];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let mut acc = 0.0;
            let mut n = 0.0;
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let (yy, xx) = (y as i32 + dy, x as i32 + dx);
                    if yy >= 0 && yy < SIDE as i32 && xx >= 0 && xx < SIDE as i32 {
                        acc += img[yy as usize * SIDE + xx as usize];
                        n += 1.0;
                    }
                }
            }
            out[y * SIDE + x] = acc / n;
        }
    }
    out
}

fn sample_split<R: Rng>(prototypes: &[Vec<f64>], n: usize, rng: &mut R) -> Result<ImageBatch> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % NUM_CLASSES).collect();
    labels.shuffle(rng);
    let noise = Normal::new(0.0, NOISE_STD).expect("noise dist");
    let mut data = Vec::with_capacity(n * SIDE * SIDE);
    for &y in &labels {
        for &p in &prototypes[y] {
            data.push((p + noise.sample(rng)).clamp(0.0, 1.0));
        }
    }
    ImageBatch::new(Tensor::new(vec![n, 1, SIDE, SIDE], data)?, labels)
}

const MAGIC: &[u8; 8] = b"WSGS0001";

/// Write a batch in the flat binary dataset format:
///
/// ```text
/// bytes 0..8    magic "WSGS0001"
/// bytes 8..24   u32 LE: count, channels, height, width
/// then          count*channels*height*width f32 LE pixels, row-major
/// then          count u8 labels
/// ```
pub fn write_dataset(path: &Path, batch: &ImageBatch) -> Result<()> {
    let s = batch.pixels.shape();
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    for dim in [s[0], s[1], s[2], s[3]] {
        f.write_all(&(dim as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(batch.pixels.len() * 4);
    for &v in batch.pixels.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    f.write_all(&buf)?;
    let labels: Vec<u8> = batch.labels.iter().map(|&y| y as u8).collect();
    f.write_all(&labels)?;
    Ok(())
}

/// Load a dataset written by [`write_dataset`] (or produced externally in the
/// same format).
pub fn load_dataset(path: &Path) -> Result<ImageBatch> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NetError::BadFormat("bad magic".into()));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let mut b = [0u8; 4];
        f.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let [n, c, h, w] = dims;
    let count = n * c * h * w;
    let mut pix_bytes = vec![0u8; count * 4];
    f.read_exact(&mut pix_bytes)?;
    let pixels: Vec<f64> = pix_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let mut label_bytes = vec![0u8; n];
    f.read_exact(&mut label_bytes)?;
    let labels: Vec<usize> = label_bytes.into_iter().map(|b| b as usize).collect();
    ImageBatch::new(Tensor::new(vec![n, c, h, w], pixels)?, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_bit_identical_data() {
        let a = toy_dataset(42, 30, 10, 10).unwrap();
        let b = toy_dataset(42, 30, 10, 10).unwrap();
        assert_eq!(a.train.pixels, b.train.pixels);
        assert_eq!(a.train.labels, b.train.labels);
        assert_eq!(a.test.pixels, b.test.pixels);
    }

    #[test]
    fn labels_balanced_within_one() {
        let d = toy_dataset(7, 103, 10, 10).unwrap();
        let mut hist = [0usize; NUM_CLASSES];
        for &y in &d.train.labels {
            hist[y] += 1;
        }
        let (lo, hi) = (hist.iter().min().unwrap(), hist.iter().max().unwrap());
        assert!(hi - lo <= 1, "histogram {:?}", hist);
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let d = toy_dataset(9, 50, 10, 10).unwrap();
        assert!(d.train.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn dataset_file_roundtrip() {
        let d = toy_dataset(1, 12, 10, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.bin");
        write_dataset(&path, &d.val).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.labels, d.val.labels);
        assert_eq!(back.pixels.shape(), d.val.pixels.shape());
        for (a, b) in back.pixels.data().iter().zip(d.val.pixels.data()) {
            assert!((a - b).abs() <= f32::EPSILON as f64);
        }
    }
}
