//! Deterministic desk-scale datasets and the IDX image reader.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub seed: u64,
    /// `[n, d]`, every entry in `[0, 1]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// `[channels, height, width]` for image data.
    pub image_shape: Option<[usize; 3]>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, split: Split, seed: u64, inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            split,
            seed,
            inputs,
            labels,
            num_classes,
            image_shape: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.shape().len() != 2 || self.inputs.rows() != self.labels.len() {
            return Err(Error::Shape {
                op: "dataset",
                lhs: self.inputs.shape().to_vec(),
                rhs: vec![self.labels.len()],
            });
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::invalid("labels", format!("label {bad} outside [0, {})", self.num_classes)));
        }
        if self.inputs.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("inputs", "values outside [0, 1]"));
        }
        if let Some(s) = self.image_shape {
            if s.iter().product::<usize>() != self.input_dim() {
                return Err(Error::invalid("image_shape", "does not match input width"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.row_len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        self.labels.iter().for_each(|&y| counts[y] += 1);
        counts
    }

    /// Subset in the given index order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        }
    }
}

fn balanced_labels(n: usize, c: usize) -> Vec<usize> {
    (0..n).map(|i| i % c).collect()
}

/// `c` isotropic unit-variance Gaussian clusters whose centers sit at
/// distance `separation` from the origin, mapped affinely into `[0, 1]^d`
/// and clipped.
pub fn gen_gaussian_blobs(n: usize, d: usize, c: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if c < 2 || n < c || d == 0 {
        return Err(Error::invalid("gaussian_blobs", "need c >= 2, n >= c, d >= 1"));
    }
    if !(separation > 0.0) {
        return Err(Error::invalid("separation", "must be positive"));
    }
    let mut rng = seed::rng(seed, &[seed::DATA, 1]);
    let centers: Vec<Vec<f64>> = (0..c)
        .map(|k| {
            let mut center = vec![0.0; d];
            if d == 1 {
                // Evenly spaced on a segment.
                center[0] = separation * (2.0 * k as f64 / (c - 1) as f64 - 1.0);
            } else {
                let angle = 2.0 * PI * k as f64 / c as f64;
                center[0] = separation * angle.cos();
                center[1] = separation * angle.sin();
            }
            center
        })
        .collect();
    let half_width = separation + 4.0;
    let mut labels = balanced_labels(n, c);
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * d);
    for &y in &labels {
        for center in centers[y].iter() {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(((center + z + half_width) / (2.0 * half_width)).clamp(0.0, 1.0));
        }
    }
    Dataset::new("gaussian_blobs", Split::Train, seed, Tensor::new(vec![n, d], data)?, labels, c)
}

/// Geometry of the two-moons rescaling into the unit square.
#[derive(Clone, Copy, Debug)]
pub struct MoonsFrame {
    pub scale: f64,
    pub offset: [f64; 2],
}

impl MoonsFrame {
    /// Uniform scale keeps circles circular; the margin leaves room for noise.
    pub fn new(noise: f64) -> Self {
        let margin = 3.0 * noise;
        let scale = 1.0 / (3.0 + 2.0 * margin);
        // Raw x spans [-1, 2], raw y spans [-0.5, 1].
        let ox = (margin + 1.0) * scale;
        let oy = 0.5 * (1.0 - 1.5 * scale) + 0.5 * scale;
        MoonsFrame {
            scale,
            offset: [ox, oy],
        }
    }

    pub fn map(&self, raw: [f64; 2]) -> [f64; 2] {
        [raw[0] * self.scale + self.offset[0], raw[1] * self.scale + self.offset[1]]
    }

    /// Center of each arc in the mapped frame; both radii equal `scale`.
    pub fn arc_centers(&self) -> [[f64; 2]; 2] {
        [self.map([0.0, 0.0]), self.map([1.0, 0.5])]
    }
}

/// Two interleaved half circles with Gaussian noise, label 0 on the upper arc.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::invalid("n", "need at least 2 samples"));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::invalid("noise", "must be finite and >= 0"));
    }
    let frame = MoonsFrame::new(noise);
    let mut rng = seed::rng(seed, &[seed::DATA, 2]);
    let mut labels = balanced_labels(n, 2);
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(2 * n);
    for &y in &labels {
        let t = rng.gen_range(0.0..=PI);
        let raw = if y == 0 {
            [t.cos(), t.sin()]
        } else {
            [1.0 - t.cos(), 0.5 - t.sin()]
        };
        let nx: f64 = StandardNormal.sample(&mut rng);
        let ny: f64 = StandardNormal.sample(&mut rng);
        let p = frame.map([raw[0] + noise * nx, raw[1] + noise * ny]);
        data.push(p[0].clamp(0.0, 1.0));
        data.push(p[1].clamp(0.0, 1.0));
    }
    Dataset::new("two_moons", Split::Train, seed, Tensor::new(vec![n, 2], data)?, labels, 2)
}

// --- IDX ------------------------------------------------------------------

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap()))
}

/// Parses an unsigned-byte IDX images payload into `(n, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<(usize, usize, usize, &[u8]), String> {
    let magic = be_u32(bytes, 0).ok_or("missing header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"));
    }
    let n = be_u32(bytes, 4).ok_or("missing dimension")? as usize;
    let rows = be_u32(bytes, 8).ok_or("missing dimension")? as usize;
    let cols = be_u32(bytes, 12).ok_or("missing dimension")? as usize;
    let len = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != len {
        return Err(format!("payload has {} bytes, header implies {len}", payload.len()));
    }
    Ok((n, rows, cols, payload))
}

pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<&[u8], String> {
    let magic = be_u32(bytes, 0).ok_or("missing header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"));
    }
    let n = be_u32(bytes, 4).ok_or("missing dimension")? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(format!("payload has {} bytes, header implies {n}", payload.len()));
    }
    Ok(payload)
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads an IDX image/label pair. Pixels are scaled by 1/255. A class
/// filter keeps only the listed classes and relabels them `0..len` in the
/// given order.
pub fn load_idx_images(images: &Path, labels: &Path, classes_filter: Option<&[usize]>) -> Result<Dataset> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::io(p, e));
    let idx_err = |p: &Path, detail: String| Error::Idx {
        path: p.to_path_buf(),
        detail,
    };
    let img_bytes = read(images)?;
    let lab_bytes = read(labels)?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes).map_err(|d| idx_err(images, d))?;
    let raw_labels = parse_idx_labels(&lab_bytes).map_err(|d| idx_err(labels, d))?;
    if raw_labels.len() != n {
        return Err(idx_err(labels, format!("{} labels for {n} images", raw_labels.len())));
    }
    let num_raw = raw_labels.iter().map(|&v| v as usize + 1).max().unwrap_or(0);
    let (keep, num_classes): (Vec<(usize, usize)>, usize) = match classes_filter {
        None => (raw_labels.iter().enumerate().map(|(i, &y)| (i, y as usize)).collect(), num_raw.max(2)),
        Some(filter) => {
            if filter.is_empty() {
                return Err(Error::invalid("classes_filter", "empty filter"));
            }
            if let Some(&bad) = filter.iter().find(|&&c| !raw_labels.iter().any(|&y| y as usize == c)) {
                return Err(Error::invalid("classes_filter", format!("class {bad} not present in {}", labels.display())));
            }
            let kept = raw_labels
                .iter()
                .enumerate()
                .filter_map(|(i, &y)| filter.iter().position(|&c| c == y as usize).map(|k| (i, k)))
                .collect();
            (kept, filter.len().max(2))
        }
    };
    let width = rows * cols;
    let mut data = Vec::with_capacity(keep.len() * width);
    for &(i, _) in &keep {
        data.extend(pixels[i * width..(i + 1) * width].iter().map(|&p| p as f64 / 255.0));
    }
    let inputs = Tensor::new(vec![keep.len().max(1), width], data)
        .map_err(|_| idx_err(images, "no samples left after filtering".into()))?;
    let mut ds = Dataset::new(
        images.file_stem().and_then(|s| s.to_str()).unwrap_or("idx").to_string(),
        Split::Train,
        0,
        inputs,
        keep.iter().map(|&(_, k)| k).collect(),
        num_classes,
    )?;
    ds.image_shape = Some([1, rows, cols]);
    Ok(ds)
}

// --- batching --------------------------------------------------------------

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed, &[seed::SHUFFLE, epoch as u64]));
    idx
}

/// A batch of inputs and labels plus the dataset indices they came from.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

/// Shuffled batches for `(seed, epoch)`; the last batch may be short.
pub fn batch_iter(dataset: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> impl Iterator<Item = Batch> + '_ {
    let batch_size = batch_size.max(1);
    let perm = epoch_permutation(dataset.len(), seed, epoch);
    let chunks: Vec<Vec<usize>> = perm.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |indices| Batch {
        inputs: dataset.inputs.select_rows(&indices),
        labels: indices.iter().map(|&i| dataset.labels[i]).collect(),
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_deterministic_and_balanced() {
        let a = gen_gaussian_blobs(101, 3, 4, 3.0, 9).unwrap();
        let b = gen_gaussian_blobs(101, 3, 4, 3.0, 9).unwrap();
        assert_eq!(a, b);
        let counts = a.class_counts();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert!(a.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a.inputs, gen_gaussian_blobs(101, 3, 4, 3.0, 10).unwrap().inputs);
        assert!(gen_gaussian_blobs(3, 2, 4, 1.0, 0).is_err());
        assert!(gen_gaussian_blobs(10, 2, 2, 0.0, 0).is_err());
    }

    #[test]
    fn moons_without_noise_lie_on_arcs() {
        let ds = gen_two_moons(400, 0.0, 1).unwrap();
        let frame = MoonsFrame::new(0.0);
        let centers = frame.arc_centers();
        for i in 0..ds.len() {
            let p = ds.inputs.row(i);
            let c = centers[ds.labels[i]];
            let r = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
            assert!((r - frame.scale).abs() <= 1e-9, "radius {r}");
        }
        assert_eq!(ds.class_counts(), vec![200, 200]);
    }

    #[test]
    fn moons_deterministic_and_bounded() {
        let a = gen_two_moons(300, 0.2, 4).unwrap();
        assert_eq!(a, gen_two_moons(300, 0.2, 4).unwrap());
        assert!(a.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(gen_two_moons(10, -1.0, 0).is_err());
    }

    #[test]
    fn batches_cover_dataset() {
        let ds = gen_two_moons(37, 0.1, 0).unwrap();
        let batches: Vec<Batch> = batch_iter(&ds, 8, 3, 0).collect();
        assert_eq!(batches.len(), 5);
        assert_eq!(batches.last().unwrap().labels.len(), 5);
        let mut all: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());

        let again: Vec<Vec<usize>> = batch_iter(&ds, 8, 3, 0).map(|b| b.indices).collect();
        assert_eq!(again, batches.iter().map(|b| b.indices.clone()).collect::<Vec<_>>());
        assert_ne!(epoch_permutation(37, 3, 0), epoch_permutation(37, 3, 1));

        let one: Vec<Batch> = batch_iter(&ds, 100, 3, 0).collect();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].labels.len(), 37);
    }

    #[test]
    fn idx_parse_errors() {
        let good = encode_idx_images(2, 2, &[0, 255, 1, 2, 3, 4, 5, 6]);
        assert_eq!(parse_idx_images(&good).unwrap().0, 2);
        let mut bad = good.clone();
        bad[3] = 0x01;
        assert!(parse_idx_images(&bad).unwrap_err().contains("magic"));
        assert!(parse_idx_images(&good[..good.len() - 1]).is_err());
        assert!(parse_idx_labels(&encode_idx_labels(&[1, 2])[..9]).is_err());
    }
}
