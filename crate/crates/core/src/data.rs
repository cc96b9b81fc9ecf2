//! Dataset containers, the amat and IDX loaders, rotation synthesis and
//! percentile clipping.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{rotate_square, Tensor};

pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
pub const CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationMode {
    /// Multiples of 90°, exact on the pixel lattice.
    Quarter,
    /// Any angle in `[0, 2π)`, bilinear resampling.
    Uniform,
}

impl FromStr for RotationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quarter" => Ok(Self::Quarter),
            "uniform" => Ok(Self::Uniform),
            _ => Err(Error::InvalidArgument(format!("unknown rotation mode '{s}' (expected quarter|uniform)"))),
        }
    }
}

/// Images `[N,1,28,28]` with labels in `[0,10)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl DatasetBundle {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != SIDE || shape[3] != SIDE {
            return Err(Error::Shape(format!("dataset images must be [N,1,28,28], got {shape:?}")));
        }
        if shape[0] != labels.len() {
            return Err(Error::Shape(format!("{} images but {} labels", shape[0], labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= CLASSES) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0,10)")));
        }
        Ok(Self { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images.data()[i * PIXELS..(i + 1) * PIXELS]
    }

    /// Gathers the given samples into a `[k,1,28,28]` batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * PIXELS);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let images = Tensor::new(vec![indices.len(), 1, SIDE, SIDE], data).expect("gathered batch");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Self {
        let (images, labels) = self.batch(indices);
        Self { images, labels, split }
    }

    /// Shuffles with `seed` and carves disjoint train/valid/test subsets.
    pub fn split_three(&self, sizes: [usize; 3], seed: u64) -> Result<[Self; 3]> {
        let total: usize = sizes.iter().sum();
        if total > self.len() {
            return Err(Error::InvalidArgument(format!(
                "requested {total} samples but the source has {}",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (a, rest) = order.split_at(sizes[0]);
        let (b, rest) = rest.split_at(sizes[1]);
        let c = &rest[..sizes[2]];
        Ok([
            self.subset(a, Split::Train),
            self.subset(b, Split::Valid),
            self.subset(c, Split::Test),
        ])
    }
}

/// Parses the amat text format: one sample per line, 784 pixel values
/// followed by the label.
pub fn parse_amat(text: &str) -> Result<DatasetBundle> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let start = pixels.len();
        let mut count = 0;
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("non-numeric token '{tok}'"),
            })?;
            pixels.push(v);
            count += 1;
        }
        if count != PIXELS + 1 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {} values, found {count}", PIXELS + 1),
            });
        }
        let label = pixels.pop().expect("counted").round();
        if !(0.0..CLASSES as f64).contains(&label) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("label {label} outside [0,10)"),
            });
        }
        labels.push(label as usize);
        debug_assert_eq!(pixels.len() - start, PIXELS);
    }
    let n = labels.len();
    DatasetBundle::new(Tensor::new(vec![n, 1, SIDE, SIDE], pixels)?, labels, Split::Full)
}

pub fn load_amat(path: impl AsRef<Path>) -> Result<DatasetBundle> {
    parse_amat(&fs::read_to_string(path)?)
}

/// Renders a bundle in the amat format; values use the shortest
/// round-tripping representation.
pub fn to_amat(bundle: &DatasetBundle) -> String {
    let mut out = String::new();
    for i in 0..bundle.len() {
        for v in bundle.image(i) {
            write!(out, "{v:?} ").expect("write to string");
        }
        writeln!(out, "{}", bundle.labels[i]).expect("write to string");
    }
    out
}

pub fn write_amat(path: impl AsRef<Path>, bundle: &DatasetBundle) -> Result<()> {
    fs::write(path, to_amat(bundle))?;
    Ok(())
}

fn be_u32(bytes: &[u8], at: usize) -> Result<usize> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
        .ok_or_else(|| Error::Format("IDX header truncated".into()))
}

/// Decodes an IDX image file (magic `0x803`) and label file (magic `0x801`).
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<DatasetBundle> {
    let magic = be_u32(images, 0)?;
    if magic != 0x803 {
        return Err(Error::Format(format!("bad image magic {magic:#010x}")));
    }
    let (n, h, w) = (be_u32(images, 4)?, be_u32(images, 8)?, be_u32(images, 12)?);
    if (h, w) != (SIDE, SIDE) {
        return Err(Error::Format(format!("images are {h}x{w}, expected 28x28")));
    }
    let magic = be_u32(labels, 0)?;
    if magic != 0x801 {
        return Err(Error::Format(format!("bad label magic {magic:#010x}")));
    }
    let n_labels = be_u32(labels, 4)?;
    if n_labels != n {
        return Err(Error::Format(format!("{n} images but {n_labels} labels")));
    }
    let pix = images
        .get(16..16 + n * PIXELS)
        .ok_or_else(|| Error::Format("image payload truncated".into()))?;
    let lab = labels
        .get(8..8 + n)
        .ok_or_else(|| Error::Format("label payload truncated".into()))?;
    let data = pix.iter().map(|&b| f64::from(b) / 255.0).collect();
    DatasetBundle::new(
        Tensor::new(vec![n, 1, SIDE, SIDE], data)?,
        lab.iter().map(|&b| usize::from(b)).collect(),
        Split::Full,
    )
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<DatasetBundle> {
    parse_idx(&fs::read(images_path)?, &fs::read(labels_path)?)
}

/// Rotates a square plane counter-clockwise by `angle` radians about its
/// centre with bilinear interpolation; samples outside the image are zero.
pub fn rotate_bilinear(src: &[f64], n: usize, angle: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let (s, co) = angle.sin_cos();
    let at = |r: isize, q: isize| -> f64 {
        if r < 0 || q < 0 || r >= n as isize || q >= n as isize {
            0.0
        } else {
            src[r as usize * n + q as usize]
        }
    };
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let y = i as f64 - c;
        for j in 0..n {
            let x = j as f64 - c;
            // inverse map of the counter-clockwise rotation
            let sr = c + y * co + x * s;
            let sc = c + x * co - y * s;
            let (r0, q0) = (sr.floor(), sc.floor());
            let (fr, fq) = (sr - r0, sc - q0);
            let (r0, q0) = (r0 as isize, q0 as isize);
            out[i * n + j] = (1.0 - fr) * ((1.0 - fq) * at(r0, q0) + fq * at(r0, q0 + 1))
                + fr * ((1.0 - fq) * at(r0 + 1, q0) + fq * at(r0 + 1, q0 + 1));
        }
    }
    out
}

/// Rotates every image by an independently drawn angle.
pub fn synth_rotations(bundle: &DatasetBundle, mode: RotationMode, seed: u64) -> DatasetBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(bundle.images.len());
    let mut buf = vec![0.0; PIXELS];
    for i in 0..bundle.len() {
        let img = bundle.image(i);
        match mode {
            RotationMode::Quarter => {
                rotate_square(img, SIDE, rng.gen_range(0..4), &mut buf);
                data.extend_from_slice(&buf);
            }
            RotationMode::Uniform => {
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                data.extend(rotate_bilinear(img, SIDE, angle));
            }
        }
    }
    DatasetBundle {
        images: Tensor::new(bundle.images.shape().to_vec(), data).expect("same shape"),
        labels: bundle.labels.clone(),
        split: bundle.split,
    }
}

/// Draws train/valid/test subsets with `seed` and, if `mode` is given,
/// rotates each with its own stream derived from the same seed.
pub fn rotated_splits(raw: &DatasetBundle, sizes: [usize; 3], mode: Option<RotationMode>, seed: u64) -> Result<[DatasetBundle; 3]> {
    let mut parts = raw.split_three(sizes, seed)?;
    if let Some(mode) = mode {
        for (i, part) in parts.iter_mut().enumerate() {
            *part = synth_rotations(part, mode, seed.wrapping_add(1 + i as u64));
        }
    }
    Ok(parts)
}

/// The `p`-th percentile (linear interpolation between order statistics)
/// of `|x|`.
pub fn abs_percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of empty data".into()));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::InvalidArgument(format!("percentile {p} outside (0,100]")));
    }
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (abs.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(abs.len() - 1);
    Ok(abs[lo] + (pos - lo as f64) * (abs[hi] - abs[lo]))
}

/// Clamps every value into `[-t, t]` with `t` the `p`-th percentile of `|x|`;
/// returns the clipped bundle and `t`.
pub fn clip_percentile(bundle: &DatasetBundle, p: f64) -> Result<(DatasetBundle, f64)> {
    let t = abs_percentile(bundle.images.data(), p)?;
    let mut out = bundle.clone();
    out.images = clamp_abs(&bundle.images, t);
    Ok((out, t))
}

/// Mean and (population) standard deviation over every pixel of a bundle.
pub fn pixel_moments(bundle: &DatasetBundle) -> Result<(f64, f64)> {
    let d = bundle.images.data();
    if d.is_empty() {
        return Err(Error::InvalidArgument("moments of an empty dataset".into()));
    }
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(std > 0.0) {
        return Err(Error::InvalidArgument("constant inputs cannot be standardized".into()));
    }
    Ok((mean, std))
}

pub fn clamp_abs(x: &Tensor, t: f64) -> Tensor {
    x.map(|v| v.clamp(-t, t))
}
