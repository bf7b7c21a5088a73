//! Labeled image sets: CIFAR binary archives and a procedural CIFAR-like generator.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Images `N x C x H x W` with integer labels.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!("dataset images must be 4-d, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Shape(format!("{} images but {} labels", images.shape()[0], labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::ClassOutOfRange { class: bad, num_classes });
        }
        Ok(Self { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> &[T] {
        self.images.item(i)
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let items: Vec<&[T]> = indices.iter().map(|&i| self.image(i)).collect();
        let images = Tensor::stack(&items, &self.image_shape())?;
        Ok(Self { images, labels: indices.iter().map(|&i| self.labels[i]).collect(), num_classes: self.num_classes })
    }

    /// Deterministic subset: the given classes (relabeled `0..`), at most `per_class` each.
    pub fn subset(&self, classes: Option<&[usize]>, per_class: Option<usize>, seed: u64) -> Result<Self> {
        let all: Vec<usize> = (0..self.num_classes).collect();
        let classes = classes.unwrap_or(&all);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = Vec::new();
        let mut labels = Vec::new();
        for (new_label, &c) in classes.iter().enumerate() {
            if c >= self.num_classes {
                return Err(Error::ClassOutOfRange { class: c, num_classes: self.num_classes });
            }
            let mut idx = self.indices_of_class(c);
            if let Some(k) = per_class {
                if k < idx.len() {
                    idx.shuffle(&mut rng);
                    idx.truncate(k);
                    idx.sort_unstable();
                }
            }
            labels.extend(std::iter::repeat_n(new_label, idx.len()));
            picked.extend(idx);
        }
        let mut out = self.select(&picked)?;
        out.labels = labels;
        out.num_classes = classes.len();
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset { images: self.images.cast(), labels: self.labels.clone(), num_classes: self.num_classes }
    }
}

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn fit<T: Scalar>(data: &Dataset<T>) -> Self {
        let [c, h, w] = data.image_shape();
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..data.len() {
            let img = data.image(i);
            for ch in 0..c {
                for &v in &img[ch * h * w..(ch + 1) * h * w] {
                    let v = v.as_f64();
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let n = (data.len() * h * w).max(1) as f64;
        let std = (0..c)
            .map(|ch| {
                let m = mean[ch] / n;
                (sq[ch] / n - m * m).max(1e-12).sqrt()
            })
            .collect();
        Self { mean: mean.into_iter().map(|m| m / n).collect(), std }
    }

    pub fn apply<T: Scalar>(&self, data: &mut Dataset<T>) {
        let [c, h, w] = data.image_shape();
        for i in 0..data.len() {
            let img = data.images.item_mut(i);
            for ch in 0..c {
                let (m, s) = (T::lit(self.mean[ch]), T::lit(self.std[ch]));
                for v in &mut img[ch * h * w..(ch + 1) * h * w] {
                    *v = (*v - m) / s;
                }
            }
        }
    }

    /// Valid range of channel `ch` once raw pixels in `[0, 1]` are normalized.
    pub fn range(&self, ch: usize) -> (f64, f64) {
        (-self.mean[ch] / self.std[ch], (1.0 - self.mean[ch]) / self.std[ch])
    }

    /// Maps one normalized image back to `[0, 1]`.
    pub fn denormalize<T: Scalar>(&self, image: &[T], hw: usize) -> Vec<f64> {
        image
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = i / hw;
                (v.as_f64() * self.std[ch] + self.mean[ch]).clamp(0.0, 1.0)
            })
            .collect()
    }
}

/// Train/test split.
#[derive(Clone, Debug)]
pub struct Splits<T> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
}

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Reads one CIFAR binary batch; `label_bytes` is 1 for CIFAR-10, 2 for CIFAR-100.
fn read_cifar_file<T: Scalar>(path: &Path, label_bytes: usize, fine: bool) -> Result<(Vec<T>, Vec<usize>)> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let record = label_bytes + CIFAR_PIXELS;
    if buf.is_empty() || buf.len() % record != 0 {
        return Err(Error::Corrupt(format!("{}: {} bytes is not a whole number of records", path.display(), buf.len())));
    }
    let n = buf.len() / record;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for chunk in buf.chunks_exact(record) {
        let label = if label_bytes == 2 && fine { chunk[1] } else { chunk[0] };
        labels.push(label as usize);
        images.extend(chunk[label_bytes..].iter().map(|&b| T::lit(b as f64 / 255.0)));
    }
    Ok((images, labels))
}

/// Loads the binary CIFAR-10 (`data_batch_{1..5}.bin`, `test_batch.bin`) or
/// CIFAR-100 (`train.bin`, `test.bin`) archive layout from `root`.
pub fn load_cifar<T: Scalar>(root: &Path, hundred: bool) -> Result<Splits<T>> {
    if !root.is_dir() {
        return Err(Error::MissingArtifact(root.to_path_buf()));
    }
    let (train_files, test_file, label_bytes, classes) = if hundred {
        (vec!["train.bin".to_string()], "test.bin", 2, 100)
    } else {
        ((1..=5).map(|i| format!("data_batch_{i}.bin")).collect(), "test_batch.bin", 1, 10)
    };
    let load = |files: &[String]| -> Result<Dataset<T>> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for f in files {
            let p = root.join(f);
            if !p.exists() {
                return Err(Error::MissingArtifact(p));
            }
            let (im, lb) = read_cifar_file::<T>(&p, label_bytes, true)?;
            images.extend(im);
            labels.extend(lb);
        }
        let n = labels.len();
        Dataset::new(Tensor::from_vec(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], images)?, labels, classes)
    };
    Ok(Splits { train: load(&train_files)?, test: load(&[test_file.to_string()])? })
}

/// Parameters of the procedural CIFAR-like image source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProceduralSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for ProceduralSpec {
    fn default() -> Self {
        Self { image_size: 16, num_classes: 10, train_per_class: 500, test_per_class: 100, seed: 0 }
    }
}

/// Ten object classes drawn at random position, scale, color and contrast
/// over smooth colored backgrounds with noise and distractor blobs.
pub fn procedural<T: Scalar>(spec: &ProceduralSpec) -> Result<Splits<T>> {
    if spec.num_classes == 0 || spec.num_classes > SHAPES {
        return Err(Error::InvalidArgument(format!("procedural source supports 1..={SHAPES} classes")));
    }
    if spec.image_size < 8 {
        return Err(Error::InvalidArgument("procedural images must be at least 8 pixels".into()));
    }
    let make = |per_class: usize, stream: u64| -> Result<Dataset<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let s = spec.image_size;
        let n = per_class * spec.num_classes;
        let mut images = Vec::with_capacity(n * 3 * s * s);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % spec.num_classes;
            images.extend(render(&mut rng, class, s).into_iter().map(T::lit));
            labels.push(class);
        }
        Dataset::new(Tensor::from_vec(&[n, 3, s, s], images)?, labels, spec.num_classes)
    };
    Ok(Splits { train: make(spec.train_per_class, 1)?, test: make(spec.test_per_class, 2)? })
}

const SHAPES: usize = 10;

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Coverage in `[0, 1]` of class `class`'s shape at normalized offset `(u, v)`
/// from the object center, after rotation; the shape has unit radius.
fn shape_coverage(class: usize, u: f64, v: f64) -> f64 {
    let r = (u * u + v * v).sqrt();
    let inside = |b: bool| if b { 1.0 } else { 0.0 };
    match class {
        0 => inside(r <= 1.0),
        1 => inside((0.55..=1.0).contains(&r)),
        2 => inside(u.abs() <= 0.8 && v.abs() <= 0.8),
        3 => inside(u.abs() <= 0.9 && v.abs() <= 0.9 && (u.abs() >= 0.5 || v.abs() >= 0.5)),
        4 => inside((u.abs() <= 0.28 && v.abs() <= 1.0) || (v.abs() <= 0.28 && u.abs() <= 1.0)),
        5 => inside(((u - v).abs() <= 0.4 || (u + v).abs() <= 0.4) && r <= 1.1),
        6 => inside(u.abs() <= 1.0 && v.abs() <= 1.0 && ((v + 1.0) * 2.0).floor() as i64 % 2 == 0),
        7 => inside(r <= 1.0 && u <= 0.2 && v <= 0.2 && u + v >= -0.9),
        8 => inside(v <= 0.8 && v >= -1.0 + 1.8 * u.abs()),
        _ => inside(((u - 0.55).powi(2) + v * v).sqrt() <= 0.42 || ((u + 0.55).powi(2) + v * v).sqrt() <= 0.42),
    }
}

fn render(rng: &mut ChaCha8Rng, class: usize, s: usize) -> Vec<f64> {
    let sf = s as f64;
    let mut img = vec![0.0; 3 * s * s];
    // smooth background
    let base: [f64; 3] = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let slope: f64 = rng.random_range(0.0..0.3);
    for y in 0..s {
        for x in 0..s {
            let t = ((x as f64 / sf - 0.5) * angle.cos() + (y as f64 / sf - 0.5) * angle.sin()) * slope;
            for c in 0..3 {
                img[c * s * s + y * s + x] = base[c] + t;
            }
        }
    }
    let paint = |img: &mut Vec<f64>, cls: usize, cx: f64, cy: f64, radius: f64, rot: f64, color: [f64; 3], alpha: f64| {
        let (sin, cos) = rot.sin_cos();
        for y in 0..s {
            for x in 0..s {
                // 2x2 supersampling for soft edges
                let mut cov = 0.0;
                for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                    let dx = (x as f64 + ox - cx) / radius;
                    let dy = (y as f64 + oy - cy) / radius;
                    let u = cos * dx + sin * dy;
                    let v = -sin * dx + cos * dy;
                    cov += shape_coverage(cls, u, v);
                }
                let a = alpha * cov / 4.0;
                if a > 0.0 {
                    for c in 0..3 {
                        let p = &mut img[c * s * s + y * s + x];
                        *p = (1.0 - a) * *p + a * color[c];
                    }
                }
            }
        }
    };
    // distractor: a small object of another class
    if rng.random_bool(0.6) {
        let other = (class + rng.random_range(1..SHAPES)) % SHAPES;
        let radius = sf * rng.random_range(0.1..0.16);
        let color = hue_to_rgb(rng.random_range(0.0..1.0));
        let (cx, cy) = (rng.random_range(radius..sf - radius), rng.random_range(radius..sf - radius));
        paint(&mut img, other, cx, cy, radius, rng.random_range(0.0..std::f64::consts::TAU), color, rng.random_range(0.4..0.8));
    }
    // the object: class hue most of the time, otherwise any hue
    let hue = if rng.random_bool(0.7) {
        class as f64 / SHAPES as f64 + rng.random_range(-0.06..0.06)
    } else {
        rng.random_range(0.0..1.0)
    };
    let shade: f64 = rng.random_range(0.6..1.0);
    let color = hue_to_rgb(hue).map(|v| v * shade);
    let radius = sf * rng.random_range(0.2..0.36);
    let margin = radius * 0.7;
    let (cx, cy) = (rng.random_range(margin..sf - margin), rng.random_range(margin..sf - margin));
    let rot = if rng.random_bool(0.5) { rng.random_range(-0.5..0.5) } else { 0.0 };
    let alpha = rng.random_range(0.45..1.0);
    paint(&mut img, class, cx, cy, radius, rot, color, alpha);
    // sensor noise
    let noise: f64 = rng.random_range(0.02..0.08);
    for p in img.iter_mut() {
        let g: f64 = rng.random_range(-1.0..1.0) + rng.random_range(-1.0..1.0);
        *p = (*p + noise * g).clamp(0.0, 1.0);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ProceduralSpec {
        ProceduralSpec { image_size: 16, num_classes: 10, train_per_class: 3, test_per_class: 2, seed: 4 }
    }

    #[test]
    fn procedural_is_deterministic_and_in_range() {
        let a: Splits<f32> = procedural(&small()).unwrap();
        let b: Splits<f32> = procedural(&small()).unwrap();
        assert_eq!(a.train.images, b.train.images);
        assert_eq!(a.train.len(), 30);
        assert_eq!(a.test.len(), 20);
        assert!(a.train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a.train.images, a.test.images.clone());
    }

    #[test]
    fn subset_relabels_and_caps() {
        let s: Splits<f32> = procedural(&small()).unwrap();
        let sub = s.train.subset(Some(&[3, 7]), Some(2), 0).unwrap();
        assert_eq!(sub.len(), 4);
        assert_eq!(sub.num_classes, 2);
        assert_eq!(sub.labels, vec![0, 0, 1, 1]);
    }

    #[test]
    fn labels_out_of_range_rejected() {
        let err = Dataset::new(Tensor::<f32>::zeros(&[1, 1, 2, 2]), vec![5], 3).unwrap_err();
        assert!(matches!(err, Error::ClassOutOfRange { class: 5, .. }));
    }

    #[test]
    fn normalization_fit_gives_zero_mean_unit_std() {
        let s: Splits<f64> = procedural(&small()).unwrap();
        let norm = Normalization::fit(&s.train);
        let mut d = s.train.clone();
        norm.apply(&mut d);
        let refit = Normalization::fit(&d);
        for ch in 0..3 {
            assert!(refit.mean[ch].abs() < 1e-9);
            assert!((refit.std[ch] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cifar_reader_parses_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for label in [3u8, 9] {
            bytes.push(label);
            bytes.extend(std::iter::repeat_n(255u8, CIFAR_PIXELS));
        }
        let p = dir.path().join("test_batch.bin");
        std::fs::write(&p, &bytes).unwrap();
        let (img, labels) = read_cifar_file::<f32>(&p, 1, true).unwrap();
        assert_eq!(labels, vec![3, 9]);
        assert!(img.iter().all(|&v| v == 1.0));
        std::fs::write(&p, &bytes[..100]).unwrap();
        assert!(read_cifar_file::<f32>(&p, 1, true).is_err());
    }

    #[test]
    fn missing_cifar_root_is_missing_artifact() {
        let err = load_cifar::<f32>(Path::new("/nonexistent/cifar"), false).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }
}
