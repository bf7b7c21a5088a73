//! Classifier snapshots: forward traces, confidences, input gradients,
//! teacher training and the versioned snapshot file.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::image_ops::flip_horizontal;
use crate::nn::{ArchSpec, BnBatchStats, ForwardPass, Mode, Network, ParamKind, TraceGrad};
use crate::optim::{Adam, Schedule};
use crate::scalar::Scalar;
use crate::tensor::{argmax, softmax, Tensor};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub seed: u64,
    pub epochs: usize,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub dataset: String,
}

/// A trained classifier with its normalization constants.
#[derive(Clone, Debug)]
pub struct ModelSnapshot<T> {
    pub arch: ArchSpec,
    pub net: Network<T>,
    pub normalization: Normalization,
    pub meta: SnapshotMeta,
}

/// Forward results for a batch.
pub struct BatchTrace<T> {
    pub pass: ForwardPass<T>,
    /// Row-wise softmax of the logits.
    pub probs: Tensor<T>,
}

/// Forward results for one image of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    pub logits: Vec<T>,
    pub probs: Vec<T>,
    /// `F x h_f x w_f` final-block activations.
    pub feature_maps: Tensor<T>,
    /// Batch statistics per BatchNorm layer for the batch this image was in.
    pub batch_bn: Vec<BnBatchStats<T>>,
}

impl<T: Scalar> BatchTrace<T> {
    pub fn from_pass(pass: ForwardPass<T>) -> Self {
        let n = pass.logits.shape()[0];
        let k = pass.logits.shape()[1];
        let mut probs = Tensor::zeros(&[n, k]);
        for i in 0..n {
            probs.item_mut(i).copy_from_slice(&softmax(pass.logits.item(i)));
        }
        Self { pass, probs }
    }

    pub fn len(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn logits(&self, i: usize) -> &[T] {
        self.pass.logits.item(i)
    }

    pub fn probs(&self, i: usize) -> &[T] {
        self.probs.item(i)
    }

    pub fn image(&self, i: usize) -> ForwardTrace<T> {
        let fshape = &self.pass.features.shape()[1..];
        ForwardTrace {
            logits: self.logits(i).to_vec(),
            probs: self.probs(i).to_vec(),
            feature_maps: Tensor::from_vec(fshape, self.pass.features.item(i).to_vec()).unwrap(),
            batch_bn: self.pass.bn_stats.clone(),
        }
    }
}

/// A differentiable scalar function of a batch trace.
pub trait TraceLoss<T: Scalar> {
    /// Loss value and its gradient with respect to logits and BN batch statistics.
    fn value_and_grad(&self, trace: &BatchTrace<T>) -> Result<(T, TraceGrad<T>)>;
}

/// Gradient of `sum_i w_i * logits[i, class_i]`; used by tests and probes.
pub struct LogitLoss {
    pub weights: Vec<f64>,
    pub classes: Vec<usize>,
}

impl<T: Scalar> TraceLoss<T> for LogitLoss {
    fn value_and_grad(&self, trace: &BatchTrace<T>) -> Result<(T, TraceGrad<T>)> {
        let mut g = Tensor::zeros(trace.pass.logits.shape());
        let mut v = T::zero();
        for i in 0..trace.len() {
            let w = T::lit(self.weights[i]);
            v += w * trace.logits(i)[self.classes[i]];
            g.item_mut(i)[self.classes[i]] = w;
        }
        Ok((v, TraceGrad { logits: g, bn_stats: vec![] }))
    }
}

/// Cross-entropy of the softmax against integer targets, averaged over the batch.
pub struct CrossEntropy<'a> {
    pub targets: &'a [usize],
}

impl<T: Scalar> TraceLoss<T> for CrossEntropy<'_> {
    fn value_and_grad(&self, trace: &BatchTrace<T>) -> Result<(T, TraceGrad<T>)> {
        let n = trace.len();
        if self.targets.len() != n {
            return Err(Error::Shape(format!("{} targets for batch of {n}", self.targets.len())));
        }
        let inv = T::one() / T::lit(n as f64);
        let mut g = Tensor::zeros(trace.pass.logits.shape());
        let mut total = T::zero();
        for i in 0..n {
            let y = self.targets[i];
            let p = trace.probs(i);
            total -= p[y].max(T::lit(1e-30)).ln();
            for (gj, &pj) in g.item_mut(i).iter_mut().zip(p) {
                *gj = pj * inv;
            }
            g.item_mut(i)[y] -= inv;
        }
        Ok((total * inv, TraceGrad { logits: g, bn_stats: vec![] }))
    }
}

impl<T: Scalar> ModelSnapshot<T> {
    pub fn num_classes(&self) -> usize {
        self.net.num_classes()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.net.input_shape
    }

    pub fn feature_channels(&self) -> usize {
        self.net.feature_channels()
    }

    /// Final-layer class weights, row-major `K x F`.
    pub fn classifier_w(&self) -> &[T] {
        &self.net.head.weight
    }

    pub fn class_weights(&self, class: usize) -> &[T] {
        let f = self.feature_channels();
        &self.net.head.weight[class * f..(class + 1) * f]
    }

    /// Running `(mean, var)` per BatchNorm layer.
    pub fn bn_stats(&self) -> Vec<(&[T], &[T])> {
        self.net
            .batch_norms()
            .into_iter()
            .map(|b| (b.running_mean.as_slice(), b.running_var.as_slice()))
            .collect()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.net.num_bn_layers() > 0
    }

    /// Eval-mode forward pass.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<BatchTrace<T>> {
        Ok(BatchTrace::from_pass(self.net.forward(batch)?))
    }

    pub fn forward_image(&self, image: &[T]) -> Result<ForwardTrace<T>> {
        let batch = Tensor::stack(&[image], &self.input_shape())?;
        Ok(self.forward(&batch)?.image(0))
    }

    /// Highest predicted probability for a single image.
    pub fn confidence(&self, image: &[T]) -> Result<T> {
        let t = self.forward_image(image)?;
        Ok(max_prob(&t.probs))
    }

    /// Per-image confidences, batched.
    pub fn confidences(&self, images: &Tensor<T>) -> Result<Vec<T>> {
        let trace = self.forward(images)?;
        Ok((0..trace.len()).map(|i| max_prob(trace.probs(i))).collect())
    }

    /// Exact reverse-mode gradient of `loss` with respect to the input pixels.
    pub fn input_gradient(&self, batch: &Tensor<T>, loss: &impl TraceLoss<T>) -> Result<(T, Tensor<T>)> {
        let trace = self.forward(batch)?;
        let (value, grad) = loss.value_and_grad(&trace)?;
        if grad.logits.shape() != trace.pass.logits.shape() {
            return Err(Error::Shape("loss gradient does not match logits".into()));
        }
        let back = self.net.backward(&trace.pass, &grad, true, false);
        Ok((value, back.input.expect("input gradient requested")))
    }

    pub fn predict(&self, batch: &Tensor<T>) -> Result<Vec<usize>> {
        let trace = self.forward(batch)?;
        Ok((0..trace.len()).map(|i| argmax(trace.logits(i))).collect())
    }
}

pub fn max_prob<T: Scalar>(probs: &[T]) -> T {
    probs.iter().copied().fold(T::zero(), T::max)
}

/// Optimizer settings for supervised training on real data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Random shifts (pad 2) and horizontal flips.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 64, lr: 2e-3, weight_decay: 5e-4, warmup_epochs: 1, augment: true }
    }
}

fn shift_and_flip<T: Scalar>(rng: &mut ChaCha8Rng, image: &[T], shape: [usize; 3]) -> Vec<T> {
    let [c, h, w] = shape;
    let dy = rng.random_range(-2i64..=2) as isize;
    let dx = rng.random_range(-2i64..=2) as isize;
    let mut out = vec![T::zero(); image.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
            for x in 0..w {
                let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                out[ch * h * w + y * w + x] = image[ch * h * w + sy * w + sx];
            }
        }
    }
    if rng.random_bool(0.5) {
        out = flip_horizontal(&out, c, h, w);
    }
    out
}

/// Trains a classifier on an already normalized dataset.
pub fn train_teacher<T: Scalar>(
    train: &Dataset<T>,
    test: Option<&Dataset<T>>,
    arch: &ArchSpec,
    cfg: &TrainConfig,
    normalization: Normalization,
    seed: u64,
) -> Result<ModelSnapshot<T>> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(&bad) = train.labels.iter().find(|&&l| l >= train.num_classes) {
        return Err(Error::ClassOutOfRange { class: bad, num_classes: train.num_classes });
    }
    if !arch.has_batch_norm() {
        log::warn!("architecture `{}` has no BatchNorm layers; refinement will reject it", arch.id);
    }
    let shape = train.image_shape();
    let mut net: Network<T> = arch.build(shape, train.num_classes, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7EAC_4E25);
    let mut opt = Adam::adamw(cfg.lr, cfg.weight_decay);
    let decay: Vec<bool> = net.params().iter().map(|(_, k)| *k == ParamKind::Weight).collect();
    let schedule = Schedule::Cosine { warmup_epochs: cfg.warmup_epochs };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batch = cfg.batch_size.max(2);
    for epoch in 0..cfg.epochs {
        opt.set_lr(cfg.lr * schedule.factor(epoch, cfg.epochs));
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            // BatchNorm needs at least two samples for a batch variance
            if chunk.len() < 2 && net.num_bn_layers() > 0 {
                continue;
            }
            let items: Vec<Vec<T>> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        shift_and_flip(&mut rng, train.image(i), shape)
                    } else {
                        train.image(i).to_vec()
                    }
                })
                .collect();
            let views: Vec<&[T]> = items.iter().map(|v| v.as_slice()).collect();
            let x = Tensor::stack(&views, &shape)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let pass = net.forward_train(&x)?;
            let trace = BatchTrace::from_pass(pass);
            let (_, grad) = CrossEntropy { targets: &targets }.value_and_grad(&trace)?;
            let back = net.backward(&trace.pass, &grad, false, true);
            let grads = back.params.expect("parameter gradients requested");
            let mut params = net.params_mut();
            opt.step(&mut params, &grads, &decay);
        }
    }
    let mut snap = ModelSnapshot {
        arch: arch.clone(),
        net,
        normalization,
        meta: SnapshotMeta { seed, epochs: cfg.epochs, ..Default::default() },
    };
    snap.meta.train_accuracy = Some(crate::transfer::evaluate(&snap, train)?);
    if let Some(test) = test {
        snap.meta.test_accuracy = Some(crate::transfer::evaluate(&snap, test)?);
    }
    Ok(snap)
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"NRSN";
const SNAPSHOT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    arch: ArchSpec,
    dtype: String,
    input_shape: [usize; 3],
    num_classes: usize,
    normalization: Normalization,
    meta: SnapshotMeta,
    param_lengths: Vec<usize>,
    bn_channels: Vec<usize>,
}

impl<T: Scalar> ModelSnapshot<T> {
    /// Serializes to the versioned snapshot container:
    /// magic, version `u16`, header length `u32`, JSON header, parameters,
    /// running statistics (all little-endian), CRC32 of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.net.params();
        let bns = self.net.batch_norms();
        let header = SnapshotHeader {
            arch: self.arch.clone(),
            dtype: T::DTYPE.to_string(),
            input_shape: self.input_shape(),
            num_classes: self.num_classes(),
            normalization: self.normalization.clone(),
            meta: self.meta.clone(),
            param_lengths: params.iter().map(|(p, _)| p.len()).collect(),
            bn_channels: bns.iter().map(|b| b.channels).collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (p, _) in &params {
            out.extend(T::to_le_bytes_vec(p));
        }
        for b in &bns {
            out.extend(T::to_le_bytes_vec(&b.running_mean));
            out.extend(T::to_le_bytes_vec(&b.running_var));
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = verify_crc(bytes)?;
        if body.len() < 10 || &body[..4] != SNAPSHOT_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u16::from_le_bytes([body[4], body[5]]);
        if version != SNAPSHOT_VERSION {
            return Err(Error::Version { found: version, expected: SNAPSHOT_VERSION });
        }
        let hlen = u32::from_le_bytes(body[6..10].try_into().unwrap()) as usize;
        let header_end = 10 + hlen;
        if body.len() < header_end {
            return Err(Error::Corrupt("snapshot header truncated".into()));
        }
        let header: SnapshotHeader = serde_json::from_slice(&body[10..header_end])?;
        if header.dtype != T::DTYPE {
            return Err(Error::Corrupt(format!("snapshot holds {} weights, requested {}", header.dtype, T::DTYPE)));
        }
        let mut net: Network<T> = header.arch.build(header.input_shape, header.num_classes, 0)?;
        let width = std::mem::size_of::<T>();
        let mut cursor = header_end;
        let mut take = |n: usize| -> Result<Vec<T>> {
            let end = cursor + n * width;
            if end > body.len() {
                return Err(Error::Corrupt("snapshot payload truncated".into()));
            }
            let v = T::from_le_bytes_slice(&body[cursor..end]);
            cursor = end;
            Ok(v)
        };
        {
            let mut params = net.params_mut();
            if params.len() != header.param_lengths.len() {
                return Err(Error::Corrupt("parameter layout does not match architecture".into()));
            }
            for (p, &len) in params.iter_mut().zip(&header.param_lengths) {
                if p.len() != len {
                    return Err(Error::Corrupt("parameter length does not match architecture".into()));
                }
                **p = take(len)?;
            }
        }
        let mut running = Vec::new();
        for &c in &header.bn_channels {
            running.push((take(c)?, take(c)?));
        }
        set_running_stats(&mut net, running)?;
        if cursor != body.len() {
            return Err(Error::Corrupt("trailing bytes in snapshot".into()));
        }
        Ok(Self { arch: header.arch, net, normalization: header.normalization, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn cast<U: Scalar>(&self) -> ModelSnapshot<U> {
        let mut net: Network<U> = self.arch.build(self.input_shape(), self.num_classes(), 0).expect("same architecture");
        for (dst, (src, _)) in net.params_mut().into_iter().zip(self.net.params()) {
            *dst = src.iter().map(|v| U::lit(v.as_f64())).collect();
        }
        let running = self
            .net
            .batch_norms()
            .iter()
            .map(|b| {
                (
                    b.running_mean.iter().map(|v| U::lit(v.as_f64())).collect(),
                    b.running_var.iter().map(|v| U::lit(v.as_f64())).collect(),
                )
            })
            .collect();
        set_running_stats(&mut net, running).expect("same architecture");
        ModelSnapshot { arch: self.arch.clone(), net, normalization: self.normalization.clone(), meta: self.meta.clone() }
    }
}

fn set_running_stats<T: Scalar>(net: &mut Network<T>, running: Vec<(Vec<T>, Vec<T>)>) -> Result<()> {
    fn visit<T: Scalar>(layers: &mut [crate::nn::Layer<T>], it: &mut impl Iterator<Item = (Vec<T>, Vec<T>)>) -> Result<()> {
        for layer in layers {
            match layer {
                crate::nn::Layer::BatchNorm(b) => {
                    let (m, v) = it.next().ok_or_else(|| Error::Corrupt("missing running statistics".into()))?;
                    if m.len() != b.channels || v.len() != b.channels {
                        return Err(Error::Corrupt("running statistics length mismatch".into()));
                    }
                    b.running_mean = m;
                    b.running_var = v;
                }
                crate::nn::Layer::Residual { main, shortcut } => {
                    visit(main, it)?;
                    visit(shortcut, it)?;
                }
                _ => {}
            }
        }
        Ok(())
    }
    let mut it = running.into_iter();
    visit(&mut net.body, &mut it)?;
    if it.next().is_some() {
        return Err(Error::Corrupt("extra running statistics".into()));
    }
    Ok(())
}

/// Splits off and checks the trailing CRC32, returning the covered body.
pub(crate) fn verify_crc(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 {
        return Err(Error::Corrupt("file shorter than its checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(body)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Mode a snapshot is used in; teachers are always frozen in eval mode.
pub fn eval_mode() -> Mode {
    Mode::Eval
}
