//! Student training from a label store, and evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::image_ops::{crop_resize, flip_horizontal, PixelBox};
use crate::labels::{class_distance, LabelMode, LabelRecord, LabelStore, Payload, DIST_FLOOR};
use crate::mixer;
use crate::model::{BatchTrace, ModelSnapshot, SnapshotMeta};
use crate::nn::{ArchSpec, ParamKind, TraceGrad};
use crate::optim::{Adam, Schedule};
use crate::scalar::Scalar;
use crate::tensor::{softmax, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub alpha_dbr: f64,
    pub r: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// Random flips, resized crops and two random photometric/geometric ops
    /// on top of the stored mix (baseline modes only).
    pub extra_aug: bool,
    /// Also apply `extra_aug` in DBR mode, reusing the stored distances.
    pub extra_aug_dbr: bool,
    /// Evaluate on the test set every this many epochs (0: only at the end).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 1e-3,
            batch: 100,
            alpha_dbr: 1.0,
            r: 0.4,
            weight_decay: 0.01,
            schedule: Schedule::Cosine { warmup_epochs: 5 },
            extra_aug: false,
            extra_aug_dbr: false,
            eval_every: 0,
            seed: 0,
        }
    }
}

/// Student distances `-ln softmax(z)[y]` for the two classes of a pair.
pub fn student_distances<T: Scalar>(logits: &[T], y_org: usize, y_aug: usize) -> Result<(T, T)> {
    for y in [y_org, y_aug] {
        if y >= logits.len() {
            return Err(Error::ClassOutOfRange { class: y, num_classes: logits.len() });
        }
    }
    let p = softmax(logits);
    Ok((class_distance(&p, y_org), class_distance(&p, y_aug)))
}

/// Hinge part of the student objective.
pub fn sce_loss(d_s: (f64, f64), r: f64) -> f64 {
    (d_s.0 - r).max(0.0) + (d_s.1 - r).max(0.0)
}

/// `|d_org^S - d_org^T| + |d_aug^S - d_aug^T|`.
pub fn dbr_gap(d_s: (f64, f64), d_t: (f64, f64)) -> f64 {
    (d_s.0 - d_t.0).abs() + (d_s.1 - d_t.1).abs()
}

pub fn dbr_objective(d_s: (f64, f64), d_t: (f64, f64), alpha_dbr: f64, r: f64) -> f64 {
    sce_loss(d_s, r) + alpha_dbr * dbr_gap(d_s, d_t)
}

/// Target distribution for the soft baselines; `None` for DBR and OH.
fn soft_target(record: &LabelRecord, k: usize) -> Result<Option<Vec<f64>>> {
    Ok(match &record.payload {
        Payload::Soft(q) => {
            if q.len() != k {
                return Err(Error::Shape(format!("soft label of {} for {k} classes", q.len())));
            }
            let s: f64 = q.iter().map(|&v| v as f64).sum();
            Some(q.iter().map(|&v| v as f64 / s.max(f64::MIN_POSITIVE)).collect())
        }
        Payload::Compact { p_org, p_aug } => {
            let mut q = vec![0.0; k];
            let total = (*p_org as f64 + *p_aug as f64).max(f64::MIN_POSITIVE);
            q[record.y_org as usize] += *p_org as f64 / total;
            q[record.y_aug as usize] += *p_aug as f64 / total;
            Some(q)
        }
        _ => None,
    })
}

/// Baseline objective: KL for SL, renormalized two-entry CE for CL, CE for OH.
pub fn baseline_objective<T: Scalar>(mode: LabelMode, logits: &[T], record: &LabelRecord) -> Result<f64> {
    if record.payload.mode() != mode || mode == LabelMode::Dbr {
        return Err(Error::ModeMismatch { expected: mode.to_string(), found: record.payload.mode().to_string() });
    }
    let s: Vec<f64> = softmax(logits).iter().map(|p| p.as_f64()).collect();
    probs_objective(record, &s)
}

/// Baseline objective on student probabilities.
fn probs_objective(record: &LabelRecord, s: &[f64]) -> Result<f64> {
    let k = s.len();
    Ok(match record.payload.mode() {
        LabelMode::Oh => -s[record.y_org as usize].max(1e-300).ln(),
        LabelMode::Sl => soft_target(record, k)?
            .unwrap()
            .iter()
            .zip(s)
            .filter(|(q, _)| **q > 0.0)
            .map(|(q, p)| q * (q.ln() - p.max(1e-300).ln()))
            .sum::<f64>()
            .max(0.0),
        LabelMode::Cl => soft_target(record, k)?
            .unwrap()
            .iter()
            .zip(s)
            .filter(|(q, _)| **q > 0.0)
            .map(|(q, p)| -q * p.max(1e-300).ln())
            .sum(),
        LabelMode::Dbr => return Err(Error::ModeMismatch { expected: "sl, cl or oh".into(), found: "dbr".into() }),
    })
}

/// Loss and logit gradient of one record's objective.
fn record_objective<T: Scalar>(record: &LabelRecord, probs: &[T], cfg: &TransferConfig) -> Result<(f64, f64, Vec<f64>)> {
    let k = probs.len();
    let p: Vec<f64> = probs.iter().map(|v| v.as_f64()).collect();
    let mut g = vec![0.0; k];
    match &record.payload {
        Payload::Dbr { d_org, d_aug } => {
            let ys = [record.y_org as usize, record.y_aug as usize];
            let d_t = [*d_org as f64, *d_aug as f64];
            let mut sce = 0.0;
            let mut gap = 0.0;
            for (y, dt) in ys.into_iter().zip(d_t) {
                let d = class_distance(probs, y).as_f64();
                sce += (d - cfg.r).max(0.0);
                gap += (d - dt).abs();
                let mut coef = if d > cfg.r { 1.0 } else { 0.0 };
                if d > dt {
                    coef += cfg.alpha_dbr;
                } else if d < dt {
                    coef -= cfg.alpha_dbr;
                }
                if coef != 0.0 {
                    let c = coef * p[y] / (p[y] + DIST_FLOOR);
                    for (gj, pj) in g.iter_mut().zip(&p) {
                        *gj += c * pj;
                    }
                    g[y] -= c;
                }
            }
            Ok((sce + cfg.alpha_dbr * gap, gap, g))
        }
        Payload::OneHot => {
            let y = record.y_org as usize;
            g.copy_from_slice(&p);
            g[y] -= 1.0;
            Ok((-p[y].max(1e-300).ln(), 0.0, g))
        }
        Payload::Soft(_) | Payload::Compact { .. } => {
            let q = soft_target(record, k)?.unwrap();
            let loss = probs_objective(record, &p)?;
            for j in 0..k {
                g[j] = p[j] - q[j];
            }
            Ok((loss, 0.0, g))
        }
    }
}

/// Light RandAugment-style pipeline on normalized images.
fn extra_augment<T: Scalar>(rng: &mut ChaCha8Rng, image: &[T], shape: [usize; 3]) -> Vec<T> {
    let [c, h, w] = shape;
    let area = (h * w) as f64;
    let target = area * rng.random_range(0.5..=1.0);
    let ratio = rng.random_range((0.75f64).ln()..=(4.0f64 / 3.0).ln()).exp();
    let bh = ((target / ratio).sqrt().round() as usize).clamp(1, h);
    let bw = ((target * ratio).sqrt().round() as usize).clamp(1, w);
    let region = PixelBox::new(rng.random_range(0..=h - bh), rng.random_range(0..=w - bw), bh, bw);
    let mut out = crop_resize(image, c, h, w, region, h, w);
    if rng.random_bool(0.5) {
        out = flip_horizontal(&out, c, h, w);
    }
    for _ in 0..2 {
        match rng.random_range(0..5) {
            0 => {}
            1 => {
                let shift = T::lit(rng.random_range(-0.3..0.3));
                out.iter_mut().for_each(|v| *v += shift);
            }
            2 => {
                let f = T::lit(rng.random_range(0.7..1.3));
                for ch in 0..c {
                    let plane = &mut out[ch * h * w..(ch + 1) * h * w];
                    let mean = plane.iter().copied().sum::<T>() / T::lit(area);
                    plane.iter_mut().for_each(|v| *v = mean + (*v - mean) * f);
                }
            }
            op => {
                let d = rng.random_range(-2i64..=2);
                let src = out.clone();
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let (sy, sx) = if op == 3 { (y as i64, x as i64 - d) } else { (y as i64 - d, x as i64) };
                            let (sy, sx) = (sy.clamp(0, h as i64 - 1) as usize, sx.clamp(0, w as i64 - 1) as usize);
                            out[ch * h * w + y * w + x] = src[ch * h * w + sy * w + sx];
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Mean `L_dbr` over the epoch (DBR mode).
    pub dbr_gap: f64,
    pub test_accuracy: Option<f64>,
}

pub struct StudentRun<T> {
    pub snapshot: ModelSnapshot<T>,
    pub history: Vec<EpochMetrics>,
}

fn check_store<T>(store: &LabelStore, images: &[Vec<T>], mode: LabelMode, num_classes: usize) -> Result<()> {
    if store.mode != mode {
        return Err(Error::ModeMismatch { expected: mode.to_string(), found: store.mode.to_string() });
    }
    if store.records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if store.num_classes != num_classes {
        return Err(Error::Shape(format!("store has {} classes, student {num_classes}", store.num_classes)));
    }
    for r in &store.records {
        for idx in [r.org_idx as usize, r.aug_idx as usize] {
            if idx >= images.len() {
                return Err(Error::DanglingIndex { index: idx, len: images.len() });
            }
        }
        for y in [r.y_org as usize, r.y_aug as usize] {
            if y >= num_classes {
                return Err(Error::ClassOutOfRange { class: y, num_classes });
            }
        }
        if r.payload.mode() != mode {
            return Err(Error::ModeMismatch { expected: mode.to_string(), found: r.payload.mode().to_string() });
        }
    }
    Ok(())
}

fn mixed_batch<T: Scalar>(store: &LabelStore, ids: &[usize], images: &[Vec<T>], shape: [usize; 3]) -> Result<Vec<Vec<T>>> {
    ids.iter()
        .map(|&i| {
            let r = &store.records[i];
            mixer::apply(&r.spec, &images[r.org_idx as usize], &images[r.aug_idx as usize], shape)
        })
        .collect()
}

/// Architecture, input geometry and optional initialization of a student.
pub struct StudentSetup<'a, T> {
    pub arch: &'a ArchSpec,
    pub input_shape: [usize; 3],
    pub normalization: &'a Normalization,
    /// Start from these weights instead of a fresh initialization.
    pub init: Option<&'a ModelSnapshot<T>>,
    pub test: Option<&'a Dataset<T>>,
}

/// Trains a student on the stored mixes of `images` with the store's objective.
pub fn train_student<T: Scalar>(
    store: &LabelStore,
    images: &[Vec<T>],
    mode: LabelMode,
    setup: &StudentSetup<'_, T>,
    cfg: &TransferConfig,
    mut metrics: Option<&mut dyn Write>,
) -> Result<StudentRun<T>> {
    let StudentSetup { arch, input_shape: shape, normalization, init, test } = *setup;
    let k = store.num_classes;
    check_store(store, images, mode, k)?;
    if images.iter().any(|im| im.len() != shape.iter().product::<usize>()) {
        return Err(Error::Shape("synthetic images do not match the student input".into()));
    }
    let mut net = match init {
        Some(m) if m.arch == *arch && m.input_shape() == shape && m.num_classes() == k => m.net.clone(),
        Some(_) => return Err(Error::InvalidArgument("initial snapshot does not match the student".into())),
        None => arch.build(shape, k, cfg.seed)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x57D3_0E47);
    let mut opt = Adam::<T>::adamw(cfg.lr, cfg.weight_decay);
    let decay: Vec<bool> = net.params().iter().map(|(_, kind)| *kind == ParamKind::Weight).collect();
    let augment = cfg.extra_aug && (mode != LabelMode::Dbr || cfg.extra_aug_dbr);
    let mut order: Vec<usize> = (0..store.records.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let batch = cfg.batch.max(2);
    let meta = |acc: Option<f64>| SnapshotMeta { seed: cfg.seed, epochs: cfg.epochs, train_accuracy: None, test_accuracy: acc, dataset: String::new() };

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * cfg.schedule.factor(epoch, cfg.epochs);
        opt.set_lr(lr);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut gap_sum, mut seen) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 && net.num_bn_layers() > 0 {
                continue;
            }
            let mut mixes = mixed_batch(store, chunk, images, shape)?;
            if augment {
                for m in mixes.iter_mut() {
                    *m = extra_augment(&mut rng, m, shape);
                }
            }
            let views: Vec<&[T]> = mixes.iter().map(|m| m.as_slice()).collect();
            let trace = BatchTrace::from_pass(net.forward_train(&Tensor::stack(&views, &shape)?)?);
            let n = chunk.len();
            let mut g = Tensor::zeros(trace.pass.logits.shape());
            for (row, &ri) in chunk.iter().enumerate() {
                let (l, gap, gl) = record_objective(&store.records[ri], trace.probs(row), cfg)?;
                loss_sum += l;
                gap_sum += gap;
                for (dst, v) in g.item_mut(row).iter_mut().zip(gl) {
                    *dst = T::lit(v / n as f64);
                }
            }
            seen += n;
            let back = net.backward(&trace.pass, &TraceGrad { logits: g, bn_stats: vec![] }, false, true);
            let grads = back.params.expect("parameter gradients requested");
            opt.step(&mut net.params_mut(), &grads, &decay);
        }
        let last = epoch + 1 == cfg.epochs;
        let test_accuracy = match test {
            Some(t) if last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) => {
                let snap = ModelSnapshot { arch: arch.clone(), net: net.clone(), normalization: normalization.clone(), meta: meta(None) };
                Some(evaluate(&snap, t)?)
            }
            _ => None,
        };
        let m = EpochMetrics {
            epoch,
            lr,
            loss: loss_sum / seen.max(1) as f64,
            dbr_gap: gap_sum / seen.max(1) as f64,
            test_accuracy,
        };
        if let Some(sink) = metrics.as_deref_mut() {
            let line = serde_json::to_string(&m)?;
            writeln!(sink, "{line}").map_err(|e| Error::io("<metrics>", e))?;
        }
        history.push(m);
    }
    let mut snapshot = ModelSnapshot { arch: arch.clone(), net, normalization: normalization.clone(), meta: meta(None) };
    snapshot.meta.test_accuracy = match (history.last(), test) {
        (Some(h), _) => h.test_accuracy,
        (None, Some(t)) => Some(evaluate(&snapshot, t)?),
        (None, None) => None,
    };
    Ok(StudentRun { snapshot, history })
}

/// Mean `L_dbr` of `model` over a DBR store, with eval-mode forwards.
pub fn mean_dbr_gap<T: Scalar>(model: &ModelSnapshot<T>, store: &LabelStore, images: &[Vec<T>]) -> Result<f64> {
    check_store(store, images, LabelMode::Dbr, model.num_classes())?;
    let mut total = 0.0;
    let ids: Vec<usize> = (0..store.records.len()).collect();
    for chunk in ids.chunks(256) {
        let mixes = mixed_batch(store, chunk, images, model.input_shape())?;
        let views: Vec<&[T]> = mixes.iter().map(|m| m.as_slice()).collect();
        let trace = model.forward(&Tensor::stack(&views, &model.input_shape())?)?;
        for (row, &ri) in chunk.iter().enumerate() {
            let r = &store.records[ri];
            let (a, b) = student_distances(trace.logits(row), r.y_org as usize, r.y_aug as usize)?;
            if let Payload::Dbr { d_org, d_aug } = r.payload {
                total += dbr_gap((a.as_f64(), b.as_f64()), (d_org as f64, d_aug as f64));
            }
        }
    }
    Ok(total / store.records.len() as f64)
}

/// Top-1 accuracy, evaluated in batches of 256.
pub fn evaluate<T: Scalar>(model: &ModelSnapshot<T>, data: &Dataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let shape = data.image_shape();
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let views: Vec<&[T]> = chunk.iter().map(|&i| data.image(i)).collect();
        let pred = model.predict(&Tensor::stack(&views, &shape)?)?;
        correct += chunk.iter().zip(pred).filter(|(&i, p)| data.labels[i] == *p).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// `(DBR - OH) / (SL - OH)`; undefined when SL and OH tie.
pub fn recover_rate(dbr: f64, one_hot: f64, soft_label: f64) -> Option<f64> {
    let denom = soft_label - one_hot;
    (denom.abs() > f64::EPSILON).then(|| (dbr - one_hot) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixer::{AugmentSpec, MixMethod};
    use proptest::prelude::*;

    fn rec(payload: Payload, y_org: u16, y_aug: u16) -> LabelRecord {
        LabelRecord { org_idx: 0, aug_idx: 1, y_org, y_aug, spec: AugmentSpec::sample(MixMethod::Mixup, 4, 4, 0), payload }
    }

    #[test]
    fn student_distance_examples() {
        let (a, _) = student_distances(&[60.0f64, 0.0, 0.0], 0, 1).unwrap();
        assert!(a < 1e-11);
        let (a, b) = student_distances(&[0.3f64; 10], 2, 5).unwrap();
        assert!((a - 10f64.ln()).abs() < 1e-9 && (b - 10f64.ln()).abs() < 1e-9);
        let z = [0.3f64, -1.2, 2.0, 0.7];
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        let (a, b) = student_distances(&z, 1, 3).unwrap();
        assert!((a + (e[1] / s).ln()).abs() < 1e-5 && (b + (e[3] / s).ln()).abs() < 1e-5);
        assert!(student_distances(&z, 4, 0).is_err());
    }

    #[test]
    fn dbr_objective_examples() {
        assert_eq!(dbr_objective((0.2, 0.3), (0.2, 0.3), 1.0, 0.4), 0.0);
        assert!((dbr_objective((0.9, 0.1), (0.5, 0.3), 1.0, 0.4) - 1.1).abs() < 1e-12);
        assert!((sce_loss((0.9, 0.1), 0.4) - 0.5).abs() < 1e-12);
        assert_eq!(dbr_objective((0.9, 0.1), (0.0, 0.0), 0.0, 0.4), sce_loss((0.9, 0.1), 0.4));
    }

    #[test]
    fn baseline_examples() {
        let q = vec![0.2f32, 0.5, 0.3];
        let z: Vec<f64> = q.iter().map(|&v| (v as f64).ln()).collect();
        assert!(baseline_objective(LabelMode::Sl, &z, &rec(Payload::Soft(q), 1, 2)).unwrap().abs() < 1e-7);
        assert!(baseline_objective(LabelMode::Oh, &[50.0f64, 0.0, 0.0], &rec(Payload::OneHot, 0, 1)).unwrap() < 1e-12);
        let z = [(2.0f64 / 3.0).ln(), (1.0f64 / 3.0).ln(), -80.0];
        let cl = baseline_objective(LabelMode::Cl, &z, &rec(Payload::Compact { p_org: 0.6, p_aug: 0.3 }, 0, 1)).unwrap();
        assert!((cl - 0.6365).abs() < 1e-4, "{cl}");
        assert!(baseline_objective(LabelMode::Sl, &z, &rec(Payload::OneHot, 0, 1)).is_err());
    }

    #[test]
    fn recover_rate_formula() {
        assert_eq!(recover_rate(0.5, 0.3, 0.7), Some((0.5 - 0.3) / (0.7 - 0.3)));
        assert_eq!(recover_rate(0.5, 0.4, 0.4), None);
    }

    fn objective_fd(payload: Payload, z: &[f64]) {
        let cfg = TransferConfig { alpha_dbr: 0.7, r: 0.4, ..Default::default() };
        let r = rec(payload, 0, 2);
        let f = |z: &[f64]| record_objective(&r, &softmax(z), &cfg).unwrap().0;
        let (_, _, g) = record_objective(&r, &softmax(z), &cfg).unwrap();
        for j in 0..z.len() {
            let mut zp = z.to_vec();
            zp[j] += 1e-6;
            let mut zm = z.to_vec();
            zm[j] -= 1e-6;
            let fd = (f(&zp) - f(&zm)) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-5, "{:?} {j}: {fd} vs {}", r.payload, g[j]);
        }
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let z = [0.3, -0.4, 1.1, 0.2];
        objective_fd(Payload::Dbr { d_org: 0.5, d_aug: 2.5 }, &z);
        objective_fd(Payload::Soft(vec![0.1, 0.2, 0.3, 0.4]), &z);
        objective_fd(Payload::Compact { p_org: 0.6, p_aug: 0.3 }, &z);
        objective_fd(Payload::OneHot, &z);
    }

    proptest! {
        #[test]
        fn objectives_are_non_negative(z in prop::collection::vec(-5.0f64..5.0, 5), dt in (0.0f64..5.0, 0.0f64..5.0), q in prop::collection::vec(0.01f32..1.0, 5)) {
            let cfg = TransferConfig::default();
            for payload in [Payload::Dbr { d_org: dt.0 as f32, d_aug: dt.1 as f32 }, Payload::Soft(q.clone()), Payload::Compact { p_org: q[0], p_aug: q[1] }, Payload::OneHot] {
                let (l, _, _) = record_objective(&rec(payload, 1, 3), &softmax(&z), &cfg).unwrap();
                prop_assert!(l >= -1e-12);
            }
        }
    }
}
