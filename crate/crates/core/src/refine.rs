//! Non-critical region refinement.
//!
//! Each synthetic image is optimized on `L_C = CE + a_bn * L_bn + a_lr * L_lr`
//! with a per-pixel weight `M` taken from its initial CAM. Pixels with `M = 0`
//! receive a zero gradient and a zero step, so they never change.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cam::{image_mask, MaskMap};
use crate::cidd::SyntheticRecord;
use crate::error::{Error, Result};
use crate::labels::{class_distance, DIST_FLOOR};
use crate::mixer::{self, AugmentSpec, MixMethod};
use crate::model::{BatchTrace, ModelSnapshot};
use crate::nn::TraceGrad;
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartnerPolicy {
    #[default]
    Any,
    SameClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub iterations: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub batch: usize,
    pub alpha_bn: f64,
    pub alpha_lr: f64,
    pub r: f64,
    pub epsilon: f64,
    pub mix: MixMethod,
    pub partner: PartnerPolicy,
    /// Drop the BatchNorm statistics term.
    pub no_bn_loss: bool,
    /// Replace the CAM mask by a constant `epsilon` (whole-image inversion).
    pub uniform_mask: bool,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 0.05,
            betas: (0.5, 0.9),
            batch: 100,
            alpha_bn: 10.0,
            alpha_lr: 1.0,
            r: 0.4,
            epsilon: 0.5,
            mix: MixMethod::Cutmix,
            partner: PartnerPolicy::Any,
            no_bn_loss: false,
            uniform_mask: false,
            seed: 0,
        }
    }
}

/// Loss weights shared by the value and gradient paths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha_bn: f64,
    pub alpha_lr: f64,
    pub r: f64,
}

impl RefineConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { alpha_bn: if self.no_bn_loss { 0.0 } else { self.alpha_bn }, alpha_lr: self.alpha_lr, r: self.r }
    }
}

/// `sum_l ||mu_l(x) - mu_l|| + ||var_l(x) - var_l||` over a batch trace.
pub fn bn_loss<T: Scalar>(trace: &BatchTrace<T>, model: &ModelSnapshot<T>) -> Result<T> {
    Ok(bn_loss_and_grad(trace, model, 1.0)?.0)
}

fn l2_diff<T: Scalar>(a: &[T], b: &[T]) -> (T, Vec<T>) {
    let diff: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let norm = diff.iter().map(|&d| d * d).sum::<T>().sqrt();
    let grad = if norm > T::zero() { diff.iter().map(|&d| d / norm).collect() } else { vec![T::zero(); diff.len()] };
    (norm, grad)
}

fn bn_loss_and_grad<T: Scalar>(trace: &BatchTrace<T>, model: &ModelSnapshot<T>, scale: f64) -> Result<(T, Vec<Option<(Vec<T>, Vec<T>)>>)> {
    if !model.has_batch_norm() {
        return Err(Error::MissingBatchNorm(model.arch.id.clone()));
    }
    if trace.len() < 2 {
        return Err(Error::InvalidArgument("BatchNorm statistics need a batch of at least 2".into()));
    }
    let s = T::lit(scale);
    let mut total = T::zero();
    let mut grads = Vec::new();
    for (batch, (mean, var)) in trace.pass.bn_stats.iter().zip(model.bn_stats()) {
        let (nm, gm) = l2_diff(&batch.mean, mean);
        let (nv, gv) = l2_diff(&batch.var, var);
        total += nm + nv;
        grads.push(Some((gm.into_iter().map(|g| g * s).collect(), gv.into_iter().map(|g| g * s).collect())));
    }
    Ok((total, grads))
}

/// Hinge on the two teacher distances: `max(0, d_org - r) + max(0, d_aug - r)`.
pub fn hinge_pair(d_org: f64, d_aug: f64, r: f64) -> f64 {
    (d_org - r).max(0.0) + (d_aug - r).max(0.0)
}

/// Mean cross-entropy against `y_org` plus `alpha_bn * L_bn` for a batch of originals.
pub fn org_loss<T: Scalar>(model: &ModelSnapshot<T>, x_org: &Tensor<T>, y_org: &[usize], alpha_bn: f64) -> Result<f64> {
    let trace = model.forward(x_org)?;
    let n = trace.len();
    let ce = (0..n).map(|i| -trace.probs(i)[y_org[i]].as_f64().max(1e-30).ln()).sum::<f64>() / n as f64;
    let bn = if alpha_bn != 0.0 { bn_loss(&trace, model)?.as_f64() } else { 0.0 };
    Ok(ce + alpha_bn * bn)
}

/// Label-refinement hinge of the teacher on one mixed image.
pub fn lr_loss<T: Scalar>(model: &ModelSnapshot<T>, x_mix: &[T], y_org: usize, y_aug: usize, r: f64) -> Result<f64> {
    let probs = model.forward_image(x_mix)?.probs;
    Ok(hinge_pair(class_distance(&probs, y_org).as_f64(), class_distance(&probs, y_aug).as_f64(), r))
}

/// `x - mask * step` with one mask value per pixel, broadcast over channels.
pub fn masked_step<T: Scalar>(x: &[T], mask: &MaskMap<T>, step: &[T]) -> Result<Vec<T>> {
    let hw = mask.height * mask.width;
    if hw == 0 || x.len() % hw != 0 || step.len() != x.len() {
        return Err(Error::Shape(format!("step of {} for image of {} with {hw}-pixel mask", step.len(), x.len())));
    }
    Ok(x.iter()
        .zip(step)
        .enumerate()
        .map(|(i, (&xi, &si))| {
            let m = mask.values[i % hw];
            if m.is_zero() {
                xi
            } else {
                xi - m * si
            }
        })
        .collect())
}

/// Partner of one batch member for the current iteration.
#[derive(Clone, Debug)]
pub struct Pairing<T> {
    pub partner: usize,
    pub partner_class: usize,
    pub spec: AugmentSpec,
    /// Row of the partner inside the batch, when it is being optimized too.
    pub in_batch: Option<usize>,
    /// Partner pixels when it is outside the batch (held fixed).
    pub image: Vec<T>,
}

/// Value and input gradient of the batch objective.
pub struct LcEval<T> {
    /// `mean CE + a_bn * L_bn + a_lr * mean L_lr`; `grad` is its gradient.
    pub total: T,
    /// Per-record `CE_i + a_bn * L_bn + a_lr * L_lr_i`.
    pub per_record: Vec<f64>,
    pub bn: f64,
    pub grad: Tensor<T>,
}

fn partner_view<'a, T>(x: &'a Tensor<T>, p: &'a Pairing<T>) -> &'a [T]
where
    T: Scalar,
{
    match p.in_batch {
        Some(row) => x.item(row),
        None => &p.image,
    }
}

/// Evaluates the refinement objective for a batch of originals and its exact
/// gradient, including the path through partners that sit in the same batch.
pub fn lc_loss<T: Scalar>(
    model: &ModelSnapshot<T>,
    x: &Tensor<T>,
    classes: &[usize],
    pairings: &[Pairing<T>],
    w: LossWeights,
) -> Result<LcEval<T>> {
    let n = x.shape()[0];
    let shape = model.input_shape();
    if classes.len() != n || pairings.len() != n {
        return Err(Error::Shape("classes and pairings must match the batch".into()));
    }
    let inv = 1.0 / n as f64;

    // originals: cross-entropy and BatchNorm statistics
    let org = model.forward(x)?;
    let mut g_logits = Tensor::zeros(org.pass.logits.shape());
    let mut ce = vec![0.0; n];
    for i in 0..n {
        let p = org.probs(i);
        ce[i] = -p[classes[i]].as_f64().max(1e-30).ln();
        let gi = g_logits.item_mut(i);
        for (g, &pj) in gi.iter_mut().zip(p) {
            *g = pj * T::lit(inv);
        }
        gi[classes[i]] -= T::lit(inv);
    }
    let (bn, bn_grads) = if w.alpha_bn != 0.0 {
        let (v, g) = bn_loss_and_grad(&org, model, w.alpha_bn)?;
        (v.as_f64(), g)
    } else {
        (0.0, Vec::new())
    };
    let mut grad = model
        .net
        .backward(&org.pass, &TraceGrad { logits: g_logits, bn_stats: bn_grads }, true, false)
        .input
        .expect("input gradient requested");

    // mixed images: label-refinement hinge
    let mut lr = vec![0.0; n];
    if w.alpha_lr != 0.0 {
        let mixes: Vec<Vec<T>> = (0..n)
            .map(|i| mixer::apply(&pairings[i].spec, x.item(i), partner_view(x, &pairings[i]), shape))
            .collect::<Result<_>>()?;
        let views: Vec<&[T]> = mixes.iter().map(|m| m.as_slice()).collect();
        let mix = model.forward(&Tensor::stack(&views, &shape)?)?;
        let mut g_mix_logits = Tensor::zeros(mix.pass.logits.shape());
        let scale = w.alpha_lr * inv;
        for i in 0..n {
            let p = mix.probs(i);
            let gi = g_mix_logits.item_mut(i);
            for y in [classes[i], pairings[i].partner_class] {
                let d = class_distance(p, y).as_f64();
                lr[i] += (d - w.r).max(0.0);
                if d > w.r {
                    // d = -ln(p_y + floor): dd/dz = p_y / (p_y + floor) * (p - e_y)
                    let py = p[y].as_f64();
                    let c = T::lit(scale * py / (py + DIST_FLOOR));
                    for (g, &pj) in gi.iter_mut().zip(p) {
                        *g += c * pj;
                    }
                    gi[y] -= c;
                }
            }
        }
        let g_mix = model
            .net
            .backward(&mix.pass, &TraceGrad { logits: g_mix_logits, bn_stats: vec![] }, true, false)
            .input
            .expect("input gradient requested");
        for i in 0..n {
            let spec = &pairings[i].spec;
            let to_org = mixer::grad_org(spec, g_mix.item(i), shape);
            for (g, d) in grad.item_mut(i).iter_mut().zip(to_org) {
                *g += d;
            }
            if let Some(row) = pairings[i].in_batch {
                let to_aug = mixer::grad_aug(spec, g_mix.item(i), shape);
                for (g, d) in grad.item_mut(row).iter_mut().zip(to_aug) {
                    *g += d;
                }
            }
        }
    }

    let total = ce.iter().sum::<f64>() * inv + w.alpha_bn * bn + w.alpha_lr * lr.iter().sum::<f64>() * inv;
    let per_record = (0..n).map(|i| ce[i] + w.alpha_bn * bn + w.alpha_lr * lr[i]).collect();
    Ok(LcEval { total: T::lit(total), per_record, bn, grad })
}

fn batch_ranges(n: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    // near-equal groups so no batch is left with a single image
    let groups = n.div_ceil(batch.max(2));
    (0..groups).map(|g| g * n / groups..(g + 1) * n / groups).collect()
}

fn sample_partner(rng: &mut ChaCha8Rng, i: usize, classes: &[usize], policy: PartnerPolicy) -> usize {
    let n = classes.len();
    if policy == PartnerPolicy::SameClass {
        let same: Vec<usize> = (0..n).filter(|&j| j != i && classes[j] == classes[i]).collect();
        if !same.is_empty() {
            return same[rng.random_range(0..same.len())];
        }
    }
    // uniform over all other records
    let j = rng.random_range(0..n - 1);
    if j >= i {
        j + 1
    } else {
        j
    }
}

/// Per-record outcome of refinement.
pub struct RefineReport<T> {
    /// The frozen mask used for each record.
    pub masks: Vec<MaskMap<T>>,
}

/// Refines `records` in place.
pub fn refine_dataset<T: Scalar>(model: &ModelSnapshot<T>, records: &mut [SyntheticRecord<T>], cfg: &RefineConfig) -> Result<RefineReport<T>> {
    if !model.has_batch_norm() {
        return Err(Error::MissingBatchNorm(model.arch.id.clone()));
    }
    if !(cfg.epsilon > 0.0 && cfg.epsilon < 1.0) {
        return Err(Error::Config(format!("epsilon {} outside (0, 1)", cfg.epsilon)));
    }
    let n = records.len();
    if n < 2 {
        return Err(Error::InvalidArgument("refinement needs at least two synthetic images".into()));
    }
    let shape = model.input_shape();
    let [c, h, w] = shape;
    let eps = T::lit(cfg.epsilon);
    let masks: Vec<MaskMap<T>> = records
        .iter()
        .map(|r| {
            if cfg.uniform_mask {
                Ok(MaskMap::uniform(h, w, eps))
            } else {
                image_mask(model, &r.image, r.class_id, eps).map(|(_, m)| m)
            }
        })
        .collect::<Result<_>>()?;
    let ranges: Vec<(T, T)> = (0..c)
        .map(|ch| {
            let (lo, hi) = model.normalization.range(ch);
            (T::lit(lo), T::lit(hi))
        })
        .collect();
    let classes: Vec<usize> = records.iter().map(|r| r.class_id).collect();
    let weights = cfg.weights();

    for (b, range) in batch_ranges(n, cfg.batch).into_iter().enumerate() {
        let members: Vec<usize> = range.collect();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(cfg.seed, b as u64, 0x5EED));
        let mut adam = Adam::<T>::new(cfg.lr, cfg.betas.0, cfg.betas.1);
        let mut x = Tensor::stack(&members.iter().map(|&i| records[i].image.as_slice()).collect::<Vec<_>>(), &shape)?;
        let batch_classes: Vec<usize> = members.iter().map(|&i| classes[i]).collect();

        let draw = |rng: &mut ChaCha8Rng, records: &[SyntheticRecord<T>]| -> Vec<Pairing<T>> {
            members
                .iter()
                .map(|&i| {
                    let partner = sample_partner(rng, i, &classes, cfg.partner);
                    let spec = AugmentSpec::sample(cfg.mix, h, w, rng.random());
                    let in_batch = members.iter().position(|&m| m == partner);
                    let image = if in_batch.is_some() { Vec::new() } else { records[partner].image.clone() };
                    Pairing { partner, partner_class: classes[partner], spec, in_batch, image }
                })
                .collect()
        };

        let mut pairings = draw(&mut rng, records);
        let first = lc_loss(model, &x, &batch_classes, &pairings, weights)?;
        let mut eval = first;
        for (row, &i) in members.iter().enumerate() {
            records[i].loss_initial = Some(eval.per_record[row]);
        }
        for it in 0..cfg.iterations {
            if it > 0 {
                pairings = draw(&mut rng, records);
                eval = lc_loss(model, &x, &batch_classes, &pairings, weights)?;
            }
            let masked: Vec<Vec<T>> = members
                .iter()
                .enumerate()
                .map(|(row, &i)| {
                    let hw = h * w;
                    eval.grad.item(row).iter().enumerate().map(|(p, &g)| masks[i].values[p % hw] * g).collect()
                })
                .collect();
            let dirs = adam.directions(&masked.iter().map(|v| v.as_slice()).collect::<Vec<_>>());
            for (row, &i) in members.iter().enumerate() {
                let mut next = masked_step(x.item(row), &masks[i], &dirs[row])?;
                let hw = h * w;
                for (p, v) in next.iter_mut().enumerate() {
                    if !masks[i].values[p % hw].is_zero() {
                        let (lo, hi) = ranges[p / hw];
                        *v = v.max(lo).min(hi);
                    }
                }
                x.item_mut(row).copy_from_slice(&next);
            }
        }
        let last = lc_loss(model, &x, &batch_classes, &pairings, weights)?;
        for (row, &i) in members.iter().enumerate() {
            let rec = &mut records[i];
            rec.image = x.item(row).to_vec();
            rec.partner_idx = Some(pairings[row].partner);
            rec.aug_spec = Some(pairings[row].spec);
            rec.loss_final = Some(last.per_record[row]);
            rec.refined = true;
        }
    }
    Ok(RefineReport { masks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Normalization;
    use crate::nn::{ArchSpec, BnBatchStats};
    use crate::tensor::softmax;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn snapshot(seed: u64) -> ModelSnapshot<f64> {
        let arch = ArchSpec::parse("convnet2", 4).unwrap();
        ModelSnapshot {
            net: arch.build([3, 8, 8], 3, seed).unwrap(),
            arch,
            normalization: Normalization { mean: vec![0.5; 3], std: vec![0.25; 3] },
            meta: Default::default(),
        }
    }

    fn images(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[n, 3, 8, 8], (0..n * 192).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    fn fake_trace(model: &ModelSnapshot<f64>, stats: Vec<BnBatchStats<f64>>) -> BatchTrace<f64> {
        let mut t = model.forward(&images(2, 0)).unwrap();
        t.pass.bn_stats = stats;
        t
    }

    #[test]
    fn bn_loss_zero_at_running_stats() {
        let m = snapshot(0);
        let stats = m.bn_stats().iter().map(|(a, b)| BnBatchStats { mean: a.to_vec(), var: b.to_vec() }).collect();
        assert_eq!(bn_loss(&fake_trace(&m, stats), &m).unwrap(), 0.0);
    }

    #[test]
    fn bn_loss_single_offset_and_hand_sum() {
        let m = snapshot(0);
        let run: Vec<(Vec<f64>, Vec<f64>)> = m.bn_stats().iter().map(|(a, b)| (a.to_vec(), b.to_vec())).collect();
        let mut stats: Vec<BnBatchStats<f64>> = run.iter().map(|(a, b)| BnBatchStats { mean: a.clone(), var: b.clone() }).collect();
        stats[0].mean[0] += -0.3;
        assert!((bn_loss(&fake_trace(&m, stats.clone()), &m).unwrap() - 0.3).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut expect = 0.0;
        for (s, (a, b)) in stats.iter_mut().zip(&run) {
            let mut nm = 0.0;
            let mut nv = 0.0;
            for ch in 0..a.len() {
                s.mean[ch] = a[ch] + rng.random_range(-1.0..1.0);
                s.var[ch] = b[ch] + rng.random_range(-1.0..1.0);
                nm += (s.mean[ch] - a[ch]).powi(2);
                nv += (s.var[ch] - b[ch]).powi(2);
            }
            expect += nm.sqrt() + nv.sqrt();
        }
        assert!((bn_loss(&fake_trace(&m, stats), &m).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn bn_loss_requires_batch_norm() {
        let arch = ArchSpec::parse("convnet2-nobn", 4).unwrap();
        let m = ModelSnapshot::<f64> { net: arch.build([3, 8, 8], 3, 0).unwrap(), arch, normalization: Normalization::identity(3), meta: Default::default() };
        let t = m.forward(&images(2, 1)).unwrap();
        assert!(matches!(bn_loss(&t, &m), Err(Error::MissingBatchNorm(_))));
    }

    #[test]
    fn org_loss_reduces_to_ce_without_bn() {
        let m = snapshot(1);
        let x = images(3, 2);
        let y = [0, 1, 2];
        let t = m.forward(&x).unwrap();
        let ce = (0..3).map(|i| -t.probs(i)[y[i]].ln()).sum::<f64>() / 3.0;
        assert!((org_loss(&m, &x, &y, 0.0).unwrap() - ce).abs() < 1e-12);
        let bn = bn_loss(&t, &m).unwrap();
        assert!((org_loss(&m, &x, &y, 10.0).unwrap() - (ce + 10.0 * bn)).abs() < 1e-9);
        // hand arithmetic: p = 0.5, L_bn = 0.2, a_bn = 10
        assert!((-(0.5f64).ln() + 10.0 * 0.2 - 2.6931).abs() < 1e-4);
    }

    #[test]
    fn hinge_examples() {
        assert!((hinge_pair(0.9, 0.1, 0.4) - 0.5).abs() < 1e-12);
        assert_eq!(hinge_pair(0.3, 0.39, 0.4), 0.0);
        // both classes above e^-r: no active hinge
        let p = softmax(&[2.0f64, 2.0, -30.0]);
        assert_eq!(hinge_pair(class_distance(&p, 0), class_distance(&p, 1), 0.7), 0.0);
        let m = snapshot(2);
        let x = images(1, 3);
        let probs = m.forward_image(x.item(0)).unwrap().probs;
        let brute = (-(probs[0] + 1e-12).ln() - 0.4).max(0.0) + (-(probs[2] + 1e-12).ln() - 0.4).max(0.0);
        assert!((lr_loss(&m, x.item(0), 0, 2, 0.4).unwrap() - brute).abs() < 1e-12);
    }

    #[test]
    fn masked_step_examples() {
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let step = vec![0.5; 8];
        let zero = MaskMap { height: 2, width: 2, values: vec![0.0; 4], epsilon: 0.5 };
        assert_eq!(masked_step(&x, &zero, &step).unwrap(), x);
        let full = MaskMap::uniform(2, 2, 0.5);
        let out = masked_step(&x, &full, &step).unwrap();
        assert!(out.iter().zip(&x).all(|(a, b)| *a == b - 0.25));
        assert!(masked_step(&x, &full, &step[..4]).is_err());
    }

    proptest! {
        #[test]
        fn masked_step_matches_loop(values in prop::collection::vec(0.0f64..0.5, 6), step in prop::collection::vec(-1.0f64..1.0, 12), scale in 0.0f64..2.0) {
            let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
            let mask = MaskMap { height: 2, width: 3, values: values.clone(), epsilon: 0.5 };
            let out = masked_step(&x, &mask, &step).unwrap();
            for i in 0..12 {
                prop_assert_eq!(out[i], x[i] - values[i % 6] * step[i]);
            }
            let scaled = MaskMap { values: values.iter().map(|v| v * scale).collect(), ..mask };
            let out2 = masked_step(&x, &scaled, &step).unwrap();
            for i in 0..12 {
                prop_assert!((out2[i] - (x[i] - scale * values[i % 6] * step[i])).abs() < 1e-12);
            }
        }
    }

    fn pairings(n: usize, partners: &[usize], classes: &[usize], method: MixMethod, ext: &Tensor<f64>) -> Vec<Pairing<f64>> {
        (0..n)
            .map(|i| {
                let partner = partners[i];
                let in_batch = (partner < n).then_some(partner);
                Pairing {
                    partner,
                    partner_class: classes[partner],
                    spec: AugmentSpec::sample(method, 8, 8, 100 + i as u64),
                    in_batch,
                    image: if in_batch.is_some() { vec![] } else { ext.item(partner - n).to_vec() },
                }
            })
            .collect()
    }

    #[test]
    fn lc_gradient_matches_finite_differences() {
        let m = snapshot(3);
        let classes = [0, 1, 2, 1, 0];
        let ext = images(1, 9);
        for method in [MixMethod::Mixup, MixMethod::Cutmix] {
            let x = images(4, 7);
            let p = pairings(4, &[1, 2, 4, 0], &classes, method, &ext);
            let w = LossWeights { alpha_bn: 10.0, alpha_lr: 1.0, r: 0.05 };
            let eval = lc_loss(&m, &x, &classes[..4], &p, w).unwrap();
            let f = |x: &Tensor<f64>| lc_loss(&m, x, &classes[..4], &p, w).unwrap().total;
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for _ in 0..16 {
                let idx = rng.random_range(0..x.len());
                let mut xp = x.clone();
                xp.data_mut()[idx] += 1e-5;
                let mut xm = x.clone();
                xm.data_mut()[idx] -= 1e-5;
                let fd = (f(&xp) - f(&xm)) / 2e-5;
                let an = eval.grad.data()[idx];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-3), "{method:?} pixel {idx}: fd {fd} analytic {an}");
            }
        }
    }

    fn records(n: usize) -> Vec<SyntheticRecord<f64>> {
        let x = images(n, 21);
        (0..n).map(|i| SyntheticRecord::new(x.item(i).iter().map(|v| v.clamp(-2.0, 2.0)).collect(), i % 3, vec![])).collect()
    }

    #[test]
    fn zero_iterations_only_samples_partners() {
        let m = snapshot(4);
        let mut recs = records(6);
        let before = recs.clone();
        let cfg = RefineConfig { iterations: 0, batch: 4, ..Default::default() };
        refine_dataset(&m, &mut recs, &cfg).unwrap();
        for (a, b) in recs.iter().zip(&before) {
            assert_eq!(a.image, b.image);
            assert!(a.partner_idx.is_some() && a.aug_spec.is_some() && a.refined);
            assert_ne!(a.partner_idx, Some(usize::MAX));
        }
    }

    #[test]
    fn refinement_preserves_critical_pixels_and_lowers_loss() {
        let m = snapshot(5);
        let mut recs = records(8);
        let before = recs.clone();
        let cfg = RefineConfig { iterations: 30, batch: 4, ..Default::default() };
        let report = refine_dataset(&m, &mut recs, &cfg).unwrap();
        let mut moved = 0;
        for ((a, b), mask) in recs.iter().zip(&before).zip(&report.masks) {
            for (p, (&x1, &x0)) in a.image.iter().zip(&b.image).enumerate() {
                if mask.values[p % 64] == 0.0 {
                    assert_eq!(x1.to_bits(), x0.to_bits());
                } else if x1 != x0 {
                    moved += 1;
                }
            }
            assert!(a.loss_final.unwrap() < a.loss_initial.unwrap() + 1.0);
        }
        assert!(moved > 0);
        let mut again = before.clone();
        refine_dataset(&m, &mut again, &cfg).unwrap();
        assert_eq!(again, recs);
    }
}
