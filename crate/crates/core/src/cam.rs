//! Class activation maps and the non-critical update mask derived from them.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image_ops::upsample_aligned;
use crate::model::ModelSnapshot;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct CamMap<T> {
    pub height: usize,
    pub width: usize,
    /// Row-major `height x width`.
    pub values: Vec<T>,
    pub class_id: usize,
    pub normalized: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskMap<T> {
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
    pub epsilon: T,
}

impl<T: Scalar> CamMap<T> {
    pub fn at(&self, y: usize, x: usize) -> T {
        self.values[y * self.width + x]
    }
}

impl<T: Scalar> MaskMap<T> {
    /// A mask that lets every pixel move with weight `value`.
    pub fn uniform(height: usize, width: usize, value: T) -> Self {
        Self { height, width, values: vec![value; height * width], epsilon: value }
    }

    pub fn frozen_pixels(&self) -> usize {
        self.values.iter().filter(|v| v.is_zero()).count()
    }
}

/// `sum_k w_k^y T_k` at every spatial location of a `F x h x w` activation tensor.
pub fn cam_from_features<T: Scalar>(features: &[T], channels: usize, h: usize, w: usize, weights: &[T]) -> Vec<T> {
    assert_eq!(features.len(), channels * h * w);
    assert_eq!(weights.len(), channels);
    let mut out = vec![T::zero(); h * w];
    for (k, &wk) in weights.iter().enumerate() {
        if wk.is_zero() {
            continue;
        }
        for (o, &t) in out.iter_mut().zip(&features[k * h * w..(k + 1) * h * w]) {
            *o += wk * t;
        }
    }
    out
}

/// Raw CAM at feature-map resolution.
pub fn compute_cam<T: Scalar>(model: &ModelSnapshot<T>, image: &[T], class_id: usize) -> Result<CamMap<T>> {
    let k = model.num_classes();
    if class_id >= k {
        return Err(Error::ClassOutOfRange { class: class_id, num_classes: k });
    }
    let trace = model.forward_image(image)?;
    let [f, h, w] = [trace.feature_maps.shape()[0], trace.feature_maps.shape()[1], trace.feature_maps.shape()[2]];
    Ok(CamMap {
        height: h,
        width: w,
        values: cam_from_features(trace.feature_maps.data(), f, h, w, model.class_weights(class_id)),
        class_id,
        normalized: false,
    })
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_min_max<T: Scalar>(values: &[T]) -> Vec<T> {
    let lo = values.iter().copied().fold(T::infinity(), T::min);
    let hi = values.iter().copied().fold(T::neg_infinity(), T::max);
    let span = hi - lo;
    if !(span > T::zero()) {
        return vec![T::zero(); values.len()];
    }
    values.iter().map(|&v| ((v - lo) / span).max(T::zero()).min(T::one())).collect()
}

/// Bilinear upsampling to `(out_h, out_w)` followed by per-image min-max normalization.
pub fn finalize_cam<T: Scalar>(raw: &CamMap<T>, out_h: usize, out_w: usize) -> Result<CamMap<T>> {
    if out_h == 0 || out_w == 0 || out_h < raw.height || out_w < raw.width {
        return Err(Error::InvalidArgument(format!(
            "cannot finalize a {}x{} map to {out_h}x{out_w}",
            raw.height, raw.width
        )));
    }
    let up = upsample_aligned(&raw.values, raw.height, raw.width, out_h, out_w);
    Ok(CamMap { height: out_h, width: out_w, values: normalize_min_max(&up), class_id: raw.class_id, normalized: true })
}

/// `M = max{0, eps - C}` pointwise.
pub fn non_critical_mask<T: Scalar>(cam: &CamMap<T>, epsilon: T) -> Result<MaskMap<T>> {
    if !cam.normalized {
        return Err(Error::NotNormalized);
    }
    if !(epsilon > T::zero() && epsilon < T::one()) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside (0, 1)")));
    }
    Ok(MaskMap {
        height: cam.height,
        width: cam.width,
        values: cam.values.iter().map(|&c| (epsilon - c).max(T::zero())).collect(),
        epsilon,
    })
}

/// Normalized CAM and mask for an image at full input resolution.
pub fn image_mask<T: Scalar>(model: &ModelSnapshot<T>, image: &[T], class_id: usize, epsilon: T) -> Result<(CamMap<T>, MaskMap<T>)> {
    let [_, h, w] = model.input_shape();
    let cam = finalize_cam(&compute_cam(model, image, class_id)?, h, w)?;
    let mask = non_critical_mask(&cam, epsilon)?;
    Ok((cam, mask))
}

fn heat(v: f64) -> [u8; 3] {
    // blue -> cyan -> yellow -> red
    let v = v.clamp(0.0, 1.0);
    let (r, g, b) = if v < 1.0 / 3.0 {
        (0.0, 3.0 * v, 1.0)
    } else if v < 2.0 / 3.0 {
        let t = 3.0 * v - 1.0;
        (t, 1.0, 1.0 - t)
    } else {
        (1.0, 1.0 - (3.0 * v - 2.0), 0.0)
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Writes a `[0, scale]` map as a lossless heatmap PNG.
pub fn save_heatmap<T: Scalar>(values: &[T], height: usize, width: usize, scale: f64, path: &Path) -> Result<()> {
    let mut img = image::RgbImage::new(width as u32, height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        *px = image::Rgb(heat(values[i].as_f64() / scale.max(f64::MIN_POSITIVE)));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| Error::Image(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn normalized(values: Vec<f64>, h: usize, w: usize) -> CamMap<f64> {
        CamMap { height: h, width: w, values, class_id: 0, normalized: true }
    }

    #[test]
    fn zero_weights_give_zero_map() {
        let feats = vec![1.5; 3 * 4];
        assert!(cam_from_features(&feats, 3, 2, 2, &[0.0; 3]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_unit_channel_is_identity() {
        let feats = vec![0.1, 0.7, -0.2, 3.0];
        assert_eq!(cam_from_features(&feats, 1, 2, 2, &[1.0]), feats);
    }

    #[test]
    fn two_channel_cam_matches_hand_loop() {
        let t1 = [0.3, -1.0, 2.0, 0.5, 0.0, 1.25];
        let t2 = [1.0, 0.2, -0.7, 0.4, 2.5, -3.0];
        let feats: Vec<f64> = t1.iter().chain(&t2).copied().collect();
        let (a, b) = (0.8, -1.7);
        let cam = cam_from_features(&feats, 2, 2, 3, &[a, b]);
        for i in 0..6 {
            assert_eq!(cam[i], a * t1[i] + b * t2[i]);
        }
    }

    #[test]
    fn min_max_of_hand_example() {
        assert_eq!(normalize_min_max(&[0.0, 2.0, 1.0, 4.0]), vec![0.0, 0.5, 0.25, 1.0]);
        assert_eq!(normalize_min_max(&[3.0; 5]), vec![0.0; 5]);
    }

    #[test]
    fn finalize_keeps_corners_and_range() {
        let raw = CamMap { height: 2, width: 2, values: vec![0.0, 2.0, 1.0, 4.0], class_id: 1, normalized: false };
        let cam = finalize_cam(&raw, 4, 4).unwrap();
        assert!(cam.normalized);
        assert_eq!([cam.at(0, 0), cam.at(0, 3), cam.at(3, 0), cam.at(3, 3)], [0.0, 0.5, 0.25, 1.0]);
        let constant = CamMap { values: vec![2.0; 4], ..raw.clone() };
        assert!(finalize_cam(&constant, 4, 4).unwrap().values.iter().all(|&v| v == 0.0));
        assert!(finalize_cam(&raw, 1, 4).is_err());
    }

    #[test]
    fn mask_examples() {
        let cam = normalized(vec![0.7, 0.2, 0.5], 1, 3);
        let m = non_critical_mask(&cam, 0.5).unwrap();
        assert_eq!(m.values[0], 0.0);
        assert!((m.values[1] - 0.3).abs() < 1e-15);
        assert_eq!(m.values[2], 0.0);
        let raw = CamMap { normalized: false, ..cam };
        assert!(matches!(non_critical_mask(&raw, 0.5), Err(Error::NotNormalized)));
    }

    proptest! {
        #[test]
        fn mask_is_bounded_and_supported(values in prop::collection::vec(0.0f64..=1.0, 1..64), e in 1usize..10) {
            let eps = e as f64 / 10.0;
            let n = values.len();
            let m = non_critical_mask(&normalized(values.clone(), 1, n), eps).unwrap();
            for (c, v) in values.iter().zip(&m.values) {
                prop_assert!(*v >= 0.0 && *v <= eps);
                prop_assert_eq!(*v > 0.0, *c < eps);
                prop_assert_eq!(*v, (eps - c).max(0.0));
            }
        }

        #[test]
        fn mask_is_antimonotone_and_lipschitz(c1 in 0.0f64..=1.0, c2 in 0.0f64..=1.0, e in 1usize..10) {
            let eps = e as f64 / 10.0;
            let m = non_critical_mask(&normalized(vec![c1, c2], 1, 2), eps).unwrap();
            if c1 <= c2 {
                prop_assert!(m.values[0] >= m.values[1]);
            }
            prop_assert!((m.values[0] - m.values[1]).abs() <= (c1 - c2).abs() + 1e-15);
        }

        #[test]
        fn cam_is_linear_in_weights(
            feats in prop::collection::vec(-2.0f64..2.0, 3 * 6),
            w1 in prop::collection::vec(-1.0f64..1.0, 3),
            w2 in prop::collection::vec(-1.0f64..1.0, 3),
        ) {
            let sum: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
            let a = cam_from_features(&feats, 3, 2, 3, &w1);
            let b = cam_from_features(&feats, 3, 2, 3, &w2);
            let c = cam_from_features(&feats, 3, 2, 3, &sum);
            for i in 0..6 {
                prop_assert!((a[i] + b[i] - c[i]).abs() < 1e-5);
            }
        }

        #[test]
        fn finalized_maps_are_normalized(values in prop::collection::vec(-5.0f64..5.0, 4), up in 2usize..9) {
            let raw = CamMap { height: 2, width: 2, values, class_id: 0, normalized: false };
            let cam = finalize_cam(&raw, up, up).unwrap();
            prop_assert!(cam.values.iter().all(|v| (0.0..=1.0).contains(v)));
            let hi = cam.values.iter().copied().fold(f64::MIN, f64::max);
            let lo = cam.values.iter().copied().fold(f64::MAX, f64::min);
            prop_assert!(hi == 1.0 || hi == 0.0);
            prop_assert_eq!(lo, 0.0);
        }
    }
}
