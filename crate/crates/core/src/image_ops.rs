//! Resampling helpers for patches and activation maps.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Pixel rectangle `(top, left, height, width)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PixelBox {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self { top, left, height, width }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { top: 0, left: 0, height, width }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.top + self.height <= height && self.left + self.width <= width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

/// Per output index: first contributing source index and normalized weights.
fn triangle_weights(src_len: usize, src_start: usize, src_extent: usize, dst_len: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = src_extent as f64 / dst_len as f64;
    let support = scale.max(1.0);
    (0..dst_len)
        .map(|o| {
            let center = src_start as f64 + (o as f64 + 0.5) * scale;
            let lo = ((center - support).floor() as isize).max(src_start as isize) as usize;
            let hi = ((center + support).ceil() as usize).min(src_start + src_extent).min(src_len);
            let mut w: Vec<f64> = (lo..hi)
                .map(|i| {
                    let d = ((i as f64 + 0.5) - center).abs() / support;
                    (1.0 - d).max(0.0)
                })
                .collect();
            let sum: f64 = w.iter().sum();
            if sum > 0.0 {
                w.iter_mut().for_each(|v| *v /= sum);
                (lo, w)
            } else {
                // degenerate: nearest source pixel
                let nearest = (center.floor() as usize).clamp(src_start, src_start + src_extent - 1);
                (nearest, vec![1.0])
            }
        })
        .collect()
}

/// Crops `region` out of a `C x H x W` image and resamples it to `out_h x out_w`
/// with a triangle (bilinear) filter whose support widens when downscaling.
pub fn crop_resize<T: Scalar>(
    image: &[T],
    channels: usize,
    height: usize,
    width: usize,
    region: PixelBox,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    assert!(region.fits(height, width) && region.area() > 0, "crop region out of bounds");
    let wy = triangle_weights(height, region.top, region.height, out_h);
    let wx = triangle_weights(width, region.left, region.width, out_w);
    let mut tmp = vec![0.0f64; channels * height * out_w];
    for c in 0..channels {
        for y in region.top..region.top + region.height {
            let row = &image[c * height * width + y * width..c * height * width + (y + 1) * width];
            for (ox, (start, ws)) in wx.iter().enumerate() {
                let mut acc = 0.0;
                for (j, w) in ws.iter().enumerate() {
                    acc += row[start + j].as_f64() * w;
                }
                tmp[c * height * out_w + y * out_w + ox] = acc;
            }
        }
    }
    let mut out = vec![T::zero(); channels * out_h * out_w];
    for c in 0..channels {
        for (oy, (start, ws)) in wy.iter().enumerate() {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for (j, w) in ws.iter().enumerate() {
                    acc += tmp[c * height * out_w + (start + j) * out_w + ox] * w;
                }
                out[c * out_h * out_w + oy * out_w + ox] = T::lit(acc);
            }
        }
    }
    out
}

/// Bilinear upsampling of a single-channel map with aligned corners.
pub fn upsample_aligned<T: Scalar>(map: &[T], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    let coord = |o: usize, out: usize, src: usize| -> (usize, usize, f64) {
        if out == 1 || src == 1 {
            return (0, 0, 0.0);
        }
        let pos = o as f64 * (src - 1) as f64 / (out - 1) as f64;
        let i0 = (pos.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, pos - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, out_w, w);
            let v = |y: usize, x: usize| map[y * w + x].as_f64();
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            out.push(T::lit(top * (1.0 - fy) + bottom * fy));
        }
    }
    out
}

/// Horizontal mirror of a `C x H x W` image.
pub fn flip_horizontal<T: Scalar>(image: &[T], channels: usize, height: usize, width: usize) -> Vec<T> {
    let mut out = image.to_vec();
    for c in 0..channels {
        for y in 0..height {
            let row = &mut out[c * height * width + y * width..c * height * width + (y + 1) * width];
            row.reverse();
        }
    }
    out
}
