//! Deterministic CutMix / Mixup.
//!
//! An [`AugmentSpec`] fully determines the mixed image, so the same `x_mix` can be
//! rebuilt at refinement, relabeling and transfer time from stored records.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_ops::PixelBox;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMethod {
    Mixup,
    #[default]
    Cutmix,
}

impl MixMethod {
    pub fn code(self) -> u8 {
        match self {
            MixMethod::Mixup => 0,
            MixMethod::Cutmix => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(MixMethod::Mixup),
            1 => Ok(MixMethod::Cutmix),
            _ => Err(Error::Corrupt(format!("unknown mix method code {code}"))),
        }
    }
}

impl fmt::Display for MixMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixMethod::Mixup => "mixup",
            MixMethod::Cutmix => "cutmix",
        })
    }
}

impl FromStr for MixMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixup" => Ok(MixMethod::Mixup),
            "cutmix" => Ok(MixMethod::Cutmix),
            _ => Err(Error::Config(format!("unknown mix method `{s}` (expected mixup or cutmix)"))),
        }
    }
}

/// One CutMix or Mixup application. `lam` is the weight of the original image;
/// the box (cutmix only) is where the partner shows through.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub method: MixMethod,
    pub lam: f32,
    pub bbox: PixelBox,
    pub seed: u64,
}

pub const SPEC_BYTES: usize = 24;

/// Side lengths of a box with area fraction `1 - lam`.
fn cut_size(lam: f32, h: usize, w: usize) -> (usize, usize) {
    let frac = (1.0 - lam as f64).clamp(0.0, 1.0).sqrt();
    (((h as f64) * frac).round() as usize, ((w as f64) * frac).round() as usize)
}

impl AugmentSpec {
    /// Draws `lam ~ Beta(1, 1)` and, for cutmix, a box of area `1 - lam` at a
    /// uniformly random position fully inside an `h x w` image.
    pub fn sample(method: MixMethod, h: usize, w: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lam: f32 = rng.random_range(0.0..=1.0);
        Self::place(method, lam, h, w, &mut rng, seed)
    }

    /// Like [`AugmentSpec::sample`] with a fixed `lam`.
    pub fn with_lam(method: MixMethod, lam: f32, h: usize, w: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::place(method, lam.clamp(0.0, 1.0), h, w, &mut rng, seed)
    }

    fn place(method: MixMethod, lam: f32, h: usize, w: usize, rng: &mut ChaCha8Rng, seed: u64) -> Self {
        let bbox = match method {
            MixMethod::Mixup => PixelBox::default(),
            MixMethod::Cutmix => {
                let (ch, cw) = cut_size(lam, h, w);
                if ch == 0 || cw == 0 {
                    PixelBox::default()
                } else {
                    PixelBox::new(rng.random_range(0..=h - ch), rng.random_range(0..=w - cw), ch, cw)
                }
            }
        };
        Self { method, lam, bbox, seed }
    }

    /// Fraction of pixels taken from the original image.
    pub fn org_fraction(&self, h: usize, w: usize) -> f64 {
        match self.method {
            MixMethod::Mixup => self.lam as f64,
            MixMethod::Cutmix => 1.0 - self.bbox.area() as f64 / (h * w) as f64,
        }
    }

    pub fn to_bytes(&self) -> [u8; SPEC_BYTES] {
        let mut out = [0u8; SPEC_BYTES];
        out[0] = self.method.code();
        out[4..8].copy_from_slice(&self.lam.to_le_bytes());
        out[8..16].copy_from_slice(&encode_box(self.bbox));
        out[16..24].copy_from_slice(&self.seed.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != SPEC_BYTES {
            return Err(Error::Corrupt(format!("augment spec must be {SPEC_BYTES} bytes, got {}", bytes.len())));
        }
        Ok(Self {
            method: MixMethod::from_code(bytes[0])?,
            lam: f32::from_le_bytes(bytes[4..8].try_into().unwrap()),
            bbox: decode_box(&bytes[8..16]),
            seed: u64::from_le_bytes(bytes[16..24].try_into().unwrap()),
        })
    }
}

pub(crate) fn encode_box(b: PixelBox) -> [u8; 8] {
    let mut out = [0u8; 8];
    for (i, v) in [b.top, b.left, b.height, b.width].into_iter().enumerate() {
        out[2 * i..2 * i + 2].copy_from_slice(&(v as u16).to_le_bytes());
    }
    out
}

pub(crate) fn decode_box(bytes: &[u8]) -> PixelBox {
    let v = |i: usize| u16::from_le_bytes([bytes[2 * i], bytes[2 * i + 1]]) as usize;
    PixelBox::new(v(0), v(1), v(2), v(3))
}

/// Builds `x_mix` from two `C x H x W` images.
pub fn apply<T: Scalar>(spec: &AugmentSpec, x_org: &[T], x_aug: &[T], shape: [usize; 3]) -> Result<Vec<T>> {
    let [c, h, w] = shape;
    if x_org.len() != c * h * w || x_aug.len() != x_org.len() {
        return Err(Error::Shape(format!("mix of {} and {} values for {c}x{h}x{w}", x_org.len(), x_aug.len())));
    }
    match spec.method {
        MixMethod::Mixup => {
            let lam = T::lit(spec.lam as f64);
            let rest = T::one() - lam;
            Ok(x_org.iter().zip(x_aug).map(|(&a, &b)| lam * a + rest * b).collect())
        }
        MixMethod::Cutmix => {
            check_box(spec, h, w)?;
            let mut out = x_org.to_vec();
            for_box(spec.bbox, c, h, w, |i| out[i] = x_aug[i]);
            Ok(out)
        }
    }
}

/// Pulls a gradient w.r.t. `x_mix` back to `x_org`.
pub fn grad_org<T: Scalar>(spec: &AugmentSpec, g_mix: &[T], shape: [usize; 3]) -> Vec<T> {
    let [c, h, w] = shape;
    match spec.method {
        MixMethod::Mixup => {
            let lam = T::lit(spec.lam as f64);
            g_mix.iter().map(|&g| lam * g).collect()
        }
        MixMethod::Cutmix => {
            let mut out = g_mix.to_vec();
            for_box(spec.bbox, c, h, w, |i| out[i] = T::zero());
            out
        }
    }
}

/// Pulls a gradient w.r.t. `x_mix` back to the partner `x_aug`.
pub fn grad_aug<T: Scalar>(spec: &AugmentSpec, g_mix: &[T], shape: [usize; 3]) -> Vec<T> {
    let [c, h, w] = shape;
    match spec.method {
        MixMethod::Mixup => {
            let rest = T::one() - T::lit(spec.lam as f64);
            g_mix.iter().map(|&g| rest * g).collect()
        }
        MixMethod::Cutmix => {
            let mut out = vec![T::zero(); g_mix.len()];
            for_box(spec.bbox, c, h, w, |i| out[i] = g_mix[i]);
            out
        }
    }
}

fn check_box(spec: &AugmentSpec, h: usize, w: usize) -> Result<()> {
    if spec.bbox.area() > 0 && !spec.bbox.fits(h, w) {
        return Err(Error::Shape(format!("cutmix box {:?} outside {h}x{w}", spec.bbox)));
    }
    Ok(())
}

fn for_box(b: PixelBox, c: usize, h: usize, w: usize, mut f: impl FnMut(usize)) {
    for ch in 0..c {
        for y in b.top..b.top + b.height {
            for x in b.left..b.left + b.width {
                f(ch * h * w + y * w + x);
            }
        }
    }
}
