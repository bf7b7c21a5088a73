//! Relabeling of synthetic images and the binary label store.
//!
//! Layout (little-endian): 16-byte header `"NRRD" | version u16 | mode u8 | mix u8 |
//! count u32 | num_classes u32`, fixed-width records, CRC32 footer over everything
//! before it. Every record starts with `org_idx u32 | aug_idx u32 | y_org u16 |
//! y_aug u16 | lam f32 | box 4 x u16 | seed u64` (32 bytes); the mode decides the rest.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cidd::SyntheticRecord;
use crate::error::{Error, Result};
use crate::mixer::{self, decode_box, encode_box, AugmentSpec, MixMethod};
use crate::model::{verify_crc, write_atomic, ModelSnapshot};
use crate::refine::PartnerPolicy;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DIST_FLOOR: f64 = 1e-12;
pub const STORE_MAGIC: &[u8; 4] = b"NRRD";
pub const STORE_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 16;
pub const FOOTER_BYTES: usize = 4;
/// Indices, class ids and mix parameters shared by every mode.
pub const RECORD_PREFIX_BYTES: usize = 32;

/// `-ln(p[y] + 1e-12)`.
pub fn class_distance<T: Scalar>(probs: &[T], y: usize) -> T {
    -(probs[y] + T::lit(DIST_FLOOR)).ln()
}

/// Teacher probabilities on a mixed image.
pub fn soft_label<T: Scalar>(model: &ModelSnapshot<T>, x_mix: &[T]) -> Result<Vec<T>> {
    Ok(model.forward_image(x_mix)?.probs)
}

/// Cross-entropy of a soft label against the two one-hot labels.
pub fn dbr_distances<T: Scalar>(y_soft: &[T], y_org: usize, y_aug: usize) -> Result<(T, T)> {
    for y in [y_org, y_aug] {
        if y >= y_soft.len() {
            return Err(Error::ClassOutOfRange { class: y, num_classes: y_soft.len() });
        }
    }
    let sum: f64 = y_soft.iter().map(|p| p.as_f64()).sum();
    if y_soft.iter().any(|p| !(p.as_f64() >= 0.0 && p.as_f64() <= 1.0)) || (sum - 1.0).abs() > 1e-4 {
        return Err(Error::InvalidArgument("soft label is not a probability vector".into()));
    }
    Ok((class_distance(y_soft, y_org), class_distance(y_soft, y_aug)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Dbr,
    Sl,
    Cl,
    Oh,
}

impl LabelMode {
    pub const ALL: [LabelMode; 4] = [LabelMode::Dbr, LabelMode::Sl, LabelMode::Cl, LabelMode::Oh];

    pub fn code(self) -> u8 {
        match self {
            LabelMode::Dbr => 0,
            LabelMode::Sl => 1,
            LabelMode::Cl => 2,
            LabelMode::Oh => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL.get(code as usize).copied().ok_or_else(|| Error::Corrupt(format!("unknown label mode {code}")))
    }

    /// Label payload bytes per record.
    pub fn label_bytes(self, num_classes: usize) -> usize {
        match self {
            LabelMode::Dbr | LabelMode::Cl => 8,
            LabelMode::Sl => 4 * num_classes,
            LabelMode::Oh => 0,
        }
    }

    pub fn record_bytes(self, num_classes: usize) -> usize {
        RECORD_PREFIX_BYTES + self.label_bytes(num_classes)
    }
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelMode::Dbr => "dbr",
            LabelMode::Sl => "sl",
            LabelMode::Cl => "cl",
            LabelMode::Oh => "oh",
        })
    }
}

impl FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dbr" => Ok(LabelMode::Dbr),
            "sl" => Ok(LabelMode::Sl),
            "cl" => Ok(LabelMode::Cl),
            "oh" => Ok(LabelMode::Oh),
            _ => Err(Error::Config(format!("unknown label mode `{s}` (expected dbr, sl, cl or oh)"))),
        }
    }
}

/// Mode-specific label data. Training code matches on this, so a DBR store
/// simply has no soft labels to read.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Dbr { d_org: f32, d_aug: f32 },
    Soft(Vec<f32>),
    Compact { p_org: f32, p_aug: f32 },
    OneHot,
}

impl Payload {
    pub fn mode(&self) -> LabelMode {
        match self {
            Payload::Dbr { .. } => LabelMode::Dbr,
            Payload::Soft(_) => LabelMode::Sl,
            Payload::Compact { .. } => LabelMode::Cl,
            Payload::OneHot => LabelMode::Oh,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelRecord {
    pub org_idx: u32,
    pub aug_idx: u32,
    pub y_org: u16,
    pub y_aug: u16,
    pub spec: AugmentSpec,
    pub payload: Payload,
}

pub type DbrRecord = LabelRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct LabelStore {
    pub mode: LabelMode,
    pub mix: MixMethod,
    pub num_classes: usize,
    pub records: Vec<LabelRecord>,
}

impl LabelStore {
    pub fn byte_size(&self) -> usize {
        HEADER_BYTES + self.records.len() * self.mode.record_bytes(self.num_classes) + FOOTER_BYTES
    }

    /// Bytes spent on label data alone, excluding indices and mix parameters.
    pub fn label_data_bytes(&self) -> usize {
        self.records.len() * self.mode.label_bytes(self.num_classes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_size());
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.push(self.mode.code());
        out.push(self.mix.code());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.org_idx.to_le_bytes());
            out.extend_from_slice(&r.aug_idx.to_le_bytes());
            out.extend_from_slice(&r.y_org.to_le_bytes());
            out.extend_from_slice(&r.y_aug.to_le_bytes());
            out.extend_from_slice(&r.spec.lam.to_le_bytes());
            out.extend_from_slice(&encode_box(r.spec.bbox));
            out.extend_from_slice(&r.spec.seed.to_le_bytes());
            match &r.payload {
                Payload::Dbr { d_org, d_aug } => {
                    out.extend_from_slice(&d_org.to_le_bytes());
                    out.extend_from_slice(&d_aug.to_le_bytes());
                }
                Payload::Soft(p) => p.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Payload::Compact { p_org, p_aug } => {
                    out.extend_from_slice(&p_org.to_le_bytes());
                    out.extend_from_slice(&p_aug.to_le_bytes());
                }
                Payload::OneHot => {}
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a store; `expected` rejects a store written in another mode.
    pub fn from_bytes(bytes: &[u8], expected: Option<LabelMode>) -> Result<Self> {
        let body = verify_crc(bytes)?;
        if body.len() < HEADER_BYTES || &body[..4] != STORE_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u16::from_le_bytes([body[4], body[5]]);
        if version != STORE_VERSION {
            return Err(Error::Version { found: version, expected: STORE_VERSION });
        }
        let mode = LabelMode::from_code(body[6])?;
        if let Some(want) = expected {
            if want != mode {
                return Err(Error::ModeMismatch { expected: want.to_string(), found: mode.to_string() });
            }
        }
        let mix = MixMethod::from_code(body[7])?;
        let count = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
        let num_classes = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
        let rb = mode.record_bytes(num_classes);
        if body.len() != HEADER_BYTES + count * rb {
            return Err(Error::Corrupt(format!("{} record bytes for {count} records of {rb}", body.len() - HEADER_BYTES)));
        }
        let f32_at = |b: &[u8], i: usize| f32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        let records = body[HEADER_BYTES..]
            .chunks_exact(rb)
            .map(|b| {
                let payload = match mode {
                    LabelMode::Dbr => Payload::Dbr { d_org: f32_at(b, 32), d_aug: f32_at(b, 36) },
                    LabelMode::Sl => Payload::Soft((0..num_classes).map(|k| f32_at(b, 32 + 4 * k)).collect()),
                    LabelMode::Cl => Payload::Compact { p_org: f32_at(b, 32), p_aug: f32_at(b, 36) },
                    LabelMode::Oh => Payload::OneHot,
                };
                LabelRecord {
                    org_idx: u32::from_le_bytes(b[0..4].try_into().unwrap()),
                    aug_idx: u32::from_le_bytes(b[4..8].try_into().unwrap()),
                    y_org: u16::from_le_bytes([b[8], b[9]]),
                    y_aug: u16::from_le_bytes([b[10], b[11]]),
                    spec: AugmentSpec {
                        method: mix,
                        lam: f32_at(b, 12),
                        bbox: decode_box(&b[16..24]),
                        seed: u64::from_le_bytes(b[24..32].try_into().unwrap()),
                    },
                    payload,
                }
            })
            .collect();
        Ok(Self { mode, mix, num_classes, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path, expected: Option<LabelMode>) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected)
    }
}

pub fn read_store(path: &Path) -> Result<LabelStore> {
    LabelStore::read(path, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelabelConfig {
    /// Stored (image, partner) pairs per synthetic image.
    pub pairs_per_image: usize,
    pub allow_unrefined: bool,
    pub mix: MixMethod,
    pub partner: PartnerPolicy,
    pub seed: u64,
}

impl Default for RelabelConfig {
    fn default() -> Self {
        Self { pairs_per_image: 1, allow_unrefined: false, mix: MixMethod::Cutmix, partner: PartnerPolicy::Any, seed: 0 }
    }
}

fn pick_partner(rng: &mut ChaCha8Rng, i: usize, classes: &[usize], policy: PartnerPolicy) -> usize {
    let n = classes.len();
    if policy == PartnerPolicy::SameClass {
        let same: Vec<usize> = (0..n).filter(|&j| j != i && classes[j] == classes[i]).collect();
        if !same.is_empty() {
            return same[rng.random_range(0..same.len())];
        }
    }
    let j = rng.random_range(0..n - 1);
    if j >= i {
        j + 1
    } else {
        j
    }
}

/// Builds the label store for `records`, mixing on their current images.
///
/// The first pair of each image reuses the partner and spec left by refinement
/// when present; further pairs (and unrefined images) get fresh ones.
/// In DBR mode the first pair's distances are also written back to the record.
pub fn relabel<T: Scalar>(
    model: &ModelSnapshot<T>,
    records: &mut [SyntheticRecord<T>],
    mode: LabelMode,
    cfg: &RelabelConfig,
) -> Result<LabelStore> {
    let n = records.len();
    if n < 2 {
        return Err(Error::InvalidArgument("relabeling needs at least two synthetic images".into()));
    }
    if cfg.pairs_per_image == 0 {
        return Err(Error::Config("pairs_per_image must be at least 1".into()));
    }
    if n > u32::MAX as usize || model.num_classes() > u16::MAX as usize {
        return Err(Error::InvalidArgument("too many records or classes for the store format".into()));
    }
    if !cfg.allow_unrefined {
        if let Some(i) = records.iter().position(|r| !r.refined) {
            return Err(Error::Unrefined(i));
        }
    }
    let shape = model.input_shape();
    let [_, h, w] = shape;
    let classes: Vec<usize> = records.iter().map(|r| r.class_id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5E1A_BE1);
    let mut pairs = Vec::with_capacity(n * cfg.pairs_per_image);
    for (i, rec) in records.iter().enumerate() {
        for p in 0..cfg.pairs_per_image {
            let reuse = match (p, rec.partner_idx, rec.aug_spec) {
                (0, Some(j), Some(spec)) if spec.method == cfg.mix => Some((j, spec)),
                _ => None,
            };
            let (j, spec) = reuse.unwrap_or_else(|| {
                let j = pick_partner(&mut rng, i, &classes, cfg.partner);
                (j, AugmentSpec::sample(cfg.mix, h, w, rng.random()))
            });
            if j >= n {
                return Err(Error::DanglingIndex { index: j, len: n });
            }
            pairs.push((i, j, spec));
        }
    }
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(256) {
        let mixes: Vec<Vec<T>> = chunk
            .iter()
            .map(|&(i, j, spec)| mixer::apply(&spec, &records[i].image, &records[j].image, shape))
            .collect::<Result<_>>()?;
        let views: Vec<&[T]> = mixes.iter().map(|m| m.as_slice()).collect();
        let trace = model.forward(&Tensor::stack(&views, &shape)?)?;
        for (row, &(i, j, spec)) in chunk.iter().enumerate() {
            let probs = trace.probs(row);
            let (y_org, y_aug) = (classes[i], classes[j]);
            let payload = match mode {
                LabelMode::Dbr => {
                    let (d_org, d_aug) = dbr_distances(probs, y_org, y_aug)?;
                    Payload::Dbr { d_org: d_org.as_f64() as f32, d_aug: d_aug.as_f64() as f32 }
                }
                LabelMode::Sl => Payload::Soft(probs.iter().map(|p| p.as_f64() as f32).collect()),
                LabelMode::Cl => Payload::Compact { p_org: probs[y_org].as_f64() as f32, p_aug: probs[y_aug].as_f64() as f32 },
                LabelMode::Oh => Payload::OneHot,
            };
            out.push(LabelRecord { org_idx: i as u32, aug_idx: j as u32, y_org: y_org as u16, y_aug: y_aug as u16, spec, payload });
        }
    }
    // other modes leave the distances of an earlier DBR pass in place
    if mode == LabelMode::Dbr {
        for rec in records.iter_mut() {
            rec.d_org = None;
            rec.d_aug = None;
        }
    }
    for lr in out.iter().filter(|_| mode == LabelMode::Dbr) {
        let rec = &mut records[lr.org_idx as usize];
        if rec.d_org.is_none() {
            if let Payload::Dbr { d_org, d_aug } = lr.payload {
                rec.d_org = Some(d_org as f64);
                rec.d_aug = Some(d_aug as f64);
            }
            rec.partner_idx = Some(lr.aug_idx as usize);
            rec.aug_spec = Some(lr.spec);
        }
    }
    Ok(LabelStore { mode, mix: cfg.mix, num_classes: model.num_classes(), records: out })
}

/// Rebuilds every stored mix from `images` and returns the largest absolute
/// difference between stored and recomputed teacher distances.
pub fn recompute_distance_error<T: Scalar>(model: &ModelSnapshot<T>, store: &LabelStore, images: &[Vec<T>]) -> Result<f64> {
    if store.mode != LabelMode::Dbr {
        return Err(Error::ModeMismatch { expected: LabelMode::Dbr.to_string(), found: store.mode.to_string() });
    }
    let shape = model.input_shape();
    let mut worst = 0.0f64;
    for chunk in store.records.chunks(256) {
        let mixes: Vec<Vec<T>> = chunk
            .iter()
            .map(|r| {
                let (i, j) = (r.org_idx as usize, r.aug_idx as usize);
                for idx in [i, j] {
                    if idx >= images.len() {
                        return Err(Error::DanglingIndex { index: idx, len: images.len() });
                    }
                }
                mixer::apply(&r.spec, &images[i], &images[j], shape)
            })
            .collect::<Result<_>>()?;
        let views: Vec<&[T]> = mixes.iter().map(|m| m.as_slice()).collect();
        let trace = model.forward(&Tensor::stack(&views, &shape)?)?;
        for (row, r) in chunk.iter().enumerate() {
            if let Payload::Dbr { d_org, d_aug } = r.payload {
                let (a, b) = dbr_distances(trace.probs(row), r.y_org as usize, r.y_aug as usize)?;
                worst = worst.max((a.as_f64() - d_org as f64).abs()).max((b.as_f64() - d_aug as f64).abs());
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_ops::PixelBox;
    use proptest::prelude::*;

    fn spec(seed: u64) -> AugmentSpec {
        AugmentSpec::sample(MixMethod::Cutmix, 16, 16, seed)
    }

    fn store(mode: LabelMode, k: usize, n: usize) -> LabelStore {
        let records = (0..n)
            .map(|i| LabelRecord {
                org_idx: i as u32,
                aug_idx: ((i + 1) % n) as u32,
                y_org: (i % k) as u16,
                y_aug: ((i + 1) % k) as u16,
                spec: spec(i as u64),
                payload: match mode {
                    LabelMode::Dbr => Payload::Dbr { d_org: 0.1 * i as f32, d_aug: 2.5 },
                    LabelMode::Sl => Payload::Soft(vec![1.0 / k as f32; k]),
                    LabelMode::Cl => Payload::Compact { p_org: 0.6, p_aug: 0.3 },
                    LabelMode::Oh => Payload::OneHot,
                },
            })
            .collect();
        LabelStore { mode, mix: MixMethod::Cutmix, num_classes: k, records }
    }

    #[test]
    fn distance_examples() {
        let (a, b) = dbr_distances(&[1.0f64, 0.0, 0.0], 0, 1).unwrap();
        assert!(a.abs() < 1e-11);
        assert!((b + DIST_FLOOR.ln()).abs() < 1e-9);
        let u = vec![0.1f64; 10];
        let (a, b) = dbr_distances(&u, 3, 7).unwrap();
        assert!((a - 10f64.ln()).abs() < 1e-9 && (b - 10f64.ln()).abs() < 1e-9);
        let (a, b) = dbr_distances(&[0.7f64, 0.2, 0.1], 0, 1).unwrap();
        assert!((a - 0.35667).abs() < 1e-4 && (b - 1.60944).abs() < 1e-4);
        assert!(dbr_distances(&[0.7f64, 0.7], 0, 1).is_err());
        assert!(dbr_distances(&[0.5f64, 0.5], 0, 2).is_err());
    }

    #[test]
    fn record_sizes() {
        assert_eq!(LabelMode::Dbr.record_bytes(1000), 40);
        assert_eq!(LabelMode::Sl.record_bytes(1000), 32 + 4000);
        assert_eq!(LabelMode::Sl.label_bytes(1000) / LabelMode::Dbr.label_bytes(1000), 500);
        assert_eq!(LabelMode::Oh.record_bytes(7), RECORD_PREFIX_BYTES);
        for mode in LabelMode::ALL {
            let s = store(mode, 10, 5);
            assert_eq!(s.to_bytes().len(), s.byte_size());
        }
    }

    #[test]
    fn stores_roundtrip_bit_exactly() {
        for mode in LabelMode::ALL {
            let s = store(mode, 10, 7);
            let bytes = s.to_bytes();
            let back = LabelStore::from_bytes(&bytes, Some(mode)).unwrap();
            assert_eq!(back, s);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn corrupt_and_mismatched_stores_are_rejected() {
        let bytes = store(LabelMode::Dbr, 10, 4).to_bytes();
        assert!(matches!(LabelStore::from_bytes(&bytes[..bytes.len() - 3], None), Err(Error::Checksum { .. })));
        assert!(matches!(LabelStore::from_bytes(&bytes, Some(LabelMode::Sl)), Err(Error::ModeMismatch { .. })));
        let mut v2 = bytes[..bytes.len() - 4].to_vec();
        v2[4] = 2;
        let crc = crc32fast::hash(&v2);
        v2.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(LabelStore::from_bytes(&v2, None), Err(Error::Version { found: 2, .. })));
    }

    #[test]
    fn dbr_record_layout_is_fixed() {
        let s = LabelStore {
            mode: LabelMode::Dbr,
            mix: MixMethod::Cutmix,
            num_classes: 3,
            records: vec![LabelRecord {
                org_idx: 1,
                aug_idx: 2,
                y_org: 0,
                y_aug: 2,
                spec: AugmentSpec { method: MixMethod::Cutmix, lam: 0.5, bbox: PixelBox::new(1, 2, 3, 4), seed: 9 },
                payload: Payload::Dbr { d_org: 0.25, d_aug: 1.5 },
            }],
        };
        let b = s.to_bytes();
        assert_eq!(&b[..4], b"NRRD");
        assert_eq!(b[6], 0);
        assert_eq!(b[7], 1);
        let r = &b[16..56];
        assert_eq!(&r[0..4], &1u32.to_le_bytes());
        assert_eq!(&r[12..16], &0.5f32.to_le_bytes());
        assert_eq!(&r[16..24], &[1, 0, 2, 0, 3, 0, 4, 0]);
        assert_eq!(&r[24..32], &9u64.to_le_bytes());
        assert_eq!(&r[32..36], &0.25f32.to_le_bytes());
    }

    proptest! {
        #[test]
        fn dbr_size_is_constant_in_k(k in 2usize..2000, n in 1usize..20) {
            let a = store(LabelMode::Dbr, k, n);
            let b = store(LabelMode::Dbr, 2, n);
            prop_assert_eq!(a.to_bytes().len(), b.to_bytes().len());
            let sl = store(LabelMode::Sl, k, n);
            prop_assert_eq!(sl.to_bytes().len(), HEADER_BYTES + FOOTER_BYTES + n * (RECORD_PREFIX_BYTES + 4 * k));
        }
    }
}
