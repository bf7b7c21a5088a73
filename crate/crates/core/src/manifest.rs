//! On-disk synthetic dataset: `images.bin` (raw little-endian pixels),
//! `manifest.json` (per-image class, provenance, partner, mix, losses) and
//! optional PNG previews.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cidd::{Placement, SyntheticRecord};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::mixer::AugmentSpec;
use crate::model::write_atomic;
use crate::scalar::Scalar;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub class_id: usize,
    pub provenance: Vec<Placement>,
    pub partner_idx: Option<usize>,
    pub aug_spec: Option<AugmentSpec>,
    pub d_org: Option<f64>,
    pub d_aug: Option<f64>,
    pub refined: bool,
    pub loss_initial: Option<f64>,
    pub loss_final: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dtype: String,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub normalization: Normalization,
    /// CRC32 of `images.bin`.
    pub images_crc: u32,
    /// Free-form run description (seeds, config digest).
    pub notes: serde_json::Value,
    pub records: Vec<RecordEntry>,
}

pub struct SyntheticSet<T> {
    pub manifest: Manifest,
    pub records: Vec<SyntheticRecord<T>>,
}

impl<T: Scalar> SyntheticSet<T> {
    pub fn images(&self) -> Vec<Vec<T>> {
        self.records.iter().map(|r| r.image.clone()).collect()
    }
}

pub fn save_synthetic<T: Scalar>(
    dir: &Path,
    records: &[SyntheticRecord<T>],
    input_shape: [usize; 3],
    num_classes: usize,
    normalization: &Normalization,
    notes: serde_json::Value,
    previews: bool,
) -> Result<Manifest> {
    let per = input_shape.iter().product::<usize>();
    let mut blob = Vec::with_capacity(records.len() * per * std::mem::size_of::<T>());
    for r in records {
        if r.image.len() != per {
            return Err(Error::Shape(format!("record image of {} values, expected {per}", r.image.len())));
        }
        blob.extend(T::to_le_bytes_vec(&r.image));
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        dtype: T::DTYPE.to_string(),
        input_shape,
        num_classes,
        normalization: normalization.clone(),
        images_crc: crc32fast::hash(&blob),
        notes,
        records: records
            .iter()
            .map(|r| RecordEntry {
                class_id: r.class_id,
                provenance: r.provenance.clone(),
                partner_idx: r.partner_idx,
                aug_spec: r.aug_spec,
                d_org: r.d_org,
                d_aug: r.d_aug,
                refined: r.refined,
                loss_initial: r.loss_initial,
                loss_final: r.loss_final,
            })
            .collect(),
    };
    write_atomic(&dir.join(IMAGES_FILE), &blob)?;
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    if previews {
        let [c, h, w] = input_shape;
        let pdir = dir.join("previews");
        std::fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        for (i, r) in records.iter().enumerate() {
            let rgb = normalization.denormalize(&r.image, h * w);
            let mut img = image::RgbImage::new(w as u32, h as u32);
            for (p, px) in img.pixels_mut().enumerate() {
                let ch = |k: usize| (rgb[k.min(c - 1) * h * w + p] * 255.0).round() as u8;
                *px = image::Rgb([ch(0), ch(1), ch(2)]);
            }
            let path = pdir.join(format!("{i:05}_c{}.png", r.class_id));
            img.save(&path).map_err(|e| Error::Image(e.to_string()))?;
        }
    }
    Ok(manifest)
}

pub fn load_synthetic<T: Scalar>(dir: &Path) -> Result<SyntheticSet<T>> {
    let mpath = dir.join(MANIFEST_FILE);
    let ipath = dir.join(IMAGES_FILE);
    for p in [&mpath, &ipath] {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.clone()));
        }
    }
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Version { found: manifest.version as u16, expected: MANIFEST_VERSION as u16 });
    }
    if manifest.dtype != T::DTYPE {
        return Err(Error::Corrupt(format!("manifest holds {} images, requested {}", manifest.dtype, T::DTYPE)));
    }
    let blob = std::fs::read(&ipath).map_err(|e| Error::io(&ipath, e))?;
    let computed = crc32fast::hash(&blob);
    if computed != manifest.images_crc {
        return Err(Error::Checksum { stored: manifest.images_crc, computed });
    }
    let per = manifest.input_shape.iter().product::<usize>() * std::mem::size_of::<T>();
    if blob.len() != per * manifest.records.len() {
        return Err(Error::Corrupt("image blob does not match the record count".into()));
    }
    let records = manifest
        .records
        .iter()
        .zip(blob.chunks_exact(per))
        .map(|(e, bytes)| SyntheticRecord {
            image: T::from_le_bytes_slice(bytes),
            class_id: e.class_id,
            provenance: e.provenance.clone(),
            partner_idx: e.partner_idx,
            aug_spec: e.aug_spec,
            d_org: e.d_org,
            d_aug: e.d_aug,
            refined: e.refined,
            loss_initial: e.loss_initial,
            loss_final: e.loss_final,
        })
        .collect();
    Ok(SyntheticSet { manifest, records })
}
