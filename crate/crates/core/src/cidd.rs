//! Critical-based initial data discovery: CAM-guided cropping, hardest-patch
//! selection, and grid assembly of the initial synthetic images.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cam::{cam_from_features, finalize_cam, CamMap};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::image_ops::{crop_resize, PixelBox};
use crate::mixer::AugmentSpec;
use crate::model::ModelSnapshot;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Hardest patches first.
    #[default]
    Lowest,
    /// Most confident patches first.
    Highest,
}

impl FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lowest" => Ok(Selection::Lowest),
            "highest" => Ok(Selection::Highest),
            _ => Err(Error::Config(format!("unknown selection `{s}` (expected lowest or highest)"))),
        }
    }
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Selection::Lowest => "lowest",
            Selection::Highest => "highest",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CiddConfig {
    pub ipc: usize,
    /// Patches per synthetic image; a perfect square.
    pub beta: usize,
    /// Candidate crops per source image.
    pub k: usize,
    /// Crops kept per source image, by CAM mass.
    pub t: usize,
    pub scale: (f64, f64),
    pub aspect: (f64, f64),
    pub selection: Selection,
    /// Caps the number of source images scanned per class.
    pub sources_per_class: Option<usize>,
    pub seed: u64,
}

impl Default for CiddConfig {
    fn default() -> Self {
        Self {
            ipc: 10,
            beta: 1,
            k: 30,
            t: 2,
            scale: (0.25, 1.0),
            aspect: (0.75, 4.0 / 3.0),
            selection: Selection::Lowest,
            sources_per_class: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub source_id: usize,
    pub bbox: PixelBox,
    pub cam_mass: f64,
    pub confidence: f64,
    pub class_id: usize,
}

/// Where a patch landed in the assembled image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub patch: Patch,
    pub cell: PixelBox,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PatchPool {
    pub per_class: Vec<Vec<Patch>>,
}

/// An assembled (and possibly refined and relabeled) synthetic image.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticRecord<T> {
    pub image: Vec<T>,
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

impl<T> SyntheticRecord<T> {
    pub fn new(image: Vec<T>, class_id: usize, provenance: Vec<Placement>) -> Self {
        Self {
            image,
            class_id,
            provenance,
            partner_idx: None,
            aug_spec: None,
            d_org: None,
            d_aug: None,
            refined: false,
            loss_initial: None,
            loss_final: None,
        }
    }
}

fn validate_ranges(scale: (f64, f64), aspect: (f64, f64)) -> Result<()> {
    if !(scale.0 > 0.0 && scale.0 <= scale.1 && scale.1 <= 1.0) {
        return Err(Error::InvalidArgument(format!("scale range {scale:?} must lie in (0, 1]")));
    }
    if !(aspect.0 > 0.0 && aspect.0 <= aspect.1) {
        return Err(Error::InvalidArgument(format!("aspect range {aspect:?} is invalid")));
    }
    Ok(())
}

/// `k` random boxes with area fraction in `scale` and width/height in `aspect`.
pub fn crop_candidates(h: usize, w: usize, k: usize, scale: (f64, f64), aspect: (f64, f64), seed: u64) -> Result<Vec<PixelBox>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    validate_ranges(scale, aspect)?;
    if (scale.0 * (h * w) as f64) < 1.0 {
        return Err(Error::InvalidArgument(format!("minimum scale {} is below one pixel of a {h}x{w} image", scale.0)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let area = (h * w) as f64;
    let (la, lb) = (aspect.0.ln(), aspect.1.ln());
    let mut boxes = Vec::with_capacity(k);
    for _ in 0..k {
        let mut chosen = None;
        for _ in 0..10 {
            let target = area * rng.random_range(scale.0..=scale.1);
            let ratio = rng.random_range(la..=lb).exp();
            let bw = (target * ratio).sqrt().round() as usize;
            let bh = (target / ratio).sqrt().round() as usize;
            if bw >= 1 && bh >= 1 && bw <= w && bh <= h {
                chosen = Some((bh, bw));
                break;
            }
        }
        // fall back to the largest allowed area at square aspect, clipped to the image
        let (bh, bw) = chosen.unwrap_or_else(|| {
            let side = scale.1.sqrt();
            (((h as f64 * side).round() as usize).clamp(1, h), ((w as f64 * side).round() as usize).clamp(1, w))
        });
        let top = rng.random_range(0..=h - bh);
        let left = rng.random_range(0..=w - bw);
        boxes.push(PixelBox::new(top, left, bh, bw));
    }
    Ok(boxes)
}

pub fn cam_mass<T: Scalar>(cam: &CamMap<T>, b: PixelBox) -> f64 {
    let mut total = 0.0;
    for y in b.top..b.top + b.height {
        for x in b.left..b.left + b.width {
            total += cam.at(y, x).as_f64();
        }
    }
    total
}

/// The `t` boxes with the largest CAM mass, largest first; ties keep generation order.
pub fn select_top_cam<T: Scalar>(boxes: &[PixelBox], cam: &CamMap<T>, t: usize) -> Result<Vec<(PixelBox, f64)>> {
    if t > boxes.len() {
        return Err(Error::InvalidArgument(format!("cannot keep {t} of {} boxes", boxes.len())));
    }
    if !cam.normalized {
        return Err(Error::NotNormalized);
    }
    let mut scored: Vec<(PixelBox, f64)> = boxes.iter().map(|&b| (b, cam_mass(cam, b))).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(t);
    Ok(scored)
}

/// `g` patches of `class_id` by confidence, returned in ascending confidence order.
pub fn select_hardest(pool: &PatchPool, class_id: usize, g: usize, selection: Selection) -> Result<Vec<Patch>> {
    let list = pool.per_class.get(class_id).map(Vec::as_slice).unwrap_or(&[]);
    if list.len() < g {
        return Err(Error::InsufficientPool { class: class_id, available: list.len(), required: g });
    }
    let mut sorted = list.to_vec();
    sorted.sort_by(|a, b| a.confidence.total_cmp(&b.confidence));
    let chosen = match selection {
        Selection::Lowest => sorted[..g].to_vec(),
        Selection::Highest => sorted[sorted.len() - g..].to_vec(),
    };
    Ok(chosen)
}

fn grid_side(beta: usize) -> Result<usize> {
    let s = (beta as f64).sqrt().round() as usize;
    if beta == 0 || s * s != beta {
        return Err(Error::InvalidArgument(format!("beta = {beta} is not a perfect square")));
    }
    Ok(s)
}

/// Grid cells of a `side x side` layout, row-major.
pub fn grid_cells(h: usize, w: usize, side: usize) -> Vec<PixelBox> {
    let edge = |i: usize, n: usize| i * n / side;
    let mut cells = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let (t, b) = (edge(r, h), edge(r + 1, h));
            let (l, rr) = (edge(c, w), edge(c + 1, w));
            cells.push(PixelBox::new(t, l, b - t, rr - l));
        }
    }
    cells
}

/// Resizes each patch into its grid cell, filling row-major in the given order.
pub fn assemble<T: Scalar>(patches: &[Patch], class_id: usize, source: &Dataset<T>) -> Result<SyntheticRecord<T>> {
    let side = grid_side(patches.len())?;
    let [c, h, w] = source.image_shape();
    if h < side || w < side {
        return Err(Error::InvalidArgument(format!("{h}x{w} image cannot hold a {side}x{side} grid")));
    }
    let mut image = vec![T::zero(); c * h * w];
    let mut provenance = Vec::with_capacity(patches.len());
    for (patch, cell) in patches.iter().zip(grid_cells(h, w, side)) {
        if patch.class_id != class_id {
            return Err(Error::InvalidArgument(format!("patch of class {} in a class {class_id} image", patch.class_id)));
        }
        if patch.source_id >= source.len() || !patch.bbox.fits(h, w) {
            return Err(Error::InvalidArgument(format!("patch {patch:?} does not fit the source dataset")));
        }
        let tile = crop_resize(source.image(patch.source_id), c, h, w, patch.bbox, cell.height, cell.width);
        for ch in 0..c {
            for y in 0..cell.height {
                let dst = ch * h * w + (cell.top + y) * w + cell.left;
                let src = ch * cell.height * cell.width + y * cell.width;
                image[dst..dst + cell.width].copy_from_slice(&tile[src..src + cell.width]);
            }
        }
        provenance.push(Placement { patch: patch.clone(), cell });
    }
    Ok(SyntheticRecord::new(image, class_id, provenance))
}

/// Scans one class: CAM of every source image, top-`t` crops by CAM mass,
/// confidences of those crops resized to full input size.
pub fn build_class_pool<T: Scalar>(model: &ModelSnapshot<T>, source: &Dataset<T>, class_id: usize, cfg: &CiddConfig) -> Result<Vec<Patch>> {
    let [c, h, w] = source.image_shape();
    let mut ids = source.indices_of_class(class_id);
    if let Some(cap) = cfg.sources_per_class {
        ids.truncate(cap);
    }
    let weights = model.class_weights(class_id).to_vec();
    let mut pool = Vec::new();
    for chunk in ids.chunks(128) {
        let views: Vec<&[T]> = chunk.iter().map(|&i| source.image(i)).collect();
        let trace = model.forward(&Tensor::stack(&views, &[c, h, w])?)?;
        let fs = trace.pass.features.shape().to_vec();
        let mut crops: Vec<Vec<T>> = Vec::new();
        let mut pending = Vec::new();
        for (row, &sid) in chunk.iter().enumerate() {
            let raw = CamMap {
                height: fs[2],
                width: fs[3],
                values: cam_from_features(trace.pass.features.item(row), fs[1], fs[2], fs[3], &weights),
                class_id,
                normalized: false,
            };
            let cam = finalize_cam(&raw, h, w)?;
            let boxes = crop_candidates(h, w, cfg.k, cfg.scale, cfg.aspect, crate::derive_seed(cfg.seed, sid as u64, 1))?;
            for (b, mass) in select_top_cam(&boxes, &cam, cfg.t.min(cfg.k))? {
                crops.push(crop_resize(source.image(sid), c, h, w, b, h, w));
                pending.push((sid, b, mass));
            }
        }
        let views: Vec<&[T]> = crops.iter().map(|v| v.as_slice()).collect();
        let conf = model.confidences(&Tensor::stack(&views, &[c, h, w])?)?;
        for ((sid, b, mass), s) in pending.into_iter().zip(conf) {
            pool.push(Patch { source_id: sid, bbox: b, cam_mass: mass, confidence: s.as_f64(), class_id });
        }
    }
    Ok(pool)
}

/// Full discovery: patch pool per class, then `ipc` assembled images per class.
pub fn discover<T: Scalar>(model: &ModelSnapshot<T>, source: &Dataset<T>, cfg: &CiddConfig) -> Result<(PatchPool, Vec<SyntheticRecord<T>>)> {
    if source.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if source.image_shape() != model.input_shape() {
        return Err(Error::Shape("source images do not match the model input".into()));
    }
    grid_side(cfg.beta)?;
    let g = cfg.beta * cfg.ipc;
    let mut pool = PatchPool::default();
    let mut records = Vec::new();
    for class_id in 0..source.num_classes {
        pool.per_class.push(build_class_pool(model, source, class_id, cfg)?);
        let chosen = select_hardest(&pool, class_id, g, cfg.selection)?;
        for group in chosen.chunks(cfg.beta) {
            records.push(assemble(group, class_id, source)?);
        }
    }
    Ok((pool, records))
}

/// Baseline: `ipc` random real images per class, unmodified.
pub fn random_real<T: Scalar>(source: &Dataset<T>, ipc: usize, seed: u64) -> Result<Vec<SyntheticRecord<T>>> {
    let [_, h, w] = source.image_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for class_id in 0..source.num_classes {
        let mut ids = source.indices_of_class(class_id);
        if ids.len() < ipc {
            return Err(Error::InsufficientPool { class: class_id, available: ids.len(), required: ipc });
        }
        ids.shuffle(&mut rng);
        for &sid in &ids[..ipc] {
            let patch = Patch { source_id: sid, bbox: PixelBox::full(h, w), cam_mass: 0.0, confidence: 0.0, class_id };
            records.push(SyntheticRecord::new(
                source.image(sid).to_vec(),
                class_id,
                vec![Placement { patch, cell: PixelBox::full(h, w) }],
            ));
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, prop_assume, proptest};

    fn patch(source_id: usize, confidence: f64) -> Patch {
        Patch { source_id, bbox: PixelBox::full(4, 4), cam_mass: 0.0, confidence, class_id: 0 }
    }

    #[test]
    fn full_scale_single_crop_is_whole_image() {
        assert_eq!(crop_candidates(32, 32, 1, (1.0, 1.0), (0.75, 4.0 / 3.0), 3).unwrap(), vec![PixelBox::full(32, 32)]);
    }

    #[test]
    fn crops_are_deterministic_and_bounded() {
        let a = crop_candidates(32, 32, 30, (0.25, 1.0), (0.75, 4.0 / 3.0), 11).unwrap();
        assert_eq!(a, crop_candidates(32, 32, 30, (0.25, 1.0), (0.75, 4.0 / 3.0), 11).unwrap());
        for b in &a {
            assert!(b.fits(32, 32) && b.height > 0 && b.width > 0);
            // one pixel of rounding on each side
            let lo = (0.25 * 1024.0f64).sqrt() - 1.0;
            let hi = 32.0;
            assert!((b.area() as f64) >= lo * lo && (b.area() as f64) <= hi * hi, "{b:?}");
        }
        assert!(crop_candidates(32, 32, 0, (0.25, 1.0), (0.75, 1.3), 0).is_err());
        assert!(crop_candidates(32, 32, 3, (0.25, 1.5), (0.75, 1.3), 0).is_err());
    }

    #[test]
    fn top_cam_quadrant() {
        let mut values = vec![0.0; 16];
        values[2 * 4 + 3] = 1.0;
        values[3 * 4 + 2] = 0.5;
        let cam = CamMap { height: 4, width: 4, values, class_id: 0, normalized: true };
        let quads = grid_cells(4, 4, 2);
        let top = select_top_cam(&quads, &cam, 1).unwrap();
        assert_eq!(top[0].0, quads[3]);
        assert_eq!(select_top_cam(&quads, &cam, 4).unwrap().len(), 4);
        assert!(select_top_cam(&quads, &cam, 5).is_err());
    }

    #[test]
    fn top_cam_matches_brute_force_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cam = CamMap { height: 8, width: 8, values: (0..64).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<f64>>(), class_id: 0, normalized: true };
        let boxes = crop_candidates(8, 8, 10, (0.25, 1.0), (0.75, 4.0 / 3.0), 9).unwrap();
        let got = select_top_cam(&boxes, &cam, 3).unwrap();
        let mut brute: Vec<(usize, f64)> = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let mut s = 0.0;
                for y in 0..8 {
                    for x in 0..8 {
                        if b.contains(y, x) {
                            s += cam.values[y * 8 + x];
                        }
                    }
                }
                (i, s)
            })
            .collect();
        brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for (g, (i, s)) in got.iter().zip(&brute) {
            assert_eq!(g.0, boxes[*i]);
            assert!((g.1 - s).abs() < 1e-9);
        }
    }

    #[test]
    fn hardest_selection() {
        let pool = PatchPool { per_class: vec![vec![patch(0, 0.9), patch(1, 0.5), patch(2, 0.3)]] };
        assert_eq!(select_hardest(&pool, 0, 1, Selection::Lowest).unwrap()[0].source_id, 2);
        assert_eq!(select_hardest(&pool, 0, 1, Selection::Highest).unwrap()[0].source_id, 0);
        assert_eq!(select_hardest(&pool, 0, 3, Selection::Lowest).unwrap().len(), 3);
        assert!(matches!(select_hardest(&pool, 0, 4, Selection::Lowest), Err(Error::InsufficientPool { .. })));
    }

    fn source() -> Dataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let imgs: Vec<f64> = (0..4 * 3 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        Dataset::new(Tensor::from_vec(&[4, 3, 8, 8], imgs).unwrap(), vec![0; 4], 1).unwrap()
    }

    #[test]
    fn assemble_places_resized_patches() {
        let src = source();
        let boxes = [PixelBox::new(0, 0, 6, 5), PixelBox::new(2, 1, 5, 7), PixelBox::full(8, 8), PixelBox::new(3, 3, 4, 4)];
        let patches: Vec<Patch> = boxes.iter().enumerate().map(|(i, &b)| Patch { bbox: b, ..patch(i, 0.1) }).collect();
        let rec = assemble(&patches, 0, &src).unwrap();
        assert_eq!(rec.provenance.len(), 4);
        assert!(!rec.refined);
        for (p, place) in patches.iter().zip(&rec.provenance) {
            let tile = crop_resize(src.image(p.source_id), 3, 8, 8, p.bbox, 4, 4);
            let back = crop_resize(&rec.image, 3, 8, 8, place.cell, 4, 4);
            assert_eq!(tile, back);
        }
        let single = assemble(&patches[..1], 0, &src).unwrap();
        assert_eq!(single.image, crop_resize(src.image(0), 3, 8, 8, boxes[0], 8, 8));
        assert!(assemble(&patches[..3], 0, &src).is_err());
    }

    proptest! {
        #[test]
        fn grid_cells_partition_the_image(h in 1usize..40, w in 1usize..40, side in 1usize..4) {
            prop_assume!(h >= side && w >= side);
            let cells = grid_cells(h, w, side);
            prop_assert_eq!(cells.iter().map(PixelBox::area).sum::<usize>(), h * w);
            prop_assert!(cells.iter().all(|c| c.fits(h, w) && c.area() > 0));
        }

        #[test]
        fn lowest_selection_is_minimum_subset(conf in prop::collection::vec(0.0f64..1.0, 1..40), g in 1usize..40) {
            prop_assume!(g <= conf.len());
            let pool = PatchPool { per_class: vec![conf.iter().enumerate().map(|(i, &c)| patch(i, c)).collect()] };
            let chosen = select_hardest(&pool, 0, g, Selection::Lowest).unwrap();
            let mut sorted = conf.clone();
            sorted.sort_by(f64::total_cmp);
            let picked: Vec<f64> = chosen.iter().map(|p| p.confidence).collect();
            prop_assert_eq!(&picked[..], &sorted[..g]);
            let mean_all = conf.iter().sum::<f64>() / conf.len() as f64;
            prop_assert!(picked.iter().sum::<f64>() / g as f64 <= mean_all + 1e-12);
        }
    }
}
