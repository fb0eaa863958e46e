//! Dataset model, deterministic synthetic scene generator, annotation
//! save/load, and batch assembly.
//!
//! A dataset is a directory: `annotations.json` (one JSON document) plus a
//! `images/` folder of raw pixel containers. Synthetic scenes render each
//! identity as a striped rectangle whose color triplet and stripe phase are
//! a deterministic function of the identity, over seeded noise backgrounds,
//! so identity is linearly separable by construction and a toy model can
//! reach near-perfect search when the wiring is right.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::rng::{counter_rng, STREAM_DATA_GEN};

pub const ANNOTATION_VERSION: u32 = 1;
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const IMAGES_DIR: &str = "images";

// 16-byte pixel container header: magic, dtype, h, w, c
const PIXEL_MAGIC: u16 = 0x5053;
const DTYPE_U8: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Gallery,
    Query,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub id: u32,
    pub file: String,
    pub width: u32,
    pub height: u32,
    pub camera_id: u32,
    pub split: Split,
}

/// One person instance: absolute pixel box plus identity (`-1` = unlabeled).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonRec {
    pub image_id: u32,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub identity: i64,
}

impl PersonRec {
    pub fn bbox(&self) -> Result<BBox> {
        BBox::absolute(self.x1, self.y1, self.x2, self.y2)
    }
}

/// A query: a person annotation (by index into `persons`) inside a query
/// image; the box is the annotated target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRec {
    pub image_id: u32,
    pub person_ref: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDoc {
    pub version: u32,
    pub images: Vec<ImageMeta>,
    pub persons: Vec<PersonRec>,
    pub queries: Vec<QueryRec>,
}

/// In-memory dataset: the annotation document plus decoded pixels
/// (`[H, W, 3]` u8, parallel to `doc.images`).
#[derive(Debug, Clone, PartialEq)]
pub struct SearchDataset {
    pub doc: DatasetDoc,
    pub pixels: Vec<Array3<u8>>,
}

impl SearchDataset {
    pub fn num_images(&self) -> usize {
        self.doc.images.len()
    }

    /// Number of labeled identities (`L`); ids are contiguous `[0, L)`.
    pub fn num_labeled(&self) -> usize {
        self.doc
            .persons
            .iter()
            .filter(|p| p.identity >= 0)
            .map(|p| p.identity as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn image_index(&self, id: u32) -> Option<usize> {
        self.doc.images.iter().position(|m| m.id == id)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.doc
            .images
            .iter()
            .enumerate()
            .filter_map(|(i, m)| (m.split == split).then_some(i))
            .collect()
    }

    /// Ground-truth boxes and identities of one image.
    pub fn ground_truth(&self, image_idx: usize) -> Result<(Vec<BBox>, Vec<i64>)> {
        let id = self.doc.images[image_idx].id;
        let mut boxes = Vec::new();
        let mut ids = Vec::new();
        for p in &self.doc.persons {
            if p.image_id == id {
                boxes.push(p.bbox()?);
                ids.push(p.identity);
            }
        }
        Ok((boxes, ids))
    }

    /// Resolve a query to `(image index, target box, identity)`.
    pub fn query_target(&self, q: &QueryRec) -> Result<(usize, BBox, i64)> {
        let img = self
            .image_index(q.image_id)
            .ok_or_else(|| Error::Dataset(format!("query references missing image {}", q.image_id)))?;
        let p = self
            .doc
            .persons
            .get(q.person_ref)
            .ok_or_else(|| Error::Dataset(format!("query person_ref {} out of range", q.person_ref)))?;
        Ok((img, p.bbox()?, p.identity))
    }

    /// Validate every structural invariant; called by the loader and after
    /// generation.
    pub fn validate(&self) -> Result<()> {
        let doc = &self.doc;
        if doc.version != ANNOTATION_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported annotation version {}",
                doc.version
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for m in &doc.images {
            if !seen.insert(m.id) {
                return Err(Error::Dataset(format!("duplicate image id {}", m.id)));
            }
            if m.width == 0 || m.height == 0 {
                return Err(Error::Dataset(format!("image {} has empty size", m.id)));
            }
        }
        if self.pixels.len() != doc.images.len() {
            return Err(Error::Dataset("pixel array count differs from image count".to_string()));
        }
        for (m, px) in doc.images.iter().zip(&self.pixels) {
            let (h, w, c) = px.dim();
            if (h, w, c) != (m.height as usize, m.width as usize, 3) {
                return Err(Error::Dataset(format!(
                    "image {} pixels {h}x{w}x{c} disagree with metadata {}x{}x3",
                    m.id, m.height, m.width
                )));
            }
        }
        // persons
        let mut labeled_ids = std::collections::BTreeSet::new();
        let mut images_per_id: std::collections::BTreeMap<i64, std::collections::BTreeSet<u32>> =
            Default::default();
        for (k, p) in doc.persons.iter().enumerate() {
            let img = self
                .image_index(p.image_id)
                .ok_or_else(|| {
                    Error::Dataset(format!("person {k} references missing image {}", p.image_id))
                })?;
            let m = &doc.images[img];
            if p.identity < -1 {
                return Err(Error::Dataset(format!(
                    "person {k}: identity {} outside the labeled/unlabeled namespace",
                    p.identity
                )));
            }
            if !(p.x1 >= 0.0
                && p.y1 >= 0.0
                && p.x1 < p.x2
                && p.y1 < p.y2
                && p.x2 <= m.width as f64
                && p.y2 <= m.height as f64)
            {
                return Err(Error::Dataset(format!(
                    "person {k}: box ({}, {}, {}, {}) invalid in image {} of {}x{}",
                    p.x1, p.y1, p.x2, p.y2, p.image_id, m.width, m.height
                )));
            }
            if p.identity >= 0 {
                labeled_ids.insert(p.identity);
                images_per_id.entry(p.identity).or_default().insert(p.image_id);
            }
        }
        // contiguous labeled range
        for (want, got) in labeled_ids.iter().enumerate() {
            if *got != want as i64 {
                return Err(Error::Dataset(format!(
                    "labeled identities not contiguous: expected {want}, found {got}"
                )));
            }
        }
        // census: every labeled identity in at least two images
        for (id, imgs) in &images_per_id {
            if imgs.len() < 2 {
                return Err(Error::Dataset(format!(
                    "identity {id} appears in only {} image(s)",
                    imgs.len()
                )));
            }
        }
        // queries
        let gallery_ids: std::collections::BTreeSet<i64> = doc
            .persons
            .iter()
            .filter(|p| {
                p.identity >= 0
                    && self
                        .image_index(p.image_id)
                        .map(|i| doc.images[i].split == Split::Gallery)
                        .unwrap_or(false)
            })
            .map(|p| p.identity)
            .collect();
        for (k, q) in doc.queries.iter().enumerate() {
            let img = self
                .image_index(q.image_id)
                .ok_or_else(|| Error::Dataset(format!("query {k} references missing image {}", q.image_id)))?;
            if doc.images[img].split != Split::Query {
                return Err(Error::Dataset(format!(
                    "query {k} references image {} outside the query split",
                    q.image_id
                )));
            }
            let Some(person) = doc.persons.get(q.person_ref) else {
                return Err(Error::Dataset(format!(
                    "query {k}: person_ref {} out of range",
                    q.person_ref
                )));
            };
            if person.image_id != q.image_id {
                return Err(Error::Dataset(format!(
                    "query {k}: person_ref {} belongs to image {} not {}",
                    q.person_ref, person.image_id, q.image_id
                )));
            }
            if person.identity < 0 {
                return Err(Error::Dataset(format!("query {k} targets an unlabeled person")));
            }
            if !gallery_ids.contains(&person.identity) {
                return Err(Error::Dataset(format!(
                    "query identity {} absent from the gallery split",
                    person.identity
                )));
            }
        }
        Ok(())
    }

    /// Write `annotations.json` plus one pixel container per image.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join(IMAGES_DIR))?;
        for (m, px) in self.doc.images.iter().zip(&self.pixels) {
            write_pixels(&dir.join(&m.file), px)?;
        }
        let json = serde_json::to_string_pretty(&self.doc)?;
        fs::write(dir.join(ANNOTATIONS_FILE), json)?;
        Ok(())
    }
}

/// Load and validate a dataset directory.
pub fn load_annotations(dir: &Path) -> Result<SearchDataset> {
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let text = fs::read_to_string(&ann_path).map_err(|e| Error::DatasetFile {
        path: ann_path.clone(),
        message: e.to_string(),
    })?;
    let doc: DatasetDoc = serde_json::from_str(&text).map_err(|e| Error::DatasetFile {
        path: ann_path,
        message: format!("malformed annotations: {e}"),
    })?;
    let mut pixels = Vec::with_capacity(doc.images.len());
    for m in &doc.images {
        let p = dir.join(&m.file);
        let px = read_pixels(&p)?;
        pixels.push(px);
    }
    let ds = SearchDataset { doc, pixels };
    ds.validate()?;
    Ok(ds)
}

/// Raw pixel container: 16-byte header (magic, dtype, H, W, C), then
/// row-major `H x W x C` bytes.
pub fn write_pixels(path: &Path, px: &Array3<u8>) -> Result<()> {
    let (h, w, c) = px.dim();
    let mut f = fs::File::create(path)?;
    f.write_all(&PIXEL_MAGIC.to_le_bytes())?;
    f.write_all(&DTYPE_U8.to_le_bytes())?;
    f.write_all(&(h as u32).to_le_bytes())?;
    f.write_all(&(w as u32).to_le_bytes())?;
    f.write_all(&(c as u32).to_le_bytes())?;
    let flat = px.as_standard_layout();
    f.write_all(flat.as_slice().unwrap())?;
    Ok(())
}

pub fn read_pixels(path: &Path) -> Result<Array3<u8>> {
    let err = |message: String| Error::DatasetFile { path: path.to_path_buf(), message };
    let mut f = fs::File::open(path).map_err(|e| err(e.to_string()))?;
    let mut header = [0u8; 16];
    f.read_exact(&mut header).map_err(|e| err(format!("short header: {e}")))?;
    let magic = u16::from_le_bytes([header[0], header[1]]);
    let dtype = u16::from_le_bytes([header[2], header[3]]);
    if magic != PIXEL_MAGIC {
        return Err(err(format!("bad magic {magic:#06x}")));
    }
    if dtype != DTYPE_U8 {
        return Err(err(format!("unsupported dtype code {dtype}")));
    }
    let h = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut data = vec![0u8; h * w * c];
    f.read_exact(&mut data).map_err(|e| err(format!("short pixel data: {e}")))?;
    Array3::from_shape_vec((h, w, c), data).map_err(|e| err(format!("bad pixel shape: {e}")))
}

// ---------------------------------------------------------------------------
// synthetic generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub n_train_images: usize,
    pub n_gallery_images: usize,
    pub n_query_images: usize,
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    /// Inclusive range of persons per train/gallery image.
    pub persons_per_image: (usize, usize),
    /// Probability that a filler placement is an unlabeled distractor.
    pub unlabeled_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_identities: 8,
            n_train_images: 40,
            n_gallery_images: 20,
            n_query_images: 8,
            image_size: (96, 96),
            persons_per_image: (1, 3),
            unlabeled_fraction: 0.15,
            seed: 0,
        }
    }
}

/// Deterministic appearance of a labeled identity: a color triplet plus
/// stripe period and phase, spread over hue space.
pub fn identity_appearance(identity: usize) -> ([f64; 3], usize, usize) {
    let golden = 0.618_033_988_749_895;
    let hue = (identity as f64 * golden).fract();
    let color = hsv_to_rgb(hue, 0.85, 0.9);
    let period = 3 + identity % 4;
    let phase = identity % period;
    (color, period, phase)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor() as i64 % 6;
    let f = h * 6.0 - (h * 6.0).floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Generate a synthetic person-search dataset. Every labeled identity gets
/// at least two train appearances and two gallery appearances (split across
/// the two synthetic cameras); each query image features one labeled
/// identity as its annotated target.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SearchDataset> {
    let l = cfg.n_identities;
    let (pp_min, pp_max) = cfg.persons_per_image;
    if l == 0 || pp_min == 0 || pp_min > pp_max {
        return Err(Error::Config(
            "synthetic config: empty identities or bad persons_per_image".into(),
        ));
    }
    if cfg.n_query_images > 0 && cfg.n_gallery_images == 0 {
        return Err(Error::Config("synthetic config: queries need a gallery".into()));
    }
    if 2 * l > cfg.n_train_images * pp_max {
        return Err(Error::Config(format!(
            "synthetic config infeasible: {l} identities need {} train slots, capacity {}",
            2 * l,
            cfg.n_train_images * pp_max
        )));
    }
    if 2 * l > cfg.n_gallery_images * pp_max {
        return Err(Error::Config(format!(
            "synthetic config infeasible: {l} identities need {} gallery slots, capacity {}",
            2 * l,
            cfg.n_gallery_images * pp_max
        )));
    }
    let (ih, iw) = cfg.image_size;
    if ih < 32 || iw < 32 {
        return Err(Error::Config("synthetic config: image side below 32".into()));
    }

    let mut rng = counter_rng(cfg.seed, STREAM_DATA_GEN, 0);

    // plan placements per image
    let n_images = cfg.n_train_images + cfg.n_gallery_images + cfg.n_query_images;
    let mut plan: Vec<Vec<i64>> = (0..n_images).map(|_| Vec::new()).collect();
    let split_of = |k: usize| -> Split {
        if k < cfg.n_train_images {
            Split::Train
        } else if k < cfg.n_train_images + cfg.n_gallery_images {
            Split::Gallery
        } else {
            Split::Query
        }
    };
    // guaranteed appearances, round-robin
    for id in 0..l {
        for rep in 0..2 {
            plan[(2 * id + rep) % cfg.n_train_images].push(id as i64);
        }
    }
    for id in 0..l {
        for rep in 0..2 {
            // consecutive slots land on opposite image parities, hence the
            // two gallery views sit on different cameras
            plan[cfg.n_train_images + ((2 * id + rep) % cfg.n_gallery_images)].push(id as i64);
        }
    }
    // filler placements up to the per-image target
    for placements in plan.iter_mut().take(cfg.n_train_images + cfg.n_gallery_images) {
        let target = rng.gen_range(pp_min..=pp_max);
        while placements.len() < target {
            let unlabeled = rng.gen_range(0.0..1.0) < cfg.unlabeled_fraction;
            placements.push(if unlabeled { -1 } else { rng.gen_range(0..l) as i64 });
        }
    }
    // query images: one target identity each (round robin), optional extra
    for qi in 0..cfg.n_query_images {
        let k = cfg.n_train_images + cfg.n_gallery_images + qi;
        plan[k].push((qi % l) as i64);
        if rng.gen_range(0.0..1.0) < 0.5 {
            let unlabeled = rng.gen_range(0.0..1.0) < cfg.unlabeled_fraction;
            plan[k].push(if unlabeled { -1 } else { rng.gen_range(0..l) as i64 });
        }
    }

    // render
    let mut images = Vec::with_capacity(n_images);
    let mut pixels = Vec::with_capacity(n_images);
    let mut persons: Vec<PersonRec> = Vec::new();
    let mut queries = Vec::new();
    let mut split_counters: std::collections::HashMap<Split, usize> = Default::default();
    for (k, placements) in plan.iter().enumerate() {
        let split = split_of(k);
        let idx_in_split = {
            let c = split_counters.entry(split).or_insert(0usize);
            let v = *c;
            *c += 1;
            v
        };
        // noise background
        let mut img = Array3::zeros((ih, iw, 3));
        for y in 0..ih {
            for x in 0..iw {
                let base: f64 = 0.35 + rng.gen_range(-0.08..0.08);
                for ch in 0..3 {
                    img[[y, x, ch]] = base + rng.gen_range(-0.03..0.03);
                }
            }
        }
        // place persons
        let mut boxes: Vec<BBox> = Vec::new();
        let mut query_marked = false;
        let mut distractor_counter = 0usize;
        for &identity in placements {
            let mut accepted: Option<BBox> = None;
            for _ in 0..24 {
                let bh = rng.gen_range(0.30..0.46) * ih as f64;
                let bw = bh * rng.gen_range(0.42..0.68);
                let x1 = rng.gen_range(0.0..(iw as f64 - bw));
                let y1 = rng.gen_range(0.0..(ih as f64 - bh));
                let cand = BBox::absolute(x1, y1, x1 + bw, y1 + bh)?;
                accepted = Some(cand);
                if boxes.iter().all(|b| iou(b, &cand).unwrap_or(1.0) < 0.25) {
                    break;
                }
            }
            let b = accepted.unwrap();
            boxes.push(b);
            let (color, period, phase) = if identity >= 0 {
                identity_appearance(identity as usize)
            } else {
                // unlabeled distractors: desaturated gray-blue outside the
                // labeled palette
                distractor_counter += 1;
                let v = 0.45 + rng.gen_range(0.0..0.25);
                ([v * 0.9, v * 0.95, v], 2 + distractor_counter % 3, 0)
            };
            let (x1, y1, x2, y2) = (
                b.x1.floor().max(0.0) as usize,
                b.y1.floor().max(0.0) as usize,
                (b.x2.ceil() as usize).min(iw),
                (b.y2.ceil() as usize).min(ih),
            );
            for y in y1..y2 {
                let band = ((y - y1) / period + phase) % 2 == 0;
                let lum = if band { 1.0 } else { 0.62 };
                for x in x1..x2 {
                    for ch in 0..3 {
                        img[[y, x, ch]] = (color[ch] * lum).clamp(0.0, 1.0);
                    }
                }
            }
            persons.push(PersonRec {
                image_id: k as u32,
                x1: b.x1,
                y1: b.y1,
                x2: b.x2,
                y2: b.y2,
                identity,
            });
            // first labeled person of a query image is its annotated target
            if split == Split::Query && identity >= 0 && !query_marked {
                queries.push(QueryRec { image_id: k as u32, person_ref: persons.len() - 1 });
                query_marked = true;
            }
        }
        let px = img.mapv(|v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        images.push(ImageMeta {
            id: k as u32,
            file: format!("{IMAGES_DIR}/img_{k:04}.praw"),
            width: iw as u32,
            height: ih as u32,
            camera_id: (idx_in_split % 2) as u32,
            split,
        });
        pixels.push(px);
    }

    let ds = SearchDataset {
        doc: DatasetDoc { version: ANNOTATION_VERSION, images, persons, queries },
        pixels,
    };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// batches
// ---------------------------------------------------------------------------

/// Pixel normalization applied when assembling batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelNorm {
    pub mean: f64,
    pub scale: f64,
}

impl Default for PixelNorm {
    fn default() -> Self {
        PixelNorm { mean: 0.5, scale: 0.25 }
    }
}

/// One training example: normalized image `[3, H, W]` plus ground truth.
#[derive(Debug, Clone)]
pub struct Example {
    pub image: Array3<f64>,
    pub gt_boxes: Vec<BBox>,
    pub gt_ids: Vec<i64>,
    pub image_id: u32,
}

/// Convert `[H, W, 3]` u8 pixels to a normalized `[3, H, W]` array.
pub fn normalize_pixels(px: &Array3<u8>, norm: &PixelNorm) -> Array3<f64> {
    let (h, w, _) = px.dim();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        (px[[y, x, c]] as f64 / 255.0 - norm.mean) / norm.scale
    })
}

/// Assemble examples for the given image indices.
pub fn make_batch(ds: &SearchDataset, indices: &[usize], norm: &PixelNorm) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let (gt_boxes, gt_ids) = ds.ground_truth(i)?;
        out.push(Example {
            image: normalize_pixels(&ds.pixels[i], norm),
            gt_boxes,
            gt_ids,
            image_id: ds.doc.images[i].id,
        });
    }
    Ok(out)
}
