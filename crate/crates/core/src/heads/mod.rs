//! The dynamic person search head: learnable proposals, a detection head
//! per cascade stage, and a flexible re-id head on the last two stages.
//!
//! Each stage consumes the previous stage's output features and refined
//! boxes as its proposals. Boxes are detached between stages; geometry
//! gradients reach parameters only through each stage's own regression
//! tower (and, at the first stage, the learnable proposal boxes).

mod detection;
mod reid;

pub use detection::{instance_interaction, DetectionHead, DetectionOut, DynamicConv};
pub use reid::{concat_and_normalize, concat_reid_graph, ReidHead, ReidOut};

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone::FeatureMaps;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::params::{ParamId, ParamStore};
use crate::roi::RoiGrid;

/// Fully-connected layer handle.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Linear {
            w: store.add_linear(&format!("{name}.w"), fan_in, fan_out, gain, rng),
            b: store.add_zeros(&format!("{name}.b"), &[fan_out], false),
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: store.add_zeros(&format!("{name}.w"), &[fan_in, fan_out], true),
            b: store.add_zeros(&format!("{name}.b"), &[fan_out], false),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_row_vec(y, b)
    }
}

/// The trainable proposal set: `N` feature rows and `N` normalized boxes,
/// optimized during training and frozen for inference.
#[derive(Debug, Clone)]
pub struct LearnableProposals {
    pub features: ParamId,
    pub boxes: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl LearnableProposals {
    /// Features start standard normal; boxes start as the whole-image box so
    /// every proposal sees full receptive coverage at step zero.
    pub fn new(store: &mut ParamStore, count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let features = store.add_normal("proposals.features", &[count, dim], 1.0, rng);
        let mut b = Array2::zeros((count, 4));
        for mut row in b.rows_mut() {
            row[2] = 1.0;
            row[3] = 1.0;
        }
        let boxes = store.add("proposals.boxes", b.into_dyn(), false);
        LearnableProposals { features, boxes, count, dim }
    }

    /// Current proposal boxes as values.
    pub fn boxes_list(&self, store: &ParamStore) -> Result<Vec<BBox>> {
        boxes_from_rows(store.value(self.boxes))
    }

    /// Keep the box parameters inside the unit square with ordered corners;
    /// applied after every optimizer step (projected update).
    pub fn project(&self, store: &mut ParamStore) {
        let v = store.value_mut(self.boxes);
        let n = v.shape()[0];
        for i in 0..n {
            let x1 = v[[i, 0]].clamp(0.0, 1.0);
            let y1 = v[[i, 1]].clamp(0.0, 1.0);
            let x2 = v[[i, 2]].clamp(0.0, 1.0);
            let y2 = v[[i, 3]].clamp(0.0, 1.0);
            v[[i, 0]] = x1.min(x2);
            v[[i, 2]] = x1.max(x2);
            v[[i, 1]] = y1.min(y2);
            v[[i, 3]] = y1.max(y2);
        }
    }
}

pub(crate) fn boxes_from_rows(rows: &ArrayD<f64>) -> Result<Vec<BBox>> {
    let n = rows.shape()[0];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(BBox::normalized(
            rows[[i, 0]],
            rows[[i, 1]],
            rows[[i, 2]],
            rows[[i, 3]],
        )?);
    }
    Ok(out)
}

/// Apply regression deltas `[N, 4]` to base boxes `[N, 4]` (normalized
/// corners) on the graph, then clamp into the unit square. Zero deltas
/// reproduce the base exactly (before clamping).
pub fn apply_deltas_graph(g: &mut Graph, base: Var, deltas: Var) -> Var {
    let n = g.shape(base)[0];
    assert_eq!(g.shape(base), &[n, 4]);
    assert_eq!(g.shape(deltas), &[n, 4]);
    let x1 = g.slice_cols(base, 0, 1);
    let y1 = g.slice_cols(base, 1, 2);
    let x2 = g.slice_cols(base, 2, 3);
    let y2 = g.slice_cols(base, 3, 4);
    let w = g.sub(x2, x1);
    let h = g.sub(y2, y1);
    let dx = g.slice_cols(deltas, 0, 1);
    let dy = g.slice_cols(deltas, 1, 2);
    let dw = g.slice_cols(deltas, 2, 3);
    let dh = g.slice_cols(deltas, 3, 4);
    let shift_x = g.mul(dx, w);
    let shift_y = g.mul(dy, h);
    // half-size change: w * (1 - exp(dw)) / 2, identically zero at dw = 0
    let ew = g.exp(dw);
    let eh = g.exp(dh);
    let one = g.constant(ArrayD::from_elem(IxDyn(&[n, 1]), 1.0));
    let omw = g.sub(one, ew);
    let omh = g.sub(one, eh);
    let gxw = g.mul(omw, w);
    let gyh = g.mul(omh, h);
    let gx = g.scalar_mul(gxw, 0.5);
    let gy = g.scalar_mul(gyh, 0.5);

    let x1s = g.add(x1, shift_x);
    let nx1 = g.add(x1s, gx);
    let y1s = g.add(y1, shift_y);
    let ny1 = g.add(y1s, gy);
    let x2s = g.add(x2, shift_x);
    let nx2 = g.sub(x2s, gx);
    let y2s = g.add(y2, shift_y);
    let ny2 = g.sub(y2s, gy);
    // rounding can invert a near-degenerate box by an ulp; re-order corners
    // (bitwise identity whenever they are already ordered)
    let ox1 = g.minimum(nx1, nx2);
    let ox2 = g.maximum(nx2, nx1);
    let oy1 = g.minimum(ny1, ny2);
    let oy2 = g.maximum(ny2, ny1);
    let cat = g.concat_cols(&[ox1, oy1, ox2, oy2]);
    g.clamp01(cat)
}

/// Model dimensions shared by every stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadDims {
    /// Feature-map channels.
    pub channels: usize,
    /// Proposal feature width.
    pub proposal_dim: usize,
    /// Dynamic conv hidden width.
    pub dyn_hidden: usize,
    /// Re-id feature width.
    pub reid_dim: usize,
    /// RoI grid side.
    pub roi_bins: usize,
    /// FFN hidden width of the detection head.
    pub ffn_hidden: usize,
}

/// One cascade stage output bundle; re-id features are present only on the
/// stages that carry a re-id head.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub f_d: Var,
    pub cls_logits: Var,
    pub deltas: Var,
    /// Refined boxes on the graph (normalized corners, clamped).
    pub boxes_norm: Var,
    /// Refined boxes as values, consumed by matching and the next stage.
    pub boxes: Vec<BBox>,
    pub reid: Option<ReidOut>,
}

/// Cascade of `S` dynamic person search heads; the flexible re-id head runs
/// on stages `s > S - 2` (the last two).
#[derive(Debug, Clone)]
pub struct CascadeHead {
    pub stages: Vec<Stage>,
    pub grid: RoiGrid,
    pub dims: HeadDims,
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub det: DetectionHead,
    pub reid: Option<ReidHead>,
}

impl CascadeHead {
    pub fn new(store: &mut ParamStore, dims: HeadDims, num_stages: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(num_stages >= 1, "cascade needs at least one stage");
        let grid = RoiGrid::new(dims.roi_bins);
        let mut stages = Vec::with_capacity(num_stages);
        for s in 1..=num_stages {
            let det = DetectionHead::new(store, &format!("stage{s}.det"), &dims, rng);
            let reid = if s > num_stages.saturating_sub(2) {
                Some(ReidHead::new(store, &format!("stage{s}.reid"), &dims, rng))
            } else {
                None
            };
            stages.push(Stage { det, reid });
        }
        CascadeHead { stages, grid, dims }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Run every stage; stage `s+1` consumes stage `s`'s output features and
    /// refined boxes (boxes detached).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fmaps: &FeatureMaps,
        proposals: &LearnableProposals,
    ) -> Result<Vec<StageOutput>> {
        let mut f_p = g.param(store, proposals.features);
        let mut base_var = g.param(store, proposals.boxes);
        let mut base_boxes = proposals.boxes_list(store)?;
        let mut outputs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let det = stage.det.forward(
                g,
                store,
                fmaps.f_s16,
                f_p,
                base_var,
                &base_boxes,
                fmaps.original,
                16,
                &self.grid,
            )?;
            let reid = match &stage.reid {
                Some(head) => Some(head.forward(
                    g,
                    store,
                    fmaps.f_s8,
                    f_p,
                    &base_boxes,
                    fmaps.original,
                    8,
                    &self.grid,
                )?),
                None => None,
            };
            let refined_boxes = boxes_from_rows(g.value(det.refined_norm))?;
            outputs.push(StageOutput {
                f_d: det.f_d,
                cls_logits: det.cls_logits,
                deltas: det.deltas,
                boxes_norm: det.refined_norm,
                boxes: refined_boxes.clone(),
                reid,
            });
            f_p = det.f_d;
            base_var = g.detach(det.refined_norm);
            base_boxes = refined_boxes;
        }
        Ok(outputs)
    }
}

/// Scale a normalized box into feature-map coordinates for a map of the
/// given stride over an image of the given original size.
pub(crate) fn box_to_fm_coords(b: &BBox, original: (usize, usize), stride: usize) -> Result<BBox> {
    let (h, w) = original;
    let sx = w as f64 / stride as f64;
    let sy = h as f64 / stride as f64;
    BBox::new(
        b.x1 * sx,
        b.y1 * sy,
        b.x2 * sx,
        b.y2 * sy,
        crate::geometry::BoxForm::Absolute,
    )
    .map_err(|e| Error::Geometry(format!("box to feature-map coords: {e}")))
}
