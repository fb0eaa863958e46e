//! Training objectives: focal/L1/GIoU detection losses, the memory-backed
//! re-id loss (instance-matching cross entropy plus a batch-hard triplet
//! term), the feature-diversity penalty, and the stage-gated total.
//!
//! Most losses exist twice: a plain `f64` form used by tests and tooling,
//! and a graph form used by training. Agreement between the two routes is
//! itself a test.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{logsigmoid_scalar, sigmoid_scalar, Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, BBox};
use crate::matching::Assignment;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    sigmoid_scalar(x)
}

// ---------------------------------------------------------------------------
// detection losses (plain)
// ---------------------------------------------------------------------------

/// Binary focal loss of a single logit.
pub fn focal_loss(logit: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    if target {
        let one_minus_p = sigmoid_scalar(-logit);
        -alpha * one_minus_p.powf(gamma) * logsigmoid_scalar(logit)
    } else {
        let p = sigmoid_scalar(logit);
        -(1.0 - alpha) * p.powf(gamma) * logsigmoid_scalar(-logit)
    }
}

/// Sum of absolute corner differences between normalized boxes.
pub fn l1_box_loss(pred: &BBox, gt: &BBox) -> f64 {
    pred.corners().iter().zip(gt.corners()).map(|(a, b)| (a - b).abs()).sum()
}

pub fn giou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    Ok(1.0 - geometry::giou(pred, gt)?)
}

// ---------------------------------------------------------------------------
// re-id memory
// ---------------------------------------------------------------------------

/// Non-parametric identity memory: a lookup table with one row per labeled
/// identity and a FIFO queue for unlabeled persons. Occupied rows are kept
/// at unit norm; no gradient ever flows through the memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ReIDMemory {
    v: Array2<f64>,
    v_occupied: Vec<bool>,
    u: Array2<f64>,
    u_occupied: Vec<bool>,
    cursor: usize,
    pub momentum: f64,
    pub temperature: f64,
}

impl ReIDMemory {
    pub fn new(labeled: usize, dim: usize, queue: usize, momentum: f64, temperature: f64) -> Self {
        assert!(temperature > 0.0, "temperature must be positive");
        ReIDMemory {
            v: Array2::zeros((labeled, dim)),
            v_occupied: vec![false; labeled],
            u: Array2::zeros((queue, dim)),
            u_occupied: vec![false; queue],
            cursor: 0,
            momentum,
            temperature,
        }
    }

    pub fn dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn labeled_capacity(&self) -> usize {
        self.v.nrows()
    }

    pub fn queue_capacity(&self) -> usize {
        self.u.nrows()
    }

    pub fn queue_occupied(&self) -> usize {
        self.u_occupied.iter().filter(|&&o| o).count()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn lookup_row(&self, id: usize) -> ndarray::ArrayView1<'_, f64> {
        self.v.row(id)
    }

    pub fn lookup_occupied(&self, id: usize) -> bool {
        self.v_occupied[id]
    }

    pub fn queue_row(&self, slot: usize) -> ndarray::ArrayView1<'_, f64> {
        self.u.row(slot)
    }

    /// Class rows for the instance-matching softmax: every lookup row (their
    /// index is the class id) followed by the occupied queue rows.
    pub fn class_matrix(&self) -> Array2<f64> {
        let occ: Vec<usize> =
            (0..self.u.nrows()).filter(|&i| self.u_occupied[i]).collect();
        let mut out = Array2::zeros((self.v.nrows() + occ.len(), self.dim()));
        for i in 0..self.v.nrows() {
            out.row_mut(i).assign(&self.v.row(i));
        }
        for (k, &i) in occ.iter().enumerate() {
            out.row_mut(self.v.nrows() + k).assign(&self.u.row(i));
        }
        out
    }

    pub fn num_classes(&self) -> usize {
        self.v.nrows() + self.queue_occupied()
    }

    /// Occupied lookup rows as `(identity, row)` pairs.
    pub fn occupied_lookup(&self) -> Vec<(usize, ndarray::ArrayView1<'_, f64>)> {
        (0..self.v.nrows())
            .filter(|&i| self.v_occupied[i])
            .map(|i| (i, self.v.row(i)))
            .collect()
    }

    /// Fold a batch of unit features into the memory: labeled identities
    /// update their lookup row with momentum then renormalize; unlabeled
    /// features (`identity < 0`) enter the queue FIFO.
    pub fn update(&mut self, features: &[(Array1<f64>, i64)]) -> Result<()> {
        for (f, id) in features {
            assert_eq!(f.len(), self.dim(), "memory update: feature dim");
            if *id >= 0 {
                let id = *id as usize;
                if id >= self.v.nrows() {
                    return Err(Error::Shape(format!(
                        "identity {id} outside lookup table of {}",
                        self.v.nrows()
                    )));
                }
                let m = self.momentum;
                let mut blended = self.v.row(id).to_owned() * m + &(f * (1.0 - m));
                let norm = blended.dot(&blended).sqrt();
                if norm > 1e-12 {
                    blended /= norm;
                } else {
                    blended = f.clone();
                }
                self.v.row_mut(id).assign(&blended);
                self.v_occupied[id] = true;
            } else if self.u.nrows() > 0 {
                let norm = f.dot(f).sqrt();
                let unit = if norm > 1e-12 { f / norm } else { continue };
                self.u.row_mut(self.cursor).assign(&unit);
                self.u_occupied[self.cursor] = true;
                self.cursor = (self.cursor + 1) % self.u.nrows();
            }
        }
        Ok(())
    }

    /// Largest deviation of any occupied row from unit norm.
    pub fn max_norm_deviation(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, &occ) in self.v_occupied.iter().enumerate() {
            if occ {
                let n = self.v.row(i).dot(&self.v.row(i)).sqrt();
                worst = worst.max((n - 1.0).abs());
            }
        }
        for (i, &occ) in self.u_occupied.iter().enumerate() {
            if occ {
                let n = self.u.row(i).dot(&self.u.row(i)).sqrt();
                worst = worst.max((n - 1.0).abs());
            }
        }
        worst
    }

    // checkpoint plumbing
    pub fn to_state(&self) -> MemoryState {
        MemoryState {
            v: self.v.clone(),
            v_occupied: self.v_occupied.clone(),
            u: self.u.clone(),
            u_occupied: self.u_occupied.clone(),
            cursor: self.cursor,
            momentum: self.momentum,
            temperature: self.temperature,
        }
    }

    pub fn from_state(s: MemoryState) -> Self {
        ReIDMemory {
            v: s.v,
            v_occupied: s.v_occupied,
            u: s.u,
            u_occupied: s.u_occupied,
            cursor: s.cursor,
            momentum: s.momentum,
            temperature: s.temperature,
        }
    }

    /// Test hook: overwrite a queue row (used to fault-inject corrupt state).
    pub fn corrupt_queue_row(&mut self, slot: usize, scale: f64) {
        let mut row = self.u.row_mut(slot);
        row *= scale;
    }

    /// Test hook: overwrite a lookup row without normalization.
    pub fn corrupt_lookup_row(&mut self, id: usize, scale: f64) {
        let mut row = self.v.row_mut(id);
        row *= scale;
        self.v_occupied[id] = true;
    }
}

/// Serializable snapshot of a [`ReIDMemory`].
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    pub v: Array2<f64>,
    pub v_occupied: Vec<bool>,
    pub u: Array2<f64>,
    pub u_occupied: Vec<bool>,
    pub cursor: usize,
    pub momentum: f64,
    pub temperature: f64,
}

/// The two memory banks, one per re-id feature branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ReidMemories {
    pub plain: ReIDMemory,
    pub interaction: ReIDMemory,
}

impl ReidMemories {
    pub fn new(labeled: usize, dim: usize, queue: usize, momentum: f64, temperature: f64) -> Self {
        ReidMemories {
            plain: ReIDMemory::new(labeled, dim, queue, momentum, temperature),
            interaction: ReIDMemory::new(labeled, dim, queue, momentum, temperature),
        }
    }

    pub fn max_norm_deviation(&self) -> f64 {
        self.plain.max_norm_deviation().max(self.interaction.max_norm_deviation())
    }
}

// ---------------------------------------------------------------------------
// re-id losses (plain)
// ---------------------------------------------------------------------------

/// Instance-matching cross entropy of one unit feature against the memory.
pub fn oim_loss(f: &Array1<f64>, target_id: usize, mem: &ReIDMemory) -> Result<f64> {
    if target_id >= mem.labeled_capacity() {
        return Err(Error::Shape(format!(
            "target identity {target_id} outside lookup table of {}",
            mem.labeled_capacity()
        )));
    }
    debug_assert!((f.dot(f).sqrt() - 1.0).abs() < 1e-6, "oim_loss expects a unit feature");
    let classes = mem.class_matrix();
    let logits = classes.dot(f) / mem.temperature;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let logsum = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    Ok(logsum - logits[target_id])
}

/// Batch-hard triplet term over unit features with labeled identities.
///
/// Positives of an anchor are its own row, same-identity batch features and
/// its identity's occupied lookup row; negatives are different-identity
/// batch features and other occupied lookup rows. Cosine distance, hardest
/// positive vs hardest negative, hinged at `margin`. Anchors without any
/// negative are skipped; no valid anchor means a zero term.
pub fn triplet_term(feats: &Array2<f64>, ids: &[usize], mem: &ReIDMemory, margin: f64) -> f64 {
    let k = feats.nrows();
    assert_eq!(k, ids.len());
    let lookup = mem.occupied_lookup();
    let mut total = 0.0;
    let mut valid = 0usize;
    for a in 0..k {
        // smallest similarity among positives = farthest positive
        let mut sp = 1.0f64; // self
        for j in 0..k {
            if ids[j] == ids[a] {
                sp = sp.min(feats.row(a).dot(&feats.row(j)));
            }
        }
        let mut sn: Option<f64> = None;
        for j in 0..k {
            if ids[j] != ids[a] {
                let s = feats.row(a).dot(&feats.row(j));
                sn = Some(sn.map_or(s, |cur: f64| cur.max(s)));
            }
        }
        for (id, row) in &lookup {
            let s = feats.row(a).dot(row);
            if *id == ids[a] {
                sp = sp.min(s);
            } else {
                sn = Some(sn.map_or(s, |cur: f64| cur.max(s)));
            }
        }
        if let Some(sn) = sn {
            // d_pos - d_neg + margin == sn - sp + margin for cosine distance
            total += (sn - sp + margin).max(0.0);
            valid += 1;
        }
    }
    if valid == 0 {
        0.0
    } else {
        total / valid as f64
    }
}

/// Mean instance-matching loss plus the triplet term (plain form).
pub fn triplet_aided_oim(
    feats: &Array2<f64>,
    ids: &[usize],
    mem: &ReIDMemory,
    margin: f64,
) -> Result<f64> {
    if feats.nrows() == 0 {
        return Ok(0.0);
    }
    let mut ce = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        ce += oim_loss(&feats.row(k).to_owned(), id, mem)?;
    }
    Ok(ce / feats.nrows() as f64 + triplet_term(feats, ids, mem, margin))
}

/// Mean cosine similarity between paired feature rows, over rows selected by
/// `mask`; zero rows contribute zero.
pub fn diversity_loss(
    f_ip: &Array2<f64>,
    f_ih: &Array2<f64>,
    mask: &[bool],
    use_abs: bool,
) -> f64 {
    assert_eq!(f_ip.nrows(), f_ih.nrows());
    assert_eq!(f_ip.nrows(), mask.len());
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..f_ip.nrows() {
        if !mask[n] {
            continue;
        }
        count += 1;
        let a = f_ip.row(n);
        let b = f_ih.row(n);
        let na = a.dot(&a);
        let nb = b.dot(&b);
        if na <= 0.0 || nb <= 0.0 {
            continue; // zero rows contribute 0
        }
        let cos = a.dot(&b) / (na.sqrt() * nb.sqrt());
        total += if use_abs { cos.abs() } else { cos };
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

// ---------------------------------------------------------------------------
// graph forms
// ---------------------------------------------------------------------------

/// Per-element focal loss of `[N, 1]` logits against boolean targets.
pub fn focal_vector_graph(
    g: &mut Graph,
    logits: Var,
    targets: &[bool],
    alpha: f64,
    gamma: f64,
) -> Var {
    let n = g.shape(logits)[0];
    assert_eq!(g.shape(logits), &[n, 1]);
    assert_eq!(targets.len(), n);
    let neg_logits = g.neg(logits);
    let one_minus_p = g.sigmoid(neg_logits);
    let log_p = g.logsigmoid(logits);
    let a = g.powf(one_minus_p, gamma);
    let b = g.mul(a, log_p);
    let pos_term = g.scalar_mul(b, -alpha);
    let p = g.sigmoid(logits);
    let log_1mp = g.logsigmoid(neg_logits);
    let c = g.powf(p, gamma);
    let d = g.mul(c, log_1mp);
    let neg_term = g.scalar_mul(d, -(1.0 - alpha));
    let mut mpos = Array2::zeros((n, 1));
    let mut mneg = Array2::zeros((n, 1));
    for (i, &t) in targets.iter().enumerate() {
        if t {
            mpos[[i, 0]] = 1.0;
        } else {
            mneg[[i, 0]] = 1.0;
        }
    }
    let mpos = g.constant(mpos.into_dyn());
    let mneg = g.constant(mneg.into_dyn());
    let pos = g.mul(pos_term, mpos);
    let neg = g.mul(neg_term, mneg);
    g.add(pos, neg)
}

/// GIoU of each predicted box row against its ground truth: `[K, 4] -> [K, 1]`.
/// Ground-truth boxes must have positive area.
pub fn giou_pairs_graph(g: &mut Graph, pred: Var, gts: &[BBox]) -> Var {
    let k = g.shape(pred)[0];
    assert_eq!(g.shape(pred), &[k, 4]);
    assert_eq!(gts.len(), k);
    for b in gts {
        assert!(b.area() > 0.0, "giou_pairs_graph: degenerate ground truth");
    }
    let col = |g: &mut Graph, vals: Vec<f64>| {
        g.constant(
            Array2::from_shape_vec((vals.len(), 1), vals).unwrap().into_dyn(),
        )
    };
    let gx1 = col(g, gts.iter().map(|b| b.x1).collect());
    let gy1 = col(g, gts.iter().map(|b| b.y1).collect());
    let gx2 = col(g, gts.iter().map(|b| b.x2).collect());
    let gy2 = col(g, gts.iter().map(|b| b.y2).collect());
    let garea = col(g, gts.iter().map(|b| b.area()).collect());

    let px1 = g.slice_cols(pred, 0, 1);
    let py1 = g.slice_cols(pred, 1, 2);
    let px2 = g.slice_cols(pred, 2, 3);
    let py2 = g.slice_cols(pred, 3, 4);

    let ix1 = g.maximum(px1, gx1);
    let iy1 = g.maximum(py1, gy1);
    let ix2 = g.minimum(px2, gx2);
    let iy2 = g.minimum(py2, gy2);
    let iwr = g.sub(ix2, ix1);
    let ihr = g.sub(iy2, iy1);
    let iw = g.relu(iwr);
    let ih = g.relu(ihr);
    let inter = g.mul(iw, ih);

    let pw = g.sub(px2, px1);
    let ph = g.sub(py2, py1);
    let parea = g.mul(pw, ph);
    let sum_areas = g.add(parea, garea);
    let union = g.sub(sum_areas, inter);

    let ex1 = g.minimum(px1, gx1);
    let ey1 = g.minimum(py1, gy1);
    let ex2 = g.maximum(px2, gx2);
    let ey2 = g.maximum(py2, gy2);
    let ew = g.sub(ex2, ex1);
    let eh = g.sub(ey2, ey1);
    let enc = g.mul(ew, eh);

    let inv_union = g.powf(union, -1.0);
    let iou = g.mul(inter, inv_union);
    let gap = g.sub(enc, union);
    let inv_enc = g.powf(enc, -1.0);
    let frac = g.mul(gap, inv_enc);
    g.sub(iou, frac)
}

/// Row-wise L2 normalization with an epsilon guard for zero rows.
pub fn normalize_rows_graph(g: &mut Graph, x: Var) -> Var {
    let sq = g.mul(x, x);
    let s = g.sum_rows(sq);
    let s_eps = g.scalar_add(s, 1e-12);
    let inv = g.powf(s_eps, -0.5);
    g.row_mul(x, inv)
}

/// Instance-matching cross entropy rows for unit features `[K, d]`.
pub fn oim_ce_graph(g: &mut Graph, unit_feats: Var, targets: &[usize], mem: &ReIDMemory) -> Var {
    let classes = mem.class_matrix();
    let classes_t = g.constant(classes.t().to_owned().into_dyn());
    let sims = g.matmul(unit_feats, classes_t);
    let logits = g.scalar_mul(sims, 1.0 / mem.temperature);
    g.cross_entropy_rows(logits, targets)
}

/// Per-anchor batch-hard triplet hinges for unit features; mirrors
/// [`triplet_term`] with gradients. Returns `[K, 1]` hinges (zero rows for
/// anchors with no negative).
pub fn triplet_hinges_graph(
    g: &mut Graph,
    unit_feats: Var,
    ids: &[usize],
    mem: &ReIDMemory,
    margin: f64,
) -> Var {
    let k = g.shape(unit_feats)[0];
    assert_eq!(ids.len(), k);
    let feats_t = g.transpose(unit_feats);
    let sims_ff = g.matmul(unit_feats, feats_t); // [K, K]
    let lookup = mem.occupied_lookup();
    let (sims_fv, v_ids): (Option<Var>, Vec<usize>) = if lookup.is_empty() {
        (None, vec![])
    } else {
        let mut vm = Array2::zeros((lookup.len(), mem.dim()));
        let mut v_ids = Vec::with_capacity(lookup.len());
        for (r, (id, row)) in lookup.iter().enumerate() {
            vm.row_mut(r).assign(row);
            v_ids.push(*id);
        }
        let vt = g.constant(vm.t().to_owned().into_dyn());
        (Some(g.matmul(unit_feats, vt)), v_ids)
    };

    // hardest positives / negatives chosen on values; gradient flows through
    // the selected similarity only (the subgradient of min / max)
    let ff_vals = g.value(sims_ff).clone();
    let fv_vals = sims_fv.map(|v| g.value(v).clone());

    enum Src {
        Batch(usize),
        Lookup(usize),
    }

    let mut rows: Vec<Var> = Vec::with_capacity(k);
    for a in 0..k {
        let mut sp: (f64, Src) = (ff_vals[[a, a]], Src::Batch(a));
        let mut sn: Option<(f64, Src)> = None;
        for j in 0..k {
            let s = ff_vals[[a, j]];
            if ids[j] == ids[a] {
                if s < sp.0 {
                    sp = (s, Src::Batch(j));
                }
            } else if sn.as_ref().is_none_or(|c| s > c.0) {
                sn = Some((s, Src::Batch(j)));
            }
        }
        if let Some(fv) = &fv_vals {
            for (r, &vid) in v_ids.iter().enumerate() {
                let s = fv[[a, r]];
                if vid == ids[a] {
                    if s < sp.0 {
                        sp = (s, Src::Lookup(r));
                    }
                } else if sn.as_ref().is_none_or(|c| s > c.0) {
                    sn = Some((s, Src::Lookup(r)));
                }
            }
        }
        let Some((_, sn_src)) = sn else {
            rows.push(g.constant(ArrayD::zeros(IxDyn(&[1, 1]))));
            continue;
        };
        let gather = |g: &mut Graph, src: &Src, a: usize| match src {
            Src::Batch(j) => {
                let e = g.gather_elems(sims_ff, &[(a, *j)]);
                g.reshape(e, &[1, 1])
            }
            Src::Lookup(r) => {
                let e = g.gather_elems(sims_fv.unwrap(), &[(a, *r)]);
                g.reshape(e, &[1, 1])
            }
        };
        let sp_var = gather(g, &sp.1, a);
        let sn_var = gather(g, &sn_src, a);
        let diff = g.sub(sn_var, sp_var);
        let shifted = g.scalar_add(diff, margin);
        rows.push(g.relu(shifted));
    }
    g.stack_rows(&rows)
}

/// Mean cosine similarity between paired rows over a weighted selection;
/// `row_weights` should sum to one over the selected rows.
pub fn diversity_graph(
    g: &mut Graph,
    f_ip: Var,
    f_ih: Var,
    row_weights: &[f64],
    use_abs: bool,
) -> Var {
    let n = g.shape(f_ip)[0];
    assert_eq!(g.shape(f_ih)[0], n);
    assert_eq!(row_weights.len(), n);
    let prod = g.mul(f_ip, f_ih);
    let dots = g.sum_rows(prod);
    let sq_ip = g.mul(f_ip, f_ip);
    let sq_ih = g.mul(f_ih, f_ih);
    let n1 = g.sum_rows(sq_ip);
    let n2 = g.sum_rows(sq_ih);
    let n1e = g.scalar_add(n1, 1e-24);
    let n2e = g.scalar_add(n2, 1e-24);
    let denom_sq = g.mul(n1e, n2e);
    let inv = g.powf(denom_sq, -0.5);
    let mut cos = g.mul(dots, inv);
    if use_abs {
        cos = g.abs(cos);
    }
    let w = g.constant(Array1::from_vec(row_weights.to_vec()).into_dyn());
    let weighted = g.mul(cos, w);
    g.sum_all(weighted)
}

// ---------------------------------------------------------------------------
// stage-gated total
// ---------------------------------------------------------------------------

/// Loss weights and knobs. `reid_lambda` scales the whole gated re-id block;
/// `div_weight` additionally scales the diversity term (the ablation switch).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub reid_lambda: f64,
    pub div_weight: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub triplet_margin: f64,
    pub abs_diversity: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
            reid_lambda: 0.5,
            div_weight: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            triplet_margin: 0.3,
            abs_diversity: false,
        }
    }
}

/// Graph handles of one cascade stage, as consumed by [`total_loss`].
#[derive(Debug, Clone, Copy)]
pub struct StageLossVars {
    /// `[N, 1]` classification logits.
    pub cls_logits: Var,
    /// `[N, 4]` refined boxes, normalized corners.
    pub pred_boxes: Var,
    /// Re-id features when this stage carries a re-id head.
    pub reid: Option<ReidLossVars>,
}

#[derive(Debug, Clone, Copy)]
pub struct ReidLossVars {
    pub f_ip: Var,
    pub f_rp: Var,
    pub f_ih: Var,
    pub f_rh: Var,
}

/// Per-stage raw loss values (unweighted).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageLossReport {
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
    pub toim: f64,
    pub div: f64,
    pub reid_active: bool,
}

/// Loss breakdown for one optimization step of one image batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stages: Vec<StageLossReport>,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossReport {
    /// Recombine the per-stage parts under the recorded weights; equals
    /// `total` up to rounding.
    pub fn recombined_total(&self) -> f64 {
        let w = &self.weights;
        let mut total = 0.0;
        for s in &self.stages {
            total += w.cls * s.focal + w.l1 * s.l1 + w.giou * s.giou;
            if s.reid_active {
                total += w.reid_lambda * (s.toim + w.div_weight * s.div);
            }
        }
        total
    }

    /// Mean over batch: per-stage parts and total averaged elementwise.
    pub fn mean_of(reports: &[LossReport]) -> LossReport {
        assert!(!reports.is_empty());
        let n = reports.len() as f64;
        let mut out = reports[0].clone();
        for r in &reports[1..] {
            assert_eq!(r.stages.len(), out.stages.len());
            out.total += r.total;
            for (o, s) in out.stages.iter_mut().zip(&r.stages) {
                o.focal += s.focal;
                o.l1 += s.l1;
                o.giou += s.giou;
                o.toim += s.toim;
                o.div += s.div;
            }
        }
        out.total /= n;
        for s in &mut out.stages {
            s.focal /= n;
            s.l1 /= n;
            s.giou /= n;
            s.toim /= n;
            s.div /= n;
        }
        out
    }
}

/// Assemble the full training objective for one image.
///
/// Detection terms use each stage's bipartite match; re-id terms use the
/// stage's one-to-many labels and weights and are active only where the
/// stage carries re-id features. Identity supervision averages the two
/// feature branches against their respective memory banks.
pub fn total_loss(
    g: &mut Graph,
    stages: &[StageLossVars],
    assignments: &[Assignment],
    gt_boxes_norm: &[BBox],
    gt_ids: &[i64],
    memories: &ReidMemories,
    w: &LossWeights,
) -> Result<(Var, LossReport)> {
    assert_eq!(stages.len(), assignments.len(), "total_loss: stage count");
    assert_eq!(gt_boxes_norm.len(), gt_ids.len());
    let m = gt_boxes_norm.len();
    let norm = 1.0 / m.max(1) as f64;

    let mut total: Option<Var> = None;
    let add_term = |g: &mut Graph, total: &mut Option<Var>, term: Var| {
        *total = Some(match *total {
            Some(t) => g.add(t, term),
            None => term,
        });
    };
    let mut report_stages = Vec::with_capacity(stages.len());

    for (stage, assign) in stages.iter().zip(assignments) {
        let n = g.shape(stage.cls_logits)[0];
        // -- classification ------------------------------------------------
        let mut targets = vec![false; n];
        for &(p, _) in &assign.det_match {
            targets[p] = true;
        }
        let focal_vec = focal_vector_graph(g, stage.cls_logits, &targets, w.focal_alpha, w.focal_gamma);
        let focal_sum = g.sum_all(focal_vec);
        let focal = g.scalar_mul(focal_sum, norm);

        // -- box regression --------------------------------------------------
        let (l1, giou_l) = if assign.det_match.is_empty() {
            (g.scalar_leaf(0.0), g.scalar_leaf(0.0))
        } else {
            let idxs: Vec<usize> = assign.det_match.iter().map(|&(p, _)| p).collect();
            let gts: Vec<BBox> = assign.det_match.iter().map(|&(_, t)| gt_boxes_norm[t]).collect();
            let pred = g.gather_rows(stage.pred_boxes, &idxs);
            let gt_mat = {
                let mut a = Array2::zeros((gts.len(), 4));
                for (r, b) in gts.iter().enumerate() {
                    let c = b.corners();
                    for j in 0..4 {
                        a[[r, j]] = c[j];
                    }
                }
                g.constant(a.into_dyn())
            };
            let diff = g.sub(pred, gt_mat);
            let abs = g.abs(diff);
            let l1_sum = g.sum_all(abs);
            let l1 = g.scalar_mul(l1_sum, norm);
            let gv = giou_pairs_graph(g, pred, &gts);
            let neg_gv = g.neg(gv);
            let gl = g.scalar_add(neg_gv, 1.0);
            let gl_sum = g.sum_all(gl);
            let giou_l = g.scalar_mul(gl_sum, norm);
            (l1, giou_l)
        };

        let focal_w = g.scalar_mul(focal, w.cls);
        let l1_w = g.scalar_mul(l1, w.l1);
        let giou_w = g.scalar_mul(giou_l, w.giou);
        add_term(g, &mut total, focal_w);
        add_term(g, &mut total, l1_w);
        add_term(g, &mut total, giou_w);

        // -- re-id ----------------------------------------------------------
        let mut toim_val = 0.0;
        let mut div_val = 0.0;
        if let Some(reid) = &stage.reid {
            // labeled identity supervision
            let mut idxs = Vec::new();
            let mut ids = Vec::new();
            let mut weights = Vec::new();
            for (p, r) in assign.reid.iter().enumerate() {
                if let Some(r) = r {
                    if r.identity >= 0 {
                        idxs.push(p);
                        ids.push(r.identity as usize);
                        weights.push(r.weight);
                    }
                }
            }
            let toim = if idxs.is_empty() {
                g.scalar_leaf(0.0)
            } else {
                let wsum: f64 = weights.iter().sum();
                let wnorm: Vec<f64> = weights.iter().map(|v| v / wsum).collect();
                let branch = |g: &mut Graph, feats: Var, mem: &ReIDMemory| -> Result<Var> {
                    for &id in &ids {
                        if id >= mem.labeled_capacity() {
                            return Err(Error::Shape(format!(
                                "identity {id} outside lookup table of {}",
                                mem.labeled_capacity()
                            )));
                        }
                    }
                    let sel = g.gather_rows(feats, &idxs);
                    let unit = normalize_rows_graph(g, sel);
                    let ce = oim_ce_graph(g, unit, &ids, mem);
                    let hinges = triplet_hinges_graph(g, unit, &ids, mem, w.triplet_margin);
                    let hinges_flat = g.reshape(hinges, &[ids.len()]);
                    let per_anchor = g.add(ce, hinges_flat);
                    let wv = g.constant(Array1::from_vec(wnorm.clone()).into_dyn());
                    let weighted = g.mul(per_anchor, wv);
                    Ok(g.sum_all(weighted))
                };
                let t_rp = branch(g, reid.f_rp, &memories.plain)?;
                let t_rh = branch(g, reid.f_rh, &memories.interaction)?;
                let s = g.add(t_rp, t_rh);
                g.scalar_mul(s, 0.5)
            };

            // diversity over every matched proposal (labeled or not)
            let matched: Vec<bool> = assign.reid.iter().map(|r| r.is_some()).collect();
            let cnt = matched.iter().filter(|&&b| b).count();
            let div = if cnt == 0 {
                g.scalar_leaf(0.0)
            } else {
                let row_w: Vec<f64> =
                    matched.iter().map(|&b| if b { 1.0 / cnt as f64 } else { 0.0 }).collect();
                diversity_graph(g, reid.f_ip, reid.f_ih, &row_w, w.abs_diversity)
            };

            toim_val = g.scalar(toim);
            div_val = g.scalar(div);
            let div_scaled = g.scalar_mul(div, w.div_weight);
            let block = g.add(toim, div_scaled);
            let gated = g.scalar_mul(block, w.reid_lambda);
            add_term(g, &mut total, gated);
        }

        report_stages.push(StageLossReport {
            focal: g.scalar(focal),
            l1: g.scalar(l1),
            giou: g.scalar(giou_l),
            toim: toim_val,
            div: div_val,
            reid_active: stage.reid.is_some(),
        });
    }

    let total = total.expect("at least one stage");
    let total_val = g.scalar(total);
    if !total_val.is_finite() {
        return Err(Error::NonFinite(format!("total loss = {total_val}")));
    }
    let report = LossReport { stages: report_stages, total: total_val, weights: *w };
    Ok((total, report))
}

/// Mean `|cos|` between the two intermediate feature branches, the
/// measurement used to compare runs with and without the diversity penalty.
pub fn mean_abs_cos(f_ip: &Array2<f64>, f_ih: &Array2<f64>, mask: &[bool]) -> f64 {
    diversity_loss(f_ip, f_ih, mask, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_max_rel_err;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn unit(v: Vec<f64>) -> Array1<f64> {
        let a = Array1::from_vec(v);
        let n = a.dot(&a).sqrt();
        a / n
    }

    // -- focal ---------------------------------------------------------------

    #[test]
    fn focal_limits_and_reference_value() {
        assert!(focal_loss(40.0, true, 0.25, 2.0) < 1e-16);
        let v = focal_loss(0.0, true, 0.25, 2.0);
        let want = 0.25 * 0.25 * (2.0f64).ln();
        assert!((v - want).abs() < 1e-12, "{v} vs {want}");
    }

    #[test]
    fn focal_degenerates_to_cross_entropy() {
        let mut rng = stream_rng(1, 41);
        for _ in 0..200 {
            let l: f64 = rng.gen_range(-5.0..5.0);
            let bce_pos = -logsigmoid_scalar(l);
            let bce_neg = -logsigmoid_scalar(-l);
            assert!((focal_loss(l, true, 1.0, 0.0) - bce_pos).abs() < 1e-12);
            assert!((focal_loss(l, false, 0.0, 0.0) - bce_neg).abs() < 1e-12);
            // balanced alpha halves both classes
            assert!((focal_loss(l, true, 0.5, 0.0) - 0.5 * bce_pos).abs() < 1e-12);
            assert!((focal_loss(l, false, 0.5, 0.0) - 0.5 * bce_neg).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_graph_matches_plain() {
        let mut rng = stream_rng(2, 41);
        let logits: Vec<f64> = (0..6).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let targets = [true, false, true, true, false, false];
        let mut g = Graph::new();
        let lv = g.constant(
            Array2::from_shape_vec((6, 1), logits.clone()).unwrap().into_dyn(),
        );
        let fv = focal_vector_graph(&mut g, lv, &targets, 0.25, 2.0);
        for i in 0..6 {
            let want = focal_loss(logits[i], targets[i], 0.25, 2.0);
            assert!((g.value(fv)[[i, 0]] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_graph_gradient_matches_fd() {
        let mut rng = stream_rng(3, 41);
        let l0 = ArrayD::from_shape_fn(IxDyn(&[5, 1]), |_| rng.gen_range(-3.0..3.0));
        let targets = [true, false, true, false, true];
        let run = |lv: &ArrayD<f64>, wants: bool| {
            let mut g = Graph::new();
            let l = g.leaf(lv.clone(), wants);
            let f = focal_vector_graph(&mut g, l, &targets, 0.25, 2.0);
            let loss = g.sum_all(f);
            (g, l, loss)
        };
        let (g, l, loss) = run(&l0, true);
        let grads = g.backward(loss);
        let d = grads.get(l).unwrap().clone();
        let eval = |v: &ArrayD<f64>| {
            let (g, _, loss) = run(v, false);
            g.scalar(loss)
        };
        assert!(finite_diff_max_rel_err(&eval, &l0, &d, 1e-6, None) < 1e-6);
    }

    // -- box losses ------------------------------------------------------------

    #[test]
    fn box_losses_reference_values() {
        let a = BBox::normalized(0.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(l1_box_loss(&a, &a), 0.0);
        assert_eq!(giou_loss(&a, &a).unwrap(), 0.0);
        let b = BBox::absolute(0.0, 0.0, 1.0, 1.0).unwrap();
        let c = BBox::absolute(2.0, 0.0, 3.0, 1.0).unwrap();
        assert!((giou_loss(&b, &c).unwrap() - 4.0 / 3.0).abs() < 1e-12);
        // random pair equals hand recomputation
        let mut rng = stream_rng(4, 41);
        for _ in 0..50 {
            let mut mk = || {
                let x1: f64 = rng.gen_range(0.0..0.6);
                let y1: f64 = rng.gen_range(0.0..0.6);
                BBox::normalized(x1, y1, x1 + rng.gen_range(0.05..0.4), y1 + rng.gen_range(0.05..0.4))
                    .unwrap()
            };
            let p = mk();
            let t = mk();
            let want_l1: f64 = p
                .corners()
                .iter()
                .zip(t.corners())
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!((l1_box_loss(&p, &t) - want_l1).abs() < 1e-12);
            let want_gl = 1.0 - geometry::giou(&p, &t).unwrap();
            assert!((giou_loss(&p, &t).unwrap() - want_gl).abs() < 1e-12);
        }
    }

    #[test]
    fn giou_graph_matches_plain_and_fd() {
        let mut rng = stream_rng(5, 41);
        let mut boxes = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..4 {
            let x1: f64 = rng.gen_range(0.0..0.4);
            let y1: f64 = rng.gen_range(0.0..0.4);
            boxes.push([x1, y1, x1 + rng.gen_range(0.1..0.5), y1 + rng.gen_range(0.1..0.5)]);
            let gx1: f64 = rng.gen_range(0.0..0.4);
            let gy1: f64 = rng.gen_range(0.0..0.4);
            gts.push(
                BBox::normalized(gx1, gy1, gx1 + rng.gen_range(0.1..0.5), gy1 + rng.gen_range(0.1..0.5))
                    .unwrap(),
            );
        }
        let pred0 = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |ix| boxes[ix[0]][ix[1]]);
        let run = |pv: &ArrayD<f64>, wants: bool| {
            let mut g = Graph::new();
            let p = g.leaf(pv.clone(), wants);
            let gi = giou_pairs_graph(&mut g, p, &gts);
            let loss = g.sum_all(gi);
            (g, p, gi, loss)
        };
        let (g, p, gi, loss) = run(&pred0, true);
        for (r, b) in boxes.iter().enumerate() {
            let pb = BBox::normalized(b[0], b[1], b[2], b[3]).unwrap();
            let want = geometry::giou(&pb, &gts[r]).unwrap();
            assert!((g.value(gi)[[r, 0]] - want).abs() < 1e-12);
        }
        let grads = g.backward(loss);
        let d = grads.get(p).unwrap().clone();
        let eval = |v: &ArrayD<f64>| {
            let (g, _, _, loss) = run(v, false);
            g.scalar(loss)
        };
        assert!(finite_diff_max_rel_err(&eval, &pred0, &d, 1e-6, None) < 1e-4);
    }

    // -- memory ------------------------------------------------------------------

    #[test]
    fn oim_reference_value() {
        let mut mem = ReIDMemory::new(2, 2, 0, 0.0, 1.0);
        mem.update(&[
            (Array1::from_vec(vec![1.0, 0.0]), 0),
            (Array1::from_vec(vec![0.0, 1.0]), 1),
        ])
        .unwrap();
        let f = Array1::from_vec(vec![1.0, 0.0]);
        let v = oim_loss(&f, 0, &mem).unwrap();
        let want = -((1.0f64).exp() / ((1.0f64).exp() + 1.0)).ln();
        assert!((v - want).abs() < 1e-12, "{v} vs {want}");
        assert!((v - 0.3132616875).abs() < 1e-9);
    }

    #[test]
    fn oim_orthogonal_feature_gives_uniform_loss() {
        let mut mem = ReIDMemory::new(2, 3, 4, 0.0, 1.0);
        mem.update(&[
            (Array1::from_vec(vec![1.0, 0.0, 0.0]), 0),
            (Array1::from_vec(vec![0.0, 1.0, 0.0]), 1),
            (Array1::from_vec(vec![0.0, 1.0, 0.0]), -1),
        ])
        .unwrap();
        let f = Array1::from_vec(vec![0.0, 0.0, 1.0]);
        let v = oim_loss(&f, 0, &mem).unwrap();
        assert!((v - (3.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn oim_sharper_temperature_reduces_loss_on_match() {
        let f = unit(vec![0.6, 0.8]);
        let mut prev = f64::INFINITY;
        for tau in [1.0, 0.5, 0.2, 1.0 / 30.0] {
            let mut mem = ReIDMemory::new(2, 2, 0, 0.0, tau);
            mem.update(&[(f.clone(), 0), (unit(vec![1.0, -0.2]), 1)]).unwrap();
            let v = oim_loss(&f, 0, &mem).unwrap();
            assert!(v < prev, "tau {tau}: {v} !< {prev}");
            prev = v;
        }
    }

    #[test]
    fn oim_rejects_out_of_range_identity() {
        let mem = ReIDMemory::new(2, 2, 0, 0.5, 1.0);
        let f = unit(vec![1.0, 0.0]);
        assert!(oim_loss(&f, 2, &mem).is_err());
    }

    #[test]
    fn memory_momentum_endpoints() {
        let f0 = unit(vec![1.0, 0.0]);
        let f1 = unit(vec![0.0, 1.0]);
        let mut keep = ReIDMemory::new(1, 2, 0, 1.0, 1.0);
        keep.update(&[(f0.clone(), 0)]).unwrap();
        let before = keep.lookup_row(0).to_owned();
        keep.update(&[(f1.clone(), 0)]).unwrap();
        // momentum 1 keeps the old row (renormalized)
        assert!((keep.lookup_row(0).to_owned() - &before).iter().all(|v| v.abs() < 1e-12));
        let mut replace = ReIDMemory::new(1, 2, 0, 0.0, 1.0);
        replace.update(&[(f0, 0)]).unwrap();
        replace.update(&[(f1.clone(), 0)]).unwrap();
        assert!((replace.lookup_row(0).to_owned() - &f1).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn queue_wraps_after_exactly_capacity_insertions() {
        let q = 4;
        let mut mem = ReIDMemory::new(1, 2, q, 0.5, 1.0);
        for k in 0..q {
            let angle = k as f64;
            mem.update(&[(unit(vec![angle.cos(), angle.sin()]), -1)]).unwrap();
            if k < q - 1 {
                assert_eq!(mem.cursor(), k + 1);
            }
        }
        assert_eq!(mem.queue_occupied(), q);
        assert_eq!(mem.cursor(), 0, "cursor wraps at exactly Q insertions");
        let first = mem.queue_row(0).to_owned();
        let newcomer = unit(vec![0.3, -0.95]);
        mem.update(&[(newcomer.clone(), -1)]).unwrap();
        assert!((mem.queue_row(0).to_owned() - &newcomer).iter().all(|v| v.abs() < 1e-9));
        assert!((first - mem.queue_row(0).to_owned()).iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn memory_rows_stay_unit_under_random_updates() {
        let mut rng = stream_rng(6, 41);
        let mut mem = ReIDMemory::new(5, 8, 7, 0.5, 1.0 / 30.0);
        for _ in 0..1000 {
            let raw: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = unit(raw);
            let id: i64 = rng.gen_range(-1..5);
            mem.update(&[(f, id)]).unwrap();
        }
        assert!(mem.max_norm_deviation() < 1e-6);
    }

    // -- triplet ------------------------------------------------------------------

    #[test]
    fn triplet_zero_when_anchors_sit_on_their_rows() {
        let mut mem = ReIDMemory::new(2, 2, 0, 0.0, 1.0);
        mem.update(&[
            (Array1::from_vec(vec![1.0, 0.0]), 0),
            (Array1::from_vec(vec![0.0, 1.0]), 1),
        ])
        .unwrap();
        let feats = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(triplet_term(&feats, &[0, 1], &mem, 0.0), 0.0);
    }

    #[test]
    fn triplet_zero_without_negatives() {
        let mem = ReIDMemory::new(3, 2, 0, 0.5, 1.0);
        let feats = ndarray::arr2(&[[1.0, 0.0], [0.8, 0.6]]);
        assert_eq!(triplet_term(&feats, &[1, 1], &mem, 0.3), 0.0);
    }

    #[test]
    fn triplet_matches_hand_computation() {
        // three unit features, two identities, empty memory
        let a = [1.0, 0.0];
        let b = [0.8, 0.6];
        let c = [0.0, 1.0];
        let feats = ndarray::arr2(&[a, b, c]);
        let ids = [0usize, 0, 1];
        let mem = ReIDMemory::new(2, 2, 0, 0.5, 1.0);
        let margin = 0.3;
        // similarities: a.b = 0.8, a.c = 0.0, b.c = 0.6
        // anchor a: sp = 0.8, sn = 0.0 -> hinge max(0, 0.0-0.8+0.3) = 0
        // anchor b: sp = 0.8, sn = 0.6 -> hinge max(0, 0.6-0.8+0.3) = 0.1
        // anchor c: sp = 1.0 (self), sn = 0.6 -> hinge max(0, 0.6-1.0+0.3) = 0
        let want = (0.0 + 0.1 + 0.0) / 3.0;
        let got = triplet_term(&feats, &ids, &mem, margin);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn triplet_graph_matches_plain_and_fd() {
        let mut rng = stream_rng(7, 41);
        let mut mem = ReIDMemory::new(3, 4, 0, 0.0, 1.0);
        mem.update(&[
            (unit((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()), 0),
            (unit((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()), 2),
        ])
        .unwrap();
        let raw0 = ArrayD::from_shape_fn(IxDyn(&[5, 4]), |_| rng.gen_range(-1.0..1.0));
        let ids = [0usize, 0, 1, 2, 1];
        let run = |raw: &ArrayD<f64>, wants: bool| {
            let mut g = Graph::new();
            let x = g.leaf(raw.clone(), wants);
            let unitv = normalize_rows_graph(&mut g, x);
            let h = triplet_hinges_graph(&mut g, unitv, &ids, &mem, 0.3);
            let loss = g.mean_all(h);
            (g, x, loss)
        };
        let (g, x, loss) = run(&raw0, true);
        // agreement with the plain route
        let mut unit_rows = Array2::zeros((5, 4));
        for i in 0..5 {
            let row = raw0.index_axis(ndarray::Axis(0), i).to_owned();
            let row1 = row.into_dimensionality::<ndarray::Ix1>().unwrap();
            let n = row1.dot(&row1).sqrt();
            unit_rows.row_mut(i).assign(&(row1 / n));
        }
        let plain = triplet_term(&unit_rows, &ids, &mem, 0.3);
        assert!((g.scalar(loss) - plain).abs() < 1e-9, "{} vs {plain}", g.scalar(loss));
        // gradient
        let grads = g.backward(loss);
        let d = grads.get(x).unwrap().clone();
        let eval = |v: &ArrayD<f64>| {
            let (g, _, loss) = run(v, false);
            g.scalar(loss)
        };
        assert!(finite_diff_max_rel_err(&eval, &raw0, &d, 1e-6, None) < 1e-3);
    }

    // -- diversity ------------------------------------------------------------------

    #[test]
    fn diversity_reference_cases() {
        let ip = ndarray::arr2(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 0.0]]);
        let ih = ndarray::arr2(&[[0.0, 1.0], [2.0, 0.0], [-3.0, 0.0], [1.0, 0.0]]);
        assert_eq!(diversity_loss(&ip, &ih, &[true, false, false, false], false), 0.0);
        assert_eq!(diversity_loss(&ip, &ih, &[false, true, false, false], false), 1.0);
        assert_eq!(diversity_loss(&ip, &ih, &[false, false, true, false], false), -1.0);
        // zero row contributes zero
        assert_eq!(diversity_loss(&ip, &ih, &[false, false, false, true], false), 0.0);
        // scale invariance
        let v1 = diversity_loss(&ip, &ih, &[true, true, true, false], false);
        let ih_scaled = &ih * 17.0;
        let v2 = diversity_loss(&ip, &ih_scaled, &[true, true, true, false], false);
        assert!((v1 - v2).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&v1));
        // abs variant
        let va = diversity_loss(&ip, &ih, &[false, false, true, false], true);
        assert_eq!(va, 1.0);
    }

    #[test]
    fn diversity_graph_matches_plain_and_fd() {
        let mut rng = stream_rng(8, 41);
        let ip0 = ArrayD::from_shape_fn(IxDyn(&[4, 6]), |_| rng.gen_range(-1.0..1.0));
        let ih0 = ArrayD::from_shape_fn(IxDyn(&[4, 6]), |_| rng.gen_range(-1.0..1.0));
        let mask = [true, true, false, true];
        let cnt = 3.0;
        let row_w: Vec<f64> = mask.iter().map(|&b| if b { 1.0 / cnt } else { 0.0 }).collect();
        let run = |ipv: &ArrayD<f64>, ihv: &ArrayD<f64>, wants: bool| {
            let mut g = Graph::new();
            let ip = g.leaf(ipv.clone(), wants);
            let ih = g.leaf(ihv.clone(), wants);
            let d = diversity_graph(&mut g, ip, ih, &row_w, false);
            (g, ip, ih, d)
        };
        let (g, ip, ih, d) = run(&ip0, &ih0, true);
        let plain = diversity_loss(
            &as2_owned(&ip0),
            &as2_owned(&ih0),
            &mask,
            false,
        );
        assert!((g.scalar(d) - plain).abs() < 1e-9);
        let grads = g.backward(d);
        let dip = grads.get(ip).unwrap().clone();
        let dih = grads.get(ih).unwrap().clone();
        let e1 = |v: &ArrayD<f64>| {
            let (g, _, _, d) = run(v, &ih0, false);
            g.scalar(d)
        };
        let e2 = |v: &ArrayD<f64>| {
            let (g, _, _, d) = run(&ip0, v, false);
            g.scalar(d)
        };
        assert!(finite_diff_max_rel_err(&e1, &ip0, &dip, 1e-6, None) < 1e-5);
        assert!(finite_diff_max_rel_err(&e2, &ih0, &dih, 1e-6, None) < 1e-5);
    }

    fn as2_owned(a: &ArrayD<f64>) -> Array2<f64> {
        a.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned()
    }

    #[test]
    fn oim_graph_matches_plain() {
        let mut rng = stream_rng(9, 41);
        let mut mem = ReIDMemory::new(4, 6, 3, 0.5, 1.0 / 30.0);
        for id in 0..4 {
            mem.update(&[(unit((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()), id)]).unwrap();
        }
        mem.update(&[(unit((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()), -1)]).unwrap();
        let feats = Array2::from_shape_fn((3, 6), |_| rng.gen_range(-1.0..1.0));
        let mut unit_rows = feats.clone();
        for mut r in unit_rows.rows_mut() {
            let n: f64 = r.dot(&r);
            let n = n.sqrt();
            r /= n;
        }
        let targets = [2usize, 0, 3];
        let mut g = Graph::new();
        let u = g.constant(unit_rows.clone().into_dyn());
        let ce = oim_ce_graph(&mut g, u, &targets, &mem);
        for (k, &t) in targets.iter().enumerate() {
            let want = oim_loss(&unit_rows.row(k).to_owned(), t, &mem).unwrap();
            assert!((g.value(ce)[[k]] - want).abs() < 1e-9);
        }
    }
}
