//! Label assignment: one-to-one bipartite matching for detection and
//! diverse re-id sample matching (DRSM) for identity supervision.
//!
//! Detection uses an exact Hungarian solve of a classification + box cost.
//! DRSM then assigns ground-truth identities one-to-many: every proposal
//! whose IoU with a ground truth exceeds `theta` inherits that identity,
//! weighted by `(IoU - theta) / (1 - theta) + 0.5` in `[0.5, 1.5]`, and every
//! bipartite-matched proposal is kept regardless of its IoU so the re-id
//! branch has signal before the detector warms up.

use std::io::Write;

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{giou, iou, BBox};

/// Weights of the matching cost terms (classification, L1, GIoU).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchCostWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for MatchCostWeights {
    fn default() -> Self {
        MatchCostWeights { cls: 2.0, l1: 5.0, giou: 2.0 }
    }
}

/// Focal-style classification cost of predicting the single foreground
/// class: the positive-branch focal term minus the negative-branch one, so
/// confident logits are cheap and confident background is expensive.
pub fn focal_cls_cost(logit: f64, alpha: f64, gamma: f64) -> f64 {
    let p = crate::losses::sigmoid(logit);
    let eps = 1e-8;
    let pos = alpha * (1.0 - p).powf(gamma) * (-(p + eps).ln());
    let neg = (1.0 - alpha) * p.powf(gamma) * (-(1.0 - p + eps).ln());
    pos - neg
}

/// Pairwise matching cost between proposals and ground truths.
/// Boxes must be in normalized form. `M = 0` yields an `N x 0` matrix.
pub fn match_cost(
    cls_logits: &[f64],
    pred_boxes: &[BBox],
    gt_boxes: &[BBox],
    w: &MatchCostWeights,
) -> Result<Array2<f64>> {
    assert_eq!(cls_logits.len(), pred_boxes.len(), "match_cost: logits vs boxes");
    if cls_logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("classification logits in match_cost".to_string()));
    }
    let n = pred_boxes.len();
    let m = gt_boxes.len();
    let mut cost = Array2::zeros((n, m));
    for i in 0..n {
        let c_cls = focal_cls_cost(cls_logits[i], 0.25, 2.0);
        for j in 0..m {
            let l1: f64 = pred_boxes[i]
                .corners()
                .iter()
                .zip(gt_boxes[j].corners())
                .map(|(a, b)| (a - b).abs())
                .sum();
            let g = giou(&pred_boxes[i], &gt_boxes[j])?;
            cost[[i, j]] = w.cls * c_cls + w.l1 * l1 + w.giou * (1.0 - g);
        }
    }
    Ok(cost)
}

/// Exact minimum-cost one-to-one assignment of size `min(n, m)`.
///
/// Augmenting-path Hungarian on the matrix padded to square; the padding
/// constant is irrelevant because dummy rows/columns contribute a fixed
/// total, so zeros keep the arithmetic in the original cost scale.
/// Returned pairs `(row, col)` are sorted by row.
pub fn hungarian(cost: &Array2<f64>) -> Vec<(usize, usize)> {
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return vec![];
    }
    debug_assert!(cost.iter().all(|v| v.is_finite()), "hungarian: non-finite cost");
    let s = n.max(m);
    let mut a = Array2::zeros((s + 1, s + 1));
    for i in 0..n {
        for j in 0..m {
            a[[i + 1, j + 1]] = cost[[i, j]];
        }
    }

    let inf = f64::INFINITY;
    let mut u = vec![0.0; s + 1];
    let mut v = vec![0.0; s + 1];
    let mut p = vec![0usize; s + 1]; // p[j] = row matched to column j
    let mut way = vec![0usize; s + 1];
    for i in 1..=s {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; s + 1];
        let mut used = vec![false; s + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=s {
                if used[j] {
                    continue;
                }
                let cur = a[[i0, j]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=s {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=s)
        .filter_map(|j| {
            let i = p[j];
            if i >= 1 && i <= n && j <= m {
                Some((i - 1, j - 1))
            } else {
                None
            }
        })
        .collect();
    pairs.sort_unstable();
    pairs
}

/// One proposal's re-id assignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReidMatch {
    /// Index of the assigned ground truth.
    pub gt: usize,
    /// Identity of that ground truth (`-1` = unlabeled person).
    pub identity: i64,
    /// IoU between the proposal box and the assigned ground truth.
    pub iou: f64,
    /// Loss weight in `[0.5, 1.5]`.
    pub weight: f64,
}

/// Detection match plus one-to-many re-id labels with weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// One-to-one `(proposal, gt)` pairs from the Hungarian solve.
    pub det_match: Vec<(usize, usize)>,
    /// Per-proposal re-id assignment; `None` = background for re-id.
    pub reid: Vec<Option<ReidMatch>>,
}

impl Assignment {
    pub fn reid_label(&self, n: usize) -> Option<i64> {
        self.reid[n].map(|r| r.identity)
    }
}

/// Re-id weight for an IoU: `(iou - theta)/(1 - theta) + 0.5`, clamped to
/// `[0.5, 1.5]`.
pub fn reid_weight(iou: f64, theta: f64) -> f64 {
    ((iou - theta) / (1.0 - theta) + 0.5).clamp(0.5, 1.5)
}

/// Diverse re-id sample matching.
///
/// A proposal takes the identity of the ground truth it overlaps best,
/// provided that IoU strictly exceeds `theta` (ties across ground truths
/// break to the larger IoU, then the lower gt index). Bipartite-matched
/// proposals always keep their matched ground truth's identity, with the
/// weight clamped at 0.5 when the overlap is at or below the threshold.
pub fn drsm_assign(
    pred_boxes: &[BBox],
    gt_boxes: &[BBox],
    gt_ids: &[i64],
    det_match: &[(usize, usize)],
    theta: f64,
) -> Result<Assignment> {
    assert_eq!(gt_boxes.len(), gt_ids.len(), "drsm_assign: gt ids");
    assert!(theta > 0.0 && theta < 1.0, "drsm_assign: theta in (0,1)");
    let mut reid: Vec<Option<ReidMatch>> = vec![None; pred_boxes.len()];

    for (n, pb) in pred_boxes.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (g, gb) in gt_boxes.iter().enumerate() {
            let ov = iou(pb, gb)?;
            if ov > theta {
                let better = match best {
                    None => true,
                    Some((bo, _)) => ov > bo,
                };
                if better {
                    best = Some((ov, g));
                }
            }
        }
        if let Some((ov, g)) = best {
            reid[n] = Some(ReidMatch {
                gt: g,
                identity: gt_ids[g],
                iou: ov,
                weight: reid_weight(ov, theta),
            });
        }
    }

    // bipartite pairs are authoritative for their proposals
    for &(n, g) in det_match {
        let ov = iou(&pred_boxes[n], &gt_boxes[g])?;
        reid[n] = Some(ReidMatch {
            gt: g,
            identity: gt_ids[g],
            iou: ov,
            weight: reid_weight(ov, theta),
        });
    }

    Ok(Assignment { det_match: det_match.to_vec(), reid })
}

/// One line of the per-image assignment dump.
#[derive(Debug, Clone, Serialize)]
pub struct AssignmentRecord {
    pub image_id: u32,
    pub proposal: usize,
    pub gt: usize,
    pub iou: f64,
    pub weight: f64,
    pub identity: i64,
    pub bipartite: bool,
}

/// Write one JSON record per assigned proposal (line-oriented, for manual
/// inspection).
pub fn write_assignment_dump<W: Write>(
    mut w: W,
    image_id: u32,
    assignment: &Assignment,
) -> Result<()> {
    for (n, r) in assignment.reid.iter().enumerate() {
        let Some(r) = r else { continue };
        let rec = AssignmentRecord {
            image_id,
            proposal: n,
            gt: r.gt,
            iou: r.iou,
            weight: r.weight,
            identity: r.identity,
            bipartite: assignment.det_match.iter().any(|&(p, _)| p == n),
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Exhaustive minimum-cost assignment, for verification only. Enumerates
/// every injection of the smaller dimension into the larger.
pub fn brute_force_assignment(cost: &Array2<f64>) -> (f64, Vec<(usize, usize)>) {
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return (0.0, vec![]);
    }
    let transpose = n > m;
    let (rows, cols) = if transpose { (m, n) } else { (n, m) };
    let get = |i: usize, j: usize| if transpose { cost[[j, i]] } else { cost[[i, j]] };

    let mut best = (f64::INFINITY, vec![]);
    let mut chosen = vec![usize::MAX; rows];
    let mut used = vec![false; cols];
    fn rec(
        i: usize,
        rows: usize,
        cols: usize,
        acc: f64,
        get: &dyn Fn(usize, usize) -> f64,
        chosen: &mut Vec<usize>,
        used: &mut Vec<bool>,
        best: &mut (f64, Vec<(usize, usize)>),
    ) {
        if i == rows {
            if acc < best.0 {
                best.0 = acc;
                best.1 = chosen.iter().enumerate().map(|(r, &c)| (r, c)).collect();
            }
            return;
        }
        for j in 0..cols {
            if used[j] {
                continue;
            }
            used[j] = true;
            chosen[i] = j;
            rec(i + 1, rows, cols, acc + get(i, j), get, chosen, used, best);
            used[j] = false;
        }
    }
    rec(0, rows, cols, 0.0, &get, &mut chosen, &mut used, &mut best);
    let (total, pairs) = best;
    let mut pairs: Vec<(usize, usize)> = if transpose {
        pairs.into_iter().map(|(r, c)| (c, r)).collect()
    } else {
        pairs
    };
    pairs.sort_unstable();
    (total, pairs)
}

pub fn assignment_total(cost: &Array2<f64>, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost[[i, j]]).sum()
}
