//! Verification suites: independent oracles (brute-force bilinear RoI
//! pooling, exhaustive assignment search), finite-difference gradient
//! checks, and invariant checks over matching, memory, loss gating, the
//! evaluator and checkpoints. The same suites back the `verify` command and
//! the acceptance tests.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use serde::Serialize;

use crate::autodiff::{finite_diff_max_rel_err, Graph, Var};
use crate::config::Config;
use crate::data::{generate_synthetic, make_batch, SynthConfig};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::heads::{instance_interaction, DynamicConv, Linear};
use crate::losses::{
    diversity_graph, focal_vector_graph, giou_pairs_graph, normalize_rows_graph, oim_ce_graph,
    triplet_hinges_graph, LossWeights, ReIDMemory, ReidMemories,
};
use crate::matching::{
    assignment_total, brute_force_assignment, drsm_assign, hungarian, match_cost, reid_weight,
    MatchCostWeights,
};
use crate::model::PersonSearchModel;
use crate::rng::stream_rng;
use crate::roi::{dynamic_roi_align, roi_align, RoiGrid, OFFSET_GAMMA};
use crate::train::forward_loss_report;

pub const SUITE_NAMES: &[&str] = [
    "roi",
    "zero-offset",
    "hungarian",
    "gradients",
    "drsm",
    "memory",
    "gating",
    "evaluator",
]
.as_slice();

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult { name: name.to_string(), passed, detail }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Run one suite by name (`checkpoint` needs a path).
pub fn run_suite(name: &str, checkpoint: Option<&Path>) -> Result<SuiteReport> {
    let checks = match name {
        "roi" => roi_oracle_checks(),
        "zero-offset" => zero_offset_checks(),
        "hungarian" => hungarian_checks(),
        "gradients" => gradient_checks(),
        "drsm" => drsm_checks()?,
        "memory" => memory_checks()?,
        "gating" => gating_checks()?,
        "evaluator" => evaluator_checks()?,
        "checkpoint" => {
            let path = checkpoint.ok_or_else(|| {
                Error::Config("the checkpoint suite needs --checkpoint <path>".into())
            })?;
            checkpoint_checks(path)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown suite `{other}`; available: {}, checkpoint",
                SUITE_NAMES.join(", ")
            )))
        }
    };
    Ok(SuiteReport { suite: name.to_string(), checks })
}

/// Run a selection of suites (`all` = every path-free suite).
pub fn run_suites(selector: &str, checkpoint: Option<&Path>) -> Result<Vec<SuiteReport>> {
    if selector == "all" {
        let mut out = Vec::new();
        for name in SUITE_NAMES {
            out.push(run_suite(name, None)?);
        }
        if checkpoint.is_some() {
            out.push(run_suite("checkpoint", checkpoint)?);
        }
        return Ok(out);
    }
    selector
        .split(',')
        .map(|n| run_suite(n.trim(), checkpoint))
        .collect()
}

// ---------------------------------------------------------------------------
// independent oracles
// ---------------------------------------------------------------------------

/// Zero-padded bilinear read, written independently of the graph kernel.
fn oracle_bilinear(fm: &Array3<f64>, c: usize, x: f64, y: f64) -> f64 {
    let (_, h, w) = fm.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let mut acc = 0.0;
    let corners = [
        (y0 as i64, x0 as i64, (1.0 - fx) * (1.0 - fy)),
        (y0 as i64, x0 as i64 + 1, fx * (1.0 - fy)),
        (y0 as i64 + 1, x0 as i64, (1.0 - fx) * fy),
        (y0 as i64 + 1, x0 as i64 + 1, fx * fy),
    ];
    for (iy, ix, wt) in corners {
        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
            acc += wt * fm[[c, iy as usize, ix as usize]];
        }
    }
    acc
}

/// Brute-force RoI pooling oracle: averages explicit bilinear samples at the
/// interior quarter points of each bin, with optional per-bin offsets.
pub fn roi_align_oracle(
    fm: &Array3<f64>,
    b: &BBox,
    bins: usize,
    samples_per_side: usize,
    offsets: Option<&Array2<f64>>,
    gamma: f64,
) -> Array3<f64> {
    let c = fm.dim().0;
    let mut out = Array3::zeros((c, bins, bins));
    if b.area() <= 0.0 {
        return out;
    }
    let bw = b.width() / bins as f64;
    let bh = b.height() / bins as f64;
    let s = samples_per_side;
    for i in 0..bins {
        for j in 0..bins {
            let (ox, oy) = match offsets {
                Some(o) => (
                    o[[i * bins + j, 0]] * b.width() * gamma,
                    o[[i * bins + j, 1]] * b.height() * gamma,
                ),
                None => (0.0, 0.0),
            };
            for ci in 0..c {
                let mut acc = 0.0;
                for sy in 0..s {
                    for sx in 0..s {
                        let x = b.x1 + (j as f64 + (sx as f64 + 0.5) / s as f64) * bw + ox;
                        let y = b.y1 + (i as f64 + (sy as f64 + 0.5) / s as f64) * bh + oy;
                        acc += oracle_bilinear(fm, ci, x, y);
                    }
                }
                out[[ci, i, j]] = acc / (s * s) as f64;
            }
        }
    }
    out
}

fn random_map(c: usize, h: usize, w: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0))
}

fn random_box(
    h: usize,
    w: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> BBox {
    let x1 = rng.gen_range(-2.0..w as f64 - 1.0);
    let y1 = rng.gen_range(-2.0..h as f64 - 1.0);
    let bw = rng.gen_range(0.5..w as f64);
    let bh = rng.gen_range(0.5..h as f64);
    BBox::absolute(x1, y1, x1 + bw, y1 + bh).unwrap()
}

fn roi_oracle_checks() -> Vec<CheckResult> {
    let mut rng = stream_rng(0xA1, 0);
    let grid = RoiGrid::new(7);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let c = rng.gen_range(1..3);
        let h = rng.gen_range(6..14);
        let w = rng.gen_range(6..14);
        let fm = random_map(c, h, w, &mut rng);
        let b = random_box(h, w, &mut rng);
        let mut g = Graph::new();
        let fv = g.constant(fm.clone().into_dyn());
        let (out, _) = roi_align(&mut g, fv, &b, &grid);
        let want = roi_align_oracle(&fm, &b, grid.bins, grid.samples_per_side, None, 0.0);
        for (a, o) in g.value(out).iter().zip(want.iter()) {
            worst = worst.max((a - o).abs());
        }
    }
    vec![CheckResult::new(
        "roi-align-oracle-500",
        worst <= 1e-5,
        format!("max abs err {worst:.3e} over 500 random (map, box) pairs (tol 1e-5)"),
    )]
}

fn zero_offset_checks() -> Vec<CheckResult> {
    let mut rng = stream_rng(0xA2, 0);
    let grid = RoiGrid::new(7);
    let mut all_bitwise = true;
    let mut detail = String::new();
    for case in 0..100 {
        let c = rng.gen_range(1..3);
        let h = rng.gen_range(6..16);
        let w = rng.gen_range(6..16);
        let fm = random_map(c, h, w, &mut rng).into_dyn();
        let b = random_box(h, w, &mut rng);
        let mut g = Graph::new();
        let fv = g.constant(fm);
        let (plain, _) = roi_align(&mut g, fv, &b, &grid);
        let zeros = g.constant(ArrayD::zeros(IxDyn(&[grid.bins * grid.bins, 2])));
        let (dynamic, _) = dynamic_roi_align(&mut g, fv, &b, &grid, zeros, OFFSET_GAMMA);
        let same = g
            .value(plain)
            .iter()
            .zip(g.value(dynamic).iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            all_bitwise = false;
            detail = format!("case {case} differs bitwise");
            break;
        }
    }
    if all_bitwise {
        detail = "100 random cases bitwise identical".to_string();
    }
    vec![CheckResult::new("zero-offset-reduction", all_bitwise, detail)]
}

fn hungarian_checks() -> Vec<CheckResult> {
    let mut rng = stream_rng(0xA3, 0);
    let mut mismatches = 0usize;
    for _ in 0..200 {
        let n = rng.gen_range(1..=7);
        let m = rng.gen_range(1..=7);
        let cost = Array2::from_shape_fn((n, m), |_| rng.gen_range(0.0..10.0));
        let fast = hungarian(&cost);
        let (_, best) = brute_force_assignment(&cost);
        if assignment_total(&cost, &fast) != assignment_total(&cost, &best) {
            mismatches += 1;
        }
    }
    vec![CheckResult::new(
        "hungarian-exactness-200",
        mismatches == 0,
        format!("{mismatches} mismatches against exhaustive enumeration over 200 matrices up to 7x7"),
    )]
}

// ---------------------------------------------------------------------------
// gradient suite
// ---------------------------------------------------------------------------

const GRAD_TOL: f64 = 1e-3;
const GRAD_TRIALS: usize = 20;

fn grad_result(name: &str, worst: f64) -> CheckResult {
    CheckResult::new(
        name,
        worst <= GRAD_TOL,
        format!("max rel err {worst:.3e} over {GRAD_TRIALS} trials (tol {GRAD_TOL:.0e})"),
    )
}

fn rand_arr(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(lo..hi))
}

/// FD-check the gradient of `build` w.r.t. its single input.
fn fd_case(
    x0: &ArrayD<f64>,
    coords: Option<usize>,
    build: &dyn Fn(&mut Graph, Var) -> Var,
) -> f64 {
    let mut g = Graph::new();
    let x = g.leaf(x0.clone(), true);
    let loss = build(&mut g, x);
    let grads = g.backward(loss);
    let analytic = grads.get(x).expect("gradient must reach the input").clone();
    let eval = |v: &ArrayD<f64>| {
        let mut g = Graph::new();
        let x = g.leaf(v.clone(), false);
        let loss = build(&mut g, x);
        g.scalar(loss)
    };
    finite_diff_max_rel_err(&eval, x0, &analytic, 1e-6, coords)
}

pub fn gradient_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();

    // focal loss
    let mut worst = 0.0f64;
    let mut rng = stream_rng(0xB1, 0);
    for _ in 0..GRAD_TRIALS {
        let x0 = rand_arr(&mut rng, &[6, 1], -3.0, 3.0);
        let targets: Vec<bool> = (0..6).map(|_| rng.gen_range(0.0..1.0) < 0.5).collect();
        let t = targets.clone();
        worst = worst.max(fd_case(&x0, None, &move |g, x| {
            let f = focal_vector_graph(g, x, &t, 0.25, 2.0);
            g.sum_all(f)
        }));
    }
    out.push(grad_result("grad-focal", worst));

    // giou loss
    let mut worst = 0.0f64;
    let mut rng = stream_rng(0xB2, 0);
    for _ in 0..GRAD_TRIALS {
        let mut corners = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..3 {
            let x1: f64 = rng.gen_range(0.0..0.4);
            let y1: f64 = rng.gen_range(0.0..0.4);
            corners.extend([x1, y1, x1 + rng.gen_range(0.1..0.5), y1 + rng.gen_range(0.1..0.5)]);
            let gx: f64 = rng.gen_range(0.0..0.4);
            let gy: f64 = rng.gen_range(0.0..0.4);
            gts.push(
                BBox::normalized(gx, gy, gx + rng.gen_range(0.1..0.5), gy + rng.gen_range(0.1..0.5))
                    .unwrap(),
            );
        }
        let x0 = ArrayD::from_shape_vec(IxDyn(&[3, 4]), corners).unwrap();
        let gt = gts.clone();
        worst = worst.max(fd_case(&x0, None, &move |g, x| {
            let gi = giou_pairs_graph(g, x, &gt);
            let neg = g.neg(gi);
            let l = g.scalar_add(neg, 1.0);
            g.sum_all(l)
        }));
    }
    out.push(grad_result("grad-giou", worst));

    // instance-matching (memory) loss, full path: normalize + ce + triplet
    let mut worst = 0.0f64;
    let mut rng = stream_rng(0xB3, 0);
    for _ in 0..GRAD_TRIALS {
        let d = 6;
        let mut mem = ReIDMemory::new(4, d, 3, 0.5, 1.0 / 30.0);
        for id in 0..4 {
            let f = rand_arr(&mut rng, &[d], -1.0, 1.0);
            let f1 = f.into_dimensionality::<ndarray::Ix1>().unwrap();
            let n = f1.dot(&f1).sqrt();
            mem.update(&[(f1 / n, id)]).unwrap();
        }
        let k = 3;
        let ids: Vec<usize> = (0..k).map(|_| rng.gen_range(0..4)).collect();
        let x0 = rand_arr(&mut rng, &[k, d], -1.0, 1.0);
        let mem2 = mem.clone();
        let idc = ids.clone();
        worst = worst.max(fd_case(&x0, None, &move |g, x| {
            let unit = normalize_rows_graph(g, x);
            let ce = oim_ce_graph(g, unit, &idc, &mem2);
            let hinges = triplet_hinges_graph(g, unit, &idc, &mem2, 0.3);
            let hl = g.reshape(hinges, &[idc.len()]);
            let s = g.add(ce, hl);
            g.sum_all(s)
        }));
    }
    out.push(grad_result("grad-oim", worst));

    // diversity loss
    let mut worst = 0.0f64;
    let mut rng = stream_rng(0xB4, 0);
    for _ in 0..GRAD_TRIALS {
        let x0 = rand_arr(&mut rng, &[4, 10], -1.0, 1.0);
        worst = worst.max(fd_case(&x0, None, &move |g, x| {
            let ip = g.slice_cols(x, 0, 5);
            let ih = g.slice_cols(x, 5, 10);
            diversity_graph(g, ip, ih, &[0.25; 4], false)
        }));
    }
    out.push(grad_result("grad-diversity", worst));

    // instance interaction (w.r.t. proposal features and roi features)
    let mut worst = 0.0f64;
    let mut rng = stream_rng(0xB5, 0);
    for trial in 0..GRAD_TRIALS {
        let (c, r, d, dynh, n) = (4, 3, 8, 3, 2);
        let mut store = crate::params::ParamStore::new();
        let mut prng = stream_rng(0xB5, 1000 + trial as u64);
        let dc = DynamicConv::new(&mut store, "dc", d, c, dynh, &mut prng);
        let fc = Linear::new(&mut store, "fc", c * r * r, d, 1.0, &mut prng);
        let per = c * r * r;
        let x0 = rand_arr(&mut rng, &[n, per + d], -1.0, 1.0);
        let st = store.clone();
        worst = worst.max(fd_case(&x0, Some(30), &move |g, x| {
            let roi_flat = g.slice_cols(x, 0, per);
            let fp = g.slice_cols(x, per, per + d);
            let rois: Vec<Var> = (0..n)
                .map(|i| {
                    let row = g.gather_rows(roi_flat, &[i]);
                    g.reshape(row, &[c, r, r])
                })
                .collect();
            let y = instance_interaction(g, &st, &rois, fp, &dc, &fc);
            let sq = g.mul(y, y);
            g.sum_all(sq)
        }));
    }
    out.push(grad_result("grad-instance-interaction", worst));

    // hierarchical interaction re-id branch
    let mut worst = 0.0f64;
    let mut rng = stream_rng(0xB6, 0);
    for trial in 0..GRAD_TRIALS {
        let dims = crate::heads::HeadDims {
            channels: 4,
            proposal_dim: 8,
            dyn_hidden: 3,
            reid_dim: 6,
            roi_bins: 3,
            ffn_hidden: 16,
        };
        let mut store = crate::params::ParamStore::new();
        let mut prng = stream_rng(0xB6, 2000 + trial as u64);
        let head = crate::heads::ReidHead::new(&mut store, "rh", &dims, &mut prng);
        let per = dims.channels * dims.roi_bins * dims.roi_bins;
        let n = 2;
        let x0 = rand_arr(&mut rng, &[n, per + dims.proposal_dim], -1.0, 1.0);
        let st = store.clone();
        worst = worst.max(fd_case(&x0, Some(30), &move |g, x| {
            let roi_flat = g.slice_cols(x, 0, per);
            let fp = g.slice_cols(x, per, per + dims.proposal_dim);
            let rois: Vec<Var> = (0..n)
                .map(|i| {
                    let row = g.gather_rows(roi_flat, &[i]);
                    g.reshape(row, &[dims.channels, dims.roi_bins, dims.roi_bins])
                })
                .collect();
            let (f_ih, f_rh) = head.hirm_forward(g, &st, &rois, fp);
            let a = g.mul(f_ih, f_ih);
            let b = g.mul(f_rh, f_rh);
            let sa = g.sum_all(a);
            let sb = g.sum_all(b);
            g.add(sa, sb)
        }));
    }
    out.push(grad_result("grad-hirm", worst));

    // dynamic RoI sampling offsets
    let mut worst = 0.0f64;
    let mut rng = stream_rng(0xB7, 0);
    for trial in 0..GRAD_TRIALS {
        let grid = RoiGrid::new(3);
        let fm = random_map(2, 9, 9, &mut rng).into_dyn();
        // keep the box interior so samples avoid the border kinks
        let x1 = rng.gen_range(0.6..2.0);
        let y1 = rng.gen_range(0.6..2.0);
        let b = BBox::absolute(x1, y1, x1 + rng.gen_range(3.0..5.0), y1 + rng.gen_range(3.0..5.0))
            .unwrap();
        let x0 = rand_arr(&mut rng, &[9, 2], -0.8, 0.8);
        let fmc = fm.clone();
        let _ = trial;
        worst = worst.max(fd_case(&x0, None, &move |g, x| {
            let f = g.constant(fmc.clone());
            let (out, _) = dynamic_roi_align(g, f, &b, &grid, x, OFFSET_GAMMA);
            let sq = g.mul(out, out);
            g.sum_all(sq)
        }));
    }
    out.push(grad_result("grad-dynamic-roi-offsets", worst));

    out
}

// ---------------------------------------------------------------------------
// matching / memory / gating / evaluator suites
// ---------------------------------------------------------------------------

fn drsm_checks() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let theta = 0.7;
    let w_top = reid_weight(1.0, theta);
    let w_low = reid_weight(theta + 1e-12, theta);
    out.push(CheckResult::new(
        "drsm-weight-endpoints",
        (w_top - 1.5).abs() < 1e-9 && (w_low - 0.5).abs() < 1e-9,
        format!("weight(1.0) = {w_top}, weight(theta+) = {w_low}"),
    ));

    // exact-threshold exclusion without a bipartite match
    let pred = BBox::normalized(0.0, 0.0, 1.0, 0.7)?;
    let gt = BBox::normalized(0.0, 0.0, 1.0, 1.0)?;
    let a = drsm_assign(&[pred], &[gt], &[0], &[], theta)?;
    let excluded = a.reid[0].is_none();
    let b = drsm_assign(&[pred], &[gt], &[0], &[(0, 0)], theta)?;
    let included = b.reid[0].map(|r| r.weight) == Some(0.5);
    out.push(CheckResult::new(
        "drsm-threshold-exclusion",
        excluded && included,
        format!("IoU = theta excluded unless bipartite-matched (excluded={excluded}, kept at 0.5={included})"),
    ));

    // superset property over random scenes
    let mut rng = stream_rng(0xC1, 0);
    let mut violations = 0usize;
    for _ in 0..100 {
        let n_gt = rng.gen_range(1..4);
        let n_prop = rng.gen_range(2..12);
        let gts: Vec<BBox> = (0..n_gt)
            .map(|_| {
                let x1: f64 = rng.gen_range(0.0..0.5);
                let y1: f64 = rng.gen_range(0.0..0.5);
                BBox::normalized(x1, y1, x1 + rng.gen_range(0.1..0.4), y1 + rng.gen_range(0.1..0.4))
                    .unwrap()
            })
            .collect();
        let ids: Vec<i64> = (0..n_gt as i64).collect();
        let preds: Vec<BBox> = (0..n_prop)
            .map(|_| {
                let x1: f64 = rng.gen_range(0.0..0.6);
                let y1: f64 = rng.gen_range(0.0..0.6);
                BBox::normalized(x1, y1, x1 + rng.gen_range(0.05..0.4), y1 + rng.gen_range(0.05..0.4))
                    .unwrap()
            })
            .collect();
        let logits: Vec<f64> = (0..n_prop).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let cost = match_cost(&logits, &preds, &gts, &MatchCostWeights::default())?;
        let det = hungarian(&cost);
        let assign = drsm_assign(&preds, &gts, &ids, &det, theta)?;
        for &(p, g) in &det {
            match assign.reid[p] {
                Some(r) if r.gt == g => {}
                _ => violations += 1,
            }
        }
    }
    out.push(CheckResult::new(
        "drsm-superset-100-scenes",
        violations == 0,
        format!("{violations} bipartite pairs lost their re-id label over 100 random scenes"),
    ));
    Ok(out)
}

fn memory_checks() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut rng = stream_rng(0xC2, 0);
    let mut mem = ReIDMemory::new(6, 9, 5, 0.5, 1.0 / 30.0);
    for _ in 0..1000 {
        let raw: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = Array1::from_vec(raw);
        let n = a.dot(&a).sqrt();
        let id: i64 = rng.gen_range(-1..6);
        mem.update(&[(a / n, id)])?;
    }
    let dev = mem.max_norm_deviation();
    out.push(CheckResult::new(
        "memory-norm-after-1000-updates",
        dev < 1e-6,
        format!("max unit-norm deviation {dev:.3e} (tol 1e-6)"),
    ));

    let q = 5;
    let mut fresh = ReIDMemory::new(2, 4, q, 0.5, 1.0);
    let mut wrapped_at_q = true;
    for k in 0..q {
        let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = Array1::from_vec(raw);
        let n = a.dot(&a).sqrt();
        fresh.update(&[(a / n, -1)])?;
        if k + 1 < q && fresh.cursor() != k + 1 {
            wrapped_at_q = false;
        }
    }
    let cursor_wrapped = fresh.cursor() == 0 && fresh.queue_occupied() == q;
    // the next insertion overwrites slot zero
    let before = fresh.queue_row(0).to_owned();
    let probe = Array1::from_vec(vec![0.0, 0.0, 0.0, 1.0]);
    fresh.update(&[(probe.clone(), -1)])?;
    let overwrote = (fresh.queue_row(0).to_owned() - &probe).iter().all(|v| v.abs() < 1e-12)
        && (before - fresh.queue_row(0).to_owned()).iter().any(|v| v.abs() > 1e-9);
    out.push(CheckResult::new(
        "memory-queue-wraparound",
        wrapped_at_q && cursor_wrapped && overwrote,
        format!(
            "cursor wrapped at exactly Q={q} insertions: {cursor_wrapped}; oldest slot overwritten: {overwrote}"
        ),
    ));
    Ok(out)
}

fn gating_config() -> Config {
    let mut cfg = Config::default();
    cfg.model.stages = 6;
    cfg.model.num_proposals = 5;
    cfg.model.channels = 8;
    cfg.model.proposal_dim = 16;
    cfg.model.dyn_hidden = 4;
    cfg.model.reid_dim = 8;
    cfg.model.roi_bins = 3;
    cfg.model.ffn_hidden = 32;
    cfg.synth = SynthConfig {
        n_identities: 2,
        n_train_images: 4,
        n_gallery_images: 2,
        n_query_images: 2,
        image_size: (48, 48),
        persons_per_image: (1, 2),
        unlabeled_fraction: 0.0,
        seed: 5,
    };
    cfg.train.memory.queue = 4;
    cfg
}

fn gating_checks() -> Result<Vec<CheckResult>> {
    let cfg = gating_config();
    let ds = generate_synthetic(&cfg.synth)?;
    let ex = make_batch(&ds, &ds.split_indices(crate::data::Split::Train)[..1], &cfg.pixel_norm)?
        .remove(0);
    let model = PersonSearchModel::new(&cfg.model, 3)?;
    let memories = ReidMemories::new(
        ds.num_labeled(),
        cfg.model.reid_dim,
        cfg.train.memory.queue,
        cfg.train.memory.momentum,
        cfg.train.memory.temperature,
    );
    let weights = LossWeights::default();
    let base = forward_loss_report(&model, &memories, &ex, &weights, 0.7)?;

    // perturb every re-id head parameter
    let mut perturbed = model.clone();
    let names: Vec<String> = perturbed
        .store
        .iter()
        .filter(|(_, e)| e.name.contains(".reid."))
        .map(|(_, e)| e.name.clone())
        .collect();
    for name in &names {
        let id = perturbed.store.by_name(name).unwrap();
        let v = perturbed.store.value_mut(id);
        *v += 0.05;
    }
    let shifted = forward_loss_report(&perturbed, &memories, &ex, &weights, 0.7)?;

    let det_unchanged = base
        .stages
        .iter()
        .zip(&shifted.stages)
        .all(|(a, b)| a.focal == b.focal && a.l1 == b.l1 && a.giou == b.giou);
    let reid_stages_changed: Vec<usize> = base
        .stages
        .iter()
        .zip(&shifted.stages)
        .enumerate()
        .filter_map(|(s, (a, b))| (a.toim != b.toim || a.div != b.div).then_some(s + 1))
        .collect();
    let only_last_two = reid_stages_changed == vec![5, 6];
    let total_changed = base.total != shifted.total;

    let mut out = vec![CheckResult::new(
        "gating-reid-params-touch-only-last-two-stages",
        det_unchanged && only_last_two && total_changed,
        format!(
            "detection losses unchanged: {det_unchanged}; re-id terms changed at stages {reid_stages_changed:?}; total changed: {total_changed}"
        ),
    )];

    // lambda = 0 reduces the total to the detection-only sum
    let mut det_only = weights;
    det_only.reid_lambda = 0.0;
    let reduced = forward_loss_report(&model, &memories, &ex, &det_only, 0.7)?;
    let det_sum: f64 = reduced
        .stages
        .iter()
        .map(|s| weights.cls * s.focal + weights.l1 * s.l1 + weights.giou * s.giou)
        .sum();
    let diff = (reduced.total - det_sum).abs();
    out.push(CheckResult::new(
        "gating-lambda-zero-reduction",
        diff < 1e-6,
        format!("|total - detection-only sum| = {diff:.3e} (tol 1e-6)"),
    ));
    Ok(out)
}

fn evaluator_checks() -> Result<Vec<CheckResult>> {
    use crate::eval::{score_ranking, search, GalleryCandidate};
    let ds = generate_synthetic(&SynthConfig {
        n_identities: 3,
        n_train_images: 6,
        n_gallery_images: 4,
        n_query_images: 3,
        image_size: (64, 64),
        persons_per_image: (1, 2),
        unlabeled_fraction: 0.0,
        seed: 99,
    })?;
    let gallery_imgs: Vec<u32> = ds
        .split_indices(crate::data::Split::Gallery)
        .iter()
        .map(|&i| ds.doc.images[i].id)
        .collect();
    let mut gallery = Vec::new();
    for id in 0..3i64 {
        for (which, p) in ds
            .doc
            .persons
            .iter()
            .filter(|p| p.identity == id && gallery_imgs.contains(&p.image_id))
            .enumerate()
        {
            let mut f = Array1::zeros(4);
            f[id as usize] = 1.0;
            gallery.push(GalleryCandidate {
                image_id: p.image_id,
                index_in_image: which,
                box_abs: p.bbox()?,
                score: 0.9,
                feature: f,
            });
        }
    }
    let mut perfect = true;
    for id in 0..3i64 {
        let mut q = Array1::zeros(4);
        q[id as usize] = 1.0;
        let ranking = search(&q, &gallery, None);
        let (ap, top1, _, _) = score_ranking(&ds, id, &ranking, &gallery, None, 0.5)?;
        if (ap - 1.0).abs() > 1e-12 || !top1 {
            perfect = false;
        }
    }
    let mut out = vec![CheckResult::new(
        "evaluator-one-hot-fixture",
        perfect,
        "identity one-hot features rank perfectly (mAP 1.0, top-1 1.0)".to_string(),
    )];

    // rank-2 behind one false positive: AP exactly 0.5
    let pos_person = ds
        .doc
        .persons
        .iter()
        .find(|p| p.identity == 0 && gallery_imgs.contains(&p.image_id))
        .unwrap();
    let pos = GalleryCandidate {
        image_id: pos_person.image_id,
        index_in_image: 0,
        box_abs: pos_person.bbox()?,
        score: 0.9,
        feature: Array1::from_vec(vec![0.6, 0.8]),
    };
    let fp = GalleryCandidate {
        image_id: pos_person.image_id,
        index_in_image: 7,
        box_abs: BBox::absolute(0.0, 0.0, 3.0, 3.0)?,
        score: 0.9,
        feature: Array1::from_vec(vec![1.0, 0.0]),
    };
    let allowed: HashSet<u32> = [pos.image_id].into_iter().collect();
    let gallery2 = vec![pos, fp];
    let q = Array1::from_vec(vec![1.0, 0.1]);
    let qn: f64 = q.dot(&q);
    let ranking = search(&(q / qn.sqrt()), &gallery2, Some(&allowed));
    let (ap, top1, n_rel, _) = score_ranking(&ds, 0, &ranking, &gallery2, Some(&allowed), 0.5)?;
    out.push(CheckResult::new(
        "evaluator-ap-half-fixture",
        ap == 0.5 && !top1 && n_rel == 1,
        format!("true match at rank 2 behind one false positive: AP = {ap} (want exactly 0.5)"),
    ));
    Ok(out)
}

/// Validate invariants of a saved checkpoint: parameters finite, proposal
/// boxes valid, every occupied memory row at unit norm.
pub fn checkpoint_checks(path: &Path) -> Vec<CheckResult> {
    let trainer = match crate::train::load_checkpoint(path) {
        Ok(t) => t,
        Err(e) => {
            return vec![CheckResult::new(
                "checkpoint-readable",
                false,
                format!("{e}"),
            )]
        }
    };
    let mut out = vec![CheckResult::new("checkpoint-readable", true, format!("{}", path.display()))];

    let non_finite: Vec<String> = trainer
        .model
        .store
        .iter()
        .filter(|(_, e)| e.value.iter().any(|v| !v.is_finite()))
        .map(|(_, e)| e.name.clone())
        .collect();
    out.push(CheckResult::new(
        "checkpoint-params-finite",
        non_finite.is_empty(),
        if non_finite.is_empty() {
            format!("{} parameters finite", trainer.model.store.len())
        } else {
            format!("non-finite parameters: {non_finite:?}")
        },
    ));

    let boxes_ok = trainer.model.proposals.boxes_list(&trainer.model.store).is_ok();
    out.push(CheckResult::new(
        "checkpoint-proposal-boxes-valid",
        boxes_ok,
        "proposal boxes parse as valid normalized boxes".to_string(),
    ));

    let dev = trainer.memories.max_norm_deviation();
    out.push(CheckResult::new(
        "checkpoint-memory-norm",
        dev < 1e-6,
        format!("memory-norm invariant: max unit-norm deviation {dev:.3e} (tol 1e-6)"),
    ));
    out
}
