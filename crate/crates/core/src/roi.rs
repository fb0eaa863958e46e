//! RoI feature extraction: fixed-grid RoIAlign and its dynamic variant whose
//! per-bin sample locations are translated by offsets predicted from the
//! proposal feature.
//!
//! Boxes are expected in absolute feature-map coordinates (image pixels
//! divided by the map stride). Each of the `R x R` bins is averaged over a
//! 2x2 grid of bilinear samples at the bin-interior quarter points; reads
//! outside the map see zeros.

use ndarray::Array2;

use crate::autodiff::{Graph, Var};
use crate::geometry::BBox;
use crate::params::{ParamId, ParamStore};

/// Offset scale: offsets are fractions of box width/height, scaled by this
/// factor so a freshly initialized predictor stays near the zero-offset
/// identity.
pub const OFFSET_GAMMA: f64 = 0.1;

/// Fixed sampling grid: `bins x bins` output cells, `samples_per_side`^2
/// bilinear samples per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiGrid {
    pub bins: usize,
    pub samples_per_side: usize,
}

impl RoiGrid {
    pub fn new(bins: usize) -> Self {
        assert!(bins >= 1);
        RoiGrid { bins, samples_per_side: 2 }
    }

    /// Samples per bin (the averaging group size).
    pub fn group(&self) -> usize {
        self.samples_per_side * self.samples_per_side
    }

    /// Centers of the `R x R` bins, row-major: `[R*R, 2]` as `(x, y)`.
    pub fn bin_centers(&self, b: &BBox) -> Array2<f64> {
        let r = self.bins;
        let bw = b.width() / r as f64;
        let bh = b.height() / r as f64;
        let mut out = Array2::zeros((r * r, 2));
        for i in 0..r {
            for j in 0..r {
                out[[i * r + j, 0]] = b.x1 + (j as f64 + 0.5) * bw;
                out[[i * r + j, 1]] = b.y1 + (i as f64 + 0.5) * bh;
            }
        }
        out
    }

    /// All sample points for a box, bin-major then sample-major:
    /// `[R*R*group, 2]` as `(x, y)`. Samples sit at the interior quarter
    /// points of each bin.
    pub fn sample_points(&self, b: &BBox) -> Array2<f64> {
        let r = self.bins;
        let s = self.samples_per_side;
        let bw = b.width() / r as f64;
        let bh = b.height() / r as f64;
        let mut out = Array2::zeros((r * r * s * s, 2));
        let mut k = 0;
        for i in 0..r {
            for j in 0..r {
                for sy in 0..s {
                    for sx in 0..s {
                        let fx = (sx as f64 + 0.5) / s as f64;
                        let fy = (sy as f64 + 0.5) / s as f64;
                        out[[k, 0]] = b.x1 + (j as f64 + fx) * bw;
                        out[[k, 1]] = b.y1 + (i as f64 + fy) * bh;
                        k += 1;
                    }
                }
            }
        }
        out
    }
}

/// RoIAlign over a `[C, h, w]` feature map. Returns the pooled `[C, R, R]`
/// features plus a degeneracy flag: a zero-area box pools to all zeros.
pub fn roi_align(g: &mut Graph, fm: Var, b: &BBox, grid: &RoiGrid) -> (Var, bool) {
    let c = g.shape(fm)[0];
    let r = grid.bins;
    if b.area() <= 0.0 {
        let zeros = ndarray::ArrayD::zeros(ndarray::IxDyn(&[c, r, r]));
        return (g.constant(zeros), true);
    }
    let pts = g.constant(grid.sample_points(b).into_dyn());
    let sampled = g.bilinear_sample(fm, pts);
    let pooled = g.avg_groups(sampled, grid.group());
    (g.reshape(pooled, &[c, r, r]), false)
}

/// Dynamic RoIAlign: every sample point of bin `(i, j)` is translated by
/// `offsets[i*R+j] * (box_w, box_h) * gamma` before sampling. With zero
/// offsets this reduces exactly to [`roi_align`]. Gradients flow to the
/// feature map and to the offsets.
pub fn dynamic_roi_align(
    g: &mut Graph,
    fm: Var,
    b: &BBox,
    grid: &RoiGrid,
    offsets: Var,
    gamma: f64,
) -> (Var, bool) {
    let c = g.shape(fm)[0];
    let r = grid.bins;
    assert_eq!(g.shape(offsets), &[r * r, 2], "dynamic_roi_align: offsets shape");
    if b.area() <= 0.0 {
        let zeros = ndarray::ArrayD::zeros(ndarray::IxDyn(&[c, r, r]));
        return (g.constant(zeros), true);
    }
    let base = g.constant(grid.sample_points(b).into_dyn());
    let per_sample = g.repeat_rows(offsets, grid.group());
    let n_pts = r * r * grid.group();
    let mut scale = Array2::zeros((n_pts, 2));
    for k in 0..n_pts {
        scale[[k, 0]] = b.width() * gamma;
        scale[[k, 1]] = b.height() * gamma;
    }
    let scale = g.constant(scale.into_dyn());
    let shift = g.mul(per_sample, scale);
    let pts = g.add(base, shift);
    let sampled = g.bilinear_sample(fm, pts);
    let pooled = g.avg_groups(sampled, grid.group());
    (g.reshape(pooled, &[c, r, r]), false)
}

/// Linear predictor mapping proposal features to per-bin offsets.
/// Initialized to zeros so the first forward pass reproduces plain RoIAlign.
#[derive(Debug, Clone)]
pub struct OffsetPredictor {
    pub weight: ParamId,
    pub bias: ParamId,
    pub bins: usize,
}

impl OffsetPredictor {
    pub fn new(store: &mut ParamStore, prefix: &str, feature_dim: usize, bins: usize) -> Self {
        let weight = store.add_zeros(&format!("{prefix}.w"), &[feature_dim, bins * bins * 2], true);
        let bias = store.add_zeros(&format!("{prefix}.b"), &[bins * bins * 2], false);
        OffsetPredictor { weight, bias, bins }
    }

    /// `[N, d] -> [N, R*R*2]`; row `n` reshapes to that proposal's `[R*R, 2]`
    /// offsets.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_p: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let lin = g.matmul(f_p, w);
        g.add_row_vec(lin, b)
    }

    /// Offsets of one proposal as `[R*R, 2]`.
    pub fn row(&self, g: &mut Graph, all: Var, n: usize) -> Var {
        let row = g.gather_rows(all, &[n]);
        g.reshape(row, &[self.bins * self.bins, 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_max_rel_err;
    use crate::rng::stream_rng;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn abox(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::absolute(x1, y1, x2, y2).unwrap()
    }

    fn rand_map(c: usize, h: usize, w: usize, seed: u64) -> ArrayD<f64> {
        let mut rng = stream_rng(seed, 21);
        ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |_| rng.gen_range(-1.0..1.0))
    }

    /// `fm[y][x] = x` over the full map.
    fn ramp_map(c: usize, h: usize, w: usize) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |ix| ix[2] as f64)
    }

    #[test]
    fn bin_centers_form_uniform_lattice() {
        let grid = RoiGrid::new(3);
        let b = abox(1.0, 2.0, 7.0, 8.0);
        let c = grid.bin_centers(&b);
        assert_eq!(c.nrows(), 9);
        assert!((c[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((c[[0, 1]] - 3.0).abs() < 1e-12);
        assert!((c[[8, 0]] - 6.0).abs() < 1e-12);
        assert!((c[[8, 1]] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let fm = ArrayD::from_elem(IxDyn(&[3, 8, 8]), 1.75);
        let grid = RoiGrid::new(7);
        let mut g = Graph::new();
        let f = g.constant(fm);
        let (out, degenerate) = roi_align(&mut g, f, &abox(0.5, 1.0, 6.5, 7.0), &grid);
        assert!(!degenerate);
        assert!(g.value(out).iter().all(|&v| (v - 1.75).abs() < 1e-12));
    }

    #[test]
    fn ramp_map_bins_read_sample_mean() {
        let fm = ramp_map(1, 8, 8);
        let grid = RoiGrid::new(7);
        let b = abox(0.0, 0.0, 7.0, 7.0);
        let mut g = Graph::new();
        let f = g.constant(fm);
        let (out, _) = roi_align(&mut g, f, &b, &grid);
        let v = g.value(out);
        for i in 0..7 {
            for j in 0..7 {
                // mean of x-samples at j+0.25 and j+0.75
                let want = j as f64 + 0.5;
                assert!((v[[0, i, j]] - want).abs() < 1e-12, "bin ({i},{j})");
            }
        }
    }

    #[test]
    fn zero_area_box_pools_to_zeros_with_flag() {
        let fm = rand_map(2, 8, 8, 1);
        let grid = RoiGrid::new(4);
        let mut g = Graph::new();
        let f = g.constant(fm);
        let (out, degenerate) = roi_align(&mut g, f, &abox(3.0, 3.0, 3.0, 5.0), &grid);
        assert!(degenerate);
        assert!(g.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_offsets_reduce_to_roi_align_bitwise() {
        let grid = RoiGrid::new(5);
        let mut rng = stream_rng(3, 21);
        for trial in 0..20 {
            let fm = rand_map(2, 9, 9, 100 + trial);
            let x1: f64 = rng.gen_range(-1.0..5.0);
            let y1: f64 = rng.gen_range(-1.0..5.0);
            let b = abox(x1, y1, x1 + rng.gen_range(0.5..5.0), y1 + rng.gen_range(0.5..5.0));
            let mut g = Graph::new();
            let f = g.constant(fm);
            let (plain, _) = roi_align(&mut g, f, &b, &grid);
            let zeros = g.constant(ArrayD::zeros(IxDyn(&[25, 2])));
            let (dynamic, _) = dynamic_roi_align(&mut g, f, &b, &grid, zeros, OFFSET_GAMMA);
            let pv = g.value(plain);
            let dv = g.value(dynamic);
            for (a, b) in pv.iter().zip(dv.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn constant_map_is_offset_invariant() {
        let fm = ArrayD::from_elem(IxDyn(&[2, 10, 10]), -0.6);
        let grid = RoiGrid::new(3);
        let mut rng = stream_rng(4, 21);
        let off = ArrayD::from_shape_fn(IxDyn(&[9, 2]), |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let f = g.constant(fm);
        let o = g.constant(off);
        let (out, _) = dynamic_roi_align(&mut g, f, &abox(2.0, 2.0, 8.0, 8.0), &grid, o, 0.1);
        assert!(g.value(out).iter().all(|&v| (v + 0.6).abs() < 1e-12));
    }

    #[test]
    fn uniform_x_offset_shifts_ramp_bins() {
        // on f(x, y) = x, shifting sample points by delta*w*gamma adds that
        // amount to every bin (samples stay in the interior)
        let fm = ramp_map(1, 12, 12);
        let grid = RoiGrid::new(3);
        let b = abox(3.0, 3.0, 9.0, 9.0);
        let delta = 0.25;
        let off = ArrayD::from_shape_fn(IxDyn(&[9, 2]), |ix| if ix[1] == 0 { delta } else { 0.0 });
        let mut g = Graph::new();
        let f = g.constant(fm);
        let zeros = g.constant(ArrayD::zeros(IxDyn(&[9, 2])));
        let o = g.constant(off);
        let (base, _) = dynamic_roi_align(&mut g, f, &b, &grid, zeros, OFFSET_GAMMA);
        let (shifted, _) = dynamic_roi_align(&mut g, f, &b, &grid, o, OFFSET_GAMMA);
        let want = delta * b.width() * OFFSET_GAMMA;
        for (s, z) in g.value(shifted).iter().zip(g.value(base).iter()) {
            assert!((s - z - want).abs() < 1e-9, "{s} vs {z}");
        }
    }

    #[test]
    fn translation_by_integer_offset_is_consistent() {
        // embed content away from borders; shift map content and box together
        let mut fm = ArrayD::zeros(IxDyn(&[1, 20, 20]));
        let mut rng = stream_rng(5, 21);
        for y in 4..10 {
            for x in 4..10 {
                fm[[0, y, x]] = rng.gen_range(-1.0..1.0);
            }
        }
        let mut shifted = ArrayD::zeros(IxDyn(&[1, 20, 20]));
        for y in 4..10 {
            for x in 4..10 {
                shifted[[0, y + 3, x + 2]] = fm[[0, y, x]];
            }
        }
        let grid = RoiGrid::new(4);
        let b = abox(4.5, 4.5, 9.5, 9.5);
        let bs = abox(6.5, 7.5, 11.5, 12.5);
        let mut g = Graph::new();
        let f = g.constant(fm);
        let fs = g.constant(shifted);
        let (a, _) = roi_align(&mut g, f, &b, &grid);
        let (c, _) = roi_align(&mut g, fs, &bs, &grid);
        for (x, y) in g.value(a).iter().zip(g.value(c).iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn offset_predictor_is_zero_initialized() {
        let mut store = ParamStore::new();
        let pred = OffsetPredictor::new(&mut store, "off", 16, 7);
        let mut g = Graph::new();
        let fp = g.constant(rand_map(1, 4, 16, 6).into_shape_with_order(IxDyn(&[4, 16])).unwrap());
        let out = pred.forward(&mut g, &store, fp);
        assert_eq!(g.shape(out), &[4, 7 * 7 * 2]);
        assert!(g.value(out).iter().all(|&v| v == 0.0));
        let row = pred.row(&mut g, out, 2);
        assert_eq!(g.shape(row), &[49, 2]);
    }

    #[test]
    fn gradients_flow_to_map_offsets_and_proposal_features() {
        let grid = RoiGrid::new(3);
        let b = abox(1.3, 0.7, 6.2, 5.9);
        let fm0 = rand_map(2, 8, 8, 7);
        let mut store = ParamStore::new();
        let mut rng = stream_rng(8, 21);
        let pred = OffsetPredictor::new(&mut store, "off", 6, 3);
        // non-zero weights so offsets depend on f_p
        store
            .set_by_name(
                "off.w",
                ArrayD::from_shape_fn(IxDyn(&[6, 18]), |_| rng.gen_range(-0.3..0.3)),
            )
            .unwrap();
        let fp0 = ArrayD::from_shape_fn(IxDyn(&[1, 6]), |_| rng.gen_range(-1.0..1.0));
        let run = |fmv: &ArrayD<f64>, fpv: &ArrayD<f64>, wants: bool| {
            let mut g = Graph::new();
            let fm = g.leaf(fmv.clone(), wants);
            let fp = g.leaf(fpv.clone(), wants);
            let all = pred.forward(&mut g, &store, fp);
            let off = pred.row(&mut g, all, 0);
            let (out, _) = dynamic_roi_align(&mut g, fm, &b, &grid, off, OFFSET_GAMMA);
            let sq = g.mul(out, out);
            let loss = g.sum_all(sq);
            (g, fm, fp, loss)
        };
        let (g, fm, fp, loss) = run(&fm0, &fp0, true);
        let grads = g.backward(loss);
        let dfm = grads.get(fm).unwrap().clone();
        let dfp = grads.get(fp).unwrap().clone();
        let efm = |v: &ArrayD<f64>| {
            let (g, _, _, loss) = run(v, &fp0, false);
            g.scalar(loss)
        };
        let efp = |v: &ArrayD<f64>| {
            let (g, _, _, loss) = run(&fm0, v, false);
            g.scalar(loss)
        };
        assert!(finite_diff_max_rel_err(&efm, &fm0, &dfm, 1e-6, Some(40)) < 1e-3);
        assert!(finite_diff_max_rel_err(&efp, &fp0, &dfp, 1e-6, None) < 1e-3);
    }
}
