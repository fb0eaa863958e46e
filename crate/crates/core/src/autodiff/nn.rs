//! Structured network operations: convolution, nearest upsampling, bilinear
//! map sampling, and grouped averaging.

use std::rc::Rc;

use ndarray::{Array2, Array3, Array4, ArrayD, Ix3, Ix4};

use super::{as2, Graph, Var};

impl Graph {
    /// 2-D convolution of a `[c_in, h, w]` map with `[c_out, c_in, kh, kw]`
    /// weights, zero padding `pad` on every side and stride `stride`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let vx = self.value(x).view().into_dimensionality::<Ix3>().unwrap().to_owned();
        let vw = self.value(w).view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let (c_in, h, wdt) = vx.dim();
        let (c_out, wc_in, kh, kw) = vw.dim();
        assert_eq!(c_in, wc_in, "conv2d: channel mismatch");
        assert!(h + 2 * pad >= kh && wdt + 2 * pad >= kw, "conv2d: kernel larger than input");
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (wdt + 2 * pad - kw) / stride + 1;

        let cols = im2col(&vx, kh, kw, stride, pad, h_out, w_out);
        let w2 = Array2::from_shape_vec((c_out, c_in * kh * kw), vw.iter().cloned().collect())
            .unwrap();
        let out = w2.dot(&cols); // [c_out, h_out*w_out]
        let value = out.into_shape_with_order((c_out, h_out, w_out)).unwrap().into_dyn();

        let cols = Rc::new(cols);
        let x_dim = (c_in, h, wdt);
        self.push_nn(value, vec![x, w], move |g| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let g2 = Array2::from_shape_vec((c_out, h_out * w_out), g3.iter().cloned().collect())
                .unwrap();
            let dw2 = g2.dot(&cols.t()); // [c_out, c_in*kh*kw]
            let dw = Array4::from_shape_vec((c_out, c_in, kh, kw), dw2.iter().cloned().collect())
                .unwrap();
            let w2 = Array2::from_shape_vec((c_out, c_in * kh * kw), vw.iter().cloned().collect())
                .unwrap();
            let dcols = w2.t().dot(&g2); // [c_in*kh*kw, h_out*w_out]
            let dx = col2im(&dcols, x_dim, kh, kw, stride, pad, h_out, w_out);
            vec![dx.into_dyn(), dw.into_dyn()]
        })
    }

    /// Nearest-neighbor 2x upsampling of a `[c, h, w]` map.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let vx = self.value(x).view().into_dimensionality::<Ix3>().unwrap().to_owned();
        let (c, h, w) = vx.dim();
        let mut out = Array3::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = vx[[ci, i, j]];
                    out[[ci, 2 * i, 2 * j]] = v;
                    out[[ci, 2 * i + 1, 2 * j]] = v;
                    out[[ci, 2 * i, 2 * j + 1]] = v;
                    out[[ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
        self.push_nn(out.into_dyn(), vec![x], move |g| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut d = Array3::zeros((c, h, w));
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        d[[ci, i, j]] = g3[[ci, 2 * i, 2 * j]]
                            + g3[[ci, 2 * i + 1, 2 * j]]
                            + g3[[ci, 2 * i, 2 * j + 1]]
                            + g3[[ci, 2 * i + 1, 2 * j + 1]];
                    }
                }
            }
            vec![d.into_dyn()]
        })
    }

    /// Bilinear sampling of a `[c, h, w]` map at continuous points
    /// `pts [p, 2]` (columns `x`, `y`); reads outside the map are zero.
    /// Gradients flow to both the map and the points.
    pub fn bilinear_sample(&mut self, fm: Var, pts: Var) -> Var {
        let vfm = self.value(fm).view().into_dimensionality::<Ix3>().unwrap().to_owned();
        let vpts = as2(self.value(pts)).to_owned();
        assert_eq!(vpts.ncols(), 2, "bilinear_sample: pts must be [p, 2]");
        let (c, h, w) = vfm.dim();
        let p = vpts.nrows();
        let mut out = Array2::zeros((c, p));
        for k in 0..p {
            let (x, y) = (vpts[[k, 0]], vpts[[k, 1]]);
            let taps = bilinear_taps(x, y, h, w);
            for ci in 0..c {
                let mut acc = 0.0;
                for &(iy, ix, wt) in taps.iter().flatten() {
                    acc += wt * vfm[[ci, iy, ix]];
                }
                out[[ci, k]] = acc;
            }
        }
        let vfm = Rc::new(vfm);
        let vpts = Rc::new(vpts);
        self.push_nn(out.into_dyn(), vec![fm, pts], move |g| {
            let g2 = as2(g);
            let mut dfm = Array3::zeros((c, h, w));
            let mut dpts = Array2::zeros((p, 2));
            for k in 0..p {
                let (x, y) = (vpts[[k, 0]], vpts[[k, 1]]);
                let x0 = x.floor();
                let y0 = y.floor();
                let fx = x - x0;
                let fy = y - y0;
                let taps = bilinear_taps(x, y, h, w);
                for ci in 0..c {
                    let gc = g2[[ci, k]];
                    if gc == 0.0 {
                        continue;
                    }
                    for &(iy, ix, wt) in taps.iter().flatten() {
                        dfm[[ci, iy, ix]] += gc * wt;
                    }
                    // d value / d x = (1-fy)*(v01-v00) + fy*(v11-v10)
                    let v = corner_values(&vfm, ci, x0 as i64, y0 as i64, h, w);
                    dpts[[k, 0]] += gc * ((1.0 - fy) * (v[1] - v[0]) + fy * (v[3] - v[2]));
                    dpts[[k, 1]] += gc * ((1.0 - fx) * (v[2] - v[0]) + fx * (v[3] - v[1]));
                }
            }
            vec![dfm.into_dyn(), dpts.into_dyn()]
        })
    }

    /// Mean over consecutive groups of `group` columns: `[c, p] -> [c, p/group]`.
    pub fn avg_groups(&mut self, x: Var, group: usize) -> Var {
        let vx = as2(self.value(x)).to_owned();
        let (c, p) = vx.dim();
        assert!(group > 0 && p % group == 0, "avg_groups: {p} not divisible by {group}");
        let q = p / group;
        let mut out = Array2::zeros((c, q));
        for ci in 0..c {
            for b in 0..q {
                let mut acc = 0.0;
                for t in 0..group {
                    acc += vx[[ci, b * group + t]];
                }
                out[[ci, b]] = acc / group as f64;
            }
        }
        self.push_nn(out.into_dyn(), vec![x], move |g| {
            let g2 = as2(g);
            let mut d = Array2::zeros((c, p));
            let inv = 1.0 / group as f64;
            for ci in 0..c {
                for b in 0..q {
                    let gv = g2[[ci, b]] * inv;
                    for t in 0..group {
                        d[[ci, b * group + t]] = gv;
                    }
                }
            }
            vec![d.into_dyn()]
        })
    }

    fn push_nn(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<Var>,
        grad: impl Fn(&ArrayD<f64>) -> Vec<ArrayD<f64>> + 'static,
    ) -> Var {
        let ids: Vec<usize> = parents.iter().map(|v| v.0).collect();
        self.push(value, ids, || Box::new(grad))
    }
}

/// The up-to-four in-bounds taps `(row, col, weight)` of a bilinear read at
/// `(x, y)`; out-of-range taps are omitted (zero padding).
fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [Option<(usize, usize, f64)>; 4] {
    let x0f = x.floor();
    let y0f = y.floor();
    let fx = x - x0f;
    let fy = y - y0f;
    let x0 = x0f as i64;
    let y0 = y0f as i64;
    let mk = |iy: i64, ix: i64, wt: f64| -> Option<(usize, usize, f64)> {
        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
            Some((iy as usize, ix as usize, wt))
        } else {
            None
        }
    };
    [
        mk(y0, x0, (1.0 - fx) * (1.0 - fy)),
        mk(y0, x0 + 1, fx * (1.0 - fy)),
        mk(y0 + 1, x0, (1.0 - fx) * fy),
        mk(y0 + 1, x0 + 1, fx * fy),
    ]
}

/// Corner values `[v00, v01, v10, v11]` with zero padding, for coordinate
/// gradients of a bilinear read anchored at `(x0, y0)`.
fn corner_values(fm: &Array3<f64>, c: usize, x0: i64, y0: i64, h: usize, w: usize) -> [f64; 4] {
    let read = |iy: i64, ix: i64| -> f64 {
        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
            fm[[c, iy as usize, ix as usize]]
        } else {
            0.0
        }
    };
    [read(y0, x0), read(y0, x0 + 1), read(y0 + 1, x0), read(y0 + 1, x0 + 1)]
}

fn im2col(
    x: &Array3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let mut cols = Array2::zeros((c_in * kh * kw, h_out * w_out));
    for ci in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..h_out {
                    let iy = (oi * stride + ki) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for oj in 0..w_out {
                        let ix = (oj * stride + kj) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        cols[[row, oi * w_out + oj]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    x_dim: (usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) -> Array3<f64> {
    let (c_in, h, w) = x_dim;
    let mut dx = Array3::zeros((c_in, h, w));
    for ci in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..h_out {
                    let iy = (oi * stride + ki) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for oj in 0..w_out {
                        let ix = (oj * stride + kj) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        dx[[ci, iy as usize, ix as usize]] += dcols[[row, oi * w_out + oj]];
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::super::finite_diff_max_rel_err;
    use super::*;
    use crate::rng::stream_rng;
    use ndarray::IxDyn;
    use rand::Rng;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = stream_rng(seed, 7);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv2d_matches_direct_computation() {
        // 1x1 kernel, stride 1, no pad: conv is a channel mix
        let x = randn(&[2, 3, 3], 1);
        let w = randn(&[2, 2, 1, 1], 2);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false);
        let wv = g.leaf(w.clone(), false);
        let y = g.conv2d(xv, wv, 1, 0);
        let out = g.value(y);
        for co in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let want = w[[co, 0, 0, 0]] * x[[0, i, j]] + w[[co, 1, 0, 0]] * x[[1, i, j]];
                    assert!((out[[co, i, j]] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv2d_shapes_follow_stride_and_pad() {
        let x = randn(&[3, 9, 11], 3);
        let w = randn(&[4, 3, 3, 3], 4);
        let mut g = Graph::new();
        let xv = g.leaf(x, false);
        let wv = g.leaf(w, false);
        let y = g.conv2d(xv, wv, 2, 1);
        assert_eq!(g.shape(y), &[4, 5, 6]);
    }

    #[test]
    fn conv2d_grads_match_fd() {
        let x0 = randn(&[2, 5, 4], 5);
        let w0 = randn(&[3, 2, 3, 3], 6);
        let run = |xv: &ArrayD<f64>, wv: &ArrayD<f64>, wants: bool| {
            let mut g = Graph::new();
            let x = g.leaf(xv.clone(), wants);
            let w = g.leaf(wv.clone(), wants);
            let y = g.conv2d(x, w, 2, 1);
            let sq = g.mul(y, y);
            let loss = g.sum_all(sq);
            (g, x, w, loss)
        };
        let (g, x, w, loss) = run(&x0, &w0, true);
        let grads = g.backward(loss);
        let dx = grads.get(x).unwrap().clone();
        let dw = grads.get(w).unwrap().clone();
        let ex = |v: &ArrayD<f64>| {
            let (g, _, _, loss) = run(v, &w0, false);
            g.scalar(loss)
        };
        let ew = |v: &ArrayD<f64>| {
            let (g, _, _, loss) = run(&x0, v, false);
            g.scalar(loss)
        };
        assert!(finite_diff_max_rel_err(&ex, &x0, &dx, 1e-5, None) < 1e-6);
        assert!(finite_diff_max_rel_err(&ew, &w0, &dw, 1e-5, None) < 1e-6);
    }

    #[test]
    fn upsample2_values_and_grads() {
        let x0 = randn(&[2, 3, 2], 7);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone(), true);
        let y = g.upsample2(x);
        assert_eq!(g.shape(y), &[2, 6, 4]);
        assert_eq!(g.value(y)[[1, 3, 2]], x0[[1, 1, 1]]);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        // each input cell fans out to 4 outputs
        assert!(grads.get(x).unwrap().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn bilinear_sample_constant_map_is_constant() {
        let fm = ArrayD::from_elem(IxDyn(&[3, 6, 6]), 2.5);
        let pts = randn(&[10, 2], 8).mapv(|v| 2.0 + v); // interior points
        let mut g = Graph::new();
        let f = g.leaf(fm, false);
        let p = g.leaf(pts, false);
        let y = g.bilinear_sample(f, p);
        assert!(g.value(y).iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn bilinear_sample_out_of_range_reads_zero() {
        let fm = ArrayD::from_elem(IxDyn(&[1, 4, 4]), 1.0);
        let pts =
            Array2::from_shape_vec((2, 2), vec![-5.0, -5.0, 10.0, 2.0]).unwrap().into_dyn();
        let mut g = Graph::new();
        let f = g.leaf(fm, false);
        let p = g.leaf(pts, false);
        let y = g.bilinear_sample(f, p);
        assert_eq!(g.value(y)[[0, 0]], 0.0);
        assert_eq!(g.value(y)[[0, 1]], 0.0);
    }

    #[test]
    fn bilinear_sample_grads_match_fd() {
        let fm0 = randn(&[2, 6, 5], 9);
        // keep sample points away from integer lines where the kink lives
        let mut rng = stream_rng(10, 7);
        let pts0 = ArrayD::from_shape_fn(IxDyn(&[6, 2]), |_| {
            let cell: f64 = rng.gen_range(0i32..4i32) as f64;
            cell + rng.gen_range(0.15..0.85)
        });
        let run = |fmv: &ArrayD<f64>, ptsv: &ArrayD<f64>, wants: bool| {
            let mut g = Graph::new();
            let f = g.leaf(fmv.clone(), wants);
            let p = g.leaf(ptsv.clone(), wants);
            let y = g.bilinear_sample(f, p);
            let sq = g.mul(y, y);
            let loss = g.sum_all(sq);
            (g, f, p, loss)
        };
        let (g, f, p, loss) = run(&fm0, &pts0, true);
        let grads = g.backward(loss);
        let dfm = grads.get(f).unwrap().clone();
        let dpts = grads.get(p).unwrap().clone();
        let ef = |v: &ArrayD<f64>| {
            let (g, _, _, loss) = run(v, &pts0, false);
            g.scalar(loss)
        };
        let ep = |v: &ArrayD<f64>| {
            let (g, _, _, loss) = run(&fm0, v, false);
            g.scalar(loss)
        };
        assert!(finite_diff_max_rel_err(&ef, &fm0, &dfm, 1e-5, None) < 1e-6);
        assert!(finite_diff_max_rel_err(&ep, &pts0, &dpts, 1e-5, None) < 1e-6);
    }

    #[test]
    fn avg_groups_values_and_grads() {
        let x0 = randn(&[2, 8], 11);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone(), true);
        let y = g.avg_groups(x, 4);
        assert_eq!(g.shape(y), &[2, 2]);
        let want = (x0[[0, 0]] + x0[[0, 1]] + x0[[0, 2]] + x0[[0, 3]]) / 4.0;
        assert!((g.value(y)[[0, 0]] - want).abs() < 1e-12);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        assert!(grads.get(x).unwrap().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }
}
