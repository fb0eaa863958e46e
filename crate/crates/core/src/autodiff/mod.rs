//! Tape-based reverse-mode automatic differentiation over `f64` arrays.
//!
//! A [`Graph`] is an append-only arena of nodes; every operation records the
//! values it needs for its backward pass in a closure. [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for every node that
//! can reach a gradient leaf (a bound parameter or an explicit grad leaf).
//!
//! Graphs are built per forward pass and dropped afterwards. Everything is
//! single-threaded and deterministic: identical inputs produce bitwise
//! identical values and gradients.

mod check;
mod nn;

pub use check::{finite_diff_max_rel_err, rel_err, GradCheck};

use std::rc::Rc;

use ndarray::{Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};

use crate::params::{ParamId, ParamStore};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type GradFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<ArrayD<f64>>>;

struct Node {
    value: Rc<ArrayD<f64>>,
    parents: Vec<usize>,
    grad_fn: Option<GradFn>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(Var, ParamId)>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Grads {
    g: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.g[v.0].as_ref()
    }
}

pub(crate) fn reshape_arr(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    debug_assert_eq!(a.len(), shape.iter().product::<usize>());
    ArrayD::from_shape_vec(IxDyn(shape), a.iter().cloned().collect()).unwrap()
}

pub(crate) fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().unwrap()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.len(), 1, "scalar() on node of {} elements", a.len());
        *a.iter().next().unwrap()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // -- node construction -------------------------------------------------

    pub fn leaf(&mut self, value: ArrayD<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Rc::new(value), parents: vec![], grad_fn: None, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    /// Bind a parameter into the graph; its gradient is collected by
    /// [`Graph::param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.leaf(store.value(id).clone(), true);
        self.bindings.push((v, id));
        v
    }

    /// Cut the tape: same value, no gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.nodes.push(Node { value, parents: vec![], grad_fn: None, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<usize>,
        make_grad: impl FnOnce() -> GradFn,
    ) -> Var {
        let needs = parents.iter().any(|&p| self.nodes[p].needs_grad);
        let grad_fn = if needs { Some(make_grad()) } else { None };
        self.nodes.push(Node { value: Rc::new(value), parents, grad_fn, needs_grad: needs });
        Var(self.nodes.len() - 1)
    }

    fn rc(&self, v: Var) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    // -- elementwise -------------------------------------------------------

    fn assert_same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{op}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        let value = &*self.nodes[a.0].value + &*self.nodes[b.0].value;
        self.push(value, vec![a.0, b.0], || Box::new(|g| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        let value = &*self.nodes[a.0].value - &*self.nodes[b.0].value;
        self.push(value, vec![a.0, b.0], || Box::new(|g| vec![g.clone(), -g]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        let va = self.rc(a);
        let vb = self.rc(b);
        let value = &*va * &*vb;
        self.push(value, vec![a.0, b.0], || {
            Box::new(move |g| vec![g * &*vb, g * &*va])
        })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let value = -&*self.nodes[x.0].value;
        self.push(value, vec![x.0], || Box::new(|g| vec![-g]))
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Var {
        let value = &*self.nodes[x.0].value * c;
        self.push(value, vec![x.0], || Box::new(move |g| vec![g * c]))
    }

    pub fn scalar_add(&mut self, x: Var, c: f64) -> Var {
        let value = &*self.nodes[x.0].value + c;
        self.push(value, vec![x.0], || Box::new(|g| vec![g.clone()]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.rc(x);
        let value = vx.mapv(|v| v.max(0.0));
        self.push(value, vec![x.0], || {
            Box::new(move |g| {
                let mut d = g.clone();
                d.zip_mut_with(&vx, |gi, &xi| {
                    if xi <= 0.0 {
                        *gi = 0.0;
                    }
                });
                vec![d]
            })
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(sigmoid_scalar);
        let y = Rc::new(value);
        let yc = Rc::clone(&y);
        let v = self.push_shared(y, vec![x.0], || {
            Box::new(move |g| {
                let mut d = g.clone();
                d.zip_mut_with(&yc, |gi, &yi| *gi *= yi * (1.0 - yi));
                vec![d]
            })
        });
        v
    }

    /// `log(sigmoid(x))`, computed stably.
    pub fn logsigmoid(&mut self, x: Var) -> Var {
        let vx = self.rc(x);
        let value = vx.mapv(logsigmoid_scalar);
        self.push(value, vec![x.0], || {
            Box::new(move |g| {
                let mut d = g.clone();
                d.zip_mut_with(&vx, |gi, &xi| *gi *= sigmoid_scalar(-xi));
                vec![d]
            })
        })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(f64::exp);
        let y = Rc::new(value);
        let yc = Rc::clone(&y);
        self.push_shared(y, vec![x.0], || Box::new(move |g| vec![g * &*yc]))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let vx = self.rc(x);
        let value = vx.mapv(f64::ln);
        self.push(value, vec![x.0], || {
            Box::new(move |g| {
                let mut d = g.clone();
                d.zip_mut_with(&vx, |gi, &xi| *gi /= xi);
                vec![d]
            })
        })
    }

    /// Elementwise `x^p` for constant `p`; domain `x > 0` unless `p` is a
    /// non-negative integer.
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let vx = self.rc(x);
        let value = vx.mapv(|v| v.powf(p));
        self.push(value, vec![x.0], || {
            Box::new(move |g| {
                let mut d = g.clone();
                d.zip_mut_with(&vx, |gi, &xi| *gi *= p * xi.powf(p - 1.0));
                vec![d]
            })
        })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let vx = self.rc(x);
        let value = vx.mapv(f64::abs);
        self.push(value, vec![x.0], || {
            Box::new(move |g| {
                let mut d = g.clone();
                d.zip_mut_with(&vx, |gi, &xi| {
                    *gi *= if xi > 0.0 {
                        1.0
                    } else if xi < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                vec![d]
            })
        })
    }

    /// Elementwise max; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "maximum");
        let va = self.rc(a);
        let vb = self.rc(b);
        let mut value = (*va).clone();
        value.zip_mut_with(&vb, |x, &y| *x = x.max(y));
        self.push(value, vec![a.0, b.0], || {
            Box::new(move |g| {
                let mut da = g.clone();
                let mut db = g.clone();
                for ((gi_a, gi_b), (&ai, &bi)) in
                    da.iter_mut().zip(db.iter_mut()).zip(va.iter().zip(vb.iter()))
                {
                    if ai >= bi {
                        *gi_b = 0.0;
                    } else {
                        *gi_a = 0.0;
                    }
                }
                vec![da, db]
            })
        })
    }

    /// Elementwise min; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "minimum");
        let va = self.rc(a);
        let vb = self.rc(b);
        let mut value = (*va).clone();
        value.zip_mut_with(&vb, |x, &y| *x = x.min(y));
        self.push(value, vec![a.0, b.0], || {
            Box::new(move |g| {
                let mut da = g.clone();
                let mut db = g.clone();
                for ((gi_a, gi_b), (&ai, &bi)) in
                    da.iter_mut().zip(db.iter_mut()).zip(va.iter().zip(vb.iter()))
                {
                    if ai <= bi {
                        *gi_b = 0.0;
                    } else {
                        *gi_a = 0.0;
                    }
                }
                vec![da, db]
            })
        })
    }

    /// Clamp to `[0, 1]`; gradient passes only strictly inside the interval.
    pub fn clamp01(&mut self, x: Var) -> Var {
        let vx = self.rc(x);
        let value = vx.mapv(|v| v.clamp(0.0, 1.0));
        self.push(value, vec![x.0], || {
            Box::new(move |g| {
                let mut d = g.clone();
                d.zip_mut_with(&vx, |gi, &xi| {
                    if !(0.0..=1.0).contains(&xi) {
                        *gi = 0.0;
                    }
                });
                vec![d]
            })
        })
    }

    fn push_shared(
        &mut self,
        value: Rc<ArrayD<f64>>,
        parents: Vec<usize>,
        make_grad: impl FnOnce() -> GradFn,
    ) -> Var {
        let needs = parents.iter().any(|&p| self.nodes[p].needs_grad);
        let grad_fn = if needs { Some(make_grad()) } else { None };
        self.nodes.push(Node { value, parents, grad_fn, needs_grad: needs });
        Var(self.nodes.len() - 1)
    }

    // -- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = self.rc(a);
        let vb = self.rc(b);
        let a2 = as2(&va);
        let b2 = as2(&vb);
        assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dims");
        let value = a2.dot(&b2).into_dyn();
        self.push(value, vec![a.0, b.0], || {
            Box::new(move |g| {
                let g2 = as2(g);
                let da = g2.dot(&as2(&vb).t()).into_dyn();
                let db = as2(&va).t().dot(&g2).into_dyn();
                vec![da, db]
            })
        })
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = as2(&self.nodes[x.0].value).t().to_owned().into_dyn();
        self.push(value, vec![x.0], || {
            Box::new(|g| vec![as2(g).t().to_owned().into_dyn()])
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = reshape_arr(&self.nodes[x.0].value, shape);
        let orig: Vec<usize> = self.shape(x).to_vec();
        self.push(value, vec![x.0], || {
            Box::new(move |g| vec![reshape_arr(g, &orig)])
        })
    }

    // -- reductions & broadcasts --------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let shape: Vec<usize> = self.shape(x).to_vec();
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), vec![x.0], || {
            Box::new(move |g| {
                let gv = g[[0]];
                vec![ArrayD::from_elem(IxDyn(&shape), gv)]
            })
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len() as f64;
        let s = self.sum_all(x);
        self.scalar_mul(s, 1.0 / n)
    }

    /// Row sums of a matrix: `[m, n] -> [m]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = as2(&self.nodes[x.0].value).sum_axis(Axis(1)).into_dyn();
        let ncols = self.shape(x)[1];
        self.push(v, vec![x.0], || {
            Box::new(move |g| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let m = g1.len();
                let mut d = Array2::zeros((m, ncols));
                for i in 0..m {
                    d.row_mut(i).fill(g1[i]);
                }
                vec![d.into_dyn()]
            })
        })
    }

    /// Scale each row `i` of `x [m, n]` by `v[i]`.
    pub fn row_mul(&mut self, x: Var, v: Var) -> Var {
        let vx = self.rc(x);
        let vv = self.rc(v);
        let x2 = as2(&vx);
        let v1 = vv.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(x2.nrows(), v1.len(), "row_mul: rows");
        let mut value = x2.to_owned();
        for (mut row, &s) in value.rows_mut().into_iter().zip(v1.iter()) {
            row *= s;
        }
        self.push(value.into_dyn(), vec![x.0, v.0], || {
            Box::new(move |g| {
                let g2 = as2(g);
                let x2 = as2(&vx);
                let v1 = vv.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = g2.to_owned();
                for (mut row, &s) in dx.rows_mut().into_iter().zip(v1.iter()) {
                    row *= s;
                }
                let mut dv = ndarray::Array1::zeros(v1.len());
                for i in 0..x2.nrows() {
                    dv[i] = g2.row(i).dot(&x2.row(i));
                }
                vec![dx.into_dyn(), dv.into_dyn()]
            })
        })
    }

    /// Broadcast-add a length-`n` vector to every row of `x [m, n]`.
    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let vv = &self.nodes[v.0].value;
        let x2 = as2(vx);
        let v1 = vv.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(x2.ncols(), v1.len(), "add_row_vec: cols");
        let value = (&x2 + &v1).into_dyn();
        self.push(value, vec![x.0, v.0], || {
            Box::new(|g| {
                let g2 = as2(g);
                let dv = g2.sum_axis(Axis(0)).into_dyn();
                vec![g.clone(), dv]
            })
        })
    }

    /// Broadcast-add a per-channel bias to a `[c, h, w]` map.
    pub fn add_chan(&mut self, x: Var, b: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let vb = &self.nodes[b.0].value;
        let c = vx.shape()[0];
        assert_eq!(vb.len(), c, "add_chan: channels");
        let mut value = (**vx).clone();
        for (ci, mut plane) in value.axis_iter_mut(Axis(0)).enumerate() {
            plane += vb[[ci]];
        }
        self.push(value, vec![x.0, b.0], || {
            Box::new(move |g| {
                let mut db = ndarray::Array1::zeros(c);
                for (ci, plane) in g.axis_iter(Axis(0)).enumerate() {
                    db[ci] = plane.sum();
                }
                vec![g.clone(), db.into_dyn()]
            })
        })
    }

    // -- selection & assembly ------------------------------------------------

    /// Column slice `x[:, a..b]`.
    pub fn slice_cols(&mut self, x: Var, a: usize, b: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let x2 = as2(vx);
        assert!(a <= b && b <= x2.ncols(), "slice_cols: range");
        let (rows, cols) = (x2.nrows(), x2.ncols());
        let value = x2.slice(ndarray::s![.., a..b]).to_owned().into_dyn();
        self.push(value, vec![x.0], || {
            Box::new(move |g| {
                let g2 = as2(g);
                let mut d = Array2::zeros((rows, cols));
                d.slice_mut(ndarray::s![.., a..b]).assign(&g2);
                vec![d.into_dyn()]
            })
        })
    }

    /// Row gather: `out[k, :] = x[idx[k], :]`. Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let vx = &self.nodes[x.0].value;
        let x2 = as2(vx);
        let (rows, cols) = (x2.nrows(), x2.ncols());
        for &i in idx {
            assert!(i < rows, "gather_rows: index {i} out of {rows}");
        }
        let mut value = Array2::zeros((idx.len(), cols));
        for (k, &i) in idx.iter().enumerate() {
            value.row_mut(k).assign(&x2.row(i));
        }
        let idx: Vec<usize> = idx.to_vec();
        self.push(value.into_dyn(), vec![x.0], || {
            Box::new(move |g| {
                let g2 = as2(g);
                let mut d = Array2::zeros((rows, cols));
                for (k, &i) in idx.iter().enumerate() {
                    let mut row = d.row_mut(i);
                    row += &g2.row(k);
                }
                vec![d.into_dyn()]
            })
        })
    }

    /// Element gather: `out[k] = x[coords[k]]`. Coordinates may repeat.
    pub fn gather_elems(&mut self, x: Var, coords: &[(usize, usize)]) -> Var {
        let vx = &self.nodes[x.0].value;
        let x2 = as2(vx);
        let (rows, cols) = (x2.nrows(), x2.ncols());
        let mut value = ndarray::Array1::zeros(coords.len());
        for (k, &(i, j)) in coords.iter().enumerate() {
            assert!(i < rows && j < cols, "gather_elems: ({i},{j}) out of bounds");
            value[k] = x2[[i, j]];
        }
        let coords: Vec<(usize, usize)> = coords.to_vec();
        self.push(value.into_dyn(), vec![x.0], || {
            Box::new(move |g| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut d = Array2::zeros((rows, cols));
                for (k, &(i, j)) in coords.iter().enumerate() {
                    d[[i, j]] += g1[k];
                }
                vec![d.into_dyn()]
            })
        })
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(s[0], rows, "concat_cols: row mismatch");
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut value = Array2::zeros((rows, total));
        let mut at = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            value
                .slice_mut(ndarray::s![.., at..at + w])
                .assign(&as2(&self.nodes[p.0].value));
            at += w;
        }
        let parents: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(value.into_dyn(), parents, || {
            Box::new(move |g| {
                let g2 = as2(g);
                let mut out = Vec::with_capacity(widths.len());
                let mut at = 0;
                for &w in &widths {
                    out.push(g2.slice(ndarray::s![.., at..at + w]).to_owned().into_dyn());
                    at += w;
                }
                out
            })
        })
    }

    /// Stack `[1, n]` rows into an `[m, n]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty());
        let n = self.shape(rows[0])[1];
        let mut value = Array2::zeros((rows.len(), n));
        for (k, &r) in rows.iter().enumerate() {
            let s = self.shape(r);
            assert_eq!(s, [1, n], "stack_rows: expected [1, {n}], got {s:?}");
            value.row_mut(k).assign(&as2(&self.nodes[r.0].value).row(0));
        }
        let parents: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let m = rows.len();
        self.push(value.into_dyn(), parents, || {
            Box::new(move |g| {
                let g2 = as2(g);
                (0..m)
                    .map(|k| g2.row(k).to_owned().insert_axis(Axis(0)).into_dyn())
                    .collect()
            })
        })
    }

    /// Repeat each row of `x [p, n]` `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let x2 = as2(vx);
        let (p, n) = (x2.nrows(), x2.ncols());
        let mut value = Array2::zeros((p * times, n));
        for i in 0..p {
            for t in 0..times {
                value.row_mut(i * times + t).assign(&x2.row(i));
            }
        }
        self.push(value.into_dyn(), vec![x.0], || {
            Box::new(move |g| {
                let g2 = as2(g);
                let mut d = Array2::zeros((p, n));
                for i in 0..p {
                    for t in 0..times {
                        let mut row = d.row_mut(i);
                        row += &g2.row(i * times + t);
                    }
                }
                vec![d.into_dyn()]
            })
        })
    }

    // -- softmax family -------------------------------------------------------

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let x2 = as2(vx);
        let mut value = x2.to_owned();
        for mut row in value.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let y = Rc::new(value.into_dyn());
        let yc = Rc::clone(&y);
        self.push_shared(y, vec![x.0], || {
            Box::new(move |g| {
                let g2 = as2(g);
                let y2 = as2(&yc);
                let mut d = g2.to_owned();
                for i in 0..d.nrows() {
                    let dot = g2.row(i).dot(&y2.row(i));
                    let yrow = y2.row(i);
                    for (dv, &yv) in d.row_mut(i).iter_mut().zip(yrow.iter()) {
                        *dv = yv * (*dv - dot);
                    }
                }
                vec![d.into_dyn()]
            })
        })
    }

    /// Per-row cross entropy `-log softmax(x)[target]`: `[m, n] -> [m]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let vx = &self.nodes[logits.0].value;
        let x2 = as2(vx);
        assert_eq!(x2.nrows(), targets.len(), "cross_entropy_rows: targets");
        let mut soft = x2.to_owned();
        let mut value = ndarray::Array1::zeros(targets.len());
        for (i, mut row) in soft.rows_mut().into_iter().enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln() + m;
            value[i] = logsum - row[targets[i]];
            row.mapv_inplace(|v| (v - logsum).exp());
        }
        let soft = Rc::new(soft);
        let targets: Vec<usize> = targets.to_vec();
        self.push(value.into_dyn(), vec![logits.0], || {
            Box::new(move |g| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut d = (*soft).clone();
                for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                    row[targets[i]] -= 1.0;
                    row *= g1[i];
                }
                vec![d.into_dyn()]
            })
        })
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let vx = self.rc(x);
        let vgain = self.rc(gain);
        let x2 = as2(&vx);
        let g1 = vgain.view().into_dimensionality::<Ix1>().unwrap();
        let b1 = self.nodes[bias.0].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let (m, n) = (x2.nrows(), x2.ncols());
        assert_eq!(g1.len(), n, "layer_norm_rows: gain");
        assert_eq!(b1.len(), n, "layer_norm_rows: bias");
        let mut xhat = Array2::zeros((m, n));
        let mut invstd = ndarray::Array1::zeros(m);
        for i in 0..m {
            let row = x2.row(i);
            let mu = row.sum() / n as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            invstd[i] = is;
            for (j, &v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mu) * is;
            }
        }
        let mut value = Array2::zeros((m, n));
        for i in 0..m {
            for j in 0..n {
                value[[i, j]] = xhat[[i, j]] * g1[j] + b1[j];
            }
        }
        let xhat = Rc::new(xhat);
        let xhat_c = Rc::clone(&xhat);
        self.push(value.into_dyn(), vec![x.0, gain.0, bias.0], || {
            Box::new(move |g| {
                let g2 = as2(g);
                let gain1 = vgain.view().into_dimensionality::<Ix1>().unwrap();
                let (m, n) = (g2.nrows(), g2.ncols());
                let mut dgain = ndarray::Array1::zeros(n);
                let mut dbias = ndarray::Array1::zeros(n);
                let mut dx = Array2::zeros((m, n));
                for i in 0..m {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..n {
                        let dxh = g2[[i, j]] * gain1[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat_c[[i, j]];
                        dgain[j] += g2[[i, j]] * xhat_c[[i, j]];
                        dbias[j] += g2[[i, j]];
                    }
                    mean_dxhat /= n as f64;
                    mean_dxhat_xhat /= n as f64;
                    for j in 0..n {
                        let dxh = g2[[i, j]] * gain1[j];
                        dx[[i, j]] =
                            invstd[i] * (dxh - mean_dxhat - xhat_c[[i, j]] * mean_dxhat_xhat);
                    }
                }
                vec![dx.into_dyn(), dgain.into_dyn(), dbias.into_dyn()]
            })
        })
    }

    // -- backward ------------------------------------------------------------

    /// Reverse-accumulate gradients of a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward: loss must be scalar");
        let mut g: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(upstream) = g[id].take() else { continue };
            let node = &self.nodes[id];
            if node.grad_fn.is_none() {
                // leaves keep their accumulated gradient
                g[id] = Some(upstream);
                continue;
            }
            let parent_grads = (node.grad_fn.as_ref().unwrap())(&upstream);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p].needs_grad {
                    continue;
                }
                debug_assert_eq!(
                    pg.shape(),
                    self.nodes[p].value.shape(),
                    "gradient shape mismatch into node {p}"
                );
                match &mut g[p] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        Grads { g }
    }

    /// Collect parameter gradients in store order; parameters bound more than
    /// once accumulate.
    pub fn param_grads(&self, grads: &Grads, store: &ParamStore) -> Vec<Option<ArrayD<f64>>> {
        let mut out: Vec<Option<ArrayD<f64>>> = (0..store.len()).map(|_| None).collect();
        for &(v, id) in &self.bindings {
            if let Some(g) = grads.get(v) {
                match &mut out[id.index()] {
                    Some(acc) => *acc += g,
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logsigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
