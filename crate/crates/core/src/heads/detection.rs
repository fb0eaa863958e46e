//! Detection head of one cascade stage: RoIAlign on the stride-16 map,
//! dynamic instance interaction conditioned on the proposal features, an
//! FFN, and small classification / regression towers.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::geometry::BBox;
use crate::params::ParamStore;
use crate::roi::{roi_align, RoiGrid};

use super::{apply_deltas_graph, box_to_fm_coords, HeadDims, Linear};

/// Classification bias prior: a fresh head predicts foreground with
/// probability ~0.01, which keeps the focal loss finite-sized at step zero.
const CLS_PRIOR: f64 = 0.01;

/// Two 1x1 convolutions whose weights are generated per proposal from its
/// feature vector. Applied channel-wise at every RoI grid position.
#[derive(Debug, Clone)]
pub struct DynamicConv {
    generator: Linear,
    pub channels: usize,
    pub hidden: usize,
}

impl DynamicConv {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        proposal_dim: usize,
        channels: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // small gain: generated weights multiply activations twice
        let generator = Linear::new(
            store,
            &format!("{prefix}.gen"),
            proposal_dim,
            2 * channels * hidden,
            0.5,
            rng,
        );
        DynamicConv { generator, channels, hidden }
    }

    /// Generate all proposals' convolution parameters: `[N, 2*C*hidden]`.
    pub fn generate(&self, g: &mut Graph, store: &ParamStore, f_p: Var) -> Var {
        self.generator.forward(g, store, f_p)
    }

    /// Apply proposal `n`'s convolutions to its RoI features laid out as
    /// `[positions, C]`: `relu(x W1) W2` with `W1 [C, hidden]`, `W2 [hidden, C]`.
    pub fn apply(&self, g: &mut Graph, params_all: Var, n: usize, x_positions: Var) -> Var {
        let c = self.channels;
        let h = self.hidden;
        let row = g.gather_rows(params_all, &[n]);
        let w1_flat = g.slice_cols(row, 0, c * h);
        let w2_flat = g.slice_cols(row, c * h, 2 * c * h);
        let w1 = g.reshape(w1_flat, &[c, h]);
        let w2 = g.reshape(w2_flat, &[h, c]);
        let mid = g.matmul(x_positions, w1);
        let mid = g.relu(mid);
        g.matmul(mid, w2)
    }
}

/// Per-proposal dynamic interaction between RoI features `[N][C, R, R]` and
/// proposal features `[N, d]`, flattened and projected back to `[N, d]`.
pub fn instance_interaction(
    g: &mut Graph,
    store: &ParamStore,
    f_roi: &[Var],
    f_p: Var,
    dyn_conv: &DynamicConv,
    flatten_fc: &Linear,
) -> Var {
    let n = f_roi.len();
    assert_eq!(g.shape(f_p)[0], n, "instance_interaction: proposal count");
    let params_all = dyn_conv.generate(g, store, f_p);
    let mut rows = Vec::with_capacity(n);
    for (i, &roi) in f_roi.iter().enumerate() {
        let s = g.shape(roi).to_vec();
        let (c, r2) = (s[0], s[1] * s[2]);
        let flat = g.reshape(roi, &[c, r2]);
        let x = g.transpose(flat); // [positions, C]
        let y = dyn_conv.apply(g, params_all, i, x);
        rows.push(g.reshape(y, &[1, r2 * c]));
    }
    let stacked = g.stack_rows(&rows);
    flatten_fc.forward(g, store, stacked)
}

#[derive(Debug, Clone)]
pub struct DetectionHead {
    dyn_conv: DynamicConv,
    flatten_fc: Linear,
    ffn1: Linear,
    ffn2: Linear,
    cls_tower: Linear,
    reg_tower: Linear,
}

/// Detection head outputs for one stage.
#[derive(Debug, Clone, Copy)]
pub struct DetectionOut {
    pub f_d: Var,
    pub cls_logits: Var,
    pub deltas: Var,
    /// Refined boxes on the graph, normalized and clamped.
    pub refined_norm: Var,
}

impl DetectionHead {
    pub fn new(store: &mut ParamStore, prefix: &str, dims: &HeadDims, rng: &mut ChaCha8Rng) -> Self {
        let d = dims.proposal_dim;
        let flat = dims.channels * dims.roi_bins * dims.roi_bins;
        let dyn_conv = DynamicConv::new(
            store,
            &format!("{prefix}.dyn"),
            d,
            dims.channels,
            dims.dyn_hidden,
            rng,
        );
        let flatten_fc = Linear::new(store, &format!("{prefix}.flatten"), flat, d, 1.0, rng);
        let ffn1 = Linear::new(store, &format!("{prefix}.ffn1"), d, dims.ffn_hidden, 1.0, rng);
        let ffn2 = Linear::new(store, &format!("{prefix}.ffn2"), dims.ffn_hidden, d, 1.0, rng);
        let cls_tower = Linear::new(store, &format!("{prefix}.cls"), d, 1, 1.0, rng);
        // bias so that sigmoid(bias) = CLS_PRIOR
        store.value_mut(cls_tower.b)[[0]] = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        let reg_tower = Linear::zeros(store, &format!("{prefix}.reg"), d, 4);
        DetectionHead { dyn_conv, flatten_fc, ffn1, ffn2, cls_tower, reg_tower }
    }

    /// `base_var` are the incoming proposal boxes on the graph (learnable at
    /// stage one, detached afterwards); `base_boxes` the same as values.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fm_s16: Var,
        f_p: Var,
        base_var: Var,
        base_boxes: &[BBox],
        original: (usize, usize),
        stride: usize,
        grid: &RoiGrid,
    ) -> Result<DetectionOut> {
        let mut rois = Vec::with_capacity(base_boxes.len());
        for b in base_boxes {
            let fm_box = box_to_fm_coords(b, original, stride)?;
            let (roi, _) = roi_align(g, fm_s16, &fm_box, grid);
            rois.push(roi);
        }
        let ii = instance_interaction(g, store, &rois, f_p, &self.dyn_conv, &self.flatten_fc);
        let h = self.ffn1.forward(g, store, ii);
        let h = g.relu(h);
        let f_d = self.ffn2.forward(g, store, h);
        let cls_logits = self.cls_tower.forward(g, store, f_d);
        let deltas = self.reg_tower.forward(g, store, f_d);
        let refined_norm = apply_deltas_graph(g, base_var, deltas);
        Ok(DetectionOut { f_d, cls_logits, deltas, refined_norm })
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::{toy_dims, toy_model};
    use super::*;
    use crate::autodiff::finite_diff_max_rel_err;
    use crate::rng::stream_rng;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = stream_rng(seed, 63);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    fn setup_interaction(
        seed: u64,
    ) -> (ParamStore, DynamicConv, Linear) {
        let dims = toy_dims();
        let mut store = ParamStore::new();
        let mut rng = stream_rng(seed, 63);
        let dc = DynamicConv::new(&mut store, "dc", dims.proposal_dim, dims.channels, dims.dyn_hidden, &mut rng);
        let flat = dims.channels * dims.roi_bins * dims.roi_bins;
        let fc = Linear::new(&mut store, "fc", flat, dims.proposal_dim, 1.0, &mut rng);
        (store, dc, fc)
    }

    #[test]
    fn interaction_shape_and_permutation_equivariance() {
        let dims = toy_dims();
        let (store, dc, fc) = setup_interaction(1);
        let n = 4;
        let mut g = Graph::new();
        let rois: Vec<Var> = (0..n)
            .map(|i| g.constant(rand_arr(&[dims.channels, dims.roi_bins, dims.roi_bins], 10 + i)))
            .collect();
        let fp_arr = rand_arr(&[n as usize, dims.proposal_dim], 20);
        let fp = g.constant(fp_arr.clone());
        let out = instance_interaction(&mut g, &store, &rois, fp, &dc, &fc);
        assert_eq!(g.shape(out), &[n as usize, dims.proposal_dim]);

        // permute proposals jointly
        let perm = [2usize, 0, 3, 1];
        let rois_p: Vec<Var> = perm.iter().map(|&i| rois[i]).collect();
        let mut fp_p = ndarray::Array2::zeros((n as usize, dims.proposal_dim));
        let fp2 = fp_arr.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        for (r, &i) in perm.iter().enumerate() {
            fp_p.row_mut(r).assign(&fp2.row(i));
        }
        let fp_p = g.constant(fp_p.into_dyn());
        let out_p = instance_interaction(&mut g, &store, &rois_p, fp_p, &dc, &fc);
        let a = g.value(out).clone();
        let b = g.value(out_p).clone();
        for (r, &i) in perm.iter().enumerate() {
            for j in 0..dims.proposal_dim {
                assert_eq!(b[[r, j]].to_bits(), a[[i, j]].to_bits(), "row {r}");
            }
        }
    }

    #[test]
    fn interaction_gradients_match_fd() {
        let dims = toy_dims();
        let (store, dc, fc) = setup_interaction(2);
        let n = 2usize;
        let roi_shape = [n, dims.channels, dims.roi_bins, dims.roi_bins];
        let roi0 = rand_arr(&[roi_shape[0] * roi_shape[1] * roi_shape[2] * roi_shape[3]], 30);
        let fp0 = rand_arr(&[n, dims.proposal_dim], 31);
        let run = |roiv: &ArrayD<f64>, fpv: &ArrayD<f64>, wants: bool| {
            let mut g = Graph::new();
            let roi_flat = g.leaf(roiv.clone(), wants);
            let fp = g.leaf(fpv.clone(), wants);
            let per = dims.channels * dims.roi_bins * dims.roi_bins;
            let mat = g.reshape(roi_flat, &[n, per]);
            let rois: Vec<Var> = (0..n)
                .map(|i| {
                    let row = g.gather_rows(mat, &[i]);
                    g.reshape(row, &[dims.channels, dims.roi_bins, dims.roi_bins])
                })
                .collect();
            let out = instance_interaction(&mut g, &store, &rois, fp, &dc, &fc);
            let sq = g.mul(out, out);
            let loss = g.sum_all(sq);
            (g, roi_flat, fp, loss)
        };
        let (g, roi, fp, loss) = run(&roi0, &fp0, true);
        let grads = g.backward(loss);
        let droi = grads.get(roi).unwrap().clone();
        let dfp = grads.get(fp).unwrap().clone();
        let er = |v: &ArrayD<f64>| {
            let (g, _, _, loss) = run(v, &fp0, false);
            g.scalar(loss)
        };
        let ef = |v: &ArrayD<f64>| {
            let (g, _, _, loss) = run(&roi0, v, false);
            g.scalar(loss)
        };
        assert!(finite_diff_max_rel_err(&er, &roi0, &droi, 1e-5, Some(40)) < 1e-3);
        assert!(finite_diff_max_rel_err(&ef, &fp0, &dfp, 1e-5, None) < 1e-3);

        // static parameter gradient: the dynamic generator weight
        let pg = g.param_grads(&grads, &store);
        let gen_w = store.by_name("dc.gen.w").unwrap();
        let analytic = pg[gen_w.index()].as_ref().unwrap().clone();
        let eval_param = |v: &ArrayD<f64>| {
            let mut altered = store.clone();
            *altered.value_mut(gen_w) = v.clone();
            let (g2, _, _, loss) = {
                let mut g2 = Graph::new();
                let roi_flat = g2.leaf(roi0.clone(), false);
                let fp = g2.leaf(fp0.clone(), false);
                let per = dims.channels * dims.roi_bins * dims.roi_bins;
                let mat = g2.reshape(roi_flat, &[n, per]);
                let rois: Vec<Var> = (0..n)
                    .map(|i| {
                        let row = g2.gather_rows(mat, &[i]);
                        g2.reshape(row, &[dims.channels, dims.roi_bins, dims.roi_bins])
                    })
                    .collect();
                let out = instance_interaction(&mut g2, &altered, &rois, fp, &dc, &fc);
                let sq = g2.mul(out, out);
                let loss = g2.sum_all(sq);
                (g2, roi_flat, fp, loss)
            };
            g2.scalar(loss)
        };
        let w0 = store.value(gen_w).clone();
        assert!(finite_diff_max_rel_err(&eval_param, &w0, &analytic, 1e-5, Some(30)) < 1e-3);
    }

    #[test]
    fn detection_head_contract() {
        let (store, bb, cascade, proposals) = toy_model(1, 40);
        let img = super::super::tests::toy_image(41);
        let mut g = Graph::new();
        let fm = bb.forward(&mut g, &store, &img).unwrap();
        let f_p = g.param(&store, proposals.features);
        let base = g.param(&store, proposals.boxes);
        let boxes = proposals.boxes_list(&store).unwrap();
        let out = cascade.stages[0]
            .det
            .forward(&mut g, &store, fm.f_s16, f_p, base, &boxes, fm.original, 16, &cascade.grid)
            .unwrap();
        let n = proposals.count;
        assert_eq!(g.shape(out.f_d), &[n, toy_dims().proposal_dim]);
        assert_eq!(g.shape(out.cls_logits), &[n, 1]);
        assert_eq!(g.shape(out.deltas), &[n, 4]);
        assert_eq!(g.shape(out.refined_norm), &[n, 4]);
        // zero-initialized regression tower: refined boxes equal the input
        for (a, b) in g.value(out.refined_norm).iter().zip(g.value(base).iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // fresh classification tower predicts the background prior
        let p = crate::losses::sigmoid(g.value(out.cls_logits)[[0, 0]]);
        assert!(p < 0.05, "prior probability {p}");
    }
}
