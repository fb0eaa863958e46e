//! Flexible re-id head: dynamic RoI sampling on the stride-8 map feeding two
//! branches. The plain branch (PRM) is two stacked fully-connected layers;
//! the hierarchical interaction branch (HIRM) runs per-proposal dynamic
//! convolutions (intra-instance) followed by single-head self-attention
//! across proposals (inter-instance) with residuals and layer norm.

use ndarray::Array1;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::geometry::BBox;
use crate::params::{ParamId, ParamStore};
use crate::roi::{dynamic_roi_align, OffsetPredictor, RoiGrid, OFFSET_GAMMA};

use super::{box_to_fm_coords, DynamicConv, HeadDims, Linear};

/// Re-id features of one stage: the two intermediates and the two outputs.
#[derive(Debug, Clone, Copy)]
pub struct ReidOut {
    /// PRM intermediate (after the first fully-connected layer + ReLU).
    pub f_ip: Var,
    /// PRM output features.
    pub f_rp: Var,
    /// HIRM intermediate (flattened intra-instance interaction, projected).
    pub f_ih: Var,
    /// HIRM output features (after inter-instance attention).
    pub f_rh: Var,
}

#[derive(Debug, Clone)]
struct SelfAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    ffn1: Linear,
    ffn2: Linear,
    dim: usize,
}

impl SelfAttention {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        SelfAttention {
            wq: Linear::new(store, &format!("{prefix}.wq"), dim, dim, 1.0, rng),
            wk: Linear::new(store, &format!("{prefix}.wk"), dim, dim, 1.0, rng),
            wv: Linear::new(store, &format!("{prefix}.wv"), dim, dim, 1.0, rng),
            wo: Linear::new(store, &format!("{prefix}.wo"), dim, dim, 1.0, rng),
            ln1_gain: store.add_const(&format!("{prefix}.ln1.gain"), &[dim], 1.0, false),
            ln1_bias: store.add_zeros(&format!("{prefix}.ln1.bias"), &[dim], false),
            ln2_gain: store.add_const(&format!("{prefix}.ln2.gain"), &[dim], 1.0, false),
            ln2_bias: store.add_zeros(&format!("{prefix}.ln2.bias"), &[dim], false),
            ffn1: Linear::new(store, &format!("{prefix}.ffn1"), dim, 2 * dim, 1.0, rng),
            ffn2: Linear::new(store, &format!("{prefix}.ffn2"), 2 * dim, dim, 1.0, rng),
            dim,
        }
    }

    /// Returns `(output, attention_mixture)`; the mixture is exposed for
    /// inspection in tests.
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> (Var, Var) {
        let q = self.wq.forward(g, store, x);
        let k = self.wk.forward(g, store, x);
        let v = self.wv.forward(g, store, x);
        let kt = g.transpose(k);
        let scores = g.matmul(q, kt);
        let scaled = g.scalar_mul(scores, 1.0 / (self.dim as f64).sqrt());
        let attn = g.softmax_rows(scaled);
        let mixed = g.matmul(attn, v);
        let o = self.wo.forward(g, store, mixed);
        let res1 = g.add(x, o);
        let g1 = g.param(store, self.ln1_gain);
        let b1 = g.param(store, self.ln1_bias);
        let h = g.layer_norm_rows(res1, g1, b1, 1e-5);
        let f = self.ffn1.forward(g, store, h);
        let f = g.relu(f);
        let f = self.ffn2.forward(g, store, f);
        let res2 = g.add(h, f);
        let g2 = g.param(store, self.ln2_gain);
        let b2 = g.param(store, self.ln2_bias);
        (g.layer_norm_rows(res2, g2, b2, 1e-5), mixed)
    }
}

#[derive(Debug, Clone)]
pub struct ReidHead {
    pub offset: OffsetPredictor,
    prm_fc1: Linear,
    prm_fc2: Linear,
    hirm_dyn: DynamicConv,
    hirm_proj: Linear,
    attn: SelfAttention,
    pub gamma: f64,
}

impl ReidHead {
    pub fn new(store: &mut ParamStore, prefix: &str, dims: &HeadDims, rng: &mut ChaCha8Rng) -> Self {
        let flat = dims.channels * dims.roi_bins * dims.roi_bins;
        ReidHead {
            offset: OffsetPredictor::new(
                store,
                &format!("{prefix}.offset"),
                dims.proposal_dim,
                dims.roi_bins,
            ),
            prm_fc1: Linear::new(store, &format!("{prefix}.prm1"), flat, dims.reid_dim, 1.0, rng),
            prm_fc2: Linear::new(store, &format!("{prefix}.prm2"), dims.reid_dim, dims.reid_dim, 1.0, rng),
            hirm_dyn: DynamicConv::new(
                store,
                &format!("{prefix}.hirm.dyn"),
                dims.proposal_dim,
                dims.channels,
                dims.dyn_hidden,
                rng,
            ),
            hirm_proj: Linear::new(store, &format!("{prefix}.hirm.proj"), flat, dims.reid_dim, 1.0, rng),
            attn: SelfAttention::new(store, &format!("{prefix}.hirm.attn"), dims.reid_dim, rng),
            gamma: OFFSET_GAMMA,
        }
    }

    /// Plain re-id module over pre-extracted per-proposal RoI features
    /// (each `[C, R, R]`): flatten, fc + ReLU (the intermediate), fc.
    pub fn prm_forward(&self, g: &mut Graph, store: &ParamStore, f_droi: &[Var]) -> (Var, Var) {
        let rows: Vec<Var> = f_droi
            .iter()
            .map(|&v| {
                let s = g.shape(v).to_vec();
                g.reshape(v, &[1, s.iter().product::<usize>()])
            })
            .collect();
        let stacked = g.stack_rows(&rows);
        let pre = self.prm_fc1.forward(g, store, stacked);
        let f_ip = g.relu(pre);
        let f_rp = self.prm_fc2.forward(g, store, f_ip);
        (f_ip, f_rp)
    }

    /// Hierarchical interaction re-id module over the same RoI features.
    pub fn hirm_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_droi: &[Var],
        f_p: Var,
    ) -> (Var, Var) {
        let n = f_droi.len();
        let params_all = self.hirm_dyn.generate(g, store, f_p);
        let mut rows = Vec::with_capacity(n);
        for (i, &roi) in f_droi.iter().enumerate() {
            let s = g.shape(roi).to_vec();
            let (c, r2) = (s[0], s[1] * s[2]);
            let flat = g.reshape(roi, &[c, r2]);
            let x = g.transpose(flat);
            let y = self.hirm_dyn.apply(g, params_all, i, x);
            rows.push(g.reshape(y, &[1, r2 * c]));
        }
        let stacked = g.stack_rows(&rows);
        let f_ih = self.hirm_proj.forward(g, store, stacked);
        let (f_rh, _) = self.attn.forward(g, store, f_ih);
        (f_ih, f_rh)
    }

    /// Full flexible re-id head: predict bin offsets from the proposal
    /// features, extract dynamic RoI features from the stride-8 map, then
    /// run both branches.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fm_s8: Var,
        f_p: Var,
        boxes: &[BBox],
        original: (usize, usize),
        stride: usize,
        grid: &RoiGrid,
    ) -> Result<ReidOut> {
        let offsets_all = self.offset.forward(g, store, f_p);
        let mut f_droi = Vec::with_capacity(boxes.len());
        for (n, b) in boxes.iter().enumerate() {
            let fm_box = box_to_fm_coords(b, original, stride)?;
            let off = self.offset.row(g, offsets_all, n);
            let (roi, _) = dynamic_roi_align(g, fm_s8, &fm_box, grid, off, self.gamma);
            f_droi.push(roi);
        }
        let (f_ip, f_rp) = self.prm_forward(g, store, &f_droi);
        let (f_ih, f_rh) = self.hirm_forward(g, store, &f_droi, f_p);
        Ok(ReidOut { f_ip, f_rp, f_ih, f_rh })
    }
}

/// Concatenate the two re-id feature matrices `[N, d_r]` columnwise and
/// L2-normalize each row: the final matching feature.
pub fn concat_reid_graph(g: &mut Graph, f_rp: Var, f_rh: Var) -> Var {
    let cat = g.concat_cols(&[f_rp, f_rh]);
    crate::losses::normalize_rows_graph(g, cat)
}

/// Plain-value form of the final matching feature for one proposal.
pub fn concat_and_normalize(rp: &Array1<f64>, rh: &Array1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(rp.len() + rh.len());
    out.slice_mut(ndarray::s![..rp.len()]).assign(rp);
    out.slice_mut(ndarray::s![rp.len()..]).assign(rh);
    let norm = out.dot(&out).sqrt();
    if norm > 1e-12 {
        out /= norm;
    }
    out
}
