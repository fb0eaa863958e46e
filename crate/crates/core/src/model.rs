//! The assembled person search model: backbone, cascade head and learnable
//! proposals over one parameter store, plus the inference entry point.

use ndarray::{Array1, Array2, Array3};

use crate::autodiff::Graph;
use crate::backbone::{Backbone, FeatureMaps};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::geometry::{clamp_box, BBox};
use crate::heads::{concat_reid_graph, CascadeHead, HeadDims, LearnableProposals, StageOutput};
use crate::losses::sigmoid;
use crate::params::ParamStore;
use crate::rng::{counter_rng, STREAM_PARAM_INIT};

#[derive(Debug, Clone)]
pub struct PersonSearchModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub cascade: CascadeHead,
    pub proposals: LearnableProposals,
}

impl PersonSearchModel {
    /// Build a freshly initialized model; all randomness comes from the
    /// parameter-init stream of `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = counter_rng(seed, STREAM_PARAM_INIT, 0);
        let backbone = Backbone::new(&mut store, cfg.channels, &mut rng);
        let dims = HeadDims {
            channels: cfg.channels,
            proposal_dim: cfg.proposal_dim,
            dyn_hidden: cfg.dyn_hidden,
            reid_dim: cfg.reid_dim,
            roi_bins: cfg.roi_bins,
            ffn_hidden: cfg.ffn_hidden,
        };
        let cascade = CascadeHead::new(&mut store, dims, cfg.stages, &mut rng);
        let proposals =
            LearnableProposals::new(&mut store, cfg.num_proposals, cfg.proposal_dim, &mut rng);
        Ok(PersonSearchModel { cfg: *cfg, store, backbone, cascade, proposals })
    }

    /// Full forward pass over one normalized image `[3, H, W]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        image: &Array3<f64>,
    ) -> Result<(FeatureMaps, Vec<StageOutput>)> {
        let fmaps = self.backbone.forward(g, &self.store, image)?;
        let outs = self.cascade.forward(g, &self.store, &fmaps, &self.proposals)?;
        Ok((fmaps, outs))
    }
}

/// Final-stage predictions of one image, in value form.
#[derive(Debug, Clone)]
pub struct ImagePredictions {
    /// Absolute-pixel boxes, clamped to the image.
    pub boxes: Vec<BBox>,
    /// Sigmoid person scores.
    pub scores: Vec<f64>,
    /// Final matching features `[N, 2 * reid_dim]`, unit rows.
    pub features: Array2<f64>,
}

impl ImagePredictions {
    pub fn feature_row(&self, n: usize) -> Array1<f64> {
        self.features.row(n).to_owned()
    }
}

/// Run the model on one image and convert the last stage into predictions.
pub fn predict_image(model: &PersonSearchModel, image: &Array3<f64>) -> Result<ImagePredictions> {
    let mut g = Graph::new();
    let (fmaps, outs) = model.forward(&mut g, image)?;
    let last = outs.last().expect("at least one stage");
    let reid = last
        .reid
        .as_ref()
        .expect("final cascade stage always carries the re-id head");
    let feat_var = concat_reid_graph(&mut g, reid.f_rp, reid.f_rh);
    let features = g
        .value(feat_var)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned();
    let logits = g.value(last.cls_logits);
    let scores: Vec<f64> = (0..model.cfg.num_proposals).map(|n| sigmoid(logits[[n, 0]])).collect();
    let (oh, ow) = fmaps.original;
    let boxes: Vec<BBox> = last
        .boxes
        .iter()
        .map(|b| {
            let abs = b.to_absolute(ow as f64, oh as f64)?;
            Ok(clamp_box(&abs, ow as f64, oh as f64))
        })
        .collect::<Result<_>>()?;
    Ok(ImagePredictions { boxes, scores, features })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use ndarray::Array3;
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            stages: 2,
            num_proposals: 4,
            channels: 8,
            proposal_dim: 16,
            dyn_hidden: 4,
            reid_dim: 8,
            roi_bins: 3,
            ffn_hidden: 32,
        }
    }

    #[test]
    fn same_seed_same_model() {
        let a = PersonSearchModel::new(&tiny_cfg(), 11).unwrap();
        let b = PersonSearchModel::new(&tiny_cfg(), 11).unwrap();
        assert_eq!(a.store.len(), b.store.len());
        for (ia, ib) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(ia.1.name, ib.1.name);
            assert_eq!(ia.1.value, ib.1.value);
        }
        let c = PersonSearchModel::new(&tiny_cfg(), 12).unwrap();
        let differs = a
            .store
            .iter()
            .zip(c.store.iter())
            .any(|(x, y)| x.1.value != y.1.value);
        assert!(differs);
    }

    #[test]
    fn predictions_have_unit_features_and_clamped_boxes() {
        let model = PersonSearchModel::new(&tiny_cfg(), 3).unwrap();
        let mut rng = crate::rng::stream_rng(4, 71);
        let img = Array3::from_shape_fn((3, 48, 48), |_| rng.gen_range(-1.0..1.0));
        let p = predict_image(&model, &img).unwrap();
        assert_eq!(p.boxes.len(), 4);
        assert_eq!(p.scores.len(), 4);
        assert_eq!(p.features.dim(), (4, 16));
        for n in 0..4 {
            let f = p.feature_row(n);
            assert!((f.dot(&f).sqrt() - 1.0).abs() < 1e-6);
            assert!(p.scores[n] > 0.0 && p.scores[n] < 1.0);
            let b = &p.boxes[n];
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 48.0 && b.y2 <= 48.0);
        }
        // deterministic inference
        let q = predict_image(&model, &img).unwrap();
        assert_eq!(p.features, q.features);
        assert_eq!(p.scores, q.scores);
    }
}
