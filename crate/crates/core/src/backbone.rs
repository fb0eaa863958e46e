//! Small trainable backbone producing the two feature maps the head
//! consumes: a stride-16 map for detection and a fused stride-8 map for
//! re-id. Four 3x3 stride-2 conv blocks with ReLU reach strides 2/4/8/16;
//! 1x1 lateral projections and a nearest-neighbor top-down upsample-add
//! fuse the top level into the stride-8 map.

use ndarray::Array3;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

pub const MIN_IMAGE_SIDE: usize = 32;

/// Image padded on the right/bottom to a stride multiple, with the original
/// size kept for round-tripping.
#[derive(Debug, Clone)]
pub struct PaddedImage {
    pub data: Array3<f64>,
    pub original: (usize, usize),
}

/// Zero-pad `[3, H, W]` on the right/bottom so both sides divide `stride`.
pub fn pad_to_stride(image: &Array3<f64>, stride: usize) -> PaddedImage {
    let (c, h, w) = image.dim();
    let ph = h.div_ceil(stride) * stride;
    let pw = w.div_ceil(stride) * stride;
    if ph == h && pw == w {
        return PaddedImage { data: image.clone(), original: (h, w) };
    }
    let mut out = Array3::zeros((c, ph, pw));
    out.slice_mut(ndarray::s![.., ..h, ..w]).assign(image);
    PaddedImage { data: out, original: (h, w) }
}

/// The two feature maps plus their bookkeeping.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMaps {
    /// `[C, H/8, W/8]`, used by the re-id head.
    pub f_s8: Var,
    /// `[C, H/16, W/16]`, used by the detection head.
    pub f_s16: Var,
    pub channels: usize,
    /// Padded input size the strides divide.
    pub padded: (usize, usize),
    pub original: (usize, usize),
}

#[derive(Debug, Clone)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, name: &str, c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBlock {
            w: store.add_conv(&format!("{name}.w"), c_out, c_in, k, k, rng),
            b: store.add_zeros(&format!("{name}.b"), &[c_out], false),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, stride: usize, pad: usize) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.conv2d(x, w, stride, pad);
        g.add_chan(y, b)
    }
}

/// Backbone parameters; forward passes are pure given a store.
#[derive(Debug, Clone)]
pub struct Backbone {
    stem: Vec<ConvBlock>,
    lateral8: ConvBlock,
    lateral16: ConvBlock,
    pub channels: usize,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let stem = vec![
            ConvBlock::new(store, "backbone.stem1", channels, 3, 3, rng),
            ConvBlock::new(store, "backbone.stem2", channels, channels, 3, rng),
            ConvBlock::new(store, "backbone.stem3", channels, channels, 3, rng),
            ConvBlock::new(store, "backbone.stem4", channels, channels, 3, rng),
        ];
        let lateral8 = ConvBlock::new(store, "backbone.lateral8", channels, channels, 1, rng);
        let lateral16 = ConvBlock::new(store, "backbone.lateral16", channels, channels, 1, rng);
        Backbone { stem, lateral8, lateral16, channels }
    }

    /// Run the stem on a `[3, H, W]` image (padded internally to stride 16).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: &Array3<f64>) -> Result<FeatureMaps> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::Shape(format!(
                "image {h}x{w} below the minimum side of {MIN_IMAGE_SIDE}"
            )));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image pixels".to_string()));
        }
        let padded = pad_to_stride(image, 16);
        let (ph, pw) = (padded.data.dim().1, padded.data.dim().2);
        let x = g.constant(padded.data.into_dyn());
        let mut cur = x;
        let mut levels = Vec::with_capacity(4);
        for block in &self.stem {
            let y = block.apply(g, store, cur, 2, 1);
            cur = g.relu(y);
            levels.push(cur);
        }
        let c3 = levels[2]; // stride 8
        let c4 = levels[3]; // stride 16
        let f_s16 = self.lateral16.apply(g, store, c4, 1, 0);
        let lat = self.lateral8.apply(g, store, c3, 1, 0);
        let top = g.upsample2(f_s16);
        let f_s8 = g.add(lat, top);
        Ok(FeatureMaps {
            f_s8,
            f_s16,
            channels: self.channels,
            padded: (ph, pw),
            original: (h, w),
        })
    }
}

/// Convenience wrapper used by tests and examples.
pub fn backbone_forward(
    g: &mut Graph,
    store: &ParamStore,
    backbone: &Backbone,
    image: &Array3<f64>,
) -> Result<FeatureMaps> {
    backbone.forward(g, store, image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn make(channels: usize, seed: u64) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(seed, 51);
        let bb = Backbone::new(&mut store, channels, &mut rng);
        (store, bb)
    }

    fn rand_image(h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = stream_rng(seed, 52);
        Array3::from_shape_fn((3, h, w), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn pad_to_stride_cases() {
        let img = rand_image(64, 64, 1);
        let p = pad_to_stride(&img, 16);
        assert_eq!(p.data.dim(), (3, 64, 64));
        assert_eq!(p.original, (64, 64));
        let img = rand_image(65, 70, 2);
        let p = pad_to_stride(&img, 16);
        assert_eq!(p.data.dim(), (3, 80, 80));
        assert_eq!(p.original, (65, 70));
        // original content is preserved, padding is zero
        assert_eq!(p.data[[0, 65, 0]], 0.0);
        assert_eq!(p.data[[0, 0, 70]], 0.0);
        assert_eq!(p.data[[2, 10, 12]], img[[2, 10, 12]]);
    }

    #[test]
    fn output_shapes_follow_stride_arithmetic() {
        let (store, bb) = make(64, 3);
        let mut g = Graph::new();
        let fm = bb.forward(&mut g, &store, &rand_image(64, 64, 4)).unwrap();
        assert_eq!(g.shape(fm.f_s8), &[64, 8, 8]);
        assert_eq!(g.shape(fm.f_s16), &[64, 4, 4]);
        // non-multiple sizes go through padding first
        let mut g = Graph::new();
        let fm = bb.forward(&mut g, &store, &rand_image(65, 70, 5)).unwrap();
        assert_eq!(fm.padded, (80, 80));
        assert_eq!(fm.original, (65, 70));
        assert_eq!(g.shape(fm.f_s8), &[64, 10, 10]);
        assert_eq!(g.shape(fm.f_s16), &[64, 5, 5]);
    }

    #[test]
    fn too_small_image_is_rejected() {
        let (store, bb) = make(16, 6);
        let mut g = Graph::new();
        assert!(bb.forward(&mut g, &store, &rand_image(16, 64, 7)).is_err());
    }

    #[test]
    fn zero_input_with_zero_bias_gives_zero_maps() {
        let (store, bb) = make(16, 8);
        let mut g = Graph::new();
        let fm = bb.forward(&mut g, &store, &Array3::zeros((3, 64, 64))).unwrap();
        assert!(g.value(fm.f_s8).iter().all(|&v| v == 0.0));
        assert!(g.value(fm.f_s16).iter().all(|&v| v == 0.0));
    }

    /// Index-interval propagation through the stem: each 3x3 stride-2 conv
    /// with pad 1 maps an input interval `[a, b]` to the output interval
    /// `[ceil((a-1)/2), floor((b+1)/2)]`.
    fn propagate(a: i64, b: i64) -> (i64, i64) {
        (((a - 1) as f64 / 2.0).ceil() as i64, ((b + 1) as f64 / 2.0).floor() as i64)
    }

    #[test]
    fn single_pixel_perturbation_respects_receptive_field() {
        let (store, bb) = make(8, 9);
        let img = rand_image(64, 64, 10);
        let mut perturbed = img.clone();
        let (py, px) = (40usize, 24usize);
        perturbed[[1, py, px]] += 0.5;

        let mut g = Graph::new();
        let a = bb.forward(&mut g, &store, &img).unwrap();
        let b = bb.forward(&mut g, &store, &perturbed).unwrap();

        // affected interval at stride 8 (3 convs), stride 16 (4 convs)
        let (mut y0, mut y1) = (py as i64, py as i64);
        let (mut x0, mut x1) = (px as i64, px as i64);
        for _ in 0..3 {
            (y0, y1) = propagate(y0, y1);
            (x0, x1) = propagate(x0, x1);
        }
        let (y0_16, y1_16) = propagate(y0, y1);
        let (x0_16, x1_16) = propagate(x0, x1);

        let v16a = g.value(a.f_s16).clone();
        let v16b = g.value(b.f_s16).clone();
        let mut changed16 = 0usize;
        for c in 0..8 {
            for y in 0..4 {
                for x in 0..4 {
                    if v16a[[c, y, x]] != v16b[[c, y, x]] {
                        changed16 += 1;
                        assert!(
                            (y as i64) >= y0_16 && (y as i64) <= y1_16
                                && (x as i64) >= x0_16 && (x as i64) <= x1_16,
                            "stride-16 change outside receptive field at ({y}, {x})"
                        );
                    }
                }
            }
        }
        assert!(changed16 > 0);

        // the fused stride-8 map inherits the union of the c3 interval and
        // the upsampled stride-16 interval
        let v8a = g.value(a.f_s8).clone();
        let v8b = g.value(b.f_s8).clone();
        for c in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    if v8a[[c, y, x]] != v8b[[c, y, x]] {
                        let in_c3 = (y as i64) >= y0 && (y as i64) <= y1
                            && (x as i64) >= x0 && (x as i64) <= x1;
                        let in_up = (y as i64 / 2) >= y0_16 && (y as i64 / 2) <= y1_16
                            && (x as i64 / 2) >= x0_16 && (x as i64 / 2) <= x1_16;
                        assert!(in_c3 || in_up, "stride-8 change outside receptive field");
                    }
                }
            }
        }
    }

    #[test]
    fn stem_parameter_gradients_match_fd() {
        let (store, bb) = make(4, 11);
        let img = rand_image(32, 32, 12);
        // weight the outputs so the objective is generic
        let mut rng = stream_rng(13, 52);
        let w8 = ArrayD::from_shape_fn(IxDyn(&[4, 4, 4]), |_| rng.gen_range(-1.0..1.0));
        let w16 = ArrayD::from_shape_fn(IxDyn(&[4, 2, 2]), |_| rng.gen_range(-1.0..1.0));
        let eval_with = |store: &ParamStore| -> f64 {
            let mut g = Graph::new();
            let fm = bb.forward(&mut g, store, &img).unwrap();
            let c8 = g.constant(w8.clone());
            let c16 = g.constant(w16.clone());
            let p8 = g.mul(fm.f_s8, c8);
            let p16 = g.mul(fm.f_s16, c16);
            let s8 = g.sum_all(p8);
            let s16 = g.sum_all(p16);
            let loss = g.add(s8, s16);
            g.scalar(loss)
        };
        // analytic grads
        let mut g = Graph::new();
        let fm = bb.forward(&mut g, &store, &img).unwrap();
        let c8 = g.constant(w8.clone());
        let c16 = g.constant(w16.clone());
        let p8 = g.mul(fm.f_s8, c8);
        let p16 = g.mul(fm.f_s16, c16);
        let s8 = g.sum_all(p8);
        let s16 = g.sum_all(p16);
        let loss = g.add(s8, s16);
        let grads = g.backward(loss);
        let pgrads = g.param_grads(&grads, &store);

        // probe a few coordinates of each stem parameter with central FD
        let mut worst = 0.0f64;
        for (id, entry) in store.iter() {
            let Some(analytic) = &pgrads[id.index()] else { continue };
            let n = entry.value.len();
            let probe: Vec<usize> = (0..n).step_by((n / 5).max(1)).take(5).collect();
            for &i in &probe {
                let eps = 1e-5;
                let mut plus = store.clone();
                plus.value_mut(id).as_slice_mut().unwrap()[i] += eps;
                let mut minus = store.clone();
                minus.value_mut(id).as_slice_mut().unwrap()[i] -= eps;
                let fd = (eval_with(&plus) - eval_with(&minus)) / (2.0 * eps);
                let a = analytic.as_slice().unwrap()[i];
                worst = worst.max(crate::autodiff::rel_err(a, fd));
            }
        }
        assert!(worst < 1e-3, "stem gradient max rel err {worst}");
    }

}
