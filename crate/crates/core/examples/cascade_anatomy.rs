//! Peek inside one forward pass of the cascade: per-stage score statistics,
//! box refinement, and where the re-id heads sit.
//!
//! ```sh
//! cargo run --release --example cascade_anatomy
//! ```

use ndarray::Array3;
use persearch::autodiff::Graph;
use persearch::config::ModelConfig;
use persearch::losses::sigmoid;
use persearch::model::PersonSearchModel;
use rand::Rng;

fn main() -> persearch::Result<()> {
    let cfg = ModelConfig {
        stages: 6,
        num_proposals: 10,
        channels: 16,
        proposal_dim: 32,
        dyn_hidden: 8,
        reid_dim: 16,
        roi_bins: 7,
        ffn_hidden: 64,
    };
    let model = PersonSearchModel::new(&cfg, 0)?;
    let mut rng = persearch::rng::stream_rng(1, 0);
    let image = Array3::from_shape_fn((3, 96, 96), |_| rng.gen_range(-1.0..1.0));

    let mut g = Graph::new();
    let (_, outs) = model.forward(&mut g, &image)?;
    println!("{} stages, re-id heads on the last two:", outs.len());
    for (s, out) in outs.iter().enumerate() {
        let logits = g.value(out.cls_logits);
        let mean_score: f64 = (0..cfg.num_proposals)
            .map(|n| sigmoid(logits[[n, 0]]))
            .sum::<f64>()
            / cfg.num_proposals as f64;
        let mean_area: f64 =
            out.boxes.iter().map(|b| b.area()).sum::<f64>() / out.boxes.len() as f64;
        println!(
            "  stage {}: mean score {:.4}, mean box area {:.3}, re-id {}",
            s + 1,
            mean_score,
            mean_area,
            if out.reid.is_some() { "yes" } else { "no" }
        );
    }
    println!("graph holds {} nodes for this forward pass", g.len());
    Ok(())
}
