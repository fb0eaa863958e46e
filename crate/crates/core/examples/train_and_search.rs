//! End-to-end miniature: synthesize a dataset, train briefly, evaluate the
//! search metrics (with a gallery-size sweep and cross-view filtering), and
//! run one explicit query.
//!
//! Takes a couple of minutes on one core; shrink `train.max_iters` for a
//! quicker look.
//!
//! ```sh
//! cargo run --release --example train_and_search
//! ```

use persearch::config::desk_scale_config;
use persearch::data::{generate_synthetic, normalize_pixels};
use persearch::eval::{build_gallery, evaluate, extract_query_feature, search};
use persearch::train::fit;

fn main() -> persearch::Result<()> {
    let mut cfg = desk_scale_config(0);
    cfg.train.max_iters = 600;
    cfg.eval.gallery_sizes = vec![5, 10, 20];
    let ds = generate_synthetic(&cfg.synth)?;
    println!("training {} iterations...", cfg.train.max_iters);
    let trainer = fit(&ds, &cfg, None)?;

    let digest = cfg.digest();
    let (report, _) = evaluate(&trainer.model, &ds, &cfg.eval, &cfg.pixel_norm, &digest)?;
    println!(
        "mAP {:.3}  top-1 {:.3}  detection recall {:.3}",
        report.map, report.top1, report.detection_recall
    );
    for row in &report.sweep {
        println!("gallery size {:>3}: mAP {:.3} top-1 {:.3}", row.size, row.map, row.top1);
    }
    let mut cv = cfg.eval.clone();
    cv.cross_view = true;
    cv.gallery_sizes.clear();
    let (cv_report, _) = evaluate(&trainer.model, &ds, &cv, &cfg.pixel_norm, &digest)?;
    println!("cross-view: mAP {:.3}  top-1 {:.3}", cv_report.map, cv_report.top1);

    // one explicit query against the gallery
    let q = &ds.doc.queries[0];
    let (img_idx, target, identity) = ds.query_target(q)?;
    let image = normalize_pixels(&ds.pixels[img_idx], &cfg.pixel_norm);
    let qf = extract_query_feature(&trainer.model, &image, &target)?;
    let gallery = build_gallery(&trainer.model, &ds, &cfg.pixel_norm, cfg.eval.score_thresh)?;
    let ranking = search(&qf.feature, &gallery, None);
    println!("query identity {identity}: top 3 of {} candidates", ranking.len());
    for (rank, &(ci, sim)) in ranking.iter().take(3).enumerate() {
        let c = &gallery[ci];
        println!(
            "  #{} image {} box ({:.0},{:.0},{:.0},{:.0}) similarity {:.3}",
            rank + 1,
            c.image_id,
            c.box_abs.x1,
            c.box_abs.y1,
            c.box_abs.x2,
            c.box_abs.y2,
            sim
        );
    }
    Ok(())
}
