//! Label assignment on a toy scene: one-to-one bipartite matching for
//! detection, then one-to-many re-id matching with IoU-proportional weights.
//!
//! ```sh
//! cargo run --release --example bipartite_and_drsm
//! ```

use persearch::geometry::{iou, BBox};
use persearch::matching::{drsm_assign, hungarian, match_cost, MatchCostWeights};

fn main() -> persearch::Result<()> {
    // two ground-truth persons
    let gts = vec![
        BBox::normalized(0.10, 0.20, 0.30, 0.70)?,
        BBox::normalized(0.55, 0.25, 0.75, 0.80)?,
    ];
    let gt_ids = vec![3i64, 7];

    // six proposals: tight, loose and background boxes
    let preds = vec![
        BBox::normalized(0.11, 0.21, 0.31, 0.71)?, // near gt 0
        BBox::normalized(0.12, 0.25, 0.33, 0.72)?, // looser on gt 0
        BBox::normalized(0.56, 0.26, 0.76, 0.81)?, // near gt 1
        BBox::normalized(0.50, 0.20, 0.80, 0.85)?, // loose on gt 1
        BBox::normalized(0.40, 0.40, 0.60, 0.60)?, // between
        BBox::normalized(0.00, 0.00, 0.12, 0.15)?, // background
    ];
    let logits = vec![2.5, 0.5, 2.0, 0.3, -1.0, -2.0];

    let cost = match_cost(&logits, &preds, &gts, &MatchCostWeights::default())?;
    let det = hungarian(&cost);
    println!("bipartite match (proposal -> gt): {det:?}");

    let assign = drsm_assign(&preds, &gts, &gt_ids, &det, 0.7)?;
    println!("one-to-many re-id labels (theta = 0.7):");
    for (n, m) in assign.reid.iter().enumerate() {
        match m {
            Some(m) => {
                let ov = iou(&preds[n], &gts[m.gt])?;
                println!(
                    "  proposal {n}: identity {} (gt {}, IoU {:.3}, weight {:.3})",
                    m.identity, m.gt, ov, m.weight
                );
            }
            None => println!("  proposal {n}: background"),
        }
    }
    let labeled = assign.reid.iter().flatten().count();
    println!("{labeled} of {} proposals carry a re-id label", preds.len());
    Ok(())
}
