//! Standard vs dynamic RoI sampling on a horizontal-ramp feature map.
//!
//! With zero offsets the dynamic variant reproduces plain RoIAlign bit for
//! bit; a uniform x-offset shifts every bin by `offset * box_w * gamma`.
//!
//! ```sh
//! cargo run --release --example roi_sampling
//! ```

use ndarray::{Array2, ArrayD, IxDyn};
use persearch::autodiff::Graph;
use persearch::geometry::BBox;
use persearch::roi::{dynamic_roi_align, roi_align, RoiGrid, OFFSET_GAMMA};

fn main() -> persearch::Result<()> {
    // f(x, y) = x over a 16x16 map
    let fm = ArrayD::from_shape_fn(IxDyn(&[1, 16, 16]), |ix| ix[2] as f64);
    let grid = RoiGrid::new(3);
    let b = BBox::absolute(4.0, 4.0, 12.0, 12.0)?;

    let mut g = Graph::new();
    let f = g.constant(fm);
    let (plain, _) = roi_align(&mut g, f, &b, &grid);
    println!("plain RoIAlign bins (x-ramp):");
    print_bins(g.value(plain));

    let zeros = g.constant(ArrayD::zeros(IxDyn(&[9, 2])));
    let (dyn0, _) = dynamic_roi_align(&mut g, f, &b, &grid, zeros, OFFSET_GAMMA);
    let bitwise = g
        .value(plain)
        .iter()
        .zip(g.value(dyn0).iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    println!("zero offsets reduce to plain RoIAlign bitwise: {bitwise}");

    let delta = 0.5;
    let mut off = Array2::zeros((9, 2));
    off.column_mut(0).fill(delta);
    let o = g.leaf(off.into_dyn(), true);
    let (shifted, _) = dynamic_roi_align(&mut g, f, &b, &grid, o, OFFSET_GAMMA);
    println!(
        "uniform x-offset {delta} shifts every bin by {:.3}:",
        delta * b.width() * OFFSET_GAMMA
    );
    print_bins(g.value(shifted));

    // gradients flow to the offsets
    let loss = g.sum_all(shifted);
    let grads = g.backward(loss);
    println!("offset gradient present: {}", grads.get(o).is_some());
    Ok(())
}

fn print_bins(v: &ArrayD<f64>) {
    for i in 0..3 {
        let row: Vec<String> = (0..3).map(|j| format!("{:6.3}", v[[0, i, j]])).collect();
        println!("  {}", row.join(" "));
    }
}
