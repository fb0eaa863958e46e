//! Identity memory dynamics: lookup-table updates with momentum, queue
//! wraparound for unlabeled persons, and the matching loss falling as the
//! memory converges toward the feature.
//!
//! ```sh
//! cargo run --release --example oim_memory
//! ```

use ndarray::Array1;
use persearch::losses::{oim_loss, ReIDMemory};

fn unit(v: Vec<f64>) -> Array1<f64> {
    let a = Array1::from_vec(v);
    let n = a.dot(&a).sqrt();
    a / n
}

fn main() -> persearch::Result<()> {
    let mut mem = ReIDMemory::new(3, 4, 2, 0.5, 1.0 / 30.0);
    let f = unit(vec![0.8, 0.2, -0.1, 0.5]);

    println!("loss of the same feature as the lookup row converges (momentum 0.5):");
    // seed the other identities so the softmax has real competition
    mem.update(&[
        (unit(vec![-0.7, 0.3, 0.6, 0.1]), 1),
        (unit(vec![0.1, -0.9, 0.2, 0.3]), 2),
    ])?;
    for step in 0..5 {
        mem.update(&[(f.clone(), 0)])?;
        let loss = oim_loss(&f, 0, &mem)?;
        println!("  step {step}: loss {loss:.6}");
    }
    println!("max unit-norm deviation: {:.2e}", mem.max_norm_deviation());

    println!("\ncircular queue of capacity 2 (FIFO):");
    for k in 0..3 {
        let g = unit(vec![k as f64 + 0.5, 1.0, -0.3, 0.2]);
        mem.update(&[(g, -1)])?;
        println!(
            "  push {k}: occupied {}, cursor {}",
            mem.queue_occupied(),
            mem.cursor()
        );
    }
    println!("third push overwrote the oldest slot (cursor wrapped)");
    Ok(())
}
