//! Run the finite-difference gradient suite over every trainable operation
//! family: losses, instance interaction, the hierarchical re-id branch and
//! dynamic RoI offsets.
//!
//! ```sh
//! cargo run --release --example gradient_check
//! ```

fn main() {
    for check in persearch::verify::gradient_checks() {
        let status = if check.passed { "PASS" } else { "FAIL" };
        println!("[{status}] {}: {}", check.name, check.detail);
    }
}
