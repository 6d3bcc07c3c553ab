//! Finite-difference verification of every layer, the multi-layer feature
//! head and the assembled detector.
//!
//! ```text
//! cargo run --release --example gradcheck
//! ```

use std::time::Instant;

use facercnn::pipeline::gradient_suite;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let t = Instant::now();
    let report = gradient_suite(1e-5, 0)?;
    println!("{report}");
    println!(
        "{:.1}s, passes at 1e-4: {}",
        t.elapsed().as_secs_f64(),
        report.passes(1e-4)
    );
    Ok(())
}
