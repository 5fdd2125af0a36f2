//! Central-difference check of every backward pass in the crate.
//!
//!     cargo run --release --example gradcheck

use std::time::Instant;

use star_ctr::gradcheck::{run, GradCheckConfig};

fn main() -> star_ctr::Result<()> {
    let config = GradCheckConfig::default();
    let start = Instant::now();
    let report = run(&config)?;
    println!("module                  coords  max rel err");
    print!("{report}");
    println!(
        "max {:.3e} (tolerance {:.0e}) in {:.1?}",
        report.max_error(),
        report.tolerance,
        start.elapsed()
    );
    if !report.passed() {
        std::process::exit(4);
    }
    Ok(())
}
