//! Wall-clock of one operator refit for several window sizes.
//!
//! `cargo run --release --example bench_refit`

use tether_koopman::experiments::{bench_update_timing, default_lifting};

fn main() -> tether_koopman::Result<()> {
    let lifting = default_lifting(0)?;
    let rows = bench_update_timing(&lifting, &[10, 20, 30, 40, 50], 500, 0)?;
    for r in &rows {
        println!("m = {:3}: {:.4} ms +- {:.4} ({} calls)", r.window, r.mean_ms, r.std_ms, r.calls);
    }
    let means: Vec<f64> = rows.iter().map(|r| r.mean_ms).collect();
    let ratio = means.iter().cloned().fold(f64::MIN, f64::max) / means.iter().cloned().fold(f64::MAX, f64::min);
    println!("max/min mean ratio {ratio:.2}");
    Ok(())
}
