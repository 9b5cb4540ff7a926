//! Online refitting of the proxy operator against an unseen uncertainty.
//!
//! `cargo run --release --example online_update`

use tether_koopman::dataset::{collect_dataset, CollectConfig};
use tether_koopman::experiments::exp_online_new_uncertainty;

fn main() -> tether_koopman::Result<()> {
    let ds = collect_dataset(&CollectConfig::default())?;
    let summary = exp_online_new_uncertainty(&ds, 0, &[None, Some(1), Some(50), Some(100)])?;
    println!("deployed against {:?}, window {}", summary.uncertainty, summary.window);
    for o in &summary.outcomes {
        let p = o.period.map_or_else(|| "offline".to_string(), |p| format!("p = {p}"));
        println!(
            "{p:>8}: settled {:5} at {:?}, RMSE {:.4}, trailing RMS {:.4}, {} refits",
            o.metrics.settled, o.metrics.settling_time, o.metrics.rmse, o.metrics.trailing_rms, o.updates
        );
    }
    Ok(())
}
