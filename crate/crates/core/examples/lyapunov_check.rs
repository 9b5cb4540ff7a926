//! Feedback law with the true uncertainty fed forward: the Lyapunov function
//! never increases by more than rounding between samples.
//!
//! `cargo run --release --example lyapunov_check`

use tether_koopman::sim::{precision_zone_metrics, run_deployment, ProxySource, ScenarioConfig};

fn main() -> tether_koopman::Result<()> {
    let cfg = ScenarioConfig { proxy: ProxySource::Oracle, ..ScenarioConfig::default() };
    let log = run_deployment(&cfg, None)?;
    let worst = log.records.windows(2).map(|w| w[1].lyapunov - w[0].lyapunov).fold(f64::MIN, f64::max);
    let m = precision_zone_metrics(&log)?;
    println!("V: {:.4e} -> {:.4e}", log.records[0].lyapunov, log.records.last().expect("records").lyapunov);
    println!("largest per-step increase {worst:.2e}; settled {} at {:?}", m.settled, m.settling_time);
    Ok(())
}
