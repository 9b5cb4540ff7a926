//! Feedback deployment with and without the offline proxy.
//!
//! `cargo run --release --example deploy_feedback`

use tether_koopman::dataset::{collect_dataset, CollectConfig};
use tether_koopman::sim::{precision_zone_metrics, run_deployment, ProxySource, ScenarioConfig};
use tether_koopman::training::{train_supervised, TrainConfig};

fn main() -> tether_koopman::Result<()> {
    let ds = collect_dataset(&CollectConfig::default())?;
    let (model, _) = train_supervised(&ds, &TrainConfig::default())?;

    for (label, proxy) in [("d_hat = 0", ProxySource::None), ("offline proxy", ProxySource::Offline)] {
        let cfg = ScenarioConfig { proxy, ..ScenarioConfig::default() };
        let log = run_deployment(&cfg, Some(&model))?;
        let m = precision_zone_metrics(&log)?;
        let end = log.final_state().expect("non-empty log");
        println!(
            "{label:>14}: settled {} at {:?}, final (alpha, lambda) = ({:+.4}, {:+.4}), |d - d_hat| RMS {:.4}",
            m.settled, m.settling_time, end.alpha, end.lam, m.rmse
        );
    }
    Ok(())
}
