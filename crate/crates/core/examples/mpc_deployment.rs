//! Predictive control of the dimensional deployment, with the proxy inside the
//! predictor (online refit every instant) and without it.
//!
//! `cargo run --release --example mpc_deployment`

use tether_koopman::dataset::{collect_dataset, CollectConfig};
use tether_koopman::experiments::{exp_mpc_dimensional, MpcScenario};
use tether_koopman::training::{train_supervised, TrainConfig};

fn main() -> tether_koopman::Result<()> {
    let ds = collect_dataset(&CollectConfig::default())?;
    let (model, _) = train_supervised(&ds, &TrainConfig::default())?;
    let sc = MpcScenario::default();
    println!("start state {:?}", sc.initial_state()?);

    let out = exp_mpc_dimensional(&model, &sc)?;
    for (label, log, m) in [
        ("compensated", &out.compensated, &out.compensated_metrics),
        ("uncompensated", &out.uncompensated, &out.uncompensated_metrics),
    ] {
        println!(
            "{label:>13}: settled {} at {:?}, {} steps, {} non-converged solves, aborted: {}",
            m.settled,
            m.settling_time,
            m.steps,
            log.mpc_nonconverged,
            log.aborted.as_deref().unwrap_or("no")
        );
    }
    Ok(())
}
