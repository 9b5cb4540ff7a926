//! Trains a proxy through RK4 state predictions and saves it with its
//! continuous-time operators.
//!
//! `cargo run --release --example train_control_oriented -- [seed] [out.json]`

use std::path::PathBuf;

use tether_koopman::dataset::{collect_dataset, CollectConfig};
use tether_koopman::io::{load_model, save_model, RunConfigFile};
use tether_koopman::training::{train_control_oriented, Scheme, TrainConfig};

fn main() -> tether_koopman::Result<()> {
    let seed = std::env::args().nth(1).map_or(Ok(0), |s| s.parse()).expect("seed");
    let out = std::env::args().nth(2).map_or_else(|| std::env::temp_dir().join("tether_node_model.json"), PathBuf::from);
    let ds = collect_dataset(&CollectConfig { seed, ..CollectConfig::default() })?;

    let cfg = TrainConfig { seed, ..TrainConfig::control_oriented() };
    let (continuous, report) = train_control_oriented(&ds, &cfg)?;
    let discrete = continuous.to_discrete()?;
    println!("trained in {:.1} s, best epoch {} (loss {:.3e})", report.wall_clock_s, report.best_epoch, report.best.total);

    let prov = RunConfigFile::default().with_seed(seed).provenance();
    save_model(&out, &discrete, Some(&continuous), Scheme::ControlOriented, &prov)?;
    let (back, file) = load_model(&out)?;
    assert_eq!(back, discrete);
    println!("saved {} (N = {}, n_zeta = {}) to {}", file.config_hash, file.n, file.n_zeta, out.display());
    Ok(())
}
