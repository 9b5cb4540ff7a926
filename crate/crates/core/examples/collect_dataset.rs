//! Collects trajectories under the excitation controller and saves them as JSONL.
//!
//! `cargo run --release --example collect_dataset -- [trajectories] [out.jsonl]`

use std::path::PathBuf;

use tether_koopman::dataset::{collect_dataset, CollectConfig};
use tether_koopman::io::{load_dataset, save_dataset, RunConfigFile};

fn main() -> tether_koopman::Result<()> {
    let k = std::env::args().nth(1).map_or(Ok(50), |s| s.parse()).expect("trajectory count");
    let out = std::env::args().nth(2).map_or_else(|| std::env::temp_dir().join("tether_dataset.jsonl"), PathBuf::from);

    let cfg = CollectConfig { k, seed: 7, ..CollectConfig::default() };
    let ds = collect_dataset(&cfg)?;
    let prov = RunConfigFile::default().with_seed(cfg.seed).provenance();
    save_dataset(&out, &ds, &prov)?;

    let back = load_dataset(&out)?;
    assert_eq!(back.trajectories, ds.trajectories);
    let t = &ds.trajectories[0];
    let labels = t.labels.as_ref().expect("labels attached");
    let d = t.d_true.as_ref().expect("true uncertainty recorded");
    let rms = (labels.iter().enumerate().map(|(j, l)| (l - d[j + t.label_offset]).powi(2)).sum::<f64>() / labels.len() as f64).sqrt();
    println!("{} trajectories x {} samples, {} redrawn at the singularity", ds.trajectories.len(), t.len(), ds.meta.resampled);
    println!("first trajectory: label RMS error against the generator {rms:.2e}");
    println!("saved to {}", out.display());
    Ok(())
}
