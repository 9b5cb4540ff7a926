//! Trains a supervised proxy and checks its one-step predictions on held-out data.
//!
//! `cargo run --release --example train_supervised -- [seed]`

use tether_koopman::dataset::{collect_dataset, CollectConfig};
use tether_koopman::koopman::build_feature;
use tether_koopman::training::{train_supervised, TrainConfig};

fn main() -> tether_koopman::Result<()> {
    let seed = std::env::args().nth(1).map_or(Ok(0), |s| s.parse()).expect("seed");
    let ds = collect_dataset(&CollectConfig { seed, ..CollectConfig::default() })?;
    let (train, test) = ds.split(0.8, seed)?;

    let cfg = TrainConfig { seed, ..TrainConfig::default() };
    let (model, report) = train_supervised(&train, &cfg)?;
    println!("trained in {:.1} s, best epoch {} (loss {:.3e})", report.wall_clock_s, report.best_epoch, report.best.total);
    if let Some(r) = report.refit {
        println!("operator refit over {} transitions, residual {:.3e}", r.transitions, r.residual);
    }

    // One-step prediction d_{k+1} from the label at k, on unseen trajectories.
    let (mut se, mut n) = (0.0, 0usize);
    for t in &test.trajectories {
        for k in 1..t.len() - 2 {
            let (Some(d), Some(d_prev), Some(d_next)) = (t.label_at(k), t.label_at(k - 1), t.label_at(k + 1)) else {
                continue;
            };
            let zeta = build_feature(&model.feature, &t.states[k], t.controls[k], &[d_prev]);
            se += (model.predict_next(d, &zeta)? - d_next).powi(2);
            n += 1;
        }
    }
    println!("held-out one-step RMSE over {n} transitions: {:.3e}", (se / n as f64).sqrt());
    Ok(())
}
