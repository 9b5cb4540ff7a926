//! Model and dataset files reload exactly; damaged files fail with distinct errors.

use std::fs;

use nalgebra::DVector;
use tether_koopman::dataset::{collect_dataset, CollectConfig};
use tether_koopman::io::{load_dataset, load_model, save_dataset, save_model, ModelFile, RunConfigFile};
use tether_koopman::koopman::{build_feature, ProxyModel};
use tether_koopman::training::{train_control_oriented, train_supervised, Scheme, TrainConfig};
use tether_koopman::Error;

fn small_config() -> TrainConfig {
    TrainConfig { epochs: 5, hidden: 16, lifted_dim: 6, ..TrainConfig::default() }
}

fn small_model() -> ProxyModel {
    let ds = collect_dataset(&CollectConfig { k: 8, seed: 1, ..CollectConfig::default() }).unwrap();
    train_supervised(&ds, &small_config()).unwrap().0
}

/// Chained one-step predictions on a fixed input stream.
fn prediction_stream(m: &ProxyModel) -> Vec<u64> {
    let mut d = 0.05;
    (0..200)
        .map(|k| {
            let t = k as f64 * 0.01;
            let x = tether_koopman::dynamics::State::new(t.sin(), -0.5 + 0.1 * t.cos(), 0.2, 0.1);
            let zeta: DVector<f64> = build_feature(&m.feature, &x, 3.0 + t.sin(), &[d]);
            d = m.predict_next(d, &zeta).unwrap().clamp(-1.0, 1.0);
            d.to_bits()
        })
        .collect()
}

#[test]
fn model_roundtrip_reproduces_predictions_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let m = small_model();
    let prov = RunConfigFile::default().provenance();
    save_model(&path, &m, None, Scheme::Supervised, &prov).unwrap();
    let (back, file) = load_model(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(prediction_stream(&back), prediction_stream(&m));
    assert_eq!(file.config_hash, prov.config_hash);
    assert_eq!((file.n, file.n_zeta), (6, 6));
}

#[test]
fn continuous_operators_are_stored_with_the_discrete_ones() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("node.json");
    let ds = collect_dataset(&CollectConfig { k: 6, seed: 2, ..CollectConfig::default() }).unwrap();
    let cfg = TrainConfig { epochs: 2, ..TrainConfig { scheme: Scheme::ControlOriented, ..small_config() } };
    let (c, _) = train_control_oriented(&ds, &cfg).unwrap();
    let d = c.to_discrete().unwrap();
    save_model(&path, &d, Some(&c), Scheme::ControlOriented, &RunConfigFile::default().provenance()).unwrap();
    let (back, file) = load_model(&path).unwrap();
    assert_eq!(back, d);
    assert_eq!(file.scheme, Scheme::ControlOriented);
    assert_eq!(file.a_c.as_ref().unwrap().len(), c.a_c.nrows());
}

#[test]
fn weights_are_flattened_row_major() {
    let m = small_model();
    let f = ModelFile::new(&m, None, Scheme::Supervised, &RunConfigFile::default().provenance()).unwrap();
    let w1 = &m.lifting.weights[1];
    assert_eq!(f.weights[1][1], w1[(0, 1)]);
    assert_eq!(f.weights[1][w1.ncols()], w1[(1, 0)]);
}

#[test]
fn damaged_model_files_fail_with_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_model(&path, &small_model(), None, Scheme::Supervised, &RunConfigFile::default().provenance()).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();

    let mut tampered = doc.clone();
    tampered["layer_sizes"][1] = serde_json::json!(17);
    fs::write(&path, tampered.to_string()).unwrap();
    assert!(matches!(load_model(&path), Err(Error::Shape { .. })));

    let mut old = doc.clone();
    old["format_version"] = serde_json::json!(99);
    fs::write(&path, old.to_string()).unwrap();
    let err = load_model(&path).unwrap_err();
    assert!(matches!(err, Error::Version { found: 99, .. }));

    fs::write(&path, "{\"format_version\": 1, \"scheme\": ").unwrap();
    let err2 = load_model(&path).unwrap_err();
    assert!(matches!(err2, Error::Malformed(_)));

    doc["a"][0] = serde_json::json!([1.0]);
    fs::write(&path, doc.to_string()).unwrap();
    let err3 = load_model(&path).unwrap_err();
    assert!(matches!(err3, Error::Shape { .. }));

    let codes = [err.code(), err2.code(), err3.code()];
    assert_eq!(codes, ["version", "malformed", "shape"]);
}

#[test]
fn dataset_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    let ds = collect_dataset(&CollectConfig { k: 12, seed: 9, ..CollectConfig::default() }).unwrap();
    save_dataset(&path, &ds, &RunConfigFile::default().provenance()).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.meta, ds.meta);
    let bits = |d: &tether_koopman::dataset::Dataset| -> Vec<u64> {
        d.trajectories
            .iter()
            .flat_map(|t| {
                let mut v: Vec<f64> = t.states.iter().flat_map(|s| s.to_array()).collect();
                v.extend(&t.controls);
                v.extend(t.labels.iter().flatten());
                v.extend(t.d_true.iter().flatten());
                v
            })
            .map(f64::to_bits)
            .collect()
    };
    assert_eq!(bits(&back), bits(&ds));
    assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 12);
}

#[test]
fn inconsistent_dataset_lines_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    let ds = collect_dataset(&CollectConfig { k: 2, seed: 9, ..CollectConfig::default() }).unwrap();
    save_dataset(&path, &ds, &RunConfigFile::default().provenance()).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let mut line: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    line["controls"].as_array_mut().unwrap().pop();
    fs::write(&path, line.to_string()).unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::Shape { .. })));

    line["states"][0] = serde_json::json!([0.0, 1.0]);
    fs::write(&path, line.to_string()).unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::Shape { .. })));

    fs::write(&path, "").unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::Malformed(_))));
}
