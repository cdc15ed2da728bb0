use std::fs;

use nalgebra::DMatrix;
use switchstate::io::{
    load_dataset, load_model, model_from_json, model_to_json, read_sequence_csv, save_dataset, save_model,
    write_sequence_csv,
};
use switchstate::learning::{em_init, FitConfig};
use switchstate::simulator::{random_instance, sample_dataset, sample_params, SeparationSpec};
use switchstate::ModelParams;

fn rel_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-15 * a.abs().max(b.abs())
}

#[test]
fn model_round_trip_preserves_values() {
    for seed in 0..10 {
        let (mut params, _) = random_instance(3, 4, 2, 2, 1, seed).unwrap();
        params.class_names = vec!["nc".into(), "mci".into()];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&params, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.class_names, params.class_names);
        let flat = |p: &ModelParams| -> Vec<f64> {
            let mut v: Vec<f64> = p.mu.iter().flat_map(|m| m.iter().copied()).collect();
            v.extend(p.sigma.iter().flat_map(|m| m.iter().copied()));
            v.extend(p.pi.iter().flat_map(|m| m.iter().copied()));
            v.extend(p.g.iter().copied());
            v.extend(p.init_dist.iter().copied());
            v.extend(p.class_prior.iter().copied());
            v.extend([p.alpha, p.kappa]);
            v
        };
        for (a, b) in flat(&params).iter().zip(flat(&back)) {
            assert!(rel_close(*a, b));
        }
        assert_eq!(model_to_json(&back).unwrap(), model_to_json(&params).unwrap());
    }
}

#[test]
fn corrupted_row_sum_names_class_and_row() {
    let (params, _) = random_instance(3, 2, 2, 2, 1, 4).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&model_to_json(&params).unwrap()).unwrap();
    let row = doc["pi"][1][2].as_array_mut().unwrap();
    let rest: f64 = row[1].as_f64().unwrap() + row[2].as_f64().unwrap();
    row[0] = serde_json::json!(1.5 - rest);
    let err = model_from_json(&doc.to_string()).unwrap_err().to_string();
    assert!(err.contains("class 1") && err.contains("row 2"), "{err}");
}

#[test]
fn non_spd_covariance_is_refused() {
    let (params, _) = random_instance(2, 2, 1, 2, 1, 4).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&model_to_json(&params).unwrap()).unwrap();
    doc["sigma"][1] = serde_json::json!([[1.0, 2.0], [2.0, 1.0]]);
    let err = model_from_json(&doc.to_string()).unwrap_err().to_string();
    assert!(err.contains("state 1"), "{err}");
}

#[test]
fn schema_version_is_checked() {
    let (params, _) = random_instance(2, 1, 1, 2, 1, 0).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&model_to_json(&params).unwrap()).unwrap();
    doc["schema_version"] = serde_json::json!(99);
    assert!(model_from_json(&doc.to_string()).is_err());
}

#[test]
fn default_fresh_model_hyperparameters() {
    let config = FitConfig::default();
    assert_eq!((config.k, config.alpha, config.kappa), (8, 0.5, 100.0));
    let truth = sample_params(8, 3, 2, &SeparationSpec::default(), 1).unwrap();
    let data = sample_dataset(&truth, 10, 30, 2).unwrap();
    let init = em_init(&data.sequences, &["a".into(), "b".into()], &config).unwrap();
    let text = model_to_json(&init.params).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc["K"], 8);
    assert_eq!(doc["alpha"], 0.5);
    assert_eq!(doc["kappa"], 100.0);
}

#[test]
fn simulated_dataset_round_trips_exactly() {
    let truth = sample_params(3, 5, 2, &SeparationSpec::default(), 3).unwrap();
    let data = sample_dataset(&truth, 7, 25, 4).unwrap();
    let names = vec!["x".to_string(), "y".to_string()];
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_dataset(dir.path(), "train.json", &names, &data.sequences, "round trip").unwrap();
    let loaded = load_dataset(&manifest).unwrap();
    assert_eq!(loaded.class_names, names);
    assert_eq!(loaded.sequences, data.sequences);
}

#[test]
fn empty_manifest_gives_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    fs::write(&path, r#"{"schema_version": 1, "class_names": ["a"], "entries": [], "D": 3}"#).unwrap();
    assert!(load_dataset(&path).unwrap().sequences.is_empty());
}

#[test]
fn paper_shaped_csv_loads() {
    let dir = tempfile::tempdir().unwrap();
    let x = DMatrix::from_fn(130, 90, |t, d| (t as f64 * 0.37 + d as f64).sin());
    write_sequence_csv(dir.path().join("s/subj.csv"), &x).unwrap();
    let manifest = r#"{"schema_version": 1, "class_names": ["NC", "MCI"], "D": 90,
        "entries": [{"id": "subj", "path": "s/subj.csv", "label": "MCI"}]}"#;
    fs::write(dir.path().join("m.json"), manifest).unwrap();
    let data = load_dataset(dir.path().join("m.json")).unwrap();
    assert_eq!(data.sequences[0].len(), 130);
    assert_eq!(data.sequences[0].dim(), 90);
    assert_eq!(data.sequences[0].label, Some(1));
    assert_eq!(data.sequences[0].x, x);
}

fn manifest_with(dir: &std::path::Path, csv: &str, label: &str, d: usize) -> std::path::PathBuf {
    fs::write(dir.join("a.csv"), csv).unwrap();
    let text = format!(
        r#"{{"schema_version": 1, "class_names": ["p", "q"], "D": {d},
            "entries": [{{"id": "a", "path": "a.csv", "label": {label}}}]}}"#
    );
    let path = dir.join("m.json");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn dataset_errors_are_specific() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let err = load_dataset(manifest_with(d, "1,2\n3\n", "\"p\"", 2)).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
    let err = load_dataset(manifest_with(d, "1,2\n3,x\n", "\"p\"", 2)).unwrap_err().to_string();
    assert!(err.contains("line 2") && err.contains("column 2"), "{err}");
    let err = load_dataset(manifest_with(d, "1,2\n", "\"r\"", 2)).unwrap_err().to_string();
    assert!(err.contains("\"r\""), "{err}");
    let err = load_dataset(manifest_with(d, "1,2\n", "\"p\"", 3)).unwrap_err().to_string();
    assert!(err.contains('3'), "{err}");
    assert!(load_dataset(manifest_with(d, "1,2\n", "null", 2)).unwrap().sequences[0].label.is_none());
    fs::remove_file(d.join("a.csv")).unwrap();
    assert!(load_dataset(d.join("m.json")).is_err());
}

#[test]
fn csv_header_is_optional_and_always_written() {
    let dir = tempfile::tempdir().unwrap();
    let x = DMatrix::from_row_slice(2, 3, &[0.1, -2.0, 3e-9, 4.0, 5.5, 1.0 / 3.0]);
    let p = dir.path().join("x.csv");
    write_sequence_csv(&p, &x).unwrap();
    assert!(fs::read_to_string(&p).unwrap().starts_with("dim_0,dim_1,dim_2\n"));
    assert_eq!(read_sequence_csv(&p, Some(3)).unwrap(), x);
    fs::write(&p, "0.1,-2,3e-9\n4,5.5,0.5\n").unwrap();
    assert_eq!(read_sequence_csv(&p, None).unwrap().nrows(), 2);
}
