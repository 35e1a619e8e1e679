//! The pinned-seed training run on the synthetic eight-cell fixture.

mod common;

use lto_health::model::{train, ModelConfig, TrainOptions, TransformerRegressor};

fn pinned_run(parallel: bool) -> (TransformerRegressor, lto_health::model::TrainReport, lto_health::ingest::FeatureMatrix) {
    let fm = common::training_fixture();
    let mut model = TransformerRegressor::new(ModelConfig::new(fm.token_width), common::FIXTURE_SEED).unwrap();
    let options = TrainOptions {
        seed: common::FIXTURE_SEED,
        parallel,
        ..TrainOptions::default()
    };
    let report = train(&mut model, &fm, &options).unwrap();
    (model, report, fm)
}

#[test]
fn pinned_run_learns_and_generalizes() {
    let (model, report, fm) = pinned_run(false);
    assert_eq!(report.n_epochs, 5);
    assert_eq!(report.epochs.len(), 5);
    assert_eq!(report.timing.len(), 5);

    let losses: Vec<f64> = report.epochs.iter().map(|e| e.train_mse).collect();
    assert!(losses[4] < 0.5 * losses[0], "{losses:?}");
    let non_increasing = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(non_increasing >= 4, "{losses:?}");

    let preds = model.predict_rows(&fm, &fm.test_indices).unwrap();
    let mae = fm.test_indices.iter().zip(&preds).map(|(&i, p)| (fm.labels[i] - p).abs()).sum::<f64>() / preds.len() as f64;
    let range = fm.scaling.label.range();
    assert!(mae <= 0.05 * range, "MAE {mae} vs label range {range}");
    assert!(model.params.iter().all(|p| p.is_finite()));
}

#[test]
fn parallel_mode_matches_serial_bitwise() {
    let (_, serial, _) = pinned_run(false);
    let (_, parallel, _) = pinned_run(true);
    assert_eq!(serial.parameter_fingerprint, parallel.parameter_fingerprint);
    assert_eq!(serial.epochs, parallel.epochs);
}
