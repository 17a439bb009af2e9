//! Train the transformer forecaster on rolling windows of panel features
//! and evaluate it on held-out bonds.

use sentispread::backtest::{build_datasets, Variant};
use sentispread::corpus::split_bonds;
use sentispread::forecast::{evaluate, prepare_training, train_forecaster, ForecasterConfig, WindowSpec};
use sentispread::stats::Predictor;
use sentispread::synth::{generate, SynthConfig};

fn main() -> sentispread::Result<()> {
    let data = generate(&SynthConfig {
        n_bonds: 20,
        n_days: 200,
        ..Default::default()
    })?;
    let ids: Vec<String> = data.panels.iter().map(|p| p.bond_id.clone()).collect();
    let splits = split_bonds(&ids, (7, 1, 2), 0)?;
    let spec = WindowSpec::default();
    let mut ds = build_datasets(&data.panels, &splits, None, &data.calendar, Variant::Baseline, &spec)?;
    println!("{} / {} / {} windows of {}x{}", ds.train.len(), ds.valid.len(), ds.test.len(), spec.t, ds.train[0].d);

    let scaler = prepare_training(&mut ds.train, &mut ds.valid, &mut ds.test)?;
    let cfg = ForecasterConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        epochs: 4,
        batch_size: 16,
        lr: 1e-3,
        ..Default::default()
    };
    let model = train_forecaster(&ds.train, &ds.valid, &cfg)?;
    for e in &model.log {
        println!("epoch {}: train rmse {:.4}, valid rmse {:.4}", e.epoch, e.train_rmse, e.valid_rmse.unwrap_or(f64::NAN));
    }

    // test windows are already scaled, so predict before attaching the scaler
    let windows: Vec<Vec<f64>> = ds.test.iter().map(|s| s.window.clone()).collect();
    let preds = model.predict_windows(&windows)?;
    let targets: Vec<f64> = ds.test.iter().map(|s| s.target).collect();
    let m = evaluate(&preds, &targets)?;
    println!("test MAE {:.4}, MAPE {:.5}", m.mae, m.mape);

    let model = sentispread::forecast::ForecasterModel {
        scaler: Some(scaler),
        ..model
    };
    model.save(std::env::temp_dir().join("sentispread_forecaster.json"))?;
    Ok(())
}
