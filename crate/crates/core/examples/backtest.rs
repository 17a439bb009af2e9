//! Baseline against sentiment-augmented forecasters on one synthetic panel,
//! with a paired permutation test per variant.

use sentispread::absa::HeadConfig;
use sentispread::backtest::{run_backtest, BacktestConfig, Variant};
use sentispread::forecast::{ForecasterConfig, Pooling};
use sentispread::pipeline::{run_sentiment, PipelineConfig, SentimentInputs};
use sentispread::synth::{generate, SynthConfig};

fn main() -> sentispread::Result<()> {
    let data = generate(&SynthConfig {
        n_bonds: 20,
        n_days: 300,
        ..Default::default()
    })?;
    let inputs = SentimentInputs::from_synth(&data)?;
    let cfg = PipelineConfig {
        head: HeadConfig {
            epochs: 20,
            lr: 1e-3,
            ..Default::default()
        },
        backtest: BacktestConfig {
            forecaster: ForecasterConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 16,
                epochs: 5,
                batch_size: 16,
                lr: 1e-3,
                pooling: Pooling::Last,
                ..Default::default()
            },
            ..Default::default()
        },
        ..Default::default()
    };
    let s = run_sentiment(&inputs, &cfg, None)?;
    let variants = [Variant::Composite, Variant::Unsmoothed, Variant::Separate];
    let out = run_backtest(&inputs.panels, Some(&s.sentiment), &inputs.calendar, &variants, &cfg.backtest)?;
    let r = &out.report;
    println!("T={} q={}  baseline MAE {:.4}", r.t, r.q, r.baseline.mae);
    for (v, e) in &r.variants {
        println!(
            "{v:<12} MAE {:.4}  dMAE {:+.2}%  dMAPE {:+.2}%  p {:.4}",
            e.mae,
            e.delta_mae_pct.unwrap_or(f64::NAN),
            e.delta_mape_pct.unwrap_or(f64::NAN),
            e.p.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
