//! Train the firm-level sentiment head on soft-labeled synthetic texts and
//! score every text.

use sentispread::absa::{polarity_from_probs, train_head, HeadConfig, LabeledExample};
use sentispread::pipeline::{score_micro, SentimentInputs};
use sentispread::stats::precision;
use sentispread::synth::{generate, SynthConfig};

fn main() -> sentispread::Result<()> {
    let data = generate(&SynthConfig {
        n_bonds: 10,
        n_days: 200,
        ..Default::default()
    })?;
    let inputs = SentimentInputs::from_synth(&data)?;
    let examples = sentispread::absa::labeled_examples(&inputs.micro_texts, &inputs.token_features)?;
    let (train, held): (Vec<(usize, &LabeledExample)>, Vec<_>) = examples.iter().enumerate().partition(|(i, _)| i % 5 != 0);
    let train: Vec<LabeledExample> = train.into_iter().map(|(_, e)| e.clone()).collect();

    let head = train_head(
        &train,
        &HeadConfig {
            epochs: 20,
            lr: 1e-3,
            ..Default::default()
        },
    )?;
    println!(
        "loss {:.4} -> {:.4} over {} epochs",
        head.loss_history[0],
        head.loss_history.last().unwrap(),
        head.loss_history.len() - 1
    );

    let hard = |p: [f64; 3]| polarity_from_probs(p);
    let pred: Vec<i8> = held.iter().map(|(_, e)| head.predict_proba(&e.pooled).map(hard)).collect::<Result<_, _>>()?;
    let truth: Vec<i8> = held.iter().map(|(_, e)| hard([e.label.p_neg, e.label.p_neu, e.label.p_pos])).collect();
    println!("held-out precision {:.3} on {} items", precision(&pred, &truth)?.precision, pred.len());

    let (scores, alpha) = score_micro(&inputs, &head)?;
    let nonzero = alpha.values().iter().filter(|v| **v != 0.0).count();
    println!("{} scored text-bond pairs, {nonzero} non-zero bond-days", scores.len());
    Ok(())
}
