//! Generate a synthetic corpus and bond panel, then write it in the layout
//! every other command reads.
//!
//!     cargo run --example synth_corpus -- /tmp/sentispread-data

use sentispread::synth::{generate, SynthConfig};

fn main() -> sentispread::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "synth_data".into());
    let cfg = SynthConfig {
        n_bonds: 12,
        n_days: 250,
        seed: 7,
        ..Default::default()
    };
    let data = generate(&cfg)?;
    let labeled = data.micro_texts.iter().filter(|t| t.soft_label.is_some()).count();
    println!(
        "{} bonds over {} days, {} firm-level texts ({labeled} labeled), {} industry-level texts",
        data.panels.len(),
        data.calendar.len(),
        data.micro_texts.len(),
        data.meso_texts.len(),
    );
    println!(
        "graph: {} industries x {} topics",
        data.graph.n_industries(),
        data.graph.n_topics()
    );
    let paths = data.write(&dir)?;
    println!("panel written to {}", paths.panel.display());
    Ok(())
}
