//! Denoise a noisy series with the Daubechies smoother, full-sample and
//! causal.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sentispread::wavelet::{smooth, SmoothMode, WaveletSpec};

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

fn main() -> sentispread::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, 0.6).unwrap();
    let clean: Vec<f64> = (0..400).map(|k| (k as f64 / 40.0).sin()).collect();
    let noisy: Vec<f64> = clean.iter().map(|c| c + noise.sample(&mut rng)).collect();
    println!("noisy      rmse {:.3}", rmse(&noisy, &clean));
    for mode in [SmoothMode::FullSample, SmoothMode::Causal] {
        let spec = WaveletSpec {
            mode,
            ..Default::default()
        };
        let s = smooth(&noisy, &spec)?;
        println!("{mode:<10?} rmse {:.3}", rmse(&s.values, &clean));
        for w in &s.warnings {
            println!("  warning: {w}");
        }
    }
    Ok(())
}
