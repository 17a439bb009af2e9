//! Permutation importance with any closure as the model. The target depends
//! on columns 0 and 2 only, so the other columns score near zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sentispread::stats::rank_importances;

fn main() -> sentispread::Result<()> {
    let (t, cols) = (4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let windows: Vec<Vec<f64>> = (0..400).map(|_| (0..t * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    // last row of the window drives the target
    let model = |w: &[f64]| 2.0 * w[(t - 1) * cols] - 0.5 * w[(t - 1) * cols + 2];
    let targets: Vec<f64> = windows.iter().map(|w| model(w)).collect();
    let ranked = rank_importances(&model, &windows, &targets, cols, 10, 0)?;
    for (rank, imp) in ranked.iter().enumerate() {
        println!("#{} column {}: MAE +{:.4}", rank + 1, imp.feature, imp.importance);
    }
    Ok(())
}
