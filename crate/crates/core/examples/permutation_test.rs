//! Paired sign-flip test on per-window absolute errors of two models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sentispread::stats::{permutation_test, PermutationConfig};

fn main() -> sentispread::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let err = Normal::<f64>::new(0.0, 1.0).unwrap();
    let a: Vec<f64> = (0..300).map(|_| err.sample(&mut rng).abs()).collect();
    // b is a shade better on every window
    let b: Vec<f64> = a.iter().map(|e| (e * 0.92 + 0.02 * err.sample(&mut rng)).abs()).collect();
    let c: Vec<f64> = (0..300).map(|_| err.sample(&mut rng).abs()).collect();

    for block_len in [1, 10] {
        let cfg = PermutationConfig {
            block_len,
            ..Default::default()
        };
        let better = permutation_test(&a, &b, &cfg)?;
        let null = permutation_test(&a, &c, &cfg)?;
        println!(
            "block {block_len:>2}: improved model p = {:.4}, unrelated model p = {:.4} ({} permutations)",
            better.p_value, null.p_value, better.n_permutations
        );
    }
    Ok(())
}
