//! The reverse-mode engine on its own: fit a linear model with Adam and
//! check one gradient against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sentispread::autodiff::{grad_check, Adam, AdamConfig, Graph, Optimizer, Tensor};

fn main() -> sentispread::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let true_w = [1.5, -2.0, 0.7];
    let n = 64;
    let x: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = x.chunks(3).map(|r| r.iter().zip(&true_w).map(|(a, b)| a * b).sum::<f64>() + 0.3).collect();
    let x = Tensor::new(n, 3, x)?;
    let y = Tensor::new(n, 1, y)?;

    let loss_of = |g: &mut Graph, p: &[sentispread::autodiff::Var]| {
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let h = g.matmul(xv, p[0]);
        let h = g.add_row(h, p[1]);
        g.mse(h, yv)
    };

    let mut params = vec![Tensor::zeros(3, 1), Tensor::zeros(1, 1)];
    let check = grad_check(&params, 1e-6, loss_of)?;
    println!("gradient check: max relative error {:.2e} over {} entries", check.max_rel_err, check.n_checked);

    let mut opt = Adam::new(AdamConfig {
        lr: 0.05,
        ..Default::default()
    });
    for step in 0..=300 {
        let mut g = Graph::new();
        let p: Vec<_> = params.iter().map(|t| g.param(t.clone())).collect();
        let loss = loss_of(&mut g, &p);
        if step % 100 == 0 {
            println!("step {step:>3}: mse {:.6}", g.value(loss).item());
        }
        g.backward(loss)?;
        let grads: Vec<Tensor> = p.iter().map(|v| g.grad(*v).cloned().unwrap()).collect();
        opt.step(&mut params, &grads)?;
    }
    println!("weights {:.3?}, bias {:.3}", params[0].data(), params[1].item());
    Ok(())
}
