//! Reverse-mode gradients of a small two-layer network checked against
//! central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vardepth::{Graph, Tensor};

fn loss_of(x: &Tensor, w1: &Tensor, w2: &Tensor, targets: &[usize]) -> f32 {
    let g = Graph::new();
    let h = g.constant(x.clone()).matmul(g.constant(w1.clone())).unwrap().gelu().unwrap();
    let logits = h.matmul(g.constant(w2.clone())).unwrap();
    logits.cross_entropy(targets).unwrap().value().item()
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let w1 = Tensor::randn(&[6, 8], 0.5, &mut rng);
    let w2 = Tensor::randn(&[8, 3], 0.5, &mut rng);
    let targets = [0, 2, 1, 1];

    let g = Graph::new();
    let w1v = g.leaf(w1.clone().with_grad());
    let w2v = g.leaf(w2.clone().with_grad());
    let h = g.constant(x.clone()).matmul(w1v).unwrap().gelu().unwrap();
    let loss = h.matmul(w2v).unwrap().cross_entropy(&targets).unwrap();
    println!("loss {:.6}", loss.value().item());
    let grads = g.backward(loss).unwrap();

    let step = 1e-2;
    for (name, var, base) in [("w1", w1v, &w1), ("w2", w2v, &w2)] {
        let analytic = grads.get(var).unwrap();
        let mut worst = 0.0f32;
        for i in 0..base.numel() {
            let (mut plus, mut minus) = (base.clone(), base.clone());
            plus.data_mut()[i] += step;
            minus.data_mut()[i] -= step;
            let (lp, lm) = if name == "w1" {
                (loss_of(&x, &plus, &w2, &targets), loss_of(&x, &minus, &w2, &targets))
            } else {
                (loss_of(&x, &w1, &plus, &targets), loss_of(&x, &w1, &minus, &targets))
            };
            let numeric = (lp - lm) / (2.0 * step);
            worst = worst.max((numeric - analytic[i]).abs());
        }
        println!("{name}: {} entries, max |analytic - numeric| = {worst:.2e}", base.numel());
    }
}
