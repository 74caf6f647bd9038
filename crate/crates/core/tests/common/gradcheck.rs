//! Central finite-difference oracle for graph operations.
//!
//! The loss is a fixed random projection of the op's output, evaluated in
//! `f64` outside the graph so the oracle shares nothing with the reverse pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vardepth::{Graph, Tensor, Var};

pub const STEP: f32 = 1e-3;

pub struct Report {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` per input.
    pub rel_errors: Vec<f64>,
}

impl Report {
    pub fn worst(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

fn project(out: &Tensor, weights: &[f32]) -> f64 {
    out.data().iter().zip(weights).map(|(&o, &w)| o as f64 * w as f64).sum()
}

/// Checks every input marked `requires_grad` against central differences.
pub fn check<F>(inputs: &[Tensor], seed: u64, build: F) -> Report
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let forward = |vals: &[Tensor]| -> Tensor {
        let g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&g, &vars);
        let v = out.value();
        (*v).clone()
    };
    let probe = forward(inputs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let weights = Tensor::randn(probe.shape(), 1.0, &mut rng).into_data();

    // Analytic.
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&g, &vars);
    let w = g.constant(Tensor::new(&out.shape(), weights.clone()).unwrap());
    let loss = out.mul(w).unwrap().sum().unwrap();
    let grads = g.backward(loss).unwrap();

    let mut rel_errors = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        if !t.requires_grad {
            continue;
        }
        let analytic: Vec<f64> = match grads.get(vars[i]) {
            Some(gr) => gr.iter().map(|&v| v as f64).collect(),
            None => vec![0.0; t.numel()],
        };
        let mut numeric = vec![0.0f64; t.numel()];
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let hp = (plus[i].data()[j] - t.data()[j]) as f64;
            let hm = (t.data()[j] - minus[i].data()[j]) as f64;
            numeric[j] = (project(&forward(&plus), &weights) - project(&forward(&minus), &weights)) / (hp + hm);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn).max(1e-6);
        rel_errors.push(diff / denom);
    }
    Report { rel_errors }
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng).with_grad()
}
