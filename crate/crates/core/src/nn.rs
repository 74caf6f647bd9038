//! Parameter storage, the handful of layers the models use, and Adam.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

pub type ParamId = usize;

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor by the same-named one from `records`.
    pub fn load_from<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<&'a Tensor>) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = lookup(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: stored shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Puts every parameter on `graph`. With `trainable == false` they are
    /// constants and no gradient bookkeeping happens.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Bound<'g> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    graph.param(t)
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

/// Parameters placed on a graph for one forward pass.
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn get(&self, id: ParamId) -> Var<'g> {
        self.vars[id]
    }

    /// Adds this pass's gradients into the store's `grad` fields.
    pub fn accumulate(&self, grads: &Gradients, store: &mut ParamStore) {
        for (id, var) in self.vars.iter().enumerate() {
            grads.accumulate_into(*var, store.get_mut(id));
        }
    }
}

/// Builds one graph per item, backpropagates `loss` and adds every
/// parameter gradient into `store`. Items may run on worker threads but
/// gradients are summed in item order, so the result does not depend on the
/// thread count. Returns the per-item side values in order.
pub fn batch_gradients<T, S>(
    store: &mut ParamStore,
    items: &[T],
    loss: impl for<'g> Fn(&'g Graph, &Bound<'g>, &T) -> Result<(Var<'g>, S)> + Sync,
) -> Result<Vec<S>>
where
    T: Sync,
    S: Send,
{
    let shared = &*store;
    let results: Vec<Result<(Vec<Option<Vec<f32>>>, S)>> = items
        .par_iter()
        .map(|item| {
            let g = Graph::new();
            let p = shared.bind(&g, true);
            let (l, side) = loss(&g, &p, item)?;
            let grads = g.backward(l)?;
            Ok((p.vars.iter().map(|&v| grads.get(v).map(<[f32]>::to_vec)).collect(), side))
        })
        .collect();
    let mut sides = Vec::with_capacity(items.len());
    for r in results {
        let (grads, side) = r?;
        for (t, g) in store.tensors.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => t.grad = Some(g),
            }
        }
        sides.push(side);
    }
    Ok(sides)
}

/// Dense layer `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let std = 1.0 / (fan_in as f32).sqrt();
        Linear {
            w: store.add(format!("{name}.weight"), Tensor::randn(&[fan_in, fan_out], std, rng)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn zero_init(&self, store: &mut ParamStore) {
        store.get_mut(self.w).data_mut().fill(0.0);
        store.get_mut(self.b).data_mut().fill(0.0);
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.matmul(p.get(self.w))?.add_row(p.get(self.b))
    }
}

/// 3×3 same-padding convolution.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let std = (2.0 / (cin * 9) as f32).sqrt();
        Conv {
            kernel: store.add(format!("{name}.weight"), Tensor::randn(&[cout, cin, 3, 3], std, rng)),
            bias: Some(store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))),
        }
    }

    /// Bias-free conv initialized to the identity (delta kernel) plus noise.
    pub fn near_identity<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, noise: f32, rng: &mut R) -> Self {
        let mut k = Tensor::randn(&[channels, channels, 3, 3], noise, rng);
        for c in 0..channels {
            k.data_mut()[(c * channels + c) * 9 + 4] += 1.0;
        }
        Conv {
            kernel: store.add(format!("{name}.weight"), k),
            bias: None,
        }
    }

    pub fn zero_init(&self, store: &mut ParamStore) {
        store.get_mut(self.kernel).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.conv3x3(p.get(self.kernel), self.bias.map(|b| p.get(b)))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta), 1e-5)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub clip_norm: Option<f32>,
    /// Decoupled weight decay, applied as `p -= lr * wd * p`.
    #[serde(default)]
    pub weight_decay: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter in store order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies accumulated gradients (scaled by `grad_scale`) and clears them.
    /// Parameters without a gradient are left untouched. Returns the
    /// pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grad_scale: f32) -> f32 {
        self.t += 1;
        let c = self.config;
        let norm = store
            .tensors
            .iter()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|g| ((g * grad_scale) as f64).powi(2))
            .sum::<f64>()
            .sqrt() as f32;
        let clip = match c.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, t) in store.tensors.iter_mut().enumerate() {
            let Some(g) = t.grad.take() else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let gj = g[j] * grad_scale * clip;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *p -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *p);
            }
        }
        norm
    }

    /// Moments flattened for checkpointing: `(step, m, v)`.
    pub fn state(&self) -> (u64, &[Vec<f32>], &[Vec<f32>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Result<()> {
        let ok = m.len() == self.m.len()
            && v.len() == self.v.len()
            && m.iter().zip(&self.m).all(|(a, b)| a.len() == b.len())
            && v.iter().zip(&self.v).all(|(a, b)| a.len() == b.len());
        if !ok {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &store);
        for _ in 0..300 {
            let g = Graph::new();
            let p = store.bind(&g, true);
            let loss = p.get(x).mul(p.get(x)).unwrap().sum().unwrap();
            let grads = g.backward(loss).unwrap();
            p.accumulate(&grads, &mut store);
            opt.step(&mut store, 1.0);
        }
        assert!(store.get(x).norm() < 1e-2, "{:?}", store.get(x).data());
    }

    #[test]
    fn weight_decay_shrinks_without_gradient_signal() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(&[2], vec![2.0, -4.0]).unwrap());
        let cfg = AdamConfig {
            weight_decay: 0.5,
            ..AdamConfig::with_lr(0.1)
        };
        let mut opt = Adam::new(cfg, &store);
        let g = Graph::new();
        let p = store.bind(&g, true);
        let loss = p.get(x).scale(0.0).unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        p.accumulate(&grads, &mut store);
        opt.step(&mut store, 1.0);
        let got = store.get(x).data().to_vec();
        assert!((got[0] - 1.9).abs() < 1e-6 && (got[1] + 3.8).abs() < 1e-6, "{got:?}");
    }

    #[test]
    fn near_identity_conv_is_close_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let conv = Conv::near_identity(&mut store, "theta", 4, 0.0, &mut rng);
        let x = Tensor::randn(&[4, 3, 5], 1.0, &mut rng);
        let g = Graph::new();
        let p = store.bind(&g, false);
        let y = conv.forward(&p, g.constant(x.clone())).unwrap();
        assert_eq!(y.value().data(), x.data());
    }

    #[test]
    fn frozen_binding_produces_no_gradients() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(&[3], 2.0));
        let g = Graph::new();
        let p = store.bind(&g, false);
        let loss = p.get(a).sum().unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(p.get(a)).is_none());
    }
}
