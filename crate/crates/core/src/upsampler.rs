//! Scale-aware U-Net `U(f̂_k, c, k)` predicting the final depth latent from a
//! partial one, and its training loop.
//!
//! The network sees the partial latent and the condition latent stacked on
//! the channel axis, runs three resolution levels (latent, half, 2×2) with
//! skip connections, and adds a learned embedding of `k` at the bottleneck.
//! Its output is a correction added to the partial latent.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{batch_gradients, Adam, AdamConfig, Bound, Conv, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::{TokenMap, Tokenizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpsamplerConfig {
    /// Latent channels `C` of both inputs.
    pub channels: usize,
    /// Number of scales `K`.
    pub scales: usize,
    /// Widths of the three levels.
    pub widths: [usize; 3],
}

impl UpsamplerConfig {
    pub fn new(channels: usize, scales: usize) -> Self {
        UpsamplerConfig {
            channels,
            scales,
            widths: [32, 64, 128],
        }
    }
}

#[derive(Clone, Debug)]
struct Layers {
    in0: Conv,
    in1: Conv,
    mid0: Conv,
    mid1: Conv,
    bot0: Conv,
    bot1: Conv,
    scale_emb: ParamId,
    up_mid: Conv,
    up_top: Conv,
    out: Conv,
}

#[derive(Clone, Debug)]
pub struct Upsampler {
    pub config: UpsamplerConfig,
    pub params: ParamStore,
    layers: Layers,
}

impl Upsampler {
    pub fn new<R: Rng + ?Sized>(config: UpsamplerConfig, rng: &mut R) -> Result<Self> {
        let c = config.channels;
        let [w1, w2, w3] = config.widths;
        if [c, w1, w2, w3, config.scales].contains(&0) {
            return Err(Error::Config("upsampler channels, widths and scales must be positive".into()));
        }
        let mut s = ParamStore::new();
        let layers = Layers {
            in0: Conv::new(&mut s, "in.0", 2 * c, w1, rng),
            in1: Conv::new(&mut s, "in.1", w1, w1, rng),
            mid0: Conv::new(&mut s, "mid.0", w1, w2, rng),
            mid1: Conv::new(&mut s, "mid.1", w2, w2, rng),
            bot0: Conv::new(&mut s, "bot.0", w2, w3, rng),
            bot1: Conv::new(&mut s, "bot.1", w3, w3, rng),
            scale_emb: s.add("scale_emb", Tensor::randn(&[config.scales, w3], 0.1, rng)),
            up_mid: Conv::new(&mut s, "up.mid", w3 + w2, w2, rng),
            up_top: Conv::new(&mut s, "up.top", w2 + w1, w1, rng),
            out: Conv::new(&mut s, "out", w1, c, rng),
        };
        let mut u = Upsampler {
            config,
            params: s,
            layers,
        };
        u.zero_output();
        Ok(u)
    }

    /// Zeroes the final conv, making the network the identity on the
    /// partial latent.
    pub fn zero_output(&mut self) {
        self.layers.out.zero_init(&mut self.params);
    }

    fn check(&self, partial: &[usize], cond: &[usize], k: usize) -> Result<()> {
        if partial.len() != 3 || partial[0] != self.config.channels {
            return Err(Error::shape("upsample_predict", partial, &[self.config.channels, 0, 0]));
        }
        if cond != partial {
            return Err(Error::shape("upsample_predict", partial, cond));
        }
        if k == 0 || k > self.config.scales {
            return Err(Error::Range {
                what: "scale index",
                value: k as i64,
                lo: 1,
                hi: self.config.scales as i64,
            });
        }
        Ok(())
    }

    pub fn forward_var<'g>(&self, p: &Bound<'g>, partial: Var<'g>, cond: Var<'g>, k: usize) -> Result<Var<'g>> {
        let shape = partial.shape();
        self.check(&shape, &cond.shape(), k)?;
        let (h, w) = (shape[1], shape[2]);
        let (mh, mw) = (h.div_ceil(2), w.div_ceil(2));
        let (bh, bw) = (mh.div_ceil(2), mw.div_ceil(2));
        let g = partial.graph();
        let l = &self.layers;
        let x = g.concat(&[partial, cond])?;
        let top = l.in1.forward(p, l.in0.forward(p, x)?.gelu()?)?.gelu()?;
        let mid = l.mid0.forward(p, top.resize_area(mh, mw)?)?.gelu()?;
        let mid = l.mid1.forward(p, mid)?.gelu()?;
        let emb = p.get(l.scale_emb).rows(k - 1, k)?.reshape(&[self.config.widths[2]])?;
        let bot = l.bot0.forward(p, mid.resize_area(bh, bw)?)?.gelu()?.add_channel(emb)?;
        let bot = l.bot1.forward(p, bot)?.gelu()?;
        let up = g.concat(&[bot.resize_bilinear(mh, mw)?, mid])?;
        let up = l.up_mid.forward(p, up)?.gelu()?;
        let up = g.concat(&[up.resize_bilinear(h, w)?, top])?;
        let up = l.up_top.forward(p, up)?.gelu()?;
        partial.add(l.out.forward(p, up)?)
    }

    /// Prediction of the final latent from the partial latent after `k - 1`
    /// stages and the condition latent.
    pub fn upsample_predict(&self, partial: &Tensor, cond: &Tensor, k: usize) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let out = self.forward_var(&p, g.constant(partial.clone()), g.constant(cond.clone()), k)?;
        Ok((*out.value()).clone())
    }

    pub fn loss_var<'g>(
        &self,
        p: &Bound<'g>,
        partial: Var<'g>,
        cond: Var<'g>,
        k: usize,
        target: Var<'g>,
    ) -> Result<Var<'g>> {
        self.forward_var(p, partial, cond, k)?.mse(target)
    }

    /// Mean squared error of the prediction against `target`.
    pub fn upsampler_loss(&self, partial: &Tensor, cond: &Tensor, k: usize, target: &Tensor) -> Result<f32> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let loss = self.loss_var(
            &p,
            g.constant(partial.clone()),
            g.constant(cond.clone()),
            k,
            g.constant(target.clone()),
        )?;
        Ok(loss.value().item())
    }
}

/// Re-encoding `E_k` of a full-resolution latent: the cumulative
/// approximation on the scale-`k` grid and the scale-`k` token map.
pub fn reencode(tokenizer: &Tokenizer, f: &Tensor, k: usize) -> Result<(Tensor, TokenMap)> {
    let (hk, wk) = tokenizer.schedule().get(k)?;
    let (acc, mut tokens) = tokenizer.cumulative(f, k)?;
    let r = tokens.pop().expect("k >= 1 stages");
    Ok((acc.cell_mean(hk, wk)?, r))
}

/// Ground-truth depth latent with the RGB image it was rendered with.
#[derive(Clone, Debug, PartialEq)]
pub struct UpsamplerSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub rgb: Tensor,
    /// `E_depth(d)`.
    pub depth_latent: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpsamplerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Probability that a sample is CutMixed with another one.
    pub cutmix: f32,
    /// Maximum relative per-channel gain change of the RGB input.
    pub color_jitter: f32,
    pub seed: u64,
}

impl Default for UpsamplerTrainConfig {
    fn default() -> Self {
        UpsamplerTrainConfig {
            epochs: 40,
            batch_size: 8,
            lr: 1e-4,
            cutmix: 0.5,
            color_jitter: 0.1,
            seed: 0,
        }
    }
}

/// RGB in `[0, 1]` to the `[-1, 1]` range the condition encoder expects.
pub fn rgb_input(rgb: &Tensor) -> Tensor {
    rgb.map(|v| 2.0 * v - 1.0)
}

fn jitter<R: Rng>(rgb: &Tensor, amount: f32, rng: &mut R) -> Tensor {
    if amount <= 0.0 {
        return rgb.clone();
    }
    let n = rgb.numel() / 3;
    let gains: Vec<f32> = (0..3).map(|_| 1.0 + rng.random_range(-amount..=amount)).collect();
    let shift = rng.random_range(-amount..=amount) * 0.5;
    let mut out = rgb.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = (*v * gains[i / n] + shift).clamp(0.0, 1.0);
    }
    out
}

/// Copies the rectangle `rows × cols` of `src` into `dst` on every channel.
fn paste(dst: &mut Tensor, src: &Tensor, rows: (usize, usize), cols: (usize, usize)) {
    let (h, w) = (dst.shape()[1], dst.shape()[2]);
    let c = dst.shape()[0];
    for ch in 0..c {
        for y in rows.0..rows.1 {
            for x in cols.0..cols.1 {
                let i = ch * h * w + y * w + x;
                dst.data_mut()[i] = src.data()[i];
            }
        }
    }
}

/// One training example after augmentation.
struct Prepared {
    partial: Tensor,
    cond: Tensor,
    target: Tensor,
    k: usize,
}

/// Resumable upsampler trainer.
#[derive(Clone, Debug)]
pub struct UpsamplerTrainer {
    pub config: UpsamplerTrainConfig,
    pub(crate) adam: Adam,
    pub epochs_done: usize,
}

/// Trains a fresh upsampler against frozen tokenizers.
pub fn train_upsampler(
    data: &[UpsamplerSample],
    depth_tok: &Tokenizer,
    rgb_tok: &Tokenizer,
    config: UpsamplerConfig,
    train: &UpsamplerTrainConfig,
) -> Result<(Upsampler, Vec<(u64, f32)>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut up = Upsampler::new(config, &mut rng)?;
    let log = UpsamplerTrainer::new(&up, train.clone()).run(&mut up, data, depth_tok, rgb_tok, |_, _| {})?;
    Ok((up, log))
}

impl UpsamplerTrainer {
    pub fn new(up: &Upsampler, config: UpsamplerTrainConfig) -> Self {
        UpsamplerTrainer {
            adam: Adam::new(AdamConfig::with_lr(config.lr), &up.params),
            config,
            epochs_done: 0,
        }
    }

    /// Runs the remaining epochs; `on_step(step, loss)` sees every batch.
    pub fn run(
        &mut self,
        up: &mut Upsampler,
        data: &[UpsamplerSample],
        depth_tok: &Tokenizer,
        rgb_tok: &Tokenizer,
        on_step: impl FnMut(u64, f32),
    ) -> Result<Vec<(u64, f32)>> {
        self.run_until(up, data, depth_tok, rgb_tok, self.config.epochs, on_step)
    }

    /// Trains until `epochs_done` reaches `until` (capped at the configured count).
    pub fn run_until(
        &mut self,
        up: &mut Upsampler,
        data: &[UpsamplerSample],
        depth_tok: &Tokenizer,
        rgb_tok: &Tokenizer,
        until: usize,
        mut on_step: impl FnMut(u64, f32),
    ) -> Result<Vec<(u64, f32)>> {
        if data.is_empty() {
            return Err(Error::Config("upsampler training set is empty".into()));
        }
        if self.config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let k_max = depth_tok.schedule().len();
        if k_max != up.config.scales {
            return Err(Error::Compatibility {
                fields: vec!["K".into()],
            });
        }
        let mut log = Vec::new();
        while self.epochs_done < until.min(self.config.epochs) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(self.epochs_done as u64 + 1);
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            for batch in order.chunks(self.config.batch_size) {
                let mut items = Vec::with_capacity(batch.len());
                for &i in batch {
                    items.push(self.prepare(data, i, depth_tok, rgb_tok, k_max, &mut rng)?);
                }
                let mut store = std::mem::take(&mut up.params);
                let model = &*up;
                let losses = batch_gradients(&mut store, &items, |g, p, s: &Prepared| {
                    let loss = model.loss_var(
                        p,
                        g.constant(s.partial.clone()),
                        g.constant(s.cond.clone()),
                        s.k,
                        g.constant(s.target.clone()),
                    )?;
                    let v = loss.value().item();
                    Ok((loss, v))
                });
                up.params = store;
                let losses = losses?;
                self.adam.step(&mut up.params, 1.0 / items.len() as f32);
                let loss = losses.iter().sum::<f32>() / losses.len() as f32;
                on_step(self.adam.steps(), loss);
                log.push((self.adam.steps(), loss));
            }
            self.epochs_done += 1;
        }
        Ok(log)
    }

    fn prepare(
        &self,
        data: &[UpsamplerSample],
        i: usize,
        depth_tok: &Tokenizer,
        rgb_tok: &Tokenizer,
        k_max: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Prepared> {
        let k = rng.random_range(1..=k_max);
        let s = &data[i];
        let mut cond = rgb_tok.encode_image(&rgb_input(&jitter(&s.rgb, self.config.color_jitter, rng)))?;
        let mut target = s.depth_latent.clone();
        if data.len() > 1 && rng.random::<f32>() < self.config.cutmix {
            let j = (i + rng.random_range(1..data.len())) % data.len();
            let other = &data[j];
            let other_cond = rgb_tok.encode_image(&rgb_input(&jitter(&other.rgb, self.config.color_jitter, rng)))?;
            let (h, w) = (target.shape()[1], target.shape()[2]);
            let (rh, rw) = (rng.random_range(1..=h.div_ceil(2)), rng.random_range(1..=w.div_ceil(2)));
            let (y0, x0) = (rng.random_range(0..=h - rh), rng.random_range(0..=w - rw));
            paste(&mut cond, &other_cond, (y0, y0 + rh), (x0, x0 + rw));
            paste(&mut target, &other.depth_latent, (y0, y0 + rh), (x0, x0 + rw));
        }
        let (partial, _) = depth_tok.cumulative(&target, k - 1)?;
        Ok(Prepared {
            partial,
            cond,
            target,
            k,
        })
    }
}
