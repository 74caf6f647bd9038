use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lookup, quantize, Tokenizer, TokenizerConfig};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Weight of `‖f − sg(f̂)‖²`.
    pub commitment: f32,
    pub ema_decay: f32,
    /// Reset codes unused for a whole epoch to a recent quantizer input.
    pub reseed_dead_codes: bool,
    /// Decoupled weight decay on encoder, decoder and θ. Long single-sample
    /// runs need it: nothing else pins the latent scale.
    pub weight_decay: f32,
    /// Cosine-anneal the learning rate down to this value over `epochs`.
    pub lr_min: Option<f32>,
    pub seed: u64,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        TokenizerTrainConfig {
            epochs: 20,
            batch_size: 8,
            lr: 2e-3,
            commitment: 0.25,
            ema_decay: 0.99,
            reseed_dead_codes: true,
            weight_decay: 0.0,
            lr_min: None,
            seed: 0,
        }
    }
}

/// One line of the training log. Epoch 0 is measured before any update.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f32,
    /// Mean reconstruction MSE of the clamped `D(f̂)` against the input.
    pub mse: f32,
    /// Entropy (nats) of the code assignment histogram over the epoch.
    pub usage_entropy: f32,
    pub reseeded: usize,
}

/// Exponential-moving-average codebook state.
#[derive(Clone, Debug)]
pub(crate) struct Ema {
    pub(crate) counts: Vec<f32>,
    pub(crate) sums: Vec<f32>,
}

impl Ema {
    fn new(tok: &Tokenizer) -> Self {
        Ema {
            counts: vec![1.0; tok.codebook.vocab()],
            sums: tok.codebook.entries().data().to_vec(),
        }
    }
}

/// Running totals over a batch or an epoch.
struct Tally {
    counts: Vec<u64>,
    sums: Vec<f64>,
    loss: f64,
    mse: f64,
    samples: usize,
}

impl Tally {
    fn new(v: usize, c: usize) -> Self {
        Tally {
            counts: vec![0; v],
            sums: vec![0.0; v * c],
            loss: 0.0,
            mse: 0.0,
            samples: 0,
        }
    }
}

/// Uniform sample of quantizer inputs seen during an epoch.
struct Reservoir {
    items: Vec<Vec<f32>>,
    seen: usize,
    cap: usize,
}

impl Reservoir {
    fn offer<R: Rng>(&mut self, x: &[f32], rng: &mut R) {
        self.seen += 1;
        if self.items.len() < self.cap {
            self.items.push(x.to_vec());
        } else {
            let j = rng.random_range(0..self.seen);
            if j < self.cap {
                self.items[j] = x.to_vec();
            }
        }
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn entropy(counts: &[u64]) -> f32 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            p * p.ln()
        })
        .sum::<f64>() as f32
}

/// Trains a fresh tokenizer on `data` (images in `[-1, 1]`).
pub fn train_tokenizer(
    data: &[Tensor],
    config: TokenizerConfig,
    train: &TokenizerTrainConfig,
) -> Result<(Tokenizer, Vec<EpochStats>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut tok = Tokenizer::new(config, &mut rng)?;
    let log = TokenizerTrainer::new(&tok, train.clone()).run(&mut tok, data, |_| {})?;
    Ok((tok, log))
}

/// Resumable training state: optimizer moments, codebook averages and the
/// number of finished epochs.
#[derive(Clone, Debug)]
pub struct TokenizerTrainer {
    pub config: TokenizerTrainConfig,
    pub(crate) adam: Adam,
    pub(crate) ema: Ema,
    pub epochs_done: usize,
}

impl TokenizerTrainer {
    pub fn new(tok: &Tokenizer, config: TokenizerTrainConfig) -> Self {
        TokenizerTrainer {
            adam: Adam::new(
                AdamConfig {
                    weight_decay: config.weight_decay,
                    ..AdamConfig::with_lr(config.lr)
                },
                &tok.params,
            ),
            ema: Ema::new(tok),
            epochs_done: 0,
            config,
        }
    }

    /// Runs the remaining epochs, calling `on_epoch` after each (including the
    /// initial measurement when starting from scratch).
    pub fn run(&mut self, tok: &mut Tokenizer, data: &[Tensor], on_epoch: impl FnMut(&EpochStats)) -> Result<Vec<EpochStats>> {
        self.run_until(tok, data, self.config.epochs, on_epoch)
    }

    /// Trains until `epochs_done` reaches `until` (capped at the configured count).
    pub fn run_until(
        &mut self,
        tok: &mut Tokenizer,
        data: &[Tensor],
        until: usize,
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<Vec<EpochStats>> {
        if data.is_empty() {
            return Err(Error::Config("tokenizer training set is empty".into()));
        }
        if self.config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let mut log = Vec::new();
        if self.epochs_done == 0 {
            let stats = self.epoch(tok, data, 0, false)?;
            on_epoch(&stats);
            log.push(stats);
        }
        while self.epochs_done < until.min(self.config.epochs) {
            let stats = self.epoch(tok, data, self.epochs_done + 1, true)?;
            self.epochs_done += 1;
            on_epoch(&stats);
            log.push(stats);
        }
        Ok(log)
    }

    fn epoch(&mut self, tok: &mut Tokenizer, data: &[Tensor], epoch: usize, update: bool) -> Result<EpochStats> {
        let (v, c) = (tok.codebook.vocab(), tok.codebook.dim());
        if let Some(lo) = self.config.lr_min {
            let t = epoch.saturating_sub(1) as f32 / self.config.epochs.saturating_sub(1).max(1) as f32;
            let hi = self.config.lr;
            self.adam.config.lr = lo + 0.5 * (hi - lo) * (1.0 + (std::f32::consts::PI * t).cos());
        }
        let mut rng = epoch_rng(self.config.seed, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_tally = Tally::new(v, c);
        let mut reservoir = Reservoir {
            items: Vec::new(),
            seen: 0,
            cap: 4096,
        };
        for batch in order.chunks(self.config.batch_size) {
            let mut tally = Tally::new(v, c);
            for &i in batch {
                self.sample(tok, &data[i], update, &mut tally, &mut reservoir, &mut rng)?;
            }
            if update {
                self.adam.step(&mut tok.params, 1.0 / batch.len() as f32);
                self.ema_update(tok, &tally);
            }
            epoch_tally.loss += tally.loss;
            epoch_tally.mse += tally.mse;
            epoch_tally.samples += tally.samples;
            epoch_tally.counts.iter_mut().zip(&tally.counts).for_each(|(a, b)| *a += b);
        }
        if update {
            tok.codebook.add_usage(&epoch_tally.counts);
        }
        let mut reseeded = 0;
        if self.config.reseed_dead_codes && !reservoir.items.is_empty() {
            for code in 1..v {
                if epoch_tally.counts[code] == 0 {
                    let pick = &reservoir.items[rng.random_range(0..reservoir.items.len())];
                    tok.codebook.set_row(code, pick);
                    self.ema.counts[code] = 1.0;
                    self.ema.sums[code * c..(code + 1) * c].copy_from_slice(pick);
                    reseeded += 1;
                }
            }
        }
        let n = epoch_tally.samples as f64;
        Ok(EpochStats {
            epoch,
            loss: (epoch_tally.loss / n) as f32,
            mse: (epoch_tally.mse / n) as f32,
            usage_entropy: entropy(&epoch_tally.counts),
            reseeded,
        })
    }

    fn sample(
        &self,
        tok: &mut Tokenizer,
        x: &Tensor,
        update: bool,
        tally: &mut Tally,
        reservoir: &mut Reservoir,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let g = Graph::new();
        let p = tok.params.bind(&g, update);
        let f = tok.encode_var(&p, g.constant(x.clone()))?;
        let fval = f.value();
        let (lh, lw) = tok.schedule().latent();
        let c = tok.codebook.dim();

        let mut residual = (*fval).clone();
        let mut fhat = None;
        for k in 1..=tok.schedule().len() {
            let (hk, wk) = tok.schedule().get(k)?;
            let down = residual.cell_mean(hk, wk)?;
            let r = quantize(&down, &tok.codebook, k)?;
            let n = hk * wk;
            let mut vec = vec![0.0f32; c];
            for (pos, &code) in r.indices().iter().enumerate() {
                for (ch, slot) in vec.iter_mut().enumerate() {
                    *slot = down.data()[ch * n + pos];
                }
                tally.counts[code] += 1;
                for (ch, &val) in vec.iter().enumerate() {
                    tally.sums[code * c + ch] += val as f64;
                }
                reservoir.offer(&vec, rng);
            }
            let up = lookup(&r, &tok.codebook)?.expand_cells(lh, lw)?;
            let t = tok.theta_var(&p, k, g.constant(up))?;
            residual = residual.sub(&t.value())?;
            fhat = Some(match fhat {
                None => t,
                Some(acc) => t.add(acc)?,
            });
        }
        let fhat = fhat.expect("at least one scale");
        // Straight-through: forward value f̂, gradient passed to f unchanged.
        let st = fhat.add(f.sub(g.constant((*fval).clone()))?)?;
        let y = tok.decode_var(&p, st)?;
        let rec = y.mse(g.constant(x.clone()))?;
        let commit = f.mse(g.constant((*fhat.value()).clone()))?.scale(self.config.commitment)?;
        let loss = rec.add(commit)?;
        tally.loss += loss.value().item() as f64;
        let yv = y.value();
        let clamped: f64 = yv
            .data()
            .iter()
            .zip(x.data())
            .map(|(&a, &b)| (a.clamp(-1.0, 1.0) as f64 - b as f64).powi(2))
            .sum();
        tally.mse += clamped / x.numel() as f64;
        tally.samples += 1;
        if update {
            let grads = g.backward(loss)?;
            p.accumulate(&grads, &mut tok.params);
        }
        Ok(())
    }

    fn ema_update(&mut self, tok: &mut Tokenizer, tally: &Tally) {
        let d = self.config.ema_decay;
        let c = tok.codebook.dim();
        for code in 1..tok.codebook.vocab() {
            let n = &mut self.ema.counts[code];
            *n = d * *n + (1.0 - d) * tally.counts[code] as f32;
            let sums = &mut self.ema.sums[code * c..(code + 1) * c];
            for (ch, s) in sums.iter_mut().enumerate() {
                *s = d * *s + (1.0 - d) * tally.sums[code * c + ch] as f32;
            }
            if *n > 1e-6 {
                let row: Vec<f32> = sums.iter().map(|s| s / *n).collect();
                tok.codebook.set_row(code, &row);
            }
        }
    }
}
