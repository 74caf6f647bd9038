use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Context, Prior, PriorConfig};
use crate::error::{Error, Result};
use crate::nn::{batch_gradients, Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::tokenizer::TokenMap;

/// Depth tokens of one image with the condition latent of its RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorSample {
    pub tokens: Vec<TokenMap>,
    pub cond: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorTrainConfig {
    /// Epochs over the first-phase set before switching to the second.
    pub phase_a_epochs: usize,
    pub phase_b_epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub clip_norm: Option<f32>,
    /// Probability of replacing the condition by the null token.
    pub cond_dropout: f32,
    pub seed: u64,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        PriorTrainConfig {
            phase_a_epochs: 10,
            phase_b_epochs: 20,
            batch_size: 8,
            lr: 5e-4,
            clip_norm: Some(1.0),
            cond_dropout: 0.1,
            seed: 0,
        }
    }
}

impl PriorTrainConfig {
    pub fn epochs(&self) -> usize {
        self.phase_a_epochs + self.phase_b_epochs
    }
}

/// Mean loss of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    /// 0 for the first phase, 1 for the second.
    pub phase: usize,
    pub loss: f32,
}

/// Trains a fresh prior: `phase_a` for the first epochs, then `phase_b`.
pub fn train_prior(
    phase_a: &[PriorSample],
    phase_b: &[PriorSample],
    config: PriorConfig,
    train: &PriorTrainConfig,
) -> Result<(Prior, Vec<LossRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut prior = Prior::new(config, &mut rng)?;
    let log = PriorTrainer::new(&prior, train.clone()).run(&mut prior, phase_a, phase_b, |_| {})?;
    Ok((prior, log))
}

/// Resumable two-phase teacher-forcing trainer.
#[derive(Clone, Debug)]
pub struct PriorTrainer {
    pub config: PriorTrainConfig,
    pub(crate) adam: Adam,
    pub epochs_done: usize,
}

impl PriorTrainer {
    pub fn new(prior: &Prior, config: PriorTrainConfig) -> Self {
        let adam = Adam::new(
            AdamConfig {
                clip_norm: config.clip_norm,
                ..AdamConfig::with_lr(config.lr)
            },
            &prior.params,
        );
        PriorTrainer {
            config,
            adam,
            epochs_done: 0,
        }
    }

    pub fn run(
        &mut self,
        prior: &mut Prior,
        phase_a: &[PriorSample],
        phase_b: &[PriorSample],
        on_step: impl FnMut(&LossRecord),
    ) -> Result<Vec<LossRecord>> {
        self.run_until(prior, phase_a, phase_b, self.config.epochs(), on_step)
    }

    /// Trains until `epochs_done` reaches `until` (capped at the configured count).
    pub fn run_until(
        &mut self,
        prior: &mut Prior,
        phase_a: &[PriorSample],
        phase_b: &[PriorSample],
        until: usize,
        mut on_step: impl FnMut(&LossRecord),
    ) -> Result<Vec<LossRecord>> {
        let c = &self.config;
        if c.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&c.cond_dropout) {
            return Err(Error::Config(format!("cond_dropout {} outside [0, 1]", c.cond_dropout)));
        }
        if (c.phase_a_epochs > 0 && phase_a.is_empty()) || (c.phase_b_epochs > 0 && phase_b.is_empty()) {
            return Err(Error::Config("prior training set is empty".into()));
        }
        let mut log = Vec::new();
        while self.epochs_done < until.min(self.config.epochs()) {
            let epoch = self.epochs_done;
            let phase = usize::from(epoch >= self.config.phase_a_epochs);
            let data = if phase == 0 { phase_a } else { phase_b };
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(epoch as u64 + 1);
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            for batch in order.chunks(self.config.batch_size) {
                let items: Vec<(usize, bool)> = batch
                    .iter()
                    .map(|&i| (i, rng.random::<f32>() < self.config.cond_dropout))
                    .collect();
                let loss = self.step(prior, data, &items)?;
                let record = LossRecord {
                    step: self.adam.steps(),
                    epoch: epoch + 1,
                    phase,
                    loss,
                };
                on_step(&record);
                log.push(record);
            }
            self.epochs_done += 1;
        }
        Ok(log)
    }

    fn step(&mut self, prior: &mut Prior, data: &[PriorSample], items: &[(usize, bool)]) -> Result<f32> {
        let mut store = std::mem::take(&mut prior.params);
        let model = &*prior;
        let result = batch_gradients(&mut store, items, |g, p, &(i, drop)| {
            let s = &data[i];
            let ctx = if drop {
                Context::Null
            } else {
                let shape = s.cond.shape();
                let tokens = model.project_var(p, g.constant(s.cond.clone()))?;
                Context::Tokens {
                    tokens,
                    height: shape[1],
                    width: shape[2],
                }
            };
            let loss = model.loss_var(p, &s.tokens, ctx)?;
            let value = loss.value().item();
            Ok((loss, value))
        });
        prior.params = store;
        let losses = result?;
        self.adam.step(&mut prior.params, 1.0 / items.len() as f32);
        Ok(losses.iter().sum::<f32>() / losses.len() as f32)
    }
}
