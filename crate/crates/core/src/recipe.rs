//! The full training recipe on in-memory samples: both tokenizers, the
//! two-phase prior and the upsampler, then evaluation of the sampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::Result;
use crate::eval::{evaluate, AlignMode, EvalReport, EvalTarget, Prediction};
use crate::prior::{LossRecord, Prior, PriorSample, PriorTrainer};
use crate::sampler::{GuidanceConfig, Pipeline};
use crate::synth::{build_splits, generate_scene, normalize_depth, DepthSample, SceneFamily};
use crate::tensor::Tensor;
use crate::tokenizer::{EpochStats, Tokenizer, TokenizerTrainer};
use crate::upsampler::{rgb_input, Upsampler, UpsamplerSample, UpsamplerTrainer};

/// A rendered sample with its normalized depth image `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub sample: DepthSample,
    pub family: SceneFamily,
    pub depth_image: Tensor,
}

/// Renders and normalizes the samples for `seeds`, assigning families by
/// position as [`crate::config::DataSection::scene`] does.
pub fn prepare(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<Prepared>> {
    seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            let scene = cfg.data.scene(i);
            let sample = generate_scene(seed, &scene)?;
            prepare_sample(cfg, sample, scene.family)
        })
        .collect()
}

pub fn prepare_sample(cfg: &RunConfig, sample: DepthSample, family: SceneFamily) -> Result<Prepared> {
    let (norm, _) = normalize_depth(&sample.depth, &sample.valid, &cfg.data.normalization)?;
    let (h, w) = (sample.height(), sample.width());
    Ok(Prepared {
        depth_image: norm.reshape(&[1, h, w])?,
        family,
        sample,
    })
}

/// The train/val/test samples described by the data section.
pub fn synthetic_splits(cfg: &RunConfig) -> Result<[Vec<Prepared>; 3]> {
    let d = &cfg.data;
    let s = build_splits(d.n_train, d.n_val, d.n_test, d.base_seed);
    Ok([prepare(cfg, &s.train)?, prepare(cfg, &s.val)?, prepare(cfg, &s.test)?])
}

/// Seed of one component, derived from the run seed.
pub fn component_seed(run_seed: u64, component: u64) -> u64 {
    run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ component
}

pub struct Models {
    pub depth: Tokenizer,
    pub rgb: Tokenizer,
    pub prior: Prior,
    pub upsampler: Upsampler,
}

impl Models {
    pub fn pipeline(&self) -> Result<Pipeline<'_>> {
        Pipeline::new(&self.depth, &self.rgb, &self.prior, &self.upsampler)
    }
}

/// Progress callbacks of [`train_all`].
pub enum Progress<'a> {
    Tokenizer { which: &'static str, stats: &'a EpochStats },
    Prior(&'a LossRecord),
    Upsampler { step: u64, loss: f32 },
}

/// Trains a tokenizer for images `x_i` (already in `[-1, 1]`).
pub fn train_tokenizer_on(
    cfg: &RunConfig,
    rgb: bool,
    images: &[Tensor],
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Tokenizer> {
    let (tcfg, component) = if rgb {
        (cfg.rgb_tokenizer(), 2)
    } else {
        (cfg.depth_tokenizer(), 1)
    };
    let mut train = cfg.train.tokenizer.clone();
    train.seed = component_seed(cfg.train.seed, component);
    let mut tok = Tokenizer::new(tcfg, &mut ChaCha8Rng::seed_from_u64(train.seed))?;
    TokenizerTrainer::new(&tok, train).run(&mut tok, images, &mut on_epoch)?;
    Ok(tok)
}

/// Teacher-forcing data: depth tokens and condition latents.
pub fn prior_samples(depth: &Tokenizer, rgb: &Tokenizer, data: &[Prepared]) -> Result<Vec<PriorSample>> {
    data.iter()
        .map(|p| {
            let f = depth.encode_image(&p.depth_image)?;
            Ok(PriorSample {
                tokens: depth.encode_multiscale(&f)?.tokens,
                cond: rgb.encode_image(&rgb_input(&p.sample.rgb))?,
            })
        })
        .collect()
}

pub fn upsampler_samples(depth: &Tokenizer, data: &[Prepared]) -> Result<Vec<UpsamplerSample>> {
    data.iter()
        .map(|p| {
            Ok(UpsamplerSample {
                rgb: p.sample.rgb.clone(),
                depth_latent: depth.encode_image(&p.depth_image)?,
            })
        })
        .collect()
}

/// Trains every model from scratch on `train`.
pub fn train_all(cfg: &RunConfig, train: &[Prepared], mut progress: impl FnMut(Progress<'_>)) -> Result<Models> {
    let depth_images: Vec<Tensor> = train.iter().map(|p| p.depth_image.clone()).collect();
    let depth = train_tokenizer_on(cfg, false, &depth_images, |s| {
        progress(Progress::Tokenizer { which: "depth", stats: s })
    })?;
    let rgb_images: Vec<Tensor> = train.iter().map(|p| rgb_input(&p.sample.rgb)).collect();
    let rgb = train_tokenizer_on(cfg, true, &rgb_images, |s| {
        progress(Progress::Tokenizer { which: "rgb", stats: s })
    })?;

    let samples = prior_samples(&depth, &rgb, train)?;
    let phase_a: Vec<PriorSample> = samples
        .iter()
        .zip(train)
        .filter(|(_, p)| p.family == cfg.train.phase_a_family)
        .map(|(s, _)| s.clone())
        .collect();
    let mut ptrain = cfg.train.prior.clone();
    ptrain.seed = component_seed(cfg.train.seed, 3);
    let mut prior = Prior::new(cfg.prior(), &mut ChaCha8Rng::seed_from_u64(ptrain.seed))?;
    PriorTrainer::new(&prior, ptrain).run(&mut prior, &phase_a, &samples, |r| progress(Progress::Prior(r)))?;

    let mut utrain = cfg.train.upsampler.clone();
    utrain.seed = component_seed(cfg.train.seed, 4);
    let mut upsampler = Upsampler::new(cfg.upsampler(), &mut ChaCha8Rng::seed_from_u64(utrain.seed))?;
    let usamples = upsampler_samples(&depth, train)?;
    UpsamplerTrainer::new(&upsampler, utrain).run(&mut upsampler, &usamples, &depth, &rgb, |step, loss| {
        progress(Progress::Upsampler { step, loss })
    })?;

    Ok(Models {
        depth,
        rgb,
        prior,
        upsampler,
    })
}

/// Samples depth for every test image and scores it.
pub fn evaluate_models(
    models: &Models,
    test: &[Prepared],
    guidance: &GuidanceConfig,
    mode: AlignMode,
) -> Result<EvalReport> {
    let pipe = models.pipeline()?;
    let targets: Vec<EvalTarget<'_>> = test
        .iter()
        .map(|p| EvalTarget {
            depth: p.sample.depth.data(),
            valid: &p.sample.valid,
        })
        .collect();
    evaluate(&targets, mode, |i| {
        let (depth, state) = pipe.sample_depth(&test[i].sample.rgb, guidance)?;
        Ok(Prediction {
            depth: depth.into_data(),
            stage_ms: state.stage_ms,
        })
    })
}
