//! Small untrained models sharing the desk schedule, for structural tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vardepth::prior::{Prior, PriorConfig};
use vardepth::recipe::Models;
use vardepth::tokenizer::{ScaleSchedule, Tokenizer, TokenizerConfig};
use vardepth::upsampler::{Upsampler, UpsamplerConfig};
use vardepth::Tensor;

pub const V: usize = 16;
pub const C: usize = 4;

pub fn tokenizer_config(rgb: bool) -> TokenizerConfig {
    let base = if rgb {
        TokenizerConfig::rgb(C, V, ScaleSchedule::desk())
    } else {
        TokenizerConfig::depth(C, V, ScaleSchedule::desk())
    };
    TokenizerConfig { widths: [4, 6, 8], ..base }
}

pub fn prior_config() -> PriorConfig {
    PriorConfig {
        d_model: 16,
        blocks: 1,
        heads: 2,
        ffn_mult: 2,
        ..PriorConfig::new(V, C, ScaleSchedule::desk())
    }
}

pub fn upsampler_config() -> UpsamplerConfig {
    UpsamplerConfig {
        widths: [4, 6, 8],
        ..UpsamplerConfig::new(C, 10)
    }
}

pub fn tiny_models(seed: u64) -> Models {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut upsampler = Upsampler::new(upsampler_config(), &mut rng).unwrap();
    // A non-zero output layer so the conditional branch differs from the identity.
    let mut perturb = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    let values: Vec<(String, Tensor)> = upsampler
        .params
        .iter()
        .map(|(n, t)| {
            let t = if n.starts_with("out") {
                Tensor::randn(t.shape(), 0.05, &mut perturb)
            } else {
                t.clone()
            };
            (n.to_string(), t)
        })
        .collect();
    upsampler
        .params
        .load_from(|name| values.iter().find(|(n, _)| n == name).map(|(_, t)| t))
        .unwrap();
    Models {
        depth: Tokenizer::new(tokenizer_config(false), &mut rng).unwrap(),
        rgb: Tokenizer::new(tokenizer_config(true), &mut rng).unwrap(),
        prior: Prior::new(prior_config(), &mut rng).unwrap(),
        upsampler,
    }
}
