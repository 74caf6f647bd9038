//! Scale-by-scale depth sampling with per-scale guidance between the prior
//! and the conditional upsampler.
//!
//! At scale `k` the prior gives a distribution over codes for every position,
//! turned into a continuous `f_u` (the expected codebook row). The upsampler
//! predicts the final latent from what has been committed so far; re-encoding
//! that prediction gives the scale-`k` code map and its rows `f_c`. The two
//! are combined as `(1 + w_k) f_c - w_k f_u`, quantized, and the chosen codes
//! are added to the running latent through `θ_k`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::{sample_scale, truncated_softmax, ConditionEncoding, Prior};
use crate::synth::{denormalize_depth, DepthRange};
use crate::tensor::Tensor;
use crate::tokenizer::{lookup, quantize, Codebook, TokenMap, Tokenizer};
use crate::upsampler::{reencode, rgb_input, Upsampler};

/// Late-scale weight of the `optimized` preset and the `constant` weight.
pub const GUIDANCE_WEIGHT: f32 = 3.5;
/// First scale (from 1) guided by the `optimized` preset.
pub const FIRST_GUIDED_SCALE: usize = 6;

/// How the prior branch becomes a continuous latent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorBranch {
    /// Probability-weighted mean of the codebook rows.
    #[default]
    Expected,
    /// Row of a code drawn from the distribution.
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    /// `w_1..w_K`.
    pub weights: Vec<f32>,
    pub temperature: f32,
    /// `None` keeps the whole vocabulary.
    pub top_k: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub prior_branch: PriorBranch,
}

impl GuidanceConfig {
    pub fn new(weights: Vec<f32>) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
            return Err(Error::Config(format!("guidance weight {w} is not finite")));
        }
        Ok(GuidanceConfig {
            weights,
            temperature: 1.0,
            top_k: None,
            seed: 0,
            prior_branch: PriorBranch::Expected,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Weights for a named preset over `k_total` scales, or an explicit list.
///
/// `none` is `-1` everywhere, `constant` is 3.5 everywhere and `optimized`
/// is `-1` below scale 6 and 3.5 from scale 6 on.
pub fn make_schedule(preset: &str, k_total: usize) -> Result<GuidanceConfig> {
    let weights = match preset {
        "none" => vec![-1.0; k_total],
        "constant" => vec![GUIDANCE_WEIGHT; k_total],
        "optimized" => (1..=k_total)
            .map(|k| if k < FIRST_GUIDED_SCALE { -1.0 } else { GUIDANCE_WEIGHT })
            .collect(),
        other => return Err(Error::Config(format!("unknown guidance preset {other:?}"))),
    };
    GuidanceConfig::new(weights)
}

/// Explicit weights; the list must have one entry per scale.
pub fn schedule_from_weights(weights: &[f32], k_total: usize) -> Result<GuidanceConfig> {
    if weights.len() != k_total {
        return Err(Error::Config(format!(
            "expected {k_total} guidance weights, got {}",
            weights.len()
        )));
    }
    GuidanceConfig::new(weights.to_vec())
}

/// `(1 + w) f_c - w f_u`, element-wise.
pub fn combine_guidance(f_c: &Tensor, f_u: &Tensor, w: f32) -> Result<Tensor> {
    f_c.zip_map(f_u, "combine_guidance", |c, u| (1.0 + w) * c - w * u)
}

/// Expected codebook row under `probs: [n, V]`, as `[C, h, w]`.
fn expected_rows(probs: &[Vec<f64>], codebook: &Codebook, (h, w): (usize, usize)) -> Result<Tensor> {
    let (c, n) = (codebook.dim(), h * w);
    let mut out = vec![0.0f32; c * n];
    for (pos, p) in probs.iter().enumerate() {
        let mut acc = vec![0.0f64; c];
        for (v, &q) in p.iter().enumerate() {
            if q > 0.0 {
                for (a, &z) in acc.iter_mut().zip(codebook.row(v)) {
                    *a += q * z as f64;
                }
            }
        }
        for (ch, a) in acc.into_iter().enumerate() {
            out[ch * n + pos] = a as f32;
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Tokens, latent and timings of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerState {
    pub tokens: Vec<TokenMap>,
    /// Running latent `Σ θ_k(up(lookup(r̂_k)))`.
    pub latent: Tensor,
    /// Wall-clock per scale in milliseconds. Scale 1 includes encoding the
    /// condition.
    pub stage_ms: Vec<f64>,
    pub decode_ms: f64,
    /// Wall-clock of the whole call.
    pub total_ms: f64,
}

/// The three trained models plus the condition encoder.
#[derive(Clone, Copy, Debug)]
pub struct Pipeline<'a> {
    pub depth: &'a Tokenizer,
    pub rgb: &'a Tokenizer,
    pub prior: &'a Prior,
    pub upsampler: &'a Upsampler,
}

/// Names of the settings on which two models disagree.
pub fn mismatched_fields(depth: &Tokenizer, rgb: &Tokenizer, prior: &Prior, up: &Upsampler) -> Vec<String> {
    let mut bad = Vec::new();
    let dc = &depth.config;
    if prior.config.vocab != dc.vocab {
        bad.push("V".to_string());
    }
    if up.config.channels != dc.latent_channels || rgb.config.latent_channels != dc.latent_channels {
        bad.push("C".to_string());
    }
    if prior.config.cond_channels != rgb.config.latent_channels {
        bad.push("condition channels".to_string());
    }
    let k = dc.schedule.len();
    if prior.schedule().len() != k || rgb.schedule().len() != k || up.config.scales != k {
        bad.push("K".to_string());
    }
    if prior.schedule() != &dc.schedule || rgb.schedule() != &dc.schedule {
        bad.push("schedule".to_string());
    }
    bad
}

impl<'a> Pipeline<'a> {
    pub fn new(depth: &'a Tokenizer, rgb: &'a Tokenizer, prior: &'a Prior, upsampler: &'a Upsampler) -> Result<Self> {
        let fields = mismatched_fields(depth, rgb, prior, upsampler);
        if !fields.is_empty() {
            return Err(Error::Compatibility { fields });
        }
        Ok(Pipeline {
            depth,
            rgb,
            prior,
            upsampler,
        })
    }

    fn scales(&self) -> usize {
        self.depth.schedule().len()
    }

    /// Condition latent of an RGB image in `[0, 1]`.
    pub fn condition(&self, rgb: &Tensor) -> Result<Tensor> {
        self.rgb.encode_image(&rgb_input(rgb))
    }

    /// Prior branch at scale `k` as a continuous latent `f_u`.
    fn prior_branch(
        &self,
        tokens: &[TokenMap],
        cond: &ConditionEncoding,
        k: usize,
        cfg: &GuidanceConfig,
    ) -> Result<Tensor> {
        let (h, w) = self.depth.schedule().get(k)?;
        let logits = self.prior.predict_scale_logits(tokens, cond, k)?;
        let v = self.depth.codebook.vocab();
        let top_k = cfg.top_k.unwrap_or(v);
        match cfg.prior_branch {
            PriorBranch::Expected => {
                let probs = logits
                    .data()
                    .chunks(v)
                    .map(|row| truncated_softmax(row, cfg.temperature, top_k))
                    .collect::<Result<Vec<_>>>()?;
                expected_rows(&probs, &self.depth.codebook, (h, w))
            }
            PriorBranch::Sampled => {
                let seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64);
                let r = sample_scale(&logits, k, (h, w), cfg.temperature, top_k, seed)?;
                lookup(&r, &self.depth.codebook)
            }
        }
    }

    /// Conditional branch at scale `k`: rows of the scale-`k` codes of the
    /// re-encoded upsampler prediction.
    fn conditional_branch(&self, latent: &Tensor, c: &Tensor, k: usize) -> Result<Tensor> {
        let pred = self.upsampler.upsample_predict(latent, c, k)?;
        let (_, r) = reencode(self.depth, &pred, k)?;
        lookup(&r, &self.depth.codebook)
    }

    fn run(&self, rgb: &Tensor, cfg: &GuidanceConfig, use_upsampler: bool) -> Result<(Tensor, SamplerState)> {
        let k_total = self.scales();
        if cfg.weights.len() != k_total {
            return Err(Error::Config(format!(
                "expected {k_total} guidance weights, got {}",
                cfg.weights.len()
            )));
        }
        let start = Instant::now();
        let (lh, lw) = self.depth.schedule().latent();
        let mut latent = Tensor::zeros(&[self.depth.config.latent_channels, lh, lw]);
        let mut tokens = Vec::with_capacity(k_total);
        let mut stage_ms = Vec::with_capacity(k_total);
        let mut cond = None;
        for k in 1..=k_total {
            let t0 = Instant::now();
            let (c, enc) = match &cond {
                Some(pair) => pair,
                None => {
                    let c = self.condition(rgb)?;
                    let enc = self.prior.project_condition(&c)?;
                    cond.insert((c, enc))
                }
            };
            let f_u = self.prior_branch(&tokens, enc, k, cfg)?;
            let combined = if use_upsampler {
                let f_c = self.conditional_branch(&latent, c, k)?;
                combine_guidance(&f_c, &f_u, cfg.weights[k - 1])?
            } else {
                f_u
            };
            let r = quantize(&combined, &self.depth.codebook, k)?;
            latent = latent.add(&self.depth.stage(&r)?)?;
            tokens.push(r);
            stage_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        let t0 = Instant::now();
        let normalized = self.depth.decode_image(&latent)?;
        let depth = denormalize_depth(&normalized, DepthRange::NOMINAL);
        let decode_ms = t0.elapsed().as_secs_f64() * 1e3;
        let state = SamplerState {
            tokens,
            latent,
            stage_ms,
            decode_ms,
            total_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        Ok((depth, state))
    }

    /// Depth `[1, H, W]` in nominal metres for an RGB image in `[0, 1]`.
    pub fn sample_depth(&self, rgb: &Tensor, cfg: &GuidanceConfig) -> Result<(Tensor, SamplerState)> {
        self.run(rgb, cfg, true)
    }

    /// The same loop driven by the prior alone; the upsampler is never run.
    pub fn sample_prior_only(&self, rgb: &Tensor, cfg: &GuidanceConfig) -> Result<(Tensor, SamplerState)> {
        self.run(rgb, cfg, false)
    }

    /// Per-pixel median over `n` runs with seeds `cfg.seed..cfg.seed + n`.
    pub fn sample_ensemble(&self, rgb: &Tensor, cfg: &GuidanceConfig, n: usize) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::Config("ensemble size must be positive".into()));
        }
        let runs = (0..n as u64)
            .map(|i| {
                let c = cfg.clone().with_seed(cfg.seed.wrapping_add(i));
                self.sample_depth(rgb, &c).map(|(d, _)| d)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = runs[0].clone();
        let mut column = vec![0.0f32; n];
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            for (slot, r) in column.iter_mut().zip(&runs) {
                *slot = r.data()[i];
            }
            column.sort_by(f32::total_cmp);
            *v = if n % 2 == 1 {
                column[n / 2]
            } else {
                0.5 * (column[n / 2 - 1] + column[n / 2])
            };
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        assert_eq!(make_schedule("none", 10).unwrap().weights, vec![-1.0; 10]);
        assert_eq!(make_schedule("constant", 10).unwrap().weights, vec![3.5; 10]);
        let opt = make_schedule("optimized", 10).unwrap().weights;
        assert_eq!(opt, [-1.0, -1.0, -1.0, -1.0, -1.0, 3.5, 3.5, 3.5, 3.5, 3.5]);
        assert!(matches!(make_schedule("strong", 10), Err(Error::Config(_))));
        assert!(matches!(schedule_from_weights(&[1.0; 9], 10), Err(Error::Config(_))));
        assert!(matches!(schedule_from_weights(&[f32::NAN; 10], 10), Err(Error::Config(_))));
    }

    #[test]
    fn combine_arithmetic() {
        let fc = Tensor::full(&[2, 1, 3], 2.0);
        let fu = Tensor::full(&[2, 1, 3], 1.0);
        assert_eq!(combine_guidance(&fc, &fu, 3.5).unwrap(), Tensor::full(&[2, 1, 3], 5.5));
        assert!(combine_guidance(&fc, &Tensor::zeros(&[2, 3, 1]), 1.0).is_err());
    }
}
