use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{lookup, quantize, Codebook, ScaleSchedule, TokenMap};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Spatial reduction of the encoder (three 2× stages).
pub const DOWNSAMPLE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `C`.
    pub latent_channels: usize,
    /// `V`.
    pub vocab: usize,
    /// Conv widths at full, 1/2 and 1/4 resolution (1/8 reuses the last).
    pub widths: [usize; 3],
    pub schedule: ScaleSchedule,
    /// Std of the Gaussian added to the identity refinement kernels.
    pub theta_noise: f32,
}

impl TokenizerConfig {
    /// Single-channel depth autoencoder.
    pub fn depth(latent_channels: usize, vocab: usize, schedule: ScaleSchedule) -> Self {
        TokenizerConfig {
            in_channels: 1,
            out_channels: 1,
            latent_channels,
            vocab,
            widths: [16, 32, 48],
            schedule,
            theta_noise: 1e-3,
        }
    }

    /// RGB autoencoder whose encoder provides the condition latent.
    pub fn rgb(latent_channels: usize, vocab: usize, schedule: ScaleSchedule) -> Self {
        TokenizerConfig {
            in_channels: 3,
            out_channels: 3,
            ..Self::depth(latent_channels, vocab, schedule)
        }
    }

    /// Image size that encodes to the schedule's final resolution.
    pub fn image_size(&self) -> (usize, usize) {
        let (h, w) = self.schedule.latent();
        (h * DOWNSAMPLE, w * DOWNSAMPLE)
    }
}

#[derive(Clone, Debug)]
struct Layers {
    e0: Conv,
    e1: Conv,
    e2: Conv,
    e3: Conv,
    e4: Conv,
    e_out: Conv,
    d_in: Conv,
    d1: Conv,
    d2: Conv,
    d3: Conv,
    d4: Conv,
    d_out: Conv,
    theta: Vec<Conv>,
}

/// Encoder `E`, decoder `D`, per-scale refinements `θ_k` and the codebook.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub params: ParamStore,
    pub codebook: Codebook,
    layers: Layers,
}

/// Output of [`Tokenizer::encode_multiscale`].
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub tokens: Vec<TokenMap>,
    /// `‖residual‖` after each stage, measured on the latent grid.
    pub residual_norms: Vec<f32>,
}

fn residual<'g>(p: &Bound<'g>, conv: &Conv, x: Var<'g>) -> Result<Var<'g>> {
    x.add(conv.forward(p, x)?.gelu()?)
}

impl Tokenizer {
    pub fn new<R: Rng + ?Sized>(config: TokenizerConfig, rng: &mut R) -> Result<Self> {
        let [w1, w2, w3] = config.widths;
        let (cin, cout, c) = (config.in_channels, config.out_channels, config.latent_channels);
        if [w1, w2, w3, cin, cout, c].contains(&0) {
            return Err(Error::Config("tokenizer channel counts must be positive".into()));
        }
        let mut s = ParamStore::new();
        let layers = Layers {
            e0: Conv::new(&mut s, "enc.0", cin, w1, rng),
            e1: Conv::new(&mut s, "enc.1", w1, w1, rng),
            e2: Conv::new(&mut s, "enc.2", w1, w2, rng),
            e3: Conv::new(&mut s, "enc.3", w2, w3, rng),
            e4: Conv::new(&mut s, "enc.4", w3, w3, rng),
            e_out: Conv::new(&mut s, "enc.out", w3, c, rng),
            d_in: Conv::new(&mut s, "dec.in", c, w3, rng),
            d1: Conv::new(&mut s, "dec.1", w3, w3, rng),
            d2: Conv::new(&mut s, "dec.2", w3, w2, rng),
            d3: Conv::new(&mut s, "dec.3", w2, w1, rng),
            d4: Conv::new(&mut s, "dec.4", w1, w1, rng),
            d_out: Conv::new(&mut s, "dec.out", w1, cout, rng),
            theta: (1..=config.schedule.len())
                .map(|k| Conv::near_identity(&mut s, &format!("theta.{k}"), c, config.theta_noise, rng))
                .collect(),
        };
        let codebook = Codebook::random(config.vocab, c, 0.1, rng)?;
        Ok(Tokenizer {
            config,
            params: s,
            codebook,
            layers,
        })
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.config.schedule
    }

    /// Zeroes the last encoder conv, so every image encodes to zero.
    pub fn zero_encoder_output(&mut self) {
        self.layers.e_out.zero_init(&mut self.params);
    }

    /// Zeroes the last decoder conv, so every latent decodes to zero.
    pub fn zero_decoder_output(&mut self) {
        self.layers.d_out.zero_init(&mut self.params);
    }

    /// Resets every `θ_k` to the exact identity.
    pub fn set_identity_theta(&mut self) {
        let c = self.config.latent_channels;
        for conv in &self.layers.theta {
            let k = self.params.get_mut(conv.kernel);
            k.data_mut().fill(0.0);
            for ch in 0..c {
                k.data_mut()[(ch * c + ch) * 9 + 4] = 1.0;
            }
        }
    }

    pub(crate) fn encode_var<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        let ok = shape.len() == 3
            && shape[0] == self.config.in_channels
            && shape[1].is_multiple_of(DOWNSAMPLE)
            && shape[2].is_multiple_of(DOWNSAMPLE);
        if !ok {
            let (h, w) = self.config.image_size();
            return Err(Error::shape("encode_image", &shape, &[self.config.in_channels, h, w]));
        }
        let l = &self.layers;
        let h = l.e0.forward(p, x)?.gelu()?;
        let h = residual(p, &l.e1, h)?;
        let h = l.e2.forward(p, h.down2()?)?.gelu()?;
        let h = l.e3.forward(p, h.down2()?)?.gelu()?;
        let h = residual(p, &l.e4, h.down2()?)?;
        l.e_out.forward(p, h)
    }

    /// Decoder output before clamping; training fits this so saturated
    /// pixels keep their gradient.
    pub(crate) fn decode_var<'g>(&self, p: &Bound<'g>, f: Var<'g>) -> Result<Var<'g>> {
        let (h, w) = self.schedule().latent();
        let expect = [self.config.latent_channels, h, w];
        if f.shape() != expect {
            return Err(Error::shape("decode_image", &f.shape(), &expect));
        }
        let l = &self.layers;
        let x = l.d_in.forward(p, f)?.gelu()?;
        let x = residual(p, &l.d1, x)?;
        let x = l.d2.forward(p, x.up2()?)?.gelu()?;
        let x = l.d3.forward(p, x.up2()?)?.gelu()?;
        let x = residual(p, &l.d4, x.up2()?)?;
        l.d_out.forward(p, x)
    }

    pub(crate) fn theta_var<'g>(&self, p: &Bound<'g>, k: usize, x: Var<'g>) -> Result<Var<'g>> {
        self.layers.theta[k - 1].forward(p, x)
    }

    /// `E(x)`: image `[in, H, W]` to latent `[C, H/8, W/8]`.
    pub fn encode_image(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let f = self.encode_var(&p, g.constant(x.clone()))?;
        Ok((*f.value()).clone())
    }

    /// `D(f̂)`: latent to image, clamped to `[-1, 1]`.
    pub fn decode_image(&self, f: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let x = self.decode_var(&p, g.constant(f.clone()))?;
        Ok(x.value().map(|v| v.clamp(-1.0, 1.0)))
    }

    /// Contribution of token map `r` (scale `k`) to the latent:
    /// `θ_k(up(lookup(r)))`.
    pub fn stage(&self, r: &TokenMap) -> Result<Tensor> {
        let k = r.scale();
        r.conforms(self.schedule(), k)?;
        let (h, w) = self.schedule().latent();
        let up = lookup(r, &self.codebook)?.expand_cells(h, w)?;
        let g = Graph::new();
        let kernel = g.constant(self.params.get(self.layers.theta[k - 1].kernel).clone());
        let out = g.constant(up).conv3x3(kernel, None)?;
        Ok((*out.value()).clone())
    }

    fn check_latent(&self, f: &Tensor, op: &'static str) -> Result<()> {
        let (h, w) = self.schedule().latent();
        let expect = [self.config.latent_channels, h, w];
        if f.shape() != expect {
            return Err(Error::shape(op, f.shape(), &expect));
        }
        Ok(())
    }

    /// Residual loop over scales `1..=upto`. Returns the tokens, the
    /// cumulative decoded latent and the residual norm after every stage.
    fn residual_loop(&self, f: &Tensor, upto: usize) -> Result<(Vec<TokenMap>, Tensor, Vec<f32>)> {
        let mut residual = f.clone();
        let mut acc = Tensor::zeros(f.shape());
        let mut tokens = Vec::with_capacity(upto);
        let mut norms = Vec::with_capacity(upto);
        for k in 1..=upto {
            let (hk, wk) = self.schedule().get(k)?;
            let r = quantize(&residual.cell_mean(hk, wk)?, &self.codebook, k)?;
            let t = self.stage(&r)?;
            residual = residual.sub(&t)?;
            acc = acc.add(&t)?;
            norms.push(residual.norm());
            tokens.push(r);
        }
        Ok((tokens, acc, norms))
    }

    /// Splits `f` into `K` token maps, each quantizing the residual left by
    /// the coarser ones.
    pub fn encode_multiscale(&self, f: &Tensor) -> Result<Encoding> {
        self.check_latent(f, "encode_multiscale")?;
        let (tokens, _, residual_norms) = self.residual_loop(f, self.schedule().len())?;
        Ok(Encoding { tokens, residual_norms })
    }

    /// `Σ_k θ_k(up(lookup(r_k)))` over all `K` scales.
    pub fn decode_multiscale(&self, tokens: &[TokenMap]) -> Result<Tensor> {
        if tokens.len() != self.schedule().len() {
            return Err(Error::shape("decode_multiscale", &[tokens.len()], &[self.schedule().len()]));
        }
        self.decode_prefix(tokens)
    }

    /// Sum of the contributions of the first `tokens.len()` scales.
    pub fn decode_prefix(&self, tokens: &[TokenMap]) -> Result<Tensor> {
        let (h, w) = self.schedule().latent();
        let mut acc = Tensor::zeros(&[self.config.latent_channels, h, w]);
        for (i, r) in tokens.iter().enumerate() {
            r.conforms(self.schedule(), i + 1)?;
            acc = acc.add(&self.stage(r)?)?;
        }
        Ok(acc)
    }

    /// Latent-resolution approximation of `f` after `k` stages, with the
    /// tokens of those stages. `k = 0` gives zeros.
    pub fn cumulative(&self, f: &Tensor, k: usize) -> Result<(Tensor, Vec<TokenMap>)> {
        self.check_latent(f, "cumulative")?;
        if k > self.schedule().len() {
            return Err(Error::Range {
                what: "scale index",
                value: k as i64,
                lo: 0,
                hi: self.schedule().len() as i64,
            });
        }
        let (tokens, acc, _) = self.residual_loop(f, k)?;
        Ok((acc, tokens))
    }

    /// Re-encoding `E_k`: the cumulative approximation after `k` stages,
    /// resampled to the scale-`k` grid.
    pub fn encode_at_scale(&self, f: &Tensor, k: usize) -> Result<Tensor> {
        let (hk, wk) = self.schedule().get(k)?;
        let (acc, _) = self.cumulative(f, k)?;
        acc.cell_mean(hk, wk)
    }
}
