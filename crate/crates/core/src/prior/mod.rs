//! Conditional next-scale transformer over token maps.
//!
//! The sequence is the concatenation of all scales. Scale 1 is a learned
//! start token; scale `k > 1` reads the embedding of `r_{k-1}` resampled to
//! the scale-`k` grid, so the logits at scale `k` only ever see coarser
//! tokens. A token attends to every token of its own and coarser scales, and
//! every block cross-attends to the projected condition.

mod train;

pub use train::{train_prior, LossRecord, PriorSample, PriorTrainConfig, PriorTrainer};

use std::rc::Rc;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::{ScaleSchedule, TokenMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub vocab: usize,
    /// Channels of the condition latent.
    pub cond_channels: usize,
    pub schedule: ScaleSchedule,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl PriorConfig {
    pub fn new(vocab: usize, cond_channels: usize, schedule: ScaleSchedule) -> Self {
        PriorConfig {
            vocab,
            cond_channels,
            schedule,
            d_model: 128,
            blocks: 6,
            heads: 4,
            ffn_mult: 4,
        }
    }
}

#[derive(Clone, Debug)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attn {
    fn new<R: Rng + ?Sized>(s: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Attn {
            q: Linear::new(s, &format!("{name}.q"), d, d, rng),
            k: Linear::new(s, &format!("{name}.k"), d, d, rng),
            v: Linear::new(s, &format!("{name}.v"), d, d, rng),
            o: Linear::new(s, &format!("{name}.o"), d, d, rng),
        }
    }

    fn forward<'g>(
        &self,
        p: &Bound<'g>,
        x: Var<'g>,
        ctx: Var<'g>,
        heads: usize,
        mask: Option<Rc<Vec<bool>>>,
    ) -> Result<Var<'g>> {
        let q = self.q.forward(p, x)?;
        let k = self.k.forward(p, ctx)?;
        let v = self.v.forward(p, ctx)?;
        self.o.forward(p, x.graph().attention(q, k, v, heads, mask)?)
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    self_attn: Attn,
    ln2: LayerNorm,
    cross_attn: Attn,
    ln3: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Layers {
    tok_emb: ParamId,
    start: ParamId,
    scale_emb: ParamId,
    pos: ParamId,
    cond_pos: ParamId,
    null_cond: ParamId,
    cond1: Linear,
    cond2: Linear,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

/// The transformer prior and its condition projection `f`.
#[derive(Clone, Debug)]
pub struct Prior {
    pub config: PriorConfig,
    pub params: ParamStore,
    layers: Layers,
    mask_cache: Vec<Vec<bool>>,
}

/// Condition tokens `c_L = f(c)`, one per position of the condition latent.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEncoding {
    /// `[n_c, d_model]`.
    pub tokens: Tensor,
    pub height: usize,
    pub width: usize,
}

impl ConditionEncoding {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Condition on a graph: projected tokens with their grid, or the learned
/// null token used for condition dropout.
#[derive(Clone, Copy, Debug)]
pub enum Context<'g> {
    Tokens { tokens: Var<'g>, height: usize, width: usize },
    Null,
}

/// Block-causal mask: query `i` may see key `j` iff `scale(j) <= scale(i)`.
fn block_mask(offsets: &[usize], upto: usize) -> Vec<bool> {
    let n = offsets[upto];
    let mut scale = vec![0; n];
    for k in 0..upto {
        scale[offsets[k]..offsets[k + 1]].fill(k);
    }
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = scale[j] <= scale[i];
        }
    }
    m
}

/// `[n, d]` rows to a `[d, h, w]` grid and back.
fn to_grid<'g>(x: Var<'g>, h: usize, w: usize) -> Result<Var<'g>> {
    let d = x.shape()[1];
    x.t()?.reshape(&[d, h, w])
}

fn to_rows<'g>(x: Var<'g>) -> Result<Var<'g>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1] * s[2]])?.t()
}

impl Prior {
    pub fn new<R: Rng + ?Sized>(config: PriorConfig, rng: &mut R) -> Result<Self> {
        let d = config.d_model;
        if d == 0 || config.heads == 0 || !d.is_multiple_of(config.heads) {
            return Err(Error::Config(format!(
                "d_model {d} must be a positive multiple of heads {}",
                config.heads
            )));
        }
        if config.vocab < 2 || config.cond_channels == 0 || config.ffn_mult == 0 {
            return Err(Error::Config("prior vocab, condition channels and ffn_mult must be positive".into()));
        }
        let (lh, lw) = config.schedule.latent();
        let k = config.schedule.len();
        let mut s = ParamStore::new();
        let emb_std = 0.02;
        let layers = Layers {
            tok_emb: s.add("tok_emb", Tensor::randn(&[config.vocab, d], emb_std, rng)),
            start: s.add("start", Tensor::randn(&[1, d], emb_std, rng)),
            scale_emb: s.add("scale_emb", Tensor::randn(&[k, d], emb_std, rng)),
            pos: s.add("pos", Tensor::randn(&[d, lh, lw], emb_std, rng)),
            cond_pos: s.add("cond_pos", Tensor::randn(&[d, lh, lw], emb_std, rng)),
            null_cond: s.add("null_cond", Tensor::randn(&[1, d], emb_std, rng)),
            cond1: Linear::new(&mut s, "cond.1", config.cond_channels, d, rng),
            cond2: Linear::new(&mut s, "cond.2", d, d, rng),
            blocks: (0..config.blocks)
                .map(|b| Block {
                    ln1: LayerNorm::new(&mut s, &format!("block.{b}.ln1"), d),
                    self_attn: Attn::new(&mut s, &format!("block.{b}.self"), d, rng),
                    ln2: LayerNorm::new(&mut s, &format!("block.{b}.ln2"), d),
                    cross_attn: Attn::new(&mut s, &format!("block.{b}.cross"), d, rng),
                    ln3: LayerNorm::new(&mut s, &format!("block.{b}.ln3"), d),
                    ff1: Linear::new(&mut s, &format!("block.{b}.ff1"), d, d * config.ffn_mult, rng),
                    ff2: Linear::new(&mut s, &format!("block.{b}.ff2"), d * config.ffn_mult, d, rng),
                })
                .collect(),
            ln_f: LayerNorm::new(&mut s, "ln_f", d),
            head: Linear::new(&mut s, "head", d, config.vocab, rng),
        };
        // Near-zero logits at init, so the first loss is close to ln V.
        let hw = s.get_mut(layers.head.w);
        *hw = hw.scale(0.05);
        for b in &layers.blocks {
            for out in [b.self_attn.o.w, b.cross_attn.o.w, b.ff2.w] {
                let t = s.get_mut(out);
                *t = t.scale(1.0 / (2.0 * config.blocks as f32).sqrt());
            }
        }
        let offsets = config.schedule.offsets();
        let mask_cache = (0..=k).map(|u| block_mask(&offsets, u)).collect();
        Ok(Prior {
            config,
            params: s,
            layers,
            mask_cache,
        })
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.config.schedule
    }

    /// Zeroes the last layer of the condition projection.
    pub fn zero_condition_output(&mut self) {
        self.layers.cond2.zero_init(&mut self.params);
    }

    /// Id of the condition-projection output weight.
    pub fn condition_weight(&self) -> ParamId {
        self.layers.cond2.w
    }

    /// The per-position MLP `f` on a `[C, h, w]` latent.
    pub fn project_var<'g>(&self, p: &Bound<'g>, c: Var<'g>) -> Result<Var<'g>> {
        let s = c.shape();
        if s.len() != 3 || s[0] != self.config.cond_channels {
            return Err(Error::shape("project_condition", &s, &[self.config.cond_channels, 0, 0]));
        }
        let rows = to_rows(c)?;
        let h = self.layers.cond1.forward(p, rows)?.gelu()?;
        self.layers.cond2.forward(p, h)
    }

    /// `c_L = f(c)` for a condition latent at any resolution.
    pub fn project_condition(&self, c: &Tensor) -> Result<ConditionEncoding> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let out = self.project_var(&p, g.constant(c.clone()))?;
        let s = c.shape();
        Ok(ConditionEncoding {
            tokens: (*out.value()).clone(),
            height: s[1],
            width: s[2],
        })
    }

    /// Keys and values for cross-attention.
    fn context_var<'g>(&self, p: &Bound<'g>, ctx: Context<'g>) -> Result<Var<'g>> {
        match ctx {
            Context::Tokens { tokens, height, width } => {
                let pos = p.get(self.layers.cond_pos).resize_bilinear(height, width)?;
                tokens.add(to_rows(pos)?)
            }
            Context::Null => Ok(p.get(self.layers.null_cond)),
        }
    }

    /// Context for a stored encoding.
    pub fn encoding_context<'g>(&self, g: &'g Graph, cond: &ConditionEncoding) -> Result<Context<'g>> {
        if cond.tokens.shape() != [cond.len(), self.config.d_model] {
            return Err(Error::shape(
                "condition tokens",
                cond.tokens.shape(),
                &[cond.len(), self.config.d_model],
            ));
        }
        Ok(Context::Tokens {
            tokens: g.constant(cond.tokens.clone()),
            height: cond.height,
            width: cond.width,
        })
    }

    /// Input embeddings for scales `1..=upto`, given token maps of scales
    /// `1..upto` (at least `upto - 1` of them).
    fn inputs<'g>(&self, p: &Bound<'g>, tokens: &[TokenMap], upto: usize) -> Result<Var<'g>> {
        let g = p.get(self.layers.start).graph();
        let sched = self.schedule();
        let l = &self.layers;
        let mut parts = Vec::with_capacity(upto);
        for k in 1..=upto {
            let (h, w) = sched.get(k)?;
            let base = if k == 1 {
                p.get(l.start)
            } else {
                let prev = &tokens[k - 2];
                prev.conforms(sched, k - 1)?;
                let e = g.embedding(p.get(l.tok_emb), prev.indices())?;
                let grid = to_grid(e, prev.height(), prev.width())?.resize_bilinear(h, w)?;
                to_rows(grid)?
            };
            let pos = to_rows(p.get(l.pos).resize_bilinear(h, w)?)?;
            let scale = p.get(l.scale_emb).rows(k - 1, k)?.reshape(&[self.config.d_model])?;
            parts.push(base.add(pos)?.add_row(scale)?);
        }
        g.concat(&parts)
    }

    /// Logits `[offsets[upto], V]` for all positions of scales `1..=upto`.
    pub fn logits_var<'g>(
        &self,
        p: &Bound<'g>,
        tokens: &[TokenMap],
        ctx: Context<'g>,
        upto: usize,
    ) -> Result<Var<'g>> {
        let heads = self.config.heads;
        let ctx = self.context_var(p, ctx)?;
        let mut x = self.inputs(p, tokens, upto)?;
        let mask = Rc::new(self.mask_cache[upto].clone());
        for b in &self.layers.blocks {
            let h = b.ln1.forward(p, x)?;
            x = x.add(b.self_attn.forward(p, h, h, heads, Some(mask.clone()))?)?;
            let h = b.ln2.forward(p, x)?;
            x = x.add(b.cross_attn.forward(p, h, ctx, heads, None)?)?;
            let h = b.ln3.forward(p, x)?;
            x = x.add(b.ff2.forward(p, b.ff1.forward(p, h)?.gelu()?)?)?;
        }
        self.layers.head.forward(p, self.layers.ln_f.forward(p, x)?)
    }

    /// Mean negative log-likelihood of all `K` token maps in one pass.
    pub fn loss_var<'g>(&self, p: &Bound<'g>, tokens: &[TokenMap], ctx: Context<'g>) -> Result<Var<'g>> {
        let k = self.schedule().len();
        if tokens.len() != k {
            return Err(Error::shape("teacher_forcing_loss", &[tokens.len()], &[k]));
        }
        let mut targets = Vec::with_capacity(self.schedule().total_tokens());
        for (i, r) in tokens.iter().enumerate() {
            r.conforms(self.schedule(), i + 1)?;
            targets.extend_from_slice(r.indices());
        }
        self.logits_var(p, tokens, ctx, k)?.cross_entropy(&targets)
    }

    /// Teacher-forcing loss value for a stored condition.
    pub fn teacher_forcing_loss(&self, tokens: &[TokenMap], cond: &ConditionEncoding) -> Result<f32> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let ctx = self.encoding_context(&g, cond)?;
        Ok(self.loss_var(&p, tokens, ctx)?.value().item())
    }

    /// Logits `[h_k·w_k, V]` for scale `k` given the `k - 1` coarser maps.
    pub fn predict_scale_logits(&self, prefix: &[TokenMap], cond: &ConditionEncoding, k: usize) -> Result<Tensor> {
        self.schedule().get(k)?;
        if prefix.len() != k - 1 {
            return Err(Error::Contract(format!(
                "scale {k} needs {} prefix maps, got {}",
                k - 1,
                prefix.len()
            )));
        }
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let ctx = self.encoding_context(&g, cond)?;
        let offsets = self.schedule().offsets();
        let logits = self.logits_var(&p, prefix, ctx, k)?.rows(offsets[k - 1], offsets[k])?;
        Ok((*logits.value()).clone())
    }
}

/// Softmax of `logits / temperature` restricted to the `top_k` largest
/// entries (ties to the lower index), in f64.
pub fn truncated_softmax(logits: &[f32], temperature: f32, top_k: usize) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let v = logits.len();
    if top_k == 0 || top_k > v {
        return Err(Error::Config(format!("top_k must be in 1..={v}, got {top_k}")));
    }
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let keep = &order[..top_k];
    let max = logits[keep[0]] as f64;
    let mut probs = vec![0.0f64; v];
    let mut total = 0.0;
    for &i in keep {
        let e = ((logits[i] as f64 - max) / temperature as f64).exp();
        probs[i] = e;
        total += e;
    }
    probs.iter_mut().for_each(|q| *q /= total);
    Ok(probs)
}

/// Draws one token per row of `logits: [h·w, V]` from the top-`k`
/// renormalized distribution. The draw depends only on `seed`.
pub fn sample_scale(
    logits: &Tensor,
    scale: usize,
    (h, w): (usize, usize),
    temperature: f32,
    top_k: usize,
    seed: u64,
) -> Result<TokenMap> {
    let &[n, v] = logits.shape() else {
        return Err(Error::shape("sample_scale", logits.shape(), &[h * w, 0]));
    };
    if n != h * w {
        return Err(Error::shape("sample_scale", logits.shape(), &[h * w, v]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = Vec::with_capacity(n);
    for row in logits.data().chunks(v) {
        let probs = truncated_softmax(row, temperature, top_k)?;
        let pick = if top_k == 1 {
            probs.iter().position(|&q| q > 0.0).expect("one entry kept")
        } else {
            WeightedIndex::new(&probs)
                .map_err(|_| Error::NonFinite { op: "sample_scale" })?
                .sample(&mut rng)
        };
        indices.push(pick);
    }
    TokenMap::new(scale, h, w, indices)
}
