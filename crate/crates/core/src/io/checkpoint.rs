use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};
use crate::prior::{Prior, PriorConfig, PriorTrainConfig, PriorTrainer};
use crate::tensor::Tensor;
use crate::tokenizer::{Codebook, Tokenizer, TokenizerConfig, TokenizerTrainConfig, TokenizerTrainer};
use crate::upsampler::{Upsampler, UpsamplerConfig, UpsamplerTrainConfig, UpsamplerTrainer};

const MAGIC: &[u8; 4] = b"VARD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    TokenizerDepth,
    TokenizerRgb,
    Prior,
    Upsampler,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::TokenizerDepth => "tokenizer-depth",
            ModelKind::TokenizerRgb => "tokenizer-rgb",
            ModelKind::Prior => "prior",
            ModelKind::Upsampler => "upsampler",
        }
    }

    fn from_tag(tag: &str) -> Result<Self> {
        Ok(match tag {
            "tokenizer-depth" => ModelKind::TokenizerDepth,
            "tokenizer-rgb" => ModelKind::TokenizerRgb,
            "prior" => ModelKind::Prior,
            "upsampler" => ModelKind::Upsampler,
            other => return Err(Error::Checkpoint(format!("unknown model kind {other:?}"))),
        })
    }
}

/// Self-describing parameter container:
///
/// ```text
/// "VARD" | version u32 | kind (u32 len + utf8) | config TOML (u32 len + utf8)
/// | record count u32 | records | CRC32 of everything before it
/// record = name (u32 len + utf8) | ndim u32 | dims u64 × ndim | f32 LE payload
/// ```
///
/// All integers are little-endian.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    /// TOML snapshot of the model (and, when resumable, training) settings.
    pub config: String,
    pub records: Vec<(String, Tensor)>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, self.kind.tag());
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("missing VARD magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut c = Cursor { bytes: body, pos: 4 };
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let kind = ModelKind::from_tag(&c.string()?)?;
        let config = c.string()?;
        let n = c.u32()? as usize;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let name = c.string()?;
            let ndim = c.u32()? as usize;
            let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = c
                .take(4 * len)?
                .chunks(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            records.push((name, Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?));
        }
        if c.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after records".into()));
        }
        Ok(Checkpoint { kind, config, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {} checkpoint, found {}",
                kind.tag(),
                self.kind.tag()
            )));
        }
        Ok(())
    }
}

/// Training progress stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainState {
    epochs_done: usize,
    adam_steps: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Snapshot<M, T> {
    model: M,
    train: Option<T>,
    state: Option<TrainState>,
    /// Lifetime code usage (tokenizers only).
    #[serde(default)]
    usage: Vec<u64>,
}

fn parse<M: DeserializeOwned, T: DeserializeOwned>(ck: &Checkpoint) -> Result<Snapshot<M, T>> {
    toml::from_str(&ck.config).map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))
}

fn snapshot<M: Serialize, T: Serialize>(s: &Snapshot<M, T>) -> String {
    toml::to_string(s).expect("snapshot serializes")
}

fn param_records(store: &ParamStore, out: &mut Vec<(String, Tensor)>) {
    for (name, t) in store.iter() {
        let mut t = t.clone();
        t.requires_grad = false;
        t.grad = None;
        out.push((format!("param/{name}"), t));
    }
}

fn load_params(ck: &Checkpoint, store: &mut ParamStore) -> Result<()> {
    store.load_from(|name| ck.get(&format!("param/{name}")))
}

fn adam_records(adam: &Adam, store: &ParamStore, out: &mut Vec<(String, Tensor)>) {
    let (_, m, v) = adam.state();
    for (i, (name, t)) in store.iter().enumerate() {
        out.push((format!("adam.m/{name}"), Tensor::new(t.shape(), m[i].clone()).expect("moment shape")));
        out.push((format!("adam.v/{name}"), Tensor::new(t.shape(), v[i].clone()).expect("moment shape")));
    }
}

fn restore_adam(ck: &Checkpoint, adam: &mut Adam, store: &ParamStore, steps: u64) -> Result<()> {
    let mut m = Vec::with_capacity(store.len());
    let mut v = Vec::with_capacity(store.len());
    for (name, _) in store.iter() {
        m.push(ck.require(&format!("adam.m/{name}"))?.data().to_vec());
        v.push(ck.require(&format!("adam.v/{name}"))?.data().to_vec());
    }
    adam.restore(steps, m, v)
}

pub fn save_tokenizer(tok: &Tokenizer, kind: ModelKind, trainer: Option<&TokenizerTrainer>) -> Checkpoint {
    let mut records = Vec::new();
    param_records(&tok.params, &mut records);
    records.push(("codebook".into(), tok.codebook.entries().clone()));
    if let Some(tr) = trainer {
        adam_records(&tr.adam, &tok.params, &mut records);
        let v = tok.codebook.vocab();
        records.push(("ema.counts".into(), Tensor::new(&[v], tr.ema.counts.clone()).expect("ema shape")));
        records.push((
            "ema.sums".into(),
            Tensor::new(tok.codebook.entries().shape(), tr.ema.sums.clone()).expect("ema shape"),
        ));
    }
    let snap = Snapshot {
        model: tok.config.clone(),
        train: trainer.map(|t| t.config.clone()),
        state: trainer.map(|t| TrainState {
            epochs_done: t.epochs_done,
            adam_steps: t.adam.steps(),
        }),
        usage: tok.codebook.usage().to_vec(),
    };
    Checkpoint {
        kind,
        config: snapshot(&snap),
        records,
    }
}

pub fn load_tokenizer(ck: &Checkpoint, kind: ModelKind) -> Result<(Tokenizer, Option<TokenizerTrainer>)> {
    ck.expect_kind(kind)?;
    let snap: Snapshot<TokenizerConfig, TokenizerTrainConfig> = parse(ck)?;
    let mut tok = Tokenizer::new(snap.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    load_params(ck, &mut tok.params)?;
    let mut codebook = Codebook::new(ck.require("codebook")?.clone())?;
    if !snap.usage.is_empty() {
        codebook.add_usage(&snap.usage);
    }
    if codebook.entries().shape() != tok.codebook.entries().shape() {
        return Err(Error::Checkpoint("codebook shape does not match the config".into()));
    }
    tok.codebook = codebook;
    let trainer = match (snap.train, snap.state) {
        (Some(cfg), Some(state)) => {
            let mut tr = TokenizerTrainer::new(&tok, cfg);
            restore_adam(ck, &mut tr.adam, &tok.params, state.adam_steps)?;
            tr.ema.counts = ck.require("ema.counts")?.data().to_vec();
            tr.ema.sums = ck.require("ema.sums")?.data().to_vec();
            tr.epochs_done = state.epochs_done;
            Some(tr)
        }
        _ => None,
    };
    Ok((tok, trainer))
}

pub fn save_prior(prior: &Prior, trainer: Option<&PriorTrainer>) -> Checkpoint {
    let mut records = Vec::new();
    param_records(&prior.params, &mut records);
    if let Some(tr) = trainer {
        adam_records(&tr.adam, &prior.params, &mut records);
    }
    let snap = Snapshot {
        model: prior.config.clone(),
        train: trainer.map(|t| t.config.clone()),
        state: trainer.map(|t| TrainState {
            epochs_done: t.epochs_done,
            adam_steps: t.adam.steps(),
        }),
        usage: Vec::new(),
    };
    Checkpoint {
        kind: ModelKind::Prior,
        config: snapshot(&snap),
        records,
    }
}

pub fn load_prior(ck: &Checkpoint) -> Result<(Prior, Option<PriorTrainer>)> {
    ck.expect_kind(ModelKind::Prior)?;
    let snap: Snapshot<PriorConfig, PriorTrainConfig> = parse(ck)?;
    let mut prior = Prior::new(snap.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    load_params(ck, &mut prior.params)?;
    let trainer = match (snap.train, snap.state) {
        (Some(cfg), Some(state)) => {
            let mut tr = PriorTrainer::new(&prior, cfg);
            restore_adam(ck, &mut tr.adam, &prior.params, state.adam_steps)?;
            tr.epochs_done = state.epochs_done;
            Some(tr)
        }
        _ => None,
    };
    Ok((prior, trainer))
}

pub fn save_upsampler(up: &Upsampler, trainer: Option<&UpsamplerTrainer>) -> Checkpoint {
    let mut records = Vec::new();
    param_records(&up.params, &mut records);
    if let Some(tr) = trainer {
        adam_records(&tr.adam, &up.params, &mut records);
    }
    let snap = Snapshot {
        model: up.config.clone(),
        train: trainer.map(|t| t.config.clone()),
        state: trainer.map(|t| TrainState {
            epochs_done: t.epochs_done,
            adam_steps: t.adam.steps(),
        }),
        usage: Vec::new(),
    };
    Checkpoint {
        kind: ModelKind::Upsampler,
        config: snapshot(&snap),
        records,
    }
}

pub fn load_upsampler(ck: &Checkpoint) -> Result<(Upsampler, Option<UpsamplerTrainer>)> {
    ck.expect_kind(ModelKind::Upsampler)?;
    let snap: Snapshot<UpsamplerConfig, UpsamplerTrainConfig> = parse(ck)?;
    let mut up = Upsampler::new(snap.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    load_params(ck, &mut up.params)?;
    let trainer = match (snap.train, snap.state) {
        (Some(cfg), Some(state)) => {
            let mut tr = UpsamplerTrainer::new(&up, cfg);
            restore_adam(ck, &mut tr.adam, &up.params, state.adam_steps)?;
            tr.epochs_done = state.epochs_done;
            Some(tr)
        }
        _ => None,
    };
    Ok((up, trainer))
}
