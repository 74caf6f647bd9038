//! Multi-scale residual vector quantization.
//!
//! A latent `f: [C, h, w]` is described by `K` token maps of increasing
//! resolution. Stage `k` quantizes what the previous stages left over, so the
//! decoded latent is the sum of the per-stage contributions.
//!
//! Resampling between a stage grid and the latent grid uses one fixed
//! partition of the latent into contiguous cells: downsampling takes the mean
//! of each cell and upsampling copies the cell value back. With that pair and
//! the frozen zero codebook entry, no stage can increase the residual norm.

mod model;
mod train;

pub use model::{Encoding, Tokenizer, TokenizerConfig};
pub use train::{train_tokenizer, EpochStats, TokenizerTrainConfig, TokenizerTrainer};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The `K` token-map resolutions, coarse to fine.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, usize)>", into = "Vec<(usize, usize)>")]
pub struct ScaleSchedule {
    resolutions: Vec<(usize, usize)>,
}

impl ScaleSchedule {
    pub fn new(resolutions: Vec<(usize, usize)>) -> Result<Self> {
        let Some(&first) = resolutions.first() else {
            return Err(Error::Config("scale schedule is empty".into()));
        };
        if first != (1, 1) {
            return Err(Error::Config(format!("scale schedule must start at (1, 1), got {first:?}")));
        }
        for pair in resolutions.windows(2) {
            let ((h0, w0), (h1, w1)) = (pair[0], pair[1]);
            if h1 < h0 || w1 < w0 {
                return Err(Error::Config(format!(
                    "scale schedule must be non-decreasing, got {:?} after {:?}",
                    pair[1], pair[0]
                )));
            }
        }
        Ok(ScaleSchedule { resolutions })
    }

    /// Ten scales ending at a 6×8 latent.
    pub fn desk() -> Self {
        ScaleSchedule::new(vec![(1, 1), (1, 2), (2, 2), (2, 3), (3, 4), (4, 5), (4, 6), (5, 7), (6, 7), (6, 8)])
            .expect("valid schedule")
    }

    /// Number of scales `K`.
    pub fn len(&self) -> usize {
        self.resolutions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resolutions.is_empty()
    }

    pub fn resolutions(&self) -> &[(usize, usize)] {
        &self.resolutions
    }

    /// Resolution of scale `k`, counted from 1.
    pub fn get(&self, k: usize) -> Result<(usize, usize)> {
        if k == 0 || k > self.len() {
            return Err(Error::Range {
                what: "scale index",
                value: k as i64,
                lo: 1,
                hi: self.len() as i64,
            });
        }
        Ok(self.resolutions[k - 1])
    }

    /// The final (latent) resolution.
    pub fn latent(&self) -> (usize, usize) {
        *self.resolutions.last().expect("non-empty schedule")
    }

    /// Token count `h_k · w_k` of scale `k` (from 1).
    pub fn tokens(&self, k: usize) -> usize {
        let (h, w) = self.resolutions[k - 1];
        h * w
    }

    /// Token count over all scales.
    pub fn total_tokens(&self) -> usize {
        self.resolutions.iter().map(|(h, w)| h * w).sum()
    }

    /// Index of the first token of every scale in the flattened sequence,
    /// plus the total length at the end.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        let mut out = vec![0];
        for (h, w) in &self.resolutions {
            acc += h * w;
            out.push(acc);
        }
        out
    }
}

impl TryFrom<Vec<(usize, usize)>> for ScaleSchedule {
    type Error = Error;
    fn try_from(v: Vec<(usize, usize)>) -> Result<Self> {
        ScaleSchedule::new(v)
    }
}

impl From<ScaleSchedule> for Vec<(usize, usize)> {
    fn from(s: ScaleSchedule) -> Self {
        s.resolutions
    }
}

/// Code indices of one scale, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMap {
    scale: usize,
    height: usize,
    width: usize,
    indices: Vec<usize>,
}

impl TokenMap {
    pub fn new(scale: usize, height: usize, width: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.len() != height * width {
            return Err(Error::shape("TokenMap::new", &[height, width], &[indices.len()]));
        }
        Ok(TokenMap {
            scale,
            height,
            width,
            indices,
        })
    }

    pub fn filled(scale: usize, height: usize, width: usize, index: usize) -> Self {
        TokenMap {
            scale,
            height,
            width,
            indices: vec![index; height * width],
        }
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Checks the map against scale `k` of `schedule`.
    pub fn conforms(&self, schedule: &ScaleSchedule, k: usize) -> Result<()> {
        let (h, w) = schedule.get(k)?;
        if self.scale != k || (self.height, self.width) != (h, w) {
            return Err(Error::shape("token map", &[self.scale, self.height, self.width], &[k, h, w]));
        }
        Ok(())
    }
}

/// The shared `V × C` dictionary. Row 0 is the zero vector and never changes.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Tensor,
    usage: Vec<u64>,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self> {
        let &[v, c] = entries.shape() else {
            return Err(Error::shape("Codebook::new", entries.shape(), &[0, 0]));
        };
        if v < 2 {
            return Err(Error::Config(format!("codebook needs at least 2 entries, got {v}")));
        }
        if !entries.is_finite() {
            return Err(Error::NonFinite { op: "Codebook::new" });
        }
        if entries.data()[..c].iter().any(|&x| x != 0.0) {
            return Err(Error::Contract("codebook entry 0 must be the zero vector".into()));
        }
        Ok(Codebook {
            entries,
            usage: vec![0; v],
        })
    }

    /// Gaussian entries with standard deviation `std`, row 0 zeroed.
    pub fn random<R: Rng + ?Sized>(vocab: usize, channels: usize, std: f32, rng: &mut R) -> Result<Self> {
        let mut t = Tensor::randn(&[vocab.max(1), channels.max(1)], std, rng);
        t.data_mut()[..channels].fill(0.0);
        Codebook::new(t)
    }

    pub fn vocab(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.dim();
        &self.entries.data()[i * c..(i + 1) * c]
    }

    /// Lifetime assignment counts, as accumulated by training.
    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub(crate) fn set_row(&mut self, i: usize, values: &[f32]) {
        assert!(i != 0, "codebook entry 0 is frozen");
        let c = self.dim();
        self.entries.data_mut()[i * c..(i + 1) * c].copy_from_slice(values);
    }

    pub(crate) fn add_usage(&mut self, counts: &[u64]) {
        self.usage.iter_mut().zip(counts).for_each(|(u, c)| *u += c);
    }

    /// Index of the nearest entry to `x` by squared Euclidean distance; ties
    /// go to the lowest index.
    pub fn nearest(&self, x: &[f32]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for v in 0..self.vocab() {
            let d: f64 = self.row(v).iter().zip(x).map(|(&z, &f)| (f as f64 - z as f64).powi(2)).sum();
            if d < best_d {
                best_d = d;
                best = v;
            }
        }
        best
    }
}

/// Nearest-entry index for every position of `f: [C, h, w]`, tagged as scale `k`.
pub fn quantize(f: &Tensor, codebook: &Codebook, k: usize) -> Result<TokenMap> {
    let (c, h, w) = f.chw("quantize")?;
    if c != codebook.dim() {
        return Err(Error::shape("quantize", f.shape(), codebook.entries().shape()));
    }
    let n = h * w;
    let mut x = vec![0.0f32; c];
    let indices = (0..n)
        .map(|p| {
            for (ch, slot) in x.iter_mut().enumerate() {
                *slot = f.data()[ch * n + p];
            }
            codebook.nearest(&x)
        })
        .collect();
    TokenMap::new(k, h, w, indices)
}

/// Codebook rows for every position of `r`, as `[C, h, w]`.
pub fn lookup(r: &TokenMap, codebook: &Codebook) -> Result<Tensor> {
    let (c, n, v) = (codebook.dim(), r.indices.len(), codebook.vocab());
    let mut out = vec![0.0f32; c * n];
    for (p, &i) in r.indices.iter().enumerate() {
        if i >= v {
            return Err(Error::Index { index: i, size: v });
        }
        for (ch, &z) in codebook.row(i).iter().enumerate() {
            out[ch * n + p] = z;
        }
    }
    Tensor::new(&[c, r.height, r.width], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_validation() {
        assert_eq!(ScaleSchedule::desk().len(), 10);
        assert_eq!(ScaleSchedule::desk().total_tokens(), 194);
        assert!(ScaleSchedule::new(vec![(2, 2), (4, 4)]).is_err());
        assert!(ScaleSchedule::new(vec![(1, 1), (3, 3), (2, 4)]).is_err());
        assert!(matches!(ScaleSchedule::desk().get(11), Err(Error::Range { .. })));
    }

    #[test]
    fn codebook_rejects_nonzero_first_row() {
        let t = Tensor::new(&[2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(Codebook::new(t).is_err());
        let t = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert!(Codebook::new(t).is_err());
    }

    #[test]
    fn zero_latent_maps_to_entry_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = Codebook::random(8, 3, 1.0, &mut rng).unwrap();
        let r = quantize(&Tensor::zeros(&[3, 2, 2]), &z, 1).unwrap();
        assert!(r.indices().iter().all(|&i| i == 0));
        assert_eq!(lookup(&r, &z).unwrap(), Tensor::zeros(&[3, 2, 2]));
    }

    #[test]
    fn lookup_tiles_single_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Codebook::random(8, 3, 1.0, &mut rng).unwrap();
        let t = lookup(&TokenMap::filled(2, 2, 3, 5), &z).unwrap();
        for ch in 0..3 {
            for p in 0..6 {
                assert_eq!(t.data()[ch * 6 + p], z.row(5)[ch]);
            }
        }
        let bad = TokenMap::filled(1, 1, 1, 8);
        assert!(matches!(lookup(&bad, &z), Err(Error::Index { index: 8, size: 8 })));
    }
}
