//! Affine-invariant depth metrics.
//!
//! Predictions are first fitted to the ground truth by least squares,
//! `a = s·m + t` over valid pixels, and only then scored.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Aligned predictions below this (in metres) are raised to it before
/// scoring, so ratio metrics stay defined.
pub const MIN_ALIGNED_DEPTH: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    /// Fit `s·m + t` to depth.
    #[default]
    Linear,
    /// Fit `s·ln m + t` to `ln d` and exponentiate.
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineFit {
    pub s: f64,
    pub t: f64,
}

impl AffineFit {
    pub fn apply(&self, m: f64) -> f64 {
        self.s * m + self.t
    }
}

fn check_lengths(a: &[f32], d: &[f32], mask: &[bool], op: &'static str) -> Result<()> {
    if a.len() != d.len() || mask.len() != d.len() {
        return Err(Error::shape(op, &[a.len(), d.len()], &[mask.len()]));
    }
    Ok(())
}

/// Least-squares `(s, t)` minimizing `Σ (s·m + t − d)²` over `mask`.
pub fn align_affine(m: &[f32], d: &[f32], mask: &[bool]) -> Result<AffineFit> {
    check_lengths(m, d, mask, "align_affine")?;
    fit(
        m.iter().zip(d).zip(mask).filter(|(_, &ok)| ok).map(|((&m, &d), _)| (m as f64, d as f64)),
    )
}

fn fit(pairs: impl Iterator<Item = (f64, f64)> + Clone) -> Result<AffineFit> {
    let (mut n, mut sm, mut sd) = (0usize, 0.0f64, 0.0f64);
    for (m, d) in pairs.clone() {
        n += 1;
        sm += m;
        sd += d;
    }
    if n < 2 {
        return Err(Error::DegenerateFit(format!("{n} valid pixels")));
    }
    let (mm, md) = (sm / n as f64, sd / n as f64);
    let (mut vmm, mut cmd) = (0.0f64, 0.0f64);
    for (m, d) in pairs {
        vmm += (m - mm) * (m - mm);
        cmd += (m - mm) * (d - md);
    }
    if !(vmm > 1e-12 * (1.0 + mm * mm) * n as f64) {
        return Err(Error::DegenerateFit("prediction is constant over valid pixels".into()));
    }
    let s = cmd / vmm;
    let t = md - s * mm;
    if !(s.is_finite() && t.is_finite()) {
        return Err(Error::DegenerateFit("non-finite fit".into()));
    }
    Ok(AffineFit { s, t })
}

/// Aligned prediction for every pixel (masked-out pixels included).
pub fn align(m: &[f32], d: &[f32], mask: &[bool], mode: AlignMode) -> Result<(Vec<f64>, AffineFit)> {
    check_lengths(m, d, mask, "align")?;
    match mode {
        AlignMode::Linear => {
            let f = align_affine(m, d, mask)?;
            Ok((m.iter().map(|&x| f.apply(x as f64)).collect(), f))
        }
        AlignMode::Log => {
            let valid = m.iter().zip(d).zip(mask).filter(|(_, &ok)| ok);
            if valid.clone().any(|((&m, &d), _)| m <= 0.0 || d <= 0.0) {
                return Err(Error::Data("log alignment needs positive prediction and depth".into()));
            }
            let f = fit(valid.map(|((&m, &d), _)| ((m as f64).ln(), (d as f64).ln())))?;
            let out = m
                .iter()
                .map(|&x| if x > 0.0 { f.apply((x as f64).ln()).exp() } else { 0.0 })
                .collect();
            Ok((out, f))
        }
    }
}

fn valid_depths<'a>(a: &'a [f64], d: &'a [f32], mask: &'a [bool]) -> impl Iterator<Item = (f64, f64)> + 'a {
    a.iter().zip(d).zip(mask).filter(|(_, &ok)| ok).map(|((&a, &d), _)| (a, d as f64))
}

/// Mean of `|a − d| / d` over valid pixels.
pub fn abs_rel(a: &[f64], d: &[f32], mask: &[bool]) -> Result<f64> {
    if a.len() != d.len() || mask.len() != d.len() {
        return Err(Error::shape("abs_rel", &[a.len(), d.len()], &[mask.len()]));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (a, d) in valid_depths(a, d, mask) {
        if !(d > 0.0) {
            return Err(Error::Data(format!("non-positive valid depth {d}")));
        }
        sum += (a - d).abs() / d;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("no valid pixels".into()));
    }
    Ok(sum / n as f64)
}

/// Percentage of valid pixels with `max(a/d, d/a) < 1.25`.
pub fn delta1(a: &[f64], d: &[f32], mask: &[bool]) -> Result<f64> {
    if a.len() != d.len() || mask.len() != d.len() {
        return Err(Error::shape("delta1", &[a.len(), d.len()], &[mask.len()]));
    }
    let (mut hit, mut n) = (0usize, 0usize);
    for (a, d) in valid_depths(a, d, mask) {
        if !(a > 0.0 && d > 0.0) {
            return Err(Error::Data(format!("non-positive value in delta1 (a={a}, d={d})")));
        }
        if (a / d).max(d / a) < 1.25 {
            hit += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("no valid pixels".into()));
    }
    Ok(100.0 * hit as f64 / n as f64)
}

/// Ground truth for one evaluation sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTarget<'a> {
    pub depth: &'a [f32],
    pub valid: &'a [bool],
}

/// What a runner returns for one sample.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Prediction {
    pub depth: Vec<f32>,
    /// Per-scale wall-clock, empty for runners without stages.
    pub stage_ms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub index: usize,
    /// Unitless (not ×100).
    pub abs_rel: f64,
    /// Percent.
    pub delta1: f64,
    pub fit: AffineFit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageLatency {
    pub scale: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleRecord>,
    /// Samples whose fit was degenerate, with the reason.
    pub excluded: Vec<(usize, String)>,
    /// Mean AbsRel ×100.
    pub abs_rel: f64,
    /// Mean δ1 in percent.
    pub delta1: f64,
    pub latency: Vec<StageLatency>,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let (i, j) = (rank.floor() as usize, rank.ceil() as usize);
    sorted[i] + (rank - i as f64) * (sorted[j] - sorted[i])
}

/// Aligns and scores `prediction` against one target.
pub fn score(index: usize, prediction: &[f32], target: &EvalTarget<'_>, mode: AlignMode) -> Result<SampleRecord> {
    let (mut a, fit) = align(prediction, target.depth, target.valid, mode)?;
    a.iter_mut().for_each(|v| *v = v.max(MIN_ALIGNED_DEPTH));
    Ok(SampleRecord {
        index,
        abs_rel: abs_rel(&a, target.depth, target.valid)?,
        delta1: delta1(&a, target.depth, target.valid)?,
        fit,
    })
}

/// Runs `runner` on every sample, aligns, scores and aggregates. Samples
/// with a degenerate fit are excluded and listed; other errors abort.
pub fn evaluate<F>(targets: &[EvalTarget<'_>], mode: AlignMode, mut runner: F) -> Result<EvalReport>
where
    F: FnMut(usize) -> Result<Prediction>,
{
    if targets.is_empty() {
        return Err(Error::Data("no samples found".into()));
    }
    let mut samples = Vec::new();
    let mut excluded = Vec::new();
    let mut stages: Vec<Vec<f64>> = Vec::new();
    for (i, target) in targets.iter().enumerate() {
        let pred = runner(i)?;
        if pred.depth.len() != target.depth.len() {
            return Err(Error::shape("evaluate", &[pred.depth.len()], &[target.depth.len()]));
        }
        for (k, &ms) in pred.stage_ms.iter().enumerate() {
            if stages.len() <= k {
                stages.push(Vec::new());
            }
            stages[k].push(ms);
        }
        match score(i, &pred.depth, target, mode) {
            Ok(r) => samples.push(r),
            Err(Error::DegenerateFit(why)) => excluded.push((i, why)),
            Err(e) => return Err(e),
        }
    }
    let n = samples.len().max(1) as f64;
    let latency = stages
        .into_iter()
        .enumerate()
        .map(|(k, mut v)| {
            v.sort_by(f64::total_cmp);
            StageLatency {
                scale: k + 1,
                mean_ms: v.iter().sum::<f64>() / v.len() as f64,
                p50_ms: percentile(&v, 50.0),
                p90_ms: percentile(&v, 90.0),
            }
        })
        .collect();
    Ok(EvalReport {
        abs_rel: 100.0 * samples.iter().map(|r| r.abs_rel).sum::<f64>() / n,
        delta1: samples.iter().map(|r| r.delta1).sum::<f64>() / n,
        samples,
        excluded,
        latency,
    })
}

impl EvalReport {
    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "samples   {:>8}", self.samples.len());
        let _ = writeln!(out, "excluded  {:>8}", self.excluded.len());
        let _ = writeln!(out, "AbsRel    {:>8.3}", self.abs_rel);
        let _ = writeln!(out, "delta1    {:>8.3}", self.delta1);
        if !self.latency.is_empty() {
            let _ = writeln!(out, "scale   mean_ms    p50_ms    p90_ms");
            for l in &self.latency {
                let _ = writeln!(out, "{:>5} {:>9.3} {:>9.3} {:>9.3}", l.scale, l.mean_ms, l.p50_ms, l.p90_ms);
            }
        }
        out
    }

    /// One `key=value` line per sample, then one per exclusion, then the
    /// aggregate.
    pub fn records(&self) -> String {
        let mut out = String::new();
        for r in &self.samples {
            let _ = writeln!(
                out,
                "sample index={} abs_rel={:.6} delta1={:.4} s={:.6} t={:.6}",
                r.index, r.abs_rel, r.delta1, r.fit.s, r.fit.t
            );
        }
        for (i, why) in &self.excluded {
            let _ = writeln!(out, "excluded index={i} reason={why:?}");
        }
        let _ = writeln!(
            out,
            "aggregate count={} excluded={} abs_rel_x100={:.6} delta1={:.4}",
            self.samples.len(),
            self.excluded.len(),
            self.abs_rel,
            self.delta1
        );
        out
    }
}
