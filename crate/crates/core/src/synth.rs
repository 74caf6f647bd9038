//! Procedural RGB-D scenes: a pinhole camera at the origin looking down `+z`,
//! planes, axis-aligned boxes and spheres, Lambert shading and a z-buffer.
//!
//! Every sample is a pure function of `(seed, SceneConfig, GENERATOR_VERSION)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bumped whenever rendering output changes for an existing seed.
pub const GENERATOR_VERSION: u32 = 1;

/// Hits beyond this distance are left invalid.
pub const FAR_CLIP: f64 = 20.0;

const LIGHT: [f64; 3] = [-0.35, 0.8, -0.48];
const AMBIENT: f64 = 0.25;
const SKY: [f32; 3] = [0.62, 0.76, 0.95];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneFamily {
    /// Boxes and spheres in a room with a floor and a back wall, 1.5–8 m.
    Indoor,
    /// Ground plane, a distant backdrop and far boxes, open sky.
    Roadway,
    /// Ground plane only.
    Empty,
}

impl std::str::FromStr for SceneFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indoor" => Ok(SceneFamily::Indoor),
            "roadway" => Ok(SceneFamily::Roadway),
            "empty" => Ok(SceneFamily::Empty),
            other => Err(Error::Config(format!("unknown scene family {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub family: SceneFamily,
}

impl SceneConfig {
    pub fn new(height: usize, width: usize, family: SceneFamily) -> Self {
        SceneConfig { height, width, family }
    }
}

/// Pinhole camera; rays leave the origin through pixel centres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    /// Direction (with `z = 1`) through the centre of pixel `(row, col)`.
    pub fn ray(&self, row: usize, col: usize) -> [f64; 3] {
        [
            (col as f64 + 0.5 - self.cx) / self.focal,
            -(row as f64 + 0.5 - self.cy) / self.focal,
            1.0,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Points `p` with `normal · p = offset`; `normal` faces the camera.
    Plane { normal: [f64; 3], offset: f64 },
    Cuboid { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: [f32; 3],
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl Primitive {
    /// Nearest positive ray parameter along `dir` from the origin and the
    /// surface normal there.
    pub fn hit(&self, dir: [f64; 3]) -> Option<(f64, [f64; 3])> {
        match self.shape {
            Shape::Plane { normal, offset } => {
                let denom = dot(normal, dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = offset / denom;
                (t > 0.0).then_some((t, normal))
            }
            Shape::Cuboid { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                for a in 0..3 {
                    if dir[a].abs() < 1e-12 {
                        if 0.0 < min[a] || 0.0 > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut lo, mut hi) = (min[a] / dir[a], max[a] / dir[a]);
                    if lo > hi {
                        std::mem::swap(&mut lo, &mut hi);
                    }
                    if lo > t0 {
                        t0 = lo;
                        axis = a;
                    }
                    t1 = t1.min(hi);
                }
                if t0 > t1 || t0 <= 0.0 {
                    return None;
                }
                let mut n = [0.0; 3];
                n[axis] = -dir[axis].signum();
                Some((t0, n))
            }
            Shape::Sphere { center, radius } => {
                let b = dot(dir, center);
                let a = dot(dir, dir);
                let c = dot(center, center) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (b - disc.sqrt()) / a;
                if t <= 0.0 {
                    return None;
                }
                let p = [dir[0] * t, dir[1] * t, dir[2] * t];
                let n = [
                    (p[0] - center[0]) / radius,
                    (p[1] - center[1]) / radius,
                    (p[2] - center[2]) / radius,
                ];
                Some((t, n))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub camera: Camera,
    pub primitives: Vec<Primitive>,
    pub height: usize,
    pub width: usize,
}

/// Paired RGB image and metric depth.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub rgb: Tensor,
    /// `[H, W]` in metres; 0 where invalid.
    pub depth: Tensor,
    pub valid: Vec<bool>,
    pub seed: u64,
}

impl DepthSample {
    pub fn height(&self) -> usize {
        self.depth.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[1]
    }
}

fn color<R: Rng>(rng: &mut R, lo: f32, hi: f32) -> [f32; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

fn ground(y: f64, albedo: [f32; 3]) -> Primitive {
    // Plane y = -cam_height with its normal pointing up.
    Primitive {
        shape: Shape::Plane {
            normal: [0.0, 1.0, 0.0],
            offset: y,
        },
        albedo,
    }
}

fn cuboid_on(floor: f64, x: f64, z: f64, sx: f64, sy: f64, sz: f64, albedo: [f32; 3]) -> Primitive {
    Primitive {
        shape: Shape::Cuboid {
            min: [x - sx / 2.0, floor, z - sz / 2.0],
            max: [x + sx / 2.0, floor + sy, z + sz / 2.0],
        },
        albedo,
    }
}

impl Scene {
    /// Lays out a random scene of `config.family` from `seed`.
    pub fn generate(seed: u64, config: &SceneConfig) -> Result<Scene> {
        let (h, w) = (config.height, config.width);
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!("image size {h}x{w} must be positive multiples of 8")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((GENERATOR_VERSION as u64) << 56));
        rng.set_stream(config.family as u64);
        // 60° horizontal field of view.
        let focal = w as f64 / 2.0 / (30.0f64).to_radians().tan();
        let mut prims = Vec::new();
        let camera;
        match config.family {
            SceneFamily::Indoor => {
                camera = Camera {
                    focal,
                    cx: w as f64 / 2.0,
                    cy: h as f64 * rng.random_range(0.35..0.5),
                };
                let floor = -rng.random_range(1.2..1.7);
                let back = rng.random_range(5.0..8.0);
                prims.push(ground(floor, color(&mut rng, 0.35, 0.75)));
                prims.push(Primitive {
                    shape: Shape::Plane {
                        normal: [0.0, 0.0, -1.0],
                        offset: -back,
                    },
                    albedo: color(&mut rng, 0.4, 0.9),
                });
                for _ in 0..rng.random_range(3..=8) {
                    let z = rng.random_range(1.8..back - 1.0);
                    let x = rng.random_range(-0.55..0.55) * z;
                    let albedo = color(&mut rng, 0.1, 1.0);
                    if rng.random_bool(0.65) {
                        let (sx, sy, sz) = (rng.random_range(0.3..1.2), rng.random_range(0.3..1.5), rng.random_range(0.3..1.0));
                        prims.push(cuboid_on(floor, x, z + sz / 2.0, sx, sy, sz, albedo));
                    } else {
                        let r = rng.random_range(0.2..0.6);
                        let lift = if rng.random_bool(0.3) { rng.random_range(0.3..1.0) } else { 0.0 };
                        prims.push(Primitive {
                            shape: Shape::Sphere {
                                center: [x, floor + r + lift, z],
                                radius: r,
                            },
                            albedo,
                        });
                    }
                }
            }
            SceneFamily::Roadway => {
                camera = Camera {
                    focal,
                    cx: w as f64 / 2.0,
                    cy: h as f64 * rng.random_range(0.25..0.4),
                };
                let floor = -rng.random_range(1.3..1.8);
                prims.push(ground(floor, color(&mut rng, 0.25, 0.5)));
                let backdrop = rng.random_range(17.0..19.5);
                prims.push(cuboid_on(
                    floor,
                    0.0,
                    backdrop + 1.0,
                    60.0,
                    rng.random_range(3.0..9.0),
                    2.0,
                    color(&mut rng, 0.3, 0.8),
                ));
                for _ in 0..rng.random_range(3..=8) {
                    let z = rng.random_range(4.0..15.0);
                    let x = rng.random_range(-0.6..0.6) * z;
                    let albedo = color(&mut rng, 0.1, 1.0);
                    if rng.random_bool(0.8) {
                        let (sx, sy, sz) = (rng.random_range(1.2..2.5), rng.random_range(1.0..3.0), rng.random_range(1.5..4.0));
                        prims.push(cuboid_on(floor, x, z + sz / 2.0, sx, sy, sz, albedo));
                    } else {
                        let r = rng.random_range(0.4..1.0);
                        prims.push(Primitive {
                            shape: Shape::Sphere {
                                center: [x, floor + r, z],
                                radius: r,
                            },
                            albedo,
                        });
                    }
                }
            }
            SceneFamily::Empty => {
                camera = Camera {
                    focal,
                    cx: w as f64 / 2.0,
                    cy: h as f64 * 0.3,
                };
                prims.push(ground(-1.5, [0.5, 0.5, 0.5]));
            }
        }
        Ok(Scene {
            camera,
            primitives: prims,
            height: h,
            width: w,
        })
    }

    /// Z-buffered render: depth is the `z` coordinate of the nearest hit.
    pub fn render(&self, seed: u64) -> DepthSample {
        let (h, w) = (self.height, self.width);
        let norm = dot(LIGHT, LIGHT).sqrt();
        let light = [LIGHT[0] / norm, LIGHT[1] / norm, LIGHT[2] / norm];
        let mut rgb = vec![0.0f32; 3 * h * w];
        let mut depth = vec![0.0f32; h * w];
        let mut valid = vec![false; h * w];
        for row in 0..h {
            for col in 0..w {
                let dir = self.camera.ray(row, col);
                let mut best: Option<(f64, [f64; 3], [f32; 3])> = None;
                for p in &self.primitives {
                    if let Some((t, n)) = p.hit(dir) {
                        if best.is_none_or(|(bt, _, _)| t < bt) {
                            best = Some((t, n, p.albedo));
                        }
                    }
                }
                let i = row * w + col;
                match best {
                    // dir.z == 1, so the ray parameter is the z depth.
                    Some((t, n, albedo)) if t <= FAR_CLIP => {
                        let shade = (AMBIENT + (1.0 - AMBIENT) * dot(n, light).max(0.0)) as f32;
                        for ch in 0..3 {
                            rgb[ch * h * w + i] = (albedo[ch] * shade).clamp(0.0, 1.0);
                        }
                        depth[i] = t as f32;
                        valid[i] = true;
                    }
                    _ => {
                        for ch in 0..3 {
                            rgb[ch * h * w + i] = SKY[ch];
                        }
                    }
                }
            }
        }
        DepthSample {
            rgb: Tensor::new(&[3, h, w], rgb).expect("rgb shape"),
            depth: Tensor::new(&[h, w], depth).expect("depth shape"),
            valid,
            seed,
        }
    }
}

/// Renders the scene for `seed`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<DepthSample> {
    Ok(Scene::generate(seed, config)?.render(seed))
}

/// Percentile window mapped onto `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationSpec {
    pub p_lo: f64,
    pub p_hi: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        NormalizationSpec { p_lo: 2.0, p_hi: 98.0 }
    }
}

/// The realized depth values sent to `-1` and `+1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub lo: f64,
    pub hi: f64,
}

impl DepthRange {
    /// Nominal range used to turn predictions back into metres when the
    /// ground truth is unknown.
    pub const NOMINAL: DepthRange = DepthRange { lo: 1.0, hi: FAR_CLIP };
}

/// Linear-interpolated percentile of sorted data (`p` in `[0, 100]`).
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let i = rank.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (rank - i as f64) * (sorted[j] - sorted[i])
}

/// Maps valid depth affinely so the `p_lo` and `p_hi` percentiles land on
/// `-1` and `+1`, then clamps. Invalid pixels are set to `+1` (far).
pub fn normalize_depth(depth: &Tensor, valid: &[bool], spec: &NormalizationSpec) -> Result<(Tensor, DepthRange)> {
    if !(0.0 <= spec.p_lo && spec.p_lo < spec.p_hi && spec.p_hi <= 100.0) {
        return Err(Error::Config(format!("invalid percentiles ({}, {})", spec.p_lo, spec.p_hi)));
    }
    if valid.len() != depth.numel() {
        return Err(Error::shape("normalize_depth", depth.shape(), &[valid.len()]));
    }
    let mut vals: Vec<f64> = depth
        .data()
        .iter()
        .zip(valid)
        .filter(|(_, &ok)| ok)
        .map(|(&d, _)| d as f64)
        .collect();
    if vals.is_empty() {
        return Err(Error::Data("no valid depth pixels".into()));
    }
    vals.sort_by(f64::total_cmp);
    let range = DepthRange {
        lo: percentile(&vals, spec.p_lo),
        hi: percentile(&vals, spec.p_hi),
    };
    if !(range.hi - range.lo > 0.0) {
        return Err(Error::DegenerateNormalization);
    }
    let out = depth
        .data()
        .iter()
        .zip(valid)
        .map(|(&d, &ok)| {
            if ok {
                (2.0 * (d as f64 - range.lo) / (range.hi - range.lo) - 1.0).clamp(-1.0, 1.0) as f32
            } else {
                1.0
            }
        })
        .collect();
    Ok((Tensor::new(depth.shape(), out)?, range))
}

/// Inverse of [`normalize_depth`] on `[-1, 1]`.
pub fn denormalize_depth(normalized: &Tensor, range: DepthRange) -> Tensor {
    normalized.map(|n| (range.lo + (n as f64 + 1.0) / 2.0 * (range.hi - range.lo)) as f32)
}

/// Seeds of the three splits, from disjoint consecutive ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

pub fn build_splits(n_train: usize, n_val: usize, n_test: usize, base_seed: u64) -> Splits {
    let start = base_seed.wrapping_mul(1 << 32);
    let range = |from: usize, n: usize| (0..n).map(|i| start.wrapping_add((from + i) as u64)).collect();
    Splits {
        train: range(0, n_train),
        val: range(n_train, n_val),
        test: range(n_train + n_val, n_test),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_depth_grows_toward_horizon() {
        let s = generate_scene(3, &SceneConfig::new(48, 64, SceneFamily::Empty)).unwrap();
        let col = 20;
        let mut last = 0.0;
        for row in (0..48).rev() {
            let i = row * 64 + col;
            if !s.valid[i] {
                break;
            }
            let d = s.depth.data()[i];
            assert!(d > last, "row {row}: {d} <= {last}");
            last = d;
        }
        assert!(last > 5.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::new(48, 64, SceneFamily::Indoor);
        assert_eq!(generate_scene(11, &cfg).unwrap(), generate_scene(11, &cfg).unwrap());
        assert_ne!(generate_scene(11, &cfg).unwrap().depth, generate_scene(12, &cfg).unwrap().depth);
    }

    #[test]
    fn rejects_bad_size() {
        assert!(matches!(
            generate_scene(0, &SceneConfig::new(50, 64, SceneFamily::Indoor)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn constant_depth_is_degenerate() {
        let d = Tensor::full(&[4, 4], 3.0);
        assert!(matches!(
            normalize_depth(&d, &[true; 16], &NormalizationSpec::default()),
            Err(Error::DegenerateNormalization)
        ));
    }

    #[test]
    fn splits_are_disjoint() {
        let s = build_splits(200, 20, 50, 7);
        let mut all: Vec<u64> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 270);
        assert_eq!(build_splits(200, 20, 50, 7), s);
    }
}
