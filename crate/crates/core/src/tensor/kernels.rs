//! Raw compute kernels over flat row-major buffers.
//!
//! Nothing here knows about graphs or shapes beyond the explicit dimensions
//! passed in; the graph layer does validation.

/// General strided matrix view: element `(i, j)` lives at `off + i * rs + j * cs`.
#[derive(Clone, Copy, Debug)]
pub struct MatView {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    /// Row-major `rows × cols` matrix.
    pub fn rm(cols: usize) -> Self {
        MatView { off: 0, rs: cols, cs: 1 }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn rm_t(cols: usize) -> Self {
        MatView { off: 0, rs: 1, cs: cols }
    }

    pub fn at(mut self, off: usize) -> Self {
        self.off = off;
        self
    }
}

/// `c = alpha * a · b + beta * c` with `a: m×k`, `b: k×n`, `c: m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    av: MatView,
    b: &[f32],
    bv: MatView,
    beta: f32,
    c: &mut [f32],
    cv: MatView,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |v: MatView, r: usize, cc: usize| v.off + (r - 1) * v.rs + (cc - 1) * v.cs;
    if k > 0 {
        assert!(last(av, m, k) < a.len(), "gemm: lhs view out of bounds");
        assert!(last(bv, k, n) < b.len(), "gemm: rhs view out of bounds");
    }
    assert!(last(cv, m, n) < c.len(), "gemm: output view out of bounds");
    // SAFETY: the asserts above bound every element the views address.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.off),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.off),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Unfolds a `[cin, h, w]` image into `[cin*9, h*w]` columns for a 3×3,
/// stride 1, zero-padding 1 convolution.
pub fn im2col3(input: &[f32], cin: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let mut cols = vec![0.0f32; cin * 9 * hw];
    for ci in 0..cin {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                let dst = &mut cols[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..sy as usize * w + w];
                    let (x0, x1) = match kx {
                        0 => (1, w),
                        1 => (0, w),
                        _ => (0, w.saturating_sub(1)),
                    };
                    for x in x0..x1 {
                        dst[y * w + x] = src_row[x + kx - 1];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`]: folds column gradients back onto the image.
pub fn col2im3(cols: &[f32], cin: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let mut out = vec![0.0f32; cin * hw];
    for ci in 0..cin {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                let src = &cols[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let (x0, x1) = match kx {
                        0 => (1, w),
                        1 => (0, w),
                        _ => (0, w.saturating_sub(1)),
                    };
                    let base = sy as usize * w;
                    for x in x0..x1 {
                        plane[base + x + kx - 1] += src[y * w + x];
                    }
                }
            }
        }
    }
    out
}

/// Source index pair and interpolation weight for one output coordinate under
/// the align-corners-false convention.
fn bilinear_taps(out: usize, inp: usize) -> Vec<(usize, usize, f32)> {
    let scale = inp as f32 / out as f32;
    (0..out)
        .map(|o| {
            let src = if out == inp {
                o as f32
            } else {
                (scale * (o as f32 + 0.5) - 0.5).max(0.0)
            };
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = if i0 + 1 < inp { i0 + 1 } else { i0 };
            let lambda = if i1 == i0 { 0.0 } else { src - i0 as f32 };
            (i0, i1, lambda)
        })
        .collect()
}

pub fn bilinear_forward(input: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let a = src[y0 * w + x0];
                let b = src[y0 * w + x1];
                let cc = src[y1 * w + x0];
                let d = src[y1 * w + x1];
                // Difference form keeps constant fields exact.
                let top = a + lx * (b - a);
                let bot = cc + lx * (d - cc);
                dst[oy * ow + ox] = top + ly * (bot - top);
            }
        }
    }
    out
}

pub fn bilinear_backward(grad: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let g = &grad[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let go = g[oy * ow + ox];
                dst[y0 * w + x0] += go * (1.0 - lx) * (1.0 - ly);
                dst[y0 * w + x1] += go * lx * (1.0 - ly);
                dst[y1 * w + x0] += go * (1.0 - lx) * ly;
                dst[y1 * w + x1] += go * lx * ly;
            }
        }
    }
    out
}

fn area_bounds(out: usize, inp: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|o| {
            let start = (o * inp) / out;
            let end = ((o + 1) * inp).div_ceil(out);
            (start, end.max(start + 1))
        })
        .collect()
}

pub fn area_forward(input: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let by = area_bounds(oh, h);
    let bx = area_bounds(ow, w);
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1)) in by.iter().enumerate() {
            for (ox, &(x0, x1)) in bx.iter().enumerate() {
                let mut s = 0.0f32;
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += src[y * w + x];
                    }
                }
                out[ch * oh * ow + oy * ow + ox] = s / ((y1 - y0) * (x1 - x0)) as f32;
            }
        }
    }
    out
}

pub fn area_backward(grad: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let by = area_bounds(oh, h);
    let bx = area_bounds(ow, w);
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for (oy, &(y0, y1)) in by.iter().enumerate() {
            for (ox, &(x0, x1)) in bx.iter().enumerate() {
                let g = grad[ch * oh * ow + oy * ow + ox] / ((y1 - y0) * (x1 - x0)) as f32;
                for y in y0..y1 {
                    for x in x0..x1 {
                        out[ch * h * w + y * w + x] += g;
                    }
                }
            }
        }
    }
    out
}

/// Coarse cell of every fine index when `fine` samples are split into
/// `coarse` contiguous groups (`coarse <= fine`).
fn partition(fine: usize, coarse: usize) -> Vec<usize> {
    (0..fine).map(|i| i * coarse / fine).collect()
}

/// Mean over the fine pixels of each coarse cell. Adjoint (up to cell sizes)
/// of [`nearest_forward`] on the same grid pair.
pub fn cell_mean_forward(input: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let py = partition(h, oh);
    let px = partition(w, ow);
    let mut sum = vec![0.0f64; c * oh * ow];
    let mut count = vec![0u32; oh * ow];
    for &cy in &py {
        for &cx in &px {
            count[cy * ow + cx] += 1;
        }
    }
    for ch in 0..c {
        for (y, &cy) in py.iter().enumerate() {
            for (x, &cx) in px.iter().enumerate() {
                sum[ch * oh * ow + cy * ow + cx] += input[ch * h * w + y * w + x] as f64;
            }
        }
    }
    sum.iter()
        .enumerate()
        .map(|(i, &s)| (s / count[i % (oh * ow)] as f64) as f32)
        .collect()
}

/// Copies every coarse value to the fine pixels of its cell.
pub fn nearest_forward(input: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let py = partition(oh, h);
    let px = partition(ow, w);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for &cy in &py {
            for &cx in &px {
                out.push(input[ch * h * w + cy * w + cx]);
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling of `[c, h, w]`.
pub fn upsample2_forward(input: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[ch * oh * ow + y * ow + x] = input[ch * h * w + (y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[ch * h * w + (y / 2) * w + x / 2] += grad[ch * oh * ow + y * ow + x];
            }
        }
    }
    out
}

/// Tanh-approximated GELU and its derivative.
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub fn gelu(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())) as f32
}

pub fn gelu_grad(x: f32) -> f32 {
    let x = x as f64;
    let t = (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh();
    (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x)) as f32
}
