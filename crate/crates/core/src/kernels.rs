//! Raw numeric kernels shared by the image pipeline and the autodiff graph.
//!
//! Every linear kernel comes in a forward/adjoint pair. The adjoint is the
//! exact transpose of the forward map, which is what reverse-mode
//! differentiation requires; all pairs are finite-difference checked through
//! the graph layer.
//!
//! Layout convention: feature maps and image planes are channel-major
//! `Array3<T>` with shape `(C, H, W)`.

use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2, Axis};

use crate::tensor::{sc, Scalar};

/// 5-tap binomial kernel, normalized.
const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Mirror an out-of-range index back into `0..n` without repeating the edge
/// sample (numpy's "reflect" mode).
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Map a destination index to fractional source coordinates for bilinear
/// resampling (half-pixel-centered convention), clamped to the source range.
#[inline]
pub fn map_coord(dst_i: usize, dst_n: usize, src_n: usize) -> f64 {
    let s = (dst_i as f64 + 0.5) * (src_n as f64 / dst_n as f64) - 0.5;
    s.clamp(0.0, (src_n - 1) as f64)
}

/// Decompose a fractional coordinate into its two integer neighbours and the
/// weight of the upper one.
#[inline]
pub fn split_coord(s: f64, n: usize) -> (usize, usize, f64) {
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - i0 as f64)
}

/// Precomputed bilinear taps: four source corners plus weights per point.
#[derive(Debug, Clone)]
pub struct BilinearPlan {
    /// Flat (y * w + x) indices of the four corners, per point.
    pub corners: Vec<[u32; 4]>,
    /// Matching interpolation weights, per point.
    pub weights: Vec<[f64; 4]>,
    /// Source plane size the plan was built for.
    pub src_hw: (usize, usize),
}

impl BilinearPlan {
    /// Plan for sampling `points` (fractional source coordinates, already
    /// clamped) from a `src_h x src_w` plane.
    pub fn for_points(src_h: usize, src_w: usize, points: &[(f64, f64)]) -> Self {
        let mut corners = Vec::with_capacity(points.len());
        let mut weights = Vec::with_capacity(points.len());
        for &(sy, sx) in points {
            let (y0, y1, fy) = split_coord(sy, src_h);
            let (x0, x1, fx) = split_coord(sx, src_w);
            let w = src_w as u32;
            corners.push([
                y0 as u32 * w + x0 as u32,
                y0 as u32 * w + x1 as u32,
                y1 as u32 * w + x0 as u32,
                y1 as u32 * w + x1 as u32,
            ]);
            weights.push([
                (1.0 - fy) * (1.0 - fx),
                (1.0 - fy) * fx,
                fy * (1.0 - fx),
                fy * fx,
            ]);
        }
        BilinearPlan {
            corners,
            weights,
            src_hw: (src_h, src_w),
        }
    }

    /// Plan mapping every pixel of a `dst_h x dst_w` grid into the source.
    pub fn for_resize(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Self {
        let mut points = Vec::with_capacity(dst_h * dst_w);
        for y in 0..dst_h {
            let sy = map_coord(y, dst_h, src_h);
            for x in 0..dst_w {
                points.push((sy, map_coord(x, dst_w, src_w)));
            }
        }
        Self::for_points(src_h, src_w, &points)
    }

    pub fn len(&self) -> usize {
        self.corners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corners.is_empty()
    }

    /// Gather: out[p, c] = sum_k w_k * map[c, corner_k].
    pub fn gather<T: Scalar>(&self, map: &Array3<T>) -> Array2<T> {
        let (c, h, w) = map.dim();
        assert_eq!((h, w), self.src_hw, "plan built for a different plane size");
        let plane = h * w;
        let src = map.as_slice().expect("contiguous map");
        let n = self.len();
        let mut out = Array2::<T>::zeros((n, c));
        {
            let out_s = out.as_slice_mut().unwrap();
            for p in 0..n {
                let idx = self.corners[p];
                let wts = self.weights[p];
                for ch in 0..c {
                    let base = ch * plane;
                    let mut acc = T::zero();
                    for k in 0..4 {
                        acc = acc + sc::<T>(wts[k]) * src[base + idx[k] as usize];
                    }
                    out_s[p * c + ch] = acc;
                }
            }
        }
        out
    }

    /// Adjoint of [`gather`](Self::gather): scatter-add grads back to the map.
    pub fn scatter<T: Scalar>(&self, grad_out: &Array2<T>, channels: usize) -> Array3<T> {
        let (h, w) = self.src_hw;
        let plane = h * w;
        let n = self.len();
        assert_eq!(grad_out.dim(), (n, channels));
        let g = grad_out.as_slice().expect("contiguous grad");
        let mut out = Array3::<T>::zeros((channels, h, w));
        {
            let out_s = out.as_slice_mut().unwrap();
            for p in 0..n {
                let idx = self.corners[p];
                let wts = self.weights[p];
                for ch in 0..channels {
                    let base = ch * plane;
                    let go = g[p * channels + ch];
                    for k in 0..4 {
                        out_s[base + idx[k] as usize] =
                            out_s[base + idx[k] as usize] + sc::<T>(wts[k]) * go;
                    }
                }
            }
        }
        out
    }
}

/// Matrix multiply backed by `matrixmultiply`, with a deterministic row-block
/// split across threads for larger problems.
pub fn matmul<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    let (m, ka) = a.dim();
    let (kb, n) = b.dim();
    assert_eq!(ka, kb, "matmul inner dimensions differ: {ka} vs {kb}");
    let mut out = Array2::<T>::zeros((m, n));
    let threads = rayon::current_num_threads().max(1);
    let flops = 2.0 * m as f64 * n as f64 * ka as f64;
    if threads > 1 && m >= 2 * threads && flops > 2e6 {
        let chunk = m.div_ceil(threads);
        let a_chunks: Vec<ArrayView2<T>> = a.axis_chunks_iter(Axis(0), chunk).collect();
        let out_chunks: Vec<ArrayViewMut2<T>> =
            out.axis_chunks_iter_mut(Axis(0), chunk).collect();
        rayon::scope(|s| {
            for (ac, mut oc) in a_chunks.into_iter().zip(out_chunks) {
                s.spawn(move |_| {
                    ndarray::linalg::general_mat_mul(T::one(), &ac, &b, T::zero(), &mut oc);
                });
            }
        });
    } else {
        ndarray::linalg::general_mat_mul(T::one(), &a, &b, T::zero(), &mut out);
    }
    out
}

/// Lower a padded convolution input into column form: rows are
/// `(c, ky, kx)` taps, columns are output pixels.
fn im2col<T: Scalar>(input: &Array3<T>, k: usize, pad: usize) -> Array2<T> {
    let (c_in, h, w) = input.dim();
    let src = input.as_slice().expect("contiguous input");
    let mut cols = Array2::<T>::zeros((c_in * k * k, h * w));
    let cols_s = cols.as_slice_mut().unwrap();
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let row_base = row * h * w;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue; // zero padding
                    }
                    let dst_base = row_base + y * w;
                    let src_base = (c * h + sy as usize) * w;
                    // Valid x range: 0 <= x + kx - pad < w.
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad - kx).min(w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let off = kx as isize - pad as isize;
                    let s_lo = (x_lo as isize + off) as usize;
                    let s_hi = (x_hi as isize + off) as usize;
                    cols_s[dst_base + x_lo..dst_base + x_hi]
                        .copy_from_slice(&src[src_base + s_lo..src_base + s_hi]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulate column-form grads back into image form.
fn col2im<T: Scalar>(cols: &Array2<T>, c_in: usize, h: usize, w: usize, k: usize, pad: usize) -> Array3<T> {
    let mut out = Array3::<T>::zeros((c_in, h, w));
    let out_s = out.as_slice_mut().unwrap();
    let cols_s = cols.as_slice().expect("contiguous cols");
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let row_base = row * h * w;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_base = row_base + y * w;
                    let dst_base = (c * h + sy as usize) * w;
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad - kx).min(w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let off = kx as isize - pad as isize;
                    for x in x_lo..x_hi {
                        let d = dst_base + (x as isize + off) as usize;
                        out_s[d] = out_s[d] + cols_s[src_base + x];
                    }
                }
            }
        }
    }
    out
}

/// Same-size 2-D convolution (odd kernel, zero padding to keep the size).
///
/// `wmat` holds the kernel flattened to `(c_out, c_in * k * k)` with tap
/// order `(c_in, ky, kx)`.
pub fn conv2d_fwd<T: Scalar>(
    input: &Array3<T>,
    wmat: ArrayView2<T>,
    bias: &[T],
    k: usize,
    pad: usize,
) -> Array3<T> {
    let (_c_in, h, w) = input.dim();
    let c_out = wmat.dim().0;
    let cols = im2col(input, k, pad);
    let mut out_mat = matmul(wmat, cols.view());
    for (mut row, &b) in out_mat.axis_iter_mut(Axis(0)).zip(bias.iter()) {
        row.mapv_inplace(|v| v + b);
    }
    out_mat
        .into_shape_with_order((c_out, h, w))
        .expect("conv output reshape")
}

/// Gradient of [`conv2d_fwd`] with respect to its input (weights are frozen).
pub fn conv2d_bwd_input<T: Scalar>(
    grad_out: &Array3<T>,
    wmat: ArrayView2<T>,
    c_in: usize,
    k: usize,
    pad: usize,
) -> Array3<T> {
    let (c_out, h, w) = grad_out.dim();
    let g_mat = grad_out
        .view()
        .into_shape_with_order((c_out, h * w))
        .expect("grad reshape");
    let cols_g = matmul(wmat.t(), g_mat);
    col2im(&cols_g, c_in, h, w, k, pad)
}

/// 2x2 max pooling with stride 2 (floor semantics on odd sizes).
/// Returns the pooled map and the flat argmax index per output element.
pub fn maxpool2_fwd<T: Scalar>(input: &Array3<T>) -> (Array3<T>, Vec<u32>) {
    let (c, h, w) = input.dim();
    let (oh, ow) = (h / 2, w / 2);
    assert!(oh >= 1 && ow >= 1, "maxpool needs at least 2x2 input");
    let src = input.as_slice().unwrap();
    let mut out = Array3::<T>::zeros((c, oh, ow));
    let mut arg = vec![0u32; c * oh * ow];
    {
        let out_s = out.as_slice_mut().unwrap();
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let base = (ch * h + 2 * y) * w + 2 * x;
                    let cand = [base, base + 1, base + w, base + w + 1];
                    let mut best = cand[0];
                    let mut best_v = src[cand[0]];
                    for &i in &cand[1..] {
                        if src[i] > best_v {
                            best_v = src[i];
                            best = i;
                        }
                    }
                    let o = (ch * oh + y) * ow + x;
                    out_s[o] = best_v;
                    arg[o] = best as u32;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_bwd<T: Scalar>(
    grad_out: &Array3<T>,
    arg: &[u32],
    in_shape: (usize, usize, usize),
) -> Array3<T> {
    let mut out = Array3::<T>::zeros(in_shape);
    let out_s = out.as_slice_mut().unwrap();
    let g = grad_out.as_slice().unwrap();
    for (i, &a) in arg.iter().enumerate() {
        out_s[a as usize] = out_s[a as usize] + g[i];
    }
    out
}

/// Separable 5-tap binomial blur with reflect borders, per channel.
pub fn blur5<T: Scalar>(input: &Array3<T>) -> Array3<T> {
    let (c, h, w) = input.dim();
    let taps: [T; 5] = std::array::from_fn(|i| sc(BINOMIAL5[i]));
    let src = input.as_slice().unwrap();
    // Horizontal pass.
    let mut tmp = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let base = (ch * h + y) * w;
            for x in 0..w {
                let mut acc = T::zero();
                for (t, &wt) in taps.iter().enumerate() {
                    let sx = reflect(x as isize + t as isize - 2, w);
                    acc = acc + wt * src[base + sx];
                }
                tmp[base + x] = acc;
            }
        }
    }
    // Vertical pass.
    let mut out = Array3::<T>::zeros((c, h, w));
    {
        let out_s = out.as_slice_mut().unwrap();
        for ch in 0..c {
            for y in 0..h {
                let base = (ch * h + y) * w;
                for x in 0..w {
                    let mut acc = T::zero();
                    for (t, &wt) in taps.iter().enumerate() {
                        let sy = reflect(y as isize + t as isize - 2, h);
                        acc = acc + wt * tmp[(ch * h + sy) * w + x];
                    }
                    out_s[base + x] = acc;
                }
            }
        }
    }
    out
}

/// Adjoint of [`blur5`]: scatter form of the same taps.
pub fn blur5_adjoint<T: Scalar>(grad: &Array3<T>) -> Array3<T> {
    let (c, h, w) = grad.dim();
    let taps: [T; 5] = std::array::from_fn(|i| sc(BINOMIAL5[i]));
    let g = grad.as_slice().unwrap();
    // Adjoint of the vertical pass.
    let mut tmp = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let base = (ch * h + y) * w;
            for x in 0..w {
                let go = g[base + x];
                for (t, &wt) in taps.iter().enumerate() {
                    let sy = reflect(y as isize + t as isize - 2, h);
                    let i = (ch * h + sy) * w + x;
                    tmp[i] = tmp[i] + wt * go;
                }
            }
        }
    }
    // Adjoint of the horizontal pass.
    let mut out = Array3::<T>::zeros((c, h, w));
    {
        let out_s = out.as_slice_mut().unwrap();
        for ch in 0..c {
            for y in 0..h {
                let base = (ch * h + y) * w;
                for x in 0..w {
                    let go = tmp[base + x];
                    for (t, &wt) in taps.iter().enumerate() {
                        let sx = reflect(x as isize + t as isize - 2, w);
                        out_s[base + sx] = out_s[base + sx] + wt * go;
                    }
                }
            }
        }
    }
    out
}

/// Output size of one downsampling step (ceil halving).
#[inline]
pub fn half(n: usize) -> usize {
    n.div_ceil(2)
}

/// Blur then decimate by 2 (keep even rows/columns).
pub fn down2<T: Scalar>(input: &Array3<T>) -> Array3<T> {
    let (c, h, w) = input.dim();
    let blurred = blur5(input);
    let (oh, ow) = (half(h), half(w));
    let mut out = Array3::<T>::zeros((c, oh, ow));
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ch, y, x)] = blurred[(ch, 2 * y, 2 * x)];
            }
        }
    }
    out
}

/// Adjoint of [`down2`].
pub fn down2_adjoint<T: Scalar>(grad: &Array3<T>, out_h: usize, out_w: usize) -> Array3<T> {
    let (c, gh, gw) = grad.dim();
    let mut expanded = Array3::<T>::zeros((c, out_h, out_w));
    for ch in 0..c {
        for y in 0..gh {
            for x in 0..gw {
                expanded[(ch, 2 * y, 2 * x)] = grad[(ch, y, x)];
            }
        }
    }
    blur5_adjoint(&expanded)
}

/// Zero-insert to `(out_h, out_w)` then blur with x4 gain; inverse-direction
/// companion of [`down2`] (sizes must satisfy `half(out) == input`).
pub fn up2<T: Scalar>(input: &Array3<T>, out_h: usize, out_w: usize) -> Array3<T> {
    let (c, h, w) = input.dim();
    assert_eq!(half(out_h), h, "up2 target height {out_h} does not halve to {h}");
    assert_eq!(half(out_w), w, "up2 target width {out_w} does not halve to {w}");
    let mut canvas = Array3::<T>::zeros((c, out_h, out_w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                canvas[(ch, 2 * y, 2 * x)] = input[(ch, y, x)];
            }
        }
    }
    let mut out = blur5(&canvas);
    out.mapv_inplace(|v| v * sc::<T>(4.0));
    out
}

/// Adjoint of [`up2`].
pub fn up2_adjoint<T: Scalar>(grad: &Array3<T>) -> Array3<T> {
    let (c, gh, gw) = grad.dim();
    let mut scaled = grad.clone();
    scaled.mapv_inplace(|v| v * sc::<T>(4.0));
    let spread = blur5_adjoint(&scaled);
    let (h, w) = (half(gh), half(gw));
    let mut out = Array3::<T>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch, y, x)] = spread[(ch, 2 * y, 2 * x)];
            }
        }
    }
    out
}

/// Cut an image into non-overlapping `p x p` patches, one row per patch,
/// columns ordered `(c, py, px)` to match flattened conv-projection weights.
pub fn patchify<T: Scalar>(input: &Array3<T>, p: usize) -> Array2<T> {
    let (c, h, w) = input.dim();
    assert!(h % p == 0 && w % p == 0, "size not divisible by patch");
    let (gh, gw) = (h / p, w / p);
    let mut out = Array2::<T>::zeros((gh * gw, c * p * p));
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        out[(row, (ch * p + py) * p + px)] =
                            input[(ch, gy * p + py, gx * p + px)];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`patchify`] (a pure permutation, so also its inverse map).
pub fn unpatchify<T: Scalar>(grad: &Array2<T>, c: usize, h: usize, w: usize, p: usize) -> Array3<T> {
    let (gh, gw) = (h / p, w / p);
    let mut out = Array3::<T>::zeros((c, h, w));
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        out[(ch, gy * p + py, gx * p + px)] =
                            grad[(row, (ch * p + py) * p + px)];
                    }
                }
            }
        }
    }
    out
}
