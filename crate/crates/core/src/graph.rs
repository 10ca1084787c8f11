//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] records one forward computation as a list of nodes; calling
//! [`Tape::backward`] on a scalar node walks the list in reverse and
//! accumulates gradients. The op set is exactly what the colorization
//! pipeline needs: convolutional / transformer feature extraction, bilinear
//! sampling, Laplacian-band reconstruction and the distribution metrics.
//!
//! Extractor parameters (conv kernels, linear weights, norm scales) enter as
//! shared constants; gradients are only ever propagated to tape nodes, which
//! is all the optimization requires since the extractors stay frozen.
//!
//! Determinism: every op touches its output elements in a fixed order, so
//! repeated evaluations are bit-identical. All graph tests compare the
//! analytic gradients against [`crate::check::finite_diff_grad`].

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix2, Ix3, IxDyn};

use crate::kernels::{self, BilinearPlan};
use crate::tensor::{sc, Scalar};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Relu(Var),
    Gelu(Var),
    Sqrt(Var),
    Log(Var),
    PowI(Var, i32),
    /// 1/x where x is above a tiny threshold, else 0.
    RecipOrZero(Var),
    /// Per-channel (x - mean_c) / std_c on a channel-major map.
    ChannelAffine {
        input: Var,
        std: [T; 3],
    },
    Conv2d {
        input: Var,
        wmat: Arc<Array2<T>>,
        k: usize,
        pad: usize,
        c_in: usize,
    },
    MaxPool2 {
        input: Var,
        arg: Vec<u32>,
        in_shape: (usize, usize, usize),
    },
    /// Gather bilinear taps from a (C, H, W) map into an (n, C) matrix.
    BilinearSample {
        input: Var,
        plan: Arc<BilinearPlan>,
    },
    /// Full bilinear resize of a (C, H, W) map.
    BilinearResize {
        input: Var,
        plan: Arc<BilinearPlan>,
        out_hw: (usize, usize),
    },
    /// Laplacian-pyramid upsampling step (zero-insert, blur, x4).
    Up2(Var),
    Patchify {
        input: Var,
        p: usize,
        in_shape: (usize, usize, usize),
    },
    LayerNorm {
        input: Var,
        gamma: Arc<Array1<T>>,
        mean: Array1<T>,
        inv_std: Array1<T>,
    },
    Linear {
        input: Var,
        weight: Arc<Array2<T>>,
    },
    MatMul(Var, Var),
    Transpose2(Var),
    SoftmaxRows(Var),
    SliceCols {
        input: Var,
        start: usize,
        len: usize,
    },
    SliceRows {
        input: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
    MeanAxis0(Var),
    SumAxis1(Var),
    MinAxis0 { input: Var, arg: Vec<u32> },
    MaxAxis0 { input: Var, arg: Vec<u32> },
    MinAxis1 { input: Var, arg: Vec<u32> },
    MaxAxis1 { input: Var, arg: Vec<u32> },
    /// Elementwise min/max of two arrays; `take_a` records the winner
    /// (first argument wins ties).
    Min2 { a: Var, b: Var, take_a: Vec<bool> },
    Max2 { a: Var, b: Var, take_a: Vec<bool> },
    SubRowVec(Var, Var),
    MulRowVec(Var, Var),
    DivColVec(Var, Var),
    /// Cosine similarity of two whole arrays flattened, eps-stabilized.
    CosineAll {
        a: Var,
        b: Var,
        norm_a: T,
        norm_b: T,
    },
    /// Combine a fixed luma plane with trainable (Cb, Cr) planes into RGB.
    ChromaToRgb(Var),
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Grads<T: Scalar> {
    slots: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.slots[v.0].as_ref()
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(1024),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 0-d (or single-element) node.
    pub fn scalar(&self, v: Var) -> T {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "node is not a scalar");
        *val.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- leaves -----------------------------------------------------------

    /// Trainable input.
    pub fn leaf_grad(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant input.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let g = self.ng(a);
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let g = self.ng(a);
        self.push(v, Op::AddScalar(a, c), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(T::zero()));
        let g = self.ng(a);
        self.push(v, Op::Relu(a), g)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(gelu_tanh);
        let g = self.ng(a);
        self.push(v, Op::Gelu(a), g)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.sqrt());
        let g = self.ng(a);
        self.push(v, Op::Sqrt(a), g)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.ln());
        let g = self.ng(a);
        self.push(v, Op::Log(a), g)
    }

    pub fn powi(&mut self, a: Var, k: i32) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.powi(k));
        let g = self.ng(a);
        self.push(v, Op::PowI(a, k), g)
    }

    /// 1/x for x above a small threshold, 0 otherwise. Used to neutralize
    /// degenerate (constant) coordinates in joint min-max normalization.
    pub fn recip_or_zero(&mut self, a: Var) -> Var {
        let thr = sc::<T>(1e-12);
        let v = self.nodes[a.0].value.mapv(|x| {
            if x > thr {
                T::one() / x
            } else {
                T::zero()
            }
        });
        let g = self.ng(a);
        self.push(v, Op::RecipOrZero(a), g)
    }

    pub fn channel_affine(&mut self, input: Var, mean: [T; 3], std: [T; 3]) -> Var {
        let map = as3(self.value(input));
        let (c, _, _) = map.dim();
        assert_eq!(c, 3);
        let mut out = map.to_owned();
        for ch in 0..3 {
            out.index_axis_mut(Axis(0), ch)
                .mapv_inplace(|x| (x - mean[ch]) / std[ch]);
        }
        let g = self.ng(input);
        self.push(out.into_dyn(), Op::ChannelAffine { input, std }, g)
    }

    // ---- convolutional stack ----------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        wmat: Arc<Array2<T>>,
        bias: &[T],
        k: usize,
        pad: usize,
    ) -> Var {
        let x = as3(self.value(input)).to_owned();
        let c_in = x.dim().0;
        assert_eq!(wmat.dim().1, c_in * k * k, "conv weight shape mismatch");
        let out = kernels::conv2d_fwd(&x, wmat.view(), bias, k, pad);
        let g = self.ng(input);
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                input,
                wmat,
                k,
                pad,
                c_in,
            },
            g,
        )
    }

    pub fn maxpool2(&mut self, input: Var) -> Var {
        let x = as3(self.value(input)).to_owned();
        let in_shape = x.dim();
        let (out, arg) = kernels::maxpool2_fwd(&x);
        let g = self.ng(input);
        self.push(
            out.into_dyn(),
            Op::MaxPool2 {
                input,
                arg,
                in_shape,
            },
            g,
        )
    }

    pub fn bilinear_sample(&mut self, input: Var, plan: Arc<BilinearPlan>) -> Var {
        let x = as3(self.value(input)).to_owned();
        let out = plan.gather(&x);
        let g = self.ng(input);
        self.push(out.into_dyn(), Op::BilinearSample { input, plan }, g)
    }

    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Var {
        let x = as3(self.value(input)).to_owned();
        let (c, h, w) = x.dim();
        let plan = Arc::new(BilinearPlan::for_resize(h, w, out_h, out_w));
        let sampled = plan.gather(&x); // (out_h*out_w, c)
        let mut out = Array3::<T>::zeros((c, out_h, out_w));
        for ch in 0..c {
            for y in 0..out_h {
                for x2 in 0..out_w {
                    out[(ch, y, x2)] = sampled[(y * out_w + x2, ch)];
                }
            }
        }
        let g = self.ng(input);
        self.push(
            out.into_dyn(),
            Op::BilinearResize {
                input,
                plan,
                out_hw: (out_h, out_w),
            },
            g,
        )
    }

    pub fn up2(&mut self, input: Var, out_h: usize, out_w: usize) -> Var {
        let x = as3(self.value(input)).to_owned();
        let out = kernels::up2(&x, out_h, out_w);
        let g = self.ng(input);
        self.push(out.into_dyn(), Op::Up2(input), g)
    }

    // ---- transformer stack --------------------------------------------------

    pub fn patchify(&mut self, input: Var, p: usize) -> Var {
        let x = as3(self.value(input)).to_owned();
        let in_shape = x.dim();
        let out = kernels::patchify(&x, p);
        let g = self.ng(input);
        self.push(out.into_dyn(), Op::Patchify { input, p, in_shape }, g)
    }

    pub fn layer_norm(
        &mut self,
        input: Var,
        gamma: Arc<Array1<T>>,
        beta: &Array1<T>,
        eps: T,
    ) -> Var {
        let x = as2(self.value(input));
        let (n, d) = x.dim();
        assert_eq!(gamma.len(), d);
        let dt = sc::<T>(d as f64);
        let mut out = Array2::<T>::zeros((n, d));
        let mut mean = Array1::<T>::zeros(n);
        let mut inv_std = Array1::<T>::zeros(n);
        for i in 0..n {
            let row = x.row(i);
            let mu = row.sum() / dt;
            let var = row.fold(T::zero(), |acc, &v| acc + (v - mu) * (v - mu)) / dt;
            let istd = T::one() / (var + eps).sqrt();
            mean[i] = mu;
            inv_std[i] = istd;
            for j in 0..d {
                out[(i, j)] = (x[(i, j)] - mu) * istd * gamma[j] + beta[j];
            }
        }
        let g = self.ng(input);
        self.push(
            out.into_dyn(),
            Op::LayerNorm {
                input,
                gamma,
                mean,
                inv_std,
            },
            g,
        )
    }

    /// `x @ w + b` with shared constant weight `(d_in, d_out)`.
    pub fn linear(&mut self, input: Var, weight: Arc<Array2<T>>, bias: Option<&Array1<T>>) -> Var {
        let x = as2(self.value(input));
        let mut out = kernels::matmul(x, weight.view());
        if let Some(b) = bias {
            for mut row in out.axis_iter_mut(Axis(0)) {
                row.zip_mut_with(b, |o, &bv| *o = *o + bv);
            }
        }
        let g = self.ng(input);
        self.push(out.into_dyn(), Op::Linear { input, weight }, g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        let out = kernels::matmul(av, bv);
        let g = self.ng(a) || self.ng(b);
        self.push(out.into_dyn(), Op::MatMul(a, b), g)
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let v = as2(self.value(a)).t().to_owned();
        let g = self.ng(a);
        self.push(v.into_dyn(), Op::Transpose2(a), g)
    }

    /// Row-wise softmax of a 2-D array (max-shifted for stability).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = as2(self.value(a));
        let (n, d) = x.dim();
        let mut out = Array2::<T>::zeros((n, d));
        for i in 0..n {
            let row = x.row(i);
            let m = row.fold(T::neg_infinity(), |acc, &v| acc.max(v));
            let mut z = T::zero();
            for j in 0..d {
                let e = (x[(i, j)] - m).exp();
                out[(i, j)] = e;
                z = z + e;
            }
            for j in 0..d {
                out[(i, j)] = out[(i, j)] / z;
            }
        }
        let g = self.ng(a);
        self.push(out.into_dyn(), Op::SoftmaxRows(a), g)
    }

    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Var {
        let x = as2(self.value(input));
        let v = x.slice(ndarray::s![.., start..start + len]).to_owned();
        let g = self.ng(input);
        self.push(v.into_dyn(), Op::SliceCols { input, start, len }, g)
    }

    pub fn slice_rows(&mut self, input: Var, start: usize, len: usize) -> Var {
        let x = as2(self.value(input));
        let v = x.slice(ndarray::s![start..start + len, ..]).to_owned();
        let g = self.ng(input);
        self.push(v.into_dyn(), Op::SliceRows { input, start, len }, g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| as2(self.value(p))).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shapes");
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(v.into_dyn(), Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| as2(self.value(p))).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shapes");
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(v.into_dyn(), Op::ConcatRows(parts.to_vec()), g)
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = scalar_arr(self.nodes[a.0].value.sum());
        let g = self.ng(a);
        self.push(v, Op::SumAll(a), g)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let v = scalar_arr(self.nodes[a.0].value.sum() / sc::<T>(n as f64));
        let g = self.ng(a);
        self.push(v, Op::MeanAll(a), g)
    }

    pub fn mean_axis0(&mut self, a: Var) -> Var {
        let x = as2(self.value(a));
        let v = x.mean_axis(Axis(0)).expect("mean_axis0 of empty");
        let g = self.ng(a);
        self.push(v.into_dyn(), Op::MeanAxis0(a), g)
    }

    pub fn sum_axis1(&mut self, a: Var) -> Var {
        let x = as2(self.value(a));
        let v = x.sum_axis(Axis(1));
        let g = self.ng(a);
        self.push(v.into_dyn(), Op::SumAxis1(a), g)
    }

    fn extreme_axis(&mut self, a: Var, axis: usize, take_min: bool) -> Var {
        let x = as2(self.value(a));
        let (n, m) = x.dim();
        let out_len = if axis == 0 { m } else { n };
        let scan_len = if axis == 0 { n } else { m };
        let mut vals = Array1::<T>::zeros(out_len);
        let mut arg = vec![0u32; out_len];
        for o in 0..out_len {
            let mut best_i = 0usize;
            let mut best = if axis == 0 { x[(0, o)] } else { x[(o, 0)] };
            for i in 1..scan_len {
                let v = if axis == 0 { x[(i, o)] } else { x[(o, i)] };
                let better = if take_min { v < best } else { v > best };
                if better {
                    best = v;
                    best_i = i;
                }
            }
            vals[o] = best;
            arg[o] = best_i as u32;
        }
        let g = self.ng(a);
        let op = match (axis, take_min) {
            (0, true) => Op::MinAxis0 { input: a, arg },
            (0, false) => Op::MaxAxis0 { input: a, arg },
            (1, true) => Op::MinAxis1 { input: a, arg },
            _ => Op::MaxAxis1 { input: a, arg },
        };
        self.push(vals.into_dyn(), op, g)
    }

    /// Column minima of a 2-D array (first index wins ties).
    pub fn min_axis0(&mut self, a: Var) -> Var {
        self.extreme_axis(a, 0, true)
    }

    pub fn max_axis0(&mut self, a: Var) -> Var {
        self.extreme_axis(a, 0, false)
    }

    pub fn min_axis1(&mut self, a: Var) -> Var {
        self.extreme_axis(a, 1, true)
    }

    pub fn max_axis1(&mut self, a: Var) -> Var {
        self.extreme_axis(a, 1, false)
    }

    pub fn min2(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let take_a: Vec<bool> = av.iter().zip(bv.iter()).map(|(&x, &y)| x <= y).collect();
        let v = ndarray::Zip::from(av).and(bv).map_collect(|&x, &y| x.min(y));
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Min2 { a, b, take_a }, g)
    }

    pub fn max2(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let take_a: Vec<bool> = av.iter().zip(bv.iter()).map(|(&x, &y)| x >= y).collect();
        let v = ndarray::Zip::from(av).and(bv).map_collect(|&x, &y| x.max(y));
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Max2 { a, b, take_a }, g)
    }

    // ---- broadcasting helpers ----------------------------------------------

    /// `a[i, j] - v[j]`.
    pub fn sub_rowvec(&mut self, a: Var, v: Var) -> Var {
        let x = as2(self.value(a));
        let r = as1(self.value(v));
        assert_eq!(x.dim().1, r.len());
        let out = &x - &r.insert_axis(Axis(0));
        let g = self.ng(a) || self.ng(v);
        self.push(out.into_dyn(), Op::SubRowVec(a, v), g)
    }

    /// `a[i, j] * v[j]`.
    pub fn mul_rowvec(&mut self, a: Var, v: Var) -> Var {
        let x = as2(self.value(a));
        let r = as1(self.value(v));
        assert_eq!(x.dim().1, r.len());
        let out = &x * &r.insert_axis(Axis(0));
        let g = self.ng(a) || self.ng(v);
        self.push(out.into_dyn(), Op::MulRowVec(a, v), g)
    }

    /// `a[i, j] / v[i]`.
    pub fn div_colvec(&mut self, a: Var, v: Var) -> Var {
        let x = as2(self.value(a));
        let c = as1(self.value(v));
        assert_eq!(x.dim().0, c.len());
        let out = &x / &c.insert_axis(Axis(1));
        let g = self.ng(a) || self.ng(v);
        self.push(out.into_dyn(), Op::DivColVec(a, v), g)
    }

    /// Cosine similarity between two same-shape arrays, flattened; norms are
    /// stabilized as sqrt(sum_sq + eps^2).
    pub fn cosine_all(&mut self, a: Var, b: Var, eps: T) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let dot = av
            .iter()
            .zip(bv.iter())
            .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
        let na = (av.iter().fold(T::zero(), |acc, &x| acc + x * x) + eps * eps).sqrt();
        let nb = (bv.iter().fold(T::zero(), |acc, &x| acc + x * x) + eps * eps).sqrt();
        let v = scalar_arr(dot / (na * nb));
        let g = self.ng(a) || self.ng(b);
        self.push(
            v,
            Op::CosineAll {
                a,
                b,
                norm_a: na,
                norm_b: nb,
            },
            g,
        )
    }

    /// Full-range BT.601 chroma-to-RGB: `chroma` is a `(2, H, W)` node of
    /// (Cb, Cr) planes and `luma` a constant plane of the same size.
    pub fn chroma_to_rgb(&mut self, chroma: Var, luma: &Array2<T>) -> Var {
        let c = as3(self.value(chroma));
        let (two, h, w) = c.dim();
        assert_eq!(two, 2, "chroma node must have 2 planes");
        assert_eq!(luma.dim(), (h, w));
        let mut out = Array3::<T>::zeros((3, h, w));
        let (c_rv, c_gu, c_gv, c_bu) = ycbcr_coeffs::<T>();
        for y in 0..h {
            for x in 0..w {
                let (l, u, v) = (luma[(y, x)], c[(0, y, x)], c[(1, y, x)]);
                out[(0, y, x)] = l + c_rv * v;
                out[(1, y, x)] = l + c_gu * u + c_gv * v;
                out[(2, y, x)] = l + c_bu * u;
            }
        }
        let g = self.ng(chroma);
        self.push(out.into_dyn(), Op::ChromaToRgb(chroma), g)
    }

    // ---- backward -----------------------------------------------------------

    /// Accumulate gradients of a scalar `loss` with respect to every node
    /// that needs them.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward requires a scalar loss"
        );
        let mut slots: Vec<Option<ArrayD<T>>> = Vec::with_capacity(self.nodes.len());
        slots.resize_with(self.nodes.len(), || None);
        slots[loss.0] = Some(ArrayD::from_elem(
            self.nodes[loss.0].value.raw_dim(),
            T::one(),
        ));
        for i in (0..self.nodes.len()).rev() {
            if slots[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = slots[i].take().unwrap();
            self.backprop_node(i, &g, &mut slots);
            slots[i] = Some(g);
        }
        Grads { slots }
    }

    fn accum(&self, slots: &mut [Option<ArrayD<T>>], target: Var, contrib: ArrayD<T>) {
        if !self.ng(target) {
            return;
        }
        match &mut slots[target.0] {
            Some(existing) => *existing += &contrib,
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, i: usize, g: &ArrayD<T>, slots: &mut [Option<ArrayD<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(slots, *a, g.clone());
                self.accum(slots, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(slots, *a, g.clone());
                self.accum(slots, *b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                self.accum(slots, *a, g * &self.nodes[b.0].value);
                self.accum(slots, *b, g * &self.nodes[a.0].value);
            }
            Op::Scale(a, c) => self.accum(slots, *a, g.mapv(|v| v * *c)),
            Op::AddScalar(a, _) => self.accum(slots, *a, g.clone()),
            Op::Relu(a) => {
                let mask = self.nodes[a.0].value.mapv(|v| {
                    if v > T::zero() {
                        T::one()
                    } else {
                        T::zero()
                    }
                });
                self.accum(slots, *a, g * &mask);
            }
            Op::Gelu(a) => {
                let d = self.nodes[a.0].value.mapv(gelu_tanh_deriv);
                self.accum(slots, *a, g * &d);
            }
            Op::Sqrt(a) => {
                // Subgradient 0 where the argument is exactly 0.
                let out = &self.nodes[i].value;
                let gin = ndarray::Zip::from(g).and(out).map_collect(|&gv, &ov| {
                    if ov == T::zero() {
                        T::zero()
                    } else {
                        gv / (sc::<T>(2.0) * ov)
                    }
                });
                self.accum(slots, *a, gin);
            }
            Op::Log(a) => {
                self.accum(slots, *a, g / &self.nodes[a.0].value);
            }
            Op::PowI(a, k) => {
                let kk = sc::<T>(*k as f64);
                let k = *k;
                let d = self.nodes[a.0].value.mapv(|v| kk * v.powi(k - 1));
                self.accum(slots, *a, g * &d);
            }
            Op::RecipOrZero(a) => {
                let out = &self.nodes[i].value;
                let gin = ndarray::Zip::from(g)
                    .and(out)
                    .map_collect(|&gv, &ov| -gv * ov * ov);
                self.accum(slots, *a, gin);
            }
            Op::ChannelAffine { input, std } => {
                let gm = as3(g);
                let mut out = gm.to_owned();
                for ch in 0..3 {
                    let s = std[ch];
                    out.index_axis_mut(Axis(0), ch).mapv_inplace(|v| v / s);
                }
                self.accum(slots, *input, out.into_dyn());
            }
            Op::Conv2d {
                input,
                wmat,
                k,
                pad,
                c_in,
            } => {
                let go = as3(g).to_owned();
                let gin = kernels::conv2d_bwd_input(&go, wmat.view(), *c_in, *k, *pad);
                self.accum(slots, *input, gin.into_dyn());
            }
            Op::MaxPool2 {
                input,
                arg,
                in_shape,
            } => {
                let go = as3(g).to_owned();
                let gin = kernels::maxpool2_bwd(&go, arg, *in_shape);
                self.accum(slots, *input, gin.into_dyn());
            }
            Op::BilinearSample { input, plan } => {
                let gm = as2(g).to_owned();
                let c = gm.dim().1;
                let gin = plan.scatter(&gm, c);
                self.accum(slots, *input, gin.into_dyn());
            }
            Op::BilinearResize {
                input,
                plan,
                out_hw,
            } => {
                let go = as3(g);
                let c = go.dim().0;
                let (oh, ow) = *out_hw;
                let mut flat = Array2::<T>::zeros((oh * ow, c));
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            flat[(y * ow + x, ch)] = go[(ch, y, x)];
                        }
                    }
                }
                let gin = plan.scatter(&flat, c);
                self.accum(slots, *input, gin.into_dyn());
            }
            Op::Up2(input) => {
                let go = as3(g).to_owned();
                let gin = kernels::up2_adjoint(&go);
                self.accum(slots, *input, gin.into_dyn());
            }
            Op::Patchify { input, p, in_shape } => {
                let gm = as2(g).to_owned();
                let (c, h, w) = *in_shape;
                let gin = kernels::unpatchify(&gm, c, h, w, *p);
                self.accum(slots, *input, gin.into_dyn());
            }
            Op::LayerNorm {
                input,
                gamma,
                mean,
                inv_std,
            } => {
                let x = as2(self.value(*input));
                let gm = as2(g);
                let (n, d) = x.dim();
                let dt = sc::<T>(d as f64);
                let mut gin = Array2::<T>::zeros((n, d));
                for r in 0..n {
                    let istd = inv_std[r];
                    let mu = mean[r];
                    let mut sum_gx = T::zero();
                    let mut sum_gx_xhat = T::zero();
                    for j in 0..d {
                        let xhat = (x[(r, j)] - mu) * istd;
                        let gx = gm[(r, j)] * gamma[j];
                        sum_gx = sum_gx + gx;
                        sum_gx_xhat = sum_gx_xhat + gx * xhat;
                    }
                    let m1 = sum_gx / dt;
                    let m2 = sum_gx_xhat / dt;
                    for j in 0..d {
                        let xhat = (x[(r, j)] - mu) * istd;
                        let gx = gm[(r, j)] * gamma[j];
                        gin[(r, j)] = istd * (gx - m1 - xhat * m2);
                    }
                }
                self.accum(slots, *input, gin.into_dyn());
            }
            Op::Linear { input, weight } => {
                let gm = as2(g);
                let gin = kernels::matmul(gm, weight.t());
                self.accum(slots, *input, gin.into_dyn());
            }
            Op::MatMul(a, b) => {
                let gm = as2(g);
                if self.ng(*a) {
                    let bv = as2(self.value(*b));
                    let ga = kernels::matmul(gm, bv.t());
                    self.accum(slots, *a, ga.into_dyn());
                }
                if self.ng(*b) {
                    let av = as2(self.value(*a));
                    let gb = kernels::matmul(av.t(), gm);
                    self.accum(slots, *b, gb.into_dyn());
                }
            }
            Op::Transpose2(a) => {
                let gm = as2(g).t().to_owned();
                self.accum(slots, *a, gm.into_dyn());
            }
            Op::SoftmaxRows(a) => {
                let y = as2(&self.nodes[i].value);
                let gm = as2(g);
                let (n, d) = y.dim();
                let mut gin = Array2::<T>::zeros((n, d));
                for r in 0..n {
                    let mut dot = T::zero();
                    for j in 0..d {
                        dot = dot + gm[(r, j)] * y[(r, j)];
                    }
                    for j in 0..d {
                        gin[(r, j)] = y[(r, j)] * (gm[(r, j)] - dot);
                    }
                }
                self.accum(slots, *a, gin.into_dyn());
            }
            Op::SliceCols { input, start, len } => {
                let full = as2(self.value(*input));
                let mut gin = Array2::<T>::zeros(full.dim());
                gin.slice_mut(ndarray::s![.., *start..*start + *len])
                    .assign(&as2(g));
                self.accum(slots, *input, gin.into_dyn());
            }
            Op::SliceRows { input, start, len } => {
                let full = as2(self.value(*input));
                let mut gin = Array2::<T>::zeros(full.dim());
                gin.slice_mut(ndarray::s![*start..*start + *len, ..])
                    .assign(&as2(g));
                self.accum(slots, *input, gin.into_dyn());
            }
            Op::ConcatCols(parts) => {
                let gm = as2(g);
                let mut off = 0usize;
                for &p in parts {
                    let w = as2(self.value(p)).dim().1;
                    let gp = gm.slice(ndarray::s![.., off..off + w]).to_owned();
                    self.accum(slots, p, gp.into_dyn());
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let gm = as2(g);
                let mut off = 0usize;
                for &p in parts {
                    let h = as2(self.value(p)).dim().0;
                    let gp = gm.slice(ndarray::s![off..off + h, ..]).to_owned();
                    self.accum(slots, p, gp.into_dyn());
                    off += h;
                }
            }
            Op::SumAll(a) => {
                let gv = *g.iter().next().unwrap();
                let shape = self.nodes[a.0].value.raw_dim();
                self.accum(slots, *a, ArrayD::from_elem(shape, gv));
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len();
                let gv = *g.iter().next().unwrap() / sc::<T>(n as f64);
                let shape = self.nodes[a.0].value.raw_dim();
                self.accum(slots, *a, ArrayD::from_elem(shape, gv));
            }
            Op::MeanAxis0(a) => {
                let x = as2(self.value(*a));
                let (n, m) = x.dim();
                let gv = as1(g);
                let scale = T::one() / sc::<T>(n as f64);
                let mut gin = Array2::<T>::zeros((n, m));
                for r in 0..n {
                    for j in 0..m {
                        gin[(r, j)] = gv[j] * scale;
                    }
                }
                self.accum(slots, *a, gin.into_dyn());
            }
            Op::SumAxis1(a) => {
                let x = as2(self.value(*a));
                let (n, m) = x.dim();
                let gv = as1(g);
                let mut gin = Array2::<T>::zeros((n, m));
                for r in 0..n {
                    for j in 0..m {
                        gin[(r, j)] = gv[r];
                    }
                }
                self.accum(slots, *a, gin.into_dyn());
            }
            Op::MinAxis0 { input, arg } | Op::MaxAxis0 { input, arg } => {
                let x = as2(self.value(*input));
                let gv = as1(g);
                let mut gin = Array2::<T>::zeros(x.dim());
                for (j, &r) in arg.iter().enumerate() {
                    gin[(r as usize, j)] = gv[j];
                }
                self.accum(slots, *input, gin.into_dyn());
            }
            Op::MinAxis1 { input, arg } | Op::MaxAxis1 { input, arg } => {
                let x = as2(self.value(*input));
                let gv = as1(g);
                let mut gin = Array2::<T>::zeros(x.dim());
                for (r, &j) in arg.iter().enumerate() {
                    gin[(r, j as usize)] = gv[r];
                }
                self.accum(slots, *input, gin.into_dyn());
            }
            Op::Min2 { a, b, take_a } | Op::Max2 { a, b, take_a } => {
                let ga = masked(g, take_a, true);
                let gb = masked(g, take_a, false);
                self.accum(slots, *a, ga);
                self.accum(slots, *b, gb);
            }
            Op::SubRowVec(a, v) => {
                self.accum(slots, *a, g.clone());
                if self.ng(*v) {
                    let gm = as2(g);
                    let gv = gm.sum_axis(Axis(0)).mapv(|x| -x);
                    self.accum(slots, *v, gv.into_dyn());
                }
            }
            Op::MulRowVec(a, v) => {
                let gm = as2(g);
                if self.ng(*a) {
                    let row = as1(self.value(*v));
                    let ga = &gm * &row.insert_axis(Axis(0));
                    self.accum(slots, *a, ga.into_dyn());
                }
                if self.ng(*v) {
                    let x = as2(self.value(*a));
                    let gv = (&gm * &x).sum_axis(Axis(0));
                    self.accum(slots, *v, gv.into_dyn());
                }
            }
            Op::DivColVec(a, v) => {
                let gm = as2(g);
                let col = as1(self.value(*v));
                if self.ng(*a) {
                    let ga = &gm / &col.insert_axis(Axis(1));
                    self.accum(slots, *a, ga.into_dyn());
                }
                if self.ng(*v) {
                    let out = as2(&self.nodes[i].value);
                    let mut gv = Array1::<T>::zeros(col.len());
                    for r in 0..col.len() {
                        let mut acc = T::zero();
                        for j in 0..out.dim().1 {
                            acc = acc + gm[(r, j)] * out[(r, j)];
                        }
                        gv[r] = -acc / col[r];
                    }
                    self.accum(slots, *v, gv.into_dyn());
                }
            }
            Op::CosineAll {
                a,
                b,
                norm_a,
                norm_b,
            } => {
                let gv = *g.iter().next().unwrap();
                let cosv = *self.nodes[i].value.iter().next().unwrap();
                let (na, nb) = (*norm_a, *norm_b);
                if self.ng(*a) {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let ga = ndarray::Zip::from(bv)
                        .and(av)
                        .map_collect(|&y, &x| gv * (y / (na * nb) - cosv * x / (na * na)));
                    self.accum(slots, *a, ga);
                }
                if self.ng(*b) {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let gb = ndarray::Zip::from(av)
                        .and(bv)
                        .map_collect(|&x, &y| gv * (x / (na * nb) - cosv * y / (nb * nb)));
                    self.accum(slots, *b, gb);
                }
            }
            Op::ChromaToRgb(chroma) => {
                let go = as3(g);
                let (_, h, w) = go.dim();
                let (c_rv, c_gu, c_gv, c_bu) = ycbcr_coeffs::<T>();
                let mut gin = Array3::<T>::zeros((2, h, w));
                for y in 0..h {
                    for x in 0..w {
                        gin[(0, y, x)] = c_gu * go[(1, y, x)] + c_bu * go[(2, y, x)];
                        gin[(1, y, x)] = c_rv * go[(0, y, x)] + c_gv * go[(1, y, x)];
                    }
                }
                self.accum(slots, *chroma, gin.into_dyn());
            }
        }
    }
}

/// (r<-cr, g<-cb, g<-cr, b<-cb) coefficients of full-range BT.601.
fn ycbcr_coeffs<T: Scalar>() -> (T, T, T, T) {
    (
        sc::<T>(1.402),
        sc::<T>(-0.344136),
        sc::<T>(-0.714136),
        sc::<T>(1.772),
    )
}

fn masked<T: Scalar>(g: &ArrayD<T>, take_a: &[bool], want_a: bool) -> ArrayD<T> {
    let mut out = g.clone();
    for (o, &ta) in out.iter_mut().zip(take_a.iter()) {
        if ta != want_a {
            *o = T::zero();
        }
    }
    out
}

fn gelu_tanh<T: Scalar>(x: T) -> T {
    let c = sc::<T>(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = sc::<T>(0.044715);
    let half = sc::<T>(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_tanh_deriv<T: Scalar>(x: T) -> T {
    let c = sc::<T>(0.797_884_560_802_865_4);
    let k = sc::<T>(0.044715);
    let half = sc::<T>(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + sc::<T>(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn scalar_arr<T: Scalar>(v: T) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn as1<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView1<'_, T> {
    a.view().into_dimensionality().expect("expected 1-d node")
}

fn as2<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected 2-d node")
}

fn as3<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView3<'_, T> {
    a.view()
        .into_dimensionality::<Ix3>()
        .expect("expected 3-d node")
}
