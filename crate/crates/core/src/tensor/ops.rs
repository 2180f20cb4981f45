//! Operator definitions: forward kernels and their vector-Jacobian products.
//!
//! Convolution and the dense layer lower onto GEMM (im2col for conv); the
//! column buffer is recomputed in the backward pass instead of being saved,
//! which keeps graph memory proportional to activations only.

use super::{Graph, Tensor, TensorError, TensorId, TensorResult};
use crate::scalar::{sigmoid, softplus, Scalar};

#[derive(Debug)]
pub(crate) enum Op {
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// y = a*x + b with compile-time constants (stored as f64, cast per use).
    Affine { x: usize, a: f64, b: f64 },
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    /// [C,H,W] -> [H*W, C]; row p = i*W + j holds the channel vector at (i,j).
    ChwToRows { x: usize, c: usize, hw: usize },
    /// Contiguous channel range of a [C,H,W] tensor.
    SliceChannels { x: usize, from: usize, hw: usize },
    /// Horizontal concatenation of [N, c_i] tensors.
    ConcatCols { xs: Vec<usize>, cols: Vec<usize> },
    /// out[:, j] = x[:, perm[j]].
    PermuteCols { x: usize, perm: Vec<usize> },
    /// [N, C] -> [N, C*times] by repeating the whole row block.
    RepeatCols { x: usize, times: usize },
    /// out[r, :] = x[rows[r], :].
    GatherRows { x: usize, rows: Vec<usize> },
    Conv2d { x: usize, w: usize, b: usize, stride: usize, pad: usize },
    Linear { x: usize, w: usize, b: usize },
    UpsampleNearest2 { x: usize },
    /// feat [C,H,W] sampled at pts [N,2] (x,y); integer coords = cell centers.
    BilinearSample { feat: usize, pts: usize },
    /// Per-element sigmoid focal loss against binary targets.
    FocalLoss { logits: usize, targets: usize, alpha: f64, gamma: f64 },
    /// Per-element binary cross-entropy on logits; targets may be soft.
    BceLogits { logits: usize, targets: usize },
}

impl<S: Scalar> Graph<S> {
    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<(), TensorError> {
        if self.tensors[a.0].shape != self.tensors[b.0].shape {
            return Err(TensorError::Shape {
                op,
                detail: format!(
                    "operand shapes differ: {:?} vs {:?}",
                    self.tensors[a.0].shape, self.tensors[b.0].shape
                ),
            });
        }
        Ok(())
    }

    fn rows_cols(&self, op: &'static str, x: TensorId) -> Result<(usize, usize), TensorError> {
        let sh = &self.tensors[x.0].shape;
        if sh.len() != 2 {
            return Err(TensorError::Shape { op, detail: format!("expected a 2-d tensor, got shape {:?}", sh) });
        }
        Ok((sh[0], sh[1]))
    }

    fn chw(&self, op: &'static str, x: TensorId) -> Result<(usize, usize, usize), TensorError> {
        let sh = &self.tensors[x.0].shape;
        if sh.len() != 3 {
            return Err(TensorError::Shape { op, detail: format!("expected a [C,H,W] tensor, got shape {:?}", sh) });
        }
        Ok((sh[0], sh[1], sh[2]))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorResult {
        self.same_shape("add", a, b)?;
        let data = zip_map(&self.tensors[a.0].data, &self.tensors[b.0].data, |x, y| x + y);
        let shape = self.tensors[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a.0, b.0), data, shape, ng))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorResult {
        self.same_shape("sub", a, b)?;
        let data = zip_map(&self.tensors[a.0].data, &self.tensors[b.0].data, |x, y| x - y);
        let shape = self.tensors[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a.0, b.0), data, shape, ng))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorResult {
        self.same_shape("mul", a, b)?;
        let data = zip_map(&self.tensors[a.0].data, &self.tensors[b.0].data, |x, y| x * y);
        let shape = self.tensors[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a.0, b.0), data, shape, ng))
    }

    /// Elementwise y = a*x + b.
    pub fn affine(&mut self, x: TensorId, a: f64, b: f64) -> TensorResult {
        let (sa, sb) = (S::of_f64(a), S::of_f64(b));
        let data = self.tensors[x.0].data.iter().map(|&v| sa * v + sb).collect();
        let shape = self.tensors[x.0].shape.clone();
        let ng = self.needs(x);
        Ok(self.push(Op::Affine { x: x.0, a, b }, data, shape, ng))
    }

    /// Elementwise y = c*x.
    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorResult {
        self.affine(x, c, 0.0)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorResult {
        let data = self.tensors[x.0].data.iter().map(|&v| v.max(S::zero())).collect();
        let shape = self.tensors[x.0].shape.clone();
        let ng = self.needs(x);
        Ok(self.push(Op::Relu(x.0), data, shape, ng))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorResult {
        let data = self.tensors[x.0].data.iter().map(|&v| sigmoid(v)).collect();
        let shape = self.tensors[x.0].shape.clone();
        let ng = self.needs(x);
        Ok(self.push(Op::Sigmoid(x.0), data, shape, ng))
    }

    pub fn exp(&mut self, x: TensorId) -> TensorResult {
        let data = self.tensors[x.0].data.iter().map(|&v| v.exp()).collect();
        let shape = self.tensors[x.0].shape.clone();
        let ng = self.needs(x);
        Ok(self.push(Op::Exp(x.0), data, shape, ng))
    }

    pub fn abs(&mut self, x: TensorId) -> TensorResult {
        let data = self.tensors[x.0].data.iter().map(|&v| v.abs()).collect();
        let shape = self.tensors[x.0].shape.clone();
        let ng = self.needs(x);
        Ok(self.push(Op::Abs(x.0), data, shape, ng))
    }

    /// Sum of all elements; output shape [1].
    pub fn sum(&mut self, x: TensorId) -> TensorResult {
        let mut acc = S::zero();
        for &v in &self.tensors[x.0].data {
            acc += v;
        }
        let ng = self.needs(x);
        Ok(self.push(Op::Sum(x.0), vec![acc], vec![1], ng))
    }

    /// Mean of all elements; output shape [1]. Errors on empty input.
    pub fn mean(&mut self, x: TensorId) -> TensorResult {
        let n = self.tensors[x.0].data.len();
        if n == 0 {
            return Err(TensorError::InvalidArg { op: "mean", detail: "mean of an empty tensor".into() });
        }
        let mut acc = S::zero();
        for &v in &self.tensors[x.0].data {
            acc += v;
        }
        let ng = self.needs(x);
        Ok(self.push(Op::Mean(x.0), vec![acc / S::of_usize(n)], vec![1], ng))
    }

    /// [C,H,W] -> [H*W, C]: row i*W+j is the channel vector at grid cell (i,j).
    pub fn chw_to_rows(&mut self, x: TensorId) -> TensorResult {
        let (c, h, w) = self.chw("chw_to_rows", x)?;
        let hw = h * w;
        let src = &self.tensors[x.0].data;
        let mut data = vec![S::zero(); hw * c];
        for ch in 0..c {
            let base = ch * hw;
            for p in 0..hw {
                data[p * c + ch] = src[base + p];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Op::ChwToRows { x: x.0, c, hw }, data, vec![hw, c], ng))
    }

    /// Channels `from..to` of a [C,H,W] tensor.
    pub fn slice_channels(&mut self, x: TensorId, from: usize, to: usize) -> TensorResult {
        let (c, h, w) = self.chw("slice_channels", x)?;
        if from >= to || to > c {
            return Err(TensorError::InvalidArg {
                op: "slice_channels",
                detail: format!("range {}..{} invalid for {} channels", from, to, c),
            });
        }
        let hw = h * w;
        let data = self.tensors[x.0].data[from * hw..to * hw].to_vec();
        let ng = self.needs(x);
        Ok(self.push(Op::SliceChannels { x: x.0, from, hw }, data, vec![to - from, h, w], ng))
    }

    /// Concatenates 2-d tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, xs: &[TensorId]) -> TensorResult {
        if xs.is_empty() {
            return Err(TensorError::InvalidArg { op: "concat_cols", detail: "no inputs".into() });
        }
        let (n, _) = self.rows_cols("concat_cols", xs[0])?;
        let mut cols = Vec::with_capacity(xs.len());
        for &x in xs {
            let (nx, cx) = self.rows_cols("concat_cols", x)?;
            if nx != n {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    detail: format!("row counts differ: {} vs {}", n, nx),
                });
            }
            cols.push(cx);
        }
        let total: usize = cols.iter().sum();
        let mut data = vec![S::zero(); n * total];
        let mut offset = 0;
        for (slot, &x) in xs.iter().enumerate() {
            let cx = cols[slot];
            let src = &self.tensors[x.0].data;
            for r in 0..n {
                data[r * total + offset..r * total + offset + cx].copy_from_slice(&src[r * cx..(r + 1) * cx]);
            }
            offset += cx;
        }
        let ng = xs.iter().any(|&x| self.needs(x));
        let ids = xs.iter().map(|t| t.0).collect();
        Ok(self.push(Op::ConcatCols { xs: ids, cols }, data, vec![n, total], ng))
    }

    /// Column gather: out[:, j] = x[:, perm[j]]. `perm` must be a permutation.
    pub fn permute_cols(&mut self, x: TensorId, perm: &[usize]) -> TensorResult {
        let (n, c) = self.rows_cols("permute_cols", x)?;
        let mut seen = vec![false; c];
        if perm.len() != c || perm.iter().any(|&p| p >= c || std::mem::replace(&mut seen[p.min(c - 1)], true)) {
            return Err(TensorError::InvalidArg {
                op: "permute_cols",
                detail: format!("perm {:?} is not a permutation of 0..{}", perm, c),
            });
        }
        let src = &self.tensors[x.0].data;
        let mut data = vec![S::zero(); n * c];
        for r in 0..n {
            for (j, &p) in perm.iter().enumerate() {
                data[r * c + j] = src[r * c + p];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Op::PermuteCols { x: x.0, perm: perm.to_vec() }, data, vec![n, c], ng))
    }

    /// [N,C] -> [N, C*times]: each row becomes `times` copies of itself.
    pub fn repeat_cols(&mut self, x: TensorId, times: usize) -> TensorResult {
        if times == 0 {
            return Err(TensorError::InvalidArg { op: "repeat_cols", detail: "times must be >= 1".into() });
        }
        let (n, c) = self.rows_cols("repeat_cols", x)?;
        let src = &self.tensors[x.0].data;
        let mut data = vec![S::zero(); n * c * times];
        for r in 0..n {
            let row = &src[r * c..(r + 1) * c];
            for t in 0..times {
                data[(r * times + t) * c..(r * times + t + 1) * c].copy_from_slice(row);
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Op::RepeatCols { x: x.0, times }, data, vec![n, c * times], ng))
    }

    /// Row gather: out[r, :] = x[rows[r], :]. Duplicate rows are allowed.
    pub fn gather_rows(&mut self, x: TensorId, rows: &[usize]) -> TensorResult {
        let (n, c) = self.rows_cols("gather_rows", x)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TensorError::InvalidArg {
                op: "gather_rows",
                detail: format!("row index {} out of range for {} rows", bad, n),
            });
        }
        let src = &self.tensors[x.0].data;
        let mut data = vec![S::zero(); rows.len() * c];
        for (r, &s) in rows.iter().enumerate() {
            data[r * c..(r + 1) * c].copy_from_slice(&src[s * c..(s + 1) * c]);
        }
        let ng = self.needs(x);
        Ok(self.push(Op::GatherRows { x: x.0, rows: rows.to_vec() }, data, vec![rows.len(), c], ng))
    }

    /// 2-d convolution of x [Cin,H,W] with w [Cout,Cin,kh,kw] plus bias
    /// [Cout]. Output size uses floor division:
    /// H' = (H + 2*pad - kh) / stride + 1.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, b: TensorId, stride: usize, pad: usize) -> TensorResult {
        if stride == 0 {
            return Err(TensorError::InvalidArg { op: "conv2d", detail: "stride must be >= 1".into() });
        }
        let (cin, h, wd) = self.chw("conv2d", x)?;
        let wsh = &self.tensors[w.0].shape;
        if wsh.len() != 4 {
            return Err(TensorError::Shape {
                op: "conv2d",
                detail: format!("weight must be [Cout,Cin,kh,kw], got {:?}", wsh),
            });
        }
        let (cout, wcin, kh, kw) = (wsh[0], wsh[1], wsh[2], wsh[3]);
        if wcin != cin {
            return Err(TensorError::Shape {
                op: "conv2d",
                detail: format!("input channel axis: input has {}, weight expects {}", cin, wcin),
            });
        }
        if self.tensors[b.0].shape != vec![cout] {
            return Err(TensorError::Shape {
                op: "conv2d",
                detail: format!("bias shape {:?} does not match Cout {}", self.tensors[b.0].shape, cout),
            });
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TensorError::Shape {
                op: "conv2d",
                detail: format!(
                    "padded input {}x{} smaller than kernel {}x{}",
                    h + 2 * pad,
                    wd + 2 * pad,
                    kh,
                    kw
                ),
            });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let ckk = cin * kh * kw;
        let col = im2col(&self.tensors[x.0].data, cin, h, wd, kh, kw, stride, pad, ho, wo);
        let mut data = vec![S::zero(); cout * ho * wo];
        gemm_rm(
            cout,
            ckk,
            ho * wo,
            S::one(),
            &self.tensors[w.0].data,
            ckk,
            &col,
            ho * wo,
            S::zero(),
            &mut data,
            ho * wo,
        );
        for co in 0..cout {
            let bias = self.tensors[b.0].data[co];
            for v in &mut data[co * ho * wo..(co + 1) * ho * wo] {
                *v += bias;
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Conv2d { x: x.0, w: w.0, b: b.0, stride, pad }, data, vec![cout, ho, wo], ng))
    }

    /// Dense layer: out[N,Cout] = x[N,Cin] @ w[Cout,Cin]^T + b[Cout].
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorResult {
        let (n, cin) = self.rows_cols("linear", x)?;
        let (cout, wcin) = self.rows_cols("linear", w)?;
        if wcin != cin {
            return Err(TensorError::Shape {
                op: "linear",
                detail: format!("input feature axis: input has {}, weight expects {}", cin, wcin),
            });
        }
        if self.tensors[b.0].shape != vec![cout] {
            return Err(TensorError::Shape {
                op: "linear",
                detail: format!("bias shape {:?} does not match Cout {}", self.tensors[b.0].shape, cout),
            });
        }
        let mut data = vec![S::zero(); n * cout];
        // B = w^T via strides: element (ci, co) sits at w[co*cin + ci].
        unsafe {
            S::gemm(
                n,
                cin,
                cout,
                S::one(),
                self.tensors[x.0].data.as_ptr(),
                cin as isize,
                1,
                self.tensors[w.0].data.as_ptr(),
                1,
                cin as isize,
                S::zero(),
                data.as_mut_ptr(),
                cout as isize,
                1,
            );
        }
        for r in 0..n {
            for co in 0..cout {
                data[r * cout + co] += self.tensors[b.0].data[co];
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Linear { x: x.0, w: w.0, b: b.0 }, data, vec![n, cout], ng))
    }

    /// Nearest-neighbour 2x upsampling: [C,H,W] -> [C,2H,2W].
    pub fn upsample_nearest2(&mut self, x: TensorId) -> TensorResult {
        let (c, h, w) = self.chw("upsample_nearest2", x)?;
        let src = &self.tensors[x.0].data;
        let (h2, w2) = (2 * h, 2 * w);
        let mut data = vec![S::zero(); c * h2 * w2];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = src[(ch * h + i) * w + j];
                    let base = (ch * h2 + 2 * i) * w2 + 2 * j;
                    data[base] = v;
                    data[base + 1] = v;
                    data[base + w2] = v;
                    data[base + w2 + 1] = v;
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Op::UpsampleNearest2 { x: x.0 }, data, vec![c, h2, w2], ng))
    }

    /// Bilinear sampling of feat [C,H,W] at pts [N,2] rows (x, y), where
    /// integer coordinates coincide with cell centers. Out-of-range
    /// coordinates clamp to the border; the gradient with respect to a
    /// clamped coordinate is zero. Differentiable in both features and
    /// points. Output is [N, C].
    pub fn bilinear_sample(&mut self, feat: TensorId, pts: TensorId) -> TensorResult {
        let (c, h, w) = self.chw("bilinear_sample", feat)?;
        let (n, two) = self.rows_cols("bilinear_sample", pts)?;
        if two != 2 {
            return Err(TensorError::Shape {
                op: "bilinear_sample",
                detail: format!("points must be [N,2], got [{}, {}]", n, two),
            });
        }
        let src = &self.tensors[feat.0].data;
        let p = &self.tensors[pts.0].data;
        let mut data = vec![S::zero(); n * c];
        for r in 0..n {
            let t = taps(p[r * 2], p[r * 2 + 1], w, h);
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let top = lerp(plane[t.y0 * w + t.x0], plane[t.y0 * w + t.x1], t.fx);
                let bot = lerp(plane[t.y1 * w + t.x0], plane[t.y1 * w + t.x1], t.fx);
                data[r * c + ch] = lerp(top, bot, t.fy);
            }
        }
        let ng = self.needs(feat) || self.needs(pts);
        Ok(self.push(Op::BilinearSample { feat: feat.0, pts: pts.0 }, data, vec![n, c], ng))
    }

    /// Per-element sigmoid focal loss. Targets must be exactly 0 or 1.
    /// For target 1: -alpha * (1-p)^gamma * log p with p = sigmoid(logit);
    /// for target 0 the symmetric form with weight (1-alpha). Computed from
    /// softplus so large logits stay finite.
    pub fn sigmoid_focal_loss(&mut self, logits: TensorId, targets: TensorId, alpha: f64, gamma: f64) -> TensorResult {
        self.same_shape("sigmoid_focal_loss", logits, targets)?;
        if !(0.0..=1.0).contains(&alpha) || gamma < 0.0 {
            return Err(TensorError::InvalidArg {
                op: "sigmoid_focal_loss",
                detail: format!("alpha must be in [0,1] and gamma >= 0; got alpha={}, gamma={}", alpha, gamma),
            });
        }
        debug_assert!(
            self.tensors[targets.0].data.iter().all(|&t| t == S::zero() || t == S::one()),
            "focal loss targets must be binary"
        );
        let (sa, sg) = (S::of_f64(alpha), S::of_f64(gamma));
        let data = zip_map(&self.tensors[logits.0].data, &self.tensors[targets.0].data, |x, t| {
            if t >= S::of_f64(0.5) {
                sa * sigmoid(-x).powf(sg) * softplus(-x)
            } else {
                (S::one() - sa) * sigmoid(x).powf(sg) * softplus(x)
            }
        });
        let shape = self.tensors[logits.0].shape.clone();
        let ng = self.needs(logits);
        Ok(self.push(Op::FocalLoss { logits: logits.0, targets: targets.0, alpha, gamma }, data, shape, ng))
    }

    /// Per-element binary cross-entropy on logits; targets may be any value
    /// in [0,1]. Uses softplus(x) - t*x, which is exact and stable.
    pub fn bce_with_logits(&mut self, logits: TensorId, targets: TensorId) -> TensorResult {
        self.same_shape("bce_with_logits", logits, targets)?;
        debug_assert!(
            self.tensors[targets.0].data.iter().all(|&t| t >= S::zero() && t <= S::one()),
            "bce targets must lie in [0,1]"
        );
        let data = zip_map(&self.tensors[logits.0].data, &self.tensors[targets.0].data, |x, t| softplus(x) - t * x);
        let shape = self.tensors[logits.0].shape.clone();
        let ng = self.needs(logits);
        Ok(self.push(Op::BceLogits { logits: logits.0, targets: targets.0 }, data, shape, ng))
    }
}

fn zip_map<S: Scalar>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn lerp<S: Scalar>(a: S, b: S, f: S) -> S {
    a + (b - a) * f
}

/// Row-major GEMM helper: C = alpha * A(m,k) @ B(k,n) + beta * C, where each
/// operand is described by its leading (row) stride.
fn gemm_rm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: &[S],
    lda: usize,
    b: &[S],
    ldb: usize,
    beta: S,
    c: &mut [S],
    ldc: usize,
) {
    debug_assert!(a.len() >= m.saturating_sub(1) * lda + k);
    debug_assert!(b.len() >= k.saturating_sub(1) * ldb + n);
    debug_assert!(c.len() >= m.saturating_sub(1) * ldc + n);
    unsafe {
        S::gemm(m, k, n, alpha, a.as_ptr(), lda as isize, 1, b.as_ptr(), ldb as isize, 1, beta, c.as_mut_ptr(), ldc as isize, 1);
    }
}

struct Taps<S> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: S,
    fy: S,
    dx_free: bool,
    dy_free: bool,
}

/// Clamped bilinear tap positions for a point on a WxH grid.
fn taps<S: Scalar>(px: S, py: S, w: usize, h: usize) -> Taps<S> {
    let (x0, x1, fx, dx_free) = axis_taps(px, w);
    let (y0, y1, fy, dy_free) = axis_taps(py, h);
    Taps { x0, x1, y0, y1, fx, fy, dx_free, dy_free }
}

fn axis_taps<S: Scalar>(p: S, extent: usize) -> (usize, usize, S, bool) {
    if extent == 1 {
        return (0, 0, S::zero(), false);
    }
    let max = S::of_usize(extent - 1);
    let (c, free) = if p < S::zero() {
        (S::zero(), false)
    } else if p > max {
        (max, false)
    } else {
        (p, true)
    };
    let mut i0 = c.floor().as_f64() as usize;
    if i0 > extent - 2 {
        i0 = extent - 2;
    }
    let f = c - S::of_usize(i0);
    (i0, i0 + 1, f, free)
}

/// Gradient buffer for tensor `id`, allocated on first touch; `None` when the
/// tensor is not on a differentiable path.
fn grad_mut<'a, S: Scalar>(
    tensors: &[Tensor<S>],
    grads: &'a mut [Option<Vec<S>>],
    id: usize,
) -> Option<&'a mut [S]> {
    if !tensors[id].needs_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![S::zero(); tensors[id].data.len()]).as_mut_slice())
}

pub(crate) fn backward_node<S: Scalar>(
    tensors: &[Tensor<S>],
    grads: &mut [Option<Vec<S>>],
    op: &Op,
    gout: &[S],
) {
    match op {
        Op::Add(a, b) => {
            if let Some(ga) = grad_mut(tensors, grads, *a) {
                for (g, &d) in ga.iter_mut().zip(gout) {
                    *g += d;
                }
            }
            if let Some(gb) = grad_mut(tensors, grads, *b) {
                for (g, &d) in gb.iter_mut().zip(gout) {
                    *g += d;
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = grad_mut(tensors, grads, *a) {
                for (g, &d) in ga.iter_mut().zip(gout) {
                    *g += d;
                }
            }
            if let Some(gb) = grad_mut(tensors, grads, *b) {
                for (g, &d) in gb.iter_mut().zip(gout) {
                    *g -= d;
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = grad_mut(tensors, grads, *a) {
                for ((g, &d), &bv) in ga.iter_mut().zip(gout).zip(&tensors[*b].data) {
                    *g += d * bv;
                }
            }
            if let Some(gb) = grad_mut(tensors, grads, *b) {
                for ((g, &d), &av) in gb.iter_mut().zip(gout).zip(&tensors[*a].data) {
                    *g += d * av;
                }
            }
        }
        Op::Affine { x, a, .. } => {
            if let Some(gx) = grad_mut(tensors, grads, *x) {
                let sa = S::of_f64(*a);
                for (g, &d) in gx.iter_mut().zip(gout) {
                    *g += sa * d;
                }
            }
        }
        Op::Relu(x) => {
            if let Some(gx) = grad_mut(tensors, grads, *x) {
                for ((g, &d), &xv) in gx.iter_mut().zip(gout).zip(&tensors[*x].data) {
                    if xv > S::zero() {
                        *g += d;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = grad_mut(tensors, grads, *x) {
                // Uses the stored output: d sigma = y * (1 - y).
                let xd = &tensors[*x].data;
                for ((g, &d), &xv) in gx.iter_mut().zip(gout).zip(xd) {
                    let y = sigmoid(xv);
                    *g += d * y * (S::one() - y);
                }
            }
        }
        Op::Exp(x) => {
            if let Some(gx) = grad_mut(tensors, grads, *x) {
                for ((g, &d), &xv) in gx.iter_mut().zip(gout).zip(&tensors[*x].data) {
                    *g += d * xv.exp();
                }
            }
        }
        Op::Abs(x) => {
            if let Some(gx) = grad_mut(tensors, grads, *x) {
                for ((g, &d), &xv) in gx.iter_mut().zip(gout).zip(&tensors[*x].data) {
                    if xv > S::zero() {
                        *g += d;
                    } else if xv < S::zero() {
                        *g -= d;
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = grad_mut(tensors, grads, *x) {
                let d = gout[0];
                for g in gx.iter_mut() {
                    *g += d;
                }
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = grad_mut(tensors, grads, *x) {
                let d = gout[0] / S::of_usize(tensors[*x].data.len());
                for g in gx.iter_mut() {
                    *g += d;
                }
            }
        }
        Op::ChwToRows { x, c, hw } => {
            if let Some(gx) = grad_mut(tensors, grads, *x) {
                for ch in 0..*c {
                    for p in 0..*hw {
                        gx[ch * hw + p] += gout[p * c + ch];
                    }
                }
            }
        }
        Op::SliceChannels { x, from, hw } => {
            if let Some(gx) = grad_mut(tensors, grads, *x) {
                let base = from * hw;
                for (g, &d) in gx[base..base + gout.len()].iter_mut().zip(gout) {
                    *g += d;
                }
            }
        }
        Op::ConcatCols { xs, cols } => {
            let total: usize = cols.iter().sum();
            let n = if total == 0 { 0 } else { gout.len() / total };
            let mut offset = 0;
            for (slot, &x) in xs.iter().enumerate() {
                let cx = cols[slot];
                if let Some(gx) = grad_mut(tensors, grads, x) {
                    for r in 0..n {
                        for j in 0..cx {
                            gx[r * cx + j] += gout[r * total + offset + j];
                        }
                    }
                }
                offset += cx;
            }
        }
        Op::PermuteCols { x, perm } => {
            if let Some(gx) = grad_mut(tensors, grads, *x) {
                let c = perm.len();
                let n = gout.len() / c;
                for r in 0..n {
                    for (j, &p) in perm.iter().enumerate() {
                        gx[r * c + p] += gout[r * c + j];
                    }
                }
            }
        }
        Op::RepeatCols { x, times } => {
            if let Some(gx) = grad_mut(tensors, grads, *x) {
                let nc = gx.len();
                let c = nc / tensors[*x].shape[0];
                let n = tensors[*x].shape[0];
                for r in 0..n {
                    for t in 0..*times {
                        for j in 0..c {
                            gx[r * c + j] += gout[(r * times + t) * c + j];
                        }
                    }
                }
            }
        }
        Op::GatherRows { x, rows } => {
            if let Some(gx) = grad_mut(tensors, grads, *x) {
                let c = if rows.is_empty() { 0 } else { gout.len() / rows.len() };
                for (r, &s) in rows.iter().enumerate() {
                    for j in 0..c {
                        gx[s * c + j] += gout[r * c + j];
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            backward_conv2d(tensors, grads, *x, *w, *b, *stride, *pad, gout);
        }
        Op::Linear { x, w, b } => {
            backward_linear(tensors, grads, *x, *w, *b, gout);
        }
        Op::UpsampleNearest2 { x } => {
            if let Some(gx) = grad_mut(tensors, grads, *x) {
                let sh = &tensors[*x].shape;
                let (c, h, w) = (sh[0], sh[1], sh[2]);
                let (h2, w2) = (2 * h, 2 * w);
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let base = (ch * h2 + 2 * i) * w2 + 2 * j;
                            gx[(ch * h + i) * w + j] +=
                                gout[base] + gout[base + 1] + gout[base + w2] + gout[base + w2 + 1];
                        }
                    }
                }
            }
        }
        Op::BilinearSample { feat, pts } => {
            backward_bilinear(tensors, grads, *feat, *pts, gout);
        }
        Op::FocalLoss { logits, targets, alpha, gamma } => {
            if let Some(gl) = grad_mut(tensors, grads, *logits) {
                let (sa, sg) = (S::of_f64(*alpha), S::of_f64(*gamma));
                let xd = &tensors[*logits].data;
                let td = &tensors[*targets].data;
                for i in 0..gl.len() {
                    let x = xd[i];
                    let p = sigmoid(x);
                    let d = if td[i] >= S::of_f64(0.5) {
                        // d/dx [-a (1-p)^g ln p] = a (1-p)^g (g p ln p - (1-p))
                        let one_m_p = sigmoid(-x);
                        let ln_p = -softplus(-x);
                        sa * one_m_p.powf(sg) * (sg * p * ln_p - one_m_p)
                    } else {
                        // symmetric form for target 0
                        let ln_1mp = -softplus(x);
                        (S::one() - sa) * p.powf(sg) * (p - sg * (S::one() - p) * ln_1mp)
                    };
                    gl[i] += gout[i] * d;
                }
            }
        }
        Op::BceLogits { logits, targets } => {
            if let Some(gl) = grad_mut(tensors, grads, *logits) {
                let xd = &tensors[*logits].data;
                let td = &tensors[*targets].data;
                for i in 0..gl.len() {
                    gl[i] += gout[i] * (sigmoid(xd[i]) - td[i]);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_conv2d<S: Scalar>(
    tensors: &[Tensor<S>],
    grads: &mut [Option<Vec<S>>],
    x: usize,
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
    gout: &[S],
) {
    let xsh = &tensors[x].shape;
    let wsh = &tensors[w].shape;
    let (cin, h, wd) = (xsh[0], xsh[1], xsh[2]);
    let (cout, kh, kw) = (wsh[0], wsh[2], wsh[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let ckk = cin * kh * kw;
    let need_x = tensors[x].needs_grad;
    let need_w = tensors[w].needs_grad;

    if need_w {
        // d_w[co, ckk] += gout[co, :] . col[ckk, :]^T   (col recomputed)
        let col = im2col(&tensors[x].data, cin, h, wd, kh, kw, stride, pad, ho, wo);
        let gw = grad_mut(tensors, grads, w).expect("weight grad buffer");
        unsafe {
            S::gemm(
                cout,
                ho * wo,
                ckk,
                S::one(),
                gout.as_ptr(),
                (ho * wo) as isize,
                1,
                col.as_ptr(),
                1,
                (ho * wo) as isize,
                S::one(),
                gw.as_mut_ptr(),
                ckk as isize,
                1,
            );
        }
    }
    if need_x {
        // d_col = w^T @ gout, then scattered back through the im2col map.
        let mut dcol = vec![S::zero(); ckk * ho * wo];
        unsafe {
            S::gemm(
                ckk,
                cout,
                ho * wo,
                S::one(),
                tensors[w].data.as_ptr(),
                1,
                ckk as isize,
                gout.as_ptr(),
                (ho * wo) as isize,
                1,
                S::zero(),
                dcol.as_mut_ptr(),
                (ho * wo) as isize,
                1,
            );
        }
        let gx = grad_mut(tensors, grads, x).expect("input grad buffer");
        col2im_add(&dcol, gx, cin, h, wd, kh, kw, stride, pad, ho, wo);
    }
    if let Some(gb) = grad_mut(tensors, grads, b) {
        for co in 0..cout {
            let mut acc = S::zero();
            for &d in &gout[co * ho * wo..(co + 1) * ho * wo] {
                acc += d;
            }
            gb[co] += acc;
        }
    }
}

fn backward_linear<S: Scalar>(
    tensors: &[Tensor<S>],
    grads: &mut [Option<Vec<S>>],
    x: usize,
    w: usize,
    b: usize,
    gout: &[S],
) {
    let (n, cin) = (tensors[x].shape[0], tensors[x].shape[1]);
    let cout = tensors[w].shape[0];
    if tensors[x].needs_grad {
        let gx = grad_mut(tensors, grads, x).expect("input grad buffer");
        // d_x += gout @ w
        unsafe {
            S::gemm(
                n,
                cout,
                cin,
                S::one(),
                gout.as_ptr(),
                cout as isize,
                1,
                tensors[w].data.as_ptr(),
                cin as isize,
                1,
                S::one(),
                gx.as_mut_ptr(),
                cin as isize,
                1,
            );
        }
    }
    if tensors[w].needs_grad {
        let gw = grad_mut(tensors, grads, w).expect("weight grad buffer");
        // d_w += gout^T @ x
        unsafe {
            S::gemm(
                cout,
                n,
                cin,
                S::one(),
                gout.as_ptr(),
                1,
                cout as isize,
                tensors[x].data.as_ptr(),
                cin as isize,
                1,
                S::one(),
                gw.as_mut_ptr(),
                cin as isize,
                1,
            );
        }
    }
    if let Some(gb) = grad_mut(tensors, grads, b) {
        for r in 0..n {
            for co in 0..cout {
                gb[co] += gout[r * cout + co];
            }
        }
    }
}

fn backward_bilinear<S: Scalar>(
    tensors: &[Tensor<S>],
    grads: &mut [Option<Vec<S>>],
    feat: usize,
    pts: usize,
    gout: &[S],
) {
    let fsh = &tensors[feat].shape;
    let (c, h, w) = (fsh[0], fsh[1], fsh[2]);
    let n = tensors[pts].shape[0];
    let p = &tensors[pts].data;
    let fd = &tensors[feat].data;
    let need_feat = tensors[feat].needs_grad;
    let need_pts = tensors[pts].needs_grad;
    for r in 0..n {
        let t = taps(p[r * 2], p[r * 2 + 1], w, h);
        let one = S::one();
        let (wx0, wx1) = (one - t.fx, t.fx);
        let (wy0, wy1) = (one - t.fy, t.fy);
        if need_feat {
            let gf = grad_mut(tensors, grads, feat).expect("feature grad buffer");
            for ch in 0..c {
                let d = gout[r * c + ch];
                let base = ch * h * w;
                gf[base + t.y0 * w + t.x0] += d * wy0 * wx0;
                gf[base + t.y0 * w + t.x1] += d * wy0 * wx1;
                gf[base + t.y1 * w + t.x0] += d * wy1 * wx0;
                gf[base + t.y1 * w + t.x1] += d * wy1 * wx1;
            }
        }
        if need_pts {
            let mut dx = S::zero();
            let mut dy = S::zero();
            for ch in 0..c {
                let d = gout[r * c + ch];
                let base = ch * h * w;
                let f00 = fd[base + t.y0 * w + t.x0];
                let f01 = fd[base + t.y0 * w + t.x1];
                let f10 = fd[base + t.y1 * w + t.x0];
                let f11 = fd[base + t.y1 * w + t.x1];
                if t.dx_free {
                    dx += d * (wy0 * (f01 - f00) + wy1 * (f11 - f10));
                }
                if t.dy_free {
                    dy += d * (wx0 * (f10 - f00) + wx1 * (f11 - f01));
                }
            }
            let gp = grad_mut(tensors, grads, pts).expect("point grad buffer");
            gp[r * 2] += dx;
            gp[r * 2 + 1] += dy;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<S> {
    let mut col = vec![S::zero(); cin * kh * kw * ho * wo];
    for ci in 0..cin {
        for di in 0..kh {
            for dj in 0..kw {
                let row = ((ci * kh + di) * kw + dj) * (ho * wo);
                for oi in 0..ho {
                    let i = (oi * stride + di) as isize - pad as isize;
                    if i < 0 || i >= h as isize {
                        continue;
                    }
                    let xrow = (ci * h + i as usize) * w;
                    let orow = row + oi * wo;
                    for oj in 0..wo {
                        let j = (oj * stride + dj) as isize - pad as isize;
                        if j >= 0 && j < w as isize {
                            col[orow + oj] = x[xrow + j as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<S: Scalar>(
    col: &[S],
    gx: &mut [S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    for ci in 0..cin {
        for di in 0..kh {
            for dj in 0..kw {
                let row = ((ci * kh + di) * kw + dj) * (ho * wo);
                for oi in 0..ho {
                    let i = (oi * stride + di) as isize - pad as isize;
                    if i < 0 || i >= h as isize {
                        continue;
                    }
                    let xrow = (ci * h + i as usize) * w;
                    let orow = row + oi * wo;
                    for oj in 0..wo {
                        let j = (oj * stride + dj) as isize - pad as isize;
                        if j >= 0 && j < w as isize {
                            gx[xrow + j as usize] += col[orow + oj];
                        }
                    }
                }
            }
        }
    }
}
