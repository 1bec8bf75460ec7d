//! Reverse-mode autodiff over `f64` tensors.
//!
//! A [`Tape`] records a computation as a flat list of nodes; each op appends a
//! node holding its output value and the ids of its parents. Calling
//! [`Tape::backward`] on a scalar root walks the list in reverse and
//! accumulates gradients for every node that (transitively) depends on a
//! gradient-requiring leaf. The op set is exactly what the translation
//! networks and losses need: elementwise math, matmul/linear, valid
//! convolution with reflect/zero padding, instance norm, nearest upsampling,
//! spatial reductions, location gather, windowed channel-min, and forward
//! differences.
//!
//! Determinism: all reductions run in a fixed order. The only parallelism is
//! a row-chunked matrix multiply with a fixed chunk size, so results are
//! bitwise identical for any rayon thread count.

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, Axis, Ix1, Ix2, Ix3, Ix4};
use ndarray::linalg::general_mat_mul;
use ndarray::parallel::prelude::*;

/// Dynamic-shape tensor used throughout training.
pub type Arr = ArrayD<f64>;

/// Floor for row-normalization denominators.
const NORMALIZE_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Padding mode for [`Tape::pad`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Reflect,
    Zero,
}

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Neg(TensorId),
    AddScalar(TensorId),
    MulScalar(TensorId, f64),
    Relu(TensorId),
    LeakyRelu(TensorId, f64),
    Tanh(TensorId),
    Exp(TensorId),
    Ln(TensorId),
    Abs(TensorId),
    Matmul(TensorId, TensorId),
    Transpose2(TensorId),
    Linear { x: TensorId, w: TensorId, b: TensorId },
    RowDot(TensorId, TensorId),
    SumAxis1(TensorId),
    MeanAll(TensorId),
    SumAll(TensorId),
    NormalizeRows { x: TensorId, norms: Vec<f64> },
    ConcatCols(TensorId, TensorId),
    Pad { x: TensorId, pad: usize, mode: PadMode },
    Conv2d { x: TensorId, w: TensorId, b: TensorId, stride: usize },
    InstanceNorm { x: TensorId, inv_std: Vec<f64> },
    UpsampleNearest2(TensorId),
    SpatialMean(TensorId),
    GatherLocs { x: TensorId, locs: Vec<(usize, usize)> },
    MinPoolChannels { x: TensorId, argmin: Vec<usize> },
    DiffH(TensorId),
    DiffV(TensorId),
}

struct Node {
    value: Arr,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    /// Gradient of the root with respect to `id`. Zero-filled if the node
    /// never received gradient (e.g. a dead branch).
    pub fn wrt(&self, tape: &Tape, id: TensorId) -> Arr {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Arr::zeros(tape.nodes[id.0].value.raw_dim()),
        }
    }

    /// Whether any gradient reached `id`.
    pub fn reached(&self, id: TensorId) -> bool {
        self.grads[id.0].is_some()
    }
}

/// A recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Arr, op: Op, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { value, op, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Value of a node.
    pub fn value(&self, id: TensorId) -> &Arr {
        &self.nodes[id.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: TensorId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.len(), 1, "scalar() on node with {} elements", v.len());
        *v.iter().next().unwrap()
    }

    /// Insert a gradient-requiring leaf (parameter or differentiable input).
    pub fn leaf(&mut self, value: Arr) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    /// Insert a constant leaf; gradient never flows into it.
    pub fn constant(&mut self, value: Arr) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    // ── elementwise ────────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(|x| -x);
        let ng = self.needs(a);
        self.push(v, Op::Neg(a), ng)
    }

    pub fn add_scalar(&mut self, a: TensorId, s: f64) -> TensorId {
        let v = self.value(a).mapv(|x| x + s);
        let ng = self.needs(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn mul_scalar(&mut self, a: TensorId, s: f64) -> TensorId {
        let v = self.value(a).mapv(|x| x * s);
        let ng = self.needs(a);
        self.push(v, Op::MulScalar(a, s), ng)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        // `0.0 * x` keeps NaN flowing instead of clamping it away
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { 0.0 * x });
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: TensorId, slope: f64) -> TensorId {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.needs(a);
        self.push(v, Op::LeakyRelu(a, slope), ng)
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(f64::tanh);
        let ng = self.needs(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(f64::exp);
        let ng = self.needs(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(f64::ln);
        let ng = self.needs(a);
        self.push(v, Op::Ln(a), ng)
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(f64::abs);
        let ng = self.needs(a);
        self.push(v, Op::Abs(a), ng)
    }

    // ── linear algebra ─────────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        assert_eq!(av.dim().1, bv.dim().0, "matmul inner dims");
        let v = par_matmul(&av, &bv).into_dyn();
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Matmul(a, b), ng)
    }

    pub fn transpose2(&mut self, a: TensorId) -> TensorId {
        let v = as2(self.value(a)).t().to_owned().into_dyn();
        let ng = self.needs(a);
        self.push(v, Op::Transpose2(a), ng)
    }

    /// Affine map `x[n,i] * w[o,i]^T + b[o] -> [n,o]`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let xv = as2(self.value(x));
        let wv = as2(self.value(w));
        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        assert_eq!(xv.dim().1, wv.dim().1, "linear in-features");
        assert_eq!(wv.dim().0, bv.len(), "linear out-features");
        let mut v = par_matmul(&xv, &wv.t().to_owned().view());
        for mut row in v.rows_mut() {
            row += &bv;
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(v.into_dyn(), Op::Linear { x, w, b }, ng)
    }

    /// Per-row dot product of two `[q,d]` matrices -> `[q]`.
    pub fn row_dot(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        assert_eq!(av.dim(), bv.dim());
        let v: Array1<f64> = av
            .rows()
            .into_iter()
            .zip(bv.rows())
            .map(|(x, y)| x.dot(&y))
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(v.into_dyn(), Op::RowDot(a, b), ng)
    }

    /// Sum along axis 1 of a `[q,n]` matrix -> `[q]`.
    pub fn sum_axis1(&mut self, a: TensorId) -> TensorId {
        let v = as2(self.value(a)).sum_axis(Axis(1));
        let ng = self.needs(a);
        self.push(v.into_dyn(), Op::SumAxis1(a), ng)
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let m = self.value(a).mean().unwrap();
        let ng = self.needs(a);
        self.push(ndarray::arr0(m).into_dyn(), Op::MeanAll(a), ng)
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(ndarray::arr0(s).into_dyn(), Op::SumAll(a), ng)
    }

    /// L2-normalize each row of a `[q,d]` matrix. The denominator is floored
    /// at `NORMALIZE_EPS`, so zero rows map to zero instead of NaN
    /// (degenerate constant inputs produce them legitimately).
    pub fn normalize_rows(&mut self, x: TensorId) -> TensorId {
        let xv = as2(self.value(x));
        let norms: Vec<f64> = xv.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut v = xv.to_owned();
        for (mut row, &n) in v.rows_mut().into_iter().zip(&norms) {
            let denom = n.max(NORMALIZE_EPS);
            row.mapv_inplace(|e| e / denom);
        }
        let ng = self.needs(x);
        self.push(v.into_dyn(), Op::NormalizeRows { x, norms }, ng)
    }

    /// Column-wise concatenation `[n,c1] ++ [n,c2] -> [n,c1+c2]`.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        assert_eq!(av.dim().0, bv.dim().0);
        let v = ndarray::concatenate(Axis(1), &[av.view(), bv.view()]).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(v.into_dyn(), Op::ConcatCols(a, b), ng)
    }

    // ── image ops (C,H,W) ──────────────────────────────────────────────

    /// Pad the two spatial axes by `pad` on every side.
    pub fn pad(&mut self, x: TensorId, pad: usize, mode: PadMode) -> TensorId {
        let xv = as3(self.value(x));
        let (c, h, w) = xv.dim();
        if mode == PadMode::Reflect {
            assert!(pad < h && pad < w, "reflect pad larger than image");
        }
        let mut out = Array3::<f64>::zeros((c, h + 2 * pad, w + 2 * pad));
        for ci in 0..c {
            for y in 0..h + 2 * pad {
                let sy = match mode {
                    PadMode::Zero => {
                        if y < pad || y >= h + pad {
                            usize::MAX
                        } else {
                            y - pad
                        }
                    }
                    PadMode::Reflect => reflect_index(y, pad, h),
                };
                for xw in 0..w + 2 * pad {
                    let sx = match mode {
                        PadMode::Zero => {
                            if xw < pad || xw >= w + pad {
                                usize::MAX
                            } else {
                                xw - pad
                            }
                        }
                        PadMode::Reflect => reflect_index(xw, pad, w),
                    };
                    if sy != usize::MAX && sx != usize::MAX {
                        out[(ci, y, xw)] = xv[(ci, sy, sx)];
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::Pad { x, pad, mode }, ng)
    }

    /// Valid 2D convolution: `x (C,H,W)` with `w (O,C,kh,kw)` and bias `[O]`.
    /// Output spatial size follows `floor((H - kh)/stride) + 1`.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, b: TensorId, stride: usize) -> TensorId {
        let xv = as3(self.value(x));
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
        let (c, h, wd) = xv.dim();
        let (o, wc, kh, kw) = wv.dim();
        assert_eq!(c, wc, "conv2d channels");
        assert_eq!(o, bv.len(), "conv2d bias");
        assert!(h >= kh && wd >= kw, "conv2d kernel larger than input");
        let oh = (h - kh) / stride + 1;
        let ow = (wd - kw) / stride + 1;

        let cols = im2col(&xv, kh, kw, stride, oh, ow);
        let wmat = wv.to_shape((o, c * kh * kw)).unwrap().to_owned();
        // [oh*ow, ck2] x [ck2, o] -> [oh*ow, o]
        let prod = par_matmul(&cols.view(), &wmat.t().to_owned().view());
        let mut out = Array3::<f64>::zeros((o, oh, ow));
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[(oc, oy, ox)] = prod[(oy * ow + ox, oc)] + bv[oc];
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out.into_dyn(), Op::Conv2d { x, w, b, stride }, ng)
    }

    /// Per-channel instance normalization without affine parameters.
    pub fn instance_norm(&mut self, x: TensorId, eps: f64) -> TensorId {
        let xv = as3(self.value(x));
        let (c, h, w) = xv.dim();
        let n = (h * w) as f64;
        let mut out = xv.to_owned();
        let mut inv_std = Vec::with_capacity(c);
        for ci in 0..c {
            let ch = xv.index_axis(Axis(0), ci);
            let mu = ch.sum() / n;
            let var = ch.fold(0.0, |acc, &v| acc + (v - mu) * (v - mu)) / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            out.index_axis_mut(Axis(0), ci)
                .mapv_inplace(|v| (v - mu) * is);
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::InstanceNorm { x, inv_std }, ng)
    }

    /// Nearest-neighbour 2x upsampling of (C,H,W).
    pub fn upsample_nearest2(&mut self, x: TensorId) -> TensorId {
        let xv = as3(self.value(x));
        let (c, h, w) = xv.dim();
        let mut out = Array3::<f64>::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for y in 0..2 * h {
                for xw in 0..2 * w {
                    out[(ci, y, xw)] = xv[(ci, y / 2, xw / 2)];
                }
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::UpsampleNearest2(x), ng)
    }

    /// Spatial average of (C,H,W) -> `[C]`.
    pub fn spatial_mean(&mut self, x: TensorId) -> TensorId {
        let xv = as3(self.value(x));
        let (c, h, w) = xv.dim();
        let n = (h * w) as f64;
        let v: Array1<f64> = (0..c)
            .map(|ci| xv.index_axis(Axis(0), ci).sum() / n)
            .collect();
        let ng = self.needs(x);
        self.push(v.into_dyn(), Op::SpatialMean(x), ng)
    }

    /// Collect feature vectors at spatial locations: (C,H,W) -> `[Q,C]`.
    pub fn gather_locs(&mut self, x: TensorId, locs: &[(usize, usize)]) -> TensorId {
        let xv = as3(self.value(x));
        let (c, h, w) = xv.dim();
        let mut out = Array2::<f64>::zeros((locs.len(), c));
        for (q, &(y, xw)) in locs.iter().enumerate() {
            assert!(y < h && xw < w, "gather_locs out of range");
            for ci in 0..c {
                out[(q, ci)] = xv[(ci, y, xw)];
            }
        }
        let ng = self.needs(x);
        self.push(
            out.into_dyn(),
            Op::GatherLocs { x, locs: locs.to_vec() },
            ng,
        )
    }

    /// Windowed channel minimum (the dark channel operator): for every pixel,
    /// the minimum over all channels inside a `(2r+1)^2` window clamped to the
    /// image bounds. (C,H,W) -> (H,W). Gradient routes to the argmin element.
    pub fn min_pool_channels(&mut self, x: TensorId, radius: usize) -> TensorId {
        let xv = as3(self.value(x));
        let (c, h, w) = xv.dim();
        let mut out = Array2::<f64>::zeros((h, w));
        let mut argmin = vec![0usize; h * w];
        for y in 0..h {
            let y0 = y.saturating_sub(radius);
            let y1 = (y + radius).min(h - 1);
            for xw in 0..w {
                let x0 = xw.saturating_sub(radius);
                let x1 = (xw + radius).min(w - 1);
                let mut best = f64::INFINITY;
                let mut best_idx = 0usize;
                for ci in 0..c {
                    for wy in y0..=y1 {
                        for wx in x0..=x1 {
                            let v = xv[(ci, wy, wx)];
                            if v < best {
                                best = v;
                                best_idx = ci * h * w + wy * w + wx;
                            }
                        }
                    }
                }
                out[(y, xw)] = best;
                argmin[y * w + xw] = best_idx;
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::MinPoolChannels { x, argmin }, ng)
    }

    /// Forward difference along width: (C,H,W) -> (C,H,W-1).
    pub fn diff_h(&mut self, x: TensorId) -> TensorId {
        let xv = as3(self.value(x));
        let (c, h, w) = xv.dim();
        assert!(w >= 2, "diff_h needs width >= 2");
        let mut out = Array3::<f64>::zeros((c, h, w - 1));
        for ci in 0..c {
            for y in 0..h {
                for xw in 0..w - 1 {
                    out[(ci, y, xw)] = xv[(ci, y, xw + 1)] - xv[(ci, y, xw)];
                }
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::DiffH(x), ng)
    }

    /// Forward difference along height: (C,H,W) -> (C,H-1,W).
    pub fn diff_v(&mut self, x: TensorId) -> TensorId {
        let xv = as3(self.value(x));
        let (c, h, w) = xv.dim();
        assert!(h >= 2, "diff_v needs height >= 2");
        let mut out = Array3::<f64>::zeros((c, h - 1, w));
        for ci in 0..c {
            for y in 0..h - 1 {
                for xw in 0..w {
                    out[(ci, y, xw)] = xv[(ci, y + 1, xw)] - xv[(ci, y, xw)];
                }
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::DiffV(x), ng)
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Backpropagate from a single-element root. Returns per-node gradients.
    pub fn backward(&self, root: TensorId) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Arr>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Arr::ones(self.nodes[root.0].value.raw_dim()));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, i: usize, g: &Arr, grads: &mut Vec<Option<Arr>>) {
        let node = &self.nodes[i];
        let acc = |id: TensorId, delta: Arr, grads: &mut Vec<Option<Arr>>| {
            if !self.needs(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.mapv(|v| -v), grads);
            }
            Op::Mul(a, b) => {
                acc(*a, g * self.value(*b), grads);
                acc(*b, g * self.value(*a), grads);
            }
            Op::Neg(a) => acc(*a, g.mapv(|v| -v), grads),
            Op::AddScalar(a) => acc(*a, g.clone(), grads),
            Op::MulScalar(a, s) => acc(*a, g.mapv(|v| v * s), grads),
            Op::Relu(a) => {
                let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(*a, g * &mask, grads);
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { s });
                acc(*a, g * &mask, grads);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, g * &y.mapv(|t| 1.0 - t * t), grads);
            }
            Op::Exp(a) => acc(*a, g * &node.value, grads),
            Op::Ln(a) => acc(*a, g / self.value(*a), grads),
            Op::Abs(a) => {
                let sign = self.value(*a).mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                acc(*a, g * &sign, grads);
            }
            Op::Matmul(a, b) => {
                let g2 = as2(g);
                let av = as2(self.value(*a));
                let bv = as2(self.value(*b));
                if self.needs(*a) {
                    let da = par_matmul(&g2, &bv.t().to_owned().view());
                    acc(*a, da.into_dyn(), grads);
                }
                if self.needs(*b) {
                    let db = par_matmul(&av.t().to_owned().view(), &g2);
                    acc(*b, db.into_dyn(), grads);
                }
            }
            Op::Transpose2(a) => {
                let da = as2(g).t().as_standard_layout().to_owned();
                acc(*a, da.into_dyn(), grads);
            }
            Op::Linear { x, w, b } => {
                let g2 = as2(g);
                let xv = as2(self.value(*x));
                let wv = as2(self.value(*w));
                if self.needs(*x) {
                    let dx = par_matmul(&g2, &wv);
                    acc(*x, dx.into_dyn(), grads);
                }
                if self.needs(*w) {
                    let dw = par_matmul(&g2.t().to_owned().view(), &xv);
                    acc(*w, dw.into_dyn(), grads);
                }
                if self.needs(*b) {
                    let db = g2.sum_axis(Axis(0));
                    acc(*b, db.into_dyn(), grads);
                }
            }
            Op::RowDot(a, b) => {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let av = as2(self.value(*a));
                let bv = as2(self.value(*b));
                if self.needs(*a) {
                    let mut da = bv.to_owned();
                    for (mut row, &gq) in da.rows_mut().into_iter().zip(g1.iter()) {
                        row.mapv_inplace(|v| v * gq);
                    }
                    acc(*a, da.into_dyn(), grads);
                }
                if self.needs(*b) {
                    let mut db = av.to_owned();
                    for (mut row, &gq) in db.rows_mut().into_iter().zip(g1.iter()) {
                        row.mapv_inplace(|v| v * gq);
                    }
                    acc(*b, db.into_dyn(), grads);
                }
            }
            Op::SumAxis1(a) => {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let av = as2(self.value(*a));
                let (q, n) = av.dim();
                let mut da = Array2::<f64>::zeros((q, n));
                for (mut row, &gq) in da.rows_mut().into_iter().zip(g1.iter()) {
                    row.fill(gq);
                }
                acc(*a, da.into_dyn(), grads);
            }
            Op::MeanAll(a) => {
                let gs = g.iter().next().copied().unwrap();
                let n = self.value(*a).len() as f64;
                let da = Arr::from_elem(self.value(*a).raw_dim(), gs / n);
                acc(*a, da, grads);
            }
            Op::SumAll(a) => {
                let gs = g.iter().next().copied().unwrap();
                let da = Arr::from_elem(self.value(*a).raw_dim(), gs);
                acc(*a, da, grads);
            }
            Op::NormalizeRows { x, norms } => {
                let g2 = as2(g);
                let y = as2(&node.value);
                let mut dx = g2.to_owned();
                for ((mut drow, yrow), &n) in
                    dx.rows_mut().into_iter().zip(y.rows()).zip(norms.iter())
                {
                    if n > NORMALIZE_EPS {
                        let dot = drow.dot(&yrow);
                        for (d, &yv) in drow.iter_mut().zip(yrow.iter()) {
                            *d = (*d - yv * dot) / n;
                        }
                    } else {
                        // floored branch: the map was x / eps, a plain scale
                        drow.mapv_inplace(|d| d / NORMALIZE_EPS);
                    }
                }
                acc(*x, dx.into_dyn(), grads);
            }
            Op::ConcatCols(a, b) => {
                let g2 = as2(g);
                let c1 = as2(self.value(*a)).dim().1;
                acc(*a, g2.slice(ndarray::s![.., ..c1]).to_owned().into_dyn(), grads);
                acc(*b, g2.slice(ndarray::s![.., c1..]).to_owned().into_dyn(), grads);
            }
            Op::Pad { x, pad, mode } => {
                let g3 = as3(g);
                let xv = as3(self.value(*x));
                let (c, h, w) = xv.dim();
                let p = *pad;
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for y in 0..h + 2 * p {
                        for xw in 0..w + 2 * p {
                            let (sy, sx) = match mode {
                                PadMode::Zero => {
                                    if y < p || y >= h + p || xw < p || xw >= w + p {
                                        continue;
                                    }
                                    (y - p, xw - p)
                                }
                                PadMode::Reflect => {
                                    (reflect_index(y, p, h), reflect_index(xw, p, w))
                                }
                            };
                            dx[(ci, sy, sx)] += g3[(ci, y, xw)];
                        }
                    }
                }
                acc(*x, dx.into_dyn(), grads);
            }
            Op::Conv2d { x, w, b, stride } => {
                let g3 = as3(g);
                let xv = as3(self.value(*x));
                let wv = self.value(*w).view().into_dimensionality::<Ix4>().unwrap();
                let (c, h, wd) = xv.dim();
                let (o, _, kh, kw) = wv.dim();
                let (oh, ow) = (g3.dim().1, g3.dim().2);
                // g as [oh*ow, o]
                let mut gmat = Array2::<f64>::zeros((oh * ow, o));
                for oc in 0..o {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            gmat[(oy * ow + ox, oc)] = g3[(oc, oy, ox)];
                        }
                    }
                }
                if self.needs(*b) {
                    let db = gmat.sum_axis(Axis(0));
                    acc(*b, db.into_dyn(), grads);
                }
                if self.needs(*w) {
                    let cols = im2col(&xv, kh, kw, *stride, oh, ow);
                    let dw = par_matmul(&gmat.t().to_owned().view(), &cols.view());
                    let dw4 = dw.to_shape((o, c, kh, kw)).unwrap().to_owned();
                    acc(*w, dw4.into_dyn(), grads);
                }
                if self.needs(*x) {
                    let wmat = wv.to_shape((o, c * kh * kw)).unwrap().to_owned();
                    let dcols = par_matmul(&gmat.view(), &wmat.view());
                    let dx = col2im(&dcols, c, h, wd, kh, kw, *stride, oh, ow);
                    acc(*x, dx.into_dyn(), grads);
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let g3 = as3(g);
                let y = as3(&node.value);
                let (c, h, w) = y.dim();
                let n = (h * w) as f64;
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    let gch = g3.index_axis(Axis(0), ci);
                    let ych = y.index_axis(Axis(0), ci);
                    let gsum = gch.sum();
                    let gydot = gch
                        .iter()
                        .zip(ych.iter())
                        .fold(0.0, |acc2, (&gv, &yv)| acc2 + gv * yv);
                    let is = inv_std[ci];
                    let mut dch = dx.index_axis_mut(Axis(0), ci);
                    for ((d, &gv), &yv) in dch.iter_mut().zip(gch.iter()).zip(ych.iter()) {
                        *d = is * (gv - gsum / n - yv * gydot / n);
                    }
                }
                acc(*x, dx.into_dyn(), grads);
            }
            Op::UpsampleNearest2(a) => {
                let g3 = as3(g);
                let xv = as3(self.value(*a));
                let (c, h, w) = xv.dim();
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for y in 0..2 * h {
                        for xw in 0..2 * w {
                            dx[(ci, y / 2, xw / 2)] += g3[(ci, y, xw)];
                        }
                    }
                }
                acc(*a, dx.into_dyn(), grads);
            }
            Op::SpatialMean(a) => {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let xv = as3(self.value(*a));
                let (c, h, w) = xv.dim();
                let n = (h * w) as f64;
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    dx.index_axis_mut(Axis(0), ci).fill(g1[ci] / n);
                }
                acc(*a, dx.into_dyn(), grads);
            }
            Op::GatherLocs { x, locs } => {
                let g2 = as2(g);
                let xv = as3(self.value(*x));
                let (c, h, w) = xv.dim();
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for (q, &(y, xw)) in locs.iter().enumerate() {
                    for ci in 0..c {
                        dx[(ci, y, xw)] += g2[(q, ci)];
                    }
                }
                acc(*x, dx.into_dyn(), grads);
            }
            Op::MinPoolChannels { x, argmin } => {
                let g2 = as2(g);
                let xv = as3(self.value(*x));
                let (c, h, w) = xv.dim();
                let mut dx = vec![0.0; c * h * w];
                for (flat, &src) in argmin.iter().enumerate() {
                    dx[src] += g2[(flat / w, flat % w)];
                }
                let dx = Array3::from_shape_vec((c, h, w), dx).unwrap();
                acc(*x, dx.into_dyn(), grads);
            }
            Op::DiffH(a) => {
                let g3 = as3(g);
                let xv = as3(self.value(*a));
                let (c, h, w) = xv.dim();
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for y in 0..h {
                        for xw in 0..w - 1 {
                            let gv = g3[(ci, y, xw)];
                            dx[(ci, y, xw + 1)] += gv;
                            dx[(ci, y, xw)] -= gv;
                        }
                    }
                }
                acc(*a, dx.into_dyn(), grads);
            }
            Op::DiffV(a) => {
                let g3 = as3(g);
                let xv = as3(self.value(*a));
                let (c, h, w) = xv.dim();
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for y in 0..h - 1 {
                        for xw in 0..w {
                            let gv = g3[(ci, y, xw)];
                            dx[(ci, y + 1, xw)] += gv;
                            dx[(ci, y, xw)] -= gv;
                        }
                    }
                }
                acc(*a, dx.into_dyn(), grads);
            }
        }
    }
}

// ── helpers ────────────────────────────────────────────────────────────

fn as2(a: &Arr) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().unwrap()
}

fn as3(a: &Arr) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().unwrap()
}

/// Mirror an index into `[0, len)` for reflect padding without repeating the
/// border sample: pad positions p-1, p-2, ... map to source 1, 2, ...
fn reflect_index(padded: usize, pad: usize, len: usize) -> usize {
    let i = padded as isize - pad as isize;
    let n = len as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    debug_assert!((0..n).contains(&r), "reflect pad out of range");
    r as usize
}

/// Fixed chunk size keeps rayon splits identical for any thread count, so
/// matmul output is bitwise reproducible.
const MATMUL_CHUNK: usize = 64;
const MATMUL_PAR_MIN: usize = 1 << 15;

/// Row-chunk parallel matrix multiply; serial for small problems.
pub(crate) fn par_matmul(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let n = b.dim().1;
    let mut out = Array2::<f64>::zeros((m, n));
    if m * n * k < MATMUL_PAR_MIN || m <= MATMUL_CHUNK {
        general_mat_mul(1.0, a, b, 0.0, &mut out);
        return out;
    }
    out.axis_chunks_iter_mut(Axis(0), MATMUL_CHUNK)
        .into_par_iter()
        .zip(a.axis_chunks_iter(Axis(0), MATMUL_CHUNK).into_par_iter())
        .for_each(|(mut oc, ac)| {
            general_mat_mul(1.0, &ac, b, 0.0, &mut oc);
        });
    out
}

/// Unfold conv patches: rows indexed by output pixel, columns by
/// (channel, ky, kx).
fn im2col(
    x: &ndarray::ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c, _h, _w) = x.dim();
    let mut cols = Array2::<f64>::zeros((oh * ow, c * kh * kw));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for ci in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        cols[(row, ci * kh * kw + ky * kw + kx)] =
                            x[(ci, oy * stride + ky, ox * stride + kx)];
                    }
                }
            }
        }
    }
    cols
}

/// Fold gradient patches back onto the input (adjoint of [`im2col`]).
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros((c, h, w));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for ci in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        dx[(ci, oy * stride + ky, ox * stride + kx)] +=
                            dcols[(row, ci * kh * kw + ky * kw + kx)];
                    }
                }
            }
        }
    }
    dx
}
