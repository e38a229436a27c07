//! Operation-level reverse-mode autodiff.
//!
//! A [`Graph`] records every operation executed during one forward pass,
//! together with whatever the backward rule needs (patch matrices, argmax
//! positions, normalized activations). [`Graph::backward`] walks the record
//! once in reverse order; a second call is rejected.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Forward mode; selects batch statistics or running statistics in batch norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Store entries holding a batch norm's running statistics and the number of
/// batches folded into them so far.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnBuffers {
    pub mean: ParamId,
    pub var: ParamId,
    pub count: ParamId,
}

/// Batch statistics observed by a train-mode batch norm, waiting to be folded
/// into the running averages.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub buffers: BnBuffers,
    pub mean: Vec<T>,
    /// Unbiased batch variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    OneMinus(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
        batch: usize,
        c_out: usize,
        cols: Vec<T>,
    },
    /// `y[o] = x[src[o]]`; used by max pooling and segment max.
    Select {
        x: Var,
        src: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        layout: (usize, usize, usize),
        batch_stats: bool,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    /// `y[dst[e]] = x[e]`, zero elsewhere.
    Scatter {
        x: Var,
        dst: Vec<usize>,
    },
    Reshape(Var),
    TransformPoints {
        x: Var,
        t: Var,
        offsets: Vec<usize>,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
    bn_stats: Vec<BnStats<T>>,
    bn_eps: T,
}

impl<T: Scalar> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            params: HashMap::new(),
            grads: Vec::new(),
            backward_done: false,
            bn_stats: Vec::new(),
            bn_eps: T::lit(crate::BN_EPS),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a leaf that honours the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Records a stored parameter; repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let value = Tensor::from_raw(t.shape().to_vec(), t.data().to_vec());
        let v = self.push(value, Op::Leaf, store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    fn shape2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(format!("{what}: expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape2(a, "matmul lhs")?;
        let (k2, n) = self.shape2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions {m}x{k} * {k2}x{n}"
            )));
        }
        let out = kernels::gemm(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Adds a length-C bias to every row of an R×C matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape2(x, "add_bias")?;
        if self.value(b).numel() != c {
            return Err(Error::dim(format!(
                "bias of length {} for {c} columns",
                self.value(b).numel()
            )));
        }
        let bias = self.data(b);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(bias).for_each(|(o, &bv)| *o += bv);
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::from_raw(vec![r, c], out), Op::AddBias(x, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_raw(shape, out), op, rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out: Vec<T> = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_raw(shape, out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// `1 − x` elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() - v, Op::OneMinus(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Tanh => self.tanh(x),
        }
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut total = T::zero();
        for &v in self.data(x) {
            total += v;
        }
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Cross-correlation of a B×C×H×W batch (or one C×H×W sample) with an
    /// O×C×kh×kw kernel; no kernel flip.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (b, c, h, w, single) = match self.shape(x) {
            [b, c, h, w] => (*b, *c, *h, *w, false),
            [c, h, w] => (1, *c, *h, *w, true),
            s => return Err(Error::dim(format!("conv2d input must be [B]xCxHxW, got {s:?}"))),
        };
        let (o, kc, kh, kw) = match self.shape(k) {
            [o, kc, kh, kw] => (*o, *kc, *kh, *kw),
            s => return Err(Error::dim(format!("conv2d kernel must be OxCxkhxkw, got {s:?}"))),
        };
        if kc != c {
            return Err(Error::dim(format!(
                "conv2d kernel expects {kc} channels, input has {c}"
            )));
        }
        let geom = ConvGeom::new(c, h, w, kh, kw, stride, pad).ok_or_else(|| {
            Error::dim(format!(
                "conv2d kernel {kh}x{kw} (stride {stride}) larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ))
        })?;
        let (p, l) = (geom.patch_len(), geom.out_len());
        let mut cols = vec![T::zero(); b * p * l];
        let mut out = vec![T::zero(); b * o * l];
        {
            let xd = self.data(x);
            let kd = self.data(k);
            for s in 0..b {
                let col = &mut cols[s * p * l..(s + 1) * p * l];
                kernels::im2col(&xd[s * c * h * w..(s + 1) * c * h * w], &geom, col);
                kernels::gemm_acc(kd, col, &mut out[s * o * l..(s + 1) * o * l], o, p, l);
            }
        }
        let rg = self.rg(x) || self.rg(k);
        let out_shape = if single {
            vec![o, geom.h_out, geom.w_out]
        } else {
            vec![b, o, geom.h_out, geom.w_out]
        };
        Ok(self.push(
            Tensor::from_raw(out_shape, out),
            Op::Conv2d {
                x,
                k,
                geom,
                batch: b,
                c_out: o,
                cols,
            },
            rg,
        ))
    }

    /// Max pooling over B×C×H×W (or C×H×W) windows without padding.
    ///
    /// On exact ties the first element in row-major window order wins.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (lead, h, w) = match shape.as_slice() {
            [b, c, h, w] => (b * c, *h, *w),
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::dim(format!("maxpool2d needs CxHxW or BxCxHxW, got {s:?}"))),
        };
        self.maxpool2d_rect(x, lead, h, w, window, window, stride, &shape)
    }

    /// Max over each full spatial plane: B×C×H×W → B×C.
    pub fn global_maxpool2d(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = match self.shape(x) {
            [b, c, h, w] => (*b, *c, *h, *w),
            s => return Err(Error::dim(format!("global pool needs BxCxHxW, got {s:?}"))),
        };
        let pooled = self.maxpool2d_rect(x, b * c, h, w, h, w, 1, &[b, c, h, w])?;
        self.reshape(pooled, &[b, c])
    }

    #[allow(clippy::too_many_arguments)]
    fn maxpool2d_rect(
        &mut self,
        x: Var,
        lead: usize,
        h: usize,
        w: usize,
        wh: usize,
        ww: usize,
        stride: usize,
        shape: &[usize],
    ) -> Result<Var> {
        let (ho, wo) = match (
            kernels::window_out(h, wh, stride, 0),
            kernels::window_out(w, ww, stride, 0),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::dim(format!(
                    "pool window {wh}x{ww} exceeds input {h}x{w}"
                )))
            }
        };
        let xd = self.data(x);
        let mut out = Vec::with_capacity(lead * ho * wo);
        let mut src = Vec::with_capacity(lead * ho * wo);
        for plane in 0..lead {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..wh {
                        for kx in 0..ww {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    src.push(best);
                }
            }
        }
        let mut out_shape = shape.to_vec();
        let n = out_shape.len();
        out_shape[n - 2] = ho;
        out_shape[n - 1] = wo;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_raw(out_shape, out), Op::Select { x, src }, rg))
    }

    /// Batch normalization over the channel axis.
    ///
    /// Accepts R×C (normalizing each column over rows) or B×C×H×W
    /// (normalizing each channel over B, H and W). In train mode the batch
    /// statistics are used and, when `running` is given, recorded for
    /// [`Graph::commit_bn_stats`]. In eval mode `running_mean`/`running_var`
    /// are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        buffers: Option<BnBuffers>,
    ) -> Result<Var> {
        let layout = match self.shape(x) {
            [r, c] => (*r, *c, 1),
            [b, c, h, w] => (*b, *c, h * w),
            s => return Err(Error::dim(format!("batch_norm needs RxC or BxCxHxW, got {s:?}"))),
        };
        let (outer, c, inner) = layout;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::dim(format!(
                "batch_norm affine parameters must have {c} entries"
            )));
        }
        let n = outer * inner;
        let eps = self.bn_eps;
        let xd = self.data(x);
        let idx = |o: usize, ch: usize, i: usize| (o * c + ch) * inner + i;
        let (mean, var, batch_stats) = if self.mode == Mode::Train {
            if n < 2 {
                return Err(Error::DegenerateVariance(format!(
                    "batch norm in train mode over {n} value(s) per channel"
                )));
            }
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let nf = T::from_usize(n).unwrap();
            for ch in 0..c {
                let mut s = T::zero();
                for o in 0..outer {
                    for i in 0..inner {
                        s += xd[idx(o, ch, i)];
                    }
                }
                let m = s / nf;
                let mut q = T::zero();
                for o in 0..outer {
                    for i in 0..inner {
                        let d = xd[idx(o, ch, i)] - m;
                        q += d * d;
                    }
                }
                mean[ch] = m;
                var[ch] = q / nf;
            }
            (mean, var, true)
        } else {
            let (rm, rv) = running.ok_or_else(|| {
                Error::Validation("eval-mode batch norm needs running statistics".into())
            })?;
            if rm.len() != c || rv.len() != c {
                return Err(Error::dim("running statistics length mismatch"));
            }
            (rm.to_vec(), rv.to_vec(), false)
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for ch in 0..c {
                for i in 0..inner {
                    let e = idx(o, ch, i);
                    let xh = (xd[e] - mean[ch]) * inv_std[ch];
                    xhat[e] = xh;
                    out[e] = g[ch] * xh + bt[ch];
                }
            }
        }
        if batch_stats {
            if let Some(buffers) = buffers {
                let unbias = T::from_usize(n).unwrap() / T::from_usize(n - 1).unwrap();
                self.bn_stats.push(BnStats {
                    buffers,
                    mean,
                    var: var.iter().map(|&v| v * unbias).collect(),
                });
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                layout,
                batch_stats,
            },
            rg,
        ))
    }

    /// Column-wise max over contiguous row segments.
    ///
    /// `offsets` has one more entry than there are segments; segment `s`
    /// covers rows `offsets[s]..offsets[s+1]` and must be nonempty.
    pub fn segment_max(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let (r, c) = self.shape2(x, "segment_max")?;
        if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != r {
            return Err(Error::dim("segment offsets must span all rows"));
        }
        let segs = offsets.len() - 1;
        let xd = self.data(x);
        let mut out = Vec::with_capacity(segs * c);
        let mut src = Vec::with_capacity(segs * c);
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if hi <= lo {
                return Err(Error::dim(format!("segment {s} is empty")));
            }
            for col in 0..c {
                let mut best = lo * c + col;
                for row in lo + 1..hi {
                    let e = row * c + col;
                    if xd[e] > xd[best] {
                        best = e;
                    }
                }
                out.push(xd[best]);
                src.push(best);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_raw(vec![segs, c], out), Op::Select { x, src }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape2(x, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::dim("gather_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("row {bad} out of {r}")));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_raw(vec![idx.len(), c], out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat of nothing"));
        }
        let r = self.shape2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.shape2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::dim(format!("concat_cols row counts {r} and {pr}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for row in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[row * w..(row + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_raw(vec![r, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape2(a, "concat_rows")?;
        let (rb, cb) = self.shape2(b, "concat_rows")?;
        if ca != cb {
            return Err(Error::dim(format!("concat_rows widths {ca} and {cb}")));
        }
        let mut out = Vec::with_capacity((ra + rb) * ca);
        out.extend_from_slice(self.data(a));
        out.extend_from_slice(self.data(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_raw(vec![ra + rb, ca], out),
            Op::ConcatRows(a, b),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape2(x, "slice_rows")?;
        if start >= end || end > r {
            return Err(Error::Index(format!("row slice {start}..{end} of {r}")));
        }
        let out = self.data(x)[start * c..end * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_raw(vec![end - start, c], out),
            Op::SliceRows { x, start },
            rg,
        ))
    }

    /// Places element `e` of `x` at flat position `dst[e]` of a zero tensor.
    pub fn scatter(&mut self, x: Var, dst: &[usize], out_shape: &[usize]) -> Result<Var> {
        let n: usize = out_shape.iter().product();
        if dst.len() != self.value(x).numel() {
            return Err(Error::dim("scatter index length mismatch"));
        }
        let mut out = vec![T::zero(); n];
        for (&d, &v) in dst.iter().zip(self.data(x)) {
            if d >= n {
                return Err(Error::Index(format!("scatter target {d} out of {n}")));
            }
            out[d] = v;
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_raw(out_shape.to_vec(), out),
            Op::Scatter {
                x,
                dst: dst.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Applies a per-sample d×d transform to point rows: `y_p = T_b · x_p`.
    ///
    /// `x` is P×d, `t` is B×d², and rows `offsets[b]..offsets[b+1]` belong
    /// to sample `b`.
    pub fn transform_points(&mut self, x: Var, t: Var, offsets: &[usize]) -> Result<Var> {
        let (p, d) = self.shape2(x, "transform_points")?;
        let (b, dd) = self.shape2(t, "transform_points")?;
        if dd != d * d || offsets.len() != b + 1 || offsets[0] != 0 || offsets[b] != p {
            return Err(Error::dim(format!(
                "transform_points: {p}x{d} points with {b}x{dd} transforms"
            )));
        }
        let (xd, td) = (self.data(x), self.data(t));
        let mut out = vec![T::zero(); p * d];
        for s in 0..b {
            let tm = &td[s * dd..(s + 1) * dd];
            for row in offsets[s]..offsets[s + 1] {
                let xr = &xd[row * d..(row + 1) * d];
                for i in 0..d {
                    let mut acc = T::zero();
                    for j in 0..d {
                        acc += tm[i * d + j] * xr[j];
                    }
                    out[row * d + i] = acc;
                }
            }
        }
        let rg = self.rg(x) || self.rg(t);
        Ok(self.push(
            Tensor::from_raw(vec![p, d], out),
            Op::TransformPoints {
                x,
                t,
                offsets: offsets.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, k) = self.shape2(logits, "softmax_cross_entropy")?;
        if targets.len() != r {
            return Err(Error::dim(format!("{} targets for {r} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index(format!("target class {bad} not in [0, {k})")));
        }
        let ld = self.data(logits);
        let mut probs = vec![T::zero(); r * k];
        let mut total = T::zero();
        for (row, &t) in targets.iter().enumerate() {
            let lr = &ld[row * k..(row + 1) * k];
            let max = lr.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for &v in lr {
                s += (v - max).exp();
            }
            total += max + s.ln() - lr[t];
            kernels::softmax_row(lr, &mut probs[row * k..(row + 1) * k]);
        }
        let loss = total / T::from_usize(r).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Batch statistics recorded by train-mode batch norms.
    pub fn bn_stats(&self) -> &[BnStats<T>] {
        &self.bn_stats
    }

    /// Folds the recorded batch statistics into the running averages:
    /// `running ← momentum·running + (1 − momentum)·batch`, except that the
    /// first batch a layer sees replaces the initial values outright.
    pub fn commit_bn_stats(&self, store: &mut ParamStore<T>, momentum: T) {
        for st in &self.bn_stats {
            let b = st.buffers;
            let first = store.get(b.count).data()[0] == T::zero();
            for (id, batch) in [(b.mean, &st.mean), (b.var, &st.var)] {
                let t = store.get_mut(id);
                for (r, &v) in t.data_mut().iter_mut().zip(batch) {
                    *r = if first { v } else { momentum * *r + (T::one() - momentum) * v };
                }
            }
            store.get_mut(b.count).data_mut()[0] += T::one();
        }
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::GraphReused);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.value(loss).item().is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`, if reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulates parameter gradients into the store. Trainable parameters
    /// that were not reached (or not used) receive zeros.
    pub fn write_param_grads(&self, store: &mut ParamStore<T>) {
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        for id in ids {
            let n = store.get(id).numel();
            match self.params.get(&id).and_then(|&v| self.grad(v)) {
                Some(g) => store.get_mut(id).accumulate_grad(g),
                None => store.get_mut(id).accumulate_grad(&vec![T::zero(); n]),
            }
        }
    }

    fn backprop_node(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let ga = slot(grads, *a, m * k);
                    kernels::gemm_nt_acc(dy, self.data(*b), ga, m, n, k);
                }
                if self.rg(*b) {
                    let gb = slot(grads, *b, k * n);
                    kernels::gemm_tn_acc(self.data(*a), dy, gb, m, k, n);
                }
            }
            Op::AddBias(x, b) => {
                let c = self.shape(*x)[1];
                if self.rg(*x) {
                    add_into(slot(grads, *x, dy.len()), dy);
                }
                if self.rg(*b) {
                    let gb = slot(grads, *b, c);
                    for row in dy.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        add_into(slot(grads, *v, dy.len()), dy);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    add_into(slot(grads, *a, dy.len()), dy);
                }
                if self.rg(*b) {
                    let g = slot(grads, *b, dy.len());
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bd = self.data(*b);
                    let g = slot(grads, *a, dy.len());
                    for ((g, &d), &bv) in g.iter_mut().zip(dy).zip(bd) {
                        *g += d * bv;
                    }
                }
                if self.rg(*b) {
                    let ad = self.data(*a);
                    let g = slot(grads, *b, dy.len());
                    for ((g, &d), &av) in g.iter_mut().zip(dy).zip(ad) {
                        *g += d * av;
                    }
                }
            }
            Op::Scale(x, c) => {
                let g = slot(grads, *x, dy.len());
                g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d * *c);
            }
            Op::OneMinus(x) => {
                let g = slot(grads, *x, dy.len());
                g.iter_mut().zip(dy).for_each(|(g, &d)| *g -= d);
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                let g = slot(grads, *x, dy.len());
                for ((g, &d), &xv) in g.iter_mut().zip(dy).zip(xd) {
                    if xv > T::zero() {
                        *g += d;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let g = slot(grads, *x, dy.len());
                for ((g, &d), &s) in g.iter_mut().zip(dy).zip(y) {
                    *g += d * s * (T::one() - s);
                }
            }
            Op::Tanh(x) => {
                let g = slot(grads, *x, dy.len());
                for ((g, &d), &t) in g.iter_mut().zip(dy).zip(y) {
                    *g += d * (T::one() - t * t);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                let g = slot(grads, *x, n);
                g.iter_mut().for_each(|g| *g += dy[0]);
            }
            Op::Conv2d {
                x,
                k,
                geom,
                batch,
                c_out,
                cols,
            } => {
                let (p, l) = (geom.patch_len(), geom.out_len());
                let in_len = geom.c_in * geom.h * geom.w;
                if self.rg(*k) {
                    let gk = slot(grads, *k, c_out * p);
                    for s in 0..*batch {
                        kernels::gemm_nt_acc(
                            &dy[s * c_out * l..(s + 1) * c_out * l],
                            &cols[s * p * l..(s + 1) * p * l],
                            gk,
                            *c_out,
                            l,
                            p,
                        );
                    }
                }
                if self.rg(*x) {
                    let kd = self.data(*k);
                    let mut dcols = vec![T::zero(); p * l];
                    let gx = slot(grads, *x, batch * in_len);
                    for s in 0..*batch {
                        dcols.iter_mut().for_each(|v| *v = T::zero());
                        kernels::gemm_tn_acc(
                            kd,
                            &dy[s * c_out * l..(s + 1) * c_out * l],
                            &mut dcols,
                            *c_out,
                            p,
                            l,
                        );
                        kernels::col2im_acc(&dcols, geom, &mut gx[s * in_len..(s + 1) * in_len]);
                    }
                }
            }
            Op::Select { x, src } => {
                let n = self.value(*x).numel();
                let g = slot(grads, *x, n);
                for (&s, &d) in src.iter().zip(dy) {
                    g[s] += d;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                layout,
                batch_stats,
            } => {
                let (outer, c, inner) = *layout;
                let idx = |o: usize, ch: usize, i: usize| (o * c + ch) * inner + i;
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for o in 0..outer {
                    for ch in 0..c {
                        for i in 0..inner {
                            let e = idx(o, ch, i);
                            sum_dy[ch] += dy[e];
                            sum_dy_xhat[ch] += dy[e] * xhat[e];
                        }
                    }
                }
                if self.rg(*gamma) {
                    add_into(slot(grads, *gamma, c), &sum_dy_xhat);
                }
                if self.rg(*beta) {
                    add_into(slot(grads, *beta, c), &sum_dy);
                }
                if self.rg(*x) {
                    let gd = self.data(*gamma);
                    let n = T::from_usize(outer * inner).unwrap();
                    let g = slot(grads, *x, dy.len());
                    for o in 0..outer {
                        for ch in 0..c {
                            let scale = gd[ch] * inv_std[ch];
                            for i in 0..inner {
                                let e = idx(o, ch, i);
                                g[e] += if *batch_stats {
                                    scale * (dy[e] - (sum_dy[ch] + xhat[e] * sum_dy_xhat[ch]) / n)
                                } else {
                                    scale * dy[e]
                                };
                            }
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let g = slot(grads, *x, r * c);
                for (k, &row) in idx.iter().enumerate() {
                    add_into(&mut g[row * c..(row + 1) * c], &dy[k * c..(k + 1) * c]);
                }
            }
            Op::ConcatCols(parts) => {
                let r = self.shape(parts[0])[0];
                let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.rg(p) {
                        let g = slot(grads, p, r * w);
                        for row in 0..r {
                            add_into(
                                &mut g[row * w..(row + 1) * w],
                                &dy[row * total + off..row * total + off + w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).numel();
                if self.rg(*a) {
                    add_into(slot(grads, *a, na), &dy[..na]);
                }
                if self.rg(*b) {
                    let nb = self.value(*b).numel();
                    add_into(slot(grads, *b, nb), &dy[na..]);
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.shape(*x)[1];
                let n = self.value(*x).numel();
                let g = slot(grads, *x, n);
                add_into(&mut g[start * c..start * c + dy.len()], dy);
            }
            Op::Scatter { x, dst } => {
                let g = slot(grads, *x, dst.len());
                for (g, &d) in g.iter_mut().zip(dst) {
                    *g += dy[d];
                }
            }
            Op::Reshape(x) => {
                add_into(slot(grads, *x, dy.len()), dy);
            }
            Op::TransformPoints { x, t, offsets } => {
                let d = self.shape(*x)[1];
                let (xd, td) = (self.data(*x), self.data(*t));
                let b = offsets.len() - 1;
                if self.rg(*x) {
                    let g = slot(grads, *x, xd.len());
                    for s in 0..b {
                        let tm = &td[s * d * d..(s + 1) * d * d];
                        for row in offsets[s]..offsets[s + 1] {
                            for i in 0..d {
                                let dyi = dy[row * d + i];
                                for j in 0..d {
                                    g[row * d + j] += tm[i * d + j] * dyi;
                                }
                            }
                        }
                    }
                }
                if self.rg(*t) {
                    let g = slot(grads, *t, td.len());
                    for s in 0..b {
                        let gt = &mut g[s * d * d..(s + 1) * d * d];
                        for row in offsets[s]..offsets[s + 1] {
                            for i in 0..d {
                                let dyi = dy[row * d + i];
                                for j in 0..d {
                                    gt[i * d + j] += dyi * xd[row * d + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                probs,
                targets,
            } => {
                let k = self.shape(*logits)[1];
                let scale = dy[0] / T::from_usize(targets.len()).unwrap();
                let g = slot(grads, *logits, probs.len());
                for (row, &t) in targets.iter().enumerate() {
                    for c in 0..k {
                        let e = row * k + c;
                        let onehot = if c == t { T::one() } else { T::zero() };
                        g[e] += (probs[e] - onehot) * scale;
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

/// Logistic function, evaluated without overflow for large |x|.
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}
