//! Computation record and reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations append a
//! node and return a [`Var`] handle; [`Tape::backward`] walks the record in reverse and
//! fills gradient buffers. Parameters enter the record through [`Tape::param`] and their
//! gradients are moved back into the [`ParamSet`] with [`Tape::accumulate_param_grads`].

use rand::Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::params::{ParamId, ParamSet};
use super::tensor::{inverse_axes, permute_data, split_at_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Affine(Var, Var, Var),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AdaptiveMaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    MeanAbsError {
        pred: Var,
        target: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    tracking: bool,
    spent: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records everything needed for [`Tape::backward`].
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            tracking: true,
            spent: false,
        }
    }

    /// A tape for inference only: no backward context is kept and `backward` fails.
    pub fn inference() -> Self {
        Tape {
            tracking: false,
            ..Self::new()
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.tracking,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// A value that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// A free input that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push("leaf", t, Op::Leaf, true)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Result<Var> {
        let t = params.value(id).clone();
        self.push("param", t, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.val(a), self.val(b), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::new([m, n], out)?, Op::MatMul(a, b), ng)
    }

    /// Batched matrix product: `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape(
                "bmm",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (av, bv) = (self.val(a), self.val(b));
        for i in 0..bs {
            gemm_nn(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(
            "bmm",
            Tensor::new([bs, m, n], out)?,
            Op::BatchMatMul(a, b),
            ng,
        )
    }

    /// `x[m,k] * w[k,n] + b[n]`
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
            return Err(Error::shape(
                "affine",
                format!("input {sx:?}, weight {sw:?}, bias {sb:?}"),
            ));
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.val(x), self.val(w), &mut out, m, k, n);
        let bias = self.val(b);
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push("affine", Tensor::new([m, n], out)?, Op::Affine(x, w, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f64> = self
            .val(a)
            .iter()
            .zip(self.val(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push("add", Tensor::new(shape, out)?, Op::Add(a, b), ng)
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(
                "add_broadcast",
                format!("{sb:?} is not a suffix of {sa:?}"),
            ));
        }
        let inner = self.val(b).len();
        let bv = self.val(b);
        let mut out = self.val(a).to_vec();
        for chunk in out.chunks_exact_mut(inner) {
            for (o, &y) in chunk.iter_mut().zip(bv) {
                *o += y;
            }
        }
        let shape = sa.to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push(
            "add_broadcast",
            Tensor::new(shape, out)?,
            Op::AddBroadcast(a, b),
            ng,
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f64> = self
            .val(a)
            .iter()
            .zip(self.val(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push("mul", Tensor::new(shape, out)?, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.val(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push("scale", Tensor::new(shape, out)?, Op::Scale(a, c), ng)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out: Vec<f64> = self.val(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(name, Tensor::new(shape, out)?, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, |x| gelu(x).0, Op::Gelu(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap_or(&1);
        let mut out = self.val(a).to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push("softmax", Tensor::new(shape, out)?, Op::Softmax(a), ng)
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xv = self.val(x);
        let (g, bt) = (self.val(gamma), self.val(beta));
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let (xhat, inv_std) = if ng && self.tracking {
            (xhat, inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        self.push(
            "layer_norm",
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.val(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = inputs.iter().any(|&v| self.needs(v));
        self.push(
            "concat",
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        )
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, extent, inner) = split_at_axis(&s, axis);
        let xv = self.val(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.needs(x);
        self.push(
            "slice",
            Tensor::new(shape, out)?,
            Op::Slice { x, axis, start },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.val(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let data = self.val(x).to_vec();
        let ng = self.needs(x);
        self.push(
            "reshape",
            Tensor::new(shape.to_vec(), data)?,
            Op::Reshape(x),
            ng,
        )
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        let mut seen = vec![false; s.len()];
        let valid = axes.len() == s.len()
            && axes
                .iter()
                .all(|&a| a < s.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(Error::shape("permute", format!("axes {axes:?} for {s:?}")));
        }
        let (shape, data) = permute_data(self.val(x), s, axes);
        let ng = self.needs(x);
        self.push(
            "permute",
            Tensor::new(shape, data)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            ng,
        )
    }

    /// 2-D convolution `x[B,C,H,W] * w[O,C,kh,kw] + b[O]`, square stride and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sb != [sw[0]] || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {sx:?}, kernel {sw:?}, bias {sb:?}, stride {stride}"),
            ));
        }
        let (batch, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let cols = im2col(self.val(x), &geom);
        let rows = batch * ho * wo;
        let ck = c_in * kh * kw;
        let mut mat = vec![0.0; rows * c_out];
        gemm_nt(&cols, self.val(w), &mut mat, rows, ck, c_out);
        let bias = self.val(b);
        let mut out = vec![0.0; rows * c_out];
        // [B, Ho*Wo, O] -> [B, O, Ho, Wo]
        let hw = ho * wo;
        for bi in 0..batch {
            for p in 0..hw {
                let src = &mat[(bi * hw + p) * c_out..(bi * hw + p + 1) * c_out];
                for (o, &v) in src.iter().enumerate() {
                    out[(bi * c_out + o) * hw + p] = v + bias[o];
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        let cols = if ng && self.tracking {
            cols
        } else {
            Vec::new()
        };
        self.push(
            "conv2d",
            Tensor::new([batch, c_out, ho, wo], out)?,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            ng,
        )
    }

    /// Max pooling of `x[B,C,H,W]` onto a fixed `out_h x out_w` grid.
    ///
    /// Bin `j` of `n` over extent `L` covers `[floor(j*L/n), ceil((j+1)*L/n))`.
    pub fn adaptive_max_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || out_h == 0 || out_w == 0 || s[2] < out_h || s[3] < out_w {
            return Err(Error::shape(
                "adaptive_max_pool2d",
                format!("input {s:?} cannot be pooled to {out_h}x{out_w}"),
            ));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let xv = self.val(x);
        let mut out = Vec::with_capacity(planes * out_h * out_w);
        let mut argmax = Vec::with_capacity(planes * out_h * out_w);
        for p in 0..planes {
            let plane = &xv[p * h * w..(p + 1) * h * w];
            for i in 0..out_h {
                let (r0, r1) = adaptive_bin(i, h, out_h);
                for j in 0..out_w {
                    let (c0, c1) = adaptive_bin(j, w, out_w);
                    let mut best = r0 * w + c0;
                    for r in r0..r1 {
                        for c in c0..c1 {
                            if plane[r * w + c] > plane[best] {
                                best = r * w + c;
                            }
                        }
                    }
                    out.push(plane[best]);
                    argmax.push(p * h * w + best);
                }
            }
        }
        let shape = vec![s[0], s[1], out_h, out_w];
        let ng = self.needs(x);
        self.push(
            "adaptive_max_pool2d",
            Tensor::new(shape, out)?,
            Op::AdaptiveMaxPool2d { x, argmax },
            ng,
        )
    }

    /// Inverted dropout: identity when `train` is false, otherwise zeroes each element with
    /// probability `rate` and scales survivors by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, train: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::shape(
                "dropout",
                format!("rate {rate} outside [0, 1)"),
            ));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.val(x).len(), rate, rng);
        self.apply_dropout_mask(x, mask)
    }

    /// Multiplies `x` elementwise by a precomputed dropout mask (entries `0` or `1 / (1 - rate)`).
    pub fn apply_dropout_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.val(x).len() {
            return Err(Error::shape(
                "dropout",
                format!("mask of {} for input {:?}", mask.len(), self.shape(x)),
            ));
        }
        let out: Vec<f64> = self.val(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(
            "dropout",
            Tensor::new(shape, out)?,
            Op::Dropout { x, mask },
            ng,
        )
    }

    /// Mean of `|pred - target|` over all elements, as a scalar.
    pub fn mean_abs_error(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let pv = self.val(pred);
        if pv.len() != target.len() || pv.is_empty() {
            return Err(Error::shape(
                "mean_abs_error",
                format!("{} predictions vs {} targets", pv.len(), target.len()),
            ));
        }
        if target.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite {
                op: "mean_abs_error",
            });
        }
        let loss = pv
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>()
            / pv.len() as f64;
        let ng = self.needs(pred);
        self.push(
            "mean_abs_error",
            Tensor::scalar(loss),
            Op::MeanAbsError {
                pred,
                target: target.to_vec(),
            },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).iter().sum();
        let ng = self.needs(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Reverse pass from a scalar `loss`. May run once per recording.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.tracking {
            return Err(Error::Backward(
                "tape was recorded without gradient tracking".into(),
            ));
        }
        if self.spent {
            return Err(Error::Backward(
                "backward already ran on this recording; run a new forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.spent = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            if self.nodes[id].needs_grad {
                self.backprop_node(id, &g);
            }
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let g = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    fn acc_slice(&mut self, v: Var, src: &[f64]) {
        self.acc(v, |g| {
            for (d, s) in g.iter_mut().zip(src) {
                *d += s;
            }
        });
    }

    fn backprop_node(&mut self, id: usize, g: &[f64]) {
        // Saved context is moved out temporarily so node values stay borrowable.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g, self.val(b), &mut da, m, n, k);
                    self.acc_slice(a, &da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(self.val(a), g, &mut db, m, k, n);
                    self.acc_slice(b, &db);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (bs, m, k) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
                let n = self.shape(b)[2];
                if self.needs(a) {
                    let mut da = vec![0.0; bs * m * k];
                    let bv = self.val(b);
                    for i in 0..bs {
                        gemm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &bv[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.acc_slice(a, &da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; bs * k * n];
                    let av = self.val(a);
                    for i in 0..bs {
                        gemm_tn(
                            &av[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.acc_slice(b, &db);
                }
            }
            Op::Affine(x, w, b) => {
                let (x, w, b) = (*x, *w, *b);
                let (m, k) = (self.shape(x)[0], self.shape(x)[1]);
                let n = self.shape(w)[1];
                if self.needs(x) {
                    let mut dx = vec![0.0; m * k];
                    gemm_nt(g, self.val(w), &mut dx, m, n, k);
                    self.acc_slice(x, &dx);
                }
                if self.needs(w) {
                    let mut dw = vec![0.0; k * n];
                    gemm_tn(self.val(x), g, &mut dw, m, k, n);
                    self.acc_slice(w, &dw);
                }
                self.acc(b, |db| {
                    for row in g.chunks_exact(n) {
                        for (d, s) in db.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.acc_slice(a, g);
                self.acc_slice(b, g);
            }
            Op::AddBroadcast(a, b) => {
                let (a, b) = (*a, *b);
                self.acc_slice(a, g);
                let inner = self.val(b).len();
                self.acc(b, |db| {
                    for chunk in g.chunks_exact(inner) {
                        for (d, s) in db.iter_mut().zip(chunk) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let da: Vec<f64> = g.iter().zip(self.val(b)).map(|(g, y)| g * y).collect();
                    self.acc_slice(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> = g.iter().zip(self.val(a)).map(|(g, x)| g * x).collect();
                    self.acc_slice(b, &db);
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.acc(a, |da| {
                    for (d, s) in da.iter_mut().zip(g) {
                        *d += s * c;
                    }
                });
            }
            Op::Relu(a) => {
                let a = *a;
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.val(a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.acc_slice(a, &d);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = self.nodes[id].value.data();
                let d: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.acc_slice(a, &d);
            }
            Op::Tanh(a) => {
                let a = *a;
                let y = self.nodes[id].value.data();
                let d: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.acc_slice(a, &d);
            }
            Op::Gelu(a) => {
                let a = *a;
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.val(a))
                    .map(|(g, &x)| g * gelu(x).1)
                    .collect();
                self.acc_slice(a, &d);
            }
            Op::Softmax(a) => {
                let a = *a;
                let y = self.nodes[id].value.data();
                let n = *self.nodes[id].value.shape().last().unwrap_or(&1);
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d
                    .chunks_exact_mut(n)
                    .zip(y.chunks_exact(n))
                    .zip(g.chunks_exact(n))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc_slice(a, &d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = self.shape(gamma)[0];
                let gm = self.val(gamma).to_vec();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; g.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gm[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    let df = d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gm[j];
                        dx[r * d + j] = is / df * (df * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                self.acc_slice(x, &dx);
                self.acc_slice(gamma, &dgamma);
                self.acc_slice(beta, &dbeta);
            }
            Op::Concat { inputs, axis } => {
                let shape = self.nodes[id].value.shape().to_vec();
                let (outer, total, inner) = split_at_axis(&shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    let mut part = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        part.extend_from_slice(&g[base..base + len * inner]);
                    }
                    self.acc_slice(v, &part);
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (x, axis, start) = (*x, *axis, *start);
                let (outer, extent, inner) = split_at_axis(self.shape(x), axis);
                let len = self.nodes[id].value.shape()[axis];
                self.acc(x, |dx| {
                    for o in 0..outer {
                        let base = (o * extent + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, s) in dx[base..base + len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                let x = *x;
                self.acc_slice(x, g);
            }
            Op::Permute { x, axes } => {
                let x = *x;
                let shape = self.nodes[id].value.shape().to_vec();
                let (_, back) = permute_data(g, &shape, &inverse_axes(axes));
                self.acc_slice(x, &back);
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (x, w, b, geom) = (*x, *w, *b, *geom);
                let hw = geom.ho * geom.wo;
                let rows = geom.batch * hw;
                let ck = geom.c_in * geom.kh * geom.kw;
                // [B, O, Ho, Wo] -> [B*Ho*Wo, O]
                let mut gmat = vec![0.0; rows * geom.c_out];
                for bi in 0..geom.batch {
                    for o in 0..geom.c_out {
                        for p in 0..hw {
                            gmat[(bi * hw + p) * geom.c_out + o] =
                                g[(bi * geom.c_out + o) * hw + p];
                        }
                    }
                }
                self.acc(b, |db| {
                    for row in gmat.chunks_exact(geom.c_out) {
                        for (d, s) in db.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                });
                if self.needs(w) {
                    let mut dw = vec![0.0; geom.c_out * ck];
                    gemm_tn(&gmat, cols, &mut dw, rows, geom.c_out, ck);
                    self.acc_slice(w, &dw);
                }
                if self.needs(x) {
                    let mut dcols = vec![0.0; rows * ck];
                    gemm_nn(&gmat, self.val(w), &mut dcols, rows, geom.c_out, ck);
                    let dx = col2im(&dcols, &geom);
                    self.acc_slice(x, &dx);
                }
            }
            Op::AdaptiveMaxPool2d { x, argmax } => {
                let x = *x;
                self.acc(x, |dx| {
                    for (&i, &gv) in argmax.iter().zip(g) {
                        dx[i] += gv;
                    }
                });
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let d: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.acc_slice(x, &d);
            }
            Op::MeanAbsError { pred, target } => {
                let pred = *pred;
                let n = target.len() as f64;
                let d: Vec<f64> = self
                    .val(pred)
                    .iter()
                    .zip(target)
                    .map(|(p, t)| {
                        let diff: f64 = p - t;
                        let s = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        g[0] * s / n
                    })
                    .collect();
                self.acc_slice(pred, &d);
            }
            Op::Sum(x) => {
                let x = *x;
                let gv = g[0];
                self.acc(x, |dx| dx.iter_mut().for_each(|d| *d += gv));
            }
        }
        self.nodes[id].op = op;
    }

    /// Adds the gradient of every parameter node into its [`ParamSet`] buffer.
    pub fn accumulate_param_grads(&self, params: &mut ParamSet) -> Result<()> {
        if !self.spent {
            return Err(Error::Backward("no backward pass has run".into()));
        }
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(pid), Some(g)) = (&node.op, grad) {
                let p = params.get_mut(*pid);
                if p.value.len() != g.len() {
                    return Err(Error::shape(
                        "accumulate_param_grads",
                        format!("parameter `{}` changed shape", p.name),
                    ));
                }
                let buf = p.grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (d, s) in buf.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        Ok(())
    }
}

/// Inverted-dropout mask of `len` entries, each `0` with probability `rate`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GELU value and derivative (tanh approximation).
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

pub(crate) fn adaptive_bin(j: usize, extent: usize, bins: usize) -> (usize, usize) {
    let start = j * extent / bins;
    let end = ((j + 1) * extent).div_ceil(bins);
    (start, end)
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ck = g.c_in * g.kh * g.kw;
    let hw = g.ho * g.wo;
    let mut cols = vec![0.0; g.batch * hw * ck];
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = &mut cols[((b * hw) + oy * g.wo + ox) * ck..][..ck];
                let mut idx = 0;
                for c in 0..g.c_in {
                    let plane = &x[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                row[idx] = plane[iy as usize * g.w + ix as usize];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ck = g.c_in * g.kh * g.kw;
    let hw = g.ho * g.wo;
    let mut x = vec![0.0; g.batch * g.c_in * g.h * g.w];
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = &cols[((b * hw) + oy * g.wo + ox) * ck..][..ck];
                let mut idx = 0;
                for c in 0..g.c_in {
                    let base = (b * g.c_in + c) * g.h * g.w;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                x[base + iy as usize * g.w + ix as usize] += row[idx];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    x
}
