//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value; nodes are created in
//! topological order, so backward is a single reverse sweep over the tape.

use super::tensor::numel;
use super::{gemm, AutodiffError, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

#[derive(Clone, Copy, Debug)]
struct PoolGeom {
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddChannel {
        x: Var,
        b: Var,
        outer: usize,
        ch: usize,
        inner: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<S>,
    },
    Relu(Var),
    LeakyRelu(Var, S),
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        outer: usize,
        ch: usize,
        inner: usize,
        xhat: Vec<S>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        outer: usize,
        ch: usize,
        inner: usize,
        mean: Vec<S>,
        inv_std: Vec<S>,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        x: Var,
        geom: PoolGeom,
    },
    Reduce {
        x: Var,
        outer: usize,
        mid: usize,
        inner: usize,
        kind: ReduceKind,
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
        row: usize,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    ScaleRows {
        x: Var,
        coeffs: Vec<S>,
        row: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
}

struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance.
    pub var: Vec<f64>,
}

/// A single-threaded differentiation tape.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    check_finite: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Reject non-finite forward values with [`AutodiffError::NonFinite`].
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape is consistent")
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<S>,
        op: Op<S>,
        needs_grad: bool,
    ) -> Result<Var, AutodiffError> {
        debug_assert_eq!(numel(&shape), value.len(), "{name}");
        if self.check_finite && value.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that gradients flow into.
    pub fn variable(&mut self, t: &Tensor<S>) -> Var {
        self.leaf(t, true)
    }

    /// A leaf treated as data.
    pub fn constant(&mut self, t: &Tensor<S>) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, t: &Tensor<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var, AutodiffError> {
        self.same_shape(name, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let g = self.grad_of(&[a, b]);
        self.push(name, shape, value, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var, AutodiffError> {
        let value = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let g = self.grad_of(&[a]);
        self.push("scale", shape, value, Op::Scale(a, c), g)
    }

    /// Adds `b[c]` to every element of channel `c`, where the channel axis is 1.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var, AutodiffError> {
        let (outer, ch, inner) = self.channel_layout("add_channel", x)?;
        if self.value(b).len() != ch {
            return Err(mismatch(
                "add_channel",
                format!("bias {:?} for {ch} channels", self.shape(b)),
            ));
        }
        let xs = self.value(x);
        let bs = self.value(b);
        let mut value = Vec::with_capacity(xs.len());
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                value.extend(xs[base..base + inner].iter().map(|&v| v + bs[c]));
            }
        }
        let shape = self.shape(x).to_vec();
        let g = self.grad_of(&[x, b]);
        self.push(
            "add_channel",
            shape,
            value,
            Op::AddChannel {
                x,
                b,
                outer,
                ch,
                inner,
            },
            g,
        )
    }

    fn channel_layout(
        &self,
        op: &'static str,
        x: Var,
    ) -> Result<(usize, usize, usize), AutodiffError> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(mismatch(op, format!("needs a channel axis, got {s:?}")));
        }
        Ok((s[0], s[1], numel(&s[2..])))
    }

    /// `(m×k) · (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![S::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            false,
            &mut value,
            false,
        );
        let g = self.grad_of(&[a, b]);
        self.push("matmul", vec![m, n], value, Op::MatMul { a, b, m, k, n }, g)
    }

    /// Cross-correlation of `x (N, Cin, H, W)` with `w (Cout, Cin, kh, kw)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, AutodiffError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(mismatch(
                "conv2d",
                format!("input {sx:?}, kernel {sw:?}, stride {stride}"),
            ));
        }
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(mismatch(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded {h}x{wd}"),
            ));
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let cols = im2col(self.value(x), &geom);
        let spatial = geom.ho * geom.wo;
        let mut flat = vec![S::zero(); cout * geom.col_cols()];
        gemm(
            cout,
            geom.col_rows(),
            geom.col_cols(),
            self.value(w),
            false,
            &cols,
            false,
            &mut flat,
            false,
        );
        // (Cout, N·L) -> (N, Cout, L)
        let mut value = vec![S::zero(); flat.len()];
        for co in 0..cout {
            for b in 0..n {
                let src = co * geom.col_cols() + b * spatial;
                let dst = (b * cout + co) * spatial;
                value[dst..dst + spatial].copy_from_slice(&flat[src..src + spatial]);
            }
        }
        let g = self.grad_of(&[x, w]);
        let cols = if g { cols } else { Vec::new() };
        self.push(
            "conv2d",
            vec![n, cout, geom.ho, geom.wo],
            value,
            Op::Conv2d { x, w, geom, cols },
            g,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let value = self.value(x).iter().map(|&v| v.max(S::zero())).collect();
        let shape = self.shape(x).to_vec();
        let g = self.grad_of(&[x]);
        self.push("relu", shape, value, Op::Relu(x), g)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: S) -> Result<Var, AutodiffError> {
        let value = self
            .value(x)
            .iter()
            .map(|&v| if v > S::zero() { v } else { v * slope })
            .collect();
        let shape = self.shape(x).to_vec();
        let g = self.grad_of(&[x]);
        self.push("leaky_relu", shape, value, Op::LeakyRelu(x, slope), g)
    }
}

/// Calls `f(channel, flat_index)` over a `(outer, ch, inner)` layout.
#[inline]
fn for_each_channel(len: usize, ch: usize, inner: usize, mut f: impl FnMut(usize, usize)) {
    if inner == 1 {
        for base in (0..len).step_by(ch) {
            for c in 0..ch {
                f(c, base + c);
            }
        }
    } else {
        for (k, base) in (0..len).step_by(inner).enumerate() {
            let c = k % ch;
            for i in base..base + inner {
                f(c, i);
            }
        }
    }
}

impl<S: Scalar> Graph<S> {
    /// Normalization with per-batch statistics over every axis except axis 1.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats), AutodiffError> {
        let (outer, ch, inner) = self.channel_layout("batch_norm", x)?;
        if self.value(gamma).len() != ch || self.value(beta).len() != ch {
            return Err(mismatch(
                "batch_norm",
                format!("affine params for {ch} channels"),
            ));
        }
        let count = outer * inner;
        if count < 2 {
            return Err(mismatch(
                "batch_norm",
                "needs at least two values per channel".into(),
            ));
        }
        let xs = self.value(x);
        let mut mean = vec![0.0f64; ch];
        let mut var = vec![0.0f64; ch];
        for_each_channel(xs.len(), ch, inner, |c, i| mean[c] += xs[i].f64());
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for_each_channel(xs.len(), ch, inner, |c, i| {
            var[c] += (xs[i].f64() - mean[c]).powi(2)
        });
        let biased: Vec<f64> = var.iter().map(|v| v / count as f64).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gs, bs) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![S::zero(); xs.len()];
        let mut value = vec![S::zero(); xs.len()];
        for_each_channel(outer * ch * inner, ch, inner, |c, i| {
            let h = S::lit((xs[i].f64() - mean[c]) * inv_std[c]);
            xhat[i] = h;
            value[i] = gs[c] * h + bs[c];
        });
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.iter().map(|v| v / (count - 1) as f64).collect(),
        };
        let shape = self.shape(x).to_vec();
        let g = self.grad_of(&[x, gamma, beta]);
        let op = Op::BatchNormTrain {
            x,
            gamma,
            beta,
            outer,
            ch,
            inner,
            xhat,
            inv_std,
        };
        Ok((self.push("batch_norm", shape, value, op, g)?, stats))
    }

    /// Normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var, AutodiffError> {
        let (outer, ch, inner) = self.channel_layout("batch_norm", x)?;
        if self.value(gamma).len() != ch
            || self.value(beta).len() != ch
            || mean.len() != ch
            || var.len() != ch
        {
            return Err(mismatch(
                "batch_norm",
                format!("statistics for {ch} channels"),
            ));
        }
        let mean: Vec<S> = mean.iter().map(|&m| S::lit(m)).collect();
        let inv_std: Vec<S> = var
            .iter()
            .map(|&v| S::lit(1.0 / (v + eps).sqrt()))
            .collect();
        let (xs, gs, bs) = (self.value(x), self.value(gamma), self.value(beta));
        let mut value = vec![S::zero(); xs.len()];
        for_each_channel(outer * ch * inner, ch, inner, |c, i| {
            value[i] = gs[c] * (xs[i] - mean[c]) * inv_std[c] + bs[c];
        });
        let shape = self.shape(x).to_vec();
        let g = self.grad_of(&[x, gamma, beta]);
        let op = Op::BatchNormEval {
            x,
            gamma,
            beta,
            outer,
            ch,
            inner,
            mean,
            inv_std,
        };
        self.push("batch_norm", shape, value, op, g)
    }

    fn pool_geom(
        &self,
        op: &'static str,
        x: Var,
        k: usize,
        stride: usize,
    ) -> Result<(PoolGeom, Vec<usize>), AutodiffError> {
        let s = self.shape(x);
        if s.len() != 4 || k == 0 || stride == 0 || s[2] < k || s[3] < k {
            return Err(mismatch(
                op,
                format!("input {s:?}, window {k}, stride {stride}"),
            ));
        }
        let geom = PoolGeom {
            planes: s[0] * s[1],
            h: s[2],
            w: s[3],
            k,
            stride,
            ho: (s[2] - k) / stride + 1,
            wo: (s[3] - k) / stride + 1,
        };
        Ok((geom, vec![s[0], s[1], geom.ho, geom.wo]))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var, AutodiffError> {
        let (geom, shape) = self.pool_geom("max_pool2d", x, k, stride)?;
        let xs = self.value(x);
        let mut value = Vec::with_capacity(numel(&shape));
        let mut argmax = Vec::with_capacity(numel(&shape));
        for p in 0..geom.planes {
            let plane = p * geom.h * geom.w;
            for oy in 0..geom.ho {
                for ox in 0..geom.wo {
                    let mut best = plane + oy * stride * geom.w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = plane + (oy * stride + dy) * geom.w + ox * stride + dx;
                            if xs[i] > xs[best] {
                                best = i;
                            }
                        }
                    }
                    value.push(xs[best]);
                    argmax.push(best);
                }
            }
        }
        let g = self.grad_of(&[x]);
        self.push("max_pool2d", shape, value, Op::MaxPool2d { x, argmax }, g)
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var, AutodiffError> {
        let (geom, shape) = self.pool_geom("avg_pool2d", x, k, stride)?;
        let xs = self.value(x);
        let area = (k * k) as f64;
        let mut value = Vec::with_capacity(numel(&shape));
        for p in 0..geom.planes {
            let plane = p * geom.h * geom.w;
            for oy in 0..geom.ho {
                for ox in 0..geom.wo {
                    let mut acc = 0.0f64;
                    for dy in 0..k {
                        let row = plane + (oy * stride + dy) * geom.w + ox * stride;
                        acc += xs[row..row + k].iter().map(|v| v.f64()).sum::<f64>();
                    }
                    value.push(S::lit(acc / area));
                }
            }
        }
        let g = self.grad_of(&[x]);
        self.push("avg_pool2d", shape, value, Op::AvgPool2d { x, geom }, g)
    }

    /// Reduces the middle axis of `x` viewed as `(outer, mid, inner)`.
    pub fn reduce_axis(
        &mut self,
        x: Var,
        outer: usize,
        mid: usize,
        inner: usize,
        kind: ReduceKind,
        out_shape: Vec<usize>,
    ) -> Result<Var, AutodiffError> {
        let xs = self.value(x);
        if outer * mid * inner != xs.len() || numel(&out_shape) != outer * inner || mid == 0 {
            return Err(mismatch(
                "reduce",
                format!(
                    "{:?} as ({outer},{mid},{inner}) -> {out_shape:?}",
                    self.shape(x)
                ),
            ));
        }
        let mut value = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::new();
        for o in 0..outer {
            for i in 0..inner {
                let at = |m: usize| (o * mid + m) * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let s: f64 = (0..mid).map(|m| xs[at(m)].f64()).sum();
                        let s = if kind == ReduceKind::Mean {
                            s / mid as f64
                        } else {
                            s
                        };
                        value.push(S::lit(s));
                    }
                    ReduceKind::Max => {
                        let mut best = at(0);
                        for m in 1..mid {
                            if xs[at(m)] > xs[best] {
                                best = at(m);
                            }
                        }
                        value.push(xs[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let g = self.grad_of(&[x]);
        let op = Op::Reduce {
            x,
            outer,
            mid,
            inner,
            kind,
            argmax,
        };
        self.push("reduce", out_shape, value, op, g)
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (n, c, hw) = self.channel_layout("global_avg_pool", x)?;
        self.reduce_axis(x, n * c, hw, 1, ReduceKind::Mean, vec![n, c])
    }

    /// `(N, C, H, W) -> (N, C)` spatial max.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (n, c, hw) = self.channel_layout("global_max_pool", x)?;
        self.reduce_axis(x, n * c, hw, 1, ReduceKind::Max, vec![n, c])
    }

    /// Reduces consecutive groups of `group` rows of a 2-D `(G·group, d)` tensor.
    pub fn reduce_row_groups(
        &mut self,
        x: Var,
        group: usize,
        kind: ReduceKind,
    ) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || group == 0 || s[0] % group != 0 {
            return Err(mismatch(
                "reduce_row_groups",
                format!("{s:?} in groups of {group}"),
            ));
        }
        let groups = s[0] / group;
        self.reduce_axis(x, groups, group, s[1], kind, vec![groups, s[1]])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = self
            .nodes
            .get(
                parts
                    .first()
                    .ok_or_else(|| mismatch("concat", "no inputs".into()))?
                    .0,
            )
            .map(|n| n.shape.clone())
            .expect("valid var");
        if axis >= first.len() {
            return Err(mismatch("concat", format!("axis {axis} of {first:?}")));
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(mismatch(
                    "concat",
                    format!("{s:?} vs {first:?} along axis {axis}"),
                ));
            }
            widths.push(s[axis]);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &wdt) in parts.iter().zip(&widths) {
                let chunk = wdt * inner;
                value.extend_from_slice(&self.value(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let g = self.grad_of(parts);
        let op = Op::Concat {
            parts: parts.iter().copied().zip(widths).collect(),
            outer,
            inner,
        };
        self.push("concat", shape, value, op, g)
    }

    /// Selects rows (first-axis slices) by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(mismatch("gather_rows", "scalar input".into()));
        }
        let row = numel(&s[1..]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(mismatch(
                "gather_rows",
                format!("index {bad} out of {} rows", s[0]),
            ));
        }
        let xs = self.value(x);
        let mut value = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            value.extend_from_slice(&xs[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let g = self.grad_of(&[x]);
        self.push(
            "gather_rows",
            shape,
            value,
            Op::Gather {
                x,
                idx: idx.to_vec(),
                row,
            },
            g,
        )
    }

    fn rows_of(&self, op: &'static str, x: Var) -> Result<(usize, usize), AutodiffError> {
        let s = self.shape(x);
        if s.len() != 2 || s[1] == 0 {
            return Err(mismatch(op, format!("expects (rows, cols), got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (_, cols) = self.rows_of("softmax", x)?;
        let value = self.value(x).chunks(cols).flat_map(softmax_row).collect();
        let shape = self.shape(x).to_vec();
        let g = self.grad_of(&[x]);
        self.push("softmax", shape, value, Op::Softmax(x), g)
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (_, cols) = self.rows_of("log_softmax", x)?;
        let mut value = Vec::with_capacity(self.value(x).len());
        for r in self.value(x).chunks(cols) {
            let max = r.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
            let lse = max + r.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
            value.extend(r.iter().map(|v| S::lit(v.f64() - lse)));
        }
        let shape = self.shape(x).to_vec();
        let g = self.grad_of(&[x]);
        self.push("log_softmax", shape, value, Op::LogSoftmax(x), g)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let value = self.value(x).iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        let g = self.grad_of(&[x]);
        self.push("log", shape, value, Op::Log(x), g)
    }

    /// Multiplies row `r` (first-axis slice) by the constant `coeffs[r]`.
    pub fn scale_rows(&mut self, x: Var, coeffs: &[S]) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || s[0] != coeffs.len() {
            return Err(mismatch(
                "scale_rows",
                format!("{s:?} with {} coefficients", coeffs.len()),
            ));
        }
        let row = numel(&s[1..]);
        let value = self
            .value(x)
            .chunks(row.max(1))
            .zip(coeffs)
            .flat_map(|(r, &c)| r.iter().map(move |&v| v * c))
            .collect();
        let g = self.grad_of(&[x]);
        let op = Op::ScaleRows {
            x,
            coeffs: coeffs.to_vec(),
            row,
        };
        self.push("scale_rows", s, value, op, g)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s: f64 = self.value(x).iter().map(|v| v.f64()).sum();
        let g = self.grad_of(&[x]);
        self.push("sum", vec![], vec![S::lit(s)], Op::SumAll(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(mismatch("mean", "empty input".into()));
        }
        let s: f64 = self.value(x).iter().map(|v| v.f64()).sum();
        let g = self.grad_of(&[x]);
        self.push(
            "mean",
            vec![],
            vec![S::lit(s / n as f64)],
            Op::MeanAll(x),
            g,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        if numel(&shape) != self.value(x).len() {
            return Err(mismatch(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let value = self.value(x).to_vec();
        let g = self.grad_of(&[x]);
        self.push("reshape", shape, value, Op::Reshape(x), g)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>, AutodiffError> {
        if self.value(loss).len() != 1 {
            return Err(mismatch(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop(node, &gout, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let len = nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![S::zero(); len]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g)
                });
                acc(*b, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g)
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g)
                });
                acc(*b, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(bv) {
                        *d = *d + g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                        *d = *d + g * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * *c)
            }),
            Op::AddChannel {
                x,
                b,
                outer,
                ch,
                inner,
            } => {
                acc(*x, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g)
                });
                acc(*b, &mut |d| {
                    for o in 0..*outer {
                        for (c, dc) in d.iter_mut().enumerate().take(*ch) {
                            let base = (o * ch + c) * inner;
                            let s: f64 = g[base..base + inner].iter().map(|v| v.f64()).sum();
                            *dc = *dc + S::lit(s);
                        }
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| gemm(*m, *n, *k, g, false, bv, true, d, true));
                acc(*b, &mut |d| gemm(*k, *m, *n, av, true, g, false, d, true));
            }
            Op::Conv2d { x, w, geom, cols } => {
                let spatial = geom.ho * geom.wo;
                let ncols = geom.col_cols();
                let mut gflat = vec![S::zero(); geom.cout * ncols];
                for b in 0..geom.n {
                    for co in 0..geom.cout {
                        let src = (b * geom.cout + co) * spatial;
                        let dst = co * ncols + b * spatial;
                        gflat[dst..dst + spatial].copy_from_slice(&g[src..src + spatial]);
                    }
                }
                acc(*w, &mut |d| {
                    gemm(
                        geom.cout,
                        ncols,
                        geom.col_rows(),
                        &gflat,
                        false,
                        cols,
                        true,
                        d,
                        true,
                    )
                });
                let wv = val(*w);
                acc(*x, &mut |d| {
                    let mut gcols = vec![S::zero(); geom.col_rows() * ncols];
                    gemm(
                        geom.col_rows(),
                        geom.cout,
                        ncols,
                        wv,
                        true,
                        &gflat,
                        false,
                        &mut gcols,
                        false,
                    );
                    col2im_add(&gcols, geom, d);
                });
            }
            Op::Relu(x) => {
                let out = &node.value;
                acc(*x, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(out) {
                        if y > S::zero() {
                            *d = *d + g;
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(xv) {
                        *d = *d + if v > S::zero() { g } else { g * *slope };
                    }
                });
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                outer,
                ch,
                inner,
                xhat,
                inv_std,
            } => {
                let count = (outer * inner) as f64;
                let mut sum_g = vec![0.0f64; *ch];
                let mut sum_gx = vec![0.0f64; *ch];
                for_each_channel(*outer * *ch * *inner, *ch, *inner, |c, i| {
                    sum_g[c] += g[i].f64();
                    sum_gx[c] += g[i].f64() * xhat[i].f64();
                });
                acc(*gamma, &mut |d| {
                    d.iter_mut()
                        .zip(&sum_gx)
                        .for_each(|(d, &s)| *d = *d + S::lit(s));
                });
                acc(*beta, &mut |d| {
                    d.iter_mut()
                        .zip(&sum_g)
                        .for_each(|(d, &s)| *d = *d + S::lit(s));
                });
                let gv = val(*gamma);
                acc(*x, &mut |d| {
                    for_each_channel(*outer * *ch * *inner, *ch, *inner, |c, i| {
                        let gam = gv[c].f64();
                        let v = gam * inv_std[c] / count
                            * (count * g[i].f64() - sum_g[c] - xhat[i].f64() * sum_gx[c]);
                        d[i] = d[i] + S::lit(v);
                    });
                });
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                outer,
                ch,
                inner,
                mean,
                inv_std,
            } => {
                let (xv, gv) = (val(*x), val(*gamma));
                let mut sum_g = vec![0.0f64; *ch];
                let mut sum_gx = vec![0.0f64; *ch];
                for_each_channel(*outer * *ch * *inner, *ch, *inner, |c, i| {
                    sum_g[c] += g[i].f64();
                    sum_gx[c] += (g[i] * (xv[i] - mean[c]) * inv_std[c]).f64();
                });
                acc(*gamma, &mut |d| {
                    d.iter_mut()
                        .zip(&sum_gx)
                        .for_each(|(d, &s)| *d = *d + S::lit(s));
                });
                acc(*beta, &mut |d| {
                    d.iter_mut()
                        .zip(&sum_g)
                        .for_each(|(d, &s)| *d = *d + S::lit(s));
                });
                acc(*x, &mut |d| {
                    for_each_channel(*outer * *ch * *inner, *ch, *inner, |c, i| {
                        d[i] = d[i] + g[i] * gv[c] * inv_std[c];
                    });
                });
            }
            Op::MaxPool2d { x, argmax } => acc(*x, &mut |d| {
                for (&src, &g) in argmax.iter().zip(g) {
                    d[src] = d[src] + g;
                }
            }),
            Op::AvgPool2d { x, geom } => acc(*x, &mut |d| {
                let area = S::lit((geom.k * geom.k) as f64);
                let mut o = 0;
                for p in 0..geom.planes {
                    let plane = p * geom.h * geom.w;
                    for oy in 0..geom.ho {
                        for ox in 0..geom.wo {
                            let share = g[o] / area;
                            o += 1;
                            for dy in 0..geom.k {
                                let row =
                                    plane + (oy * geom.stride + dy) * geom.w + ox * geom.stride;
                                d[row..row + geom.k]
                                    .iter_mut()
                                    .for_each(|v| *v = *v + share);
                            }
                        }
                    }
                }
            }),
            Op::Reduce {
                x,
                outer,
                mid,
                inner,
                kind,
                argmax,
            } => acc(*x, &mut |d| match kind {
                ReduceKind::Max => {
                    for (&src, &g) in argmax.iter().zip(g) {
                        d[src] = d[src] + g;
                    }
                }
                ReduceKind::Sum | ReduceKind::Mean => {
                    let f = if *kind == ReduceKind::Mean {
                        S::lit(1.0 / *mid as f64)
                    } else {
                        S::one()
                    };
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let share = g[o * inner + i] * f;
                            for m in 0..*mid {
                                let at = (o * mid + m) * inner + i;
                                d[at] = d[at] + share;
                            }
                        }
                    }
                }
            }),
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, wdt) in parts {
                    acc(p, &mut |d| {
                        let chunk = wdt * inner;
                        for o in 0..*outer {
                            let src = o * total * inner + offset * inner;
                            for (dv, &gv) in d[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(&g[src..src + chunk])
                            {
                                *dv = *dv + gv;
                            }
                        }
                    });
                    offset += wdt;
                }
            }
            Op::Gather { x, idx, row } => acc(*x, &mut |d| {
                for (k, &i) in idx.iter().enumerate() {
                    for (dv, &gv) in d[i * row..(i + 1) * row]
                        .iter_mut()
                        .zip(&g[k * row..(k + 1) * row])
                    {
                        *dv = *dv + gv;
                    }
                }
            }),
            Op::Softmax(x) => {
                let cols = *node.shape.last().expect("2-D");
                let out = &node.value;
                acc(*x, &mut |d| {
                    for ((d, g), y) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols))
                    {
                        let dot: f64 = g.iter().zip(y).map(|(a, b)| a.f64() * b.f64()).sum();
                        for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                            *d = *d + y * (g - S::lit(dot));
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let cols = *node.shape.last().expect("2-D");
                let out = &node.value;
                acc(*x, &mut |d| {
                    for ((d, g), y) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols))
                    {
                        let total: f64 = g.iter().map(|v| v.f64()).sum();
                        for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                            *d = *d + g - y.exp() * S::lit(total);
                        }
                    }
                });
            }
            Op::Log(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(xv) {
                        *d = *d + g / v;
                    }
                });
            }
            Op::ScaleRows { x, coeffs, row } => acc(*x, &mut |d| {
                for (r, &c) in coeffs.iter().enumerate() {
                    for (dv, &gv) in d[r * row..(r + 1) * row]
                        .iter_mut()
                        .zip(&g[r * row..(r + 1) * row])
                    {
                        *dv = *dv + gv * c;
                    }
                }
            }),
            Op::SumAll(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v = *v + g[0])),
            Op::MeanAll(x) => {
                let n = S::lit(val(*x).len() as f64);
                acc(*x, &mut |d| d.iter_mut().for_each(|v| *v = *v + g[0] / n));
            }
            Op::Reshape(x) => acc(*x, &mut |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g)
            }),
        }
    }
}

fn softmax_row<S: Scalar>(r: &[S]) -> Vec<S> {
    let max = r.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
    let exps: Vec<f64> = r.iter().map(|v| (v.f64() - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| S::lit(e / total)).collect()
}

/// Unfolds `x (N, Cin, H, W)` into columns `(Cin·kh·kw, N·Ho·Wo)`.
fn im2col<S: Scalar>(x: &[S], g: &ConvGeom) -> Vec<S> {
    let ncols = g.col_cols();
    let spatial = g.ho * g.wo;
    let mut cols = vec![S::zero(); g.col_rows() * ncols];
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                for b in 0..g.n {
                    let plane = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut cols[r * ncols + b * spatial..][..spatial];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[oy * g.wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<S: Scalar>(cols: &[S], g: &ConvGeom, dx: &mut [S]) {
    let ncols = g.col_cols();
    let spatial = g.ho * g.wo;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                for b in 0..g.n {
                    let plane = &mut dx[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    let src = &cols[r * ncols + b * spatial..][..spatial];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                let at = iy as usize * g.w + ix as usize;
                                plane[at] = plane[at] + src[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// `None` when no gradient reached the node.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}
