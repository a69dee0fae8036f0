use super::kernels::{self, ConvGeom};
use super::{check_shape, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Neg,
    Log,
    Square,
    Exp,
    /// Huber loss with unit threshold, applied elementwise.
    SmoothL1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Unary { x: usize, kind: Unary },
    Powf { x: usize, exponent: T },
    Affine { x: usize, scale: T },
    Clamp { x: usize, lo: T, hi: T },
    Binary { a: usize, b: usize, kind: Binary },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Reshape { x: usize },
    Conv2d { x: usize, w: usize, bias: Option<usize>, geom: ConvGeom, cols: Vec<T> },
    MaxPool { x: usize, argmax: Vec<usize> },
    ChannelMeanMax { x: usize, argmax: Vec<usize>, channels: usize },
    GlobalAvgPool { x: usize, channels: usize, hw: usize },
    Sum { x: usize },
    Mean { x: usize },
    GradReverse { x: usize },
    MulScalar { x: usize, s: usize },
    Gram { x: usize, rows: usize, cols: usize, divisor: T },
    SliceChannels { x: usize, start: usize, plane: usize },
    BceWithLogits { x: usize, t: usize },
    SoftmaxXent { x: usize, classes: usize, cells: usize, picks: Vec<(usize, usize)>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Unary { x, .. }
            | Op::Powf { x, .. }
            | Op::Affine { x, .. }
            | Op::Clamp { x, .. }
            | Op::Reshape { x }
            | Op::MaxPool { x, .. }
            | Op::ChannelMeanMax { x, .. }
            | Op::GlobalAvgPool { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::GradReverse { x }
            | Op::Gram { x, .. }
            | Op::SliceChannels { x, .. }
            | Op::SoftmaxXent { x, .. } => vec![*x],
            Op::Binary { a, b, .. } | Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::MulScalar { x, s } => vec![*x, *s],
            Op::BceWithLogits { x, t } => vec![*x, *t],
            Op::Conv2d { x, w, bias, .. } => {
                let mut p = vec![*x, *w];
                p.extend(bias);
                p
            }
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    trainable: bool,
    tag: Option<&'static str>,
}

/// Append-only tape. Node order is a topological order by construction.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    swept: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            swept: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.parents().iter().any(|&p| self.nodes[p].requires_grad);
        self.push_node(Node {
            value,
            op,
            requires_grad,
            trainable: false,
            tag: None,
        })
    }

    fn push_node(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_node(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            trainable: true,
            tag: None,
        })
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            trainable: false,
            tag: None,
        })
    }

    /// Constant carrying a provenance tag that [`Graph::depends_on_tag`] can detect.
    pub fn constant_tagged(&mut self, value: Tensor<T>, tag: &'static str) -> Var {
        let v = self.constant(value);
        self.nodes[v.0].tag = Some(tag);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    pub fn grad_data(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    /// Moves a leaf's value and gradient out of the graph; the slot is left empty.
    pub fn take_leaf(&mut self, v: Var) -> (Tensor<T>, Option<Vec<T>>) {
        let value = std::mem::replace(
            &mut self.nodes[v.0].value,
            Tensor {
                shape: Vec::new(),
                data: Vec::new(),
            },
        );
        (value, self.grads[v.0].take())
    }

    /// True when some node tagged `tag` is an ancestor of (or is) `root`.
    pub fn depends_on_tag(&self, root: Var, tag: &str) -> bool {
        let mut seen = vec![false; root.0 + 1];
        seen[root.0] = true;
        for i in (0..=root.0).rev() {
            if !seen[i] {
                continue;
            }
            if self.nodes[i].tag == Some(tag) {
                return true;
            }
            for p in self.nodes[i].op.parents() {
                seen[p] = true;
            }
        }
        false
    }

    fn val(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.data
    }

    fn same_shape(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data,
        }
    }

    // ---- elementwise -------------------------------------------------------

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let xs = self.val(x);
        let data: Vec<T> = match kind {
            Unary::Relu => xs.iter().map(|&v| v.max(T::zero())).collect(),
            Unary::Sigmoid => xs.iter().map(|&v| sigmoid(v)).collect(),
            Unary::Neg => xs.iter().map(|&v| -v).collect(),
            Unary::Log => {
                if let Some(bad) = xs.iter().find(|&&v| v <= T::zero() || v.is_nan()) {
                    return Err(TensorError::Domain {
                        op: "log",
                        msg: format!("non-positive input {bad}"),
                    });
                }
                xs.iter().map(|&v| v.ln()).collect()
            }
            Unary::Square => xs.iter().map(|&v| v * v).collect(),
            Unary::Exp => xs.iter().map(|&v| v.exp()).collect(),
            Unary::SmoothL1 => {
                let half = T::lit(0.5);
                xs.iter()
                    .map(|&v| {
                        let a = v.abs();
                        if a < T::one() {
                            half * v * v
                        } else {
                            a - half
                        }
                    })
                    .collect()
            }
        };
        let value = self.same_shape(x, data);
        Ok(self.push(value, Op::Unary { x: x.0, kind }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x).expect("relu is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x).expect("neg is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x).expect("square is total")
    }

    pub fn smooth_l1(&mut self, x: Var) -> Var {
        self.unary(Unary::SmoothL1, x).expect("smooth_l1 is total")
    }

    /// `x^exponent` for non-negative `x`.
    pub fn powf(&mut self, x: Var, exponent: T) -> Result<Var> {
        let xs = self.val(x);
        if let Some(bad) = xs.iter().find(|&&v| v < T::zero()) {
            return Err(TensorError::Domain {
                op: "powf",
                msg: format!("negative base {bad}"),
            });
        }
        let data = xs.iter().map(|&v| v.powf(exponent)).collect();
        let value = self.same_shape(x, data);
        Ok(self.push(value, Op::Powf { x: x.0, exponent }))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let data = self.val(x).iter().map(|&v| scale * v + shift).collect();
        let value = self.same_shape(x, data);
        self.push(value, Op::Affine { x: x.0, scale })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let data = self.val(x).iter().map(|&v| v.max(lo).min(hi)).collect();
        let value = self.same_shape(x, data);
        self.push(value, Op::Clamp { x: x.0, lo, hi })
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        let broadcast = if sa == sb {
            false
        } else if sa.len() == 3 && sb.len() == 3 && sb[0] == 1 && sa[1..] == sb[1..] {
            true
        } else {
            let name = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(mismatch(name, &sa, sb));
        };
        let av = self.val(a);
        let bv = self.val(b);
        let plane = bv.len();
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let data: Vec<T> = if broadcast {
            av.chunks_exact(plane)
                .flat_map(|ch| ch.iter().zip(bv).map(move |(&x, &y)| f(x, y)))
                .collect()
        } else {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        };
        let value = Tensor { shape: sa, data };
        Ok(self.push(
            value,
            Op::Binary {
                a: a.0,
                b: b.0,
                kind,
            },
        ))
    }

    /// Elementwise sum. `b` may be `[1, H, W]` against `a` of `[C, H, W]`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise product; a `[1, H, W]` right operand is replicated over channels.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.val(a), k, 1, self.val(b), n, 1, T::zero(), &mut out, n, 1);
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0, m, k, n }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let len = check_shape(shape)?;
        if len != self.val(x).len() {
            return Err(mismatch("reshape", self.shape(x), shape));
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: self.val(x).to_vec(),
        };
        Ok(self.push(value, Op::Reshape { x: x.0 }))
    }

    /// `[C, M] -> [C, C]`, `G = x xᵀ / divisor`. Upper triangle is computed and mirrored.
    pub fn gram(&mut self, x: Var, divisor: T) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(mismatch("gram", s, &[0, 0]));
        }
        let (rows, cols) = (s[0], s[1]);
        let xs = self.val(x);
        let mut out = vec![T::zero(); rows * rows];
        for i in 0..rows {
            let ri = &xs[i * cols..(i + 1) * cols];
            for j in i..rows {
                let rj = &xs[j * cols..(j + 1) * cols];
                let mut acc = T::zero();
                for (&p, &q) in ri.iter().zip(rj) {
                    acc += p * q;
                }
                let v = acc / divisor;
                out[i * rows + j] = v;
                out[j * rows + i] = v;
            }
        }
        let value = Tensor {
            shape: vec![rows, rows],
            data: out,
        };
        Ok(self.push(
            value,
            Op::Gram {
                x: x.0,
                rows,
                cols,
                divisor,
            },
        ))
    }

    // ---- spatial -----------------------------------------------------------

    /// Cross-correlation of `x: [C_in, H, W]` with `w: [C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(mismatch("conv2d", sx, sw));
        }
        let k = sw[2];
        if k % 2 == 0 {
            return Err(TensorError::Domain {
                op: "conv2d",
                msg: format!("kernel size {k} must be odd"),
            });
        }
        if stride == 0 {
            return Err(TensorError::Domain {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let (h, wd) = (sx[1], sx[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(mismatch("conv2d", sx, sw));
        }
        let geom = ConvGeom {
            c_in: sx[0],
            h,
            w: wd,
            c_out: sw[0],
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (wd + 2 * pad - k) / stride + 1,
        };
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(mismatch("conv2d bias", self.shape(b), &[geom.c_out]));
            }
        }
        let (out, cols) = kernels::conv2d_forward(
            self.val(x),
            self.val(w),
            bias.map(|b| self.val(b)),
            &geom,
        );
        // Columns are only needed for the weight gradient.
        let cols = if self.nodes[w.0].requires_grad { cols } else { Vec::new() };
        let value = Tensor {
            shape: vec![geom.c_out, geom.h_out, geom.w_out],
            data: out,
        };
        Ok(self.push(
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
                geom,
                cols,
            },
        ))
    }

    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3
            || window == 0
            || stride == 0
            || s[1] < window
            || s[2] < window
            || !(s[1] - window).is_multiple_of(stride)
            || !(s[2] - window).is_multiple_of(stride)
        {
            return Err(TensorError::ShapeMismatch {
                op: "max_pool2d",
                lhs: s.to_vec(),
                rhs: vec![window, stride],
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (out, argmax, ho, wo) = kernels::max_pool_forward(self.val(x), c, h, w, window, stride);
        let value = Tensor {
            shape: vec![c, ho, wo],
            data: out,
        };
        Ok(self.push(value, Op::MaxPool { x: x.0, argmax }))
    }

    /// `[C, H, W] -> [2, H, W]` holding the per-position channel mean and channel max.
    pub fn channel_mean_max(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(mismatch("channel_mean_max", s, &[0, 0, 0]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (out, argmax) = kernels::channel_mean_max(self.val(x), c, h * w);
        let value = Tensor {
            shape: vec![2, h, w],
            data: out,
        };
        Ok(self.push(
            value,
            Op::ChannelMeanMax {
                x: x.0,
                argmax,
                channels: c,
            },
        ))
    }

    /// `[C, H, W] -> [1, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(mismatch("global_avg_pool", s, &[0, 0, 0]));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let inv = T::one() / T::lit(hw as f64);
        let data = self
            .val(x)
            .chunks_exact(hw)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor {
            shape: vec![1, c],
            data,
        };
        Ok(self.push(value, Op::GlobalAvgPool { x: x.0, channels: c, hw }))
    }

    /// Channels `start..start + len` of a `[C, H, W]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || len == 0 || start + len > s[0] {
            return Err(mismatch("slice_channels", s, &[start, len]));
        }
        let plane = s[1] * s[2];
        let shape = vec![len, s[1], s[2]];
        let data = self.val(x)[start * plane..(start + len) * plane].to_vec();
        Ok(self.push(Tensor { shape, data }, Op::SliceChannels { x: x.0, start, plane }))
    }

    // ---- reductions and losses -----------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.val(x).iter().copied().sum::<T>();
        self.push(Tensor::scalar(v), Op::Sum { x: x.0 })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xs = self.val(x);
        let v = xs.iter().copied().sum::<T>() / T::lit(xs.len() as f64);
        self.push(Tensor::scalar(v), Op::Mean { x: x.0 })
    }

    /// Identity forward; negates the gradient on the way back.
    pub fn grad_reverse(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::GradReverse { x: x.0 })
    }

    /// Every element of `x` times the single value held by `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.val(s).len() != 1 {
            return Err(mismatch("mul_scalar", self.shape(x), self.shape(s)));
        }
        let k = self.val(s)[0];
        let data = self.val(x).iter().map(|&v| v * k).collect();
        let value = self.same_shape(x, data);
        Ok(self.push(value, Op::MulScalar { x: x.0, s: s.0 }))
    }

    /// Elementwise binary cross-entropy between logits `x` and targets `t` in `[0, 1]`.
    pub fn bce_with_logits(&mut self, x: Var, t: Var) -> Result<Var> {
        if self.shape(x) != self.shape(t) {
            return Err(mismatch("bce_with_logits", self.shape(x), self.shape(t)));
        }
        let data = self
            .val(x)
            .iter()
            .zip(self.val(t))
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .collect();
        let value = self.same_shape(x, data);
        Ok(self.push(value, Op::BceWithLogits { x: x.0, t: t.0 }))
    }

    /// Sum over `picks` of `-log softmax(x[:, cell])[class]` for logits `x: [K, H, W]`.
    pub fn softmax_xent(&mut self, x: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(mismatch("softmax_xent", s, &[0, 0, 0]));
        }
        let (classes, cells) = (s[0], s[1] * s[2]);
        if let Some(&(cell, class)) = picks.iter().find(|&&(c, k)| c >= cells || k >= classes) {
            return Err(TensorError::Domain {
                op: "softmax_xent",
                msg: format!("pick (cell {cell}, class {class}) outside [{classes}, {cells}]"),
            });
        }
        let xs = self.val(x);
        let mut probs = Vec::with_capacity(picks.len() * classes);
        let mut total = T::zero();
        for &(cell, class) in picks {
            let logits: Vec<T> = (0..classes).map(|k| xs[k * cells + cell]).collect();
            let mx = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = logits.iter().map(|&l| (l - mx).exp()).sum();
            total += z.ln() + mx - logits[class];
            probs.extend(logits.iter().map(|&l| (l - mx).exp() / z));
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::SoftmaxXent {
                x: x.0,
                classes,
                cells,
                picks: picks.to_vec(),
                probs,
            },
        ))
    }

    // ---- backward ------------------------------------------------------------

    /// Clears all gradients so that [`Graph::backward`] may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.swept = false;
    }

    /// Reverse sweep from a scalar root; each node on the tape is visited once.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(TensorError::NonScalarRoot(self.nodes[root.0].value.shape.clone()));
        }
        if self.swept {
            return Err(TensorError::AlreadyBackward);
        }
        self.swept = true;
        self.grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Split the borrow: node i is read while parent gradients are written.
        let (head, tail) = self.nodes.split_at(i);
        let node = &tail[0];
        let out = &node.value.data;
        let grads = &mut self.grads;
        let mut acc = |p: usize, f: &mut dyn FnMut(&mut [T])| {
            if !head[p].requires_grad {
                return;
            }
            let len = head[p].value.data.len();
            let slot = grads[p].get_or_insert_with(|| vec![T::zero(); len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Unary { x, kind } => {
                let xs = &head[*x].value.data;
                acc(*x, &mut |d| match kind {
                    Unary::Relu => {
                        for ((d, &gi), &v) in d.iter_mut().zip(g).zip(xs) {
                            if v > T::zero() {
                                *d += gi;
                            }
                        }
                    }
                    Unary::Sigmoid => {
                        for ((d, &gi), &y) in d.iter_mut().zip(g).zip(out) {
                            *d += gi * y * (T::one() - y);
                        }
                    }
                    Unary::Neg => d.iter_mut().zip(g).for_each(|(d, &gi)| *d -= gi),
                    Unary::Log => {
                        for ((d, &gi), &v) in d.iter_mut().zip(g).zip(xs) {
                            *d += gi / v;
                        }
                    }
                    Unary::Square => {
                        let two = T::lit(2.0);
                        for ((d, &gi), &v) in d.iter_mut().zip(g).zip(xs) {
                            *d += gi * two * v;
                        }
                    }
                    Unary::Exp => {
                        for ((d, &gi), &y) in d.iter_mut().zip(g).zip(out) {
                            *d += gi * y;
                        }
                    }
                    Unary::SmoothL1 => {
                        for ((d, &gi), &v) in d.iter_mut().zip(g).zip(xs) {
                            *d += gi * if v.abs() < T::one() { v } else { v.signum() };
                        }
                    }
                });
            }
            Op::Powf { x, exponent } => {
                let xs = &head[*x].value.data;
                let e = *exponent;
                acc(*x, &mut |d| {
                    for ((d, &gi), &v) in d.iter_mut().zip(g).zip(xs) {
                        if e != T::zero() {
                            *d += gi * e * v.powf(e - T::one());
                        }
                    }
                });
            }
            Op::Affine { x, scale } => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * *scale));
            }
            Op::Clamp { x, lo, hi } => {
                let xs = &head[*x].value.data;
                acc(*x, &mut |d| {
                    for ((d, &gi), &v) in d.iter_mut().zip(g).zip(xs) {
                        if v >= *lo && v <= *hi {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Binary { a, b, kind, .. } => {
                let av = &head[*a].value.data;
                let bv = &head[*b].value.data;
                let plane = bv.len();
                match kind {
                    Binary::Add | Binary::Sub => {
                        acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi));
                        let sign = if *kind == Binary::Add { T::one() } else { -T::one() };
                        acc(*b, &mut |d| {
                            for chunk in g.chunks_exact(plane) {
                                d.iter_mut().zip(chunk).for_each(|(d, &gi)| *d += sign * gi);
                            }
                        });
                    }
                    Binary::Mul => {
                        acc(*a, &mut |d| {
                            for (dc, gc) in d.chunks_exact_mut(plane).zip(g.chunks_exact(plane)) {
                                for ((d, &gi), &y) in dc.iter_mut().zip(gc).zip(bv) {
                                    *d += gi * y;
                                }
                            }
                        });
                        acc(*b, &mut |d| {
                            for (gc, ac) in g.chunks_exact(plane).zip(av.chunks_exact(plane)) {
                                for ((d, &gi), &x) in d.iter_mut().zip(gc).zip(ac) {
                                    *d += gi * x;
                                }
                            }
                        });
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = &head[*a].value.data;
                let bv = &head[*b].value.data;
                // dA = dC Bᵀ ; dB = Aᵀ dC
                acc(*a, &mut |d| T::gemm(m, n, k, T::one(), g, n, 1, bv, 1, n, T::one(), d, k, 1));
                acc(*b, &mut |d| T::gemm(k, m, n, T::one(), av, 1, k, g, n, 1, T::one(), d, n, 1));
            }
            Op::Reshape { x } | Op::GradReverse { x } => {
                let sign = if matches!(node.op, Op::GradReverse { .. }) {
                    -T::one()
                } else {
                    T::one()
                };
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &gi)| *d += sign * gi));
            }
            Op::MulScalar { x, s } => {
                let k = head[*s].value.data[0];
                let xs = &head[*x].value.data;
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * k));
                let dk = g.iter().zip(xs).map(|(&gi, &v)| gi * v).sum::<T>();
                acc(*s, &mut |d| d[0] += dk);
            }
            Op::Gram { x, rows, cols, divisor } => {
                let (r, c) = (*rows, *cols);
                let xs = &head[*x].value.data;
                // dX = (dG + dGᵀ) X / divisor
                let mut sym = vec![T::zero(); r * r];
                for i in 0..r {
                    for j in 0..r {
                        sym[i * r + j] = g[i * r + j] + g[j * r + i];
                    }
                }
                let inv = T::one() / *divisor;
                acc(*x, &mut |d| T::gemm(r, r, c, inv, &sym, r, 1, xs, c, 1, T::one(), d, c, 1));
            }
            Op::Conv2d { x, w, bias, geom, cols } => {
                let xs = &head[*x].value.data;
                let ws = &head[*w].value.data;
                acc(*w, &mut |d| {
                    let colref: &[T] = if geom.is_pointwise() { xs } else { cols };
                    kernels::conv2d_grad_weight(g, colref, geom, d);
                });
                if let Some(b) = bias {
                    let npos = geom.positions();
                    acc(*b, &mut |d| {
                        for (d, row) in d.iter_mut().zip(g.chunks_exact(npos)) {
                            *d += row.iter().copied().sum::<T>();
                        }
                    });
                }
                acc(*x, &mut |d| kernels::conv2d_grad_input(g, ws, geom, d));
            }
            Op::MaxPool { x, argmax } => {
                acc(*x, &mut |d| {
                    for (&idx, &gi) in argmax.iter().zip(g) {
                        d[idx] += gi;
                    }
                });
            }
            Op::ChannelMeanMax { x, argmax, channels } => {
                let hw = argmax.len();
                let inv = T::one() / T::lit(*channels as f64);
                acc(*x, &mut |d| {
                    for ch in 0..*channels {
                        for p in 0..hw {
                            d[ch * hw + p] += g[p] * inv;
                        }
                    }
                    for (p, &ch) in argmax.iter().enumerate() {
                        d[ch * hw + p] += g[hw + p];
                    }
                });
            }
            Op::GlobalAvgPool { x, channels, hw } => {
                let inv = T::one() / T::lit(*hw as f64);
                acc(*x, &mut |d| {
                    for ch in 0..*channels {
                        let gi = g[ch] * inv;
                        d[ch * hw..(ch + 1) * hw].iter_mut().for_each(|d| *d += gi);
                    }
                });
            }
            Op::SliceChannels { x, start, plane } => {
                let off = start * plane;
                acc(*x, &mut |d| {
                    d[off..off + g.len()].iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                });
            }
            Op::Sum { x } => {
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean { x } => {
                let n = T::lit(head[*x].value.data.len() as f64);
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::BceWithLogits { x, t } => {
                let xs = &head[*x].value.data;
                let ts = &head[*t].value.data;
                acc(*x, &mut |d| {
                    for (((d, &gi), &z), &y) in d.iter_mut().zip(g).zip(xs).zip(ts) {
                        *d += gi * (sigmoid(z) - y);
                    }
                });
                acc(*t, &mut |d| {
                    for ((d, &gi), &z) in d.iter_mut().zip(g).zip(xs) {
                        *d -= gi * z;
                    }
                });
            }
            Op::SoftmaxXent {
                x,
                classes,
                cells,
                picks,
                probs,
            } => {
                acc(*x, &mut |d| {
                    for (n, &(cell, class)) in picks.iter().enumerate() {
                        for k in 0..*classes {
                            let onehot = if k == class { T::one() } else { T::zero() };
                            d[k * cells + cell] += g[0] * (probs[n * classes + k] - onehot);
                        }
                    }
                });
            }
        }
    }
}
