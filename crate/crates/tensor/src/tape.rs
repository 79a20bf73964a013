//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep. Parameters are
//! bound by tensor id; binding the same tensor twice yields the same node so
//! shared weights accumulate one gradient.

use std::collections::HashMap;

use crate::conv::{col2im_add, im2col, ConvGeom};
use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Abs(Var),
    Relu(Var),
    Recip(Var),
    XLogX(Var),
    Reshape(Var),
    SumAll(Var),
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    Stack {
        parts: Vec<Var>,
        rest: usize,
    },
    Slice1 {
        x: Var,
        index: usize,
        m: usize,
        rest: usize,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        n: usize,
        din: usize,
        dout: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        n: usize,
        cout: usize,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
        n: usize,
        c: usize,
        s: usize,
    },
    Softmax {
        x: Var,
        t: T,
        k: usize,
    },
    LogSoftmax {
        x: Var,
        t: T,
        k: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
        k: usize,
    },
    FakeQuant {
        x: Var,
        lo: T,
        hi: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm, used by the
/// caller to update running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<u64, Var>,
    consumed: bool,
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    by_var: Vec<Option<Vec<T>>>,
    params: HashMap<u64, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.by_var.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn for_tensor(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.params.get(&t.id()).and_then(|&v| self.wrt(v))
    }

    /// Accumulates this sweep's gradient into `t` if it was bound on the tape.
    /// Returns whether anything was added.
    pub fn apply_to(&self, t: &mut Tensor<T>) -> bool {
        if !t.requires_grad() {
            return false;
        }
        match self.for_tensor(t) {
            Some(g) => {
                let g = g.to_vec();
                t.accumulate_grad(&g);
                true
            }
            None => false,
        }
    }
}

fn shape_err(op: &'static str, expected: &[usize], actual: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

fn bad(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        msg: msg.into(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First element of a node; intended for scalar losses.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_vec(n.shape.clone(), n.value.clone()).expect("tape values are finite")
    }

    fn push(
        &mut self,
        op_name: &'static str,
        op: Op<T>,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<T>,
    ) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        debug_assert_eq!(numel(&shape), value.len(), "{op_name}");
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Result<Var> {
        let v = self.push("leaf", Op::Leaf, &[], shape, value)?;
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    /// Records a value that never receives gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), false)
            .expect("tensor values are finite")
    }

    pub fn input(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        self.leaf(shape, data, false)
    }

    /// A free leaf that collects gradient; useful for checking input gradients.
    pub fn variable(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        self.leaf(shape, data, true)
    }

    /// Binds a parameter tensor. Tensors without `requires_grad` are recorded
    /// as constants, which is how frozen teachers stay detached.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&t.id()) {
            return v;
        }
        let v = self
            .leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
            .expect("tensor values are finite");
        if t.requires_grad() {
            self.params.insert(t.id(), v);
        }
        v
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.leaf(shape, value, false).expect("finite")
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, sa, sb));
        }
        let shape = sa.to_vec();
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(name, op, &[a, b], shape, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        self.push(name, op, &[x], shape, value)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("mul_scalar", x, |v| v * c, Op::MulScalar(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.mul_scalar(x, -T::one())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary("ln", x, |v| v.ln(), Op::Ln(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    /// `|x|`; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, |v| v.abs(), Op::Abs(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        self.unary("recip", x, |v| T::one() / v, Op::Recip(x))
    }

    /// `x ln x` with `0 ln 0 = 0`.
    pub fn xlogx(&mut self, x: Var) -> Result<Var> {
        if self.value(x).iter().any(|&v| v < T::zero()) {
            return Err(TensorError::InvalidArgument {
                op: "xlogx",
                msg: "negative input".into(),
            });
        }
        self.unary(
            "xlogx",
            x,
            |v| if v > T::zero() { v * v.ln() } else { T::zero() },
            Op::XLogX(x),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).len() {
            return Err(shape_err("reshape", &shape, self.shape(x)));
        }
        let value = self.value(x).to_vec();
        self.push("reshape", Op::Reshape(x), &[x], shape, value)
    }

    /// Collapses all but the leading dimension.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let rest = numel(&s[1..]);
        self.reshape(x, vec![n, rest])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push("sum", Op::SumAll(x), &[x], vec![1], vec![s])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::from_usize(self.value(x).len()).expect("count");
        let s = self.sum(x)?;
        self.mul_scalar(s, T::one() / n)
    }

    /// Sums out `axis`, removing it from the shape. Reducing the only axis
    /// leaves shape `[1]`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(bad("sum_axis", format!("axis {axis} out of range for {s:?}")));
        }
        let outer = numel(&s[..axis]);
        let len = s[axis];
        let inner = numel(&s[axis + 1..]);
        let src = self.value(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst = *dst + v;
                }
            }
        }
        let mut shape: Vec<usize> = s[..axis].iter().chain(&s[axis + 1..]).copied().collect();
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(
            "sum_axis",
            Op::SumAxis {
                x,
                outer,
                len,
                inner,
            },
            &[x],
            shape,
            out,
        )
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| bad("mean_axis", "axis out of range"))?;
        let s = self.sum_axis(x, axis)?;
        self.mul_scalar(s, T::one() / T::from_usize(len).expect("len"))
    }

    /// Multiplies each leading-axis slice `x[r, ...]` by the scalar `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let rows = self.shape(x)[0];
        if self.value(s).len() != rows {
            return Err(shape_err("scale_rows", &[rows], self.shape(s)));
        }
        let rest = self.value(x).len() / rows;
        let sv = self.value(s);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / rest])
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("scale_rows", Op::ScaleRows { x, s }, &[x, s], shape, value)
    }

    /// Stacks equally shaped `[N, ...]` inputs into `[N, m, ...]`.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| bad("stack", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        for p in parts {
            if self.shape(*p) != s0.as_slice() {
                return Err(shape_err("stack", &s0, self.shape(*p)));
            }
        }
        let n = s0[0];
        let rest = numel(&s0[1..]);
        let m = parts.len();
        let mut out = vec![T::zero(); n * m * rest];
        for (j, p) in parts.iter().enumerate() {
            let src = self.value(*p);
            for i in 0..n {
                out[(i * m + j) * rest..(i * m + j + 1) * rest]
                    .copy_from_slice(&src[i * rest..(i + 1) * rest]);
            }
        }
        let mut shape = vec![n, m];
        shape.extend_from_slice(&s0[1..]);
        self.push(
            "stack",
            Op::Stack {
                parts: parts.to_vec(),
                rest,
            },
            parts,
            shape,
            out,
        )
    }

    /// Selects `x[:, index, ...]` from an `[N, m, ...]` input.
    pub fn slice1(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || index >= s[1] {
            return Err(bad("slice1", format!("index {index} invalid for {s:?}")));
        }
        let (n, m) = (s[0], s[1]);
        let rest = numel(&s[2..]);
        let src = self.value(x);
        let mut out = Vec::with_capacity(n * rest);
        for i in 0..n {
            out.extend_from_slice(&src[(i * m + index) * rest..(i * m + index + 1) * rest]);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&s[2..]);
        self.push(
            "slice1",
            Op::Slice1 { x, index, m, rest },
            &[x],
            shape,
            out,
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(bad("transpose", "needs rank >= 2"));
        }
        let rows = s[s.len() - 2];
        let cols = s[s.len() - 1];
        let batch = numel(&s[..s.len() - 2]);
        let src = self.value(x);
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            let off = b * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    out[off + c * rows + r] = src[off + r * cols + c];
                }
            }
        }
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 1, l - 2);
        self.push(
            "transpose",
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            },
            &[x],
            shape,
            out,
        )
    }

    /// Matrix product over the last two axes; leading axes must agree.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let r = sa.len();
        let (m, k, k2, n) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
        if k != k2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let batch = numel(&sa[..r - 2]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av[i * m * k..],
                k,
                1,
                &bv[i * k * n..],
                n,
                1,
                T::zero(),
                &mut out[i * m * n..],
                n,
                1,
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        self.push(
            "matmul",
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
            shape,
            out,
        )
    }

    /// `x Wᵀ + b` for `x: [N, Din]`, `W: [Dout, Din]`, `b: [Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(shape_err("linear", &sw, &sx));
        }
        let (n, din, dout) = (sx[0], sx[1], sw[0]);
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err("linear", &[dout], self.shape(b)));
            }
            let bv = self.value(b);
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            n,
            din,
            dout,
            T::one(),
            self.value(x),
            din,
            1,
            self.value(w),
            1,
            din,
            T::one(),
            &mut out,
            dout,
            1,
        );
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            "linear",
            Op::Linear {
                x,
                w,
                b,
                n,
                din,
                dout,
            },
            &inputs,
            vec![n, dout],
            out,
        )
    }

    /// Valid, stride-1 cross-correlation: `x: [N, Cin, H, W]`,
    /// `w: [Cout, Cin, kh, kw]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(bad("conv2d", format!("expected rank-4 input and weight, got {sx:?} and {sw:?}")));
        }
        if sx[1] != sw[1] {
            return Err(shape_err("conv2d", &[sw[1]], &[sx[1]]));
        }
        if sw[2] > sx[2] || sw[3] > sx[3] || sw[2] == 0 || sw[3] == 0 {
            return Err(bad(
                "conv2d",
                format!("kernel {}x{} does not fit input {}x{}", sw[2], sw[3], sx[2], sx[3]),
            ));
        }
        let geom = ConvGeom {
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel_h: sw[2],
            kernel_w: sw[3],
        };
        let (n, cout) = (sx[0], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d", &[cout], self.shape(b)));
            }
        }
        let pos = geom.positions();
        let plen = geom.patch_len();
        let mut out = vec![T::zero(); n * cout * pos];
        let mut col = vec![T::zero(); plen * pos];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = b.map(|b| self.value(b));
            for i in 0..n {
                im2col(&xv[i * geom.input_len()..(i + 1) * geom.input_len()], &geom, &mut col);
                let y = &mut out[i * cout * pos..(i + 1) * cout * pos];
                if let Some(bv) = bv {
                    for (c, plane) in y.chunks_mut(pos).enumerate() {
                        plane.iter_mut().for_each(|v| *v = bv[c]);
                    }
                }
                T::gemm(cout, plen, pos, T::one(), wv, plen, 1, &col, pos, 1, T::one(), y, pos, 1);
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            "conv2d",
            Op::Conv2d {
                x,
                w,
                b,
                n,
                cout,
                geom,
            },
            &inputs,
            vec![n, cout, geom.out_h(), geom.out_w()],
            out,
        )
    }

    /// 1-D convolution `x: [N, Cin, L]`, `w: [Cout, Cin, k]` as a 1×k 2-D case.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 {
            return Err(bad("conv1d", format!("expected rank-3 input and weight, got {sx:?} and {sw:?}")));
        }
        let x4 = self.reshape(x, vec![sx[0], sx[1], 1, sx[2]])?;
        let w4 = self.reshape(w, vec![sw[0], sw[1], 1, sw[2]])?;
        let y = self.conv2d(x4, w4, b)?;
        let sy = self.shape(y).to_vec();
        self.reshape(y, vec![sy[0], sy[1], sy[3]])
    }

    /// Non-overlapping max pooling over `[N, C, H, W]` with floor semantics.
    /// Ties route gradient to the first maximal element in row-major order.
    pub fn max_pool2d(&mut self, x: Var, wh: usize, ww: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(bad("max_pool2d", format!("expected rank 4, got {s:?}")));
        }
        if wh == 0 || ww == 0 {
            return Err(TensorError::InvalidArgument {
                op: "max_pool2d",
                msg: "window must be >= 1".into(),
            });
        }
        if wh > s[2] || ww > s[3] {
            return Err(bad(
                "max_pool2d",
                format!("window {wh}x{ww} larger than input {}x{}", s[2], s[3]),
            ));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / wh, w / ww);
        let planes = s[0] * s[1];
        let src = self.value(x);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = base + y * wh * w + xo * ww;
                    for i in 0..wh {
                        for j in 0..ww {
                            let idx = base + (y * wh + i) * w + xo * ww + j;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(
            "max_pool2d",
            Op::MaxPool2d { x, argmax },
            &[x],
            vec![s[0], s[1], oh, ow],
            out,
        )
    }

    /// 1-D max pooling over `[N, C, L]`.
    pub fn max_pool1d(&mut self, x: Var, window: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(bad("max_pool1d", format!("expected rank 3, got {s:?}")));
        }
        let x4 = self.reshape(x, vec![s[0], s[1], 1, s[2]])?;
        let y = self.max_pool2d(x4, 1, window)?;
        let sy = self.shape(y).to_vec();
        self.reshape(y, vec![sy[0], sy[1], sy[3]])
    }

    /// Batch normalization over the channel axis (axis 1) of an `[N, C, ...]`
    /// input using the statistics of the batch itself.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c, s) = self.bn_dims(x, gamma, beta)?;
        if n < 2 {
            return Err(TensorError::InvalidArgument {
                op: "batch_norm",
                msg: "training mode needs a batch of at least 2".into(),
            });
        }
        let count = n * s;
        let cnt = T::from_usize(count).expect("count");
        let xv = self.value(x);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let sl = &xv[(i * c + ch) * s..(i * c + ch + 1) * s];
                mean[ch] = mean[ch] + sl.iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / cnt);
        for i in 0..n {
            for ch in 0..c {
                let sl = &xv[(i * c + ch) * s..(i * c + ch + 1) * s];
                var[ch] = var[ch] + sl.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v = *v / cnt);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = self.bn_forward(x, gamma, beta, &mean, &inv_std, true, (n, c, s))?;
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let dims = self.bn_dims(x, gamma, beta)?;
        if mean.len() != dims.1 || var.len() != dims.1 {
            return Err(shape_err("batch_norm", &[dims.1], &[mean.len()]));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.bn_forward(x, gamma, beta, mean, &inv_std, false, dims)
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let sx = self.shape(x);
        if sx.len() < 2 {
            return Err(bad("batch_norm", format!("expected [N, C, ...], got {sx:?}")));
        }
        let (n, c) = (sx[0], sx[1]);
        let s = numel(&sx[2..]);
        if self.shape(gamma) != [c] {
            return Err(shape_err("batch_norm", &[c], self.shape(gamma)));
        }
        if self.shape(beta) != [c] {
            return Err(shape_err("batch_norm", &[c], self.shape(beta)));
        }
        Ok((n, c, s))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_forward(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        train: bool,
        (n, c, s): (usize, usize, usize),
    ) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * s;
                for k in off..off + s {
                    let h = (xv[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = h;
                    out[k] = gv[ch] * h + bv[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "batch_norm",
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                train,
                n,
                c,
                s,
            },
            &[x, gamma, beta],
            shape,
            out,
        )
    }

    fn check_temperature(t: T, op: &'static str) -> Result<()> {
        if !(t > T::zero()) || !t.is_finite() {
            return Err(TensorError::InvalidArgument {
                op,
                msg: format!("temperature must be > 0, got {t}"),
            });
        }
        Ok(())
    }

    /// Temperature softmax over the last axis, computed max-shifted.
    pub fn softmax(&mut self, x: Var, t: T) -> Result<Var> {
        Self::check_temperature(t, "softmax")?;
        let k = *self.shape(x).last().expect("rank >= 1");
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(k) {
            crate::functional::softmax_in_place(row, t);
        }
        let shape = self.shape(x).to_vec();
        self.push("softmax", Op::Softmax { x, t, k }, &[x], shape, out)
    }

    /// `ln softmax(x / T)` over the last axis.
    pub fn log_softmax(&mut self, x: Var, t: T) -> Result<Var> {
        Self::check_temperature(t, "log_softmax")?;
        let k = *self.shape(x).last().expect("rank >= 1");
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(k) {
            crate::functional::log_softmax_in_place(row, t);
        }
        let shape = self.shape(x).to_vec();
        self.push("log_softmax", Op::LogSoftmax { x, t, k }, &[x], shape, out)
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err("cross_entropy", &[labels.len()], &s));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad_label) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange {
                label: bad_label,
                classes: k,
            });
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = T::zero();
        for (row, &y) in probs.chunks_mut(k).zip(labels) {
            crate::functional::log_softmax_in_place(row, T::one());
            loss = loss - row[y];
            row.iter_mut().for_each(|v| *v = v.exp());
        }
        loss = loss / T::from_usize(n).expect("n");
        self.push(
            "cross_entropy",
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                k,
            },
            &[logits],
            vec![1],
            vec![loss],
        )
    }

    /// Simulated quantization `S * (clamp(round(x/S) - Z) + Z)` with a
    /// straight-through gradient inside `[S(qmin+Z), S(qmax+Z)]`.
    pub fn fake_quant(&mut self, x: Var, scale: T, zero_point: i64, qmin: i64, qmax: i64) -> Result<Var> {
        if !(scale > T::zero()) || qmin >= qmax {
            return Err(TensorError::InvalidArgument {
                op: "fake_quant",
                msg: format!("scale {scale}, range [{qmin}, {qmax}]"),
            });
        }
        let z = T::from_i64(zero_point).expect("zp");
        let (lo_q, hi_q) = (T::from_i64(qmin).expect("q"), T::from_i64(qmax).expect("q"));
        let lo = scale * (lo_q + z);
        let hi = scale * (hi_q + z);
        self.unary(
            "fake_quant",
            x,
            |v| {
                let q = ((v / scale).round() - z).max(lo_q).min(hi_q);
                scale * (q + z)
            },
            Op::FakeQuant { x, lo, hi },
        )
    }

    /// Reverse sweep from a scalar root. The tape cannot be reused afterwards.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let rs = self.shape(root);
        if numel(rs) != 1 {
            return Err(TensorError::NonScalarRoot(rs.to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            } else if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
            }
        }
        Ok(Gradients {
            by_var: grads,
            params: std::mem::take(&mut self.params),
        })
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let val = move |v: Var| nodes[v.0].value.as_slice();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] = d[k] + g[k] * bv[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] = d[k] + g[k] * av[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] = d[k] + g[k] / bv[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] = d[k] - g[k] * av[k] / (bv[k] * bv[k]);
                    }
                });
            }
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::MulScalar(x, c) => acc(*x, &mut |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * *c)
            }),
            Op::Exp(x) => {
                let y = &node.value;
                acc(*x, &mut |d| elementwise(d, g, y, |g, y| g * y));
            }
            Op::Ln(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| elementwise(d, g, xv, |g, x| g / x));
            }
            Op::Sqrt(x) => {
                let y = &node.value;
                acc(*x, &mut |d| elementwise(d, g, y, |g, y| g / (y + y)));
            }
            Op::Square(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| elementwise(d, g, xv, |g, x| g * (x + x)));
            }
            Op::Abs(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    elementwise(d, g, xv, |g, x| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                });
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    elementwise(d, g, xv, |g, x| if x > T::zero() { g } else { T::zero() })
                });
            }
            Op::Recip(x) => {
                let y = &node.value;
                acc(*x, &mut |d| elementwise(d, g, y, |g, y| -g * y * y));
            }
            Op::XLogX(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    elementwise(d, g, xv, |g, x| {
                        g * (x.max(T::min_positive_value()).ln() + T::one())
                    })
                });
            }
            Op::SumAll(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d = *d + g[0])),
            Op::SumAxis {
                x,
                outer,
                len,
                inner,
            } => acc(*x, &mut |d| {
                for o in 0..*outer {
                    for l in 0..*len {
                        let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                        add_into(dst, &g[o * inner..(o + 1) * inner]);
                    }
                }
            }),
            Op::ScaleRows { x, s } => {
                let (xv, sv) = (val(*x), val(*s));
                let rest = xv.len() / sv.len();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] = d[k] + g[k] * sv[k / rest];
                    }
                });
                acc(*s, &mut |d| {
                    for (r, dr) in d.iter_mut().enumerate() {
                        let mut sum = T::zero();
                        for k in r * rest..(r + 1) * rest {
                            sum = sum + g[k] * xv[k];
                        }
                        *dr = *dr + sum;
                    }
                });
            }
            Op::Stack { parts, rest } => {
                let m = parts.len();
                let n = g.len() / (m * rest);
                for (j, p) in parts.iter().enumerate() {
                    acc(*p, &mut |d| {
                        for i in 0..n {
                            add_into(
                                &mut d[i * rest..(i + 1) * rest],
                                &g[(i * m + j) * rest..(i * m + j + 1) * rest],
                            );
                        }
                    });
                }
            }
            Op::Slice1 { x, index, m, rest } => acc(*x, &mut |d| {
                let n = g.len() / rest;
                for i in 0..n {
                    add_into(
                        &mut d[(i * m + index) * rest..(i * m + index + 1) * rest],
                        &g[i * rest..(i + 1) * rest],
                    );
                }
            }),
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            } => acc(*x, &mut |d| {
                for b in 0..*batch {
                    let off = b * rows * cols;
                    for r in 0..*rows {
                        for c in 0..*cols {
                            d[off + r * cols + c] = d[off + r * cols + c] + g[off + c * rows + r];
                        }
                    }
                }
            }),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (*m, *k, *n);
                acc(*a, &mut |d| {
                    for i in 0..*batch {
                        // dA = dC · Bᵀ
                        T::gemm(m, n, k, T::one(), &g[i * m * n..], n, 1, &bv[i * k * n..], 1, n, T::one(), &mut d[i * m * k..], k, 1);
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..*batch {
                        // dB = Aᵀ · dC
                        T::gemm(k, m, n, T::one(), &av[i * m * k..], 1, k, &g[i * m * n..], n, 1, T::one(), &mut d[i * k * n..], n, 1);
                    }
                });
            }
            Op::Linear {
                x,
                w,
                b,
                n,
                din,
                dout,
            } => {
                let (n, din, dout) = (*n, *din, *dout);
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |d| {
                    T::gemm(n, dout, din, T::one(), g, dout, 1, wv, din, 1, T::one(), d, din, 1);
                });
                acc(*w, &mut |d| {
                    T::gemm(dout, n, din, T::one(), g, 1, dout, xv, din, 1, T::one(), d, din, 1);
                });
                if let Some(b) = b {
                    acc(*b, &mut |d| {
                        for row in g.chunks(dout) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                n,
                cout,
                geom,
            } => {
                let (n, cout) = (*n, *cout);
                let pos = geom.positions();
                let plen = geom.patch_len();
                let ilen = geom.input_len();
                let (xv, wv) = (val(*x), val(*w));
                let mut col = vec![T::zero(); plen * pos];
                acc(*w, &mut |d| {
                    for i in 0..n {
                        im2col(&xv[i * ilen..(i + 1) * ilen], geom, &mut col);
                        let gy = &g[i * cout * pos..(i + 1) * cout * pos];
                        T::gemm(cout, pos, plen, T::one(), gy, pos, 1, &col, 1, pos, T::one(), d, plen, 1);
                    }
                });
                acc(*x, &mut |d| {
                    for i in 0..n {
                        let gy = &g[i * cout * pos..(i + 1) * cout * pos];
                        T::gemm(plen, cout, pos, T::one(), wv, 1, plen, gy, pos, 1, T::zero(), &mut col, pos, 1);
                        col2im_add(&col, geom, &mut d[i * ilen..(i + 1) * ilen]);
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |d| {
                        for i in 0..n {
                            for (c, plane) in g[i * cout * pos..(i + 1) * cout * pos]
                                .chunks(pos)
                                .enumerate()
                            {
                                d[c] = d[c] + plane.iter().copied().sum::<T>();
                            }
                        }
                    });
                }
            }
            Op::MaxPool2d { x, argmax } => acc(*x, &mut |d| {
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] = d[src] + gv;
                }
            }),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                n,
                c,
                s,
            } => {
                let (n, c, s) = (*n, *c, *s);
                let gv = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * s;
                        for k in off..off + s {
                            dgamma[ch] = dgamma[ch] + g[k] * xhat[k];
                            dbeta[ch] = dbeta[ch] + g[k];
                        }
                    }
                }
                acc(*x, &mut |d| {
                    if *train {
                        let m = T::from_usize(n * s).expect("m");
                        for i in 0..n {
                            for ch in 0..c {
                                let off = (i * c + ch) * s;
                                // dxhat = g·γ; Σdxhat = γ·dβ; Σdxhat·xhat = γ·dγ
                                let coef = gv[ch] * inv_std[ch] / m;
                                for k in off..off + s {
                                    d[k] = d[k]
                                        + coef * (m * g[k] - dbeta[ch] - xhat[k] * dgamma[ch]);
                                }
                            }
                        }
                    } else {
                        for i in 0..n {
                            for ch in 0..c {
                                let off = (i * c + ch) * s;
                                let coef = gv[ch] * inv_std[ch];
                                for k in off..off + s {
                                    d[k] = d[k] + coef * g[k];
                                }
                            }
                        }
                    }
                });
                acc(*gamma, &mut |d| add_into(d, &dgamma));
                acc(*beta, &mut |d| add_into(d, &dbeta));
            }
            Op::Softmax { x, t, k } => {
                let y = &node.value;
                let inv_t = T::one() / *t;
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(*k).zip(g.chunks(*k)).zip(y.chunks(*k)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..*k {
                            dr[j] = dr[j] + inv_t * yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { x, t, k } => {
                let y = &node.value;
                let inv_t = T::one() / *t;
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(*k).zip(g.chunks(*k)).zip(y.chunks(*k)) {
                        let total: T = gr.iter().copied().sum();
                        for j in 0..*k {
                            dr[j] = dr[j] + inv_t * (gr[j] - yr[j].exp() * total);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                k,
            } => {
                let scale = g[0] / T::from_usize(labels.len()).expect("n");
                acc(*logits, &mut |d| {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..*k {
                            let p = probs[r * k + j];
                            let t = if j == y { T::one() } else { T::zero() };
                            d[r * k + j] = d[r * k + j] + scale * (p - t);
                        }
                    }
                });
            }
            Op::FakeQuant { x, lo, hi } => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    elementwise(d, g, xv, |g, x| if x >= *lo && x <= *hi { g } else { T::zero() })
                });
            }
        }
    }
}

fn add_into<T: Real>(d: &mut [T], g: &[T]) {
    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
}

fn elementwise<T: Real>(d: &mut [T], g: &[T], v: &[T], f: impl Fn(T, T) -> T) {
    for k in 0..d.len() {
        d[k] = d[k] + f(g[k], v[k]);
    }
}
