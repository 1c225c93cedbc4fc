//! Eager tape for reverse-mode differentiation.
//!
//! Operations validate shapes, compute their value immediately, check the
//! result for non-finite values, and record themselves. [`Tape::backward`]
//! walks the recording once in reverse, accumulating gradients into every
//! node that (transitively) depends on a `requires_grad` leaf.
//!
//! The op set is the minimal closure needed for the small U-Nets and
//! classifiers in this crate: elementwise arithmetic with trailing-dim
//! broadcasting, matmul, conv2d, relu/sigmoid/softmax/log/exp/square,
//! sum/mean, concat, 2x average pooling and nearest upsampling, reshape.

use std::sync::Arc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Log(Var),
    Exp(Var),
    Square(Var),
    Sum {
        x: Var,
        axis: Option<usize>,
    },
    Mean(Var),
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    AvgPool2(Var),
    UpsampleNearest2(Var),
    Reshape(Var),
}

struct Node<T: Scalar> {
    op: Op,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires: bool,
    grad: Option<Vec<T>>,
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
        Tape { nodes: Vec::new() }
    }

    /// Insert a tensor as a leaf. Parameter data is shared, not copied.
    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(Op::Leaf, t.shape().to_vec(), t.shared_data(), requires_grad)
    }

    /// Leaf that never participates in gradients.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        let t = Tensor::scalar(T::from_f64(v));
        self.constant(&t)
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

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_shared(n.shape.clone(), Arc::clone(&n.data))
    }

    /// Accumulated gradient of a node, or `None` if it never participated.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Whether this node transitively depends on a `requires_grad` leaf.
    pub fn grad_participating(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// Gradient as a tensor; detached nodes report zeros.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        match &n.grad {
            Some(g) => Tensor::new(n.shape.clone(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(&n.shape),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_node(&mut self, op: Op, shape: Vec<usize>, data: Arc<Vec<T>>, requires: bool) -> Var {
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(
        &mut self,
        name: &'static str,
        op: Op,
        shape: Vec<usize>,
        data: Vec<T>,
        requires: bool,
    ) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite(name));
        }
        Ok(self.push_node(op, shape, Arc::new(data), requires))
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    // ---- elementwise binary ops with trailing-dim broadcasting ----

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

    /// Multiply by a scalar constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = self.constant_scalar(c);
        self.mul(x, k)
    }

    /// Add a scalar constant.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = self.constant_scalar(c);
        self.add(x, k)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op,
    ) -> Result<Var> {
        let (asl, bsl) = (&self.nodes[a.0], &self.nodes[b.0]);
        let out_shape = broadcast_shape(&asl.shape, &bsl.shape).ok_or(Error::ShapeMismatch {
            op: name,
            lhs: asl.shape.clone(),
            rhs: bsl.shape.clone(),
        })?;
        let data = broadcast_apply(
            &asl.data,
            &asl.shape,
            &bsl.data,
            &bsl.shape,
            &out_shape,
            f,
        );
        let requires = asl.requires || bsl.requires;
        self.push_op(name, op, out_shape, data, requires)
    }

    // ---- matmul / conv ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![T::ZERO; m * n];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = ad[i * k + p];
                    let brow = &bd[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let requires = self.requires(a) || self.requires(b);
        self.push_op("matmul", Op::MatMul(a, b), vec![m, n], out, requires)
    }

    /// 2-D cross-correlation, NCHW layout, kernel [Co, Ci, kh, kw].
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xsh, wsh) = (self.nodes[x.0].shape.clone(), self.nodes[w.0].shape.clone());
        if xsh.len() != 4 || wsh.len() != 4 || xsh[1] != wsh[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xsh,
                rhs: wsh,
            });
        }
        let (n, ci, h, wd) = (xsh[0], xsh[1], xsh[2], xsh[3]);
        let (co, _, kh, kw) = (wsh[0], wsh[1], wsh[2], wsh[3]);
        if h + 2 * padding < kh || wd + 2 * padding < kw || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xsh,
                rhs: wsh,
            });
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (wd + 2 * padding - kw) / stride + 1;
        let mut out = vec![T::ZERO; n * co * ho * wo];
        conv2d_forward(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            &mut out,
            [n, ci, h, wd],
            [co, kh, kw],
            stride,
            padding,
        );
        let requires = self.requires(x) || self.requires(w);
        self.push_op(
            "conv2d",
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            },
            vec![n, co, ho, wo],
            out,
            requires,
        )
    }

    // ---- unary ----

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.maximum(T::ZERO), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid_stable, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(T) -> T,
        op: Op,
    ) -> Result<Var> {
        let xn = &self.nodes[x.0];
        let data = xn.data.iter().map(|&v| f(v)).collect();
        let (shape, requires) = (xn.shape.clone(), xn.requires);
        self.push_op(name, op, shape, data, requires)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xn = &self.nodes[x.0];
        let shape = xn.shape.clone();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = &xn.data;
        let mut out = vec![T::ZERO; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = xd[base];
                for a in 1..len {
                    let v = xd[base + a * inner];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut total = T::ZERO;
                for a in 0..len {
                    let e = (xd[base + a * inner] - mx).exp();
                    out[base + a * inner] = e;
                    total += e;
                }
                for a in 0..len {
                    out[base + a * inner] = out[base + a * inner] / total;
                }
            }
        }
        let requires = xn.requires;
        self.push_op("softmax", Op::Softmax { x, axis }, shape, out, requires)
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let xn = &self.nodes[x.0];
        let shape = xn.shape.clone();
        let requires = xn.requires;
        match axis {
            None => {
                let mut acc = T::ZERO;
                for &v in xn.data.iter() {
                    acc += v;
                }
                self.push_op("sum", Op::Sum { x, axis }, vec![1], vec![acc], requires)
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::invalid(format!(
                        "sum axis {ax} out of range for shape {shape:?}"
                    )));
                }
                let (outer, len, inner) = axis_split(&shape, ax);
                let mut out_shape = shape.clone();
                out_shape.remove(ax);
                if out_shape.is_empty() {
                    out_shape.push(1);
                }
                let mut out = vec![T::ZERO; outer * inner];
                let xd = &xn.data;
                for o in 0..outer {
                    for a in 0..len {
                        let src = &xd[(o * len + a) * inner..(o * len + a + 1) * inner];
                        let dst = &mut out[o * inner..(o + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                self.push_op("sum", Op::Sum { x, axis }, out_shape, out, requires)
            }
        }
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xn = &self.nodes[x.0];
        let count = T::from_f64(xn.data.len() as f64);
        let mut acc = T::ZERO;
        for &v in xn.data.iter() {
            acc += v;
        }
        let requires = xn.requires;
        self.push_op("mean", Op::Mean(x), vec![1], vec![acc / count], requires)
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ash, bsh) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        let compatible = ash.len() == bsh.len()
            && axis < ash.len()
            && ash
                .iter()
                .zip(&bsh)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (outer, alen, inner) = axis_split(&ash, axis);
        let blen = bsh[axis];
        let mut shape = ash.clone();
        shape[axis] = alen + blen;
        let mut out = vec![T::ZERO; outer * (alen + blen) * inner];
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        for o in 0..outer {
            let dst = &mut out[o * (alen + blen) * inner..];
            dst[..alen * inner].copy_from_slice(&ad[o * alen * inner..(o + 1) * alen * inner]);
            dst[alen * inner..(alen + blen) * inner]
                .copy_from_slice(&bd[o * blen * inner..(o + 1) * blen * inner]);
        }
        let requires = self.requires(a) || self.requires(b);
        self.push_op("concat", Op::Concat { a, b, axis }, shape, out, requires)
    }

    /// 2x2 average pooling with stride 2; a trailing odd row/column is dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let sh = self.nodes[x.0].shape.clone();
        if sh.len() != 4 || sh[2] < 2 || sh[3] < 2 {
            return Err(Error::invalid(format!("avg_pool2 needs NCHW >= 2x2, got {sh:?}")));
        }
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xd = &self.nodes[x.0].data;
        let quarter = T::from_f64(0.25);
        let mut out = vec![T::ZERO; n * c * ho * wo];
        for img in 0..n * c {
            let src = &xd[img * h * w..(img + 1) * h * w];
            let dst = &mut out[img * ho * wo..(img + 1) * ho * wo];
            for r in 0..ho {
                let top = &src[2 * r * w..];
                let bot = &src[(2 * r + 1) * w..];
                let drow = &mut dst[r * wo..(r + 1) * wo];
                for q in 0..wo {
                    drow[q] = (top[2 * q] + top[2 * q + 1] + bot[2 * q] + bot[2 * q + 1]) * quarter;
                }
            }
        }
        let requires = self.requires(x);
        self.push_op(
            "avg_pool2",
            Op::AvgPool2(x),
            vec![n, c, ho, wo],
            out,
            requires,
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let sh = self.nodes[x.0].shape.clone();
        if sh.len() != 4 {
            return Err(Error::invalid(format!("upsample_nearest2 needs NCHW, got {sh:?}")));
        }
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let (ho, wo) = (2 * h, 2 * w);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![T::ZERO; n * c * ho * wo];
        for img in 0..n * c {
            let src = &xd[img * h * w..(img + 1) * h * w];
            let dst = &mut out[img * ho * wo..(img + 1) * ho * wo];
            for r in 0..h {
                for q in 0..w {
                    let v = src[r * w + q];
                    dst[2 * r * wo + 2 * q] = v;
                    dst[2 * r * wo + 2 * q + 1] = v;
                    dst[(2 * r + 1) * wo + 2 * q] = v;
                    dst[(2 * r + 1) * wo + 2 * q + 1] = v;
                }
            }
        }
        let requires = self.requires(x);
        self.push_op(
            "upsample_nearest2",
            Op::UpsampleNearest2(x),
            vec![n, c, ho, wo],
            out,
            requires,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xn = &self.nodes[x.0];
        if shape.iter().product::<usize>() != xn.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: xn.shape.clone(),
                rhs: shape,
            });
        }
        let data = Arc::clone(&xn.data);
        let requires = xn.requires;
        Ok(self.push_node(Op::Reshape(x), shape, data, requires))
    }

    // ---- backward ----

    /// Accumulate d(output)/d(node) into every participating node.
    ///
    /// `output` must be scalar. Calling twice without [`Tape::zero_grad`]
    /// accumulates, matching gradient-of-sum semantics.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        if self.nodes[output.0].data.len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar output, got shape {:?}",
                self.nodes[output.0].shape
            )));
        }
        if !self.nodes[output.0].requires {
            // No differentiable leaves feed this output; all grads stay zero.
            return Ok(());
        }

        let n = self.nodes.len();
        let mut pass: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        pass[output.0] = Some(vec![T::ONE]);

        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            let Some(gout) = pass[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &gout, &mut pass)?;
            // Fold this pass into the persistent accumulator.
            let node = &mut self.nodes[i];
            let acc = node
                .grad
                .get_or_insert_with(|| vec![T::ZERO; node.data.len()]);
            for (a, g) in acc.iter_mut().zip(&gout) {
                *a += *g;
            }
        }
        Ok(())
    }

    fn seed(&self, pass: &mut [Option<Vec<T>>], v: Var) -> bool {
        if !self.nodes[v.0].requires {
            return false;
        }
        if pass[v.0].is_none() {
            pass[v.0] = Some(vec![T::ZERO; self.nodes[v.0].data.len()]);
        }
        true
    }

    fn propagate(
        &mut self,
        out_id: usize,
        op: &Op,
        gout: &[T],
        pass: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, sign) in [(a, 1.0), (b, 1.0)] {
                    self.bcast_accumulate(pass, v, out_id, gout, sign, None);
                }
            }
            Op::Sub(a, b) => {
                self.bcast_accumulate(pass, a, out_id, gout, 1.0, None);
                self.bcast_accumulate(pass, b, out_id, gout, -1.0, None);
            }
            Op::Mul(a, b) => {
                self.bcast_accumulate(pass, a, out_id, gout, 1.0, Some(b));
                self.bcast_accumulate(pass, b, out_id, gout, 1.0, Some(a));
            }
            Op::Div(a, b) => {
                // d(a/b)/da = 1/b ; d(a/b)/db = -a/b^2 = -(a/b)/b
                if self.seed(pass, a) {
                    let bn = &self.nodes[b.0];
                    let contrib = broadcast_apply(
                        gout,
                        &self.nodes[out_id].shape,
                        &bn.data,
                        &bn.shape,
                        &self.nodes[out_id].shape,
                        |g, bv| g / bv,
                    );
                    reduce_into(
                        pass[a.0].as_mut().unwrap(),
                        &self.nodes[a.0].shape,
                        &contrib,
                        &self.nodes[out_id].shape,
                    );
                }
                if self.seed(pass, b) {
                    let out_data = Arc::clone(&self.nodes[out_id].data);
                    let bn = &self.nodes[b.0];
                    let over_b = broadcast_apply(
                        &out_data,
                        &self.nodes[out_id].shape,
                        &bn.data,
                        &bn.shape,
                        &self.nodes[out_id].shape,
                        |o, bv| o / bv,
                    );
                    let contrib: Vec<T> = gout
                        .iter()
                        .zip(&over_b)
                        .map(|(&g, &q)| -(g * q))
                        .collect();
                    reduce_into(
                        pass[b.0].as_mut().unwrap(),
                        &self.nodes[b.0].shape,
                        &contrib,
                        &self.nodes[out_id].shape,
                    );
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.seed(pass, a) {
                    let bd = Arc::clone(&self.nodes[b.0].data);
                    let ga = pass[a.0].as_mut().unwrap();
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        let garow = &mut ga[i * k..(i + 1) * k];
                        for (p, gv) in garow.iter_mut().enumerate() {
                            *gv += dot(grow, &bd[p * n..(p + 1) * n]);
                        }
                    }
                }
                if self.seed(pass, b) {
                    let ad = Arc::clone(&self.nodes[a.0].data);
                    let gb = pass[b.0].as_mut().unwrap();
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            let gbrow = &mut gb[p * n..(p + 1) * n];
                            for (g, &gv) in gbrow.iter_mut().zip(grow) {
                                *g += av * gv;
                            }
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            } => {
                let xsh = self.nodes[x.0].shape.clone();
                let wsh = self.nodes[w.0].shape.clone();
                let dims = [xsh[0], xsh[1], xsh[2], xsh[3]];
                let kdims = [wsh[0], wsh[2], wsh[3]];
                if self.seed(pass, x) {
                    let wd = Arc::clone(&self.nodes[w.0].data);
                    conv2d_backward_input(
                        pass[x.0].as_mut().unwrap(),
                        &wd,
                        gout,
                        dims,
                        kdims,
                        stride,
                        padding,
                    );
                }
                if self.seed(pass, w) {
                    let xd = Arc::clone(&self.nodes[x.0].data);
                    conv2d_backward_kernel(
                        pass[w.0].as_mut().unwrap(),
                        &xd,
                        gout,
                        dims,
                        kdims,
                        stride,
                        padding,
                    );
                }
            }
            Op::Relu(x) => {
                if self.seed(pass, x) {
                    let xd = Arc::clone(&self.nodes[x.0].data);
                    let gx = pass[x.0].as_mut().unwrap();
                    for ((g, &xv), &go) in gx.iter_mut().zip(xd.iter()).zip(gout) {
                        if xv > T::ZERO {
                            *g += go;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.seed(pass, x) {
                    let od = Arc::clone(&self.nodes[out_id].data);
                    let gx = pass[x.0].as_mut().unwrap();
                    for ((g, &s), &go) in gx.iter_mut().zip(od.iter()).zip(gout) {
                        *g += go * s * (T::ONE - s);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if self.seed(pass, x) {
                    let od = Arc::clone(&self.nodes[out_id].data);
                    let shape = self.nodes[out_id].shape.clone();
                    let (outer, len, inner) = axis_split(&shape, axis);
                    let gx = pass[x.0].as_mut().unwrap();
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dotp = T::ZERO;
                            for a in 0..len {
                                let idx = base + a * inner;
                                dotp += gout[idx] * od[idx];
                            }
                            for a in 0..len {
                                let idx = base + a * inner;
                                gx[idx] += od[idx] * (gout[idx] - dotp);
                            }
                        }
                    }
                }
            }
            Op::Log(x) => {
                if self.seed(pass, x) {
                    let xd = Arc::clone(&self.nodes[x.0].data);
                    let gx = pass[x.0].as_mut().unwrap();
                    for ((g, &xv), &go) in gx.iter_mut().zip(xd.iter()).zip(gout) {
                        *g += go / xv;
                    }
                }
            }
            Op::Exp(x) => {
                if self.seed(pass, x) {
                    let od = Arc::clone(&self.nodes[out_id].data);
                    let gx = pass[x.0].as_mut().unwrap();
                    for ((g, &e), &go) in gx.iter_mut().zip(od.iter()).zip(gout) {
                        *g += go * e;
                    }
                }
            }
            Op::Square(x) => {
                if self.seed(pass, x) {
                    let xd = Arc::clone(&self.nodes[x.0].data);
                    let two = T::from_f64(2.0);
                    let gx = pass[x.0].as_mut().unwrap();
                    for ((g, &xv), &go) in gx.iter_mut().zip(xd.iter()).zip(gout) {
                        *g += go * two * xv;
                    }
                }
            }
            Op::Sum { x, axis } => {
                if self.seed(pass, x) {
                    let shape = self.nodes[x.0].shape.clone();
                    let gx = pass[x.0].as_mut().unwrap();
                    match axis {
                        None => {
                            let g = gout[0];
                            for v in gx.iter_mut() {
                                *v += g;
                            }
                        }
                        Some(ax) => {
                            let (outer, len, inner) = axis_split(&shape, ax);
                            for o in 0..outer {
                                for a in 0..len {
                                    let dst = &mut gx[(o * len + a) * inner
                                        ..(o * len + a + 1) * inner];
                                    let src = &gout[o * inner..(o + 1) * inner];
                                    for (d, &s) in dst.iter_mut().zip(src) {
                                        *d += s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Mean(x) => {
                if self.seed(pass, x) {
                    let gx = pass[x.0].as_mut().unwrap();
                    let g = gout[0] / T::from_f64(gx.len() as f64);
                    for v in gx.iter_mut() {
                        *v += g;
                    }
                }
            }
            Op::Concat { a, b, axis } => {
                let ash = self.nodes[a.0].shape.clone();
                let (outer, alen, inner) = axis_split(&ash, axis);
                let blen = self.nodes[b.0].shape[axis];
                let step = (alen + blen) * inner;
                if self.seed(pass, a) {
                    let ga = pass[a.0].as_mut().unwrap();
                    for o in 0..outer {
                        let src = &gout[o * step..o * step + alen * inner];
                        let dst = &mut ga[o * alen * inner..(o + 1) * alen * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                if self.seed(pass, b) {
                    let gb = pass[b.0].as_mut().unwrap();
                    for o in 0..outer {
                        let src = &gout[o * step + alen * inner..(o + 1) * step];
                        let dst = &mut gb[o * blen * inner..(o + 1) * blen * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::AvgPool2(x) => {
                if self.seed(pass, x) {
                    let sh = self.nodes[x.0].shape.clone();
                    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                    let (ho, wo) = (h / 2, w / 2);
                    let quarter = T::from_f64(0.25);
                    let gx = pass[x.0].as_mut().unwrap();
                    for img in 0..n * c {
                        let src = &gout[img * ho * wo..(img + 1) * ho * wo];
                        let dst = &mut gx[img * h * w..(img + 1) * h * w];
                        for r in 0..ho {
                            for q in 0..wo {
                                let g = src[r * wo + q] * quarter;
                                dst[2 * r * w + 2 * q] += g;
                                dst[2 * r * w + 2 * q + 1] += g;
                                dst[(2 * r + 1) * w + 2 * q] += g;
                                dst[(2 * r + 1) * w + 2 * q + 1] += g;
                            }
                        }
                    }
                }
            }
            Op::UpsampleNearest2(x) => {
                if self.seed(pass, x) {
                    let sh = self.nodes[x.0].shape.clone();
                    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                    let wo = 2 * w;
                    let gx = pass[x.0].as_mut().unwrap();
                    for img in 0..n * c {
                        let src = &gout[img * 4 * h * w..(img + 1) * 4 * h * w];
                        let dst = &mut gx[img * h * w..(img + 1) * h * w];
                        for r in 0..h {
                            for q in 0..w {
                                dst[r * w + q] += src[2 * r * wo + 2 * q]
                                    + src[2 * r * wo + 2 * q + 1]
                                    + src[(2 * r + 1) * wo + 2 * q]
                                    + src[(2 * r + 1) * wo + 2 * q + 1];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.seed(pass, x) {
                    let gx = pass[x.0].as_mut().unwrap();
                    for (g, &go) in gx.iter_mut().zip(gout) {
                        *g += go;
                    }
                }
            }
        }
        Ok(())
    }

    /// Shared path for add/sub/mul backward: optionally multiply the output
    /// gradient by a broadcast factor, then reduce onto the input's shape.
    fn bcast_accumulate(
        &mut self,
        pass: &mut [Option<Vec<T>>],
        target: Var,
        out_id: usize,
        gout: &[T],
        sign: f64,
        factor: Option<Var>,
    ) {
        if !self.seed(pass, target) {
            return;
        }
        let out_shape = self.nodes[out_id].shape.clone();
        let contrib: Vec<T> = match factor {
            None => {
                if sign < 0.0 {
                    gout.iter().map(|&g| -g).collect()
                } else {
                    gout.to_vec()
                }
            }
            Some(f) => {
                let fnode = &self.nodes[f.0];
                broadcast_apply(
                    gout,
                    &out_shape,
                    &fnode.data,
                    &fnode.shape,
                    &out_shape,
                    |g, fv| g * fv,
                )
            }
        };
        reduce_into(
            pass[target.0].as_mut().unwrap(),
            &self.nodes[target.0].shape,
            &contrib,
            &out_shape,
        );
    }
}

#[inline]
fn sigmoid_stable<T: Scalar>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

/// Four-way unrolled dot product; fixed accumulation order keeps results
/// reproducible across runs of the same binary.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::ZERO; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut rest = T::ZERO;
    for j in 4 * chunks..a.len() {
        rest += a[j] * b[j];
    }
    acc[0] + acc[1] + acc[2] + acc[3] + rest
}

/// (product of dims before axis, dim at axis, product after).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numpy-style trailing-dim broadcast shape, or None when incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

fn broadcast_strides(shape: &[usize], ndim: usize, out_shape: &[usize]) -> Vec<usize> {
    let mut padded = vec![1usize; ndim];
    padded[ndim - shape.len()..].copy_from_slice(shape);
    let mut strides = vec![0usize; ndim];
    let mut acc = 1;
    for d in (0..ndim).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    // Zero out strides where the dim is broadcast against a larger one.
    for d in 0..ndim {
        if padded[d] == 1 && out_shape[d] != 1 {
            strides[d] = 0;
        }
    }
    strides
}

/// Apply a binary fn over two broadcast operands, producing `out_shape` data.
fn broadcast_apply<T: Scalar>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let numel: usize = out_shape.iter().product();
    // Fast paths cover almost all real traffic: equal shapes and scalars.
    if a_shape == b_shape && a_shape == out_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if b.len() == 1 && a_shape == out_shape {
        let s = b[0];
        return a.iter().map(|&x| f(x, s)).collect();
    }
    if a.len() == 1 && b_shape == out_shape {
        let s = a[0];
        return b.iter().map(|&y| f(s, y)).collect();
    }
    let ndim = out_shape.len();
    let sa = broadcast_strides(a_shape, ndim, out_shape);
    let sb = broadcast_strides(b_shape, ndim, out_shape);
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; ndim];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..numel {
        out.push(f(a[ia], b[ib]));
        // Odometer increment from the last dim.
        for d in (0..ndim).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Sum `src` (shaped `src_shape`) into `dst` (shaped `dst_shape`), reducing
/// over broadcast dimensions.
fn reduce_into<T: Scalar>(dst: &mut [T], dst_shape: &[usize], src: &[T], src_shape: &[usize]) {
    if dst_shape == src_shape {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
        return;
    }
    if dst.len() == 1 {
        let mut acc = T::ZERO;
        for &s in src {
            acc += s;
        }
        dst[0] += acc;
        return;
    }
    let ndim = src_shape.len();
    let sd = broadcast_strides(dst_shape, ndim, src_shape);
    let mut idx = vec![0usize; ndim];
    let mut id = 0usize;
    for &s in src {
        dst[id] += s;
        for d in (0..ndim).rev() {
            idx[d] += 1;
            id += sd[d];
            if idx[d] < src_shape[d] {
                break;
            }
            idx[d] = 0;
            id -= sd[d] * src_shape[d];
        }
    }
}

// ---- conv2d kernels ----
//
// stride == 1 takes a contiguous-row path that the compiler vectorizes; the
// generic path handles any stride.

type Dims4 = [usize; 4]; // N, C, H, W
type KDims = [usize; 3]; // Co, kh, kw

fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    out: &mut [T],
    dims: Dims4,
    kdims: KDims,
    stride: usize,
    padding: usize,
) {
    let [n, ci, h, wd] = dims;
    let [co, kh, kw] = kdims;
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (wd + 2 * padding - kw) / stride + 1;
    for img in 0..n {
        for oc in 0..co {
            let out_plane = &mut out[(img * co + oc) * ho * wo..(img * co + oc + 1) * ho * wo];
            for icv in 0..ci {
                let x_plane = &x[(img * ci + icv) * h * wd..(img * ci + icv + 1) * h * wd];
                let k_plane = &w[(oc * ci + icv) * kh * kw..(oc * ci + icv + 1) * kh * kw];
                for r in 0..kh {
                    for q in 0..kw {
                        let kval = k_plane[r * kw + q];
                        if kval == T::ZERO {
                            continue;
                        }
                        for orow in 0..ho {
                            let irow = (orow * stride + r) as isize - padding as isize;
                            if irow < 0 || irow >= h as isize {
                                continue;
                            }
                            let xrow = &x_plane[irow as usize * wd..(irow as usize + 1) * wd];
                            let dst = &mut out_plane[orow * wo..(orow + 1) * wo];
                            if stride == 1 {
                                let off = q as isize - padding as isize;
                                let lo = (-off).max(0) as usize;
                                let hi = (wd as isize - off).clamp(0, wo as isize) as usize;
                                if lo >= hi {
                                    continue;
                                }
                                let src = &xrow[(lo as isize + off) as usize
                                    ..(hi as isize + off) as usize];
                                for (d, &s) in dst[lo..hi].iter_mut().zip(src) {
                                    *d += kval * s;
                                }
                            } else {
                                for (ocol, d) in dst.iter_mut().enumerate() {
                                    let icol =
                                        (ocol * stride + q) as isize - padding as isize;
                                    if icol >= 0 && icol < wd as isize {
                                        *d += kval * xrow[icol as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_input<T: Scalar>(
    gx: &mut [T],
    w: &[T],
    gout: &[T],
    dims: Dims4,
    kdims: KDims,
    stride: usize,
    padding: usize,
) {
    let [n, ci, h, wd] = dims;
    let [co, kh, kw] = kdims;
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (wd + 2 * padding - kw) / stride + 1;
    for img in 0..n {
        for oc in 0..co {
            let g_plane = &gout[(img * co + oc) * ho * wo..(img * co + oc + 1) * ho * wo];
            for icv in 0..ci {
                let gx_plane = &mut gx[(img * ci + icv) * h * wd..(img * ci + icv + 1) * h * wd];
                let k_plane = &w[(oc * ci + icv) * kh * kw..(oc * ci + icv + 1) * kh * kw];
                for r in 0..kh {
                    for q in 0..kw {
                        let kval = k_plane[r * kw + q];
                        if kval == T::ZERO {
                            continue;
                        }
                        for orow in 0..ho {
                            let irow = (orow * stride + r) as isize - padding as isize;
                            if irow < 0 || irow >= h as isize {
                                continue;
                            }
                            let grow = &g_plane[orow * wo..(orow + 1) * wo];
                            let dst =
                                &mut gx_plane[irow as usize * wd..(irow as usize + 1) * wd];
                            if stride == 1 {
                                let off = q as isize - padding as isize;
                                let lo = (-off).max(0) as usize;
                                let hi = (wd as isize - off).clamp(0, wo as isize) as usize;
                                if lo >= hi {
                                    continue;
                                }
                                let dsub = &mut dst[(lo as isize + off) as usize
                                    ..(hi as isize + off) as usize];
                                for (d, &g) in dsub.iter_mut().zip(&grow[lo..hi]) {
                                    *d += kval * g;
                                }
                            } else {
                                for (ocol, &g) in grow.iter().enumerate() {
                                    let icol =
                                        (ocol * stride + q) as isize - padding as isize;
                                    if icol >= 0 && icol < wd as isize {
                                        dst[icol as usize] += kval * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_kernel<T: Scalar>(
    gw: &mut [T],
    x: &[T],
    gout: &[T],
    dims: Dims4,
    kdims: KDims,
    stride: usize,
    padding: usize,
) {
    let [n, ci, h, wd] = dims;
    let [co, kh, kw] = kdims;
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (wd + 2 * padding - kw) / stride + 1;
    for img in 0..n {
        for oc in 0..co {
            let g_plane = &gout[(img * co + oc) * ho * wo..(img * co + oc + 1) * ho * wo];
            for icv in 0..ci {
                let x_plane = &x[(img * ci + icv) * h * wd..(img * ci + icv + 1) * h * wd];
                let gk_plane =
                    &mut gw[(oc * ci + icv) * kh * kw..(oc * ci + icv + 1) * kh * kw];
                for r in 0..kh {
                    for q in 0..kw {
                        let mut acc = T::ZERO;
                        for orow in 0..ho {
                            let irow = (orow * stride + r) as isize - padding as isize;
                            if irow < 0 || irow >= h as isize {
                                continue;
                            }
                            let grow = &g_plane[orow * wo..(orow + 1) * wo];
                            let xrow = &x_plane[irow as usize * wd..(irow as usize + 1) * wd];
                            if stride == 1 {
                                let off = q as isize - padding as isize;
                                let lo = (-off).max(0) as usize;
                                let hi = (wd as isize - off).clamp(0, wo as isize) as usize;
                                if lo >= hi {
                                    continue;
                                }
                                acc += dot(
                                    &grow[lo..hi],
                                    &xrow[(lo as isize + off) as usize
                                        ..(hi as isize + off) as usize],
                                );
                            } else {
                                for (ocol, &g) in grow.iter().enumerate() {
                                    let icol =
                                        (ocol * stride + q) as isize - padding as isize;
                                    if icol >= 0 && icol < wd as isize {
                                        acc += g * xrow[icol as usize];
                                    }
                                }
                            }
                        }
                        gk_plane[r * kw + q] += acc;
                    }
                }
            }
        }
    }
}
