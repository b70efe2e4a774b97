use std::sync::Arc;

use crate::scalar::Real;

use super::tensor::Tensor;
use super::DiffError;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

/// An operation with a hand-written forward/backward pair, for cases where
/// composing primitive ops is impractical (nearest-neighbor queries, grid
/// interpolation). The op sees raw tensors and returns the context it wants
/// saved for the backward pass.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<Tensor<T>>), DiffError>;
    /// One gradient per input; `None` marks inputs not differentiated.
    fn backward(
        &self,
        saved: &[Tensor<T>],
        inputs: &[&Tensor<T>],
        grad_out: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Add(TensorRef, TensorRef),
    Sub(TensorRef, TensorRef),
    Mul(TensorRef, TensorRef),
    Div(TensorRef, TensorRef),
    Matmul(TensorRef, TensorRef),
    Conv2d { x: TensorRef, w: TensorRef, stride: usize, pad: usize },
    LeakyRelu(TensorRef, T),
    Tanh(TensorRef),
    Exp(TensorRef),
    Log(TensorRef),
    Abs(TensorRef),
    Square(TensorRef),
    Sqrt(TensorRef),
    Scale(TensorRef, T),
    AddScalar(TensorRef, T),
    Sum(TensorRef),
    Mean(TensorRef),
    Concat { axis: usize, inputs: Vec<TensorRef> },
    Reshape(TensorRef),
    Broadcast(TensorRef),
    Slice { input: TensorRef, axis: usize, start: usize, len: usize },
    Gather { input: TensorRef, indices: Arc<Vec<usize>> },
    UnaryMap { input: TensorRef, df: fn(T) -> T },
    Custom { op: Arc<dyn CustomOp<T>>, inputs: Vec<TensorRef>, saved: Vec<Tensor<T>> },
}

struct Node<T: Real> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Define-by-run computation graph. Ops evaluate eagerly on insertion;
/// [`Graph::backward`] walks the tape in reverse. One graph instance is
/// single-threaded; build a fresh graph per forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass, indexed by node handle.
pub struct GradStore<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> GradStore<T> {
    pub fn get(&self, r: TensorRef) -> Option<&Tensor<T>> {
        self.grads.get(r.0).and_then(|g| g.as_ref())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, r: TensorRef) -> &Tensor<T> {
        &self.nodes[r.0].value
    }

    pub fn shape(&self, r: TensorRef) -> &[usize] {
        self.nodes[r.0].value.shape()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> TensorRef {
        self.nodes.push(Node { op, value, needs_grad });
        TensorRef(self.nodes.len() - 1)
    }

    fn needs(&self, r: TensorRef) -> bool {
        self.nodes[r.0].needs_grad
    }

    /// Leaf with no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> TensorRef {
        self.push(Op::Leaf, t.with_requires_grad(false), false)
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, t: Tensor<T>) -> TensorRef {
        self.push(Op::Leaf, t.with_requires_grad(true), true)
    }

    pub fn scalar_const(&mut self, v: T) -> TensorRef {
        self.constant(Tensor::scalar(v))
    }

    // ---- elementwise binary ----

    fn binary(
        &mut self,
        name: &'static str,
        a: TensorRef,
        b: TensorRef,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool), DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if ta.shape() == tb.shape() {
            let data = ta.values().iter().zip(tb.values()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data)?
        } else if tb.numel() == 1 {
            let y = tb.values()[0];
            ta.map(|x| f(x, y))
        } else if ta.numel() == 1 {
            let x = ta.values()[0];
            tb.map(|y| f(x, y))
        } else {
            return Err(DiffError::shape(
                name,
                format!("{:?} vs {:?} (shapes must match, or one side be a scalar)", ta.shape(), tb.shape()),
            ));
        };
        Ok((value, self.needs(a) || self.needs(b)))
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, DiffError> {
        let (v, g) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v, g))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, DiffError> {
        let (v, g) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v, g))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, DiffError> {
        let (v, g) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v, g))
    }

    pub fn div(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, DiffError> {
        let (v, g) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(Op::Div(a, b), v, g))
    }

    // ---- elementwise unary ----

    fn unary(&mut self, input: TensorRef, op: Op<T>, f: impl Fn(T) -> T) -> TensorRef {
        let v = self.nodes[input.0].value.map(f);
        let g = self.needs(input);
        self.push(op, v, g)
    }

    pub fn leaky_relu(&mut self, x: TensorRef, slope: T) -> TensorRef {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v >= T::zero() { v } else { v * slope })
    }

    pub fn tanh(&mut self, x: TensorRef) -> TensorRef {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn exp(&mut self, x: TensorRef) -> TensorRef {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: TensorRef) -> TensorRef {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn abs(&mut self, x: TensorRef) -> TensorRef {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn square(&mut self, x: TensorRef) -> TensorRef {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn sqrt(&mut self, x: TensorRef) -> TensorRef {
        self.unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn scale(&mut self, x: TensorRef, c: T) -> TensorRef {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: TensorRef, c: T) -> TensorRef {
        self.unary(x, Op::AddScalar(x, c), |v| v + c)
    }

    pub fn neg(&mut self, x: TensorRef) -> TensorRef {
        self.scale(x, -T::one())
    }

    /// Elementwise analytic function given as a value/derivative pair.
    pub fn unary_map(&mut self, x: TensorRef, f: fn(T) -> T, df: fn(T) -> T) -> TensorRef {
        self.unary(x, Op::UnaryMap { input: x, df }, f)
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: TensorRef) -> TensorRef {
        let v: T = self.nodes[x.0].value.values().iter().copied().sum();
        let g = self.needs(x);
        self.push(Op::Sum(x), Tensor::scalar(v), g)
    }

    pub fn mean(&mut self, x: TensorRef) -> Result<TensorRef, DiffError> {
        let n = self.nodes[x.0].value.numel();
        if n == 0 {
            return Err(DiffError::op("mean", "empty tensor".to_string()));
        }
        let v: T = self.nodes[x.0].value.values().iter().copied().sum();
        let g = self.needs(x);
        Ok(self.push(Op::Mean(x), Tensor::scalar(v / T::cst(n as f64)), g))
    }

    // ---- structure ----

    pub fn reshape(&mut self, x: TensorRef, shape: &[usize]) -> Result<TensorRef, DiffError> {
        let v = self.nodes[x.0].value.reshaped(shape)?;
        let g = self.needs(x);
        Ok(self.push(Op::Reshape(x), v, g))
    }

    /// Numpy-style broadcast of `x` to `target` (align trailing dims; each
    /// source dim must equal the target dim or be 1).
    pub fn broadcast(&mut self, x: TensorRef, target: &[usize]) -> Result<TensorRef, DiffError> {
        let src = self.nodes[x.0].value.shape().to_vec();
        check_broadcastable("broadcast", &src, target)?;
        let v = broadcast_values(&self.nodes[x.0].value, target);
        let g = self.needs(x);
        Ok(self.push(Op::Broadcast(x), v, g))
    }

    pub fn concat(&mut self, inputs: &[TensorRef], axis: usize) -> Result<TensorRef, DiffError> {
        if inputs.is_empty() {
            return Err(DiffError::op("concat", "no inputs".to_string()));
        }
        let first = self.nodes[inputs[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(DiffError::shape("concat", format!("axis {} out of range for rank {}", axis, first.len())));
        }
        let mut axis_total = 0usize;
        for r in inputs {
            let s = self.nodes[r.0].value.shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(DiffError::shape(
                    "concat",
                    format!("incompatible input shapes {:?} vs {:?} along axis {}", s, first, axis),
                ));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![T::zero(); out_shape.iter().product()];
        let mut offset = 0usize;
        let out_row = axis_total * inner;
        for r in inputs {
            let t = &self.nodes[r.0].value;
            let rows = t.shape()[axis];
            let chunk = rows * inner;
            for o in 0..outer {
                let src = &t.values()[o * chunk..(o + 1) * chunk];
                data[o * out_row + offset..o * out_row + offset + chunk].copy_from_slice(src);
            }
            offset += chunk;
        }
        let g = inputs.iter().any(|r| self.needs(*r));
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.push(Op::Concat { axis, inputs: inputs.to_vec() }, v, g))
    }

    pub fn slice(
        &mut self,
        x: TensorRef,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorRef, DiffError> {
        let s = self.nodes[x.0].value.shape().to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(DiffError::shape(
                "slice",
                format!("range {}..{} on axis {} of {:?}", start, start + len, axis, s),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let mut data = vec![T::zero(); outer * len * inner];
        let src = self.nodes[x.0].value.values();
        for o in 0..outer {
            let from = o * s[axis] * inner + start * inner;
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(&src[from..from + len * inner]);
        }
        let g = self.needs(x);
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.push(Op::Slice { input: x, axis, start, len }, v, g))
    }

    /// Select rows (along axis 0) by index, with repetition allowed.
    pub fn gather(&mut self, x: TensorRef, indices: Arc<Vec<usize>>) -> Result<TensorRef, DiffError> {
        let s = self.nodes[x.0].value.shape().to_vec();
        if s.is_empty() {
            return Err(DiffError::shape("gather", "input must have rank >= 1".to_string()));
        }
        let rows = s[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(DiffError::op("gather", format!("index {} out of range for {} rows", bad, rows)));
        }
        let inner: usize = s[1..].iter().product();
        let mut out_shape = s.clone();
        out_shape[0] = indices.len();
        let src = self.nodes[x.0].value.values();
        let mut data = vec![T::zero(); indices.len() * inner];
        for (k, &i) in indices.iter().enumerate() {
            data[k * inner..(k + 1) * inner].copy_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let g = self.needs(x);
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.push(Op::Gather { input: x, indices }, v, g))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, DiffError> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let v = Tensor::new(
            &[m, n],
            matmul_vals(self.nodes[a.0].value.values(), self.nodes[b.0].value.values(), m, k, n),
        )?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), v, g))
    }

    /// 2D convolution, NCHW input, FCHW kernel, zero padding.
    pub fn conv2d(
        &mut self,
        x: TensorRef,
        w: TensorRef,
        stride: usize,
        pad: usize,
    ) -> Result<TensorRef, DiffError> {
        let (sx, sw) = (self.nodes[x.0].value.shape(), self.nodes[w.0].value.shape());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(DiffError::shape("conv2d", format!("input {:?}, kernel {:?} (want NCHW / FCHW)", sx, sw)));
        }
        if sx[1] != sw[1] {
            return Err(DiffError::shape("conv2d", format!("input channels {} != kernel channels {}", sx[1], sw[1])));
        }
        if stride == 0 {
            return Err(DiffError::op("conv2d", "stride must be >= 1".to_string()));
        }
        let (h, wd, kh, kw) = (sx[2], sx[3], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(DiffError::shape("conv2d", format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, wd + 2 * pad)));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let v = conv2d_forward(&self.nodes[x.0].value, &self.nodes[w.0].value, stride, pad, ho, wo)?;
        let g = self.needs(x) || self.needs(w);
        Ok(self.push(Op::Conv2d { x, w, stride, pad }, v, g))
    }

    /// Record a custom op. Its forward runs immediately.
    pub fn custom(&mut self, op: Arc<dyn CustomOp<T>>, inputs: &[TensorRef]) -> Result<TensorRef, DiffError> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|r| &self.nodes[r.0].value).collect();
        let (value, saved) = op.forward(&vals)?;
        let g = inputs.iter().any(|r| self.needs(*r));
        Ok(self.push(Op::Custom { op, inputs: inputs.to_vec(), saved }, value, g))
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar loss. Every `param` leaf receives a
    /// gradient; leaves with no path to the loss get zeros.
    pub fn backward(&self, loss: TensorRef) -> Result<GradStore<T>, DiffError> {
        let loss_t = &self.nodes[loss.0].value;
        if loss_t.numel() != 1 {
            return Err(DiffError::NonScalarLoss(loss_t.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
            for id in (0..=loss.0).rev() {
                let Some(gout) = grads[id].take() else { continue };
                self.propagate(id, &gout, &mut grads);
                grads[id] = Some(gout);
            }
        }
        let mut store: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let g = match grads[id].take() {
                Some(v) => Some(Tensor::new(node.value.shape(), v).expect("gradient shape matches value")),
                // Parameters off the loss path still report a (zero) gradient.
                None if matches!(node.op, Op::Leaf) && node.value.requires_grad() => {
                    Some(Tensor::zeros(node.value.shape()))
                }
                None => None,
            };
            store.push(g);
        }
        Ok(GradStore { grads: store })
    }

    /// Mutable gradient slot for `r`, allocated zeroed on first touch;
    /// `None` when `r` is off every parameter path.
    fn target<'g>(&self, grads: &'g mut [Option<Vec<T>>], r: TensorRef) -> Option<&'g mut [T]> {
        if !self.needs(r) {
            return None;
        }
        let slot = &mut grads[r.0];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); self.nodes[r.0].value.numel()]);
        }
        slot.as_mut().map(|v| v.as_mut_slice())
    }

    /// Accumulate an elementwise contribution into a binary operand's slot,
    /// reducing over all positions when the operand was a broadcast scalar.
    fn accum_binary(
        &self,
        grads: &mut [Option<Vec<T>>],
        r: TensorRef,
        gout: &[T],
        f: impl Fn(usize, T) -> T,
    ) {
        let Some(buf) = self.target(grads, r) else { return };
        if buf.len() == gout.len() {
            for (i, (gi, &go)) in buf.iter_mut().zip(gout).enumerate() {
                *gi += f(i, go);
            }
        } else {
            debug_assert_eq!(buf.len(), 1);
            let mut acc = T::zero();
            for (i, &go) in gout.iter().enumerate() {
                acc += f(i, go);
            }
            buf[0] += acc;
        }
    }

    fn propagate(&self, id: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum_binary(grads, *a, gout, |_, go| go);
                self.accum_binary(grads, *b, gout, |_, go| go);
            }
            Op::Sub(a, b) => {
                self.accum_binary(grads, *a, gout, |_, go| go);
                self.accum_binary(grads, *b, gout, |_, go| -go);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.values(), self.nodes[b.0].value.values());
                self.accum_binary(grads, *a, gout, |i, go| go * pick(vb, i));
                self.accum_binary(grads, *b, gout, |i, go| go * pick(va, i));
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.values(), self.nodes[b.0].value.values());
                self.accum_binary(grads, *a, gout, |i, go| go / pick(vb, i));
                self.accum_binary(grads, *b, gout, |i, go| {
                    let bv = pick(vb, i);
                    -go * pick(va, i) / (bv * bv)
                });
            }
            Op::Matmul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.nodes[a.0].value.values(), self.nodes[b.0].value.values());
                if let Some(da) = self.target(grads, *a) {
                    // dA += dC * B^T
                    if n == 1 {
                        for (darow, &g) in da.chunks_exact_mut(k).zip(gout) {
                            if g == T::zero() {
                                continue;
                            }
                            for (d, &bv) in darow.iter_mut().zip(vb) {
                                *d += g * bv;
                            }
                        }
                    } else {
                        for i in 0..m {
                            let grow = &gout[i * n..(i + 1) * n];
                            let darow = &mut da[i * k..(i + 1) * k];
                            for (kk, d) in darow.iter_mut().enumerate() {
                                let brow = &vb[kk * n..(kk + 1) * n];
                                let mut acc = T::zero();
                                for (g, bv) in grow.iter().zip(brow) {
                                    acc += *g * *bv;
                                }
                                *d += acc;
                            }
                        }
                    }
                }
                if let Some(db) = self.target(grads, *b) {
                    // dB += A^T * dC
                    if n == 1 {
                        for (arow, &g) in va.chunks_exact(k).zip(gout) {
                            if g == T::zero() {
                                continue;
                            }
                            for (d, &av) in db.iter_mut().zip(arow) {
                                *d += g * av;
                            }
                        }
                    } else {
                        for i in 0..m {
                            let grow = &gout[i * n..(i + 1) * n];
                            for kk in 0..k {
                                let aik = va[i * k + kk];
                                if aik == T::zero() {
                                    continue;
                                }
                                let dbrow = &mut db[kk * n..(kk + 1) * n];
                                for (d, &g) in dbrow.iter_mut().zip(grow) {
                                    *d += aik * g;
                                }
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xt = &self.nodes[x.0].value;
                let wt = &self.nodes[w.0].value;
                let out_shape = node.value.shape().to_vec();
                let x_shape = xt.shape().to_vec();
                if let Some(dx) = self.target(grads, *x) {
                    conv2d_backward_input(&x_shape, wt, gout, &out_shape, *stride, *pad, dx);
                }
                if let Some(dw) = self.target(grads, *w) {
                    conv2d_backward_kernel(xt, wt.shape(), gout, &out_shape, *stride, *pad, dw);
                }
            }
            Op::LeakyRelu(x, slope) => {
                let vx = self.nodes[x.0].value.values();
                let s = *slope;
                if let Some(g) = self.target(grads, *x) {
                    for ((gi, &go), &v) in g.iter_mut().zip(gout).zip(vx) {
                        *gi += if v >= T::zero() { go } else { go * s };
                    }
                }
            }
            Op::Tanh(x) => {
                let vy = node.value.values();
                if let Some(g) = self.target(grads, *x) {
                    for ((gi, &go), &y) in g.iter_mut().zip(gout).zip(vy) {
                        *gi += go * (T::one() - y * y);
                    }
                }
            }
            Op::Exp(x) => {
                let vy = node.value.values();
                if let Some(g) = self.target(grads, *x) {
                    for ((gi, &go), &y) in g.iter_mut().zip(gout).zip(vy) {
                        *gi += go * y;
                    }
                }
            }
            Op::Log(x) => {
                let vx = self.nodes[x.0].value.values();
                if let Some(g) = self.target(grads, *x) {
                    for ((gi, &go), &v) in g.iter_mut().zip(gout).zip(vx) {
                        *gi += go / v;
                    }
                }
            }
            Op::Abs(x) => {
                let vx = self.nodes[x.0].value.values();
                if let Some(g) = self.target(grads, *x) {
                    for ((gi, &go), &v) in g.iter_mut().zip(gout).zip(vx) {
                        let s = if v > T::zero() {
                            T::one()
                        } else if v < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *gi += go * s;
                    }
                }
            }
            Op::Square(x) => {
                let vx = self.nodes[x.0].value.values();
                let two = T::cst(2.0);
                if let Some(g) = self.target(grads, *x) {
                    for ((gi, &go), &v) in g.iter_mut().zip(gout).zip(vx) {
                        *gi += go * two * v;
                    }
                }
            }
            Op::Sqrt(x) => {
                let vy = node.value.values();
                let half = T::cst(0.5);
                if let Some(g) = self.target(grads, *x) {
                    for ((gi, &go), &y) in g.iter_mut().zip(gout).zip(vy) {
                        *gi += go * half / y;
                    }
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                if let Some(g) = self.target(grads, *x) {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go * c;
                    }
                }
            }
            Op::AddScalar(x, _) => {
                if let Some(g) = self.target(grads, *x) {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
            }
            Op::Sum(x) => {
                let go = gout[0];
                if let Some(g) = self.target(grads, *x) {
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                }
            }
            Op::Mean(x) => {
                let n = T::cst(self.nodes[x.0].value.numel() as f64);
                let go = gout[0] / n;
                if let Some(g) = self.target(grads, *x) {
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(g) = self.target(grads, *x) {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
            }
            Op::Broadcast(x) => {
                let src_shape = self.nodes[x.0].value.shape().to_vec();
                let dst_shape = node.value.shape().to_vec();
                if let Some(g) = self.target(grads, *x) {
                    broadcast_reduce_into(gout, &dst_shape, &src_shape, g);
                }
            }
            Op::Concat { axis, inputs } => {
                let out_shape = node.value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let out_row = out_shape[*axis] * inner;
                let mut offset = 0usize;
                for r in inputs {
                    let rows = self.nodes[r.0].value.shape()[*axis];
                    let chunk = rows * inner;
                    let off = offset;
                    if let Some(g) = self.target(grads, *r) {
                        for o in 0..outer {
                            let src = &gout[o * out_row + off..o * out_row + off + chunk];
                            for (gi, &c) in g[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *gi += c;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start, len } => {
                let s = self.nodes[input.0].value.shape().to_vec();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let (start, len, dim) = (*start, *len, s[*axis]);
                if let Some(g) = self.target(grads, *input) {
                    for o in 0..outer {
                        let dst = o * dim * inner + start * inner;
                        for (gi, &c) in g[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&gout[o * len * inner..(o + 1) * len * inner])
                        {
                            *gi += c;
                        }
                    }
                }
            }
            Op::Gather { input, indices } => {
                let inner: usize = self.nodes[input.0].value.shape()[1..].iter().product();
                if let Some(g) = self.target(grads, *input) {
                    for (kk, &i) in indices.iter().enumerate() {
                        for (gi, &c) in g[i * inner..(i + 1) * inner]
                            .iter_mut()
                            .zip(&gout[kk * inner..(kk + 1) * inner])
                        {
                            *gi += c;
                        }
                    }
                }
            }
            Op::UnaryMap { input, df } => {
                let vx = self.nodes[input.0].value.values();
                if let Some(g) = self.target(grads, *input) {
                    for ((gi, &go), &v) in g.iter_mut().zip(gout).zip(vx) {
                        *gi += go * df(v);
                    }
                }
            }
            Op::Custom { op, inputs, saved } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|r| &self.nodes[r.0].value).collect();
                let go = Tensor::new(node.value.shape(), gout.to_vec()).expect("grad shape");
                let contribs = op.backward(saved, &vals, &go);
                debug_assert_eq!(contribs.len(), inputs.len());
                for (r, contrib) in inputs.iter().zip(contribs) {
                    if let Some(c) = contrib {
                        if let Some(g) = self.target(grads, *r) {
                            for (gi, &cv) in g.iter_mut().zip(c.values()) {
                                *gi += cv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn pick<T: Real>(vals: &[T], i: usize) -> T {
    if vals.len() == 1 {
        vals[0]
    } else {
        vals[i]
    }
}


fn matmul_vals<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if n == 1 {
        // Matrix-vector: contiguous dot products.
        for (o, arow) in out.iter_mut().zip(a.chunks_exact(k)) {
            *o = arow.iter().zip(b).map(|(&x, &y)| x * y).sum();
        }
        return out;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            // Skinning weight matrices are sparse; skipping zeros is a large win.
            if aik == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// Output rows `ho` for which `ho*stride + k - pad` lands inside `[0, dim)`.
fn valid_out_range(k: usize, pad: usize, stride: usize, dim: usize, out_dim: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi_excl = if dim + pad > k {
        (((dim + pad - k - 1) / stride) + 1).min(out_dim)
    } else {
        0
    };
    (lo.min(hi_excl), hi_excl)
}

/// Unrolled patches: rows are (channel, kh, kw) taps, columns the output
/// positions. Contiguity makes every conv pass a plain matrix product.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    xplane: &[T],
    c: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut cols = vec![T::zero(); c * kh * kw * ho * wo];
    for ci in 0..c {
        let xc = &xplane[ci * h * wd..(ci + 1) * h * wd];
        for khi in 0..kh {
            let (ho_lo, ho_hi) = valid_out_range(khi, pad, stride, h, ho);
            for kwi in 0..kw {
                let row = ((ci * kh + khi) * kw + kwi) * ho * wo;
                let (wo_lo, wo_hi) = valid_out_range(kwi, pad, stride, wd, wo);
                if wo_lo >= wo_hi {
                    continue;
                }
                let iw0 = wo_lo * stride + kwi - pad;
                for hoi in ho_lo..ho_hi {
                    let ih = hoi * stride + khi - pad;
                    let src = &xc[ih * wd + iw0..(ih + 1) * wd];
                    let dst = &mut cols[row + hoi * wo + wo_lo..row + hoi * wo + wo_hi];
                    if stride == 1 {
                        dst.copy_from_slice(&src[..dst.len()]);
                    } else {
                        for (d, s) in dst.iter_mut().zip(src.iter().step_by(stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
    cols
}

fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Result<Tensor<T>, DiffError> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let xv = x.values();
    let wv = w.values();
    let taps = c * kh * kw;
    let hw = ho * wo;
    let mut out = vec![T::zero(); n * f * hw];
    for ni in 0..n {
        let cols = im2col(&xv[ni * c * h * wd..], c, h, wd, kh, kw, stride, pad, ho, wo);
        let y = matmul_vals(wv, &cols, f, taps, hw);
        out[ni * f * hw..(ni + 1) * f * hw].copy_from_slice(&y);
    }
    Tensor::new(&[n, f, ho, wo], out)
}

fn conv2d_backward_input<T: Real>(
    x_shape: &[usize],
    w: &Tensor<T>,
    gout: &[T],
    out_shape: &[usize],
    stride: usize,
    pad: usize,
    dx: &mut [T],
) {
    let (n, c, h, wd) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (f, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let wv = w.values();
    let taps = c * kh * kw;
    let hw = ho * wo;
    let mut dcols = vec![T::zero(); taps * hw];
    for ni in 0..n {
        // dcols = W^T dY: accumulate each output-channel row into the taps.
        for v in dcols.iter_mut() {
            *v = T::zero();
        }
        let gplane = &gout[ni * f * hw..(ni + 1) * f * hw];
        for fi in 0..f {
            let grow = &gplane[fi * hw..(fi + 1) * hw];
            let wrow = &wv[fi * taps..(fi + 1) * taps];
            for (r, &wval) in wrow.iter().enumerate() {
                if wval == T::zero() {
                    continue;
                }
                let drow = &mut dcols[r * hw..(r + 1) * hw];
                for (d, &g) in drow.iter_mut().zip(grow) {
                    *d += wval * g;
                }
            }
        }
        // col2im scatter-add back onto the input plane.
        let dxplane = &mut dx[ni * c * h * wd..(ni + 1) * c * h * wd];
        for ci in 0..c {
            let dxc = &mut dxplane[ci * h * wd..(ci + 1) * h * wd];
            for khi in 0..kh {
                let (ho_lo, ho_hi) = valid_out_range(khi, pad, stride, h, ho);
                for kwi in 0..kw {
                    let row = ((ci * kh + khi) * kw + kwi) * hw;
                    let (wo_lo, wo_hi) = valid_out_range(kwi, pad, stride, wd, wo);
                    if wo_lo >= wo_hi {
                        continue;
                    }
                    let iw0 = wo_lo * stride + kwi - pad;
                    for hoi in ho_lo..ho_hi {
                        let ih = hoi * stride + khi - pad;
                        let src = &dcols[row + hoi * wo + wo_lo..row + hoi * wo + wo_hi];
                        let dst = &mut dxc[ih * wd + iw0..(ih + 1) * wd];
                        for (d, &s) in dst.iter_mut().step_by(stride).zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_kernel<T: Real>(
    x: &Tensor<T>,
    w_shape: &[usize],
    gout: &[T],
    out_shape: &[usize],
    stride: usize,
    pad: usize,
    dw: &mut [T],
) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh, kw) = (w_shape[0], w_shape[2], w_shape[3]);
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let xv = x.values();
    let taps = c * kh * kw;
    let hw = ho * wo;
    for ni in 0..n {
        let cols = im2col(&xv[ni * c * h * wd..], c, h, wd, kh, kw, stride, pad, ho, wo);
        let gplane = &gout[ni * f * hw..(ni + 1) * f * hw];
        // dW[f, r] += dot(dY row f, cols row r): contiguous dots.
        for fi in 0..f {
            let grow = &gplane[fi * hw..(fi + 1) * hw];
            let dwrow = &mut dw[fi * taps..(fi + 1) * taps];
            for (r, d) in dwrow.iter_mut().enumerate() {
                let crow = &cols[r * hw..(r + 1) * hw];
                let mut acc = T::zero();
                for (&g, &cv) in grow.iter().zip(crow) {
                    acc += g * cv;
                }
                *d += acc;
            }
        }
    }
}

fn check_broadcastable(op: &'static str, src: &[usize], dst: &[usize]) -> Result<(), DiffError> {
    if src.len() > dst.len() {
        return Err(DiffError::shape(op, format!("{:?} has higher rank than target {:?}", src, dst)));
    }
    let offset = dst.len() - src.len();
    for (i, &s) in src.iter().enumerate() {
        let d = dst[offset + i];
        if s != d && s != 1 {
            return Err(DiffError::shape(op, format!("{:?} not broadcastable to {:?}", src, dst)));
        }
    }
    Ok(())
}

fn broadcast_src_strides(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let offset = dst.len() - src.len();
    let mut real = vec![1usize; src.len()];
    for i in (0..src.len().saturating_sub(1)).rev() {
        real[i] = real[i + 1] * src[i + 1];
    }
    let mut strides = vec![0usize; dst.len()];
    for i in 0..src.len() {
        strides[offset + i] = if src[i] == 1 { 0 } else { real[i] };
    }
    strides
}

fn broadcast_values<T: Real>(src: &Tensor<T>, dst_shape: &[usize]) -> Tensor<T> {
    let strides = broadcast_src_strides(src.shape(), dst_shape);
    let numel: usize = dst_shape.iter().product();
    let sv = src.values();
    let mut out = vec![T::zero(); numel];
    let mut coords = vec![0usize; dst_shape.len()];
    for slot in out.iter_mut() {
        let mut si = 0usize;
        for (c, s) in coords.iter().zip(&strides) {
            si += c * s;
        }
        *slot = sv[si];
        for ax in (0..dst_shape.len()).rev() {
            coords[ax] += 1;
            if coords[ax] < dst_shape[ax] {
                break;
            }
            coords[ax] = 0;
        }
    }
    Tensor::new(dst_shape, out).expect("broadcast shape")
}

fn broadcast_reduce_into<T: Real>(gout: &[T], dst_shape: &[usize], src_shape: &[usize], out: &mut [T]) {
    let strides = broadcast_src_strides(src_shape, dst_shape);
    let mut coords = vec![0usize; dst_shape.len()];
    for &g in gout {
        let mut si = 0usize;
        for (c, s) in coords.iter().zip(&strides) {
            si += c * s;
        }
        out[si] += g;
        for ax in (0..dst_shape.len()).rev() {
            coords[ax] += 1;
            if coords[ax] < dst_shape[ax] {
                break;
            }
            coords[ax] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type G = Graph<f64>;

    #[test]
    fn matmul_shape_rule() {
        let mut g = G::new();
        let a = g.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = g.constant(Tensor::new(&[3, 1], vec![1.0, 1.0, 1.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c).values(), &[6.0, 15.0]);
    }

    #[test]
    fn matmul_rejects_mismatch_naming_op() {
        let mut g = G::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
    }

    #[test]
    fn leaky_relu_negative_slope() {
        let mut g = G::new();
        let x = g.constant(Tensor::from_vec(vec![-1.0, 2.0]));
        let y = g.leaky_relu(x, 0.01);
        assert_eq!(g.value(y).values(), &[-0.01, 2.0]);
    }

    #[test]
    fn conv_all_ones_center_is_nine() {
        // Hand summation: full 3x3 overlap of an all-ones kernel on an
        // all-ones image is 9; corners overlap 4 cells, edges 6.
        let mut g = G::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        let v = g.value(y).values();
        assert_eq!(v[4], 9.0);
        assert_eq!(v[0], 4.0);
        assert_eq!(v[1], 6.0);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = G::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let sq = g.square(x);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().values(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_constant_loss_gives_zero_grads() {
        let mut g = G::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let loss = g.scalar_const(5.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().values(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = G::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.square(x);
        assert!(matches!(g.backward(y), Err(DiffError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_is_linear_in_loss() {
        // backward(a*L1 + b*L2) == a*backward(L1) + b*backward(L2)
        let xs = vec![0.3, -1.2, 2.5];
        let (a, b) = (1.7, -0.6);

        let run = |mode: u8| -> Vec<f64> {
            let mut g = G::new();
            let x = g.param(Tensor::from_vec(xs.clone()));
            let sq = g.square(x);
            let l1 = g.sum(sq);
            let e = g.exp(x);
            let l2 = g.mean(e).unwrap();
            let loss = match mode {
                0 => l1,
                1 => l2,
                _ => {
                    let s1 = g.scale(l1, a);
                    let s2 = g.scale(l2, b);
                    g.add(s1, s2).unwrap()
                }
            };
            g.backward(loss).unwrap().get(x).unwrap().values().to_vec()
        };

        let g1 = run(0);
        let g2 = run(1);
        let gc = run(2);
        for i in 0..xs.len() {
            assert!((gc[i] - (a * g1[i] + b * g2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn slice_concat_roundtrip_gradient() {
        let mut g = G::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let lo = g.slice(x, 0, 0, 2).unwrap();
        let hi = g.slice(x, 0, 2, 2).unwrap();
        let back = g.concat(&[hi, lo], 0).unwrap();
        assert_eq!(g.value(back).values(), &[3.0, 4.0, 1.0, 2.0]);
        let s = g.sum(back);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().values(), &[1.0; 4]);
    }

    #[test]
    fn broadcast_forward_and_reduce() {
        let mut g = G::new();
        let row = g.param(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let b = g.broadcast(row, &[2, 3]).unwrap();
        assert_eq!(g.value(b).values(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = g.sum(b);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(row).unwrap().values(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let mut g = G::new();
        let x = g.param(Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let picked = g.gather(x, Arc::new(vec![2, 0, 2])).unwrap();
        assert_eq!(g.value(picked).values(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = g.sum(picked);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().values(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut g = G::new();
            let x = g.constant(Tensor::from_fn(&[4, 4], |i| (i as f64 * 0.37).sin()));
            let w = g.constant(Tensor::from_fn(&[4, 4], |i| (i as f64 * 0.11).cos()));
            let y = g.matmul(x, w).unwrap();
            let t = g.tanh(y);
            g.value(t).values().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn f32_graph_works() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0f32, -2.0]));
        let y = g.square(x);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().values(), &[2.0f32, -4.0]);
    }
}
