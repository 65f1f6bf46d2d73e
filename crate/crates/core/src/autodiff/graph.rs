use std::borrow::Cow;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero fill so the output keeps the input's spatial extent.
    Same,
    /// No padding; output extent is `H - k + 1`.
    Valid,
}

/// Deliberate backward-rule corruption, used to prove the gradient checker
/// actually catches broken rules.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    FlipConvKernelGrad,
}

const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_area(&self) -> usize {
        self.h_out * self.w_out
    }

    /// A 1×1 unpadded convolution reads the input directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sum { a: Var },
    Reshape { a: Var },
    Conv2d { input: Var, kernels: Var, bias: Var, geom: ConvGeom, cols: Vec<T> },
    MaxPool { input: Var, argmax: Vec<u32> },
    Relu { a: Var },
    Sigmoid { a: Var },
    Softmax { a: Var },
    SliceMean { a: Var, area: usize },
    ScaleSlices { x: Var, u: Var, area: usize },
    Concat { parts: Vec<Var> },
    Dropout { a: Var, mask: Vec<T> },
    CrossEntropy { probs: Var, target: usize },
}

struct Node<'a, T: Scalar> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape. Leaves may borrow parameter storage for `'a`.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); len],
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Accumulates the gradient of `v` into `tensor.grad`.
    pub fn write_to(&self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => tensor.accumulate_grad(&vec![T::zero(); tensor.len()]),
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn check_finite<T: Scalar>(values: &[T], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(what))
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
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

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Which side of every non-differentiable point the tape sits on: the
    /// sign of each ReLU input and each max-pool argmax, in tape order.
    pub fn switch_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { a } => out.extend(self.value(*a).iter().map(|&v| u32::from(v > T::zero()))),
                Op::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        Tensor::new(&node.shape, node.value.to_vec()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [T]>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that borrows the tensor's storage; gradient tracking follows
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &'a Tensor<T>) -> Var {
        self.push(
            tensor.shape().to_vec(),
            Cow::Borrowed(tensor.data()),
            Op::Leaf,
            tensor.requires_grad,
        )
    }

    /// Leaf that takes ownership of the tensor.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad;
        let shape = tensor.shape().to_vec();
        self.push(shape, Cow::Owned(tensor.into_data()), Op::Leaf, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Elementwise sum of two tensors with the same number of elements; the
    /// result takes `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::dim(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Add { a, b }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "reshape {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), Cow::Owned(value), Op::Reshape { a }, rg))
    }

    /// Cross-correlation (no kernel flip) of `input [C_in×H×W]` with
    /// `kernels [C_out×C_in×k×k]` plus a per-channel `bias [C_out]`.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, padding: Padding) -> Result<Var> {
        let (si, sk, sb) = (self.shape(input), self.shape(kernels), self.shape(bias));
        if si.len() != 3 || sk.len() != 4 {
            return Err(Error::dim(format!("conv2d input {si:?} with kernels {sk:?}")));
        }
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let (c_out, k) = (sk[0], sk[2]);
        if sk[1] != c_in {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input {si:?}, kernels {sk:?}"
            )));
        }
        if sk[3] != k || k % 2 == 0 {
            return Err(Error::dim(format!("conv2d needs square odd kernels, got {sk:?}")));
        }
        if numel(sb) != c_out {
            return Err(Error::dim(format!("conv2d bias {sb:?} for {c_out} output channels")));
        }
        let pad = match padding {
            Padding::Same => k / 2,
            Padding::Valid => 0,
        };
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim(format!("conv2d kernel {k} larger than input {si:?}")));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            pad,
            h_out: h + 2 * pad - k + 1,
            w_out: w + 2 * pad - k + 1,
        };
        let cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            im2col(self.value(input), &geom)
        };
        let area = geom.out_area();
        let mut out = vec![T::zero(); c_out * area];
        {
            let col_src: &[T] = if geom.is_pointwise() {
                self.value(input)
            } else {
                &cols
            };
            let plen = geom.patch_len();
            T::gemm(
                c_out,
                plen,
                area,
                T::one(),
                self.value(kernels),
                (plen as isize, 1),
                col_src,
                (area as isize, 1),
                T::zero(),
                &mut out,
                (area as isize, 1),
            );
        }
        for (row, &b) in out.chunks_exact_mut(area).zip(self.value(bias)) {
            row.iter_mut().for_each(|v| *v = *v + b);
        }
        let rg = self.rg(&[input, kernels, bias]);
        // columns are only needed when the kernel gradient will be computed
        let cols = if self.requires_grad(kernels) { cols } else { Vec::new() };
        Ok(self.push(
            vec![c_out, geom.h_out, geom.w_out],
            Cow::Owned(out),
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// 2×2 max-pooling with stride 2; a trailing odd row/column is dropped.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return Err(Error::dim(format!("maxpool2d needs C×H×W with H,W ≥ 2, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(input);
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(vec![c, ho, wo], Cow::Owned(out), Op::MaxPool { input, argmax }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        check_finite(self.value(a), "relu input")?;
        let out: Vec<T> = self.value(a).iter().map(|&v| v.max(T::zero())).collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Relu { a }, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        check_finite(self.value(a), "sigmoid input")?;
        let out: Vec<T> = self
            .value(a)
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Sigmoid { a }, rg))
    }

    /// Softmax over all elements, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        check_finite(x, "softmax input")?;
        let max = x.iter().copied().fold(T::neg_infinity(), T::max);
        let mut out: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
        let z: T = out.iter().copied().sum();
        out.iter_mut().for_each(|v| *v = *v / z);
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Softmax { a }, rg))
    }

    /// Mean over each slice of `x [L×H×W]`, giving `[L]`.
    pub fn slice_mean(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::dim(format!("slice_mean needs L×H×W, got {s:?}")));
        }
        let (l, area) = (s[0], s[1] * s[2]);
        let scale = T::one() / T::from_f64(area as f64);
        let out: Vec<T> = self
            .value(x)
            .chunks_exact(area)
            .map(|sl| sl.iter().copied().sum::<T>() * scale)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![l], Cow::Owned(out), Op::SliceMean { a: x, area }, rg))
    }

    /// Multiplies slice `l` of `x [L×H×W]` by `u[l]`.
    pub fn scale_slices(&mut self, x: Var, u: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || self.value(u).len() != s[0] {
            return Err(Error::dim(format!(
                "scale_slices of {s:?} by {:?}",
                self.shape(u)
            )));
        }
        let area = s[1] * s[2];
        let mut out = self.value(x).to_vec();
        for (sl, &f) in out.chunks_exact_mut(area).zip(self.value(u)) {
            sl.iter_mut().for_each(|v| *v = *v * f);
        }
        let rg = self.rg(&[x, u]);
        let shape = s.to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::ScaleSlices { x, u, area }, rg))
    }

    /// Channel-axis concatenation of `[Cᵢ×H×W]` parts, in the given order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_channels of zero parts"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 3 {
            return Err(Error::dim(format!("concat_channels needs C×H×W, got {s0:?}")));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[1] != s0[1] || s[2] != s0[2] {
                return Err(Error::dim(format!("concat_channels of {s0:?} and {s:?}")));
            }
            channels += s[0];
        }
        let mut out = Vec::with_capacity(channels * s0[1] * s0[2]);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(
            vec![channels, s0[1], s0[2]],
            Cow::Owned(out),
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity (same `Var`) when `p == 0` or not training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Usage(format!("dropout probability {p} not in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Dropout { a, mask }, rg))
    }

    /// `-ln(max(probs[target], 1e-12))` as a `[1]` tensor.
    pub fn cross_entropy(&mut self, probs: Var, target: usize) -> Result<Var> {
        let p = self.value(probs);
        if target >= p.len() {
            return Err(Error::Index {
                what: "class probabilities",
                index: target,
                len: p.len(),
            });
        }
        let clamped = p[target].max(T::from_f64(LOG_CLAMP));
        let loss = -clamped.ln();
        let rg = self.rg(&[probs]);
        Ok(self.push(vec![1], Cow::Owned(vec![loss]), Op::CrossEntropy { probs, target }, rg))
    }

    /// Reverse pass from a scalar `loss`; gradients add up across multiple uses.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| -> &[T] { &self.nodes[v.0].value };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if rg(a) {
                    let ga = accumulate(grads, a, m * k);
                    T::gemm(m, n, k, T::one(), g, (n as isize, 1), val(b), (1, n as isize), T::one(), ga, (k as isize, 1));
                }
                if rg(b) {
                    let gb = accumulate(grads, b, k * n);
                    T::gemm(k, m, n, T::one(), val(a), (1, k as isize), g, (n as isize, 1), T::one(), gb, (n as isize, 1));
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if rg(v) {
                        let gv = accumulate(grads, v, g.len());
                        gv.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            &Op::Sum { a } => {
                let n = val(a).len();
                let ga = accumulate(grads, a, n);
                ga.iter_mut().for_each(|x| *x = *x + g[0]);
            }
            &Op::Reshape { a } => {
                let ga = accumulate(grads, a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
                cols,
            } => self.conv_backward(*input, *kernels, *bias, geom, cols, g, grads),
            Op::MaxPool { input, argmax } => {
                let n = val(*input).len();
                let gi = accumulate(grads, *input, n);
                for (&idx, &gv) in argmax.iter().zip(g) {
                    gi[idx as usize] = gi[idx as usize] + gv;
                }
            }
            &Op::Relu { a } => {
                let x = val(a);
                let ga = accumulate(grads, a, g.len());
                for ((acc, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                    if xv > T::zero() {
                        *acc = *acc + gv;
                    }
                }
            }
            &Op::Sigmoid { a } => {
                let ga = accumulate(grads, a, g.len());
                for ((acc, &gv), &s) in ga.iter_mut().zip(g).zip(node.value.iter()) {
                    *acc = *acc + gv * s * (T::one() - s);
                }
            }
            &Op::Softmax { a } => {
                let p = &node.value;
                let dot: T = g.iter().zip(p.iter()).map(|(&gv, &pv)| gv * pv).sum();
                let ga = accumulate(grads, a, g.len());
                for ((acc, &gv), &pv) in ga.iter_mut().zip(g).zip(p.iter()) {
                    *acc = *acc + pv * (gv - dot);
                }
            }
            &Op::SliceMean { a, area } => {
                let scale = T::one() / T::from_f64(area as f64);
                let n = val(a).len();
                let ga = accumulate(grads, a, n);
                for (sl, &gv) in ga.chunks_exact_mut(area).zip(g) {
                    let d = gv * scale;
                    sl.iter_mut().for_each(|x| *x = *x + d);
                }
            }
            &Op::ScaleSlices { x, u, area } => {
                if rg(x) {
                    let uval = val(u);
                    let gx = accumulate(grads, x, g.len());
                    for ((sl, gs), &f) in gx.chunks_exact_mut(area).zip(g.chunks_exact(area)).zip(uval) {
                        sl.iter_mut().zip(gs).for_each(|(acc, &gv)| *acc = *acc + gv * f);
                    }
                }
                if rg(u) {
                    let xval = val(x);
                    let l = val(u).len();
                    let gu = accumulate(grads, u, l);
                    for ((acc, gs), xs) in gu.iter_mut().zip(g.chunks_exact(area)).zip(xval.chunks_exact(area)) {
                        let d: T = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum();
                        *acc = *acc + d;
                    }
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if rg(p) {
                        let gp = accumulate(grads, p, n);
                        gp.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(acc, &gv)| *acc = *acc + gv);
                    }
                    offset += n;
                }
            }
            Op::Dropout { a, mask } => {
                let ga = accumulate(grads, *a, g.len());
                for ((acc, &gv), &m) in ga.iter_mut().zip(g).zip(mask) {
                    *acc = *acc + gv * m;
                }
            }
            &Op::CrossEntropy { probs, target } => {
                let p = val(probs);
                let clamp = T::from_f64(LOG_CLAMP);
                // softmax followed by cross-entropy: push p - onehot straight to the logits
                if let Op::Softmax { a: logits } = self.nodes[probs.0].op {
                    if rg(logits) {
                        let gl = accumulate(grads, logits, p.len());
                        for (j, (acc, &pv)) in gl.iter_mut().zip(p).enumerate() {
                            let y = if j == target { T::one() } else { T::zero() };
                            *acc = *acc + g[0] * (pv - y);
                        }
                    }
                } else if p[target] >= clamp {
                    let gp = accumulate(grads, probs, p.len());
                    gp[target] = gp[target] - g[0] / p[target];
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        input: Var,
        kernels: Var,
        bias: Var,
        geom: &ConvGeom,
        cols: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let area = geom.out_area();
        let plen = geom.patch_len();
        if self.nodes[bias.0].requires_grad {
            let gb = accumulate(grads, bias, geom.c_out);
            for (acc, row) in gb.iter_mut().zip(g.chunks_exact(area)) {
                *acc = *acc + row.iter().copied().sum::<T>();
            }
        }
        if self.nodes[kernels.0].requires_grad {
            let col_src: &[T] = if geom.is_pointwise() {
                &self.nodes[input.0].value
            } else {
                cols
            };
            let alpha = match self.fault {
                Some(Fault::FlipConvKernelGrad) => -T::one(),
                None => T::one(),
            };
            let gk = accumulate(grads, kernels, geom.c_out * plen);
            T::gemm(
                geom.c_out,
                area,
                plen,
                alpha,
                g,
                (area as isize, 1),
                col_src,
                (1, area as isize),
                T::one(),
                gk,
                (plen as isize, 1),
            );
        }
        if self.nodes[input.0].requires_grad {
            let kv = &self.nodes[kernels.0].value;
            let n_in = geom.c_in * geom.h * geom.w;
            if geom.is_pointwise() {
                let gi = accumulate(grads, input, n_in);
                T::gemm(plen, geom.c_out, area, T::one(), kv, (1, plen as isize), g, (area as isize, 1), T::one(), gi, (area as isize, 1));
            } else {
                let mut dcols = vec![T::zero(); plen * area];
                T::gemm(plen, geom.c_out, area, T::one(), kv, (1, plen as isize), g, (area as isize, 1), T::zero(), &mut dcols, (area as isize, 1));
                let gi = accumulate(grads, input, n_in);
                col2im(&dcols, geom, gi);
            }
        }
    }
}

/// Rows of the result index `(channel, ky, kx)`, columns index output pixels.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let area = g.out_area();
    let mut cols = vec![T::zero(); g.patch_len() * area];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * area..(row + 1) * area];
                for oy in 0..g.h_out {
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let src_row = &x[(c * g.h + iy - g.pad) * g.w..][..g.w];
                    let dst_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = ox + kx;
                        if ix >= g.pad && ix - g.pad < g.w {
                            *d = src_row[ix - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, out: &mut [T]) {
    let area = g.out_area();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * area..(row + 1) * area];
                for oy in 0..g.h_out {
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let dst_row = &mut out[(c * g.h + iy - g.pad) * g.w..][..g.w];
                    let src_row = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, &s) in src_row.iter().enumerate() {
                        let ix = ox + kx;
                        if ix >= g.pad && ix - g.pad < g.w {
                            dst_row[ix - g.pad] = dst_row[ix - g.pad] + s;
                        }
                    }
                }
            }
        }
    }
}
