//! Reverse-mode automatic differentiation on an execution tape.
//!
//! Operations execute eagerly and record what backward needs. One tape per
//! training step; a tape is never shared between threads.

use crate::diffcore::Tensor;
use crate::mixture::DensityKind;
use crate::real::Real;

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node<R: Real> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
}

enum Op<R: Real> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, ksize: usize, stride: usize },
    Swish { x: Var },
    Tanh { x: Var },
    Softplus { x: Var },
    SoftmaxLast { x: Var },
    SoftmaxFlat { x: Var },
    Upsample2x { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: R },
    AddConst { x: Var },
    Reshape { x: Var },
    SliceLast { x: Var, from: usize, to: usize },
    ConcatLast { xs: Vec<Var> },
    ConcatFlat { xs: Vec<Var> },
    Sum { x: Var },
    StopGrad,
    MaxScalar { x: Var, floor: R },
    MixtureNll {
        mu: Var,
        gamma: Var,
        pi: Var,
        /// Class-probability map; present only for the complete-model loss.
        p: Option<Var>,
        /// One entry per target: four coordinates plus a class id (unused
        /// when `p` is None).
        targets: Vec<([R; 4], usize)>,
        kind: DensityKind,
    },
}

pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
}

/// Gradients produced by one backward pass, indexed by `Var`.
pub struct Gradients<R> {
    grads: Vec<Vec<R>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of the loss w.r.t. `var`. Zero-filled for tensors the loss
    /// does not depend on.
    pub fn get(&self, var: Var) -> &[R] {
        &self.grads[var.0]
    }
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// 2-D cross-correlation with SAME padding. Input `[h, w, cin]`, kernel
    /// `[k, k, cin, cout]`, bias `[cout]`; output `[ceil(h/s), ceil(w/s), cout]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Var {
        let (ish, ksh) = (self.value(input).shape().to_vec(), self.value(kernel).shape().to_vec());
        assert_eq!(ish.len(), 3, "conv input must be h x w x c");
        assert_eq!(ksh.len(), 4, "conv kernel must be k x k x cin x cout");
        let k = ksh[0];
        assert!(k == 1 || k == 3, "kernel size must be 1 or 3");
        assert_eq!(ksh[0], ksh[1]);
        assert_eq!(ish[2], ksh[2], "input/kernel channel mismatch");
        assert_eq!(self.value(bias).shape(), &[ksh[3]], "bias shape mismatch");
        assert!(stride == 1 || stride == 2);

        let (h, w, cin, cout) = (ish[0], ish[1], ish[2], ksh[3]);
        let (ho, wo) = ((h + stride - 1) / stride, (w + stride - 1) / stride);
        let (pad_y, pad_x) = (same_pad(h, ho, k, stride), same_pad(w, wo, k, stride));

        let mut out = vec![R::zero(); ho * wo * cout];
        {
            let inp = self.value(input).data();
            let ker = self.value(kernel).data();
            let b = self.value(bias).data();
            for oy in 0..ho {
                for ox in 0..wo {
                    let out_off = (oy * wo + ox) * cout;
                    out[out_off..out_off + cout].copy_from_slice(b);
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad_y as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad_x as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let in_off = (iy as usize * w + ix as usize) * cin;
                            for ci in 0..cin {
                                let v = inp[in_off + ci];
                                let w_off = ((ky * k + kx) * cin + ci) * cout;
                                for co in 0..cout {
                                    out[out_off + co] = out[out_off + co] + v * ker[w_off + co];
                                }
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        self.push(
            Tensor::from_vec(vec![ho, wo, cout], out),
            Op::Conv2d { input, kernel, bias, ksize: k, stride },
            needs,
        )
    }

    pub fn swish(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Swish { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus_stable, Op::Softplus { x })
    }

    fn unary(&mut self, x: Var, f: impl Fn(R) -> R, op: Op<R>) -> Var {
        let value = Tensor::from_vec(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|&v| f(v)).collect(),
        );
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    /// Softmax over the last dimension (exp-normalize with max subtraction).
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let c = *shape.last().expect("softmax needs at least one dim");
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(shape, data), Op::SoftmaxLast { x }, needs)
    }

    /// Softmax over every element of the tensor jointly.
    pub fn softmax_flat(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let mut data = self.value(x).data().to_vec();
        softmax_in_place(&mut data);
        let needs = self.needs(x);
        self.push(Tensor::from_vec(shape, data), Op::SoftmaxFlat { x }, needs)
    }

    /// Nearest-neighbour 2x spatial upsampling of an `[h, w, c]` tensor.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let sh = self.value(x).shape().to_vec();
        let (h, w, c) = (sh[0], sh[1], sh[2]);
        let mut out = vec![R::zero(); 4 * h * w * c];
        {
            let inp = self.value(x).data();
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let src = ((y / 2) * w + xx / 2) * c;
                    let dst = (y * 2 * w + xx) * c;
                    out[dst..dst + c].copy_from_slice(&inp[src..src + c]);
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(vec![2 * h, 2 * w, c], out), Op::Upsample2x { x }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(R, R) -> R, op: Op<R>) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(shape, data), op, needs)
    }

    pub fn scale(&mut self, x: Var, factor: R) -> Var {
        self.unary(x, |v| v * factor, Op::Scale { x, factor })
    }

    /// Add a constant tensor (no gradient flows into the constant).
    pub fn add_const(&mut self, x: Var, c: &Tensor<R>) -> Var {
        assert_eq!(self.value(x).shape(), c.shape(), "shape mismatch");
        let data =
            self.value(x).data().iter().zip(c.data()).map(|(&a, &b)| a + b).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_vec(shape, data), Op::AddConst { x }, needs)
    }

    /// Slice channels `[from, to)` of the last dimension.
    pub fn slice_last(&mut self, x: Var, from: usize, to: usize) -> Var {
        let mut shape = self.value(x).shape().to_vec();
        let c = *shape.last().unwrap();
        assert!(from < to && to <= c);
        let width = to - from;
        let data: Vec<R> = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row[from..to].iter().copied())
            .collect();
        *shape.last_mut().unwrap() = width;
        let needs = self.needs(x);
        self.push(Tensor::from_vec(shape, data), Op::SliceLast { x, from, to }, needs)
    }

    /// Concatenate along the last dimension; leading dims must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let lead = self.value(xs[0]).shape()[..self.value(xs[0]).shape().len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> =
            xs.iter().map(|&v| *self.value(v).shape().last().unwrap()).collect();
        for &v in xs {
            assert_eq!(&self.value(v).shape()[..lead.len()], lead.as_slice());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (i, &v) in xs.iter().enumerate() {
                let d = self.value(v).data();
                data.extend_from_slice(&d[r * widths[i]..(r + 1) * widths[i]]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let needs = xs.iter().any(|&v| self.needs(v));
        self.push(Tensor::from_vec(shape, data), Op::ConcatLast { xs: xs.to_vec() }, needs)
    }

    /// Flatten each input and concatenate into one vector.
    pub fn concat_flat(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let mut data = Vec::new();
        for &v in xs {
            data.extend_from_slice(self.value(v).data());
        }
        let n = data.len();
        let needs = xs.iter().any(|&v| self.needs(v));
        self.push(Tensor::from_vec(vec![n], data), Op::ConcatFlat { xs: xs.to_vec() }, needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: R = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, needs)
    }

    /// View with a new shape; element count must be unchanged.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let value = Tensor::from_vec(shape, self.value(x).data().to_vec());
        let needs = self.needs(x);
        self.push(value, Op::Reshape { x }, needs)
    }

    /// Value-identical tensor through which backward propagates nothing.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGrad, false)
    }

    /// Elementwise max(x, floor).
    pub fn max_scalar(&mut self, x: Var, floor: R) -> Var {
        self.unary(x, |v| v.max(floor), Op::MaxScalar { x, floor })
    }

    /// Negative mean mixture log-likelihood of target boxes under the
    /// coordinate mixture (pi, mu, gamma), via log-sum-exp.
    pub fn mixture_coord_nll(
        &mut self,
        mu: Var,
        gamma: Var,
        pi: Var,
        targets: &[[R; 4]],
        kind: DensityKind,
    ) -> Var {
        let targets: Vec<([R; 4], usize)> = targets.iter().map(|&c| (c, 0)).collect();
        self.mixture_nll_node(mu, gamma, pi, None, targets, kind)
    }

    /// Negative mean log-likelihood of labeled boxes under the complete
    /// mixture including the categorical class factor.
    pub fn mixture_full_nll(
        &mut self,
        mu: Var,
        gamma: Var,
        pi: Var,
        p: Var,
        targets: &[([R; 4], usize)],
        kind: DensityKind,
    ) -> Var {
        self.mixture_nll_node(mu, gamma, pi, Some(p), targets.to_vec(), kind)
    }

    fn mixture_nll_node(
        &mut self,
        mu: Var,
        gamma: Var,
        pi: Var,
        p: Option<Var>,
        targets: Vec<([R; 4], usize)>,
        kind: DensityKind,
    ) -> Var {
        assert!(!targets.is_empty(), "mixture NLL needs at least one target");
        let k = self.value(pi).numel();
        assert_eq!(self.value(mu).numel(), k * 4);
        assert_eq!(self.value(gamma).numel(), k * 4);
        let loss = {
            let mu_d = self.value(mu).data();
            let ga_d = self.value(gamma).data();
            let pi_d = self.value(pi).data();
            let p_d = p.map(|v| self.value(v));
            let mut total = R::zero();
            for (coords, class) in &targets {
                let terms = mixture_log_terms(kind, *coords, *class, mu_d, ga_d, pi_d, p_d);
                total = total + crate::mixture::log_sum_exp(&terms);
            }
            -(total / R::from_f64_lossy(targets.len() as f64))
        };
        let needs = self.needs(mu)
            || self.needs(gamma)
            || self.needs(pi)
            || p.map(|v| self.needs(v)).unwrap_or(false);
        self.push(
            Tensor::scalar(loss),
            Op::MixtureNll { mu, gamma, pi, p, targets, kind },
            needs,
        )
    }

    /// Reverse pass from a scalar loss. Returns d(loss)/d(tensor) for every
    /// recorded tensor; entries for tensors without a grad path are zeros.
    pub fn backward(&self, loss: Var) -> Gradients<R> {
        assert_eq!(self.value(loss).numel(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Vec<R>> = self
            .nodes
            .iter()
            .map(|n| vec![R::zero(); n.value.numel()])
            .collect();
        grads[loss.0][0] = R::one();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad && i != loss.0 {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            self.accumulate_inputs(i, &g, &mut grads);
            grads[i] = g;
        }
        Gradients { grads }
    }

    fn accumulate_inputs(&self, i: usize, g: &[R], grads: &mut [Vec<R>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Conv2d { input, kernel, bias, ksize, stride } => {
                self.conv2d_backward(*input, *kernel, *bias, *ksize, *stride, &node.value, g, grads);
            }
            Op::Swish { x } => {
                let xd = self.value(*x).data();
                for (j, gx) in grads[x.0].iter_mut().enumerate() {
                    let s = sigmoid(xd[j]);
                    *gx = *gx + g[j] * s * (R::one() + xd[j] * (R::one() - s));
                }
            }
            Op::Tanh { x } => {
                let yd = node.value.data();
                for (j, gx) in grads[x.0].iter_mut().enumerate() {
                    *gx = *gx + g[j] * (R::one() - yd[j] * yd[j]);
                }
            }
            Op::Softplus { x } => {
                let xd = self.value(*x).data();
                for (j, gx) in grads[x.0].iter_mut().enumerate() {
                    *gx = *gx + g[j] * sigmoid(xd[j]);
                }
            }
            Op::SoftmaxLast { x } => {
                let c = *node.value.shape().last().unwrap();
                let yd = node.value.data();
                let gx = &mut grads[x.0];
                for r in 0..yd.len() / c {
                    let off = r * c;
                    let dot: R = (0..c).map(|j| g[off + j] * yd[off + j]).sum();
                    for j in 0..c {
                        gx[off + j] = gx[off + j] + yd[off + j] * (g[off + j] - dot);
                    }
                }
            }
            Op::SoftmaxFlat { x } => {
                let yd = node.value.data();
                let dot: R = yd.iter().zip(g).map(|(&y, &gv)| y * gv).sum();
                for (j, gx) in grads[x.0].iter_mut().enumerate() {
                    *gx = *gx + yd[j] * (g[j] - dot);
                }
            }
            Op::Upsample2x { x } => {
                let sh = self.value(*x).shape();
                let (h, w, c) = (sh[0], sh[1], sh[2]);
                let gx = &mut grads[x.0];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        let src = ((y / 2) * w + xx / 2) * c;
                        let dst = (y * 2 * w + xx) * c;
                        for ch in 0..c {
                            gx[src + ch] = gx[src + ch] + g[dst + ch];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for (j, &gv) in g.iter().enumerate() {
                    grads[a.0][j] = grads[a.0][j] + gv;
                }
                for (j, &gv) in g.iter().enumerate() {
                    grads[b.0][j] = grads[b.0][j] + gv;
                }
            }
            Op::Sub { a, b } => {
                for (j, &gv) in g.iter().enumerate() {
                    grads[a.0][j] = grads[a.0][j] + gv;
                }
                for (j, &gv) in g.iter().enumerate() {
                    grads[b.0][j] = grads[b.0][j] - gv;
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                for (j, &gv) in g.iter().enumerate() {
                    grads[a.0][j] = grads[a.0][j] + gv * bd[j];
                }
                for (j, &gv) in g.iter().enumerate() {
                    grads[b.0][j] = grads[b.0][j] + gv * ad[j];
                }
            }
            Op::Scale { x, factor } => {
                for (j, &gv) in g.iter().enumerate() {
                    grads[x.0][j] = grads[x.0][j] + gv * *factor;
                }
            }
            Op::AddConst { x } | Op::Reshape { x } => {
                for (j, &gv) in g.iter().enumerate() {
                    grads[x.0][j] = grads[x.0][j] + gv;
                }
            }
            Op::SliceLast { x, from, to } => {
                let c = *self.value(*x).shape().last().unwrap();
                let width = to - from;
                let gx = &mut grads[x.0];
                for (r, row) in g.chunks(width).enumerate() {
                    for (j, &gv) in row.iter().enumerate() {
                        gx[r * c + from + j] = gx[r * c + from + j] + gv;
                    }
                }
            }
            Op::ConcatLast { xs } => {
                let widths: Vec<usize> =
                    xs.iter().map(|&v| *self.value(v).shape().last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                for r in 0..rows {
                    let mut off = 0;
                    for (i, &v) in xs.iter().enumerate() {
                        let gx = &mut grads[v.0];
                        for j in 0..widths[i] {
                            gx[r * widths[i] + j] =
                                gx[r * widths[i] + j] + g[r * total + off + j];
                        }
                        off += widths[i];
                    }
                }
            }
            Op::ConcatFlat { xs } => {
                let mut off = 0;
                for &v in xs {
                    let n = self.value(v).numel();
                    let gx = &mut grads[v.0];
                    for j in 0..n {
                        gx[j] = gx[j] + g[off + j];
                    }
                    off += n;
                }
            }
            Op::Sum { x } => {
                let gv = g[0];
                for gx in grads[x.0].iter_mut() {
                    *gx = *gx + gv;
                }
            }
            Op::MaxScalar { x, floor } => {
                let xd = self.value(*x).data();
                for (j, gx) in grads[x.0].iter_mut().enumerate() {
                    if xd[j] > *floor {
                        *gx = *gx + g[j];
                    }
                }
            }
            Op::MixtureNll { mu, gamma, pi, p, targets, kind } => {
                self.mixture_nll_backward(*mu, *gamma, *pi, *p, targets, *kind, g[0], grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        input: Var,
        kernel: Var,
        bias: Var,
        k: usize,
        stride: usize,
        out: &Tensor<R>,
        g: &[R],
        grads: &mut [Vec<R>],
    ) {
        let ish = self.value(input).shape().to_vec();
        let (h, w, cin) = (ish[0], ish[1], ish[2]);
        let (ho, wo, cout) = (out.shape()[0], out.shape()[1], out.shape()[2]);
        let (pad_y, pad_x) = (same_pad(h, ho, k, stride), same_pad(w, wo, k, stride));
        let inp = self.value(input).data();
        let ker = self.value(kernel).data();

        {
            let gb = &mut grads[bias.0];
            for chunk in g.chunks(cout) {
                for (co, &gv) in chunk.iter().enumerate() {
                    gb[co] = gb[co] + gv;
                }
            }
        }

        // Split the grads slice so input and kernel accumulators can be
        // held mutably at the same time.
        let (gi_idx, gk_idx) = (input.0, kernel.0);
        for oy in 0..ho {
            for ox in 0..wo {
                let go = (oy * wo + ox) * cout;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad_y as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad_x as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let in_off = (iy as usize * w + ix as usize) * cin;
                        for ci in 0..cin {
                            let v = inp[in_off + ci];
                            let w_off = ((ky * k + kx) * cin + ci) * cout;
                            let mut acc = R::zero();
                            for co in 0..cout {
                                let gv = g[go + co];
                                grads[gk_idx][w_off + co] =
                                    grads[gk_idx][w_off + co] + v * gv;
                                acc = acc + ker[w_off + co] * gv;
                            }
                            grads[gi_idx][in_off + ci] = grads[gi_idx][in_off + ci] + acc;
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn mixture_nll_backward(
        &self,
        mu: Var,
        gamma: Var,
        pi: Var,
        p: Option<Var>,
        targets: &[([R; 4], usize)],
        kind: DensityKind,
        g: R,
        grads: &mut [Vec<R>],
    ) {
        let mu_d = self.value(mu).data();
        let ga_d = self.value(gamma).data();
        let pi_d = self.value(pi).data();
        let p_val = p.map(|v| self.value(v));
        let k = pi_d.len();
        let inv_n = R::one() / R::from_f64_lossy(targets.len() as f64);

        for (coords, class) in targets {
            let mut terms = mixture_log_terms(kind, *coords, *class, mu_d, ga_d, pi_d, p_val);
            // Posterior responsibilities via softmax of the log terms.
            softmax_in_place(&mut terms);
            for kk in 0..k {
                // d loss / d a_k for this target.
                let u = -(g * inv_n * terms[kk]);
                grads[pi.0][kk] = grads[pi.0][kk] + u / pi_d[kk];
                if let (Some(pv), Some(pvar)) = (p_val, p) {
                    let idx = kk * pv.shape()[1] + class;
                    grads[pvar.0][idx] = grads[pvar.0][idx] + u / pv.data()[idx];
                }
                for c in 0..4 {
                    let (m, s, x) = (mu_d[kk * 4 + c], ga_d[kk * 4 + c], coords[c]);
                    let (dmu, dscale) = match kind {
                        DensityKind::Cauchy => {
                            let d = x - m;
                            let denom = d * d + s * s;
                            (R::two() * d / denom, R::one() / s - R::two() * s / denom)
                        }
                        DensityKind::Gaussian => {
                            let d = x - m;
                            ((d / (s * s)), (d * d - s * s) / (s * s * s))
                        }
                    };
                    grads[mu.0][kk * 4 + c] = grads[mu.0][kk * 4 + c] + u * dmu;
                    grads[gamma.0][kk * 4 + c] = grads[gamma.0][kk * 4 + c] + u * dscale;
                }
            }
        }
    }
}

fn same_pad(input: usize, output: usize, k: usize, stride: usize) -> usize {
    let needed = ((output - 1) * stride + k).saturating_sub(input);
    needed / 2
}

fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

/// log(1 + exp(x)) computed stably for large |x|.
fn softplus_stable<R: Real>(x: R) -> R {
    if x > R::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn softmax_in_place<R: Real>(row: &mut [R]) {
    let m = row.iter().copied().fold(R::neg_infinity(), R::max);
    let mut s = R::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s = s + *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

fn mixture_log_terms<R: Real>(
    kind: DensityKind,
    coords: [R; 4],
    class: usize,
    mu: &[R],
    gamma: &[R],
    pi: &[R],
    p: Option<&Tensor<R>>,
) -> Vec<R> {
    let k = pi.len();
    let mut terms = Vec::with_capacity(k);
    for kk in 0..k {
        let mut a = pi[kk].ln();
        for c in 0..4 {
            a = a + crate::mixture::coord_logpdf(kind, coords[c], mu[kk * 4 + c], gamma[kk * 4 + c]);
        }
        if let Some(pv) = p {
            a = a + pv.data()[kk * pv.shape()[1] + class].ln();
        }
        terms.push(a);
    }
    terms
}
