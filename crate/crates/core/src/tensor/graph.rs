//! Define-by-run tape: operations execute eagerly and record enough context
//! to replay in exact reverse topological order.
//!
//! Gradients of a node are accumulated across all of its consumers. Repeated
//! `backward` calls without `clear_grads` keep accumulating into `Node::grad`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::conv::{
    conv2d_backward, conv2d_forward, deconv2d_backward, deconv2d_forward, ConvSpec,
};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct BnBatchStats<S: Scalar> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

#[derive(Debug, Clone)]
pub enum BnMode<S: Scalar> {
    Train,
    Eval { mean: Vec<S>, var: Vec<S> },
}

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, S),
    Sigmoid(NodeId),
    Softplus(NodeId),
    LeakyRelu(NodeId, S),
    Ln(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    ConcatChannels(NodeId, NodeId),
    BroadcastSpatial(NodeId),
    PermuteBatch(NodeId, Vec<usize>),
    Conv2d {
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    },
    Deconv2d {
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<S>,
        inv_std: Vec<S>,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<S>,
        var: Vec<S>,
    },
    Linear {
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
}

impl<S: Scalar> Op<S> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::ConcatChannels(a, b) => {
                vec![*a, *b]
            }
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::LeakyRelu(a, _)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::BroadcastSpatial(a)
            | Op::PermuteBatch(a, _) => vec![*a],
            Op::Conv2d { x, kernel, bias, .. } | Op::Deconv2d { x, kernel, bias, .. } => {
                let mut v = vec![*x, *kernel];
                if let Some(b) = bias {
                    v.push(*b);
                }
                v
            }
            Op::BatchNormTrain { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Linear { x, weight, bias } => vec![*x, *weight, *bias],
        }
    }
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Graph::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a leaf; gradient tracking follows `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<S>) -> NodeId {
        let rg = t.requires_grad;
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: rg });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, t: Tensor<S>) -> NodeId {
        self.leaf(t.requires_grad(true))
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        self.leaf(t.requires_grad(false))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id.0].grad_ref()
    }

    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    fn shapes_equal(&self, a: NodeId, b: NodeId, context: &'static str) -> Result<()> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::shape(context, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_op(
        &mut self,
        a: NodeId,
        b: NodeId,
        context: &'static str,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<NodeId> {
        self.shapes_equal(a, b, context)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data: Vec<S> = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, op))
    }

    fn map_op(&mut self, a: NodeId, f: impl Fn(S) -> S, op: Op<S>) -> NodeId {
        let t = self.nodes[a.0].value.map(f);
        self.push(t, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: S) -> NodeId {
        self.map_op(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: S) -> NodeId {
        self.map_op(a, |x| x * s, Op::MulScalar(a, s))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map_op(a, sigmoid_stable, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.map_op(a, softplus_stable, Op::Softplus(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: S) -> NodeId {
        self.map_op(a, |x| if x > S::zero() { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.map_op(a, |x| x.ln(), Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.map_op(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.map_op(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let mut acc = S::zero();
        for v in self.nodes[a.0].value.data() {
            acc += *v;
        }
        self.push(Tensor::scalar(acc), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.numel();
        let mut acc = S::zero();
        for v in self.nodes[a.0].value.data() {
            acc += *v;
        }
        self.push(Tensor::scalar(acc / S::from_f64(n as f64)), Op::Mean(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.nodes[a.0].value.clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// `[n, c1, h, w] ++ [n, c2, h, w] -> [n, c1+c2, h, w]`
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat_channels", format!("{sa:?} vs {sb:?}")));
        }
        let (n, c1, c2, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (c1 + c2) * plane);
        let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        for i in 0..n {
            data.extend_from_slice(&da[i * c1 * plane..(i + 1) * c1 * plane]);
            data.extend_from_slice(&db[i * c2 * plane..(i + 1) * c2 * plane]);
        }
        let t = Tensor::new(vec![n, c1 + c2, h, w], data)?;
        Ok(self.push(t, Op::ConcatChannels(a, b)))
    }

    /// `[n, c] -> [n, c, h, w]`, repeating each code over the spatial grid.
    pub fn broadcast_spatial(&mut self, a: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let sa = self.nodes[a.0].value.shape();
        if sa.len() != 2 {
            return Err(Error::shape("broadcast_spatial", format!("expected [n, c], got {sa:?}")));
        }
        let (n, c) = (sa[0], sa[1]);
        let src = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(n * c * h * w);
        for &v in src.iter().take(n * c) {
            data.extend(std::iter::repeat(v).take(h * w));
        }
        let t = Tensor::new(vec![n, c, h, w], data)?;
        Ok(self.push(t, Op::BroadcastSpatial(a)))
    }

    /// Reorders axis 0: `out[i] = in[perm[i]]`. `perm` must be a permutation.
    pub fn permute_batch(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let sa = self.nodes[a.0].value.shape().to_vec();
        if sa.is_empty() || sa[0] != perm.len() {
            return Err(Error::shape(
                "permute_batch",
                format!("permutation of length {} on shape {sa:?}", perm.len()),
            ));
        }
        let stride: usize = sa[1..].iter().product();
        let src = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(src.len());
        for &p in perm {
            data.extend_from_slice(&src[p * stride..(p + 1) * stride]);
        }
        let t = Tensor::new(sa, data)?;
        Ok(self.push(t, Op::PermuteBatch(a, perm.to_vec())))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    ) -> Result<NodeId> {
        let out = conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[kernel.0].value,
            bias.map(|b| &self.nodes[b.0].value),
            spec,
        )?;
        Ok(self.push(out, Op::Conv2d { x, kernel, bias, spec }))
    }

    pub fn deconv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    ) -> Result<NodeId> {
        let out = deconv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[kernel.0].value,
            bias.map(|b| &self.nodes[b.0].value),
            spec,
        )?;
        Ok(self.push(out, Op::Deconv2d { x, kernel, bias, spec }))
    }

    /// Per-channel batch normalization over `[n, c, h, w]`.
    ///
    /// Train mode normalizes by batch statistics and reports them so the
    /// caller can fold them into running averages; eval mode normalizes by
    /// the provided running statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode<S>,
    ) -> Result<(NodeId, Option<BnBatchStats<S>>)> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("batch_norm", format!("expected [n,c,h,w], got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if self.nodes[gamma.0].value.shape() != [c] || self.nodes[beta.0].value.shape() != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "gamma {:?} / beta {:?} do not match {c} channels",
                    self.nodes[gamma.0].value.shape(),
                    self.nodes[beta.0].value.shape()
                ),
            ));
        }
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gamma.0].value.data();
        let bd = self.nodes[beta.0].value.data();
        let plane = h * w;
        let m = n * plane;
        let eps = S::from_f64(BN_EPSILON);

        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(Error::DegenerateBatch(format!(
                        "batch_norm in train mode needs batch size >= 2, got {n}"
                    )));
                }
                let mut mean = vec![S::zero(); c];
                let mut var = vec![S::zero(); c];
                for ch in 0..c {
                    // accumulate in f64 regardless of S for stable statistics
                    let mut acc = 0.0f64;
                    for i in 0..n {
                        let base = (i * c + ch) * plane;
                        for v in &xd[base..base + plane] {
                            acc += v.as_f64();
                        }
                    }
                    let mu = acc / m as f64;
                    let mut vacc = 0.0f64;
                    for i in 0..n {
                        let base = (i * c + ch) * plane;
                        for v in &xd[base..base + plane] {
                            let d = v.as_f64() - mu;
                            vacc += d * d;
                        }
                    }
                    mean[ch] = S::from_f64(mu);
                    var[ch] = S::from_f64(vacc / m as f64);
                }
                let stats = BnBatchStats { mean: mean.clone(), var: var.clone() };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running stats of length {} for {c} channels", mean.len()),
                    ));
                }
                (mean, var, None)
            }
        };

        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let mut out = vec![S::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for (o, v) in out[base..base + plane].iter_mut().zip(&xd[base..base + plane]) {
                    *o = (*v - mu) * is * ga + be;
                }
            }
        }
        let t = Tensor::new(xs, out)?;
        let op = if stats.is_some() {
            Op::BatchNormTrain { x, gamma, beta, mean, inv_std }
        } else {
            Op::BatchNormEval { x, gamma, beta, mean, var }
        };
        Ok((self.push(t, op), stats))
    }

    /// `x[n, in] * weight[out, in]^T + bias[out] -> [n, out]`
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x.0].value.shape();
        let ws = self.nodes[weight.0].value.shape();
        let bs = self.nodes[bias.0].value.shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::shape(
                "linear",
                format!("x {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (n, k, out_dim) = (xs[0], xs[1], ws[0]);
        let mut out = vec![S::zero(); n * out_dim];
        unsafe {
            S::gemm(
                n,
                k,
                out_dim,
                S::one(),
                self.nodes[x.0].value.data().as_ptr(),
                k as isize,
                1,
                self.nodes[weight.0].value.data().as_ptr(),
                1,
                k as isize,
                S::zero(),
                out.as_mut_ptr(),
                out_dim as isize,
                1,
            );
        }
        let bd = self.nodes[bias.0].value.data();
        for row in out.chunks_mut(out_dim) {
            for (o, b) in row.iter_mut().zip(bd) {
                *o += *b;
            }
        }
        let t = Tensor::new(vec![n, out_dim], out)?;
        Ok(self.push(t, Op::Linear { x, weight, bias }))
    }

    /// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate into
    /// `Tensor::grad`; repeated calls without [`Graph::clear_grads`] sum.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let mut scratch: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        scratch[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let gout = match scratch[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &gout, &mut scratch)?;
            scratch[i] = Some(gout);
        }

        for (node, s) in self.nodes.iter_mut().zip(scratch) {
            if let Some(g) = s {
                match node.value.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    None => node.value.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn accumulate(scratch: &mut [Option<Vec<S>>], id: NodeId, numel: usize, add: impl Fn(&mut [S])) {
        let slot = scratch[id.0].get_or_insert_with(|| vec![S::zero(); numel]);
        add(slot);
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, i: usize, gout: &[S], scratch: &mut Vec<Option<Vec<S>>>) -> Result<()> {
        let numel_of = |id: NodeId| self.nodes[id.0].value.numel();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if self.wants(id) {
                        Self::accumulate(scratch, id, numel_of(id), |s| {
                            s.iter_mut().zip(gout).for_each(|(x, g)| *x += *g)
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    Self::accumulate(scratch, *a, numel_of(*a), |s| {
                        s.iter_mut().zip(gout).for_each(|(x, g)| *x += *g)
                    });
                }
                if self.wants(*b) {
                    Self::accumulate(scratch, *b, numel_of(*b), |s| {
                        s.iter_mut().zip(gout).for_each(|(x, g)| *x -= *g)
                    });
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let vb = self.nodes[b.0].value.data();
                    Self::accumulate(scratch, *a, numel_of(*a), |s| {
                        s.iter_mut().zip(gout.iter().zip(vb)).for_each(|(x, (g, y))| *x += *g * *y)
                    });
                }
                if self.wants(*b) {
                    let va = self.nodes[a.0].value.data();
                    Self::accumulate(scratch, *b, numel_of(*b), |s| {
                        s.iter_mut().zip(gout.iter().zip(va)).for_each(|(x, (g, y))| *x += *g * *y)
                    });
                }
            }
            Op::Div(a, b) => {
                let vb = self.nodes[b.0].value.data();
                if self.wants(*a) {
                    Self::accumulate(scratch, *a, numel_of(*a), |s| {
                        s.iter_mut().zip(gout.iter().zip(vb)).for_each(|(x, (g, y))| *x += *g / *y)
                    });
                }
                if self.wants(*b) {
                    let va = self.nodes[a.0].value.data();
                    Self::accumulate(scratch, *b, numel_of(*b), |s| {
                        s.iter_mut()
                            .zip(gout.iter().zip(va.iter().zip(vb)))
                            .for_each(|(x, (g, (an, bn)))| *x -= *g * *an / (*bn * *bn))
                    });
                }
            }
            Op::AddScalar(a) => {
                if self.wants(*a) {
                    Self::accumulate(scratch, *a, numel_of(*a), |s| {
                        s.iter_mut().zip(gout).for_each(|(x, g)| *x += *g)
                    });
                }
            }
            Op::MulScalar(a, k) => {
                if self.wants(*a) {
                    let k = *k;
                    Self::accumulate(scratch, *a, numel_of(*a), |s| {
                        s.iter_mut().zip(gout).for_each(|(x, g)| *x += *g * k)
                    });
                }
            }
            Op::Sigmoid(a) => {
                if self.wants(*a) {
                    let y = self.nodes[i].value.data();
                    Self::accumulate(scratch, *a, numel_of(*a), |s| {
                        s.iter_mut()
                            .zip(gout.iter().zip(y))
                            .for_each(|(x, (g, y))| *x += *g * *y * (S::one() - *y))
                    });
                }
            }
            Op::Softplus(a) => {
                if self.wants(*a) {
                    // d softplus / dx = sigmoid(x) = -expm1(-y)
                    let y = self.nodes[i].value.data();
                    Self::accumulate(scratch, *a, numel_of(*a), |s| {
                        s.iter_mut()
                            .zip(gout.iter().zip(y))
                            .for_each(|(x, (g, y))| *x += *g * (-(-*y).exp_m1()))
                    });
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.wants(*a) {
                    let vx = self.nodes[a.0].value.data();
                    let slope = *slope;
                    Self::accumulate(scratch, *a, numel_of(*a), |s| {
                        s.iter_mut().zip(gout.iter().zip(vx)).for_each(|(x, (g, v))| {
                            *x += if *v > S::zero() { *g } else { *g * slope }
                        })
                    });
                }
            }
            Op::Ln(a) => {
                if self.wants(*a) {
                    let vx = self.nodes[a.0].value.data();
                    Self::accumulate(scratch, *a, numel_of(*a), |s| {
                        s.iter_mut().zip(gout.iter().zip(vx)).for_each(|(x, (g, v))| *x += *g / *v)
                    });
                }
            }
            Op::Sqrt(a) => {
                if self.wants(*a) {
                    let y = self.nodes[i].value.data();
                    let two = S::from_f64(2.0);
                    Self::accumulate(scratch, *a, numel_of(*a), |s| {
                        s.iter_mut()
                            .zip(gout.iter().zip(y))
                            .for_each(|(x, (g, y))| *x += *g / (two * *y))
                    });
                }
            }
            Op::Square(a) => {
                if self.wants(*a) {
                    let vx = self.nodes[a.0].value.data();
                    let two = S::from_f64(2.0);
                    Self::accumulate(scratch, *a, numel_of(*a), |s| {
                        s.iter_mut()
                            .zip(gout.iter().zip(vx))
                            .for_each(|(x, (g, v))| *x += *g * two * *v)
                    });
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let g = gout[0];
                    Self::accumulate(scratch, *a, numel_of(*a), |s| {
                        s.iter_mut().for_each(|x| *x += g)
                    });
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let g = gout[0] / S::from_f64(numel_of(*a) as f64);
                    Self::accumulate(scratch, *a, numel_of(*a), |s| {
                        s.iter_mut().for_each(|x| *x += g)
                    });
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    Self::accumulate(scratch, *a, numel_of(*a), |s| {
                        s.iter_mut().zip(gout).for_each(|(x, g)| *x += *g)
                    });
                }
            }
            Op::ConcatChannels(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (n, c1, c2) = (sa[0], sa[1], sb[1]);
                let plane: usize = sa[2..].iter().product();
                if self.wants(*a) {
                    Self::accumulate(scratch, *a, numel_of(*a), |s| {
                        for i in 0..n {
                            let src = &gout[i * (c1 + c2) * plane..];
                            let dst = &mut s[i * c1 * plane..(i + 1) * c1 * plane];
                            dst.iter_mut().zip(&src[..c1 * plane]).for_each(|(x, g)| *x += *g);
                        }
                    });
                }
                if self.wants(*b) {
                    Self::accumulate(scratch, *b, numel_of(*b), |s| {
                        for i in 0..n {
                            let src = &gout[(i * (c1 + c2) + c1) * plane..];
                            let dst = &mut s[i * c2 * plane..(i + 1) * c2 * plane];
                            dst.iter_mut().zip(&src[..c2 * plane]).for_each(|(x, g)| *x += *g);
                        }
                    });
                }
            }
            Op::BroadcastSpatial(a) => {
                if self.wants(*a) {
                    let out_shape = self.nodes[i].value.shape();
                    let plane = out_shape[2] * out_shape[3];
                    Self::accumulate(scratch, *a, numel_of(*a), |s| {
                        for (si, x) in s.iter_mut().enumerate() {
                            let mut acc = S::zero();
                            for g in &gout[si * plane..(si + 1) * plane] {
                                acc += *g;
                            }
                            *x += acc;
                        }
                    });
                }
            }
            Op::PermuteBatch(a, perm) => {
                if self.wants(*a) {
                    let stride: usize = self.nodes[a.0].value.shape()[1..].iter().product();
                    Self::accumulate(scratch, *a, numel_of(*a), |s| {
                        for (row, &p) in perm.iter().enumerate() {
                            let dst = &mut s[p * stride..(p + 1) * stride];
                            let src = &gout[row * stride..(row + 1) * stride];
                            dst.iter_mut().zip(src).for_each(|(x, g)| *x += *g);
                        }
                    });
                }
            }
            Op::Conv2d { x, kernel, bias, spec } => {
                let (gx, gk, gb) = conv2d_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[kernel.0].value,
                    *spec,
                    gout,
                    bias.is_some(),
                )?;
                if self.wants(*x) {
                    Self::accumulate(scratch, *x, numel_of(*x), |s| {
                        s.iter_mut().zip(gx.data()).for_each(|(a, b)| *a += *b)
                    });
                }
                if self.wants(*kernel) {
                    Self::accumulate(scratch, *kernel, numel_of(*kernel), |s| {
                        s.iter_mut().zip(gk.data()).for_each(|(a, b)| *a += *b)
                    });
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    if self.wants(*b) {
                        Self::accumulate(scratch, *b, numel_of(*b), |s| {
                            s.iter_mut().zip(gb.data()).for_each(|(a, b)| *a += *b)
                        });
                    }
                }
            }
            Op::Deconv2d { x, kernel, bias, spec } => {
                let (gx, gk, gb) = deconv2d_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[kernel.0].value,
                    *spec,
                    gout,
                    bias.is_some(),
                )?;
                if self.wants(*x) {
                    Self::accumulate(scratch, *x, numel_of(*x), |s| {
                        s.iter_mut().zip(gx.data()).for_each(|(a, b)| *a += *b)
                    });
                }
                if self.wants(*kernel) {
                    Self::accumulate(scratch, *kernel, numel_of(*kernel), |s| {
                        s.iter_mut().zip(gk.data()).for_each(|(a, b)| *a += *b)
                    });
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    if self.wants(*b) {
                        Self::accumulate(scratch, *b, numel_of(*b), |s| {
                            s.iter_mut().zip(gb.data()).for_each(|(a, b)| *a += *b)
                        });
                    }
                }
            }
            Op::BatchNormTrain { x, gamma, beta, mean, inv_std } => {
                let (gx, gg, gb) = bn_train_backward(
                    &self.nodes[x.0].value,
                    self.nodes[gamma.0].value.data(),
                    mean,
                    inv_std,
                    gout,
                );
                if self.wants(*x) {
                    Self::accumulate(scratch, *x, numel_of(*x), |s| {
                        s.iter_mut().zip(&gx).for_each(|(a, b)| *a += *b)
                    });
                }
                if self.wants(*gamma) {
                    Self::accumulate(scratch, *gamma, numel_of(*gamma), |s| {
                        s.iter_mut().zip(&gg).for_each(|(a, b)| *a += *b)
                    });
                }
                if self.wants(*beta) {
                    Self::accumulate(scratch, *beta, numel_of(*beta), |s| {
                        s.iter_mut().zip(&gb).for_each(|(a, b)| *a += *b)
                    });
                }
            }
            Op::BatchNormEval { x, gamma, beta, mean, var } => {
                let (gx, gg, gb) = bn_eval_backward(
                    &self.nodes[x.0].value,
                    self.nodes[gamma.0].value.data(),
                    mean,
                    var,
                    gout,
                );
                if self.wants(*x) {
                    Self::accumulate(scratch, *x, numel_of(*x), |s| {
                        s.iter_mut().zip(&gx).for_each(|(a, b)| *a += *b)
                    });
                }
                if self.wants(*gamma) {
                    Self::accumulate(scratch, *gamma, numel_of(*gamma), |s| {
                        s.iter_mut().zip(&gg).for_each(|(a, b)| *a += *b)
                    });
                }
                if self.wants(*beta) {
                    Self::accumulate(scratch, *beta, numel_of(*beta), |s| {
                        s.iter_mut().zip(&gb).for_each(|(a, b)| *a += *b)
                    });
                }
            }
            Op::Linear { x, weight, bias } => {
                let xs = self.nodes[x.0].value.shape();
                let (n, k) = (xs[0], xs[1]);
                let out_dim = self.nodes[weight.0].value.shape()[0];
                if self.wants(*x) {
                    let wd = self.nodes[weight.0].value.data();
                    let mut gx = vec![S::zero(); n * k];
                    unsafe {
                        S::gemm(
                            n,
                            out_dim,
                            k,
                            S::one(),
                            gout.as_ptr(),
                            out_dim as isize,
                            1,
                            wd.as_ptr(),
                            k as isize,
                            1,
                            S::zero(),
                            gx.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                    Self::accumulate(scratch, *x, numel_of(*x), |s| {
                        s.iter_mut().zip(&gx).for_each(|(a, b)| *a += *b)
                    });
                }
                if self.wants(*weight) {
                    let xd = self.nodes[x.0].value.data();
                    let mut gw = vec![S::zero(); out_dim * k];
                    unsafe {
                        S::gemm(
                            out_dim,
                            n,
                            k,
                            S::one(),
                            gout.as_ptr(),
                            1,
                            out_dim as isize,
                            xd.as_ptr(),
                            k as isize,
                            1,
                            S::zero(),
                            gw.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                    Self::accumulate(scratch, *weight, numel_of(*weight), |s| {
                        s.iter_mut().zip(&gw).for_each(|(a, b)| *a += *b)
                    });
                }
                if self.wants(*bias) {
                    Self::accumulate(scratch, *bias, numel_of(*bias), |s| {
                        for row in gout.chunks(out_dim) {
                            s.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

impl<S: Scalar> Node<S> {
    fn grad_ref(&self) -> Option<&[S]> {
        self.value.grad.as_deref()
    }
}

fn sigmoid_stable<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn softplus_stable<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn bn_train_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &[S],
    mean: &[S],
    inv_std: &[S],
    gout: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let sh = x.shape();
    let (n, c, plane) = (sh[0], sh[1], sh[2] * sh[3]);
    let m = S::from_f64((n * plane) as f64);
    let xd = x.data();
    let mut gx = vec![S::zero(); xd.len()];
    let mut gg = vec![S::zero(); c];
    let mut gb = vec![S::zero(); c];
    for ch in 0..c {
        let (mu, is, ga) = (mean[ch], inv_std[ch], gamma[ch]);
        let mut sum_dxhat = S::zero();
        let mut sum_dxhat_xhat = S::zero();
        for i in 0..n {
            let base = (i * c + ch) * plane;
            for j in 0..plane {
                let g = gout[base + j];
                let xhat = (xd[base + j] - mu) * is;
                gb[ch] += g;
                gg[ch] += g * xhat;
                let dxhat = g * ga;
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
        }
        for i in 0..n {
            let base = (i * c + ch) * plane;
            for j in 0..plane {
                let xhat = (xd[base + j] - mu) * is;
                let dxhat = gout[base + j] * ga;
                gx[base + j] = is / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
            }
        }
    }
    (gx, gg, gb)
}

fn bn_eval_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &[S],
    mean: &[S],
    var: &[S],
    gout: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let sh = x.shape();
    let (n, c, plane) = (sh[0], sh[1], sh[2] * sh[3]);
    let eps = S::from_f64(BN_EPSILON);
    let xd = x.data();
    let mut gx = vec![S::zero(); xd.len()];
    let mut gg = vec![S::zero(); c];
    let mut gb = vec![S::zero(); c];
    for ch in 0..c {
        let is = S::one() / (var[ch] + eps).sqrt();
        let (mu, ga) = (mean[ch], gamma[ch]);
        for i in 0..n {
            let base = (i * c + ch) * plane;
            for j in 0..plane {
                let g = gout[base + j];
                gb[ch] += g;
                gg[ch] += g * (xd[base + j] - mu) * is;
                gx[base + j] = g * ga * is;
            }
        }
    }
    (gx, gg, gb)
}

/// Convolutional gated linear unit: `B1(L1(X)) * sigmoid(B2(L2(X)))`.
pub struct GluBranch<S: Scalar> {
    pub kernel: NodeId,
    pub bias: Option<NodeId>,
    pub spec: ConvSpec,
    pub gamma: NodeId,
    pub beta: NodeId,
    pub bn_mode: BnMode<S>,
}

/// Runs one GLU block; `transposed` selects deconv branches. Returns the
/// gated output plus batch statistics of the two normalization layers
/// (present in train mode, in branch order).
pub fn glu_block<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    value_branch: GluBranch<S>,
    gate_branch: GluBranch<S>,
    transposed: bool,
) -> Result<(NodeId, Vec<BnBatchStats<S>>)> {
    let run = |g: &mut Graph<S>, br: GluBranch<S>| -> Result<(NodeId, Option<BnBatchStats<S>>)> {
        let lin = if transposed {
            g.deconv2d(x, br.kernel, br.bias, br.spec)?
        } else {
            g.conv2d(x, br.kernel, br.bias, br.spec)?
        };
        g.batch_norm(lin, br.gamma, br.beta, br.bn_mode)
    };
    let (b1, s1) = run(g, value_branch)?;
    let (b2, s2) = run(g, gate_branch)?;
    if g.value(b1).shape() != g.value(b2).shape() {
        return Err(Error::Config(format!(
            "glu_block branches disagree on output shape: {:?} vs {:?}",
            g.value(b1).shape(),
            g.value(b2).shape()
        )));
    }
    let gate = g.sigmoid(b2);
    let out = g.mul(b1, gate)?;
    let stats = [s1, s2].into_iter().flatten().collect();
    Ok((out, stats))
}
