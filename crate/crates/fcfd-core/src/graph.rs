//! Reverse-mode automatic differentiation over dynamically shaped arrays.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! topological order, so the backward sweep is a single reverse walk over the
//! node list. The engine is generic over `f32` (training) and `f64`
//! (finite-difference verification).

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn};

use crate::params::ParamRef;

/// Closed set of element types the engine runs on.
pub trait Scalar:
    ndarray::NdFloat
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::iter::Sum
    + for<'a> std::iter::Sum<&'a Self>
{
    /// Lossy conversion from `f64`, used for hyperparameters and constants.
    fn f(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub type NodeId = usize;

enum Op<F: Scalar> {
    /// Leaf node: an input batch, a constant, or a parameter value.
    Input,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, F),
    Powi(NodeId, i32),
    Relu(NodeId),
    LeakyRelu(NodeId, F),
    /// (m,k) x (k,n) matrix product.
    MatMul(NodeId, NodeId),
    /// Adds a per-channel bias to a (B,C) or (B,C,H,W) tensor.
    AddBias(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: ArrayD<F>,
        inv_std: Array1<F>,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Array1<F>,
        inv_std: Array1<F>,
    },
    GlobalAvgPool(NodeId),
    Reshape(NodeId),
    ConcatChannels(Vec<NodeId>),
    SliceChannel(NodeId, usize),
    SumN(Vec<NodeId>),
    /// Mean squared difference over all elements; gradient flows to both sides.
    Mse(NodeId, NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Array2<F>,
    },
    /// tau^2-scaled KL between temperature-softened softmaxes, mean over batch.
    /// The first argument is the reference distribution and receives no gradient.
    KlTempered {
        logits: NodeId,
        tau: F,
        p_ref: Array2<F>,
        p: Array2<F>,
    },
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    bindings: Vec<(NodeId, ParamRef)>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<F> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> F {
        let v = &self.nodes[id].value;
        debug_assert_eq!(v.len(), 1);
        v.iter().copied().next().unwrap()
    }

    /// (node, parameter) pairs registered through [`Graph::param`].
    pub fn bindings(&self) -> &[(NodeId, ParamRef)] {
        &self.bindings
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// A leaf with no gradient.
    pub fn constant(&mut self, value: ArrayD<F>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// A leaf that participates in differentiation but has no parameter binding
    /// (used for probing gradients w.r.t. activations).
    pub fn variable(&mut self, value: ArrayD<F>) -> NodeId {
        self.push(value, Op::Input, true)
    }

    /// A trainable-parameter leaf. `trainable = false` yields a constant.
    pub fn param(&mut self, value: ArrayD<F>, pref: ParamRef, trainable: bool) -> NodeId {
        let id = self.push(value, Op::Input, trainable);
        if trainable {
            self.bindings.push((id, pref));
        }
        id
    }

    /// Cuts the gradient flow: same value, no backward path.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id].value.clone();
        self.constant(v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: F) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x + c);
        let g = self.any_grad(&[a]);
        self.push(v, Op::AddScalar(a), g)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: F) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * c);
        let g = self.any_grad(&[a]);
        self.push(v, Op::MulScalar(a, c), g)
    }

    pub fn powi(&mut self, a: NodeId, n: i32) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.powi(n));
        let g = self.any_grad(&[a]);
        self.push(v, Op::Powi(a, n), g)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(F::zero()));
        let g = self.any_grad(&[a]);
        self.push(v, Op::Relu(a), g)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: F) -> NodeId {
        let v = self.nodes[a]
            .value
            .mapv(|x| if x > F::zero() { x } else { x * slope });
        let g = self.any_grad(&[a]);
        self.push(v, Op::LeakyRelu(a, slope), g)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be 2-d");
        let bv = self.nodes[b]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be 2-d");
        let v = av.dot(&bv).into_dyn();
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let bv = self.nodes[bias]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("bias must be 1-d");
        let v = match xv.ndim() {
            2 => xv + &bv.insert_axis(Axis(0)),
            4 => {
                let mut out = xv.clone();
                for (c, &bc) in bv.iter().enumerate() {
                    out.index_axis_mut(Axis(1), c).mapv_inplace(|x| x + bc);
                }
                out
            }
            d => panic!("add_bias expects 2-d or 4-d input, got {d}-d"),
        };
        let g = self.any_grad(&[x, bias]);
        self.push(v, Op::AddBias(x, bias), g)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = as4(&self.nodes[x].value);
        let wv = as4(&self.nodes[w].value);
        let v = conv::conv2d_forward(&xv, &wv, stride, pad).into_dyn();
        let g = self.any_grad(&[x, w]);
        self.push(v, Op::Conv2d { x, w, stride, pad }, g)
    }

    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = as4(&self.nodes[x].value);
        let wv = as4(&self.nodes[w].value);
        let v = conv::convt2d_forward(&xv, &wv, stride, pad).into_dyn();
        let g = self.any_grad(&[x, w]);
        self.push(
            v,
            Op::ConvTranspose2d { x, w, stride, pad },
            g,
        )
    }

    /// Train-mode batch normalization. Normalizes by the batch statistics over
    /// (B,H,W) per channel and applies the shared affine. Returns the output
    /// node and the biased/unbiased batch moments for the caller's running
    /// statistics update.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: F,
    ) -> (NodeId, Array1<F>, Array1<F>) {
        let xv = self.nodes[x].value.clone();
        let (xhat, mean, var_biased, var_unbiased, inv_std) = bn_normalize(&xv, eps);
        let gv = as1(&self.nodes[gamma].value);
        let bv = as1(&self.nodes[beta].value);
        let v = bn_affine(&xhat, &gv, &bv);
        let g = self.any_grad(&[x, gamma, beta]);
        let id = self.push(
            v,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            g,
        );
        let _ = var_biased;
        (id, mean, var_unbiased)
    }

    /// Eval-mode batch normalization against fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Array1<F>,
        var: Array1<F>,
        eps: F,
    ) -> NodeId {
        let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
        let xv = &self.nodes[x].value;
        let xhat = bn_shift_scale(xv, &mean, &inv_std);
        let gv = as1(&self.nodes[gamma].value);
        let bv = as1(&self.nodes[beta].value);
        let v = bn_affine(&xhat, &gv, &bv);
        let g = self.any_grad(&[x, gamma, beta]);
        self.push(
            v,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            g,
        )
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xv = as4(&self.nodes[x].value);
        let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let scale = F::one() / F::from_usize(h * w).unwrap();
        let mut out = Array2::<F>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                out[[bi, ci]] = xv
                    .index_axis(Axis(0), bi)
                    .index_axis(Axis(0), ci)
                    .sum()
                    * scale;
            }
        }
        let g = self.any_grad(&[x]);
        self.push(out.into_dyn(), Op::GlobalAvgPool(x), g)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[x]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let g = self.any_grad(&[x]);
        self.push(v, Op::Reshape(x), g)
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_channels shape mismatch");
        let g = self.any_grad(parts);
        self.push(v, Op::ConcatChannels(parts.to_vec()), g)
    }

    pub fn slice_channel(&mut self, x: NodeId, channel: usize) -> NodeId {
        let v = self.nodes[x]
            .value
            .slice_axis(Axis(1), ndarray::Slice::from(channel..channel + 1))
            .to_owned();
        let g = self.any_grad(&[x]);
        self.push(v, Op::SliceChannel(x, channel), g)
    }

    /// Elementwise sum of same-shaped nodes (used to accumulate loss terms).
    pub fn sum_n(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mut v = self.nodes[parts[0]].value.clone();
        for &p in &parts[1..] {
            v = v + &self.nodes[p].value;
        }
        let g = self.any_grad(parts);
        self.push(v, Op::SumN(parts.to_vec()), g)
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        assert_eq!(av.shape(), bv.shape(), "mse shape mismatch");
        let n = F::from_usize(av.len()).unwrap();
        let s: F = av
            .iter()
            .zip(bv.iter())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let v = ndarray::arr0(s / n).into_dyn();
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Mse(a, b), g)
    }

    /// Mean cross-entropy of softmax(logits) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let lv = self.nodes[logits]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("logits must be 2-d");
        assert_eq!(lv.shape()[0], labels.len());
        let probs = softmax_rows(&lv.to_owned(), F::one());
        let b = labels.len();
        let mut loss = F::zero();
        for (i, &y) in labels.iter().enumerate() {
            loss = loss - probs[[i, y]].max(F::f(1e-30)).ln();
        }
        loss = loss / F::from_usize(b).unwrap();
        let g = self.any_grad(&[logits]);
        self.push(
            ndarray::arr0(loss).into_dyn(),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            g,
        )
    }

    /// tau^2 * KL( softmax(ref/tau) || softmax(x/tau) ), mean over the batch.
    /// Gradient flows only into `logits`; the reference side is a fixed target.
    pub fn kl_tempered(&mut self, ref_logits: NodeId, logits: NodeId, tau: F) -> NodeId {
        let rv = self.nodes[ref_logits]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("ref logits must be 2-d")
            .to_owned();
        let lv = self.nodes[logits]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("logits must be 2-d")
            .to_owned();
        assert_eq!(rv.shape(), lv.shape(), "kl_tempered shape mismatch");
        let p_ref = softmax_rows(&rv, tau);
        let p = softmax_rows(&lv, tau);
        let b = rv.shape()[0];
        let mut kl = F::zero();
        let floor = F::f(1e-30);
        for i in 0..b {
            for j in 0..rv.shape()[1] {
                let pr = p_ref[[i, j]];
                if pr > F::zero() {
                    kl = kl + pr * (pr.max(floor).ln() - p[[i, j]].max(floor).ln());
                }
            }
        }
        let v = tau * tau * kl / F::from_usize(b).unwrap();
        let g = self.any_grad(&[logits]);
        self.push(
            ndarray::arr0(v).into_dyn(),
            Op::KlTempered {
                logits,
                tau,
                p_ref,
                p,
            },
            g,
        )
    }

    /// Reverse sweep from `out` (must be scalar). Returns per-node gradients.
    pub fn backward(&self, out: NodeId) -> Vec<Option<ArrayD<F>>> {
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        assert_eq!(self.nodes[out].value.len(), 1, "backward root must be scalar");
        grads[out] = Some(ArrayD::ones(self.nodes[out].value.raw_dim()));
        for id in (0..=out).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let dy = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        grads
    }

    fn accumulate(grads: &mut [Option<ArrayD<F>>], id: NodeId, g: ArrayD<F>) {
        match &mut grads[id] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, id: NodeId, dy: &ArrayD<F>, grads: &mut Vec<Option<ArrayD<F>>>) {
        let needs = |i: NodeId| self.nodes[i].requires_grad;
        match &self.nodes[id].op {
            Op::Input => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    Self::accumulate(grads, *a, dy.clone());
                }
                if needs(*b) {
                    Self::accumulate(grads, *b, dy.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    Self::accumulate(grads, *a, dy.clone());
                }
                if needs(*b) {
                    Self::accumulate(grads, *b, dy.mapv(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    Self::accumulate(grads, *a, dy * &self.nodes[*b].value);
                }
                if needs(*b) {
                    Self::accumulate(grads, *b, dy * &self.nodes[*a].value);
                }
            }
            Op::AddScalar(a) => {
                if needs(*a) {
                    Self::accumulate(grads, *a, dy.clone());
                }
            }
            Op::MulScalar(a, c) => {
                if needs(*a) {
                    Self::accumulate(grads, *a, dy.mapv(|v| v * *c));
                }
            }
            Op::Powi(a, n) => {
                if needs(*a) {
                    let nf = F::from_i32(*n).unwrap();
                    let d = self.nodes[*a].value.mapv(|x| nf * x.powi(n - 1));
                    Self::accumulate(grads, *a, dy * &d);
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    let mask = self.nodes[*a]
                        .value
                        .mapv(|x| if x > F::zero() { F::one() } else { F::zero() });
                    Self::accumulate(grads, *a, dy * &mask);
                }
            }
            Op::LeakyRelu(a, slope) => {
                if needs(*a) {
                    let s = *slope;
                    let mask = self.nodes[*a]
                        .value
                        .mapv(|x| if x > F::zero() { F::one() } else { s });
                    Self::accumulate(grads, *a, dy * &mask);
                }
            }
            Op::MatMul(a, b) => {
                let dy2 = dy.view().into_dimensionality::<Ix2>().unwrap();
                if needs(*a) {
                    let bv = self.nodes[*b].value.view().into_dimensionality::<Ix2>().unwrap();
                    Self::accumulate(grads, *a, dy2.dot(&bv.t()).into_dyn());
                }
                if needs(*b) {
                    let av = self.nodes[*a].value.view().into_dimensionality::<Ix2>().unwrap();
                    Self::accumulate(grads, *b, av.t().dot(&dy2).into_dyn());
                }
            }
            Op::AddBias(x, bias) => {
                if needs(*x) {
                    Self::accumulate(grads, *x, dy.clone());
                }
                if needs(*bias) {
                    let db = match dy.ndim() {
                        2 => dy.sum_axis(Axis(0)),
                        4 => dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)),
                        _ => unreachable!(),
                    };
                    Self::accumulate(grads, *bias, db.into_dyn());
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xv = as4(&self.nodes[*x].value);
                let wv = as4(&self.nodes[*w].value);
                let dyv = as4(dy);
                let (dx, dw) =
                    conv::conv2d_backward(&xv, &wv, &dyv, *stride, *pad, needs(*x), needs(*w));
                if let Some(dx) = dx {
                    Self::accumulate(grads, *x, dx.into_dyn());
                }
                if let Some(dw) = dw {
                    Self::accumulate(grads, *w, dw.into_dyn());
                }
            }
            Op::ConvTranspose2d { x, w, stride, pad } => {
                let xv = as4(&self.nodes[*x].value);
                let wv = as4(&self.nodes[*w].value);
                let dyv = as4(dy);
                let (dx, dw) =
                    conv::convt2d_backward(&xv, &wv, &dyv, *stride, *pad, needs(*x), needs(*w));
                if let Some(dx) = dx {
                    Self::accumulate(grads, *x, dx.into_dyn());
                }
                if let Some(dw) = dw {
                    Self::accumulate(grads, *w, dw.into_dyn());
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = as1(&self.nodes[*gamma].value);
                if needs(*gamma) {
                    let dg = reduce_channels(&(dy * xhat));
                    Self::accumulate(grads, *gamma, dg.into_dyn());
                }
                if needs(*beta) {
                    let db = reduce_channels(dy);
                    Self::accumulate(grads, *beta, db.into_dyn());
                }
                if needs(*x) {
                    let dx = bn_backward_input(dy, xhat, inv_std, &gv);
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                if needs(*gamma) || needs(*beta) {
                    let xhat = bn_shift_scale(&self.nodes[*x].value, mean, inv_std);
                    if needs(*gamma) {
                        let dg = reduce_channels(&(dy * &xhat));
                        Self::accumulate(grads, *gamma, dg.into_dyn());
                    }
                    if needs(*beta) {
                        let db = reduce_channels(dy);
                        Self::accumulate(grads, *beta, db.into_dyn());
                    }
                }
                if needs(*x) {
                    let gv = as1(&self.nodes[*gamma].value);
                    let scale = &gv * inv_std;
                    let dx = scale_channels(dy, &scale);
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::GlobalAvgPool(x) => {
                if needs(*x) {
                    let xs = self.nodes[*x].value.shape();
                    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let scale = F::one() / F::from_usize(h * w).unwrap();
                    let dy2 = dy.view().into_dimensionality::<Ix2>().unwrap();
                    let mut dx = Array4::<F>::zeros((b, c, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            dx.index_axis_mut(Axis(0), bi)
                                .index_axis_mut(Axis(0), ci)
                                .fill(dy2[[bi, ci]] * scale);
                        }
                    }
                    Self::accumulate(grads, *x, dx.into_dyn());
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    let dx = dy
                        .clone()
                        .into_shape_with_order(self.nodes[*x].value.raw_dim())
                        .unwrap();
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::ConcatChannels(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p].value.shape()[1];
                    if needs(p) {
                        let dp = dy
                            .slice_axis(Axis(1), ndarray::Slice::from(offset..offset + c))
                            .to_owned();
                        Self::accumulate(grads, p, dp);
                    }
                    offset += c;
                }
            }
            Op::SliceChannel(x, channel) => {
                if needs(*x) {
                    let mut dx = ArrayD::<F>::zeros(self.nodes[*x].value.raw_dim());
                    dx.slice_axis_mut(Axis(1), ndarray::Slice::from(*channel..*channel + 1))
                        .assign(dy);
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::SumN(parts) => {
                for &p in parts {
                    if needs(p) {
                        Self::accumulate(grads, p, dy.clone());
                    }
                }
            }
            Op::Mse(a, b) => {
                let dyv = dy.iter().copied().next().unwrap();
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let scale = F::f(2.0) / F::from_usize(av.len()).unwrap() * dyv;
                if needs(*a) {
                    let da = (av - bv).mapv(|v| v * scale);
                    Self::accumulate(grads, *a, da);
                }
                if needs(*b) {
                    let db = (bv - av).mapv(|v| v * scale);
                    Self::accumulate(grads, *b, db);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if needs(*logits) {
                    let dyv = dy.iter().copied().next().unwrap();
                    let b = labels.len();
                    let scale = dyv / F::from_usize(b).unwrap();
                    let mut dl = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        dl[[i, y]] = dl[[i, y]] - F::one();
                    }
                    Self::accumulate(grads, *logits, dl.mapv(|v| v * scale).into_dyn());
                }
            }
            Op::KlTempered {
                logits,
                tau,
                p_ref,
                p,
            } => {
                if needs(*logits) {
                    let dyv = dy.iter().copied().next().unwrap();
                    let b = p.shape()[0];
                    // d/dz [tau^2 * KL] = tau * (p - p_ref), averaged over batch
                    let scale = dyv * *tau / F::from_usize(b).unwrap();
                    let dl = (p - p_ref).mapv(|v| v * scale);
                    Self::accumulate(grads, *logits, dl.into_dyn());
                }
            }
        }
    }
}

fn as4<F: Scalar>(v: &ArrayD<F>) -> Array4<F> {
    v.view()
        .into_dimensionality::<Ix4>()
        .expect("expected 4-d tensor")
        .to_owned()
}

fn as1<F: Scalar>(v: &ArrayD<F>) -> Array1<F> {
    v.view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("expected 1-d tensor")
        .to_owned()
}

/// Row-wise softmax of `logits / tau`, numerically stabilized.
pub fn softmax_rows<F: Scalar>(logits: &Array2<F>, tau: F) -> Array2<F> {
    let mut out = logits.mapv(|z| z / tau);
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|z| (z - m).exp());
        let s: F = row.iter().copied().sum();
        row.mapv_inplace(|z| z / s);
    }
    out
}

/// Sum over every axis except the channel axis. Accepts (B,C) or (B,C,H,W).
fn reduce_channels<F: Scalar>(v: &ArrayD<F>) -> Array1<F> {
    match v.ndim() {
        2 => v.sum_axis(Axis(0)).into_dimensionality().unwrap(),
        4 => v
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .sum_axis(Axis(0))
            .into_dimensionality()
            .unwrap(),
        d => panic!("expected 2-d or 4-d tensor, got {d}-d"),
    }
}

fn scale_channels<F: Scalar>(v: &ArrayD<F>, scale: &Array1<F>) -> ArrayD<F> {
    let mut out = v.clone();
    for (c, &s) in scale.iter().enumerate() {
        out.index_axis_mut(Axis(1), c).mapv_inplace(|x| x * s);
    }
    out
}

/// (x - mean) * inv_std with per-channel mean/inv_std.
fn bn_shift_scale<F: Scalar>(x: &ArrayD<F>, mean: &Array1<F>, inv_std: &Array1<F>) -> ArrayD<F> {
    let mut out = x.clone();
    for c in 0..mean.len() {
        let (m, s) = (mean[c], inv_std[c]);
        out.index_axis_mut(Axis(1), c).mapv_inplace(|v| (v - m) * s);
    }
    out
}

fn bn_affine<F: Scalar>(xhat: &ArrayD<F>, gamma: &Array1<F>, beta: &Array1<F>) -> ArrayD<F> {
    let mut out = xhat.clone();
    for c in 0..gamma.len() {
        let (g, b) = (gamma[c], beta[c]);
        out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v * g + b);
    }
    out
}

/// Normalize by batch statistics. Returns (xhat, mean, var_biased, var_unbiased, inv_std).
fn bn_normalize<F: Scalar>(
    x: &ArrayD<F>,
    eps: F,
) -> (ArrayD<F>, Array1<F>, Array1<F>, Array1<F>, Array1<F>) {
    let c = x.shape()[1];
    let m = x.len() / c;
    let mf = F::from_usize(m).unwrap();
    let mut mean = Array1::<F>::zeros(c);
    let mut var = Array1::<F>::zeros(c);
    for ci in 0..c {
        let ch = x.index_axis(Axis(1), ci);
        let mu: F = ch.iter().copied().sum::<F>() / mf;
        let v: F = ch.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / mf;
        mean[ci] = mu;
        var[ci] = v;
    }
    let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
    let xhat = bn_shift_scale(x, &mean, &inv_std);
    let bessel = if m > 1 {
        mf / F::from_usize(m - 1).unwrap()
    } else {
        F::one()
    };
    let var_unbiased = var.mapv(|v| v * bessel);
    (xhat, mean, var, var_unbiased, inv_std)
}

/// Train-mode batch-norm input gradient:
/// dx = gamma * inv_std / m * (m*dy - sum(dy) - xhat * sum(dy*xhat))
fn bn_backward_input<F: Scalar>(
    dy: &ArrayD<F>,
    xhat: &ArrayD<F>,
    inv_std: &Array1<F>,
    gamma: &Array1<F>,
) -> ArrayD<F> {
    let c = gamma.len();
    let m = dy.len() / c;
    let mf = F::from_usize(m).unwrap();
    let sum_dy = reduce_channels(dy);
    let sum_dy_xhat = reduce_channels(&(dy * xhat));
    let mut dx = ArrayD::<F>::zeros(dy.raw_dim());
    for ci in 0..c {
        let coeff = gamma[ci] * inv_std[ci] / mf;
        let sdy = sum_dy[ci];
        let sdyx = sum_dy_xhat[ci];
        let dyc = dy.index_axis(Axis(1), ci);
        let xhc = xhat.index_axis(Axis(1), ci);
        let mut dxc = dx.index_axis_mut(Axis(1), ci);
        ndarray::Zip::from(&mut dxc)
            .and(&dyc)
            .and(&xhc)
            .for_each(|o, &d, &xh| {
                *o = coeff * (mf * d - sdy - xh * sdyx);
            });
    }
    dx
}

mod conv {
    use super::Scalar;
    use ndarray::{Array2, Array4};

    pub fn out_dim(i: usize, k: usize, stride: usize, pad: usize) -> usize {
        (i + 2 * pad - k) / stride + 1
    }

    /// col[(ci*kh + i)*kw + j, b*oh*ow + y*ow + x] = x[b, ci, y*s - p + i, x*s - p + j]
    fn im2col<F: Scalar>(
        x: &Array4<F>,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        oh: usize,
        ow: usize,
    ) -> Array2<F> {
        let (b, ci, h, w) = x.dim();
        let mut col = Array2::<F>::zeros((ci * kh * kw, b * oh * ow));
        for bi in 0..b {
            for c in 0..ci {
                for i in 0..kh {
                    for j in 0..kw {
                        let row = (c * kh + i) * kw + j;
                        for y in 0..oh {
                            let iy = (y * stride + i) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for xo in 0..ow {
                                let ix = (xo * stride + j) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                col[[row, (bi * oh + y) * ow + xo]] =
                                    x[[bi, c, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Adjoint of im2col: scatters columns back into an image tensor.
    fn col2im<F: Scalar>(
        col: &Array2<F>,
        b: usize,
        ci: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        oh: usize,
        ow: usize,
    ) -> Array4<F> {
        let mut x = Array4::<F>::zeros((b, ci, h, w));
        for bi in 0..b {
            for c in 0..ci {
                for i in 0..kh {
                    for j in 0..kw {
                        let row = (c * kh + i) * kw + j;
                        for y in 0..oh {
                            let iy = (y * stride + i) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for xo in 0..ow {
                                let ix = (xo * stride + j) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                x[[bi, c, iy as usize, ix as usize]] +=
                                    col[[row, (bi * oh + y) * ow + xo]];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// out2 (co, B*oh*ow) -> (B, co, oh, ow)
    fn cols_to_out<F: Scalar>(out2: &Array2<F>, b: usize, oh: usize, ow: usize) -> Array4<F> {
        let co = out2.dim().0;
        let mut out = Array4::<F>::zeros((b, co, oh, ow));
        for c in 0..co {
            for bi in 0..b {
                for y in 0..oh {
                    for x in 0..ow {
                        out[[bi, c, y, x]] = out2[[c, (bi * oh + y) * ow + x]];
                    }
                }
            }
        }
        out
    }

    fn out_to_cols<F: Scalar>(out: &Array4<F>) -> Array2<F> {
        let (b, co, oh, ow) = out.dim();
        let mut out2 = Array2::<F>::zeros((co, b * oh * ow));
        for c in 0..co {
            for bi in 0..b {
                for y in 0..oh {
                    for x in 0..ow {
                        out2[[c, (bi * oh + y) * ow + x]] = out[[bi, c, y, x]];
                    }
                }
            }
        }
        out2
    }

    /// x: (B, Ci, H, W), w: (Co, Ci, kh, kw)
    pub fn conv2d_forward<F: Scalar>(
        x: &Array4<F>,
        w: &Array4<F>,
        stride: usize,
        pad: usize,
    ) -> Array4<F> {
        let (b, ci, h, wd) = x.dim();
        let (co, wci, kh, kw) = w.dim();
        assert_eq!(ci, wci, "conv2d channel mismatch");
        let oh = out_dim(h, kh, stride, pad);
        let ow = out_dim(wd, kw, stride, pad);
        let col = im2col(x, kh, kw, stride, pad, oh, ow);
        let w2 = w
            .view()
            .into_shape_with_order((co, ci * kh * kw))
            .unwrap();
        let out2 = w2.dot(&col);
        cols_to_out(&out2, b, oh, ow)
    }

    pub fn conv2d_backward<F: Scalar>(
        x: &Array4<F>,
        w: &Array4<F>,
        dy: &Array4<F>,
        stride: usize,
        pad: usize,
        need_dx: bool,
        need_dw: bool,
    ) -> (Option<Array4<F>>, Option<Array4<F>>) {
        let (b, ci, h, wd) = x.dim();
        let (co, _, kh, kw) = w.dim();
        let (_, _, oh, ow) = dy.dim();
        let dy2 = out_to_cols(dy);
        let w2 = w
            .view()
            .into_shape_with_order((co, ci * kh * kw))
            .unwrap();
        let dw = if need_dw {
            let col = im2col(x, kh, kw, stride, pad, oh, ow);
            let dw2 = dy2.dot(&col.t());
            Some(dw2.into_shape_with_order((co, ci, kh, kw)).unwrap())
        } else {
            None
        };
        let dx = if need_dx {
            let dcol = w2.t().dot(&dy2);
            Some(col2im(&dcol, b, ci, h, wd, kh, kw, stride, pad, oh, ow))
        } else {
            None
        };
        (dx, dw)
    }

    /// x: (B, Ci, H, W), w: (Ci, Co, kh, kw). Output spatial: (H-1)*s + k - 2p.
    pub fn convt2d_forward<F: Scalar>(
        x: &Array4<F>,
        w: &Array4<F>,
        stride: usize,
        pad: usize,
    ) -> Array4<F> {
        let (b, ci, h, wd) = x.dim();
        let (wci, co, kh, kw) = w.dim();
        assert_eq!(ci, wci, "conv_transpose2d channel mismatch");
        let oh = (h - 1) * stride + kh - 2 * pad;
        let ow = (wd - 1) * stride + kw - 2 * pad;
        let x2 = out_to_cols(x); // (ci, B*h*w)
        let w2 = w
            .view()
            .into_shape_with_order((ci, co * kh * kw))
            .unwrap();
        let dcol = w2.t().dot(&x2); // (co*kh*kw, B*h*w)
        col2im(&dcol, b, co, oh, ow, kh, kw, stride, pad, h, wd)
    }

    pub fn convt2d_backward<F: Scalar>(
        x: &Array4<F>,
        w: &Array4<F>,
        dy: &Array4<F>,
        stride: usize,
        pad: usize,
        need_dx: bool,
        need_dw: bool,
    ) -> (Option<Array4<F>>, Option<Array4<F>>) {
        let (b, ci, h, wd) = x.dim();
        let (_, co, kh, kw) = w.dim();
        let col_dy = im2col(dy, kh, kw, stride, pad, h, wd); // (co*kh*kw, B*h*w)
        let dx = if need_dx {
            let w2 = w
                .view()
                .into_shape_with_order((ci, co * kh * kw))
                .unwrap();
            let dx2 = w2.dot(&col_dy); // (ci, B*h*w)
            Some(cols_to_out_shaped(&dx2, b, ci, h, wd))
        } else {
            None
        };
        let dw = if need_dw {
            let x2 = out_to_cols(x); // (ci, B*h*w)
            let dw2 = x2.dot(&col_dy.t()); // (ci, co*kh*kw)
            Some(dw2.into_shape_with_order((ci, co, kh, kw)).unwrap())
        } else {
            None
        };
        (dx, dw)
    }

    fn cols_to_out_shaped<F: Scalar>(
        m: &Array2<F>,
        b: usize,
        c: usize,
        h: usize,
        w: usize,
    ) -> Array4<F> {
        let mut out = Array4::<F>::zeros((b, c, h, w));
        for ci in 0..c {
            for bi in 0..b {
                for y in 0..h {
                    for x in 0..w {
                        out[[bi, ci, y, x]] = m[[ci, (bi * h + y) * w + x]];
                    }
                }
            }
        }
        out
    }
}
