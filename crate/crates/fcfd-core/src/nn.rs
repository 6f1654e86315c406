//! Layers. A layer owns handles into a [`ParamStore`] and a [`NormStore`];
//! the numeric work happens on a [`Graph`].

use ndarray::ArrayD;
use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId, Scalar};
use crate::params::{uniform_fan_in, ParamId, ParamStore};
use crate::pathing::{MissingStatsPolicy, Mode, NormId, NormStore, PathKey, RoutedNormState};

/// Per-forward routing context. `key` identifies the provenance of the
/// current activation; `pure_key` is the owning model's single-network key
/// at the current stage, used by the eval-mode fallback policy.
#[derive(Clone, Debug)]
pub struct FwdCtx {
    pub mode: Mode,
    pub key: PathKey,
    pub pure_key: Option<PathKey>,
    pub policy: MissingStatsPolicy,
}

impl FwdCtx {
    pub fn new(mode: Mode) -> Self {
        FwdCtx {
            mode,
            key: PathKey::empty(),
            pure_key: None,
            policy: MissingStatsPolicy::Strict,
        }
    }

    pub fn with_policy(mode: Mode, policy: MissingStatsPolicy) -> Self {
        FwdCtx {
            mode,
            key: PathKey::empty(),
            pure_key: None,
            policy,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv2d {
        w: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        w: ParamId,
        stride: usize,
        pad: usize,
    },
    Linear {
        w: ParamId,
        bias: ParamId,
    },
    BatchNorm {
        norm: NormId,
        gamma: ParamId,
        beta: ParamId,
    },
    Relu,
    LeakyRelu {
        slope: f64,
    },
    GlobalAvgPool,
    Flatten,
    /// body(x) + shortcut(x), then ReLU. Empty shortcut means identity.
    Residual {
        body: Vec<Layer>,
        shortcut: Vec<Layer>,
    },
    /// x -> (5x^2 - 1, 2x + 2) on a (B,1,1,1) input.
    ToyPolyFeature,
    /// (m1, m2) -> m1^4 + 5 m2^2, reshaped to (B,1) logits.
    ToyPolyHead,
    /// x -> (w1*x, w2*x): the two-parameter toy student map.
    ToyLinearFeature {
        w: ParamId,
    },
}

impl Layer {
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        params: &ParamStore<F>,
        norms: &mut NormStore<F>,
        ctx: &FwdCtx,
        x: NodeId,
    ) -> Result<NodeId> {
        match self {
            Layer::Conv2d {
                w,
                bias,
                stride,
                pad,
            } => {
                let wn = g.param(params.value(*w).clone(), params.pref(*w), !params.frozen);
                let mut out = g.conv2d(x, wn, *stride, *pad);
                if let Some(b) = bias {
                    let bn = g.param(params.value(*b).clone(), params.pref(*b), !params.frozen);
                    out = g.add_bias(out, bn);
                }
                Ok(out)
            }
            Layer::ConvTranspose2d { w, stride, pad } => {
                let wn = g.param(params.value(*w).clone(), params.pref(*w), !params.frozen);
                Ok(g.conv_transpose2d(x, wn, *stride, *pad))
            }
            Layer::Linear { w, bias } => {
                let wn = g.param(params.value(*w).clone(), params.pref(*w), !params.frozen);
                let bn = g.param(
                    params.value(*bias).clone(),
                    params.pref(*bias),
                    !params.frozen,
                );
                let y = g.matmul(x, wn);
                Ok(g.add_bias(y, bn))
            }
            Layer::BatchNorm { norm, gamma, beta } => {
                let gn = g.param(
                    params.value(*gamma).clone(),
                    params.pref(*gamma),
                    !params.frozen,
                );
                let bn = g.param(
                    params.value(*beta).clone(),
                    params.pref(*beta),
                    !params.frozen,
                );
                crate::pathing::routed_norm_forward(
                    norms.get_mut(*norm),
                    g,
                    x,
                    gn,
                    bn,
                    &ctx.key,
                    ctx.mode,
                    &ctx.policy,
                    ctx.pure_key.as_ref(),
                )
            }
            Layer::Relu => Ok(g.relu(x)),
            Layer::LeakyRelu { slope } => Ok(g.leaky_relu(x, F::f(*slope))),
            Layer::GlobalAvgPool => Ok(g.global_avg_pool(x)),
            Layer::Flatten => {
                let shape = g.value(x).shape().to_vec();
                let b = shape[0];
                let rest: usize = shape[1..].iter().product();
                Ok(g.reshape(x, &[b, rest]))
            }
            Layer::Residual { body, shortcut } => {
                let mut h = x;
                for l in body {
                    h = l.forward(g, params, norms, ctx, h)?;
                }
                let mut s = x;
                for l in shortcut {
                    s = l.forward(g, params, norms, ctx, s)?;
                }
                let sum = g.add(h, s);
                Ok(g.relu(sum))
            }
            Layer::ToyPolyFeature => {
                let x2 = g.powi(x, 2);
                let m1a = g.mul_scalar(x2, F::f(5.0));
                let m1 = g.add_scalar(m1a, F::f(-1.0));
                let m2a = g.mul_scalar(x, F::f(2.0));
                let m2 = g.add_scalar(m2a, F::f(2.0));
                Ok(g.concat_channels(&[m1, m2]))
            }
            Layer::ToyPolyHead => {
                let b = g.value(x).shape()[0];
                let m1 = g.slice_channel(x, 0);
                let m2 = g.slice_channel(x, 1);
                let p1 = g.powi(m1, 4);
                let p2a = g.powi(m2, 2);
                let p2 = g.mul_scalar(p2a, F::f(5.0));
                let out = g.add(p1, p2);
                Ok(g.reshape(out, &[b, 1]))
            }
            Layer::ToyLinearFeature { w } => {
                let b = g.value(x).shape()[0];
                let wn = g.param(params.value(*w).clone(), params.pref(*w), !params.frozen);
                let x2 = g.reshape(x, &[b, 1]);
                let y = g.matmul(x2, wn); // (B,1) x (1,2) -> (B,2)
                Ok(g.reshape(y, &[b, 2, 1, 1]))
            }
        }
    }

    /// Sequentially applies a slice of layers.
    pub fn forward_seq<F: Scalar>(
        layers: &[Layer],
        g: &mut Graph<F>,
        params: &ParamStore<F>,
        norms: &mut NormStore<F>,
        ctx: &FwdCtx,
        mut x: NodeId,
    ) -> Result<NodeId> {
        for l in layers {
            x = l.forward(g, params, norms, ctx, x)?;
        }
        Ok(x)
    }
}

/// 3x3 (or kxk) convolution without bias; BatchNorm is expected to follow.
pub fn conv2d<F: Scalar, R: Rng>(
    params: &mut ParamStore<F>,
    rng: &mut R,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Layer {
    let fan_in = cin * k * k;
    let w = params.add(
        format!("{name}.w"),
        uniform_fan_in(rng, &[cout, cin, k, k], fan_in),
    );
    Layer::Conv2d {
        w,
        bias: None,
        stride,
        pad,
    }
}

pub fn conv_transpose2d<F: Scalar, R: Rng>(
    params: &mut ParamStore<F>,
    rng: &mut R,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Layer {
    let fan_in = cin * k * k;
    let w = params.add(
        format!("{name}.w"),
        uniform_fan_in(rng, &[cin, cout, k, k], fan_in),
    );
    Layer::ConvTranspose2d { w, stride, pad }
}

pub fn linear<F: Scalar, R: Rng>(
    params: &mut ParamStore<F>,
    rng: &mut R,
    name: &str,
    din: usize,
    dout: usize,
) -> Layer {
    let w = params.add(format!("{name}.w"), uniform_fan_in(rng, &[din, dout], din));
    let bias = params.add(format!("{name}.b"), uniform_fan_in(rng, &[dout], din));
    Layer::Linear { w, bias }
}

/// Batch normalization with scale 1 / shift 0 affine initialization.
pub fn batch_norm<F: Scalar>(
    params: &mut ParamStore<F>,
    norms: &mut NormStore<F>,
    name: &str,
    channels: usize,
    routed: bool,
) -> Layer {
    let gamma = params.add(format!("{name}.gamma"), ArrayD::ones(ndarray::IxDyn(&[channels])));
    let beta = params.add(format!("{name}.beta"), ArrayD::zeros(ndarray::IxDyn(&[channels])));
    let norm = norms.add(RoutedNormState::new(name, channels, routed));
    Layer::BatchNorm { norm, gamma, beta }
}

/// conv3x3 -> BN -> ReLU.
#[allow(clippy::too_many_arguments)]
pub fn conv_bn_relu<F: Scalar, R: Rng>(
    params: &mut ParamStore<F>,
    norms: &mut NormStore<F>,
    rng: &mut R,
    name: &str,
    cin: usize,
    cout: usize,
    stride: usize,
    routed: bool,
) -> Vec<Layer> {
    vec![
        conv2d(params, rng, &format!("{name}.conv"), cin, cout, 3, stride, 1),
        batch_norm(params, norms, &format!("{name}.bn"), cout, routed),
        Layer::Relu,
    ]
}

/// Basic residual block: two 3x3 conv+BN with a projection shortcut when the
/// shape changes, ReLU after the merge.
#[allow(clippy::too_many_arguments)]
pub fn residual_block<F: Scalar, R: Rng>(
    params: &mut ParamStore<F>,
    norms: &mut NormStore<F>,
    rng: &mut R,
    name: &str,
    cin: usize,
    cout: usize,
    stride: usize,
    routed: bool,
) -> Layer {
    let body = vec![
        conv2d(params, rng, &format!("{name}.conv1"), cin, cout, 3, stride, 1),
        batch_norm(params, norms, &format!("{name}.bn1"), cout, routed),
        Layer::Relu,
        conv2d(params, rng, &format!("{name}.conv2"), cout, cout, 3, 1, 1),
        batch_norm(params, norms, &format!("{name}.bn2"), cout, routed),
    ];
    let shortcut = if cin != cout || stride != 1 {
        vec![
            conv2d(params, rng, &format!("{name}.sc.conv"), cin, cout, 1, stride, 0),
            batch_norm(params, norms, &format!("{name}.sc.bn"), cout, routed),
        ]
    } else {
        Vec::new()
    };
    Layer::Residual { body, shortcut }
}
