//! Layer building blocks; each holds parameter ids into the registry and
//! builds its forward pass on a graph through the [`Fwd`] context.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gaussian::VAR_FLOOR;
use crate::model::registry::{BnId, BnStore, ParamId, ParamRegistry};
use crate::scalar::Scalar;
use crate::tensor::conv::ConvSpec;
use crate::tensor::graph::{glu_block, BnBatchStats, BnMode, GluBranch, Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Forward-pass context: the tape, parameter leaves (indexed by `ParamId`),
/// batch-norm running stats, and a sink for train-mode batch statistics.
pub struct Fwd<'a, S: Scalar> {
    pub g: &'a mut Graph<S>,
    pub pm: &'a [NodeId],
    pub bn: &'a BnStore<S>,
    pub mode: Mode,
    pub bn_updates: &'a mut Vec<(BnId, BnBatchStats<S>)>,
}

impl<S: Scalar> Fwd<'_, S> {
    pub fn p(&self, id: ParamId) -> NodeId {
        self.pm[id.0]
    }
}

/// Weights are uniform in +-sqrt(1/fan_in); biases start at zero.
fn uniform_init<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| S::from_f64(rng.gen_range(-bound..bound)))
}

/// Bias value that makes a softplus variance head emit unit variance at
/// initialization: softplus(b) + floor = 1.
pub fn unit_variance_bias() -> f64 {
    ((1.0 - VAR_FLOOR).exp() - 1.0).ln()
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<S: Scalar>(
        reg: &mut ParamRegistry<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        spec: ConvSpec,
        bias_value: Option<f64>,
    ) -> Self {
        let fan_in = c_in * kernel.0 * kernel.1;
        let weight = reg.add(
            format!("{name}.weight"),
            uniform_init(rng, &[c_out, c_in, kernel.0, kernel.1], fan_in),
        );
        let bias = reg.add(
            format!("{name}.bias"),
            Tensor::full(&[c_out], S::from_f64(bias_value.unwrap_or(0.0))),
        );
        Conv2dLayer { weight, bias, spec }
    }

    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: NodeId) -> Result<NodeId> {
        f.g.conv2d(x, f.pm[self.weight.0], Some(f.pm[self.bias.0]), self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct Deconv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Deconv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<S: Scalar>(
        reg: &mut ParamRegistry<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        spec: ConvSpec,
        bias_value: Option<f64>,
    ) -> Self {
        let fan_in = c_in * kernel.0 * kernel.1;
        let weight = reg.add(
            format!("{name}.weight"),
            uniform_init(rng, &[c_in, c_out, kernel.0, kernel.1], fan_in),
        );
        let bias = reg.add(
            format!("{name}.bias"),
            Tensor::full(&[c_out], S::from_f64(bias_value.unwrap_or(0.0))),
        );
        Deconv2dLayer { weight, bias, spec }
    }

    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: NodeId) -> Result<NodeId> {
        f.g.deconv2d(x, f.pm[self.weight.0], Some(f.pm[self.bias.0]), self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub slot: BnId,
}

impl BnLayer {
    pub fn init<S: Scalar>(
        reg: &mut ParamRegistry<S>,
        bn: &mut BnStore<S>,
        name: &str,
        channels: usize,
    ) -> Self {
        let gamma = reg.add(format!("{name}.gamma"), Tensor::full(&[channels], S::one()));
        let beta = reg.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        BnLayer { gamma, beta, slot: bn.add(channels) }
    }

    fn mode<S: Scalar>(&self, f: &Fwd<S>) -> BnMode<S> {
        match f.mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => {
                let stats = f.bn.get(self.slot);
                BnMode::Eval { mean: stats.mean.clone(), var: stats.var.clone() }
            }
        }
    }

    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: NodeId) -> Result<NodeId> {
        let mode = self.mode(f);
        let (out, stats) = f.g.batch_norm(x, f.pm[self.gamma.0], f.pm[self.beta.0], mode)?;
        if let Some(stats) = stats {
            f.bn_updates.push((self.slot, stats));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearLayer {
    pub fn init<S: Scalar>(
        reg: &mut ParamRegistry<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias_value: Option<f64>,
    ) -> Self {
        let weight = reg.add(format!("{name}.weight"), uniform_init(rng, &[out_dim, in_dim], in_dim));
        let bias = reg.add(
            format!("{name}.bias"),
            Tensor::full(&[out_dim], S::from_f64(bias_value.unwrap_or(0.0))),
        );
        LinearLayer { weight, bias }
    }

    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: NodeId) -> Result<NodeId> {
        f.g.linear(x, f.pm[self.weight.0], f.pm[self.bias.0])
    }
}

/// One gated convolution block: two parallel conv (or deconv) + batch-norm
/// branches, the second gating the first through a sigmoid.
#[derive(Debug, Clone)]
pub struct GluBlock {
    value_weight: ParamId,
    value_bias: ParamId,
    value_bn: BnLayer,
    gate_weight: ParamId,
    gate_bias: ParamId,
    gate_bn: BnLayer,
    spec: ConvSpec,
    transposed: bool,
}

impl GluBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn init<S: Scalar>(
        reg: &mut ParamRegistry<S>,
        bn: &mut BnStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        spec: ConvSpec,
        transposed: bool,
    ) -> Self {
        let fan_in = c_in * kernel.0 * kernel.1;
        let wshape = if transposed {
            [c_in, c_out, kernel.0, kernel.1]
        } else {
            [c_out, c_in, kernel.0, kernel.1]
        };
        let value_weight =
            reg.add(format!("{name}.value.weight"), uniform_init(rng, &wshape, fan_in));
        let value_bias = reg.add(format!("{name}.value.bias"), Tensor::zeros(&[c_out]));
        let value_bn = BnLayer::init(reg, bn, &format!("{name}.value.bn"), c_out);
        let gate_weight =
            reg.add(format!("{name}.gate.weight"), uniform_init(rng, &wshape, fan_in));
        let gate_bias = reg.add(format!("{name}.gate.bias"), Tensor::zeros(&[c_out]));
        let gate_bn = BnLayer::init(reg, bn, &format!("{name}.gate.bn"), c_out);
        GluBlock {
            value_weight,
            value_bias,
            value_bn,
            gate_weight,
            gate_bias,
            gate_bn,
            spec,
            transposed,
        }
    }

    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: NodeId) -> Result<NodeId> {
        let value = GluBranch {
            kernel: f.pm[self.value_weight.0],
            bias: Some(f.pm[self.value_bias.0]),
            spec: self.spec,
            gamma: f.pm[self.value_bn.gamma.0],
            beta: f.pm[self.value_bn.beta.0],
            bn_mode: self.value_bn.mode(f),
        };
        let gate = GluBranch {
            kernel: f.pm[self.gate_weight.0],
            bias: Some(f.pm[self.gate_bias.0]),
            spec: self.spec,
            gamma: f.pm[self.gate_bn.gamma.0],
            beta: f.pm[self.gate_bn.beta.0],
            bn_mode: self.gate_bn.mode(f),
        };
        let (out, stats) = glu_block(f.g, x, value, gate, self.transposed)?;
        let mut stats = stats.into_iter();
        if let Some(s) = stats.next() {
            f.bn_updates.push((self.value_bn.slot, s));
        }
        if let Some(s) = stats.next() {
            f.bn_updates.push((self.gate_bn.slot, s));
        }
        Ok(out)
    }
}
