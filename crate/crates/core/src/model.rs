//! Network assembly: architecture descriptions, a layer stack with analytic
//! backward pass, and parameter bookkeeping.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{co_attentive_backward, co_attentive_map, AttentionKind, AttentionParams};
use crate::error::{shape_err, Error, Result};
use crate::gconv::{
    add_channel_bias, channel_bias_backward, correlate, correlate_backward, dense, dense_backward, global_average,
    global_average_backward, orientation_pool, orientation_pool_backward, relu, relu_backward, spatial_max_pool,
    spatial_max_pool_backward, FeatureMap, GConvParams,
};
use crate::group::{GroupKind, GroupSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchName {
    #[serde(rename = "z2cnn")]
    Z2Cnn,
    #[serde(rename = "p4cnn")]
    P4Cnn,
    #[serde(rename = "a-p4cnn")]
    AP4Cnn,
    #[serde(rename = "p4mcnn")]
    P4mCnn,
    #[serde(rename = "a-p4mcnn")]
    AP4mCnn,
}

impl ArchName {
    pub const ALL: [ArchName; 5] = [Self::Z2Cnn, Self::P4Cnn, Self::AP4Cnn, Self::P4mCnn, Self::AP4mCnn];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Z2Cnn => "z2cnn",
            Self::P4Cnn => "p4cnn",
            Self::AP4Cnn => "a-p4cnn",
            Self::P4mCnn => "p4mcnn",
            Self::AP4mCnn => "a-p4mcnn",
        }
    }

    pub fn group(self) -> GroupSpec {
        match self {
            Self::Z2Cnn => GroupSpec::trans(),
            Self::P4Cnn | Self::AP4Cnn => GroupSpec::p4(),
            Self::P4mCnn | Self::AP4mCnn => GroupSpec::p4m(),
        }
    }

    pub fn attention(self) -> Option<AttentionKind> {
        match self {
            Self::AP4Cnn => Some(AttentionKind::Circulant),
            Self::AP4mCnn => Some(AttentionKind::BlockCirculant),
            _ => None,
        }
    }
}

impl fmt::Display for ArchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown architecture '{s}'")))
    }
}

/// Layer-by-layer description of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: ArchName,
    pub in_channels: usize,
    /// Output channels of each convolution; the first one lifts.
    pub widths: Vec<usize>,
    pub kernel: usize,
    /// 2×2 spatial max pooling after these convolution indices.
    pub pool_after: Vec<usize>,
    /// Attention kind inserted after each convolution, if any.
    pub attention: Vec<Option<AttentionKind>>,
    pub classes: usize,
}

impl ArchSpec {
    /// Desk-scale default: four 3×3 convolutions of width 8, pooling after
    /// the second, orientation pooling, global average and a dense head.
    pub fn desk(name: ArchName) -> Self {
        let widths = vec![8; 4];
        let attention = vec![name.attention(); widths.len()];
        Self {
            name,
            in_channels: 1,
            widths,
            kernel: 3,
            pool_after: vec![1],
            attention,
            classes: 10,
        }
    }

    pub fn group(&self) -> GroupSpec {
        self.name.group()
    }

    pub fn attended_layers(&self) -> usize {
        self.attention.iter().filter(|a| a.is_some()).count()
    }
}

/// One convolution with optional attention on its raw responses, followed by
/// a per-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub params: GConvParams,
    pub spec: GroupSpec,
    pub lifting: bool,
    pub padding: usize,
    pub attention: Option<Vec<AttentionParams>>,
}

impl ConvBlock {
    /// `(correlation, after attention, after bias)`.
    pub fn forward_parts(&self, x: &FeatureMap) -> Result<(FeatureMap, FeatureMap, FeatureMap)> {
        let corr = correlate(x, &self.params, &self.spec, self.padding, self.lifting)?;
        let attended = match &self.attention {
            Some(att) => co_attentive_map(&corr, att)?,
            None => corr.clone(),
        };
        let out = add_channel_bias(&attended, &self.params.bias)?;
        Ok((corr, attended, out))
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward_parts(x)?.2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(ConvBlock),
    Relu,
    MaxPool(usize),
    OrientationPool,
    GlobalAverage,
    Dense { weights: Tensor, bias: Tensor },
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv(b) if b.attention.is_some() => "co-attentive conv",
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::MaxPool(_) => "maxpool",
            Layer::OrientationPool => "orientation pool",
            Layer::GlobalAverage => "global average",
            Layer::Dense { .. } => "dense",
        }
    }
}

/// What flows between layers.
#[derive(Clone, Debug, PartialEq)]
pub enum Activation {
    Map(FeatureMap),
    Flat(Tensor),
}

impl Activation {
    pub fn as_map(&self) -> Result<&FeatureMap> {
        match self {
            Activation::Map(m) => Ok(m),
            Activation::Flat(_) => shape_err("expected a feature map, got a flat vector"),
        }
    }

    pub fn as_flat(&self) -> Result<&Tensor> {
        match self {
            Activation::Flat(t) => Ok(t),
            Activation::Map(_) => shape_err("expected a flat vector, got a feature map"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Filter,
    Bias,
    Attention,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: ArchSpec,
    pub layers: Vec<Layer>,
}

/// Per-layer inputs (and attention inputs) kept for the backward pass.
pub struct ForwardTrace {
    inputs: Vec<Activation>,
    pre_attention: Vec<Option<FeatureMap>>,
    pub output: Tensor,
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Builds the network for `arch` with weights drawn from a seeded stream.
///
/// Filters use `N(0, 2/fan_in)`; attention vectors are drawn from the same
/// distribution as their layer's filters and then get a unit diagonal.
pub fn build_model(arch: &ArchSpec, seed: u64) -> Result<Model> {
    if arch.widths.is_empty() || arch.attention.len() != arch.widths.len() {
        return Err(Error::InvalidArgument("architecture needs one attention flag per convolution".into()));
    }
    let spec = arch.group();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = arch.kernel;
    let mut layers = Vec::new();
    let mut c_in = arch.in_channels;
    for (i, (&width, att)) in arch.widths.iter().zip(&arch.attention).enumerate() {
        let lifting = i == 0;
        let g_in = if lifting { 1 } else { spec.group_size() };
        let std = he_std(c_in * g_in * k * k);
        let filters = Tensor::randn(&[width, c_in, g_in, k, k], std, &mut rng);
        let params = GConvParams::new(filters, Tensor::zeros(&[width]))?;
        let attention = match att {
            Some(kind) => {
                if spec.kind() == GroupKind::Trans {
                    return Err(Error::InvalidArgument("attention needs a group axis".into()));
                }
                Some(
                    (0..width)
                        .map(|_| AttentionParams::init(*kind, spec.group_size(), std, &mut rng))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            None => None,
        };
        layers.push(Layer::Conv(ConvBlock {
            params,
            spec: spec.clone(),
            lifting,
            padding: k / 2,
            attention,
        }));
        layers.push(Layer::Relu);
        if arch.pool_after.contains(&i) {
            layers.push(Layer::MaxPool(2));
        }
        c_in = width;
    }
    layers.push(Layer::OrientationPool);
    layers.push(Layer::GlobalAverage);
    // the classifier feeds softmax, not relu: uniform ±1/√fan_in keeps early
    // logit gradients small enough that the last relu layer does not die
    let bound = 1.0 / (c_in as f64).sqrt();
    let weights = Tensor::rand_uniform(&[arch.classes, c_in], -bound, bound, &mut rng);
    layers.push(Layer::Dense {
        weights,
        bias: Tensor::zeros(&[arch.classes]),
    });
    Ok(Model {
        arch: arch.clone(),
        layers,
    })
}

impl Model {
    pub fn spec(&self) -> GroupSpec {
        self.arch.group()
    }

    /// Runs `images: [B,C,H,W]` through the network, returning `[B, classes]` logits.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let act = self.forward_layers(Activation::Map(FeatureMap::from_images(images)?), 0, self.layers.len())?;
        Ok(act.as_flat()?.clone())
    }

    /// Runs layers `[start, end)` on an activation.
    pub fn forward_layers(&self, mut act: Activation, start: usize, end: usize) -> Result<Activation> {
        for layer in &self.layers[start..end] {
            act = apply_layer(layer, &act)?.0;
        }
        Ok(act)
    }

    /// The group feature map just before orientation pooling.
    pub fn equivariant_features(&self, images: &Tensor) -> Result<FeatureMap> {
        let end = self.orientation_pool_index();
        let act = self.forward_layers(Activation::Map(FeatureMap::from_images(images)?), 0, end)?;
        Ok(act.as_map()?.clone())
    }

    pub fn orientation_pool_index(&self) -> usize {
        self.layers
            .iter()
            .position(|l| matches!(l, Layer::OrientationPool))
            .unwrap_or(self.layers.len())
    }

    pub fn forward_trace(&self, images: &Tensor) -> Result<ForwardTrace> {
        let mut act = Activation::Map(FeatureMap::from_images(images)?);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, pre) = apply_layer(layer, &act)?;
            inputs.push(act);
            pre_attention.push(pre);
            act = next;
        }
        Ok(ForwardTrace {
            inputs,
            pre_attention,
            output: act.as_flat()?.clone(),
        })
    }

    /// Gradients of every parameter (in [`Model::param_info`] order) given
    /// `∂L/∂logits`.
    pub fn backward(&self, trace: &ForwardTrace, grad_logits: &Tensor) -> Result<Vec<Tensor>> {
        let mut grads_rev: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers.len());
        let mut grad = grad_logits.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[i];
            let mut layer_grads = Vec::new();
            grad = match layer {
                Layer::Dense { weights, .. } => {
                    let (gx, gw, gb) = dense_backward(input.as_flat()?, weights, &grad)?;
                    layer_grads.push(gw);
                    layer_grads.push(gb);
                    gx
                }
                Layer::GlobalAverage => global_average_backward(input.as_map()?.data().shape(), &grad),
                Layer::OrientationPool => orientation_pool_backward(input.as_map()?, &grad)?,
                Layer::MaxPool(s) => spatial_max_pool_backward(input.as_map()?, *s, &grad)?,
                Layer::Relu => relu_backward(input.as_map()?.data(), &grad),
                Layer::Conv(block) => {
                    let x = input.as_map()?;
                    let gbias = channel_bias_backward(grad.shape(), &grad);
                    let (gcorr, gatt) = match (&block.attention, &trace.pre_attention[i]) {
                        (Some(att), Some(corr)) => {
                            let (g, ga) = co_attentive_backward(corr, att, &grad)?;
                            (g, ga)
                        }
                        _ => (grad, Vec::new()),
                    };
                    let (gx, gf) = correlate_backward(x, &block.params, &block.spec, block.padding, block.lifting, &gcorr)?;
                    layer_grads.push(gf);
                    layer_grads.push(gbias);
                    layer_grads.extend(gatt);
                    gx
                }
            };
            grads_rev.push(layer_grads);
        }
        Ok(grads_rev.into_iter().rev().flatten().collect())
    }

    pub fn param_info(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        let mut conv = 0;
        for layer in &self.layers {
            match layer {
                Layer::Conv(b) => {
                    out.push(ParamInfo {
                        name: format!("conv{conv}.filters"),
                        shape: b.params.filters.shape().to_vec(),
                        role: ParamRole::Filter,
                    });
                    out.push(ParamInfo {
                        name: format!("conv{conv}.bias"),
                        shape: b.params.bias.shape().to_vec(),
                        role: ParamRole::Bias,
                    });
                    for (l, a) in b.attention.iter().flatten().enumerate() {
                        out.push(ParamInfo {
                            name: format!("conv{conv}.attention{l}"),
                            shape: a.values().shape().to_vec(),
                            role: ParamRole::Attention,
                        });
                    }
                    conv += 1;
                }
                Layer::Dense { weights, bias } => {
                    out.push(ParamInfo {
                        name: "dense.weights".into(),
                        shape: weights.shape().to_vec(),
                        role: ParamRole::Dense,
                    });
                    out.push(ParamInfo {
                        name: "dense.bias".into(),
                        shape: bias.shape().to_vec(),
                        role: ParamRole::Dense,
                    });
                }
                _ => {}
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(b) => {
                    out.push(&b.params.filters);
                    out.push(&b.params.bias);
                    out.extend(b.attention.iter().flatten().map(|a| a.values()));
                }
                Layer::Dense { weights, bias } => {
                    out.push(weights);
                    out.push(bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(b) => {
                    out.push(&mut b.params.filters);
                    out.push(&mut b.params.bias);
                    out.extend(b.attention.iter_mut().flatten().map(|a| a.values_mut()));
                }
                Layer::Dense { weights, bias } => {
                    out.push(weights);
                    out.push(bias);
                }
                _ => {}
            }
        }
        out
    }

    /// Total number of learnable reals.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Format(format!(
                "parameter blob has {} values, model needs {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Applies one layer; for attended convolutions also returns the
/// pre-attention responses.
fn apply_layer(layer: &Layer, act: &Activation) -> Result<(Activation, Option<FeatureMap>)> {
    Ok(match layer {
        Layer::Conv(block) => {
            let (corr, _, out) = block.forward_parts(act.as_map()?)?;
            let pre = block.attention.as_ref().map(|_| corr);
            (Activation::Map(out), pre)
        }
        Layer::Relu => (Activation::Map(relu(act.as_map()?)), None),
        Layer::MaxPool(s) => (Activation::Map(spatial_max_pool(act.as_map()?, *s)?), None),
        Layer::OrientationPool => (Activation::Map(orientation_pool(act.as_map()?)?), None),
        Layer::GlobalAverage => (Activation::Flat(global_average(act.as_map()?)), None),
        Layer::Dense { weights, bias } => (Activation::Flat(dense(act.as_flat()?, weights, bias)?), None),
    })
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let &[b, c] = logits.shape() else {
        return shape_err(format!("logits must be [B,C], got {:?}", logits.shape()));
    };
    if labels.len() != b {
        return shape_err(format!("{} labels for {b} logits", labels.len()));
    }
    let mut grad = vec![0.0; b * c];
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::InvalidArgument(format!("label {y} out of range for {c} classes")));
        }
        let row = &logits.data()[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for j in 0..c {
            let p = (row[j] - lse).exp();
            grad[i * c + j] = (p - f64::from(u8::from(j == y))) / b as f64;
        }
    }
    Ok((loss / b as f64, Tensor::new(vec![b, c], grad)?))
}

/// Index of the largest entry of each row, lowest index on ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, relative_error};

    #[test]
    fn attended_variants_add_channels_times_group_size() {
        let base = build_model(&ArchSpec::desk(ArchName::P4Cnn), 0).unwrap();
        let att = build_model(&ArchSpec::desk(ArchName::AP4Cnn), 0).unwrap();
        let arch = ArchSpec::desk(ArchName::AP4Cnn);
        let expect: usize = arch.widths.iter().map(|w| w * 4).sum();
        assert_eq!(att.param_count() - base.param_count(), expect);
        assert_eq!(att.param_count() - base.param_count(), 4 * 8 * 4);

        let base = build_model(&ArchSpec::desk(ArchName::P4mCnn), 0).unwrap();
        let att = build_model(&ArchSpec::desk(ArchName::AP4mCnn), 0).unwrap();
        assert_eq!(att.param_count() - base.param_count(), 4 * 8 * 2 * 4);
    }

    #[test]
    fn hand_counted_p4cnn_parameters() {
        let m = build_model(&ArchSpec::desk(ArchName::P4Cnn), 0).unwrap();
        let lift = 8 * 9 + 8;
        let group = 8 * 8 * 4 * 9 + 8;
        let head = 8 * 10 + 10;
        assert_eq!(m.param_count(), lift + 3 * group + head);
    }

    #[test]
    fn z2cnn_has_trivial_group_axis() {
        let m = build_model(&ArchSpec::desk(ArchName::Z2Cnn), 0).unwrap();
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        let trace = m.forward_trace(&x).unwrap();
        for act in &trace.inputs {
            if let Activation::Map(f) = act {
                assert_eq!(f.group_size(), 1);
            }
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&ArchSpec::desk(ArchName::AP4Cnn), 42).unwrap();
        let b = build_model(&ArchSpec::desk(ArchName::AP4Cnn), 42).unwrap();
        let c = build_model(&ArchSpec::desk(ArchName::AP4Cnn), 43).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn attention_is_identity_initialised_on_the_diagonal() {
        let m = build_model(&ArchSpec::desk(ArchName::AP4mCnn), 1).unwrap();
        for layer in &m.layers {
            if let Layer::Conv(b) = layer {
                for a in b.attention.as_ref().unwrap() {
                    let mat = a.materialize();
                    assert!((0..8).all(|i| mat.get(&[i, i]) == 1.0));
                }
            }
        }
    }

    #[test]
    fn unknown_arch_is_an_error() {
        assert!("resnet".parse::<ArchName>().is_err());
        assert_eq!("a-p4mcnn".parse::<ArchName>().unwrap(), ArchName::AP4mCnn);
    }

    #[test]
    fn whole_model_gradient_matches_finite_differences() {
        let mut arch = ArchSpec::desk(ArchName::AP4Cnn);
        arch.widths = vec![2, 2];
        arch.attention = vec![Some(AttentionKind::Circulant); 2];
        arch.pool_after = vec![0];
        let model = build_model(&arch, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[2, 1, 6, 6], 1.0, &mut rng);
        let labels = [3, 7];
        let trace = model.forward_trace(&x).unwrap();
        let (_, gl) = cross_entropy(&trace.output, &labels).unwrap();
        let grads = model.backward(&trace, &gl).unwrap();
        let flat = Tensor::from_vec(model.flat_params());
        let analytic = Tensor::from_vec(grads.iter().flat_map(|g| g.data().iter().copied()).collect());
        let numeric = finite_diff_grad(
            |p| {
                let mut m = model.clone();
                m.set_flat_params(p.data()).unwrap();
                cross_entropy(&m.forward(&x).unwrap(), &labels).unwrap().0
            },
            &flat,
            1e-4,
        );
        assert!(relative_error(&analytic, &numeric, 1e-10) < 1e-4);
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::randn(&[3, 10], 2.0, &mut rng);
        let labels = [0, 9, 4];
        let (_, g) = cross_entropy(&logits, &labels).unwrap();
        let n = finite_diff_grad(|t| cross_entropy(t, &labels).unwrap().0, &logits, 1e-4);
        assert!(relative_error(&g, &n, 1e-12) < 1e-6);
        assert!(cross_entropy(&logits, &[0, 1]).is_err());
        assert!(cross_entropy(&logits, &[0, 1, 10]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 3.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0]);
    }
}
