//! Small CAM-ready conv net: `[conv -> ReLU] x L -> global pool -> linear`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

use super::conv::{conv2d_backward, conv2d_forward, ConvCache};
use super::loss::{softmax, softmax_cross_entropy};
use super::pool::{global_pool, global_pool_backward, PoolCache, PoolMode};
use super::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub out_channels: usize,
    #[serde(default = "one")]
    pub stride: usize,
    /// Defaults to `kernel / 2` ("same" padding at stride 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
}

fn one() -> usize {
    1
}

impl ConvLayerSpec {
    pub fn new(kernel: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            kernel,
            out_channels,
            stride,
            padding: None,
        }
    }

    pub fn pad(&self) -> usize {
        self.padding.unwrap_or(self.kernel / 2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvNetConfig {
    pub in_channels: usize,
    pub layers: Vec<ConvLayerSpec>,
    pub head: PoolMode,
    pub num_classes: usize,
}

impl ConvNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("network.in_channels must be >= 1".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("network.layers must not be empty".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "network.num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel == 0 || l.kernel % 2 == 0 {
                return Err(Error::Config(format!(
                    "network.layers[{i}].kernel must be odd and >= 1, got {}",
                    l.kernel
                )));
            }
            if l.out_channels == 0 || l.stride == 0 {
                return Err(Error::Config(format!(
                    "network.layers[{i}]: out_channels and stride must be >= 1"
                )));
            }
        }
        Ok(())
    }

    /// M, the number of feature maps entering the classifier.
    pub fn feature_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    /// Spatial extent of the final feature maps for an `h x w` input.
    pub fn feature_extent(&self, h: usize, w: usize) -> (usize, usize) {
        self.layers.iter().fold((h, w), |(h, w), l| {
            let p = l.pad();
            (
                (h + 2 * p).saturating_sub(l.kernel) / l.stride + 1,
                (w + 2 * p).saturating_sub(l.kernel) / l.stride + 1,
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// All trainable tensors. Also used to hold gradients and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub convs: Vec<ConvParams>,
    /// N x M classification matrix; row `c` weights the feature maps for class `c`.
    pub classifier: Tensor,
    pub classifier_bias: Tensor,
}

impl ModelParams {
    /// He-style uniform init, zero biases.
    pub fn init(config: &ConvNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[rng::tag::INIT]);
        let mut in_c = config.in_channels;
        let mut convs = Vec::with_capacity(config.layers.len());
        for l in &config.layers {
            let fan_in = (in_c * l.kernel * l.kernel) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let weight = Tensor::from_fn(&[l.out_channels, in_c, l.kernel, l.kernel], |_| {
                rng.random_range(-bound..bound)
            });
            convs.push(ConvParams {
                weight,
                bias: Tensor::zeros(&[l.out_channels]),
            });
            in_c = l.out_channels;
        }
        let bound = (6.0 / in_c as f64).sqrt();
        let classifier = Tensor::from_fn(&[config.num_classes, in_c], |_| {
            rng.random_range(-bound..bound)
        });
        Ok(Self {
            convs,
            classifier,
            classifier_bias: Tensor::zeros(&[config.num_classes]),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            convs: self
                .convs
                .iter()
                .map(|c| ConvParams {
                    weight: Tensor::zeros(c.weight.shape()),
                    bias: Tensor::zeros(c.bias.shape()),
                })
                .collect(),
            classifier: Tensor::zeros(self.classifier.shape()),
            classifier_bias: Tensor::zeros(self.classifier_bias.shape()),
        }
    }

    /// Tensors in declaration order with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(2 * self.convs.len() + 2);
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), &c.weight));
            out.push((format!("conv{i}.bias"), &c.bias));
        }
        out.push(("classifier.weight".into(), &self.classifier));
        out.push(("classifier.bias".into(), &self.classifier_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.convs.len() + 2);
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.classifier);
        out.push(&mut self.classifier_bias);
        out
    }

    pub fn num_values(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// `self += alpha * other`, element-wise over matching tensors.
    pub fn add_scaled(&mut self, other: &ModelParams, alpha: f64) {
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(other.named_tensors()) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += alpha * s;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= alpha);
        }
    }

    /// Rebuilds parameters from tensors in [`named_tensors`](Self::named_tensors) order,
    /// checking every shape against `config`.
    pub fn from_tensors(config: &ConvNetConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let expected = Self::expected_shapes(config);
        if tensors.len() != expected.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (i, (t, e)) in tensors.iter().zip(&expected).enumerate() {
            if t.shape() != e.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter tensor {i}: shape {:?} does not match config {:?}",
                    t.shape(),
                    e
                )));
            }
        }
        let mut it = tensors.into_iter();
        let convs = (0..config.layers.len())
            .map(|_| ConvParams {
                weight: it.next().unwrap(),
                bias: it.next().unwrap(),
            })
            .collect();
        Ok(Self {
            convs,
            classifier: it.next().unwrap(),
            classifier_bias: it.next().unwrap(),
        })
    }

    pub fn expected_shapes(config: &ConvNetConfig) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut in_c = config.in_channels;
        for l in &config.layers {
            shapes.push(vec![l.out_channels, in_c, l.kernel, l.kernel]);
            shapes.push(vec![l.out_channels]);
            in_c = l.out_channels;
        }
        shapes.push(vec![config.num_classes, in_c]);
        shapes.push(vec![config.num_classes]);
        shapes
    }

    pub fn check_against(&self, config: &ConvNetConfig) -> Result<()> {
        let expected = Self::expected_shapes(config);
        let actual = self.named_tensors();
        if actual.len() != expected.len()
            || actual
                .iter()
                .zip(&expected)
                .any(|((_, t), e)| t.shape() != e.as_slice())
        {
            return Err(Error::Shape(
                "model parameters do not match the network config".into(),
            ));
        }
        Ok(())
    }

    pub fn classifier_row(&self, class: usize) -> &[f64] {
        let m = self.classifier.shape()[1];
        &self.classifier.data()[class * m..(class + 1) * m]
    }
}

/// Called after each conv+ReLU with the layer index and its activation.
/// Returning a per-position mask (true = hidden, length H*W) marks those
/// positions as overwritten constants, so no gradient flows through them.
pub type ActivationHook<'a> = dyn FnMut(usize, &mut Tensor) -> Result<Option<Vec<bool>>> + 'a;

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    conv_caches: Vec<ConvCache>,
    activations: Vec<Tensor>,
    hidden: Vec<Option<Vec<bool>>>,
    pool_cache: PoolCache,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ForwardPass {
    /// Final conv feature maps F_1..F_M (after ReLU).
    pub fn features(&self) -> &Tensor {
        self.activations.last().expect("network has at least one layer")
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    /// Which ReLUs are active and which positions win the max pool. Two passes
    /// with the same regime lie on the same linear piece of the network.
    pub fn regime(&self) -> (Vec<bool>, Vec<usize>) {
        let relu = self
            .activations
            .iter()
            .flat_map(|a| a.data().iter().map(|&v| v > 0.0))
            .collect();
        (relu, self.pool_cache.argmax().to_vec())
    }
}

pub fn forward(config: &ConvNetConfig, params: &ModelParams, input: &Tensor) -> Result<ForwardPass> {
    forward_with_hook(config, params, input, None)
}

pub fn forward_with_hook(
    config: &ConvNetConfig,
    params: &ModelParams,
    input: &Tensor,
    mut hook: Option<&mut ActivationHook<'_>>,
) -> Result<ForwardPass> {
    let (c, _, _) = input.dims3()?;
    if c != config.in_channels {
        return Err(Error::Shape(format!(
            "input has {c} channels, network expects {}",
            config.in_channels
        )));
    }
    if params.convs.len() != config.layers.len() {
        return Err(Error::Shape(format!(
            "{} conv parameter sets for {} layers",
            params.convs.len(),
            config.layers.len()
        )));
    }
    let mut conv_caches = Vec::with_capacity(config.layers.len());
    let mut activations: Vec<Tensor> = Vec::with_capacity(config.layers.len());
    let mut hidden = Vec::with_capacity(config.layers.len());
    for (i, (spec, p)) in config.layers.iter().zip(&params.convs).enumerate() {
        let x = if i == 0 { input } else { &activations[i - 1] };
        let (mut y, cache) = conv2d_forward(x, &p.weight, p.bias.data(), spec.stride, spec.pad())?;
        y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let mask = match hook.as_mut() {
            Some(h) => h(i, &mut y)?,
            None => None,
        };
        conv_caches.push(cache);
        activations.push(y);
        hidden.push(mask);
    }
    let features = activations.last().unwrap();
    let (pooled, pool_cache) = global_pool(features, config.head)?;
    let m = pooled.len();
    if params.classifier.shape() != [config.num_classes, m] {
        return Err(Error::Shape(format!(
            "classifier shape {:?} != [{}, {m}]",
            params.classifier.shape(),
            config.num_classes
        )));
    }
    let logits = (0..config.num_classes)
        .map(|n| {
            params.classifier_row(n)
                .iter()
                .zip(&pooled)
                .fold(params.classifier_bias.data()[n], |acc, (w, f)| acc + w * f)
        })
        .collect();
    Ok(ForwardPass {
        conv_caches,
        activations,
        hidden,
        pool_cache,
        pooled,
        logits,
    })
}

/// Gradients of all parameters (same layout as [`ModelParams`]) and of the input.
pub fn backward(
    params: &ModelParams,
    pass: &ForwardPass,
    grad_logits: &[f64],
) -> Result<(ModelParams, Tensor)> {
    let n = params.classifier.shape()[0];
    let m = pass.pooled.len();
    if grad_logits.len() != n {
        return Err(Error::Shape(format!(
            "grad_logits length {} != classes {n}",
            grad_logits.len()
        )));
    }
    let mut grads = params.zeros_like();
    let mut grad_pooled = vec![0.0; m];
    {
        let gw = grads.classifier.data_mut();
        for (c, &g) in grad_logits.iter().enumerate() {
            let row = params.classifier_row(c);
            for j in 0..m {
                gw[c * m + j] = g * pass.pooled[j];
                grad_pooled[j] += row[j] * g;
            }
        }
    }
    grads.classifier_bias.data_mut().copy_from_slice(grad_logits);

    let mut grad = global_pool_backward(&grad_pooled, &pass.pool_cache)?;
    for i in (0..params.convs.len()).rev() {
        let act = &pass.activations[i];
        if let Some(mask) = &pass.hidden[i] {
            let plane = mask.len();
            for ch in grad.data_mut().chunks_exact_mut(plane) {
                for (g, &h) in ch.iter_mut().zip(mask) {
                    if h {
                        *g = 0.0;
                    }
                }
            }
        }
        for (g, &a) in grad.data_mut().iter_mut().zip(act.data()) {
            if a <= 0.0 {
                *g = 0.0;
            }
        }
        let cg = conv2d_backward(&grad, &pass.conv_caches[i], &params.convs[i].weight)?;
        grads.convs[i].weight = cg.weights;
        grads.convs[i].bias.data_mut().copy_from_slice(&cg.bias);
        grad = cg.input;
    }
    Ok((grads, grad))
}

/// Cross-entropy loss and parameter gradients for one labelled input.
pub fn loss_and_grad(
    config: &ConvNetConfig,
    params: &ModelParams,
    input: &Tensor,
    label: usize,
    hook: Option<&mut ActivationHook<'_>>,
) -> Result<(f64, ModelParams, ForwardPass)> {
    let pass = forward_with_hook(config, params, input, hook)?;
    let (loss, grad_logits) = softmax_cross_entropy(&pass.logits, label)?;
    let (grads, _) = backward(params, &pass, &grad_logits)?;
    Ok((loss, grads, pass))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ConvNetConfig {
        ConvNetConfig {
            in_channels: 2,
            layers: vec![ConvLayerSpec::new(3, 4, 1), ConvLayerSpec::new(3, 3, 2)],
            head: PoolMode::Avg,
            num_classes: 3,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        assert!(c.validate().is_ok());
        c.layers[0].kernel = 2;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.num_classes = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = tiny();
        let p = ModelParams::init(&cfg, 1).unwrap();
        assert_eq!(p.classifier.shape(), &[3, cfg.feature_channels()]);
        p.check_against(&cfg).unwrap();
        let x = Tensor::filled(&[2, 7, 7], 0.5);
        let pass = forward(&cfg, &p, &x).unwrap();
        assert_eq!(pass.features().shape(), &[3, 4, 4]);
        assert_eq!(cfg.feature_extent(7, 7), (4, 4));
        assert_eq!(pass.logits.len(), 3);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny();
        assert_eq!(
            ModelParams::init(&cfg, 9).unwrap(),
            ModelParams::init(&cfg, 9).unwrap()
        );
        assert_ne!(
            ModelParams::init(&cfg, 9).unwrap(),
            ModelParams::init(&cfg, 10).unwrap()
        );
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let cfg = tiny();
        let p = ModelParams::init(&cfg, 1).unwrap();
        assert!(forward(&cfg, &p, &Tensor::zeros(&[3, 5, 5])).is_err());
    }
}
