//! Convolutional feature extractor.
//!
//! `input -> [conv -> ReLU]* -> global average pool -> head (linear)`.
//! Features for clustering are the pooled vector, i.e. the layer right
//! before the final linear head.

use serde::{Deserialize, Serialize};

use super::layers::{relu_backward_in_place, relu_in_place, Conv2d, Linear};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
            padding,
        }
    }
}

pub const HEAD_LAYER: &str = "head";

/// How image intensities are mapped to encoder input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputNorm {
    /// `[0, 1] -> [-1, 1]`.
    #[default]
    Unit,
    /// Zero mean and unit standard deviation per image.
    Standardize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub name: String,
    /// `(height, width)` the encoder consumes; images are resized to it.
    pub input_size: (usize, usize),
    pub convs: Vec<ConvSpec>,
    /// Width of the pooled feature vector; equals the last conv's channels.
    pub feature_dim: usize,
    /// Layer ids (`conv1`, `conv2`, ...) used for GradCAM.
    pub attribution_layers: [String; 2],
    /// Id of the final linear layer removed at extraction time.
    pub final_linear: String,
    #[serde(default)]
    pub input_norm: InputNorm,
}

impl EncoderSpec {
    fn with_convs(name: &str, input_size: (usize, usize), convs: Vec<ConvSpec>) -> Self {
        let n = convs.len();
        Self {
            name: name.into(),
            input_size,
            feature_dim: convs.last().map_or(0, |c| c.out_channels),
            attribution_layers: [format!("conv{}", n - 1), format!("conv{n}")],
            final_linear: HEAD_LAYER.into(),
            input_norm: InputNorm::Unit,
            convs,
        }
    }

    fn standardized(name: &str, input_size: (usize, usize), convs: Vec<ConvSpec>) -> Self {
        Self {
            input_norm: InputNorm::Standardize,
            ..Self::with_convs(name, input_size, convs)
        }
    }

    /// Default desk-scale encoder: 64x64 standardized input, 128 features.
    pub fn desk() -> Self {
        Self::standardized(
            "desk",
            (64, 64),
            vec![
                ConvSpec::new(16, 5, 2, 2),
                ConvSpec::new(32, 3, 2, 1),
                ConvSpec::new(64, 3, 1, 1),
                ConvSpec::new(128, 3, 1, 1),
            ],
        )
    }

    /// Small encoder sized for single-core CPU runs: 64x64 standardized
    /// input, 32 features, attribution layers at 16x16.
    pub fn tiny() -> Self {
        Self::standardized(
            "tiny",
            (64, 64),
            vec![
                ConvSpec::new(8, 5, 2, 2),
                ConvSpec::new(16, 3, 2, 1),
                ConvSpec::new(16, 3, 1, 1),
                ConvSpec::new(32, 3, 1, 1),
            ],
        )
    }

    /// Full-resolution 208x256 input with 2048 pooled features. A plain
    /// strided conv stack standing in for a wide residual network; the
    /// feature width is what downstream modules depend on.
    pub fn full_scale() -> Self {
        Self::standardized(
            "full_scale",
            (208, 256),
            vec![
                ConvSpec::new(64, 7, 2, 3),
                ConvSpec::new(128, 3, 2, 1),
                ConvSpec::new(256, 3, 2, 1),
                ConvSpec::new(512, 3, 2, 1),
                ConvSpec::new(1024, 3, 1, 1),
                ConvSpec::new(2048, 3, 1, 1),
            ],
        )
    }

    /// Two-layer toy encoder for gradient checks.
    pub fn toy(input_size: (usize, usize), channels: usize) -> Self {
        Self::with_convs(
            "toy",
            input_size,
            vec![ConvSpec::new(3, 3, 2, 1), ConvSpec::new(channels, 3, 1, 1)],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.convs.is_empty() {
            return Err(Error::invalid("encoder needs at least one conv layer"));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature_dim must be positive"));
        }
        let last = self.convs.last().expect("non-empty").out_channels;
        if last != self.feature_dim {
            return Err(Error::invalid(format!(
                "feature_dim {} differs from last conv width {last}",
                self.feature_dim
            )));
        }
        for id in &self.attribution_layers {
            self.conv_index(id)?;
        }
        if self.final_linear != HEAD_LAYER {
            return Err(Error::invalid(format!(
                "unknown final linear layer `{}`",
                self.final_linear
            )));
        }
        Ok(())
    }

    /// Position of a `convN` layer id in the stack.
    pub fn conv_index(&self, id: &str) -> Result<usize> {
        id.strip_prefix("conv")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n >= 1 && n <= self.convs.len())
            .map(|n| n - 1)
            .ok_or_else(|| Error::invalid(format!("unresolvable layer id `{id}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub convs: Vec<Conv2d>,
    pub head: Linear,
    pub offset: usize,
}

/// Activations cached by a forward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub input: Vec<f64>,
    /// Post-ReLU output of each conv layer, channel-major.
    pub activations: Vec<Vec<f64>>,
    pub pooled: Vec<f64>,
    pub output: Vec<f64>,
}

impl Encoder {
    pub fn new(spec: &EncoderSpec, offset: usize) -> Result<Self> {
        spec.validate()?;
        let mut convs = Vec::with_capacity(spec.convs.len());
        let mut shape = spec.input_size;
        let mut channels = 1;
        let mut at = offset;
        for (i, c) in spec.convs.iter().enumerate() {
            let conv = Conv2d::new(channels, c.out_channels, c.kernel, c.stride, c.padding, shape, at)
                .ok_or_else(|| {
                    Error::invalid(format!("conv{} does not fit a {shape:?} input", i + 1))
                })?;
            at += conv.param_len();
            shape = (conv.out_h, conv.out_w);
            channels = c.out_channels;
            convs.push(conv);
        }
        let head = Linear::new(spec.feature_dim, spec.feature_dim, at);
        Ok(Self {
            spec: spec.clone(),
            convs,
            head,
            offset,
        })
    }

    pub fn end(&self) -> usize {
        self.head.offset + self.head.param_len()
    }

    pub fn param_len(&self) -> usize {
        self.end() - self.offset
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn init(&self, params: &mut [f64], rng: &mut Rng) {
        for c in &self.convs {
            c.init(params, rng);
        }
        self.head.init(params, 1.0, rng);
    }

    /// Encoder input tensor: the image resized to the input size, then
    /// normalized per [`InputNorm`].
    pub fn prepare(&self, image: &GrayImage) -> Vec<f64> {
        let (h, w) = self.spec.input_size;
        let resized;
        let img = if image.dims() == (h, w) {
            image
        } else {
            resized = image.downscale_area(h, w);
            &resized
        };
        match self.spec.input_norm {
            InputNorm::Unit => img.data.iter().map(|&v| v as f64 * 2.0 - 1.0).collect(),
            InputNorm::Standardize => {
                let n = img.data.len() as f64;
                let mean = img.data.iter().map(|&v| v as f64).sum::<f64>() / n;
                let var = img.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / var.sqrt().max(1e-6);
                img.data.iter().map(|&v| (v as f64 - mean) * inv).collect()
            }
        }
    }

    pub fn forward(&self, params: &[f64], image: &GrayImage) -> EncoderTrace {
        self.forward_input(params, self.prepare(image))
    }

    pub fn forward_input(&self, params: &[f64], input: Vec<f64>) -> EncoderTrace {
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let x = activations.last().unwrap_or(&input);
            let mut out = vec![0.0; conv.out_len()];
            conv.forward(params, x, &mut out);
            relu_in_place(&mut out);
            activations.push(out);
        }
        let last = self.convs.last().expect("validated");
        let area = (last.out_h * last.out_w) as f64;
        let pooled: Vec<f64> = activations
            .last()
            .expect("validated")
            .chunks_exact(last.out_h * last.out_w)
            .map(|ch| ch.iter().sum::<f64>() / area)
            .collect();
        let output = self.head.forward(params, &pooled);
        EncoderTrace {
            input,
            activations,
            pooled,
            output,
        }
    }

    /// Pooled features computed from the post-ReLU activation of conv
    /// layer `index` onward.
    pub fn pooled_from(&self, params: &[f64], index: usize, activation: &[f64]) -> Vec<f64> {
        let mut x = activation.to_vec();
        for conv in &self.convs[index + 1..] {
            let mut out = vec![0.0; conv.out_len()];
            conv.forward(params, &x, &mut out);
            relu_in_place(&mut out);
            x = out;
        }
        let last = self.convs.last().expect("validated");
        let area = last.out_h * last.out_w;
        x.chunks_exact(area)
            .map(|ch| ch.iter().sum::<f64>() / area as f64)
            .collect()
    }

    /// Pooled features only (the head is skipped).
    pub fn features(&self, params: &[f64], image: &GrayImage) -> Vec<f64> {
        self.forward(params, image).pooled
    }

    /// Gradient with respect to every conv layer's post-ReLU activations,
    /// given the gradient at the pooled features. Parameter gradients are
    /// accumulated into `grads` when provided.
    pub fn backward_from_pooled(
        &self,
        params: &[f64],
        trace: &EncoderTrace,
        d_pooled: &[f64],
        mut grads: Option<&mut [f64]>,
        keep_activation_grads: bool,
    ) -> Vec<Vec<f64>> {
        let n = self.convs.len();
        let last = &self.convs[n - 1];
        let area = last.out_h * last.out_w;
        let mut d_act: Vec<f64> = d_pooled
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g / area as f64, area))
            .collect();
        let mut kept = Vec::new();
        for i in (0..n).rev() {
            if keep_activation_grads {
                kept.push(d_act.clone());
            }
            relu_backward_in_place(&trace.activations[i], &mut d_act);
            let input = if i == 0 {
                &trace.input
            } else {
                &trace.activations[i - 1]
            };
            let conv = &self.convs[i];
            if i == 0 {
                conv.backward(params, input, &d_act, grads.as_deref_mut(), None);
            } else {
                let mut d_in = vec![0.0; conv.in_len()];
                conv.backward(params, input, &d_act, grads.as_deref_mut(), Some(&mut d_in));
                d_act = d_in;
            }
        }
        kept.reverse();
        kept
    }

    /// Backpropagates a gradient at the head output into `grads`.
    pub fn backward(&self, params: &[f64], trace: &EncoderTrace, d_output: &[f64], grads: &mut [f64]) {
        let d_pooled = self.head.backward(params, &trace.pooled, d_output, Some(grads));
        self.backward_from_pooled(params, trace, &d_pooled, Some(grads), false);
    }

    /// Spatial size `(h, w)` of a conv layer's output.
    pub fn layer_shape(&self, index: usize) -> (usize, usize, usize) {
        let c = &self.convs[index];
        (c.out_channels, c.out_h, c.out_w)
    }
}
