use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::ops::output_extent;
use crate::numkernel::LayerSpec;

/// Input geometry, layer list and class labels of a sequential CNN.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub class_names: Vec<String>,
}

/// Identity of one convolutional filter (output channel).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FilterRef {
    pub layer: usize,
    pub filter: usize,
}

impl FilterRef {
    pub fn new(layer: usize, filter: usize) -> Self {
        Self { layer, filter }
    }
}

impl fmt::Display for FilterRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}:F{}", self.layer, self.filter)
    }
}

impl Architecture {
    /// 1x28x28 -> conv3x3(32) -> relu -> pool2 -> conv3x3(64) -> relu -> pool2 -> flatten -> linear(10).
    pub fn mnist_reference() -> Self {
        Self {
            input_shape: [1, 28, 28],
            layers: vec![
                LayerSpec::conv(1, 32, 3),
                LayerSpec::Relu,
                LayerSpec::pool(2),
                LayerSpec::conv(32, 64, 3),
                LayerSpec::Relu,
                LayerSpec::pool(2),
                LayerSpec::Flatten,
                LayerSpec::linear(1600, 10),
            ],
            class_names: (0..10).map(|d| d.to_string()).collect(),
        }
    }

    /// Six 3x3 padded conv layers (64, 128, 256, 256, 512, 512) with a 2x2 pool
    /// after each pair and a single linear head. `width_divisor` shrinks every
    /// layer for desk-scale experiments.
    pub fn six_conv_reference(
        input_hw: usize,
        class_names: Vec<String>,
        width_divisor: usize,
    ) -> Result<Self> {
        let div = width_divisor.max(1);
        let widths = [64, 128, 256, 256, 512, 512].map(|w: usize| (w / div).max(1));
        let mut layers = Vec::new();
        let mut cin = 3;
        let mut hw = input_hw;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(LayerSpec::Conv2d {
                in_channels: cin,
                out_channels: w,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                padding: 1,
            });
            layers.push(LayerSpec::Relu);
            if i % 2 == 1 {
                layers.push(LayerSpec::pool(2));
                hw /= 2;
            }
            cin = w;
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::linear(cin * hw * hw, class_names.len()));
        let arch = Self {
            input_shape: [3, input_hw, input_hw],
            layers,
            class_names,
        };
        arch.output_shapes()?;
        Ok(arch)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Per-example output shape of every layer, validating the whole chain.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "input shape {:?} has a zero dimension",
                self.input_shape
            )));
        }
        if self.class_names.is_empty() {
            return Err(Error::InvalidArgument("architecture has no classes".into()));
        }
        if !self.layers.iter().any(LayerSpec::is_conv) {
            return Err(Error::InvalidArgument(
                "architecture needs at least one conv2d layer".into(),
            ));
        }
        let mut shape = self.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |reason: String| Error::Layer { layer: i, reason };
            shape = match *layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    stride,
                    padding,
                } => {
                    if in_channels == 0 || out_channels == 0 || kernel_h == 0 || kernel_w == 0 {
                        return Err(bad("conv2d channel and kernel sizes must be >= 1".into()));
                    }
                    if stride == 0 {
                        return Err(bad("stride must be >= 1".into()));
                    }
                    if shape.len() != 3 {
                        return Err(bad(format!("conv2d expects a [C,H,W] input, got {shape:?}")));
                    }
                    if shape[0] != in_channels {
                        return Err(bad(format!(
                            "in_channels is {in_channels} but the incoming tensor has {} channels",
                            shape[0]
                        )));
                    }
                    let h = output_extent(shape[1], kernel_h, stride, padding)
                        .ok_or_else(|| bad(format!("kernel {kernel_h}x{kernel_w} does not fit {shape:?}")))?;
                    let w = output_extent(shape[2], kernel_w, stride, padding)
                        .ok_or_else(|| bad(format!("kernel {kernel_h}x{kernel_w} does not fit {shape:?}")))?;
                    vec![out_channels, h, w]
                }
                LayerSpec::MaxPool2d { window, stride } => {
                    if window == 0 || stride == 0 {
                        return Err(bad("pool window and stride must be >= 1".into()));
                    }
                    if shape.len() != 3 {
                        return Err(bad(format!("maxpool2d expects a [C,H,W] input, got {shape:?}")));
                    }
                    let h = output_extent(shape[1], window, stride, 0)
                        .ok_or_else(|| bad(format!("window {window} does not fit {shape:?}")))?;
                    let w = output_extent(shape[2], window, stride, 0)
                        .ok_or_else(|| bad(format!("window {window} does not fit {shape:?}")))?;
                    vec![shape[0], h, w]
                }
                LayerSpec::Relu => shape,
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => {
                    if in_features == 0 || out_features == 0 {
                        return Err(bad("linear feature counts must be >= 1".into()));
                    }
                    if shape.len() != 1 {
                        return Err(bad(format!("linear expects a flat input, got {shape:?}")));
                    }
                    if shape[0] != in_features {
                        return Err(bad(format!(
                            "in_features is {in_features} but the incoming tensor has {} features",
                            shape[0]
                        )));
                    }
                    vec![out_features]
                }
            };
            out.push(shape.clone());
        }
        if shape != [self.num_classes()] {
            return Err(Error::Layer {
                layer: self.layers.len().saturating_sub(1),
                reason: format!(
                    "network output {shape:?} does not match {} classes",
                    self.num_classes()
                ),
            });
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.output_shapes().map(|_| ())
    }

    /// Indices of the conv2d layers.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_conv())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn out_channels(&self, layer: usize) -> Option<usize> {
        match self.layers.get(layer) {
            Some(LayerSpec::Conv2d { out_channels, .. }) => Some(*out_channels),
            _ => None,
        }
    }

    /// Total number of convolutional filters.
    pub fn filter_count(&self) -> usize {
        self.conv_layers()
            .into_iter()
            .filter_map(|l| self.out_channels(l))
            .sum()
    }

    /// Every filter, ordered by (layer, filter).
    pub fn filters(&self) -> Vec<FilterRef> {
        self.conv_layers()
            .into_iter()
            .flat_map(|l| (0..self.out_channels(l).unwrap_or(0)).map(move |f| FilterRef::new(l, f)))
            .collect()
    }

    pub fn contains(&self, f: FilterRef) -> bool {
        self.out_channels(f.layer).is_some_and(|n| f.filter < n)
    }

    /// Layer whose output is the feature map of conv layer `conv`: the ReLU
    /// directly after it when present, otherwise the conv itself.
    pub fn feature_map_layer(&self, conv: usize) -> usize {
        match self.layers.get(conv + 1) {
            Some(LayerSpec::Relu) => conv + 1,
            _ => conv,
        }
    }
}
