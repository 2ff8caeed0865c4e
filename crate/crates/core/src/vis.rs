//! Per-filter saliency maps by guided back-propagation.

use std::io::Cursor;

use image::{GrayImage, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FilterRef, ModelState};
use crate::numkernel::{forward_pass, ops, LayerSpec, Tensor};

pub const HISTOGRAM_BINS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackpropRule {
    /// Gradient passes a ReLU only where its input and the gradient are positive.
    #[default]
    Guided,
    /// Ordinary ReLU derivative.
    Plain,
}

/// `[H, W]` map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

/// Gradient of the chosen filter's activation map with respect to `image`
/// (`[C,H,W]`). All other channels of the feature map are zeroed and the
/// target channel is seeded with its own activation.
pub fn input_gradient(
    model: &ModelState,
    image: &Tensor,
    filter: FilterRef,
    rule: BackpropRule,
) -> Result<Tensor> {
    let arch = model.architecture();
    if !matches!(arch.layers.get(filter.layer), Some(LayerSpec::Conv2d { .. })) {
        return Err(Error::InvalidArgument(format!(
            "layer {} is not a convolution",
            filter.layer
        )));
    }
    if !arch.contains(filter) {
        return Err(Error::UnknownFilter(filter));
    }
    image.expect_shape("saliency image", &arch.input_shape)?;
    let batch = image.clone().reshape(
        std::iter::once(1).chain(arch.input_shape).collect(),
    )?;
    let (_, cache) = forward_pass(model, &batch)?;
    let fm = arch.feature_map_layer(filter.layer);
    let act = cache.output(fm);
    let (c, area) = (act.shape()[1], act.len() / act.shape()[1]);
    let mut grad = Tensor::zeros(act.shape());
    let lo = filter.filter * area;
    grad.data_mut()[lo..lo + area].copy_from_slice(&act.data()[lo..lo + area]);
    debug_assert!(filter.filter < c);

    for i in (0..=fm).rev() {
        let x = &cache.inputs[i];
        grad = match arch.layers[i] {
            LayerSpec::Conv2d {
                stride, padding, ..
            } => {
                let p = model.layer_params(i).expect("validated conv params");
                ops::conv2d_backward(x, &p.weights, &grad, stride, padding, true)?
                    .input
                    .expect("input gradient requested")
            }
            LayerSpec::Linear { .. } => {
                let p = model.layer_params(i).expect("validated linear params");
                ops::linear_backward(x, &p.weights, &grad)?.input
            }
            LayerSpec::MaxPool2d { .. } => {
                let arg = cache.pool_argmax[i].as_ref().ok_or(Error::StaleCache)?;
                ops::maxpool2d_backward(x.shape(), arg, &grad)?
            }
            LayerSpec::Relu => match rule {
                BackpropRule::Guided => ops::guided_relu_backward(x, &grad)?,
                BackpropRule::Plain => ops::relu_backward(x, &grad)?,
            },
            LayerSpec::Flatten => grad.reshape(x.shape().to_vec())?,
        };
    }
    let shape = grad.shape()[1..].to_vec();
    grad.reshape(shape)
}

/// Max over channels of `|grad|`, scaled into `[0, 1]`. Magnitudes are
/// bounded below by zero, so the range used is `[0, max]`; this keeps the
/// map proportional to the gradient. An all-zero map stays zero.
pub fn saliency_from_gradient(grad: &Tensor) -> Result<SaliencyMap> {
    if grad.rank() != 3 {
        return Err(Error::InvalidTensor(format!(
            "expected a [C,H,W] gradient, got {:?}",
            grad.shape()
        )));
    }
    let (c, h, w) = (grad.shape()[0], grad.shape()[1], grad.shape()[2]);
    let mut values = vec![0.0f32; h * w];
    for ch in 0..c {
        for (v, g) in values.iter_mut().zip(&grad.data()[ch * h * w..(ch + 1) * h * w]) {
            *v = v.max(g.abs());
        }
    }
    let max = values.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        for v in &mut values {
            *v /= max;
        }
    }
    Ok(SaliencyMap {
        height: h,
        width: w,
        values,
    })
}

pub fn guided_backprop(model: &ModelState, image: &Tensor, filter: FilterRef) -> Result<SaliencyMap> {
    saliency_from_gradient(&input_gradient(model, image, filter, BackpropRule::Guided)?)
}

/// Equal-width bins over `[0, 1]`; the last bin includes 1. Values outside
/// the range are clamped into the end bins.
pub fn pixel_histogram(values: &[f32], bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins.max(1)];
    let last = counts.len() - 1;
    for &v in values {
        let b = (v.clamp(0.0, 1.0) as f64 * counts.len() as f64).floor() as usize;
        counts[b.min(last)] += 1;
    }
    counts
}

impl SaliencyMap {
    pub fn histogram(&self, bins: usize) -> Vec<u64> {
        pixel_histogram(&self.values, bins)
    }

    /// 8-bit grayscale PNG.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let pixels = self
            .values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, pixels)
            .ok_or_else(|| Error::InvalidTensor("saliency map size mismatch".into()))?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::model::LayerParams;

    fn single_conv(weights: Vec<f32>, bias: f32) -> ModelState {
        let arch = Architecture {
            input_shape: [1, 4, 4],
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 1,
                    kernel_h: 3,
                    kernel_w: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::linear(16, 2),
            ],
            class_names: vec!["a".into(), "b".into()],
        };
        let params = vec![
            Some(LayerParams {
                weights: Tensor::new(vec![1, 1, 3, 3], weights).unwrap(),
                bias: Tensor::new(vec![1], vec![bias]).unwrap(),
            }),
            None,
            None,
            Some(LayerParams {
                weights: Tensor::zeros(&[2, 16]),
                bias: Tensor::zeros(&[2]),
            }),
        ];
        ModelState::from_parts(arch, params, 0).unwrap()
    }

    fn identity() -> Vec<f32> {
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        w
    }

    #[test]
    fn identity_kernel_reproduces_activation() {
        let m = single_conv(identity(), 0.0);
        let img = Tensor::from_fn(&[1, 4, 4], |i| 1.0 + i as f32);
        let s = guided_backprop(&m, &img, FilterRef::new(0, 0)).unwrap();
        for (i, v) in s.values.iter().enumerate() {
            assert!((v - (1.0 + i as f32) / 16.0).abs() < 1e-6);
        }
        assert_eq!(s.values[15], 1.0);
    }

    #[test]
    fn scaling_the_input_keeps_the_map() {
        // positive rescaling scales the seed, and the normalized map is unchanged
        let m = single_conv(vec![0.5, -1.0, 0.2, 0.3, 1.0, 0.1, -0.4, 0.6, 0.2], 0.0);
        let img = Tensor::from_fn(&[1, 4, 4], |i| ((i * 5) % 7) as f32 / 7.0);
        let a = guided_backprop(&m, &img, FilterRef::new(0, 0)).unwrap();
        let b = guided_backprop(&m, &img.map(|v| v * 3.0), FilterRef::new(0, 0)).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn negative_preactivation_gets_zero() {
        let m = single_conv(identity(), 0.0);
        let mut img = Tensor::from_fn(&[1, 4, 4], |_| 1.0);
        // centre pixel (1,1) drives a negative pre-activation
        img.data_mut()[5] = -2.0;
        let g = input_gradient(&m, &img, FilterRef::new(0, 0), BackpropRule::Guided).unwrap();
        assert_eq!(g.data()[5], 0.0);
        assert_eq!(g.data()[6], 1.0);
    }

    #[test]
    fn dead_filter_is_all_zero() {
        let m = single_conv(vec![0.0; 9], 0.0);
        let img = Tensor::from_fn(&[1, 4, 4], |i| i as f32);
        let s = guided_backprop(&m, &img, FilterRef::new(0, 0)).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_conv_layer_rejected() {
        let m = single_conv(identity(), 0.0);
        let img = Tensor::zeros(&[1, 4, 4]);
        assert!(guided_backprop(&m, &img, FilterRef::new(1, 0)).is_err());
        assert!(guided_backprop(&m, &img, FilterRef::new(0, 3)).is_err());
    }

    #[test]
    fn histogram_fixtures() {
        assert_eq!(pixel_histogram(&[0.0; 10], 32)[0], 10);
        let ramp: Vec<f32> = (0..32).map(|i| i as f32 / 31.0).collect();
        assert_eq!(pixel_histogram(&ramp, 32), vec![1; 32]);
        assert_eq!(pixel_histogram(&[1.0], 4), vec![0, 0, 0, 1]);
    }

    #[test]
    fn png_roundtrip() {
        let s = SaliencyMap {
            height: 2,
            width: 3,
            values: vec![0.0, 0.5, 1.0, 1.0, 0.5, 0.0],
        };
        let bytes = s.to_png().unwrap();
        let img = image::load_from_memory(&bytes).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (3, 2));
        assert_eq!(img.get_pixel(2, 0).0[0], 255);
    }
}
