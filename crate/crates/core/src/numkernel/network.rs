//! Whole-network forward and backward passes over a [`ModelState`].

use std::collections::{BTreeMap, BTreeSet};

use super::ops;
use super::{LayerSpec, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::model::{FilterRef, ModelState};

/// Intermediate values of one forward pass, indexed by layer.
#[derive(Debug, Clone)]
pub struct ForwardCache<T = f32> {
    /// Input tensor of every layer.
    pub inputs: Vec<Tensor<T>>,
    /// Winning input positions of each pooling layer.
    pub pool_argmax: Vec<Option<Vec<u32>>>,
    pub logits: Tensor<T>,
    fingerprint: u64,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Output of `layer`.
    pub fn output(&self, layer: usize) -> &Tensor<T> {
        self.inputs.get(layer + 1).unwrap_or(&self.logits)
    }
}

/// Gradients of the loss with respect to parameters and conv feature maps.
#[derive(Debug, Clone)]
pub struct Gradients<T = f32> {
    /// Per layer: `(d weights, d bias)` for parametric layers.
    pub params: Vec<Option<(Tensor<T>, Tensor<T>)>>,
    /// Keyed by conv layer index; gradient w.r.t. that layer's
    /// post-activation feature map.
    pub feature_maps: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Same order as [`ModelState::tensors`].
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.params.iter().flatten().flat_map(|(w, b)| [w, b]).collect()
    }
}

fn check_batch<T: Scalar>(model: &ModelState<T>, batch: &Tensor<T>) -> Result<()> {
    let [c, h, w] = model.architecture().input_shape;
    if batch.rank() != 4 {
        return Err(Error::ShapeMismatch {
            context: "model input",
            dimension: "rank",
            expected: 4,
            found: batch.rank(),
        });
    }
    let n = batch.shape()[0];
    batch.expect_shape("model input", &[n, c, h, w])
}

/// Runs one layer; pooling also returns its argmax table.
fn layer_forward<T: Scalar>(
    model: &ModelState<T>,
    index: usize,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, Option<Vec<u32>>)> {
    let wrap = |e: Error| match e {
        e @ Error::Layer { .. } => e,
        e => Error::Layer {
            layer: index,
            reason: e.to_string(),
        },
    };
    let layer = model.architecture().layers[index];
    let out = match layer {
        LayerSpec::Conv2d {
            stride, padding, ..
        } => {
            let p = model.layer_params(index).expect("validated conv params");
            (ops::conv2d(x, &p.weights, &p.bias, stride, padding).map_err(wrap)?, None)
        }
        LayerSpec::MaxPool2d { window, stride } => {
            let (y, arg) = ops::maxpool2d(x, window, stride).map_err(wrap)?;
            (y, Some(arg))
        }
        LayerSpec::Relu => (ops::relu(x), None),
        LayerSpec::Flatten => {
            let n = x.shape()[0];
            let rest = x.len() / n;
            (x.clone().reshape(vec![n, rest]).map_err(wrap)?, None)
        }
        LayerSpec::Linear { .. } => {
            let p = model.layer_params(index).expect("validated linear params");
            (ops::linear(x, &p.weights, &p.bias).map_err(wrap)?, None)
        }
    };
    Ok(out)
}

fn zero_channels<T: Scalar>(t: &mut Tensor<T>, channels: &BTreeSet<usize>) {
    if channels.is_empty() {
        return;
    }
    let (n, c) = (t.shape()[0], t.shape()[1]);
    let area = t.len() / (n * c);
    for (i, plane) in t.data_mut().chunks_exact_mut(area).enumerate() {
        if channels.contains(&(i % c)) {
            plane.fill(T::zero());
        }
    }
}

/// Feature-map channels to force to zero, grouped by the layer whose output
/// is the feature map.
fn mask_by_output_layer<T: Scalar>(
    model: &ModelState<T>,
    mask: &BTreeSet<FilterRef>,
) -> Result<BTreeMap<usize, BTreeSet<usize>>> {
    let arch = model.architecture();
    let mut by_layer: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &f in mask {
        if !arch.contains(f) {
            return Err(Error::UnknownFilter(f));
        }
        by_layer
            .entry(arch.feature_map_layer(f.layer))
            .or_default()
            .insert(f.filter);
    }
    Ok(by_layer)
}

/// Forward pass keeping every intermediate needed by [`backward_pass`].
pub fn forward_pass<T: Scalar>(
    model: &ModelState<T>,
    batch: &Tensor<T>,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    forward_masked(model, batch, &BTreeSet::new())
}

/// Forward pass with the feature maps of `mask` forced to zero.
pub fn forward_masked<T: Scalar>(
    model: &ModelState<T>,
    batch: &Tensor<T>,
    mask: &BTreeSet<FilterRef>,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    check_batch(model, batch)?;
    let masked = mask_by_output_layer(model, mask)?;
    let layers = model.architecture().layers.len();
    let mut inputs = Vec::with_capacity(layers);
    let mut pool_argmax = Vec::with_capacity(layers);
    let mut x = batch.clone();
    for i in 0..layers {
        let (mut y, arg) = layer_forward(model, i, &x)?;
        if let Some(ch) = masked.get(&i) {
            zero_channels(&mut y, ch);
        }
        inputs.push(std::mem::replace(&mut x, y));
        pool_argmax.push(arg);
    }
    let cache = ForwardCache {
        inputs,
        pool_argmax,
        logits: x.clone(),
        fingerprint: model.fingerprint(),
    };
    Ok((x, cache))
}

/// Logits only; keeps no intermediates.
pub fn infer<T: Scalar>(model: &ModelState<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    infer_masked(model, batch, &BTreeSet::new())
}

pub fn infer_masked<T: Scalar>(
    model: &ModelState<T>,
    batch: &Tensor<T>,
    mask: &BTreeSet<FilterRef>,
) -> Result<Tensor<T>> {
    check_batch(model, batch)?;
    let masked = mask_by_output_layer(model, mask)?;
    let mut x = batch.clone();
    for i in 0..model.architecture().layers.len() {
        let (mut y, _) = layer_forward(model, i, &x)?;
        if let Some(ch) = masked.get(&i) {
            zero_channels(&mut y, ch);
        }
        x = y;
    }
    Ok(x)
}

/// Backpropagates `dlogits` through the network recorded in `cache`.
pub fn backward_pass<T: Scalar>(
    model: &ModelState<T>,
    cache: &ForwardCache<T>,
    dlogits: &Tensor<T>,
) -> Result<Gradients<T>> {
    let arch = model.architecture();
    if cache.inputs.len() != arch.layers.len() || cache.fingerprint != model.fingerprint() {
        return Err(Error::StaleCache);
    }
    dlogits.expect_shape("backward dlogits", cache.logits.shape())?;
    let fm_layers: BTreeMap<usize, usize> = arch
        .conv_layers()
        .into_iter()
        .map(|c| (arch.feature_map_layer(c), c))
        .collect();
    let first_param = arch.layers.iter().position(LayerSpec::has_params).unwrap_or(0);

    let mut params: Vec<Option<(Tensor<T>, Tensor<T>)>> = vec![None; arch.layers.len()];
    let mut feature_maps = BTreeMap::new();
    let mut grad = dlogits.clone();
    for i in (0..arch.layers.len()).rev() {
        if let Some(&conv) = fm_layers.get(&i) {
            feature_maps.insert(conv, grad.clone());
        }
        // nothing upstream of the first parametric layer needs a gradient
        let need_input = i > first_param;
        let x = &cache.inputs[i];
        grad = match arch.layers[i] {
            LayerSpec::Conv2d {
                stride, padding, ..
            } => {
                let p = model.layer_params(i).expect("validated conv params");
                let g = ops::conv2d_backward(x, &p.weights, &grad, stride, padding, need_input)?;
                params[i] = Some((g.weights, g.bias));
                match g.input {
                    Some(dx) => dx,
                    None => break,
                }
            }
            LayerSpec::Linear { .. } => {
                let p = model.layer_params(i).expect("validated linear params");
                let g = ops::linear_backward(x, &p.weights, &grad)?;
                params[i] = Some((g.weights, g.bias));
                g.input
            }
            LayerSpec::MaxPool2d { .. } => {
                let arg = cache.pool_argmax[i].as_ref().ok_or(Error::StaleCache)?;
                ops::maxpool2d_backward(x.shape(), arg, &grad)?
            }
            LayerSpec::Relu => ops::relu_backward(x, &grad)?,
            LayerSpec::Flatten => grad.reshape(x.shape().to_vec())?,
        };
    }
    Ok(Gradients {
        params,
        feature_maps,
    })
}
