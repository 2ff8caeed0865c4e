use crate::numkernel::{LayerSpec, Scalar};

use super::{Architecture, ModelState};

/// Learned parameters: conv `Cout*(Cin*Kh*Kw + 1)`, linear `Out*(In + 1)`.
pub fn count_params<T: Scalar>(model: &ModelState<T>) -> u64 {
    arch_params(model.architecture())
}

pub fn arch_params(arch: &Architecture) -> u64 {
    arch.layers.iter().map(layer_params).sum()
}

pub fn layer_params(layer: &LayerSpec) -> u64 {
    match *layer {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            ..
        } => (out_channels * (in_channels * kernel_h * kernel_w + 1)) as u64,
        LayerSpec::Linear {
            in_features,
            out_features,
        } => (out_features * (in_features + 1)) as u64,
        _ => 0,
    }
}

/// Operations in one single-image forward pass, counting multiplies and adds
/// separately. Pooling and ReLU cost one op per output element.
pub fn count_flops<T: Scalar>(model: &ModelState<T>) -> u64 {
    arch_flops(model.architecture())
}

pub fn arch_flops(arch: &Architecture) -> u64 {
    let shapes = match arch.output_shapes() {
        Ok(s) => s,
        Err(_) => return 0,
    };
    arch.layers
        .iter()
        .zip(&shapes)
        .map(|(layer, out)| {
            let elems: usize = out.iter().product();
            let ops = match *layer {
                LayerSpec::Conv2d {
                    in_channels,
                    kernel_h,
                    kernel_w,
                    ..
                } => 2 * in_channels * kernel_h * kernel_w * elems + elems,
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => 2 * in_features * out_features + out_features,
                LayerSpec::Relu | LayerSpec::MaxPool2d { .. } => elems,
                LayerSpec::Flatten => 0,
            };
            ops as u64
        })
        .sum()
}
