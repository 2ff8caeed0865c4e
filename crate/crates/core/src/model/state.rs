use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Architecture;
use crate::error::{Error, Result};
use crate::numkernel::{Scalar, Tensor};

/// Weights and bias of one parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// An architecture together with all of its learned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T = f32> {
    architecture: Architecture,
    params: Vec<Option<LayerParams<T>>>,
    seed: u64,
}

/// Kaiming-uniform (fan-in) weights and zero biases, deterministic in `seed`.
pub fn build_model(arch: Architecture, seed: u64) -> Result<ModelState> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = arch
        .layers
        .iter()
        .map(|layer| {
            layer.param_shapes().map(|(wshape, bshape)| {
                let fan_in: usize = wshape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let weights = Tensor::from_fn(&wshape, |_| {
                    (rng.gen::<f64>() * 2.0 * bound - bound) as f32
                });
                LayerParams {
                    weights,
                    bias: Tensor::zeros(&bshape),
                }
            })
        })
        .collect();
    Ok(ModelState {
        architecture: arch,
        params,
        seed,
    })
}

impl<T: Scalar> ModelState<T> {
    /// Assembles a model from explicit parameters, checking every shape.
    pub fn from_parts(
        architecture: Architecture,
        params: Vec<Option<LayerParams<T>>>,
        seed: u64,
    ) -> Result<Self> {
        architecture.validate()?;
        if params.len() != architecture.layers.len() {
            return Err(Error::ShapeMismatch {
                context: "model parameters",
                dimension: "layers",
                expected: architecture.layers.len(),
                found: params.len(),
            });
        }
        for (i, (layer, p)) in architecture.layers.iter().zip(&params).enumerate() {
            match (layer.param_shapes(), p) {
                (None, None) => {}
                (Some((w, b)), Some(p)) => {
                    if p.weights.shape() != w.as_slice() || p.bias.shape() != b.as_slice() {
                        return Err(Error::Layer {
                            layer: i,
                            reason: format!(
                                "parameter shapes {:?}/{:?} do not match {:?}/{:?}",
                                p.weights.shape(),
                                p.bias.shape(),
                                w,
                                b
                            ),
                        });
                    }
                }
                (Some(_), None) => {
                    return Err(Error::Layer {
                        layer: i,
                        reason: format!("{} layer is missing its parameters", layer.name()),
                    })
                }
                (None, Some(_)) => {
                    return Err(Error::Layer {
                        layer: i,
                        reason: format!("{} layer has no parameters", layer.name()),
                    })
                }
            }
        }
        Ok(Self {
            architecture,
            params,
            seed,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layer_params(&self, layer: usize) -> Option<&LayerParams<T>> {
        self.params.get(layer).and_then(Option::as_ref)
    }

    pub fn layer_params_mut(&mut self, layer: usize) -> Option<&mut LayerParams<T>> {
        self.params.get_mut(layer).and_then(Option::as_mut)
    }

    pub fn params(&self) -> &[Option<LayerParams<T>>] {
        &self.params
    }

    /// Parameter tensors in declaration order: weights then bias per layer.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| [&p.weights, &p.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .flatten()
            .flat_map(|p| [&mut p.weights, &mut p.bias])
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            architecture: self.architecture.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| LayerParams {
                        weights: p.weights.cast(),
                        bias: p.bias.cast(),
                    })
                })
                .collect(),
            seed: self.seed,
        }
    }

    /// FNV-1a over every parameter bit pattern; changes whenever any weight does.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for &v in t.data() {
                h ^= v.as_f64().to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            h ^= t.len() as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::LayerSpec;

    #[test]
    fn reference_mnist_has_96_filters() {
        let m = build_model(Architecture::mnist_reference(), 1).unwrap();
        assert_eq!(m.architecture().filter_count(), 96);
        assert_eq!(m.architecture().conv_layers(), vec![0, 3]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(Architecture::mnist_reference(), 42).unwrap();
        let b = build_model(Architecture::mnist_reference(), 42).unwrap();
        let c = build_model(Architecture::mnist_reference(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn weights_respect_kaiming_bound_and_biases_are_zero() {
        let m = build_model(Architecture::mnist_reference(), 3).unwrap();
        let p = m.layer_params(3).unwrap();
        let bound = (6.0f32 / 288.0).sqrt();
        assert!(p.weights.data().iter().all(|w| w.abs() <= bound));
        assert!(p.bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn mismatched_linear_is_rejected_with_layer_index() {
        let mut arch = Architecture::mnist_reference();
        arch.layers[7] = LayerSpec::linear(1500, 10);
        match build_model(arch, 0) {
            Err(Error::Layer { layer, .. }) => assert_eq!(layer, 7),
            other => panic!("expected a layer error, got {other:?}"),
        }
    }

    #[test]
    fn architecture_without_conv_is_rejected() {
        let arch = Architecture {
            input_shape: [1, 2, 2],
            layers: vec![LayerSpec::Flatten, LayerSpec::linear(4, 2)],
            class_names: vec!["a".into(), "b".into()],
        };
        assert!(build_model(arch, 0).is_err());
    }

    #[test]
    fn six_conv_reference_is_consistent() {
        let arch = Architecture::six_conv_reference(32, vec!["cat".into(), "dog".into()], 8).unwrap();
        assert_eq!(arch.conv_layers().len(), 6);
        assert_eq!(arch.filter_count(), (64 + 128 + 256 + 256 + 512 + 512) / 8);
    }
}
