//! Structural surgery: physically removes conv filters and the matching input
//! slices of the next parametric layer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::criteria::PruningPlan;
use crate::error::{Error, Result};
use crate::model::{Architecture, FilterRef, LayerParams, ModelState};
use crate::numkernel::{LayerSpec, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    UnknownFilter { filter: FilterRef },
    Duplicate { filter: FilterRef },
    LayerEmptied { layer: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownFilter { filter } => write!(f, "unknown filter {filter}"),
            Violation::Duplicate { filter } => write!(f, "duplicate {filter}"),
            Violation::LayerEmptied { layer } => write!(f, "layer emptied: {layer}"),
        }
    }
}

/// Every problem with `plan` for `arch`; empty means the plan is valid.
pub fn validate_plan(arch: &Architecture, plan: &PruningPlan) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let mut per_layer: BTreeMap<usize, usize> = BTreeMap::new();
    for &f in &plan.filters {
        if !arch.contains(f) {
            out.push(Violation::UnknownFilter { filter: f });
            continue;
        }
        if !seen.insert(f) {
            out.push(Violation::Duplicate { filter: f });
            continue;
        }
        *per_layer.entry(f.layer).or_default() += 1;
    }
    for (&layer, &n) in &per_layer {
        if Some(n) == arch.out_channels(layer) {
            out.push(Violation::LayerEmptied { layer });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerFraction {
    pub layer: usize,
    pub removed: usize,
    pub total: usize,
    pub fraction: f64,
}

/// Removed share of each conv layer's current filters.
pub fn plan_layer_fractions(arch: &Architecture, plan: &PruningPlan) -> Vec<LayerFraction> {
    let by_layer = plan.by_layer();
    arch.conv_layers()
        .into_iter()
        .map(|layer| {
            let total = arch.out_channels(layer).unwrap_or(0);
            let removed = by_layer.get(&layer).map_or(0, BTreeSet::len);
            LayerFraction {
                layer,
                removed,
                total,
                fraction: removed as f64 / total as f64,
            }
        })
        .collect()
}

fn keep_list(total: usize, removed: Option<&BTreeSet<usize>>) -> Vec<usize> {
    (0..total)
        .filter(|i| removed.map_or(true, |r| !r.contains(i)))
        .collect()
}

/// Copies `weights[out][in][rest..]` restricted to the given rows and columns.
fn gather_2axes(t: &Tensor, rows: &[usize], cols: &[usize]) -> Result<Tensor> {
    let shape = t.shape();
    let ncols = shape[1];
    let inner: usize = shape[2..].iter().product();
    let mut data = Vec::with_capacity(rows.len() * cols.len() * inner);
    for &r in rows {
        for &c in cols {
            let start = (r * ncols + c) * inner;
            data.extend_from_slice(&t.data()[start..start + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[0] = rows.len();
    new_shape[1] = cols.len();
    Tensor::new(new_shape, data)
}

/// Removes every planned filter. Surviving parameters are copied bit-exactly.
pub fn apply_plan(model: &ModelState, plan: &PruningPlan) -> Result<ModelState> {
    let arch = model.architecture();
    let violations = validate_plan(arch, plan);
    if !violations.is_empty() {
        return Err(Error::InvalidPlan(violations));
    }
    let removed = plan.by_layer();
    let shapes = arch.output_shapes()?;

    let mut layers = arch.layers.clone();
    let mut params: Vec<Option<LayerParams>> = Vec::with_capacity(layers.len());
    // channels of the tensor currently flowing, `None` when untouched
    let mut live: Option<Vec<usize>> = None;
    let mut flowing_channels = arch.input_shape[0];
    // spatial size per channel when a flatten consumed pruned channels
    let mut flattened_area: Option<usize> = None;

    for (i, layer) in arch.layers.iter().enumerate() {
        let p = model.layer_params(i);
        match *layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                let p = p.expect("validated conv params");
                let cols = live.clone().unwrap_or_else(|| (0..in_channels).collect());
                let rows = keep_list(out_channels, removed.get(&i));
                let weights = gather_2axes(&p.weights, &rows, &cols)?;
                let bias = Tensor::new(
                    vec![rows.len()],
                    rows.iter().map(|&r| p.bias.data()[r]).collect(),
                )?;
                layers[i] = LayerSpec::Conv2d {
                    in_channels: cols.len(),
                    out_channels: rows.len(),
                    kernel_h,
                    kernel_w,
                    stride,
                    padding,
                };
                params.push(Some(LayerParams { weights, bias }));
                flowing_channels = out_channels;
                live = removed.contains_key(&i).then_some(rows);
            }
            LayerSpec::Flatten => {
                if live.is_some() {
                    let in_shape = if i == 0 {
                        arch.input_shape.to_vec()
                    } else {
                        shapes[i - 1].clone()
                    };
                    flattened_area = Some(in_shape[1..].iter().product());
                }
                params.push(None);
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                let p = p.expect("validated linear params");
                match (live.take(), flattened_area.take()) {
                    (Some(channels), Some(area)) => {
                        debug_assert_eq!(in_features, flowing_channels * area);
                        let cols: Vec<usize> = channels
                            .iter()
                            .flat_map(|&c| c * area..(c + 1) * area)
                            .collect();
                        let weights = gather_2axes(
                            &p.weights.clone().reshape(vec![out_features, in_features, 1])?,
                            &(0..out_features).collect::<Vec<_>>(),
                            &cols,
                        )?
                        .reshape(vec![out_features, cols.len()])?;
                        layers[i] = LayerSpec::Linear {
                            in_features: cols.len(),
                            out_features,
                        };
                        params.push(Some(LayerParams {
                            weights,
                            bias: p.bias.clone(),
                        }));
                    }
                    _ => params.push(Some(p.clone())),
                }
                flowing_channels = out_features;
            }
            LayerSpec::Relu | LayerSpec::MaxPool2d { .. } => params.push(None),
        }
    }
    let new_arch = Architecture {
        input_shape: arch.input_shape,
        layers,
        class_names: arch.class_names.clone(),
    };
    ModelState::from_parts(new_arch, params, model.seed())
}
