//! Taylor-expansion filter sensitivity and rank instability.
//!
//! For a conv filter with post-activation feature map `f` and loss gradient
//! `g = dL/df`, the first-order estimate of the loss change from zeroing the
//! filter is `|mean_{h,w}(g * f)|` per example; the raw score averages that
//! over examples. Scores are L2-normalized within each conv layer and all
//! filters are ranked globally by ascending normalized score.

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::model::{FilterRef, ModelState};
use crate::numkernel::{backward_pass, forward_pass, softmax_cross_entropy};

/// How rank spread across runs is summarized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstabilityKind {
    /// `(1/n) * sum |rank_i - mean rank|`
    #[default]
    MeanAbsoluteDeviation,
    /// `(1/n) * sum (rank_i - mean rank)^2`
    Variance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensitivityConfig {
    pub runs: usize,
    pub num_batches: usize,
    pub batch_size: usize,
    pub base_seed: u64,
    pub instability: InstabilityKind,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            runs: 5,
            num_batches: 10,
            batch_size: 100,
            base_seed: 0,
            instability: InstabilityKind::MeanAbsoluteDeviation,
        }
    }
}

/// One scoring pass over a reshuffled data subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRun {
    pub run_index: usize,
    pub seed: u64,
    /// Every filter in (layer, filter) order; the other vectors are parallel to it.
    pub filters: Vec<FilterRef>,
    pub raw: Vec<f64>,
    pub sensitivity: Vec<f64>,
    /// Global rank, 0 = least sensitive.
    pub rank: Vec<usize>,
}

/// Raw Taylor scores over the given instances, in (layer, filter) order.
pub fn taylor_scores(
    model: &ModelState,
    dataset: &Dataset,
    batches: &[Vec<usize>],
) -> Result<(Vec<FilterRef>, Vec<f64>)> {
    let arch = model.architecture();
    let filters = arch.filters();
    let convs = arch.conv_layers();
    let mut offsets = Vec::with_capacity(convs.len());
    let mut acc = 0;
    for &c in &convs {
        offsets.push(acc);
        acc += arch.out_channels(c).unwrap_or(0);
    }
    let mut sums = vec![0.0f64; filters.len()];
    let mut examples = 0usize;
    for idx in batches {
        if idx.is_empty() {
            continue;
        }
        let (x, y) = dataset.batch(idx)?;
        let (logits, cache) = forward_pass(model, &x)?;
        let (_, dlogits) = softmax_cross_entropy(&logits, &y)?;
        let grads = backward_pass(model, &cache, &dlogits)?;
        // dlogits carries a 1/N factor; undo it so each example contributes
        // the gradient of its own loss
        let scale = idx.len() as f64;
        for (&conv, &offset) in convs.iter().zip(&offsets) {
            let fm = cache.output(arch.feature_map_layer(conv));
            let g = &grads.feature_maps[&conv];
            let (n, c) = (fm.shape()[0], fm.shape()[1]);
            let area = fm.len() / (n * c);
            for (plane, (fv, gv)) in fm
                .data()
                .chunks_exact(area)
                .zip(g.data().chunks_exact(area))
                .enumerate()
            {
                let dot: f64 = fv
                    .iter()
                    .zip(gv)
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum();
                sums[offset + plane % c] += (dot * scale / area as f64).abs();
            }
        }
        examples += idx.len();
    }
    if examples == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok((filters, sums.into_iter().map(|s| s / examples as f64).collect()))
}

/// Divides each conv layer's scores by that layer's L2 norm (layers whose
/// scores are all zero are left at zero).
pub fn normalize_per_layer(filters: &[FilterRef], raw: &[f64]) -> Vec<f64> {
    let mut out = raw.to_vec();
    let mut start = 0;
    while start < filters.len() {
        let layer = filters[start].layer;
        let end = filters[start..]
            .iter()
            .position(|f| f.layer != layer)
            .map_or(filters.len(), |p| start + p);
        let norm = raw[start..end].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut out[start..end] {
                *v /= norm;
            }
        }
        start = end;
    }
    out
}

/// Global ranks by ascending score; ties broken by (layer, filter).
pub fn global_ranks(filters: &[FilterRef], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..filters.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .total_cmp(&scores[b])
            .then_with(|| filters[a].cmp(&filters[b]))
    });
    let mut rank = vec![0; filters.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    rank
}

/// One sensitivity run over `num_batches` shuffled batches; parameters are untouched.
pub fn sensitivity_run(
    model: &ModelState,
    dataset: &Dataset,
    num_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<SensitivityRun> {
    if num_batches == 0 || batch_size == 0 {
        return Err(Error::InvalidArgument(
            "num_batches and batch_size must be >= 1".into(),
        ));
    }
    let mut batches = dataset.batches(batch_size, seed, true);
    if num_batches > batches.len() {
        log::warn!(
            "requested {num_batches} batches but the dataset only has {}; using all",
            batches.len()
        );
    }
    batches.truncate(num_batches);
    let (filters, raw) = taylor_scores(model, dataset, &batches)?;
    let sensitivity = normalize_per_layer(&filters, &raw);
    let rank = global_ranks(&filters, &sensitivity);
    Ok(SensitivityRun {
        run_index: 0,
        seed,
        filters,
        raw,
        sensitivity,
        rank,
    })
}

/// Rank spread of one filter across runs.
pub fn instability(ranks: &[usize], kind: InstabilityKind) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let n = ranks.len() as f64;
    let mean = ranks.iter().map(|&r| r as f64).sum::<f64>() / n;
    let dev = ranks.iter().map(|&r| {
        let d = r as f64 - mean;
        match kind {
            InstabilityKind::MeanAbsoluteDeviation => d.abs(),
            InstabilityKind::Variance => d * d,
        }
    });
    dev.sum::<f64>() / n
}

/// Aggregate of `n` sensitivity runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    pub n: usize,
    pub instability_kind: InstabilityKind,
    pub filters: Vec<FilterRef>,
    pub runs: Vec<SensitivityRun>,
    pub mean_sensitivity: Vec<f64>,
    pub mean_rank: Vec<f64>,
    pub instability: Vec<f64>,
}

/// Per-filter summary row for export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRecord {
    pub layer: usize,
    pub index: usize,
    pub sensitivity: f64,
    pub ranks: Vec<usize>,
    pub mean_rank: f64,
    pub instability: f64,
}

impl SensitivityProfile {
    pub fn from_runs(mut runs: Vec<SensitivityRun>, kind: InstabilityKind) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| Error::InvalidArgument("a profile needs at least one run".into()))?;
        let filters = first.filters.clone();
        if runs.iter().any(|r| r.filters != filters) {
            return Err(Error::InvalidArgument(
                "runs disagree on the filter set".into(),
            ));
        }
        runs.sort_by_key(|r| r.run_index);
        let n = runs.len();
        let f = filters.len();
        let mut mean_sensitivity = vec![0.0; f];
        let mut mean_rank = vec![0.0; f];
        let mut instab = vec![0.0; f];
        let mut ranks = Vec::with_capacity(n);
        for i in 0..f {
            ranks.clear();
            ranks.extend(runs.iter().map(|r| r.rank[i]));
            mean_sensitivity[i] = runs.iter().map(|r| r.sensitivity[i]).sum::<f64>() / n as f64;
            mean_rank[i] = ranks.iter().sum::<usize>() as f64 / n as f64;
            instab[i] = instability(&ranks, kind);
        }
        Ok(Self {
            n,
            instability_kind: kind,
            filters,
            runs,
            mean_sensitivity,
            mean_rank,
            instability: instab,
        })
    }

    pub fn index_of(&self, f: FilterRef) -> Option<usize> {
        self.filters.binary_search(&f).ok()
    }

    pub fn records(&self) -> Vec<FilterRecord> {
        self.filters
            .iter()
            .enumerate()
            .map(|(i, f)| FilterRecord {
                layer: f.layer,
                index: f.filter,
                sensitivity: self.mean_sensitivity[i],
                ranks: self.runs.iter().map(|r| r.rank[i]).collect(),
                mean_rank: self.mean_rank[i],
                instability: self.instability[i],
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.records())?)
    }
}

/// `config.runs` sensitivity runs with seeds `base_seed + i`.
pub fn build_profile(
    model: &ModelState,
    dataset: &Dataset,
    config: &SensitivityConfig,
) -> Result<SensitivityProfile> {
    if config.runs == 0 {
        return Err(Error::InvalidArgument("at least one run is required".into()));
    }
    let runs = (0..config.runs)
        .map(|i| {
            let seed = config.base_seed.wrapping_add(i as u64);
            sensitivity_run(model, dataset, config.num_batches, config.batch_size, seed).map(
                |mut r| {
                    r.run_index = i;
                    r
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    SensitivityProfile::from_runs(runs, config.instability)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mad_fixtures() {
        let kind = InstabilityKind::MeanAbsoluteDeviation;
        assert!((instability(&[0, 2, 1, 3, 2], kind) - 0.88).abs() < 1e-12);
        assert_eq!(instability(&[4, 4, 4, 4, 4], kind), 0.0);
        assert_eq!(instability(&[0, 1, 0, 1], kind), 0.5);
        assert_eq!(instability(&[7], kind), 0.0);
        // variance variant: deviations 1.6, .4, .6, 1.4, .4
        let var = (1.6f64.powi(2) + 0.16 + 0.36 + 1.96 + 0.16) / 5.0;
        assert!((instability(&[0, 2, 1, 3, 2], InstabilityKind::Variance) - var).abs() < 1e-12);
    }

    #[test]
    fn per_layer_normalization() {
        let filters = vec![
            FilterRef::new(0, 0),
            FilterRef::new(0, 1),
            FilterRef::new(3, 0),
            FilterRef::new(3, 1),
            FilterRef::new(3, 2),
        ];
        let s = normalize_per_layer(&filters, &[3.0, 4.0, 0.0, 0.0, 0.0]);
        assert_eq!(s, vec![0.6, 0.8, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn ranks_break_ties_by_position() {
        let filters = vec![FilterRef::new(0, 0), FilterRef::new(0, 1), FilterRef::new(1, 0)];
        assert_eq!(global_ranks(&filters, &[0.5, 0.1, 0.1]), vec![2, 0, 1]);
    }

    fn run(index: usize, ranks: Vec<usize>) -> SensitivityRun {
        let filters: Vec<FilterRef> = (0..ranks.len()).map(|i| FilterRef::new(0, i)).collect();
        SensitivityRun {
            run_index: index,
            seed: index as u64,
            sensitivity: ranks.iter().map(|&r| r as f64).collect(),
            raw: ranks.iter().map(|&r| r as f64).collect(),
            rank: ranks,
            filters,
        }
    }

    #[test]
    fn swapping_pair_has_half_instability() {
        let runs = (0..4).map(|i| run(i, if i % 2 == 0 { vec![0, 1] } else { vec![1, 0] })).collect();
        let p = SensitivityProfile::from_runs(runs, InstabilityKind::MeanAbsoluteDeviation).unwrap();
        assert_eq!(p.instability, vec![0.5, 0.5]);
        assert_eq!(p.mean_rank, vec![0.5, 0.5]);
    }

    #[test]
    fn single_run_is_perfectly_stable() {
        let p = SensitivityProfile::from_runs(vec![run(0, vec![2, 0, 1])], Default::default()).unwrap();
        assert!(p.instability.iter().all(|&v| v == 0.0));
    }
}
