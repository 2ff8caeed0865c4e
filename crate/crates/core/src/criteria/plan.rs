use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::SensitivityProfile;
use crate::error::{Error, Result};
use crate::model::{Architecture, FilterRef};
use crate::pruner::validate_plan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanOrigin {
    #[default]
    Threshold,
    AutoRatio,
    ManualRefined,
}

/// A set of filters to remove from one model.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PruningPlan {
    /// Tree node the plan applies to.
    pub target: u64,
    pub filters: Vec<FilterRef>,
    pub origin: PlanOrigin,
}

impl PruningPlan {
    pub fn new(target: u64, filters: impl IntoIterator<Item = FilterRef>, origin: PlanOrigin) -> Self {
        Self {
            target,
            filters: filters.into_iter().collect(),
            origin,
        }
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn contains(&self, f: FilterRef) -> bool {
        self.filters.contains(&f)
    }

    pub fn as_set(&self) -> BTreeSet<FilterRef> {
        self.filters.iter().copied().collect()
    }

    /// Removed filter indices grouped by conv layer.
    pub fn by_layer(&self) -> BTreeMap<usize, BTreeSet<usize>> {
        let mut m: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for f in &self.filters {
            m.entry(f.layer).or_default().insert(f.filter);
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Count(usize),
    Fraction(f64),
}

/// A threshold plan and what the layer-survival rule held back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPlan {
    pub plan: PruningPlan,
    pub requested: usize,
    /// Filters spared so no layer is emptied.
    pub spared: Vec<FilterRef>,
}

impl ThresholdPlan {
    pub fn shortfall(&self) -> usize {
        self.spared.len()
    }
}

/// Profile indices in removal priority: mean sensitivity ascending, then
/// instability descending, then (layer, filter).
pub fn removal_order(profile: &SensitivityProfile) -> Vec<usize> {
    let mut order: Vec<usize> = (0..profile.filters.len()).collect();
    order.sort_by(|&a, &b| {
        profile.mean_sensitivity[a]
            .total_cmp(&profile.mean_sensitivity[b])
            .then_with(|| profile.instability[b].total_cmp(&profile.instability[a]))
            .then_with(|| profile.filters[a].cmp(&profile.filters[b]))
    });
    order
}

/// Selects the lowest-priority filters. When a layer would lose every filter,
/// its most sensitive victim is spared and reported instead.
pub fn plan_from_threshold(profile: &SensitivityProfile, selection: Selection) -> Result<ThresholdPlan> {
    let total = profile.filters.len();
    let k = match selection {
        Selection::Count(k) => k,
        Selection::Fraction(f) => {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::InvalidArgument(format!(
                    "fraction {f} must lie in [0, 1)"
                )));
            }
            (f * total as f64).round() as usize
        }
    };
    if k >= total {
        return Err(Error::PlanTooLarge { requested: k, total });
    }
    let order = removal_order(profile);
    let chosen = &order[..k];
    let mut layer_sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for f in &profile.filters {
        *layer_sizes.entry(f.layer).or_default() += 1;
    }
    let mut taken: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in chosen {
        *taken.entry(profile.filters[i].layer).or_default() += 1;
    }
    let mut spared = Vec::new();
    for (&layer, &n) in &taken {
        if n == layer_sizes[&layer] {
            // the last victim of this layer in priority order has the highest sensitivity
            let keep = chosen
                .iter()
                .rev()
                .find(|&&i| profile.filters[i].layer == layer)
                .copied()
                .expect("layer has victims");
            spared.push(profile.filters[keep]);
        }
    }
    let filters: Vec<FilterRef> = chosen
        .iter()
        .map(|&i| profile.filters[i])
        .filter(|f| !spared.contains(f))
        .collect();
    Ok(ThresholdPlan {
        plan: PruningPlan::new(0, filters, PlanOrigin::Threshold),
        requested: k,
        spared,
    })
}

/// Percentages of filter count, sensitivity and instability kept after the plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanImpact {
    pub remaining_filters_pct: f64,
    pub remaining_sensitivity_pct: f64,
    pub remaining_instability_pct: f64,
}

pub fn plan_impact(profile: &SensitivityProfile, plan: &PruningPlan) -> Result<PlanImpact> {
    let mut removed = vec![false; profile.filters.len()];
    for &f in &plan.filters {
        let i = profile.index_of(f).ok_or(Error::UnknownFilter(f))?;
        removed[i] = true;
    }
    let remaining = |metric: &dyn Fn(usize) -> f64| {
        let all: f64 = (0..removed.len()).map(metric).sum();
        if all <= 0.0 {
            return 100.0;
        }
        let kept: f64 = (0..removed.len()).filter(|&i| !removed[i]).map(metric).sum();
        100.0 * kept / all
    };
    Ok(PlanImpact {
        remaining_filters_pct: remaining(&|_| 1.0),
        remaining_sensitivity_pct: remaining(&|i| profile.mean_sensitivity[i]),
        remaining_instability_pct: remaining(&|i| profile.instability[i]),
    })
}

/// Adds and removes filters, then re-validates the plan against `arch`.
pub fn refine_plan(
    arch: &Architecture,
    plan: &PruningPlan,
    add: &[FilterRef],
    remove: &[FilterRef],
) -> Result<PruningPlan> {
    for &f in add {
        if !arch.contains(f) {
            return Err(Error::UnknownFilter(f));
        }
    }
    let mut set = plan.as_set();
    for &f in remove {
        if !set.remove(&f) {
            return Err(Error::NotInPlan(f));
        }
    }
    set.extend(add.iter().copied());
    let refined = PruningPlan::new(plan.target, set, PlanOrigin::ManualRefined);
    let report = validate_plan(arch, &refined);
    if !report.is_empty() {
        return Err(Error::InvalidPlan(report));
    }
    Ok(refined)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criteria::{InstabilityKind, SensitivityRun};
    use crate::numkernel::LayerSpec;

    fn profile(layers: &[(usize, Vec<f64>)]) -> SensitivityProfile {
        let mut filters = Vec::new();
        let mut sens = Vec::new();
        for (l, s) in layers {
            for (i, &v) in s.iter().enumerate() {
                filters.push(FilterRef::new(*l, i));
                sens.push(v);
            }
        }
        let rank = super::super::global_ranks(&filters, &sens);
        let run = SensitivityRun {
            run_index: 0,
            seed: 0,
            filters,
            raw: sens.clone(),
            sensitivity: sens,
            rank,
        };
        SensitivityProfile::from_runs(vec![run], InstabilityKind::MeanAbsoluteDeviation).unwrap()
    }

    #[test]
    fn zero_count_is_empty_plan() {
        let p = profile(&[(0, vec![0.1, 0.2, 0.3])]);
        let t = plan_from_threshold(&p, Selection::Count(0)).unwrap();
        assert!(t.plan.is_empty());
        assert!(matches!(
            plan_from_threshold(&p, Selection::Count(3)),
            Err(Error::PlanTooLarge { .. })
        ));
    }

    #[test]
    fn sparing_keeps_one_filter_per_layer() {
        let p = profile(&[(0, vec![0.01, 0.02, 0.03]), (3, vec![0.5, 0.6, 0.7, 0.8])]);
        let t = plan_from_threshold(&p, Selection::Count(4)).unwrap();
        assert_eq!(t.spared, vec![FilterRef::new(0, 2)]);
        assert_eq!(t.shortfall(), 1);
        assert_eq!(
            t.plan.filters,
            vec![FilterRef::new(0, 0), FilterRef::new(0, 1), FilterRef::new(3, 0)]
        );
    }

    #[test]
    fn impact_of_removing_a_tenth_of_the_mass() {
        let p = profile(&[(0, vec![1.0, 2.0, 3.0, 4.0])]);
        let plan = PruningPlan::new(0, [FilterRef::new(0, 0)], PlanOrigin::Threshold);
        let i = plan_impact(&p, &plan).unwrap();
        assert!((i.remaining_sensitivity_pct - 90.0).abs() < 1e-9);
        assert!((i.remaining_filters_pct - 75.0).abs() < 1e-9);
        let empty = plan_impact(&p, &PruningPlan::default()).unwrap();
        assert_eq!(
            (empty.remaining_filters_pct, empty.remaining_sensitivity_pct, empty.remaining_instability_pct),
            (100.0, 100.0, 100.0)
        );
    }

    fn arch() -> Architecture {
        Architecture {
            input_shape: [1, 8, 8],
            layers: vec![
                LayerSpec::conv(1, 4, 3),
                LayerSpec::Relu,
                LayerSpec::conv(4, 8, 3),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::linear(8 * 16, 2),
            ],
            class_names: vec!["a".into(), "b".into()],
        }
    }

    #[test]
    fn refine_swaps_filters() {
        let plan = PruningPlan::new(
            4,
            [FilterRef::new(2, 0), FilterRef::new(2, 5), FilterRef::new(2, 3)],
            PlanOrigin::Threshold,
        );
        let r = refine_plan(
            &arch(),
            &plan,
            &[FilterRef::new(2, 1), FilterRef::new(2, 6)],
            &[FilterRef::new(2, 0), FilterRef::new(2, 5)],
        )
        .unwrap();
        assert_eq!(r.len(), plan.len());
        assert!(r.contains(FilterRef::new(2, 6)) && !r.contains(FilterRef::new(2, 0)));
        assert_eq!(r.origin, PlanOrigin::ManualRefined);
        assert_eq!(r.target, 4);

        let again = refine_plan(&arch(), &r, &[FilterRef::new(2, 1)], &[]).unwrap();
        assert_eq!(again, r);

        assert!(matches!(
            refine_plan(&arch(), &r, &[], &[FilterRef::new(0, 0)]),
            Err(Error::NotInPlan(_))
        ));
        let all: Vec<FilterRef> = (0..4).map(|f| FilterRef::new(0, f)).collect();
        assert!(matches!(
            refine_plan(&arch(), &r, &all, &[]),
            Err(Error::InvalidPlan(_))
        ));
    }
}
