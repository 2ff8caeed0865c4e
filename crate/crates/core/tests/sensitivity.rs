use cnnprune::criteria::{global_ranks, normalize_per_layer, taylor_scores};
use cnnprune::datasets::{Dataset, Split};
use cnnprune::model::{build_model, Architecture};
use cnnprune::numkernel::{LayerSpec, Tensor};
use cnnprune::FilterRef;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn normalization_ignores_layer_scale(
        a in prop::collection::vec(0.001f64..10.0, 1..6),
        b in prop::collection::vec(0.001f64..10.0, 1..6),
        k in 0.01f64..100.0,
    ) {
        let filters: Vec<FilterRef> = (0..a.len()).map(|f| FilterRef::new(0, f))
            .chain((0..b.len()).map(|f| FilterRef::new(3, f))).collect();
        let raw: Vec<f64> = a.iter().chain(&b).copied().collect();
        let scaled: Vec<f64> = a.iter().map(|v| v * k).chain(b.iter().copied()).collect();
        let n1 = normalize_per_layer(&filters, &raw);
        let n2 = normalize_per_layer(&filters, &scaled);
        for (x, y) in n1.iter().zip(&n2) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let ranks = global_ranks(&filters, &n1);
        let mut sorted = ranks.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..filters.len()).collect::<Vec<_>>());
    }
}

#[test]
fn dead_filter_scores_zero() {
    let arch = Architecture {
        input_shape: [1, 6, 6],
        layers: vec![
            LayerSpec::conv(1, 3, 3),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::linear(48, 2),
        ],
        class_names: vec!["a".into(), "b".into()],
    };
    let mut m = build_model(arch, 0).unwrap();
    let p = m.layer_params_mut(0).unwrap();
    p.weights.data_mut()[9..18].fill(0.0);
    p.bias.data_mut()[1] = -1.0;
    let images = Tensor::from_fn(&[20, 1, 6, 6], |i| (i % 7) as f32 / 7.0);
    let ds = Dataset::new(
        images,
        (0..20).map(|i| i % 2).collect(),
        vec!["a".into(), "b".into()],
        Split::Train,
        (0..20).map(|i| i.to_string()).collect(),
    )
    .unwrap();
    let batches = ds.batches(10, 0, true);
    let (filters, raw) = taylor_scores(&m, &ds, &batches).unwrap();
    assert_eq!(filters[1], FilterRef::new(0, 1));
    assert_eq!(raw[1], 0.0);
    assert!(raw[0] > 0.0 || raw[2] > 0.0);
}
