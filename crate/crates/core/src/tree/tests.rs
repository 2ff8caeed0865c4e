use super::*;
use crate::criteria::PlanOrigin;
use crate::model::{build_model, Architecture};
use crate::numkernel::{LayerSpec, Tensor};
use crate::FilterRef;

fn arch() -> Architecture {
    Architecture {
        input_shape: [1, 6, 6],
        layers: vec![
            LayerSpec::conv(1, 4, 3),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::linear(64, 2),
        ],
        class_names: vec!["dark".into(), "bright".into()],
    }
}

fn data(n: usize, split: Split, offset: usize) -> Dataset {
    let images = Tensor::from_fn(&[n, 1, 6, 6], |i| {
        let k = i / 36 + offset;
        let base = if k % 2 == 0 { 0.2 } else { 0.7 };
        base + ((i * 7919) % 13) as f32 / 50.0
    });
    let labels = (0..n).map(|k| (k + offset) % 2).collect();
    let ids = (0..n).map(|k| format!("{split:?}/{k}")).collect();
    Dataset::new(images, labels, vec!["dark".into(), "bright".into()], split, ids).unwrap()
}

fn session() -> PruneTree {
    let config = SessionConfig {
        sensitivity: SensitivityConfig {
            runs: 2,
            num_batches: 2,
            batch_size: 10,
            ..Default::default()
        },
        ..Default::default()
    };
    PruneTree::create_session(
        build_model(arch(), 1).unwrap(),
        Datasets::new(data(40, Split::Train, 0), data(20, Split::Test, 1)),
        config,
    )
    .unwrap()
}

fn quick() -> FineTuneConfig {
    FineTuneConfig {
        max_epochs: 2,
        batch_size: 10,
        ..Default::default()
    }
}

#[test]
fn root_only() {
    let t = session();
    assert_eq!(t.len(), 1);
    assert_eq!(t.path_to_root(0).unwrap(), vec![0]);
    let root = t.node(0).unwrap();
    assert_eq!(root.filter_count, 4);
    assert_eq!(root.compression_ratio, 0.0);
    assert!(root.converged);
}

#[test]
fn class_mismatch_rejected() {
    let mut a = arch();
    a.layers[3] = LayerSpec::linear(64, 3);
    a.class_names.push("x".into());
    let err = PruneTree::create_session(
        build_model(a, 0).unwrap(),
        Datasets::new(data(4, Split::Train, 0), data(4, Split::Test, 0)),
        SessionConfig::default(),
    );
    assert!(err.is_err());
}

#[test]
fn prune_appends_child() {
    let mut t = session();
    let plan = PruningPlan::new(0, [FilterRef::new(0, 1)], PlanOrigin::ManualRefined);
    let id = t.prune_node(0, &plan, &quick()).unwrap();
    assert_eq!(id, 1);
    let child = t.node(1).unwrap();
    assert_eq!(child.parent_id, Some(0));
    assert_eq!(child.filter_count, 3);
    assert!(child.params < t.node(0).unwrap().params);
    assert!(child.compression_ratio > 0.0);
    assert_eq!(t.path_to_root(1).unwrap(), vec![0, 1]);
    assert_eq!(t.children(0), vec![1]);
    // branching from the root again
    let id2 = t.prune_node(0, &plan, &quick()).unwrap();
    assert_eq!(t.children(0), vec![1, id2]);
}

#[test]
fn invalid_plans_leave_tree_alone() {
    let mut t = session();
    let empty = PruningPlan::new(0, [], PlanOrigin::ManualRefined);
    assert!(t.prune_node(0, &empty, &quick()).is_err());
    let all = PruningPlan::new(0, (0..4).map(|f| FilterRef::new(0, f)), PlanOrigin::ManualRefined);
    assert!(matches!(t.prune_node(0, &all, &quick()), Err(Error::InvalidPlan(_))));
    assert!(matches!(t.prune_node(7, &empty, &quick()), Err(Error::InvalidArgument(_)) | Err(Error::NodeNotFound(7))));
    assert_eq!(t.len(), 1);
}

#[test]
fn auto_plan_sizes() {
    let t = session();
    assert_eq!(t.next_auto_plan(0, 0.5).unwrap().unwrap().len(), 2);
    assert!(t.next_auto_plan(0, 0.1).unwrap().is_none());
    assert!(t.next_auto_plan(0, 0.0).is_err());
}

#[test]
fn auto_prune_stops_at_threshold() {
    let mut t = session();
    // an unreachable stop accuracy keeps only the first, failing child
    let created = t.auto_prune(0, 0.25, 1.1, &quick()).unwrap();
    assert_eq!(created, vec![1]);
    let created = t.auto_prune(0, 0.25, 0.0, &FineTuneConfig { target_accuracy: 0.0, ..quick() }).unwrap();
    // 4 -> 3 -> 2 -> 1 filters, then round(0.25) = 0 ends the run
    assert_eq!(created.len(), 3);
    assert_eq!(t.node(*created.last().unwrap()).unwrap().filter_count, 1);
}

#[test]
fn session_roundtrip() {
    let mut t = session();
    let plan = PruningPlan::new(0, [FilterRef::new(0, 2)], PlanOrigin::ManualRefined);
    t.prune_node(0, &plan, &quick()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_session(&mut t, dir.path()).unwrap();
    let mut loaded = load_session_with(dir.path(), t.datasets().clone()).unwrap();
    assert_eq!(loaded.len(), 2);
    assert_eq!(loaded.node(1).unwrap(), t.node(1).unwrap());
    assert_eq!(*loaded.model(1).unwrap(), *t.model(1).unwrap());
    assert!(loaded.cached_profile(0).unwrap().is_some());
    // saving into its own directory again keeps the files valid
    save_session(&mut loaded, dir.path()).unwrap();

    std::fs::remove_file(dir.path().join(checkpoint_name(1))).unwrap();
    match load_session_with(dir.path(), t.datasets().clone()) {
        Err(Error::MissingCheckpoint { node, .. }) => assert_eq!(node, 1),
        other => panic!("expected missing checkpoint, got {other:?}"),
    }
    std::fs::write(dir.path().join(MANIFEST), b"{not json").unwrap();
    assert!(matches!(load_session_with(dir.path(), t.datasets().clone()), Err(Error::Manifest(_))));
}

#[test]
fn estimate_between_nodes() {
    let t = session();
    assert!(matches!(
        t.estimate(0, 0, EstimateQuery::TargetFilters(2)),
        Err(Error::NonInformativePair(_))
    ));
}
