//! The pruning tree: every node is a model, every edge one prune + fine-tune
//! iteration. Branching is allowed; failed (non-converged) children stay in
//! the tree.

mod estimate;
mod session;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

pub use estimate::{estimate_linear, Estimate, EstimateQuery};
pub use session::{load_session, load_session_with, read_manifest, save_session, Manifest, MANIFEST};

use crate::criteria::{
    build_profile, plan_from_threshold, PlanOrigin, PruningPlan, Selection, SensitivityConfig,
    SensitivityProfile,
};
use crate::datasets::{load_image_folder, load_mnist, Dataset, Split};
use crate::error::{Error, Result};
use crate::finetune::{fine_tune_with, FineTuneConfig, FineTuneTrace, ProgressSnapshot};
use crate::instances::{confusion_counts, ConfusionMatrix};
use crate::model::{
    count_flops, count_params, load_checkpoint, predict_dataset, storage_bytes, Evaluation,
    ModelState,
};
use crate::pruner::{apply_plan, validate_plan};

/// Where a session's data comes from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Mnist {
        dir: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
    ImageFolder {
        train_dir: PathBuf,
        test_dir: PathBuf,
        height: usize,
        width: usize,
    },
    /// Supplied by the caller; cannot be reloaded from disk.
    #[default]
    InMemory,
}

/// Training and test data shared by every operation of a session.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Arc<Dataset>,
    pub test: Arc<Dataset>,
}

impl Datasets {
    pub fn new(train: Dataset, test: Dataset) -> Self {
        Self {
            train: Arc::new(train),
            test: Arc::new(test),
        }
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Datasets> {
        match self {
            DatasetSpec::Mnist {
                dir,
                train_limit,
                test_limit,
            } => {
                let (mut train, mut test) = load_mnist(dir)?;
                if let Some(n) = train_limit {
                    train = train.head(*n)?;
                }
                if let Some(n) = test_limit {
                    test = test.head(*n)?;
                }
                Ok(Datasets::new(train, test))
            }
            DatasetSpec::ImageFolder {
                train_dir,
                test_dir,
                height,
                width,
            } => {
                let train = load_image_folder(train_dir, (*height, *width), Split::Train)?;
                let test = load_image_folder(test_dir, (*height, *width), Split::Test)?;
                if train.dataset.class_names != test.dataset.class_names {
                    return Err(Error::Dataset(
                        "train and test folders disagree on class names".into(),
                    ));
                }
                Ok(Datasets::new(train.dataset, test.dataset))
            }
            DatasetSpec::InMemory => Err(Error::Dataset(
                "session was created from in-memory data; supply datasets explicitly".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub dataset: DatasetSpec,
    pub finetune: FineTuneConfig,
    pub sensitivity: SensitivityConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerWidth {
    pub layer: usize,
    pub filters: usize,
}

/// Everything the tree knows about one model without loading its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMeta {
    pub node_id: u64,
    pub parent_id: Option<u64>,
    pub filter_count: usize,
    pub layer_widths: Vec<LayerWidth>,
    pub accuracy: f64,
    pub correct: usize,
    pub compression_ratio: f64,
    pub params: u64,
    pub flops: u64,
    pub storage_bytes: u64,
    pub converged: bool,
    pub plan: Option<PruningPlan>,
    pub trace: Option<FineTuneTrace>,
    pub checkpoint: String,
    /// `confusion[true][predicted]` on the test set.
    pub confusion: Vec<Vec<u64>>,
}

#[derive(Debug)]
struct Node {
    meta: NodeMeta,
    model: OnceLock<Arc<ModelState>>,
    profile: Mutex<Option<(SensitivityConfig, Arc<SensitivityProfile>)>>,
}

impl Node {
    fn new(meta: NodeMeta, model: Option<Arc<ModelState>>) -> Self {
        let cell = OnceLock::new();
        if let Some(m) = model {
            let _ = cell.set(m);
        }
        Self {
            meta,
            model: cell,
            profile: Mutex::new(None),
        }
    }
}

/// A fully evaluated child that has not been inserted yet.
#[derive(Debug, Clone)]
pub struct ChildDraft {
    pub meta: NodeMeta,
    pub model: Arc<ModelState>,
}

#[derive(Debug)]
pub struct PruneTree {
    nodes: BTreeMap<u64, Node>,
    next_id: u64,
    root_params: u64,
    config: SessionConfig,
    data: Datasets,
    /// Directory checkpoints are loaded from lazily.
    dir: Option<PathBuf>,
}

/// Whether an auto-prune run may go on from the freshly created `child`.
pub fn continues_auto_prune(child: &NodeMeta, stop_accuracy: f64) -> bool {
    child.converged && child.accuracy >= stop_accuracy
}

pub fn checkpoint_name(id: u64) -> String {
    format!("node_{id}.cnpm")
}

pub fn profile_name(id: u64) -> String {
    format!("profile_{id}.json")
}

fn describe(
    model: &ModelState,
    test: &Dataset,
    root_params: Option<u64>,
) -> Result<NodeMeta> {
    let arch = model.architecture();
    let preds = predict_dataset(model, test)?;
    let eval = Evaluation::from_predictions(&preds, &test.labels, test.num_classes())?;
    let params = count_params(model);
    Ok(NodeMeta {
        node_id: 0,
        parent_id: None,
        filter_count: arch.filter_count(),
        layer_widths: arch
            .conv_layers()
            .into_iter()
            .map(|layer| LayerWidth {
                layer,
                filters: arch.out_channels(layer).unwrap_or(0),
            })
            .collect(),
        accuracy: eval.accuracy,
        correct: eval.correct,
        compression_ratio: root_params.map_or(0.0, |r| 1.0 - params as f64 / r as f64),
        params,
        flops: count_flops(model),
        storage_bytes: storage_bytes(model)?,
        converged: true,
        plan: None,
        trace: None,
        checkpoint: String::new(),
        confusion: confusion_counts(&preds, &test.labels, test.num_classes()),
    })
}

impl PruneTree {
    /// New tree whose root (id 0) is `model`.
    pub fn create_session(model: ModelState, data: Datasets, config: SessionConfig) -> Result<Self> {
        let classes = model.architecture().num_classes();
        for ds in [&data.train, &data.test] {
            if ds.num_classes() != classes {
                return Err(Error::Dataset(format!(
                    "model predicts {classes} classes but the dataset has {}",
                    ds.num_classes()
                )));
            }
            if ds.image_shape() != model.architecture().input_shape {
                return Err(Error::Dataset(format!(
                    "dataset images are {:?} but the model expects {:?}",
                    ds.image_shape(),
                    model.architecture().input_shape
                )));
            }
        }
        let mut meta = describe(&model, &data.test, None)?;
        meta.checkpoint = checkpoint_name(0);
        let root_params = meta.params;
        let mut nodes = BTreeMap::new();
        nodes.insert(0, Node::new(meta, Some(Arc::new(model))));
        Ok(Self {
            nodes,
            next_id: 1,
            root_params,
            config,
            data,
            dir: None,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut SessionConfig {
        &mut self.config
    }

    pub fn datasets(&self) -> &Datasets {
        &self.data
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn root_id(&self) -> u64 {
        0
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: u64) -> Result<&NodeMeta> {
        self.nodes.get(&id).map(|n| &n.meta).ok_or(Error::NodeNotFound(id))
    }

    /// All nodes in id (creation) order.
    pub fn nodes(&self) -> impl Iterator<Item = &NodeMeta> {
        self.nodes.values().map(|n| &n.meta)
    }

    pub fn children(&self, id: u64) -> Vec<u64> {
        self.nodes()
            .filter(|m| m.parent_id == Some(id))
            .map(|m| m.node_id)
            .collect()
    }

    /// Node ids from the root down to `id`.
    pub fn path_to_root(&self, id: u64) -> Result<Vec<u64>> {
        let mut path = vec![id];
        let mut cur = self.node(id)?;
        while let Some(p) = cur.parent_id {
            path.push(p);
            cur = self.node(p)?;
        }
        path.reverse();
        Ok(path)
    }

    pub fn model(&self, id: u64) -> Result<Arc<ModelState>> {
        let node = self.nodes.get(&id).ok_or(Error::NodeNotFound(id))?;
        if let Some(m) = node.model.get() {
            return Ok(m.clone());
        }
        let dir = self.dir.as_ref().ok_or_else(|| {
            Error::Manifest(format!("node {id} has no model and the session has no directory"))
        })?;
        let path = dir.join(&node.meta.checkpoint);
        if !path.is_file() {
            return Err(Error::MissingCheckpoint { node: id, path });
        }
        let model = Arc::new(load_checkpoint(&path)?);
        Ok(node.model.get_or_init(|| model).clone())
    }

    /// Cached profile of `id`, if one was computed with the current settings.
    pub fn cached_profile(&self, id: u64) -> Result<Option<Arc<SensitivityProfile>>> {
        let node = self.nodes.get(&id).ok_or(Error::NodeNotFound(id))?;
        let guard = node.profile.lock().expect("profile lock");
        Ok(guard
            .as_ref()
            .filter(|(cfg, _)| *cfg == self.config.sensitivity)
            .map(|(_, p)| p.clone()))
    }

    /// Sensitivity profile of `id`, computed on the training data on first use.
    pub fn profile(&self, id: u64) -> Result<Arc<SensitivityProfile>> {
        if let Some(p) = self.cached_profile(id)? {
            return Ok(p);
        }
        let model = self.model(id)?;
        let cfg = self.config.sensitivity;
        let profile = Arc::new(build_profile(&model, &self.data.train, &cfg)?);
        let node = &self.nodes[&id];
        *node.profile.lock().expect("profile lock") = Some((cfg, profile.clone()));
        Ok(profile)
    }

    pub fn confusion(&self, id: u64) -> Result<ConfusionMatrix> {
        Ok(ConfusionMatrix::from_counts(self.node(id)?.confusion.clone()))
    }

    /// Runs the whole pipeline for one child without touching the tree.
    pub fn prepare_child(
        &self,
        parent: u64,
        plan: &PruningPlan,
        config: &FineTuneConfig,
        observer: &mut dyn FnMut(&ProgressSnapshot),
        cancel: Option<&AtomicBool>,
    ) -> Result<ChildDraft> {
        if plan.is_empty() {
            return Err(Error::InvalidArgument("a pruning plan must remove at least one filter".into()));
        }
        config.validate()?;
        let model = self.model(parent)?;
        let violations = validate_plan(model.architecture(), plan);
        if !violations.is_empty() {
            return Err(Error::InvalidPlan(violations));
        }
        self.profile(parent)?;
        let pruned = apply_plan(&model, plan)?;
        let (tuned, trace) = fine_tune_with(
            &pruned,
            &self.data.train,
            &self.data.test,
            config,
            observer,
            cancel,
        )?;
        let mut meta = describe(&tuned, &self.data.test, Some(self.root_params))?;
        meta.parent_id = Some(parent);
        meta.converged = trace.converged;
        meta.plan = Some(PruningPlan {
            target: parent,
            ..plan.clone()
        });
        meta.trace = Some(trace);
        Ok(ChildDraft {
            meta,
            model: Arc::new(tuned),
        })
    }

    /// Inserts a prepared child and returns its id.
    pub fn commit(&mut self, draft: ChildDraft) -> Result<u64> {
        let parent = draft.meta.parent_id.ok_or_else(|| Error::InvalidArgument("draft has no parent".into()))?;
        self.node(parent)?;
        let id = self.next_id;
        self.next_id += 1;
        let mut meta = draft.meta;
        meta.node_id = id;
        meta.checkpoint = checkpoint_name(id);
        self.nodes.insert(id, Node::new(meta, Some(draft.model)));
        Ok(id)
    }

    /// Prune, fine-tune and evaluate a new child of `parent`.
    pub fn prune_node(&mut self, parent: u64, plan: &PruningPlan, config: &FineTuneConfig) -> Result<u64> {
        let draft = self.prepare_child(parent, plan, config, &mut |_| {}, None)?;
        self.commit(draft)
    }

    /// The lowest-sensitivity `ratio` of `node`'s filters, or `None` when the
    /// layer-survival rule leaves nothing to remove.
    pub fn next_auto_plan(&self, node: u64, ratio: f64) -> Result<Option<PruningPlan>> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::InvalidArgument(format!("ratio {ratio} must lie in (0, 1)")));
        }
        let profile = self.profile(node)?;
        let total = profile.filters.len();
        let k = (ratio * total as f64).round() as usize;
        if k == 0 || k >= total {
            return Ok(None);
        }
        let t = plan_from_threshold(&profile, Selection::Count(k))?;
        if t.plan.is_empty() {
            return Ok(None);
        }
        Ok(Some(PruningPlan {
            target: node,
            origin: PlanOrigin::AutoRatio,
            ..t.plan
        }))
    }

    /// Repeated ratio pruning from `node` until a child falls below
    /// `stop_accuracy`, fails to converge, or no plan is possible. The
    /// failing child is kept.
    pub fn auto_prune(
        &mut self,
        node: u64,
        ratio: f64,
        stop_accuracy: f64,
        config: &FineTuneConfig,
    ) -> Result<Vec<u64>> {
        self.auto_prune_with(node, ratio, stop_accuracy, config, &mut |_, _| Ok(()))
    }

    /// [`auto_prune`](Self::auto_prune) calling `on_child` after each commit.
    pub fn auto_prune_with(
        &mut self,
        node: u64,
        ratio: f64,
        stop_accuracy: f64,
        config: &FineTuneConfig,
        on_child: &mut dyn FnMut(&mut PruneTree, u64) -> Result<()>,
    ) -> Result<Vec<u64>> {
        let mut created = Vec::new();
        let mut current = node;
        while let Some(plan) = self.next_auto_plan(current, ratio)? {
            let id = self.prune_node(current, &plan, config)?;
            created.push(id);
            on_child(self, id)?;
            let meta = self.node(id)?;
            log::info!(
                "auto-prune: node {id} has {} filters, accuracy {:.4}, converged {}",
                meta.filter_count,
                meta.accuracy,
                meta.converged
            );
            if !continues_auto_prune(meta, stop_accuracy) {
                break;
            }
            current = id;
        }
        Ok(created)
    }

    pub fn estimate(&self, a: u64, b: u64, query: EstimateQuery) -> Result<Estimate> {
        if a == b {
            return Err(Error::NonInformativePair("the two nodes are the same".into()));
        }
        let (ma, mb) = (self.node(a)?, self.node(b)?);
        estimate_linear(
            (ma.filter_count, ma.accuracy),
            (mb.filter_count, mb.accuracy),
            query,
        )
    }
}

#[cfg(test)]
mod tests;
