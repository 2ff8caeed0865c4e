//! Confusion matrices, parent/child instance diffs and their 2-D layout.

mod tsne;

use serde::{Deserialize, Serialize};

pub use tsne::{downsample_gray, embed_instances, tsne, Embedding2D, EmbeddingMethod, TsneConfig};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::model::{predict_dataset, ModelState};
use crate::tree::PruneTree;

/// `counts[true][predicted]`. Predictions outside the class range are ignored.
pub fn confusion_counts(predictions: &[usize], labels: &[usize], classes: usize) -> Vec<Vec<u64>> {
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if l < classes && p < classes {
            counts[l][p] += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    /// Row-normalized, in percent. Empty rows stay zero.
    pub percentages: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        let percentages = counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if total == 0 { 0.0 } else { 100.0 * c as f64 / total as f64 })
                    .collect()
            })
            .collect();
        Self { counts, percentages }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }
}

pub fn confusion_matrix(model: &ModelState, test: &Dataset) -> Result<ConfusionMatrix> {
    let preds = predict_dataset(model, test)?;
    Ok(ConfusionMatrix::from_counts(confusion_counts(
        &preds,
        &test.labels,
        test.num_classes(),
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellValue {
    pub node_id: u64,
    pub count: u64,
    pub percentage: f64,
}

/// Value of cell `(i, j)` at every node from the root down to `node`.
pub fn confusion_cell_history(tree: &PruneTree, node: u64, cell: (usize, usize)) -> Result<Vec<CellValue>> {
    let (i, j) = cell;
    tree.path_to_root(node)?
        .into_iter()
        .map(|id| {
            let cm = tree.confusion(id)?;
            if i >= cm.classes() || j >= cm.classes() {
                return Err(Error::InvalidArgument(format!(
                    "cell ({i}, {j}) outside a {0}x{0} matrix",
                    cm.classes()
                )));
            }
            Ok(CellValue {
                node_id: id,
                count: cm.counts[i][j],
                percentage: cm.percentages[i][j],
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    /// Position in the test set.
    pub index: usize,
    pub id: String,
    pub label: usize,
    pub parent_prediction: usize,
    pub child_prediction: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InstanceDiff {
    /// Correct in the parent, wrong in the child.
    pub degenerated: Vec<InstanceRecord>,
    /// Wrong in the parent, correct in the child.
    pub improved: Vec<InstanceRecord>,
}

impl InstanceDiff {
    pub fn len(&self) -> usize {
        self.degenerated.len() + self.improved.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Degenerated first, then improved, each in test-set order.
    pub fn records(&self) -> impl Iterator<Item = &InstanceRecord> {
        self.degenerated.iter().chain(&self.improved)
    }
}

pub fn diff_predictions(
    parent: &[usize],
    child: &[usize],
    labels: &[usize],
    ids: &[String],
) -> Result<InstanceDiff> {
    if parent.len() != labels.len() || child.len() != labels.len() || ids.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction tables of length {} and {} for {} labels",
            parent.len(),
            child.len(),
            labels.len()
        )));
    }
    let mut diff = InstanceDiff::default();
    for (index, &label) in labels.iter().enumerate() {
        let (p, c) = (parent[index], child[index]);
        let rec = || InstanceRecord {
            index,
            id: ids[index].clone(),
            label,
            parent_prediction: p,
            child_prediction: c,
        };
        match (p == label, c == label) {
            (true, false) => diff.degenerated.push(rec()),
            (false, true) => diff.improved.push(rec()),
            _ => {}
        }
    }
    Ok(diff)
}

pub fn diff_instances(parent: &ModelState, child: &ModelState, test: &Dataset) -> Result<InstanceDiff> {
    if parent.architecture().num_classes() != child.architecture().num_classes() {
        return Err(Error::InvalidArgument("models predict different class sets".into()));
    }
    let p = predict_dataset(parent, test)?;
    let c = predict_dataset(child, test)?;
    diff_predictions(&p, &c, &test.labels, &test.ids)
}
