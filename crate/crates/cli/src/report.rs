//! Per-node reports built from a session manifest.

use std::io::Write;

use anyhow::Context;
use cnnprune::finetune::{trace_statistics, TerminationReason};
use cnnprune::tree::Manifest;
use cnnprune::FilterRef;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub node_id: u64,
    pub parent_id: Option<u64>,
    pub filters: usize,
    pub layer_filters: Vec<usize>,
    pub accuracy: f64,
    pub params: u64,
    pub flops: u64,
    pub storage_bytes: u64,
    pub compression_ratio: f64,
    pub converged: bool,
    pub epochs_used: Option<usize>,
    /// Fine-tuning epochs spent recovering.
    pub recovery_cost: Option<usize>,
    pub termination_reason: Option<TerminationReason>,
    pub removed_filters: Vec<FilterRef>,
    pub confusion: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub class_names: Vec<String>,
    pub nodes: Vec<NodeReport>,
}

impl Report {
    pub fn from_manifest(m: &Manifest) -> Self {
        let nodes = m
            .nodes
            .iter()
            .map(|n| NodeReport {
                node_id: n.node_id,
                parent_id: n.parent_id,
                filters: n.filter_count,
                layer_filters: n.layer_widths.iter().map(|w| w.filters).collect(),
                accuracy: n.accuracy,
                params: n.params,
                flops: n.flops,
                storage_bytes: n.storage_bytes,
                compression_ratio: n.compression_ratio,
                converged: n.converged,
                epochs_used: n.trace.as_ref().map(|t| t.epochs_used),
                recovery_cost: n.trace.as_ref().and_then(trace_statistics).map(|s| s.recovery_cost),
                termination_reason: n.trace.as_ref().and_then(|t| t.termination_reason),
                removed_filters: n.plan.as_ref().map(|p| p.filters.clone()).unwrap_or_default(),
                confusion: n.confusion.clone(),
            })
            .collect();
        Self {
            class_names: m.class_names.clone(),
            nodes,
        }
    }

    pub fn to_json(&self) -> anyhow::Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    /// One row per node; confusion counts as `cm_<true>_<pred>` columns.
    pub fn write_csv(&self, w: impl Write) -> anyhow::Result<()> {
        let classes = self.class_names.len();
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = [
            "node_id",
            "parent_id",
            "filters",
            "layer_filters",
            "accuracy",
            "params",
            "flops",
            "storage_bytes",
            "compression_ratio",
            "converged",
            "epochs_used",
            "recovery_cost",
            "termination_reason",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for i in 0..classes {
            for j in 0..classes {
                header.push(format!("cm_{i}_{j}"));
            }
        }
        wr.write_record(&header)?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for n in &self.nodes {
            let mut row = vec![
                n.node_id.to_string(),
                opt(n.parent_id.map(|p| p.to_string())),
                n.filters.to_string(),
                n.layer_filters.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(";"),
                n.accuracy.to_string(),
                n.params.to_string(),
                n.flops.to_string(),
                n.storage_bytes.to_string(),
                n.compression_ratio.to_string(),
                n.converged.to_string(),
                opt(n.epochs_used.map(|e| e.to_string())),
                opt(n.recovery_cost.map(|e| e.to_string())),
                opt(n.termination_reason.map(|r| {
                    serde_json::to_value(r)
                        .ok()
                        .and_then(|v| v.as_str().map(str::to_owned))
                        .unwrap_or_default()
                })),
            ];
            for i in 0..classes {
                for j in 0..classes {
                    let c = n.confusion.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0);
                    row.push(c.to_string());
                }
            }
            wr.write_record(&row)?;
        }
        wr.flush().context("writing csv")?;
        Ok(())
    }

    pub fn to_csv(&self) -> anyhow::Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }
}
