//! On-disk session layout: `manifest.json`, one checkpoint per node and an
//! optional cached profile per node.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{checkpoint_name, profile_name, Datasets, Node, NodeMeta, PruneTree, SessionConfig};
use crate::criteria::{SensitivityConfig, SensitivityProfile};
use crate::error::{Error, Result};
use crate::model::save_checkpoint;

pub const MANIFEST: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: SessionConfig,
    pub class_names: Vec<String>,
    pub root_params: u64,
    pub next_id: u64,
    pub nodes: Vec<NodeMeta>,
}

#[derive(Serialize, Deserialize)]
struct StoredProfile {
    config: SensitivityConfig,
    profile: SensitivityProfile,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the whole tree under `dir`, which becomes the session directory.
/// Checkpoints already present in the session's own directory are not
/// rewritten.
pub fn save_session(tree: &mut PruneTree, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let same_dir = match tree.dir() {
        Some(d) => same_path(d, dir),
        None => false,
    };
    for (&id, node) in &tree.nodes {
        let path = dir.join(&node.meta.checkpoint);
        if !(same_dir && path.is_file()) {
            let model = tree.model(id)?;
            save_checkpoint(&model, &path)?;
        }
        let cached = node.profile.lock().expect("profile lock").clone();
        if let Some((config, profile)) = cached {
            let stored = StoredProfile {
                config,
                profile: (*profile).clone(),
            };
            write(&dir.join(profile_name(id)), &serde_json::to_vec(&stored)?)?;
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config: tree.config.clone(),
        class_names: tree.data.test.class_names.clone(),
        root_params: tree.root_params,
        next_id: tree.next_id,
        nodes: tree.nodes().cloned().collect(),
    };
    write(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    tree.dir = Some(dir.to_path_buf());
    Ok(())
}

fn same_path(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => a == b,
    }
}

/// Loads a session and its datasets as described by the stored config.
pub fn load_session(dir: impl AsRef<Path>) -> Result<PruneTree> {
    let manifest = read_manifest(dir.as_ref())?;
    let data = manifest.config.dataset.load()?;
    build(dir.as_ref(), manifest, data)
}

/// Loads a session with caller-supplied datasets.
pub fn load_session_with(dir: impl AsRef<Path>, data: Datasets) -> Result<PruneTree> {
    let manifest = read_manifest(dir.as_ref())?;
    build(dir.as_ref(), manifest, data)
}

/// Reads only the manifest; no checkpoints or datasets are touched.
pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    Ok(manifest)
}

fn build(dir: &Path, manifest: Manifest, data: Datasets) -> Result<PruneTree> {
    if manifest.class_names != data.test.class_names {
        return Err(Error::Dataset(format!(
            "session classes {:?} differ from the dataset's {:?}",
            manifest.class_names, data.test.class_names
        )));
    }
    let mut nodes = BTreeMap::new();
    for meta in manifest.nodes {
        let id = meta.node_id;
        if meta.checkpoint != checkpoint_name(id) {
            return Err(Error::Manifest(format!(
                "node {id} names checkpoint {:?}",
                meta.checkpoint
            )));
        }
        if id != 0 && meta.parent_id.map_or(true, |p| !nodes.contains_key(&p)) {
            return Err(Error::Manifest(format!("node {id} has no earlier parent")));
        }
        if id >= manifest.next_id {
            return Err(Error::Manifest(format!("node id {id} beyond next_id")));
        }
        let path = dir.join(&meta.checkpoint);
        if !path.is_file() {
            return Err(Error::MissingCheckpoint { node: id, path });
        }
        let node = Node::new(meta, None);
        let ppath = dir.join(profile_name(id));
        if ppath.is_file() {
            let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
            match serde_json::from_slice::<StoredProfile>(&bytes) {
                Ok(s) => {
                    *node.profile.lock().expect("profile lock") =
                        Some((s.config, std::sync::Arc::new(s.profile)));
                }
                Err(e) => log::warn!("ignoring unreadable {}: {e}", ppath.display()),
            }
        }
        if nodes.insert(id, node).is_some() {
            return Err(Error::Manifest(format!("duplicate node id {id}")));
        }
    }
    if !nodes.contains_key(&0) {
        return Err(Error::Manifest("manifest has no root node".into()));
    }
    Ok(PruneTree {
        nodes,
        next_id: manifest.next_id,
        root_params: manifest.root_params,
        config: manifest.config,
        data,
        dir: Some(dir.to_path_buf()),
    })
}
