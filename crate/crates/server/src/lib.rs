//! HTTP+JSON service over one pruning session. Prune and auto-prune requests
//! run as background jobs that clients poll; at most one job mutates the tree
//! at a time and a second submission gets `409 session busy`.

mod error;
mod jobs;
mod routes;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use axum::response::Html;
use axum::Router;
use cnnprune::tree::{save_session, PruneTree};

pub use error::{ApiError, ApiResult};
pub use jobs::{Job, JobKind, JobProgress, JobStatus, Jobs};

/// Shared state: the tree, the job table and where to persist commits.
#[derive(Debug)]
pub struct AppState {
    tree: RwLock<PruneTree>,
    jobs: Jobs,
    save_dir: Option<PathBuf>,
}

impl AppState {
    /// `save_dir`, when set, receives the session after every commit.
    pub fn new(tree: PruneTree, save_dir: Option<PathBuf>) -> Arc<Self> {
        Arc::new(Self {
            tree: RwLock::new(tree),
            jobs: Jobs::default(),
            save_dir,
        })
    }

    pub fn jobs(&self) -> &Jobs {
        &self.jobs
    }

    pub fn read(&self) -> RwLockReadGuard<'_, PruneTree> {
        self.tree.read().expect("tree lock poisoned")
    }

    fn write(&self) -> RwLockWriteGuard<'_, PruneTree> {
        self.tree.write().expect("tree lock poisoned")
    }

    fn persist(&self, tree: &mut PruneTree) -> cnnprune::Result<()> {
        match &self.save_dir {
            Some(dir) => save_session(tree, dir),
            None => Ok(()),
        }
    }
}

const PLACEHOLDER: &str = "<!doctype html><html><head><title>cnnprune</title></head>\
<body><h1>cnnprune</h1><p>The API is live under <code>/api</code>. \
Start the server with <code>--ui &lt;dir&gt;</code> to serve a built front-end here.</p></body></html>";

/// API routes plus static assets from `ui_dir` (or a placeholder page) at `/`.
pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let api = routes::api().with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api.route("/", axum::routing::get(|| async { Html(PLACEHOLDER) })),
    }
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, ui_dir.as_deref())).await
}
