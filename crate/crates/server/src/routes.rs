use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use cnnprune::criteria::{
    plan_from_threshold, plan_impact, refine_plan, FilterRecord, InstabilityKind, PlanImpact, PlanOrigin,
    PruningPlan, Selection,
};
use cnnprune::finetune::{trace_statistics, FineTuneConfig, FineTuneTrace, TraceStatistics};
use cnnprune::instances::{
    confusion_cell_history, diff_instances, embed_instances, CellValue, Embedding2D, InstanceRecord, TsneConfig,
};
use cnnprune::pruner::{plan_layer_fractions, validate_plan, LayerFraction, Violation};
use cnnprune::tree::{continues_auto_prune, Estimate, EstimateQuery, LayerWidth, PruneTree};
use cnnprune::vis::{guided_backprop, SaliencyMap, HISTOGRAM_BINS};
use cnnprune::{FilterRef, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};
use crate::jobs::{Job, JobKind};
use crate::AppState;

type AppRef = State<Arc<AppState>>;

pub(crate) fn api() -> Router<Arc<AppState>> {
    Router::new()
        .route("/api/tree", get(tree))
        .route("/api/node/:id/stats", get(stats))
        .route("/api/node/:id/confusion", get(confusion))
        .route("/api/node/:id/confusion/:i/:j/history", get(cell_history))
        .route("/api/node/:id/profile", get(profile).post(profile_job))
        .route("/api/node/:id/plan/preview", post(preview))
        .route("/api/node/:id/prune", post(prune))
        .route("/api/node/:id/autoprune", post(autoprune))
        .route("/api/estimate", get(estimate))
        .route("/api/diff/:parent/:child", get(diff))
        .route("/api/vis/:node/:layer/:filter", get(vis_png))
        .route("/api/vis/:node/:layer/:filter/histogram", get(vis_histogram))
        .route("/api/job/:id", get(job))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
}

fn num<T: std::str::FromStr>(s: &str, what: &str) -> ApiResult<T> {
    s.parse()
        .map_err(|_| ApiError::bad_request(format!("{what} must be a non-negative integer, got {s:?}")))
}

fn body<T: DeserializeOwned>(bytes: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", format!("worker panicked: {e}"))
    })?
}

#[derive(Serialize)]
struct NodeView {
    node_id: u64,
    parent_id: Option<u64>,
    children: Vec<u64>,
    filter_count: usize,
    layer_widths: Vec<LayerWidth>,
    accuracy: f64,
    compression_ratio: f64,
    params: u64,
    flops: u64,
    storage_bytes: u64,
    converged: bool,
    epochs_used: Option<usize>,
    removed_filters: Option<Vec<FilterRef>>,
}

#[derive(Serialize)]
struct TreeView {
    root: u64,
    busy: bool,
    class_names: Vec<String>,
    nodes: Vec<NodeView>,
}

async fn tree(State(s): AppRef) -> ApiResult<Json<TreeView>> {
    let t = s.read();
    let nodes = t
        .nodes()
        .map(|m| NodeView {
            node_id: m.node_id,
            parent_id: m.parent_id,
            children: t.children(m.node_id),
            filter_count: m.filter_count,
            layer_widths: m.layer_widths.clone(),
            accuracy: m.accuracy,
            compression_ratio: m.compression_ratio,
            params: m.params,
            flops: m.flops,
            storage_bytes: m.storage_bytes,
            converged: m.converged,
            epochs_used: m.trace.as_ref().map(|t| t.epochs_used),
            removed_filters: m.plan.as_ref().map(|p| p.filters.clone()),
        })
        .collect();
    Ok(Json(TreeView {
        root: t.root_id(),
        busy: s.jobs().is_busy(),
        class_names: t.datasets().test.class_names.clone(),
        nodes,
    }))
}

#[derive(Serialize)]
struct StatsView {
    node_id: u64,
    parent_id: Option<u64>,
    accuracy: f64,
    correct: usize,
    filter_count: usize,
    layer_widths: Vec<LayerWidth>,
    params: u64,
    flops: u64,
    storage_bytes: u64,
    compression_ratio: f64,
    converged: bool,
    trace: Option<FineTuneTrace>,
    trace_statistics: Option<TraceStatistics>,
}

async fn stats(State(s): AppRef, Path(id): Path<String>) -> ApiResult<Json<StatsView>> {
    let id = num(&id, "node id")?;
    let t = s.read();
    let m = t.node(id)?;
    Ok(Json(StatsView {
        node_id: m.node_id,
        parent_id: m.parent_id,
        accuracy: m.accuracy,
        correct: m.correct,
        filter_count: m.filter_count,
        layer_widths: m.layer_widths.clone(),
        params: m.params,
        flops: m.flops,
        storage_bytes: m.storage_bytes,
        compression_ratio: m.compression_ratio,
        converged: m.converged,
        trace_statistics: m.trace.as_ref().and_then(trace_statistics),
        trace: m.trace.clone(),
    }))
}

#[derive(Serialize)]
struct ConfusionView {
    node_id: u64,
    class_names: Vec<String>,
    counts: Vec<Vec<u64>>,
    percentages: Vec<Vec<f64>>,
}

async fn confusion(State(s): AppRef, Path(id): Path<String>) -> ApiResult<Json<ConfusionView>> {
    let id = num(&id, "node id")?;
    let t = s.read();
    let cm = t.confusion(id)?;
    Ok(Json(ConfusionView {
        node_id: id,
        class_names: t.datasets().test.class_names.clone(),
        counts: cm.counts,
        percentages: cm.percentages,
    }))
}

#[derive(Serialize)]
struct HistoryView {
    node_id: u64,
    cell: [usize; 2],
    values: Vec<CellValue>,
}

async fn cell_history(
    State(s): AppRef,
    Path((id, i, j)): Path<(String, String, String)>,
) -> ApiResult<Json<HistoryView>> {
    let (id, i, j) = (num(&id, "node id")?, num(&i, "row")?, num(&j, "column")?);
    let values = confusion_cell_history(&s.read(), id, (i, j))?;
    Ok(Json(HistoryView {
        node_id: id,
        cell: [i, j],
        values,
    }))
}

#[derive(Serialize)]
struct ProfileView {
    node_id: u64,
    runs: usize,
    instability_kind: InstabilityKind,
    filters: Vec<FilterRecord>,
}

async fn profile(State(s): AppRef, Path(id): Path<String>) -> ApiResult<Json<ProfileView>> {
    let id: u64 = num(&id, "node id")?;
    blocking(move || {
        let p = s.read().profile(id)?;
        Ok(Json(ProfileView {
            node_id: id,
            runs: p.n,
            instability_kind: p.instability_kind,
            filters: p.records(),
        }))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PreviewRequest {
    /// Explicit filter list; otherwise `count` or `fraction` selects the
    /// least sensitive filters.
    #[serde(default)]
    filters: Option<Vec<FilterRef>>,
    #[serde(default)]
    count: Option<usize>,
    #[serde(default)]
    fraction: Option<f64>,
    #[serde(default)]
    add: Vec<FilterRef>,
    #[serde(default)]
    remove: Vec<FilterRef>,
}

#[derive(Serialize)]
struct PreviewView {
    plan: PruningPlan,
    requested: usize,
    spared: Vec<FilterRef>,
    impact: PlanImpact,
    layer_fractions: Vec<LayerFraction>,
    violations: Vec<Violation>,
}

async fn preview(State(s): AppRef, Path(id): Path<String>, raw: Bytes) -> ApiResult<Json<PreviewView>> {
    let id: u64 = num(&id, "node id")?;
    let req: PreviewRequest = body(&raw)?;
    blocking(move || {
        let t = s.read();
        let model = t.model(id)?;
        let profile = t.profile(id)?;
        let (mut plan, requested, spared) = match (req.filters, req.count, req.fraction) {
            (Some(f), None, None) => {
                let n = f.len();
                (PruningPlan::new(id, f, PlanOrigin::ManualRefined), n, Vec::new())
            }
            (None, Some(k), None) => {
                let tp = plan_from_threshold(&profile, Selection::Count(k))?;
                (tp.plan, tp.requested, tp.spared)
            }
            (None, None, Some(f)) => {
                let tp = plan_from_threshold(&profile, Selection::Fraction(f))?;
                (tp.plan, tp.requested, tp.spared)
            }
            _ => {
                return Err(ApiError::bad_request(
                    "give exactly one of filters, count or fraction",
                ))
            }
        };
        plan.target = id;
        if !req.add.is_empty() || !req.remove.is_empty() {
            plan = refine_plan(model.architecture(), &plan, &req.add, &req.remove)?;
        }
        let violations = validate_plan(model.architecture(), &plan);
        let known = PruningPlan {
            filters: plan.filters.iter().copied().filter(|&f| model.architecture().contains(f)).collect(),
            ..plan.clone()
        };
        Ok(Json(PreviewView {
            impact: plan_impact(&profile, &known)?,
            layer_fractions: plan_layer_fractions(model.architecture(), &known),
            requested,
            spared,
            violations,
            plan,
        }))
    })
    .await
}

#[derive(Serialize)]
struct Accepted {
    job_id: u64,
}

fn accepted(job_id: u64) -> (StatusCode, Json<Accepted>) {
    (StatusCode::ACCEPTED, Json(Accepted { job_id }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanBody {
    filters: Vec<FilterRef>,
    #[serde(default)]
    origin: Option<PlanOrigin>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PruneRequest {
    plan: PlanBody,
    #[serde(default)]
    finetune_config: Option<FineTuneConfig>,
}

/// Starts `work` as a background job once the writer slot is free.
fn launch(
    s: Arc<AppState>,
    kind: JobKind,
    target: u64,
    work: impl FnOnce(&AppState, u64) -> cnnprune::Result<()> + Send + 'static,
) -> ApiResult<(StatusCode, Json<Accepted>)> {
    let job = s.jobs().try_start(kind, target).ok_or_else(ApiError::busy)?;
    tokio::task::spawn_blocking(move || {
        s.jobs().running(job);
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| work(&s, job)));
        let error = match outcome {
            Ok(Ok(())) => None,
            Ok(Err(e)) => Some(e.to_string()),
            Err(_) => Some("job panicked".to_string()),
        };
        if let Some(e) = &error {
            log::warn!("job {job} failed: {e}");
        }
        s.jobs().finish(job, error);
    });
    Ok(accepted(job))
}

fn commit(s: &AppState, job: u64, draft: cnnprune::tree::ChildDraft) -> cnnprune::Result<u64> {
    let mut t = s.write();
    let id = t.commit(draft)?;
    s.jobs().push_result(job, id);
    s.persist(&mut t)?;
    Ok(id)
}

async fn prune(State(s): AppRef, Path(id): Path<String>, raw: Bytes) -> ApiResult<impl IntoResponse> {
    let parent: u64 = num(&id, "node id")?;
    let req: PruneRequest = body(&raw)?;
    let plan = PruningPlan::new(
        parent,
        req.plan.filters,
        req.plan.origin.unwrap_or(PlanOrigin::ManualRefined),
    );
    let ft = {
        let t = s.read();
        let ft = req.finetune_config.unwrap_or(t.config().finetune);
        ft.validate()?;
        if plan.is_empty() {
            return Err(ApiError::from(cnnprune::Error::InvalidArgument(
                "a pruning plan must remove at least one filter".into(),
            )));
        }
        let violations = validate_plan(t.model(parent)?.architecture(), &plan);
        if !violations.is_empty() {
            return Err(cnnprune::Error::InvalidPlan(violations).into());
        }
        ft
    };
    launch(s, JobKind::Prune, parent, move |s, job| {
        let draft = s
            .read()
            .prepare_child(parent, &plan, &ft, &mut |p| s.jobs().snapshot(job, 1, p), None)?;
        commit(s, job, draft).map(|_| ())
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AutoPruneRequest {
    ratio: f64,
    stop_accuracy: f64,
    #[serde(default)]
    finetune_config: Option<FineTuneConfig>,
}

async fn autoprune(State(s): AppRef, Path(id): Path<String>, raw: Bytes) -> ApiResult<impl IntoResponse> {
    let start: u64 = num(&id, "node id")?;
    let req: AutoPruneRequest = body(&raw)?;
    if !(req.ratio > 0.0 && req.ratio < 1.0) {
        return Err(ApiError::from(cnnprune::Error::InvalidArgument(format!(
            "ratio {} must lie in (0, 1)",
            req.ratio
        ))));
    }
    let ft = {
        let t = s.read();
        t.node(start)?;
        req.finetune_config.unwrap_or(t.config().finetune)
    };
    ft.validate()?;
    let (ratio, stop) = (req.ratio, req.stop_accuracy);
    launch(s, JobKind::AutoPrune, start, move |s, job| {
        let mut current = start;
        for iteration in 1.. {
            s.jobs().iteration(job, iteration);
            let draft = {
                let t = s.read();
                match t.next_auto_plan(current, ratio)? {
                    Some(plan) => t.prepare_child(
                        current,
                        &plan,
                        &ft,
                        &mut |p| s.jobs().snapshot(job, iteration, p),
                        None,
                    )?,
                    None => break,
                }
            };
            let id = commit(s, job, draft)?;
            if !continues_auto_prune(s.read().node(id)?, stop) {
                break;
            }
            current = id;
        }
        Ok(())
    })
}

async fn profile_job(State(s): AppRef, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let id: u64 = num(&id, "node id")?;
    s.read().node(id)?;
    launch(s, JobKind::Profile, id, move |s, _| {
        let t = s.read();
        t.profile(id)?;
        drop(t);
        let mut t = s.write();
        s.persist(&mut t)
    })
}

async fn estimate(State(s): AppRef, Query(q): Query<HashMap<String, String>>) -> ApiResult<Json<Estimate>> {
    let field = |k: &str| q.get(k).ok_or_else(|| ApiError::bad_request(format!("missing query parameter {k}")));
    let a: u64 = num(field("a")?, "a")?;
    let b: u64 = num(field("b")?, "b")?;
    let query = match (q.get("target_accuracy"), q.get("target_filters")) {
        (Some(acc), None) => EstimateQuery::TargetAccuracy(
            acc.parse()
                .map_err(|_| ApiError::bad_request(format!("target_accuracy must be a number, got {acc:?}")))?,
        ),
        (None, Some(f)) => EstimateQuery::TargetFilters(num(f, "target_filters")?),
        _ => return Err(ApiError::bad_request("give exactly one of target_accuracy or target_filters")),
    };
    Ok(Json(s.read().estimate(a, b, query)?))
}

#[derive(Deserialize)]
struct DiffParams {
    #[serde(default = "yes")]
    embedding: bool,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    perplexity: Option<f64>,
}

fn yes() -> bool {
    true
}

#[derive(Serialize)]
struct DiffView {
    parent: u64,
    child: u64,
    degenerated: Vec<InstanceRecord>,
    improved: Vec<InstanceRecord>,
    embedding: Option<Embedding2D>,
}

async fn diff(
    State(s): AppRef,
    Path((parent, child)): Path<(String, String)>,
    Query(q): Query<DiffParams>,
) -> ApiResult<Json<DiffView>> {
    let (parent, child): (u64, u64) = (num(&parent, "parent id")?, num(&child, "child id")?);
    blocking(move || {
        let t = s.read();
        let (pm, cm) = (t.model(parent)?, t.model(child)?);
        let test = t.datasets().test.clone();
        drop(t);
        let d = diff_instances(&pm, &cm, &test)?;
        let embedding = if q.embedding {
            let cfg = TsneConfig {
                seed: q.seed,
                perplexity: q.perplexity.unwrap_or(TsneConfig::default().perplexity),
                ..Default::default()
            };
            Some(embed_instances(&d, &test, &cfg)?)
        } else {
            None
        };
        Ok(Json(DiffView {
            parent,
            child,
            degenerated: d.degenerated,
            improved: d.improved,
            embedding,
        }))
    })
    .await
}

#[derive(Deserialize)]
struct VisParams {
    image_id: Option<String>,
    bins: Option<usize>,
}

fn saliency(t: &PruneTree, node: u64, filter: FilterRef, image_id: Option<&str>) -> ApiResult<SaliencyMap> {
    let model = t.model(node)?;
    let data = t.datasets();
    let (ds, pos) = match image_id {
        None => (&data.test, 0),
        Some(id) => [&data.test, &data.train]
            .into_iter()
            .find_map(|ds| ds.position_of(id).map(|p| (ds, p)))
            .ok_or_else(|| ApiError::not_found(format!("no image with id {id:?}")))?,
    };
    if ds.is_empty() {
        return Err(ApiError::not_found("the test set is empty"));
    }
    let image: Tensor = ds.images.index_axis0(pos);
    let image = image.reshape(ds.image_shape().to_vec()).map_err(ApiError::from)?;
    Ok(guided_backprop(&model, &image, filter)?)
}

async fn vis_png(
    State(s): AppRef,
    Path((node, layer, filter)): Path<(String, String, String)>,
    Query(q): Query<VisParams>,
) -> ApiResult<impl IntoResponse> {
    let node: u64 = num(&node, "node id")?;
    let f = FilterRef::new(num(&layer, "layer")?, num(&filter, "filter")?);
    let png = blocking(move || {
        let map = saliency(&s.read(), node, f, q.image_id.as_deref())?;
        Ok(map.to_png()?)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png))
}

#[derive(Serialize)]
struct HistogramView {
    node_id: u64,
    filter: FilterRef,
    height: usize,
    width: usize,
    bins: usize,
    counts: Vec<u64>,
}

async fn vis_histogram(
    State(s): AppRef,
    Path((node, layer, filter)): Path<(String, String, String)>,
    Query(q): Query<VisParams>,
) -> ApiResult<Json<HistogramView>> {
    let node: u64 = num(&node, "node id")?;
    let f = FilterRef::new(num(&layer, "layer")?, num(&filter, "filter")?);
    let bins = q.bins.unwrap_or(HISTOGRAM_BINS);
    if bins == 0 {
        return Err(ApiError::bad_request("bins must be positive"));
    }
    blocking(move || {
        let map = saliency(&s.read(), node, f, q.image_id.as_deref())?;
        Ok(Json(HistogramView {
            node_id: node,
            filter: f,
            height: map.height,
            width: map.width,
            bins,
            counts: map.histogram(bins),
        }))
    })
    .await
}

async fn job(State(s): AppRef, Path(id): Path<String>) -> ApiResult<Json<Job>> {
    let id: u64 = num(&id, "job id")?;
    s.jobs()
        .get(id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("no job {id}")))
}
