//! HTTP front end for datapath extraction and comparison.
//!
//! All bodies are JSON except the two uploads, which take the binary model
//! bundle and example file formats. Extraction and discrepancy maps run as
//! polled jobs on a bounded worker pool.

mod error;
mod session;

pub use error::{ApiError, ApiResult};
pub use session::{cache_key, rank_images, Group, RankedImage, Session};

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post, put};
use axum::{Json, Router};
use datapath_core::extraction::{extract_datapath, Datapath, ExtractionConfig};
use datapath_core::layout::{LayerViewOptions, DEFAULT_SEGMENT_LAMBDA};
use datapath_core::neuronview::{dataset_mean, default_patch_size, discrepancy_map, DiscrepancyTarget, DEFAULT_THRESHOLD};
use datapath_core::nnet::io::{decode_examples, model_from_bundle};
use datapath_core::nnet::ExampleSet;
use datapath_core::stats::StatisticKind;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

#[derive(Debug, Clone)]
pub struct Config {
    pub listen: SocketAddr,
    pub cache_dir: PathBuf,
    pub workers: usize,
    /// Default critical-set threshold for extraction requests that omit it.
    pub threshold: f64,
    pub segment_lambda: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            cache_dir: PathBuf::from("datapath-cache"),
            workers: 2,
            threshold: 0.5,
            segment_lambda: DEFAULT_SEGMENT_LAMBDA,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done { result: Value },
    Failed { error: Value },
}

#[derive(Debug, Clone, Serialize)]
pub struct Job {
    pub id: u64,
    pub kind: &'static str,
    #[serde(flatten)]
    pub state: JobState,
}

pub struct AppState {
    pub config: Config,
    pub session: RwLock<Session>,
    jobs: RwLock<BTreeMap<u64, Job>>,
    next_job: AtomicU64,
    workers: Arc<Semaphore>,
}

impl AppState {
    pub fn new(config: Config) -> Arc<Self> {
        let workers = Arc::new(Semaphore::new(config.workers.max(1)));
        Arc::new(AppState {
            config,
            session: RwLock::new(Session::default()),
            jobs: RwLock::new(BTreeMap::new()),
            next_job: AtomicU64::new(1),
            workers,
        })
    }

    fn layer_options(&self) -> LayerViewOptions {
        LayerViewOptions {
            lambda: self.config.segment_lambda,
            ..LayerViewOptions::default()
        }
    }

    fn set_job(&self, id: u64, state: JobState) {
        if let Some(job) = self.jobs.write().expect("jobs lock").get_mut(&id) {
            job.state = state;
        }
    }

    /// Queues blocking work on the worker pool and returns the job id.
    fn spawn_job<F>(self: &Arc<Self>, kind: &'static str, work: F) -> u64
    where
        F: FnOnce(&AppState) -> ApiResult<Value> + Send + 'static,
    {
        let id = self.next_job.fetch_add(1, Ordering::SeqCst);
        self.jobs.write().expect("jobs lock").insert(
            id,
            Job {
                id,
                kind,
                state: JobState::Queued,
            },
        );
        let state = Arc::clone(self);
        tokio::spawn(async move {
            let _permit = state.workers.clone().acquire_owned().await.expect("pool open");
            state.set_job(id, JobState::Running);
            let inner = Arc::clone(&state);
            let outcome = tokio::task::spawn_blocking(move || work(&inner))
                .await
                .unwrap_or_else(|e| Err(ApiError::internal(format!("job panicked: {e}"))));
            let next = match outcome {
                Ok(result) => JobState::Done { result },
                Err(e) => {
                    tracing::warn!(job = id, kind, error = %e.message, "job failed");
                    JobState::Failed { error: e.body() }
                }
            };
            state.set_job(id, next);
        });
        id
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Session> {
        self.session.read().expect("session lock")
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Session> {
        self.session.write().expect("session lock")
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/model", put(put_model))
        .route("/groups/{name}", put(put_group))
        .route("/groups", get(list_groups))
        .route("/comparison", put(put_comparison))
        .route("/extract", post(post_extract))
        .route("/jobs/{id}", get(get_job))
        .route("/datapaths/{id}", get(get_datapath))
        .route("/stats", get(get_stats))
        .route("/layout/layers", get(get_layer_layout))
        .route("/layout/layers/expand", post(post_expand))
        .route("/layout/featuremaps/{layer}", get(get_featuremap_layout))
        .route("/neurons/{layer}/{fm}", get(get_neuron))
        .route("/discrepancy", post(post_discrepancy))
        .layer(DefaultBodyLimit::max(256 << 20))
        .with_state(state)
}

pub async fn serve(config: Config) -> std::io::Result<()> {
    std::fs::create_dir_all(&config.cache_dir)?;
    let listener = tokio::net::TcpListener::bind(config.listen).await?;
    tracing::info!(addr = %listener.local_addr()?, cache = %config.cache_dir.display(), "listening");
    axum::serve(listener, router(AppState::new(config))).await
}

type AppRef = State<Arc<AppState>>;

async fn put_model(State(state): AppRef, body: Bytes) -> ApiResult<Json<Value>> {
    let model = model_from_bundle(&body)?;
    let hash = model.hash().to_string();
    let mut s = state.write();
    if s.model.as_ref().map(|m| m.hash()) != Some(hash.as_str()) {
        // groups hold traces of the previous model
        *s = Session {
            datapaths: std::mem::take(&mut s.datapaths),
            ..Session::default()
        };
        s.model = Some(Arc::new(model));
    }
    tracing::info!(model = %hash, "model loaded");
    Ok(Json(json!({ "model_hash": hash })))
}

async fn put_group(State(state): AppRef, UrlPath(name): UrlPath<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let examples = decode_examples(&body)?;
    let model = Arc::clone(state.read().model()?);
    let set = ExampleSet::new(name.clone(), examples);
    let (set, traces) = tokio::task::spawn_blocking(move || {
        let traces = set
            .examples
            .iter()
            .map(|e| model.forward(e, None))
            .collect::<datapath_core::Result<Vec<_>>>();
        (set, traces)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?;
    let traces = traces?;
    if set.is_empty() {
        return Err(ApiError::unprocessable("empty_group", "a group needs at least one image"));
    }
    let hash = set.hash()?;
    let ranking = rank_images(&set, &traces);
    let body = json!({ "name": name, "hash": hash, "count": set.len(), "ranking": ranking });
    let mut s = state.write();
    s.latest.remove(&name);
    if s.comparison.contains(&name) {
        s.visible = None;
    }
    s.groups.insert(
        name,
        Group {
            set: Arc::new(set),
            hash,
            traces: Arc::new(traces),
            ranking,
        },
    );
    Ok(Json(body))
}

async fn list_groups(State(state): AppRef) -> ApiResult<Json<Value>> {
    let s = state.read();
    let groups: Vec<Value> = s
        .groups
        .iter()
        .map(|(name, g)| {
            json!({
                "name": name,
                "hash": g.hash,
                "count": g.set.len(),
                "datapath": s.latest.get(name),
                "ranking": g.ranking,
            })
        })
        .collect();
    Ok(Json(json!({ "groups": groups, "comparison": s.comparison })))
}

#[derive(Debug, Deserialize)]
struct ComparisonRequest {
    groups: Vec<String>,
}

async fn put_comparison(State(state): AppRef, Json(req): Json<ComparisonRequest>) -> ApiResult<Json<Value>> {
    let mut s = state.write();
    s.set_comparison(req.groups)?;
    Ok(Json(json!({ "comparison": s.comparison })))
}

#[derive(Debug, Deserialize)]
struct ExtractRequest {
    groups: Vec<String>,
    /// Partial config; missing fields take the service defaults.
    #[serde(default)]
    config: Option<Value>,
}

fn merged_config(defaults: &Config, overrides: Option<Value>) -> ApiResult<ExtractionConfig> {
    let mut base = serde_json::to_value(ExtractionConfig {
        threshold: defaults.threshold,
        ..ExtractionConfig::default()
    })
    .expect("config serializes");
    match overrides {
        None | Some(Value::Null) => {}
        Some(Value::Object(o)) => {
            let map = base.as_object_mut().expect("object");
            for (k, v) in o {
                map.insert(k, v);
            }
        }
        Some(_) => return Err(ApiError::unprocessable("invalid_config", "config must be an object")),
    }
    let cfg: ExtractionConfig =
        serde_json::from_value(base).map_err(|e| ApiError::unprocessable("invalid_config", e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn cache_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.json"))
}

fn load_cached(dir: &Path, key: &str) -> Option<Datapath> {
    let text = std::fs::read_to_string(cache_path(dir, key)).ok()?;
    match Datapath::from_json(&text) {
        Ok(dp) => Some(dp),
        Err(e) => {
            tracing::warn!(key, error = %e, "ignoring corrupt cache entry");
            None
        }
    }
}

fn store_cached(dir: &Path, key: &str, dp: &Datapath) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(".{key}.tmp"));
    std::fs::write(&tmp, dp.to_json())?;
    std::fs::rename(tmp, cache_path(dir, key))
}

async fn post_extract(State(state): AppRef, Json(req): Json<ExtractRequest>) -> ApiResult<(StatusCode, Json<Value>)> {
    let cfg = merged_config(&state.config, req.config)?;
    let (model, jobs) = {
        let s = state.read();
        let model = Arc::clone(s.model()?);
        if req.groups.is_empty() || req.groups.len() > datapath_core::layout::MAX_COMPARED {
            return Err(ApiError::unprocessable(
                "comparison_size",
                format!("extract 1 to {} groups", datapath_core::layout::MAX_COMPARED),
            ));
        }
        let jobs = req
            .groups
            .iter()
            .map(|n| {
                let g = s.group(n)?;
                Ok((n.clone(), Arc::clone(&g.set), g.hash.clone()))
            })
            .collect::<ApiResult<Vec<_>>>()?;
        (model, jobs)
    };
    let names = req.groups.clone();
    let id = state.spawn_job("extract", move |state| {
        let config_hash = cfg.hash();
        let mut out = Vec::new();
        for (name, set, group_hash) in jobs {
            let key = cache_key(model.hash(), &group_hash, &config_hash);
            let known = state.read().datapaths.contains_key(&key);
            let (dp, cached) = if known {
                (None, true)
            } else if let Some(dp) = load_cached(&state.config.cache_dir, &key) {
                (Some(dp), true)
            } else {
                let dp = extract_datapath(&model, &set, &cfg)?;
                if let Err(e) = store_cached(&state.config.cache_dir, &key, &dp) {
                    tracing::warn!(key, error = %e, "could not write cache entry");
                }
                (Some(dp), false)
            };
            let mut s = state.write();
            if let Some(dp) = dp {
                s.datapaths.entry(key.clone()).or_insert_with(|| Arc::new(dp));
            }
            let current = s.model.as_ref().is_some_and(|m| m.hash() == model.hash())
                && s.groups.get(&name).is_some_and(|g| g.hash == group_hash);
            if current {
                s.latest.insert(name.clone(), key.clone());
            }
            out.push(json!({ "group": name, "datapath": key, "cached": cached }));
        }
        let mut s = state.write();
        if s.set_comparison(names).is_err() {
            tracing::warn!("groups changed during extraction; comparison left as is");
        }
        Ok(json!({ "datapaths": out }))
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job": id, "state": "queued" }))))
}

async fn get_job(State(state): AppRef, UrlPath(id): UrlPath<u64>) -> ApiResult<Json<Job>> {
    state
        .jobs
        .read()
        .expect("jobs lock")
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found("unknown_job", format!("no job {id}")))
}

async fn get_datapath(State(state): AppRef, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Datapath>> {
    let s = state.read();
    s.datapaths
        .get(&id)
        .map(|dp| Json((**dp).clone()))
        .ok_or_else(|| ApiError::not_found("unknown_datapath", format!("no datapath {id}")))
}

async fn get_stats(State(state): AppRef) -> ApiResult<Json<Value>> {
    let s = state.read();
    let stats = s.statistics()?;
    Ok(Json(json!({ "groups": &s.comparison[..2], "statistics": stats })))
}

#[derive(Debug, Deserialize)]
struct LayerQuery {
    stat: Option<String>,
}

fn parse_stat(stat: Option<&str>) -> ApiResult<StatisticKind> {
    match stat {
        None => Ok(StatisticKind::ActivationSimilarity),
        Some(s) => StatisticKind::parse(s).ok_or_else(|| ApiError::unprocessable("unknown_statistic", format!("no statistic `{s}`"))),
    }
}

fn layer_body(state: &AppState, s: &Session, kind: StatisticKind) -> ApiResult<Value> {
    let view = s.layer_layout(kind, &state.layer_options())?;
    Ok(json!({ "groups": &s.comparison[..2], "layout": view }))
}

async fn get_layer_layout(State(state): AppRef, Query(q): Query<LayerQuery>) -> ApiResult<Json<Value>> {
    let kind = parse_stat(q.stat.as_deref())?;
    let s = state.read();
    Ok(Json(layer_body(&state, &s, kind)?))
}

#[derive(Debug, Deserialize)]
struct ExpandRequest {
    node: String,
    #[serde(default)]
    collapse: bool,
    #[serde(default)]
    stat: Option<String>,
}

async fn post_expand(State(state): AppRef, Json(req): Json<ExpandRequest>) -> ApiResult<Json<Value>> {
    let kind = parse_stat(req.stat.as_deref())?;
    let mut s = state.write();
    s.toggle(&req.node, req.collapse, &state.layer_options())?;
    Ok(Json(layer_body(&state, &s, kind)?))
}

#[derive(Debug, Deserialize)]
struct FeatureMapQuery {
    color: Option<String>,
    k: Option<usize>,
}

async fn get_featuremap_layout(
    State(state): AppRef,
    UrlPath(layer): UrlPath<String>,
    Query(q): Query<FeatureMapQuery>,
) -> ApiResult<Json<Value>> {
    let color = q.color.as_deref().unwrap_or("importance");
    let s = state.read();
    let layout = s.feature_map_layout(&layer, q.k)?;
    let colors = layout
        .cells
        .iter()
        .map(|cell| {
            cell.clusters
                .iter()
                .map(|c| match color {
                    "importance" => Ok(c.mean_importance),
                    "activation" => Ok(c.mean_activation),
                    "activation_difference" => c.activation_difference.ok_or_else(|| {
                        ApiError::unprocessable("comparison_size", "activation_difference needs two compared groups")
                    }),
                    other => Err(ApiError::unprocessable(
                        "unknown_color",
                        format!("color must be importance, activation or activation_difference, got `{other}`"),
                    )),
                })
                .collect::<ApiResult<Vec<f64>>>()
        })
        .collect::<ApiResult<Vec<_>>>()?;
    Ok(Json(json!({ "color": color, "colors": colors, "layout": layout })))
}

#[derive(Debug, Deserialize)]
struct NeuronQuery {
    image: usize,
    group: Option<String>,
}

async fn get_neuron(
    State(state): AppRef,
    UrlPath((layer, fm)): UrlPath<(String, usize)>,
    Query(q): Query<NeuronQuery>,
) -> ApiResult<Json<Value>> {
    let s = state.read();
    let group = match q.group.or_else(|| s.comparison.first().cloned()) {
        Some(g) => g,
        None => return Err(ApiError::unprocessable("no_group", "name a group or select a comparison")),
    };
    let map = s.heatmap(&group, q.image, &layer, fm)?;
    Ok(Json(json!({ "group": group, "image": q.image, "heatmap": map })))
}

#[derive(Debug, Deserialize)]
struct DiscrepancyRequest {
    group: String,
    image: usize,
    layer: String,
    feature_map: usize,
    #[serde(default)]
    neuron: Option<(usize, usize)>,
    #[serde(default)]
    patch_size: Option<usize>,
    #[serde(default)]
    threshold: Option<f64>,
}

async fn post_discrepancy(
    State(state): AppRef,
    Json(req): Json<DiscrepancyRequest>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let (model, set) = {
        let s = state.read();
        let g = s.group(&req.group)?;
        if req.image >= g.set.len() {
            return Err(ApiError::not_found(
                "unknown_image",
                format!("group `{}` has {} images", req.group, g.set.len()),
            ));
        }
        let model = Arc::clone(s.model()?);
        model.layer_index(&req.layer)?;
        (model, Arc::clone(&g.set))
    };
    let id = state.spawn_job("discrepancy", move |_| {
        let fill = dataset_mean(&set.examples)?;
        let side = model.input_shape().height.max(model.input_shape().width);
        let target = DiscrepancyTarget {
            layer: req.layer,
            feature_map: req.feature_map,
            neuron: req.neuron,
        };
        let map = discrepancy_map(
            &model,
            &set.examples[req.image],
            req.image,
            &target,
            req.patch_size.unwrap_or(default_patch_size(side)),
            req.threshold.unwrap_or(DEFAULT_THRESHOLD),
            &fill,
        )?;
        Ok(json!({ "group": req.group, "map": map }))
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job": id, "state": "queued" }))))
}
