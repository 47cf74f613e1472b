//! HTTP service for the sketch pad.
//!
//! Fine-tune jobs run one at a time on a dedicated worker thread fed by an
//! unbounded queue. Interpolation only reads finished job checkpoints, so it
//! runs on the blocking pool alongside the worker.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{mpsc, Arc};
use std::thread;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use sketchguide::checkpoint::{read_tensor, write_tensor, Checkpoint};
use sketchguide::finetune::{finetune, FineTuneConfig};
use sketchguide::interpolate::slerp;
use sketchguide::model::EpsilonNetwork;
use sketchguide::nn::Network;
use sketchguide::objectives::Objectives;
use sketchguide::sampler::{sample, sample_from, GuidanceClassifier, SamplerConfig};
use sketchguide::sketch::pgm::grid;
use sketchguide::sketch::{NoisyClassifier, Sketch, SketchConverter, SketchFeatureExtractor, CLASS_NAMES, NUM_CLASSES};
use sketchguide::tensor::Tensor;

use crate::commands::{load_classifier, load_epsilon, Run};
use crate::error::CliError;
use crate::jobs::{InterpolateRequest, Job, JobInput, JobKind, JobStatus, JobStore, SketchRequest};

pub const MAX_INTERPOLATION_STEPS: usize = 64;

struct Shared {
    run: Run,
    store: JobStore,
    base: EpsilonNetwork,
    classifier: NoisyClassifier,
    queue: mpsc::Sender<String>,
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    pub fn store(&self) -> &JobStore {
        &self.0.store
    }
}

/// Loads the models, reopens the job journal in the run directory, starts
/// the fine-tune worker and requeues jobs left queued by a previous run.
pub fn start(run: Run) -> Result<(Router, AppState), CliError> {
    let base = load_epsilon(&run.cfg.pretrained_path())?;
    let classifier = load_classifier(&run.cfg.classifier_path())?;
    let (store, pending) = JobStore::open(&run.cfg.run_dir)?;
    let (tx, rx) = mpsc::channel::<String>();
    let state = AppState(Arc::new(Shared {
        run,
        store,
        base,
        classifier,
        queue: tx,
    }));
    let worker = state.clone();
    thread::Builder::new()
        .name("finetune-worker".into())
        .spawn(move || {
            for id in rx {
                worker.0.process(&id);
            }
        })?;
    for id in pending {
        state.0.run.log(&format!("requeued {id}"));
        state.0.queue.send(id).expect("worker alive");
    }
    Ok((router(state.clone()), state))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/classes", get(classes))
        .route("/sketch", post(post_sketch))
        .route("/job/:id", get(get_job))
        .route("/interpolate", post(post_interpolate))
        .with_state(state)
}

/// Blocks serving on `serve.port` until interrupted.
pub fn serve(run: Run) -> Result<(), CliError> {
    let addr = SocketAddr::from(([127, 0, 0, 1], run.cfg.serve_port));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let (app, state) = start(run)?;
        let listener = tokio::net::TcpListener::bind(addr).await?;
        state.0.run.log(&format!("listening on http://{}", listener.local_addr()?));
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn reject(status: StatusCode, reason: impl Into<String>) -> Response {
    (status, Json(json!({ "error": reason.into() }))).into_response()
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| reject(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")))
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

async fn classes() -> Json<Value> {
    let list: Vec<Value> = CLASS_NAMES
        .iter()
        .enumerate()
        .map(|(id, name)| json!({ "id": id, "name": name }))
        .collect();
    Json(json!({ "classes": list }))
}

fn validate_sketch(req: &SketchRequest) -> Result<(), String> {
    Sketch::from_flat(req.raster.clone()).map_err(|e| e.to_string())?;
    if let Some(y) = req.target_class {
        if y >= NUM_CLASSES {
            return Err(format!("target_class {y} out of range 0..{NUM_CLASSES}"));
        }
    }
    if let Some(l) = req.lambda {
        if !(0.0..=1.0).contains(&l) {
            return Err(format!("lambda must lie in [0, 1], got {l}"));
        }
    }
    if let Some(g) = req.guidance_scale {
        if !g.is_finite() || g < 0.0 {
            return Err(format!("guidance_scale must be finite and nonnegative, got {g}"));
        }
    }
    Ok(())
}

async fn post_sketch(State(state): State<AppState>, body: Bytes) -> Response {
    let req: SketchRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    if let Err(reason) = validate_sketch(&req) {
        return reject(StatusCode::BAD_REQUEST, reason);
    }
    let sh = &state.0;
    let job = match sh.store.create(JobKind::Finetune, JobInput::Sketch(req), &sh.run.hash) {
        Ok(j) => j,
        Err(e) => return reject(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    sh.run.log(&format!("queued {}", job.id));
    if sh.queue.send(job.id.clone()).is_err() {
        return reject(StatusCode::SERVICE_UNAVAILABLE, "worker stopped");
    }
    (StatusCode::ACCEPTED, Json(json!({ "id": job.id, "status": job.status }))).into_response()
}

async fn get_job(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    let Some(job) = state.0.store.get(&id) else {
        return reject(StatusCode::NOT_FOUND, format!("no job {id}"));
    };
    let sh = state.0.clone();
    match tokio::task::spawn_blocking(move || sh.view(&job)).await {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => reject(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => reject(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn post_interpolate(State(state): State<AppState>, body: Bytes) -> Response {
    let req: InterpolateRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let sh = state.0.clone();
    let plan = match sh.plan_interpolation(&req) {
        Ok(p) => p,
        Err(reason) => return reject(StatusCode::BAD_REQUEST, reason),
    };
    let job = match sh.store.create(JobKind::Interpolate, JobInput::Interpolate(req), &sh.run.hash) {
        Ok(j) => j,
        Err(e) => return reject(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    let outcome = tokio::task::spawn_blocking(move || {
        let done = sh.execute(&job.id, |s, id| s.interpolate(id, &plan));
        done.and_then(|job| sh.view(&job))
    })
    .await;
    match outcome {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => reject(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => reject(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// One end of an interpolation: a finished job and a latent index in it.
struct LatentRef {
    job: Job,
    index: usize,
}

struct InterpolationPlan {
    a: LatentRef,
    b: LatentRef,
    steps: usize,
}

/// Per-job sampling settings after applying the request overrides.
struct JobSettings {
    lambda: f64,
    guidance_scale: f64,
    target_class: Option<usize>,
}

fn job_seed(base: u64, id: &str) -> u64 {
    let n: u64 = id.trim_start_matches('j').parse().unwrap_or(0);
    base ^ n.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn relative(store: &JobStore, path: PathBuf) -> PathBuf {
    path.strip_prefix(store.dir()).map(PathBuf::from).unwrap_or(path)
}

impl Shared {
    fn settings(&self, req: &SketchRequest) -> JobSettings {
        let c = &self.run.cfg;
        JobSettings {
            lambda: req.lambda.unwrap_or(c.finetune_lambda),
            guidance_scale: req.guidance_scale.unwrap_or(c.finetune_guidance_scale),
            target_class: req.target_class.or(c.finetune_target_class.0),
        }
    }

    /// Deterministic sampler with the job's guidance settings.
    fn sampler(&self, s: &JobSettings, seed: u64) -> Result<SamplerConfig, CliError> {
        Ok(SamplerConfig {
            eta: 0.0,
            guidance_scale: s.guidance_scale,
            target_class: s.target_class,
            seed,
            ..self.run.cfg.sampler()?
        })
    }

    fn guide(&self, s: &JobSettings) -> Option<&dyn GuidanceClassifier<f64>> {
        s.target_class.map(|_| &self.classifier as &dyn GuidanceClassifier<f64>)
    }

    /// Moves a job through running to done or failed around `body`.
    fn execute(
        &self,
        id: &str,
        body: impl FnOnce(&Self, &str) -> Result<BTreeMap<String, PathBuf>, CliError>,
    ) -> Result<Job, CliError> {
        self.store.update(id, |j| j.status = JobStatus::Running)?;
        self.run.log(&format!("running {id}"));
        match body(self, id) {
            Ok(results) => {
                let job = self.store.update(id, |j| {
                    j.status = JobStatus::Done;
                    j.results = results;
                })?;
                self.run.log(&format!("finished {id}"));
                Ok(job)
            }
            Err(e) => {
                self.run.log(&format!("failed {id}: {e}"));
                self.store.update(id, |j| {
                    j.status = JobStatus::Failed;
                    j.error = Some(e.to_string());
                })?;
                Err(e)
            }
        }
    }

    fn process(&self, id: &str) {
        let Some(job) = self.store.get(id) else { return };
        if job.status != JobStatus::Queued {
            return;
        }
        let JobInput::Sketch(req) = job.input.clone() else {
            let _ = self.store.update(id, |j| {
                j.status = JobStatus::Failed;
                j.error = Some("worker only runs sketch jobs".into());
            });
            return;
        };
        let _ = self.execute(id, |sh, id| sh.sketch_job(id, &req));
    }

    /// Base sample as `x0`, fine-tune toward the posted sketch, then sample
    /// the adapted model from fresh latents.
    fn sketch_job(&self, id: &str, req: &SketchRequest) -> Result<BTreeMap<String, PathBuf>, CliError> {
        let s = self.settings(req);
        let seed = job_seed(self.run.cfg.seed, id);
        let sched = &self.run.sched;
        let s0 = Sketch::from_flat(req.raster.clone())?.raster.reshape(vec![1, 1, 32, 32])?;
        let sc = self.sampler(&s, seed)?;
        let x0 = sample(&self.base, self.guide(&s), sched, &sc, 1, false)?.samples;
        let (conv, feats) = (SketchConverter::default(), SketchFeatureExtractor::default());
        let obj = Objectives {
            converter: &conv,
            sketch_features: &feats,
            classifier: &self.classifier,
        };
        let cfg = FineTuneConfig {
            lambda: s.lambda,
            guidance_scale: s.guidance_scale,
            target_class: s.target_class,
            seed,
            ..self.run.cfg.finetune()
        };
        let model = finetune(&self.base, &x0, &s0, &obj, sched, &cfg, |_| {})?.model;

        let mut rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(17));
        let latents = Tensor::randn(vec![self.run.cfg.serve_samples.max(1), 1, 32, 32], &mut rng);
        let samples = self.render(&model, &s, &latents)?;

        let dir = self.store.job_dir(id);
        std::fs::create_dir_all(&dir)?;
        let note = self.run.note();
        let mut out = BTreeMap::new();
        let ck = Checkpoint::epsilon(&model, sched)
            .with_meta("config_hash", &self.run.hash)
            .with_meta("job", id);
        ck.save(&dir.join("model.ckpt"))?;
        out.insert("model".into(), relative(&self.store, dir.join("model.ckpt")));
        for (name, t) in [("x0", &x0), ("sketch", &s0), ("latents", &latents), ("samples", &samples)] {
            let p = dir.join(format!("{name}.tensor"));
            write_tensor(&p, t, &note)?;
            out.insert(name.into(), relative(&self.store, p));
        }
        grid(&samples, samples.batch(), -1.0, 1.0).write(&dir.join("samples.pgm"), Some(&note))?;
        out.insert("grid".into(), relative(&self.store, dir.join("samples.pgm")));
        Ok(out)
    }

    /// Samples each latent on its own so a latent always maps to the same
    /// image whatever it is batched with.
    fn render(&self, model: &EpsilonNetwork, s: &JobSettings, latents: &Tensor) -> Result<Tensor, CliError> {
        let sc = self.sampler(s, 0)?;
        let imgs = (0..latents.batch())
            .map(|i| Ok(sample_from(model, self.guide(s), &self.run.sched, &sc, latents.item_at(i), false)?.samples))
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok(Tensor::stack(&imgs)?)
    }

    fn latent_ref(&self, spec: &str) -> Result<LatentRef, String> {
        let (id, idx) = spec
            .split_once('/')
            .ok_or_else(|| format!("latent id `{spec}` is not `<job>/<index>`"))?;
        let index: usize = idx.parse().map_err(|_| format!("latent id `{spec}` has a bad index"))?;
        let job = self.store.get(id).ok_or_else(|| format!("no job {id}"))?;
        if job.kind != JobKind::Finetune || job.status != JobStatus::Done {
            return Err(format!("job {id} has no latents (kind {:?}, status {:?})", job.kind, job.status));
        }
        let JobInput::Sketch(_) = &job.input else {
            return Err(format!("job {id} has no latents"));
        };
        if index >= self.run.cfg.serve_samples.max(1) {
            return Err(format!("latent index {index} out of range for job {id}"));
        }
        Ok(LatentRef { job, index })
    }

    fn plan_interpolation(&self, req: &InterpolateRequest) -> Result<InterpolationPlan, String> {
        if !(2..=MAX_INTERPOLATION_STEPS).contains(&req.steps) {
            return Err(format!("steps must lie in 2..={MAX_INTERPOLATION_STEPS}, got {}", req.steps));
        }
        Ok(InterpolationPlan {
            a: self.latent_ref(&req.a)?,
            b: self.latent_ref(&req.b)?,
            steps: req.steps,
        })
    }

    fn load_job_model(&self, job: &Job) -> Result<EpsilonNetwork, CliError> {
        let rel = job
            .results
            .get("model")
            .ok_or_else(|| CliError::Usage(format!("job {} has no model", job.id)))?;
        load_epsilon(&self.store.dir().join(rel))
    }

    fn load_latent(&self, r: &LatentRef) -> Result<Tensor, CliError> {
        let rel = r
            .job
            .results
            .get("latents")
            .ok_or_else(|| CliError::Usage(format!("job {} has no latents", r.job.id)))?;
        let (t, _) = read_tensor(&self.store.dir().join(rel))?;
        if r.index >= t.batch() {
            return Err(CliError::Usage(format!("latent index {} out of range", r.index)));
        }
        Ok(t.item_at(r.index))
    }

    /// Slerps the latents and, across jobs, blends the two adapted models
    /// linearly with the same weight. Each frame uses the guidance settings
    /// of the nearer endpoint.
    fn interpolate(&self, id: &str, plan: &InterpolationPlan) -> Result<BTreeMap<String, PathBuf>, CliError> {
        let (za, zb) = (self.load_latent(&plan.a)?, self.load_latent(&plan.b)?);
        let ma = self.load_job_model(&plan.a.job)?;
        let mb = if plan.a.job.id == plan.b.job.id {
            None
        } else {
            Some(self.load_job_model(&plan.b.job)?)
        };
        let settings = |job: &Job| match &job.input {
            JobInput::Sketch(r) => self.settings(r),
            JobInput::Interpolate(_) => unreachable!("checked when planning"),
        };
        let (sa, sb) = (settings(&plan.a.job), settings(&plan.b.job));
        let mut frames = Vec::with_capacity(plan.steps);
        for i in 0..plan.steps {
            let alpha = i as f64 / (plan.steps - 1) as f64;
            let z = slerp(&za, &zb, alpha)?;
            let model = match &mb {
                Some(mb) => blend(&ma, mb, alpha)?,
                None => ma.clone(),
            };
            let s = if alpha <= 0.5 { &sa } else { &sb };
            frames.push(self.render(&model, s, &z)?);
        }
        let frames = Tensor::stack(&frames)?;
        let dir = self.store.job_dir(id);
        std::fs::create_dir_all(&dir)?;
        let note = self.run.note();
        let mut out = BTreeMap::new();
        write_tensor(&dir.join("samples.tensor"), &frames, &note)?;
        out.insert("samples".into(), relative(&self.store, dir.join("samples.tensor")));
        grid(&frames, frames.batch(), -1.0, 1.0).write(&dir.join("strip.pgm"), Some(&note))?;
        out.insert("grid".into(), relative(&self.store, dir.join("strip.pgm")));
        Ok(out)
    }

    /// JSON form of a job; finished jobs carry their images as flat arrays
    /// of 1024 values in `[-1, 1]`.
    fn view(&self, job: &Job) -> Result<Value, CliError> {
        let mut v = json!({
            "id": job.id,
            "kind": job.kind,
            "status": job.status,
            "config_hash": job.config_hash,
        });
        if let Some(e) = &job.error {
            v["error"] = json!(e);
        }
        match &job.input {
            JobInput::Sketch(r) => {
                let s = self.settings(r);
                v["target_class"] = json!(s.target_class);
                v["lambda"] = json!(s.lambda);
                v["guidance_scale"] = json!(s.guidance_scale);
            }
            JobInput::Interpolate(r) => {
                v["a"] = json!(r.a);
                v["b"] = json!(r.b);
                v["steps"] = json!(r.steps);
            }
        }
        if job.status == JobStatus::Done {
            if let Some(rel) = job.results.get("samples") {
                let (t, _) = read_tensor(&self.store.dir().join(rel))?;
                let images: Vec<&[f64]> = t.data().chunks(t.len() / t.batch().max(1)).collect();
                if job.kind == JobKind::Finetune {
                    let ids: Vec<String> = (0..images.len()).map(|i| format!("{}/{i}", job.id)).collect();
                    v["latents"] = json!(ids);
                }
                v["images"] = json!(images);
            }
            v["results"] = json!(job.results);
        }
        Ok(v)
    }
}

/// Parameterwise `(1 - alpha) * a + alpha * b`.
pub fn blend(a: &EpsilonNetwork, b: &EpsilonNetwork, alpha: f64) -> Result<EpsilonNetwork, CliError> {
    let (na, nb) = (a.network(), b.network());
    if na.architecture() != nb.architecture() {
        return Err(CliError::Usage("cannot blend models with different architectures".into()));
    }
    let params = na
        .params()
        .iter()
        .map(|(k, pa)| Ok((k.clone(), pa.axpby(1.0 - alpha, &nb.params()[k], alpha)?)))
        .collect::<Result<BTreeMap<_, _>, sketchguide::Error>>()?;
    Ok(EpsilonNetwork::from_network(Network::from_parts(na.architecture().clone(), params)?)?)
}
