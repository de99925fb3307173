//! Pluggable client for chat-completion teacher and judge endpoints, plus
//! the prompt builders for every pipeline role.
//!
//! Prompt builders are pure: the same inputs always render identical bytes,
//! so requests can be keyed by digest for caching and fixture replay. The
//! replay transport makes the whole pipeline runnable with zero network
//! access.

mod prompts;

pub use prompts::{JUDGE_QUESTION, RELATION_GENERATION_SYSTEM, SCENE_GRAPH_EDIT_SYSTEM};

use crate::geometry::normalize_box;
use crate::graph::{BBox, Region, SceneGraph};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;
use thiserror::Error;

/// Sampling defaults for scene-graph generation requests.
pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_TOP_P: f64 = 1.0;
/// Judges are decoded greedily.
pub const JUDGE_TEMPERATURE: f64 = 0.0;
/// Subjects requested per image in dense relationship generation.
pub const DEFAULT_SUBJECT_COUNT: u32 = 5;

const GENERATION_MAX_TOKENS: u32 = 4096;
const JUDGE_MAX_TOKENS: u32 = 16;

/// One chat-completion request. Image references are opaque handles
/// resolved by the transport.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub image_refs: Vec<String>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

/// Stable digest of a request, used as cache and fixture key.
pub fn request_digest(request: &ChatRequest) -> String {
    let canonical = serde_json::to_string(request).expect("request serializes");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    hex::encode(hasher.finalize())
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("transport unavailable: {0}")]
    Unavailable(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("authorization rejected: {0}")]
    Unauthorized(String),
    #[error("malformed request: {0}")]
    BadRequest(String),
    #[error("no fixture for request digest {digest}")]
    MissingFixture { digest: String },
    #[error("malformed response: {0}")]
    BadResponse(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            TransportError::Unavailable(_) | TransportError::RateLimited(_)
        )
    }
}

/// Anything that can answer a chat request with raw text.
pub trait Transport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError>;
}

/// Deterministic fixture-backed transport: responses live in a directory as
/// `{digest}.txt` files.
pub struct ReplayTransport {
    dir: PathBuf,
}

impl ReplayTransport {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// Path a response for this request would be read from.
    pub fn fixture_path(&self, request: &ChatRequest) -> PathBuf {
        self.dir.join(format!("{}.txt", request_digest(request)))
    }
}

impl Transport for ReplayTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let path = self.fixture_path(request);
        std::fs::read_to_string(&path).map_err(|_| TransportError::MissingFixture {
            digest: request_digest(request),
        })
    }
}

/// Write a fixture file for a request so a [`ReplayTransport`] can serve it.
pub fn write_fixture(
    dir: &Path,
    request: &ChatRequest,
    response: &str,
) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.txt", request_digest(request)));
    std::fs::write(&path, response)?;
    Ok(path)
}

/// Digest-keyed response cache around another transport; repeated runs are
/// free and deterministic.
pub struct CachingTransport<T: Transport> {
    inner: T,
    dir: PathBuf,
    forwarded: AtomicU64,
}

impl<T: Transport> CachingTransport<T> {
    pub fn new(inner: T, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            dir: dir.into(),
            forwarded: AtomicU64::new(0),
        }
    }

    /// Number of requests that reached the inner transport (cache misses).
    pub fn forwarded_calls(&self) -> u64 {
        self.forwarded.load(Ordering::SeqCst)
    }
}

impl<T: Transport> Transport for CachingTransport<T> {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let path = self.dir.join(format!("{}.txt", request_digest(request)));
        if let Ok(text) = std::fs::read_to_string(&path) {
            return Ok(text);
        }
        self.forwarded.fetch_add(1, Ordering::SeqCst);
        let text = self.inner.send(request)?;
        let _ = std::fs::create_dir_all(&self.dir);
        let _ = std::fs::write(&path, &text);
        Ok(text)
    }
}

/// Scripted transport for tests: pops one queued result per send.
pub struct ScriptedTransport {
    script: Mutex<std::collections::VecDeque<Result<String, TransportError>>>,
}

impl ScriptedTransport {
    pub fn new(script: Vec<Result<String, TransportError>>) -> Self {
        Self {
            script: Mutex::new(script.into()),
        }
    }
}

impl Transport for ScriptedTransport {
    fn send(&self, _request: &ChatRequest) -> Result<String, TransportError> {
        self.script
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err(TransportError::Unavailable("script exhausted".into())))
    }
}

// Tiny counting semaphore to bound in-flight requests per endpoint.
struct Gate {
    state: Mutex<usize>,
    cv: Condvar,
    limit: usize,
}

impl Gate {
    fn new(limit: usize) -> Self {
        Self {
            state: Mutex::new(0),
            cv: Condvar::new(),
            limit,
        }
    }

    fn acquire(&self) {
        let mut in_flight = self.state.lock().unwrap();
        while *in_flight >= self.limit {
            in_flight = self.cv.wait(in_flight).unwrap();
        }
        *in_flight += 1;
    }

    fn release(&self) {
        *self.state.lock().unwrap() -= 1;
        self.cv.notify_one();
    }
}

/// Wire client for a chat-completions-style HTTP endpoint.
pub struct HttpTransport {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    gate: Gate,
}

impl HttpTransport {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        max_in_flight: usize,
    ) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(120))
                .build(),
            gate: Gate::new(max_in_flight.max(1)),
        }
    }

    fn body(&self, request: &ChatRequest) -> serde_json::Value {
        let mut content = vec![serde_json::json!({"type": "text", "text": request.user_prompt})];
        for image in &request.image_refs {
            content.push(serde_json::json!({
                "type": "image_url",
                "image_url": {"url": image}
            }));
        }
        serde_json::json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": content},
            ],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        })
    }
}

fn content_to_text(value: &serde_json::Value) -> Option<String> {
    match value {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(|t| t.as_str()))
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        if request.temperature < 0.0 || request.top_p <= 0.0 || request.top_p > 1.0 {
            return Err(TransportError::BadRequest(format!(
                "temperature {} / top_p {} out of range",
                request.temperature, request.top_p
            )));
        }
        self.gate.acquire();
        let result = (|| {
            let mut req = self
                .agent
                .post(&self.endpoint)
                .set("Content-Type", "application/json");
            if let Some(key) = &self.api_key {
                req = req.set("Authorization", &format!("Bearer {key}"));
            }
            let response = match req.send_json(self.body(request)) {
                Ok(r) => r,
                Err(ureq::Error::Status(code, resp)) => {
                    let text = resp.into_string().unwrap_or_default();
                    return Err(match code {
                        401 | 403 => TransportError::Unauthorized(text),
                        429 => TransportError::RateLimited(text),
                        400..=499 => TransportError::BadRequest(text),
                        _ => TransportError::Unavailable(format!("status {code}: {text}")),
                    });
                }
                Err(ureq::Error::Transport(t)) => {
                    return Err(TransportError::Unavailable(t.to_string()))
                }
            };
            let value: serde_json::Value = response
                .into_json()
                .map_err(|e| TransportError::BadResponse(e.to_string()))?;
            value
                .pointer("/choices/0/message/content")
                .and_then(content_to_text)
                .ok_or_else(|| TransportError::BadResponse("no message content".into()))
        })();
        self.gate.release();
        result
    }
}

/// Transport selection, loadable from a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransportConfig {
    /// Fixture-backed replay; fully offline.
    Replay { fixtures: PathBuf },
    /// Remote chat-completions endpoint; credentials come from the named
    /// environment variable, never from the config file itself.
    Http {
        endpoint: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default)]
        max_in_flight: Option<usize>,
        #[serde(default)]
        cache: Option<PathBuf>,
    },
    /// No transport: commands print prompts instead of sending them.
    DryRun,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read transport config: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid transport config: {0}")]
    Format(#[from] serde_json::Error),
    #[error("environment variable `{0}` is not set")]
    MissingCredential(String),
}

impl TransportConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Instantiate; `None` means dry-run.
    pub fn build(&self) -> Result<Option<Box<dyn Transport>>, ConfigError> {
        match self {
            TransportConfig::Replay { fixtures } => {
                Ok(Some(Box::new(ReplayTransport::new(fixtures))))
            }
            TransportConfig::Http {
                endpoint,
                model,
                api_key_env,
                max_in_flight,
                cache,
            } => {
                let api_key = match api_key_env {
                    Some(var) => Some(
                        std::env::var(var)
                            .map_err(|_| ConfigError::MissingCredential(var.clone()))?,
                    ),
                    None => None,
                };
                let http = HttpTransport::new(endpoint, model, api_key, max_in_flight.unwrap_or(4));
                match cache {
                    Some(dir) => Ok(Some(Box::new(CachingTransport::new(http, dir)))),
                    None => Ok(Some(Box::new(http))),
                }
            }
            TransportConfig::DryRun => Ok(None),
        }
    }
}

/// Exponential backoff with jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    /// Fraction of the delay randomized in `[-jitter, +jitter]`.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
            jitter: 0.2,
        }
    }
}

impl RetryPolicy {
    /// Zero-delay policy for tests.
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
            jitter: 0.0,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let exp = self
            .base_delay_ms
            .saturating_mul(1u64 << (attempt - 1).min(16));
        let capped = exp.min(self.max_delay_ms) as f64;
        let jittered = if self.jitter > 0.0 {
            let spread: f64 = rand::Rng::gen_range(&mut rand::thread_rng(), -1.0..=1.0);
            capped * (1.0 + self.jitter * spread)
        } else {
            capped
        };
        Duration::from_millis(jittered.max(0.0) as u64)
    }
}

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("transport failed after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: TransportError },
    #[error("non-retryable transport failure on attempt {attempts}: {source}")]
    Fatal {
        attempts: u32,
        source: TransportError,
    },
}

/// A successful response plus how many attempts it took.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryOutcome {
    pub text: String,
    pub attempts: u32,
}

/// Send with retries: transient failures back off exponentially with
/// jitter, non-retryable classes fail immediately.
pub fn call_with_retry(
    transport: &dyn Transport,
    request: &ChatRequest,
    policy: &RetryPolicy,
) -> Result<RetryOutcome, TeacherError> {
    assert!(policy.max_attempts >= 1, "retry policy needs >= 1 attempt");
    let mut attempt = 0;
    loop {
        attempt += 1;
        match transport.send(request) {
            Ok(text) => {
                return Ok(RetryOutcome {
                    text,
                    attempts: attempt,
                })
            }
            Err(e) if !e.is_retryable() => {
                return Err(TeacherError::Fatal {
                    attempts: attempt,
                    source: e,
                })
            }
            Err(e) if attempt >= policy.max_attempts => {
                return Err(TeacherError::Exhausted {
                    attempts: attempt,
                    last: e,
                })
            }
            Err(_) => std::thread::sleep(policy.delay(attempt)),
        }
    }
}

fn norm_coords(bbox: &BBox, graph: &SceneGraph) -> (u16, u16, u16, u16) {
    let (n, _) = normalize_box(bbox, graph.image_width, graph.image_height);
    (n.x1, n.y1, n.x2, n.y2)
}

/// Build the dense relationship generation request for one image.
///
/// The user content interleaves the bracketed sections in template order;
/// sections without data stay present but empty-bodied. `subject_count` is
/// the minimum number of subjects the teacher is asked to annotate.
pub fn build_relation_prompt(
    graph: &SceneGraph,
    captions: &[String],
    subject_count: u32,
) -> ChatRequest {
    let mut user = String::from("[Captions]\n");
    for c in captions {
        user.push_str(c);
        user.push('\n');
    }
    user.push_str("\n[Region Captions]\n");
    for r in &graph.regions {
        user.push_str(&format!("{}: {}\n", r.id, r.name));
    }
    user.push_str("\n[Objects]\n");
    for r in &graph.regions {
        let (x1, y1, x2, y2) = norm_coords(&r.bbox, graph);
        user.push_str(&format!("{}: [{x1},{y1},{x2},{y2}] {}\n", r.id, r.name));
    }
    user.push_str("\n[Scene Graph]\n");
    for r in &graph.regions {
        let (x1, y1, x2, y2) = norm_coords(&r.bbox, graph);
        let locator = match r.depth {
            Some(d) => format!("([{x1},{y1},{x2},{y2}], depth {d})"),
            None => format!("([{x1},{y1},{x2},{y2}])"),
        };
        let rels: Vec<String> = graph
            .relations
            .iter()
            .filter(|rel| rel.subject_id == r.id)
            .map(|rel| format!("region{} {}", rel.object_id, rel.predicate))
            .collect();
        user.push_str(&format!("{}: {locator} {}", r.id, r.name));
        if !rels.is_empty() {
            user.push_str(&format!(" | {}", rels.join(", ")));
        }
        user.push('\n');
    }
    user.push_str(&format!(
        "\nIdentify at least {subject_count} subjects in the scene. For each subject, provide its description and a comprehensive, categorized list of its relationships with other objects.\n"
    ));
    ChatRequest {
        system_prompt: RELATION_GENERATION_SYSTEM.to_string(),
        user_prompt: user,
        image_refs: vec![format!("image:{}", graph.image_id)],
        temperature: DEFAULT_TEMPERATURE,
        top_p: DEFAULT_TOP_P,
        max_tokens: GENERATION_MAX_TOKENS,
    }
}

/// Union box of subject and object in pixel coordinates: the crop a judge
/// sees.
pub fn judge_crop(subject: &Region, object: &Region) -> BBox {
    subject.bbox.union_box(&object.bbox)
}

/// Build the yes/no verification request for one relation. The image
/// reference is the crop covering both boxes.
pub fn build_judge_prompt(
    image_id: &str,
    subject: &Region,
    predicate: &str,
    object: &Region,
) -> ChatRequest {
    let crop = judge_crop(subject, object);
    let phrase = format!("{} {} {}", subject.name, predicate, object.name);
    ChatRequest {
        system_prompt: String::new(),
        user_prompt: format!("Relation: {phrase}\n{JUDGE_QUESTION}"),
        image_refs: vec![format!(
            "crop:{image_id}:({},{}),({},{})",
            crop.x1, crop.y1, crop.x2, crop.y2
        )],
        temperature: JUDGE_TEMPERATURE,
        top_p: DEFAULT_TOP_P,
        max_tokens: JUDGE_MAX_TOKENS,
    }
}

/// Render a graph into the edit prompt's object-dictionary shape with
/// normalized bboxes. Keys appear in region order; predicates are sorted.
fn edit_dictionary(graph: &SceneGraph) -> String {
    let mut entries = Vec::new();
    for r in &graph.regions {
        let (x1, y1, x2, y2) = norm_coords(&r.bbox, graph);
        let mut rels: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
        for rel in &graph.relations {
            if rel.subject_id == r.id {
                rels.entry(rel.predicate.as_str())
                    .or_default()
                    .push(rel.object_id);
            }
        }
        let rel_body = rels
            .iter()
            .map(|(pred, ids)| {
                let id_list = ids
                    .iter()
                    .map(|i| i.to_string())
                    .collect::<Vec<_>>()
                    .join(",");
                format!("{}:[{id_list}]", serde_json::to_string(pred).unwrap())
            })
            .collect::<Vec<_>>()
            .join(",");
        entries.push(format!(
            "\"{}\":{{\"name\":{},\"bbox\":[{x1},{y1},{x2},{y2}],\"rel\":{{{rel_body}}}}}",
            r.id,
            serde_json::to_string(&r.name).unwrap(),
        ));
    }
    format!("{{{}}}", entries.join(","))
}

/// Build the scene-graph edit request for one image.
pub fn build_edit_prompt(graph: &SceneGraph, dense_caption: &str) -> ChatRequest {
    let mut image_refs = vec![format!("image:{}", graph.image_id)];
    for r in &graph.regions {
        image_refs.push(format!("highlight:{}:{}", graph.image_id, r.id));
    }
    ChatRequest {
        system_prompt: SCENE_GRAPH_EDIT_SYSTEM.to_string(),
        user_prompt: format!(
            "Dense caption:\n{dense_caption}\n\nScene graph:\n{}\n",
            edit_dictionary(graph)
        ),
        image_refs,
        temperature: DEFAULT_TEMPERATURE,
        top_p: DEFAULT_TOP_P,
        max_tokens: GENERATION_MAX_TOKENS,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Relation;

    fn sample_graph() -> SceneGraph {
        let mut g = SceneGraph::new("fixture-1", 1000, 1000);
        g.regions
            .push(Region::new(0, "man", BBox::new(100.0, 200.0, 400.0, 900.0)).with_depth(210));
        g.regions
            .push(Region::new(1, "paddle", BBox::new(350.0, 400.0, 600.0, 700.0)).with_depth(190));
        g.relations.push(Relation::new(0, "holding", 1));
        g
    }

    #[test]
    fn relation_prompt_contains_depth_legend() {
        let req = build_relation_prompt(&sample_graph(), &[], DEFAULT_SUBJECT_COUNT);
        assert!(req
            .system_prompt
            .contains("from 0 to 255, where low depth means it's farther back"));
        assert!(req.user_prompt.contains("depth 210"));
    }

    #[test]
    fn relation_prompt_sections_present_without_captions() {
        let req = build_relation_prompt(&sample_graph(), &[], 5);
        for section in [
            "[Captions]",
            "[Region Captions]",
            "[Objects]",
            "[Scene Graph]",
        ] {
            assert!(req.user_prompt.contains(section), "missing {section}");
        }
    }

    #[test]
    fn relation_prompt_anchor_and_defaults() {
        let req = build_relation_prompt(&sample_graph(), &["a man".into()], 5);
        assert!(req
            .system_prompt
            .contains("Try to include at least 10 total relationships per object"));
        assert_eq!(req.temperature, DEFAULT_TEMPERATURE);
        assert_eq!(req.top_p, DEFAULT_TOP_P);
    }

    #[test]
    fn judge_prompt_question_and_crop() {
        let s = Region::new(0, "man", BBox::new(0.0, 0.0, 10.0, 10.0));
        let o = Region::new(1, "paddle", BBox::new(20.0, 20.0, 30.0, 30.0));
        let req = build_judge_prompt("img", &s, "holding", &o);
        assert!(req.user_prompt.contains(JUDGE_QUESTION));
        assert!(req.user_prompt.contains("man holding paddle"));
        assert_eq!(req.image_refs, vec!["crop:img:(0,0),(30,30)".to_string()]);
        assert_eq!(req.temperature, JUDGE_TEMPERATURE);
    }

    #[test]
    fn judge_crop_identical_boxes() {
        let s = Region::new(0, "a", BBox::new(5.0, 5.0, 9.0, 9.0));
        let o = Region::new(1, "b", BBox::new(5.0, 5.0, 9.0, 9.0));
        assert_eq!(judge_crop(&s, &o), BBox::new(5.0, 5.0, 9.0, 9.0));
    }

    #[test]
    fn edit_prompt_anchor_and_dictionary() {
        let req = build_edit_prompt(&sample_graph(), "a man paddling");
        assert!(req
            .system_prompt
            .contains("only generate just the NECESSARY edits"));
        assert!(req.user_prompt.contains("\"0\":{\"name\":\"man\""));
        assert!(req.user_prompt.contains("\"rel\":{\"holding\":[1]}"));
    }

    #[test]
    fn edit_prompt_single_region_dictionary() {
        let mut g = SceneGraph::new("x", 100, 100);
        g.regions
            .push(Region::new(3, "cat", BBox::new(0.0, 0.0, 50.0, 50.0)));
        let req = build_edit_prompt(&g, "");
        assert!(req
            .user_prompt
            .contains("{\"3\":{\"name\":\"cat\",\"bbox\":[0,0,500,500],\"rel\":{}}}"));
    }

    #[test]
    fn builders_are_pure() {
        let g = sample_graph();
        let a = build_relation_prompt(&g, &["cap".into()], 5);
        let b = build_relation_prompt(&g, &["cap".into()], 5);
        assert_eq!(a, b);
        assert_eq!(request_digest(&a), request_digest(&b));
    }

    #[test]
    fn retry_succeeds_after_transient_failures() {
        let t = ScriptedTransport::new(vec![
            Err(TransportError::Unavailable("down".into())),
            Err(TransportError::RateLimited("slow".into())),
            Ok("hello".into()),
        ]);
        let req = build_judge_prompt(
            "img",
            &Region::new(0, "a", BBox::new(0.0, 0.0, 1.0, 1.0)),
            "near",
            &Region::new(1, "b", BBox::new(2.0, 2.0, 3.0, 3.0)),
        );
        let out = call_with_retry(&t, &req, &RetryPolicy::immediate(3)).unwrap();
        assert_eq!(out.text, "hello");
        assert_eq!(out.attempts, 3);
    }

    #[test]
    fn retry_first_attempt_success() {
        let t = ScriptedTransport::new(vec![Ok("ok".into())]);
        let req = build_edit_prompt(&sample_graph(), "");
        let out = call_with_retry(&t, &req, &RetryPolicy::immediate(3)).unwrap();
        assert_eq!(out.attempts, 1);
    }

    #[test]
    fn retry_exhaustion_reports_attempts() {
        let t = ScriptedTransport::new(vec![
            Err(TransportError::Unavailable("down".into())),
            Err(TransportError::Unavailable("still down".into())),
        ]);
        let req = build_edit_prompt(&sample_graph(), "");
        match call_with_retry(&t, &req, &RetryPolicy::immediate(2)) {
            Err(TeacherError::Exhausted { attempts, .. }) => assert_eq!(attempts, 2),
            other => panic!("expected exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn retry_fatal_is_immediate() {
        let t = ScriptedTransport::new(vec![
            Err(TransportError::Unauthorized("bad key".into())),
            Ok("never reached".into()),
        ]);
        let req = build_edit_prompt(&sample_graph(), "");
        match call_with_retry(&t, &req, &RetryPolicy::immediate(3)) {
            Err(TeacherError::Fatal { attempts, .. }) => assert_eq!(attempts, 1),
            other => panic!("expected fatal, got {other:?}"),
        }
    }

    #[test]
    fn replay_transport_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let req = build_edit_prompt(&sample_graph(), "cap");
        write_fixture(dir.path(), &req, "{\"0\": {\"name\": \"rower\"}}").unwrap();
        let t = ReplayTransport::new(dir.path());
        let a = t.send(&req).unwrap();
        let b = t.send(&req).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("rower"));
    }

    #[test]
    fn replay_transport_missing_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let t = ReplayTransport::new(dir.path());
        let req = build_edit_prompt(&sample_graph(), "other");
        match t.send(&req) {
            Err(TransportError::MissingFixture { .. }) => {}
            other => panic!("expected missing fixture, got {other:?}"),
        }
    }

    #[test]
    fn caching_transport_hits_skip_inner() {
        let dir = tempfile::tempdir().unwrap();
        let inner = ScriptedTransport::new(vec![Ok("cached".into())]);
        let t = CachingTransport::new(inner, dir.path());
        let req = build_edit_prompt(&sample_graph(), "");
        assert_eq!(t.send(&req).unwrap(), "cached");
        assert_eq!(t.send(&req).unwrap(), "cached");
        assert_eq!(t.forwarded_calls(), 1);
    }

    #[test]
    fn transport_config_round_trip() {
        let cfg = TransportConfig::Replay {
            fixtures: PathBuf::from("/tmp/fixtures"),
        };
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TransportConfig>(&s).unwrap(), cfg);
        let dry: TransportConfig = serde_json::from_str(r#"{"kind": "dry_run"}"#).unwrap();
        assert!(dry.build().unwrap().is_none());
    }
}
