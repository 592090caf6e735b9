use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tower::ServiceExt;

use uinav_core::action::MacroAction;
use uinav_core::agent::{AgentNet, ArgumentVocab};
use uinav_core::demo::{record, replay, Demonstration, Oracle, Provenance};
use uinav_core::sim::{EpisodeConfig, SimEnv, SlotSplit, Suite};
use uinav_core::train::{oracle_pool, train_agent, TrainConfig};
use uinav_gateway::wire::{ErrorBody, FailuresView, FinishResponse, SessionView, SubmitResponse, SuggestionView};
use uinav_gateway::{router, write_failures, DataDir, Models, SessionStore};

struct Api {
    store: Arc<SessionStore>,
    _dir: tempfile::TempDir,
}

impl Api {
    fn new(models: Models, idle: Duration) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(SessionStore::new(Suite::builtin(), models, DataDir::new(dir.path()), idle));
        Self { store, _dir: dir }
    }

    async fn call(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
        let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
        let req = match body {
            Some(b) => req.body(Body::from(b.to_string())).unwrap(),
            None => req.body(Body::empty()).unwrap(),
        };
        let resp = router(self.store.clone()).oneshot(req).await.unwrap();
        let status = resp.status();
        (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
    }

    async fn ok<T: DeserializeOwned>(&self, method: &str, uri: &str, body: Option<Value>) -> T {
        let (status, bytes) = self.call(method, uri, body).await;
        assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
        serde_json::from_slice(&bytes).unwrap()
    }

    async fn err(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, ErrorBody) {
        let (status, bytes) = self.call(method, uri, body).await;
        (status, serde_json::from_slice(&bytes).unwrap())
    }

    async fn start(&self, task: &str, seed: u64) -> SessionView {
        self.ok("POST", "/v1/sessions", Some(json!({"task_id": task, "seed": seed}))).await
    }
}

fn mirror(task: &str, seed: u64) -> SimEnv {
    let s = Suite::builtin();
    let cfg = EpisodeConfig::sample(&s, task, seed, SlotSplit::Train).unwrap();
    SimEnv::reset(s, cfg).unwrap()
}

#[tokio::test]
async fn oracle_session_saves_a_replayable_headless_equivalent_trace() {
    let api = Api::new(Models::default(), Duration::from_secs(600));
    let (task, seed) = ("compose_mail", 17);
    let view = api.start(task, seed).await;
    let mut env = mirror(task, seed);
    assert_eq!(view.screen, *env.observation());
    while let Some(a) = env.oracle_action().cloned() {
        let r: SubmitResponse = api
            .ok("POST", &format!("/v1/sessions/{}/actions", view.session_id), Some(json!({"action": a})))
            .await;
        env.step(&a).unwrap();
        assert_eq!(r.session.screen, *env.observation());
    }
    let done: FinishResponse = api
        .ok("POST", &format!("/v1/sessions/{}/finish", view.session_id), Some(json!({})))
        .await;
    let text = std::fs::read_to_string(&done.path).unwrap();
    let saved = Demonstration::from_jsonl(&text).unwrap();
    replay(&Suite::builtin(), &saved).unwrap();
    let s = Suite::builtin();
    let headless = record(&s, saved.config.clone(), &Oracle, Provenance::Human).unwrap();
    assert_eq!(text, headless.to_jsonl());
    let (status, e) = api.err("GET", &format!("/v1/sessions/{}", view.session_id), None).await;
    assert_eq!((status, e.error.as_str()), (StatusCode::NOT_FOUND, "unknown_session"));
}

#[tokio::test]
async fn accepting_a_suggestion_equals_submitting_it() {
    let s = Suite::builtin();
    let pool = oracle_pool(&s, Some(&["compose_mail"]), 0..4, SlotSplit::Train).unwrap();
    let mut agent = AgentNet::new(ArgumentVocab::new(&s.app_names()), 3);
    let cfg = TrainConfig {
        batch: 16,
        ..TrainConfig::agent()
    };
    train_agent(&mut agent, &pool, &s, &cfg, 800).unwrap();
    let api = Api::new(
        Models {
            agent: Some(agent),
            referee: Some(uinav_core::referee::RefereeNet::new(1)),
        },
        Duration::from_secs(600),
    );
    let a = api.start("compose_mail", 40).await;
    let b = api.start("compose_mail", 40).await;
    let sa: SuggestionView = api.ok("GET", &format!("/v1/sessions/{}/suggestion", a.session_id), None).await;
    let sb: SuggestionView = api.ok("GET", &format!("/v1/sessions/{}/suggestion", b.session_id), None).await;
    assert_eq!(sa, sb);
    assert!(sa.referee.is_some());
    let action = sa.action.clone().expect("agent proposes an action");
    let ra: SubmitResponse = api
        .ok("POST", &format!("/v1/sessions/{}/actions", a.session_id), Some(json!({"accept_suggestion": true})))
        .await;
    let rb: SubmitResponse = api
        .ok("POST", &format!("/v1/sessions/{}/actions", b.session_id), Some(json!({"action": action})))
        .await;
    assert_eq!(serde_json::to_vec(&ra.record).unwrap(), serde_json::to_vec(&rb.record).unwrap());
    // Nothing left to accept until a new suggestion is fetched.
    let (status, e) = api
        .err("POST", &format!("/v1/sessions/{}/actions", a.session_id), Some(json!({"accept_suggestion": true})))
        .await;
    assert_eq!((status, e.error.as_str()), (StatusCode::BAD_REQUEST, "bad_request"));
}

#[tokio::test]
async fn stale_actions_leave_the_screen_alone() {
    let api = Api::new(Models::default(), Duration::from_secs(600));
    let v = api.start("search_shop", 2).await;
    let uri = format!("/v1/sessions/{}/actions", v.session_id);
    let (status, e) = api.err("POST", &uri, Some(json!({"action": MacroAction::click("no_such_element")}))).await;
    assert_eq!((status, e.error.as_str()), (StatusCode::CONFLICT, "stale_action"));
    let (status, e) = api
        .err("POST", &uri, Some(json!({"action": MacroAction::wait(), "screen_id": "elsewhere"})))
        .await;
    assert_eq!((status, e.error.as_str()), (StatusCode::CONFLICT, "stale_action"));
    let after: SessionView = api.ok("GET", &format!("/v1/sessions/{}", v.session_id), None).await;
    assert_eq!(after.screen, v.screen);
    assert_eq!(after.step, 0);
    let (status, _) = api.err("POST", &uri, Some(json!({}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, e) = api.err("GET", "/v1/sessions/nope/suggestion", None).await;
    assert_eq!((status, e.error.as_str()), (StatusCode::NOT_FOUND, "unknown_session"));
}

#[tokio::test]
async fn finished_episodes_reject_more_actions() {
    let api = Api::new(Models::default(), Duration::from_secs(600));
    let v = api.start("view_cart", 5).await;
    let mut env = mirror("view_cart", 5);
    let uri = format!("/v1/sessions/{}/actions", v.session_id);
    while let Some(a) = env.oracle_action().cloned() {
        let _: SubmitResponse = api.ok("POST", &uri, Some(json!({"action": a}))).await;
        env.step(&a).unwrap();
    }
    let (status, e) = api.err("POST", &uri, Some(json!({"action": MacroAction::wait()}))).await;
    assert_eq!((status, e.error.as_str()), (StatusCode::CONFLICT, "episode_over"));
    let (status, _) = api
        .err("POST", &format!("/v1/sessions/{}/finish", v.session_id), Some(json!({"label": "FAILED"})))
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn idle_sessions_persist_partial_traces() {
    let api = Api::new(Models::default(), Duration::ZERO);
    let v = api.start("search_tube", 8).await;
    let mut env = mirror("search_tube", 8);
    let a = env.oracle_action().cloned().unwrap();
    let _: SubmitResponse = api
        .ok("POST", &format!("/v1/sessions/{}/actions", v.session_id), Some(json!({"action": a})))
        .await;
    env.step(&a).unwrap();
    let saved = api.store.expire_idle(Instant::now() + Duration::from_millis(1));
    assert_eq!(saved.len(), 1);
    assert!(api.store.is_empty());
    let partial = Demonstration::load(&saved[0]).unwrap();
    assert_eq!(partial.steps.len(), 1);
    assert_eq!(partial.final_verdict, None);
    replay(&Suite::builtin(), &partial).unwrap();
}

#[tokio::test]
async fn failure_queue_is_served_from_the_data_dir() {
    let api = Api::new(Models::default(), Duration::from_secs(600));
    let empty: FailuresView = api.ok("GET", "/v1/failures", None).await;
    assert!(empty.failures.is_empty());
    let s = Suite::builtin();
    let configs = uinav_core::train::train_configs(&s, 0..2, SlotSplit::Train).unwrap();
    let wait = |_: &SimEnv, _: &uinav_core::text::MaskedUtterance| Some(MacroAction::wait());
    let (_, fails) = uinav_core::demo::error_driven_round(&wait, None, &s, &configs, true).unwrap();
    write_failures(&api.store.data.failures(), &fails).unwrap();
    let got: FailuresView = api.ok("GET", "/v1/failures", None).await;
    assert_eq!(got.failures, fails);
    let h: uinav_gateway::wire::Health = api.ok("GET", "/v1/health", None).await;
    assert_eq!(h.version, "v1");
}
