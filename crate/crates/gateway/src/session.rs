//! Session state and the operations behind each endpoint, independent of
//! the HTTP layer.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use uinav_core::action::MacroAction;
use uinav_core::agent::{decode_action, AgentNet};
use uinav_core::demo::{trace_files, Demonstration, FailureCase, Provenance, StepRecord, TRACE_EXT};
use uinav_core::referee::{ActionHistory, RefereeLabel, RefereeNet, RefereeState, RefereeVerdict};
use uinav_core::sim::{EpisodeConfig, SimEnv, SimError, Suite};
use uinav_core::text::{mask_or_unmasked, MaskedUtterance};

use crate::wire::{FinishResponse, SessionView, StartRequest, SubmitRequest, SubmitResponse, SuggestionView};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("the episode is over")]
    EpisodeOver,
    #[error("stale action: {0}")]
    StaleAction(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("no agent is attached")]
    NoAgent,
    #[error("{0}")]
    Internal(String),
}

impl GatewayError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownSession(_) => "unknown_session",
            Self::EpisodeOver => "episode_over",
            Self::StaleAction(_) => "stale_action",
            Self::BadRequest(_) => "bad_request",
            Self::NoAgent => "no_agent",
            Self::Internal(_) => "internal",
        }
    }
}

impl From<SimError> for GatewayError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::EpisodeOver => Self::EpisodeOver,
            SimError::StaleAction(m) => Self::StaleAction(m),
            SimError::Io(e) => Self::Internal(e.to_string()),
            other => Self::BadRequest(other.to_string()),
        }
    }
}

impl From<uinav_core::demo::DemoError> for GatewayError {
    fn from(e: uinav_core::demo::DemoError) -> Self {
        Self::Internal(e.to_string())
    }
}

impl From<std::io::Error> for GatewayError {
    fn from(e: std::io::Error) -> Self {
        Self::Internal(e.to_string())
    }
}

/// Models shared by every session.
#[derive(Default)]
pub struct Models {
    pub agent: Option<AgentNet>,
    pub referee: Option<RefereeNet>,
}

/// Where traces go: finished demonstrations, partial traces of expired
/// sessions, and the failure queue written by `loop run --source console`.
#[derive(Clone, Debug)]
pub struct DataDir {
    pub root: PathBuf,
}

impl DataDir {
    pub const ENV: &'static str = "UINAV_DATA_DIR";

    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `$UINAV_DATA_DIR`, else `./uinav-data`.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os(Self::ENV).map_or_else(|| PathBuf::from("uinav-data"), PathBuf::from))
    }

    pub fn demos(&self) -> PathBuf {
        self.root.join("demos")
    }

    pub fn partial(&self) -> PathBuf {
        self.root.join("partial")
    }

    pub fn failures(&self) -> PathBuf {
        self.root.join("failures.jsonl")
    }

    pub fn load_failures(&self) -> Result<Vec<FailureCase>, GatewayError> {
        read_failures(&self.failures())
    }
}

pub fn read_failures(path: &Path) -> Result<Vec<FailureCase>, GatewayError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| GatewayError::Internal(format!("failure queue: {e}"))))
        .collect()
}

pub fn write_failures(path: &Path, failures: &[FailureCase]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = String::new();
    for f in failures {
        out += &serde_json::to_string(f).expect("failure cases serialize");
        out.push('\n');
    }
    fs::write(path, out)
}

pub struct Session {
    pub id: String,
    env: SimEnv,
    utterance: MaskedUtterance,
    steps: Vec<StepRecord>,
    history: ActionHistory,
    referee_state: RefereeState,
    /// Referee verdict on the current screen and the state after it.
    referee_cache: Option<(RefereeVerdict, RefereeState)>,
    suggestion: Option<MacroAction>,
    finished: bool,
    last_active: Instant,
}

impl Session {
    fn new(id: String, env: SimEnv, utterance: MaskedUtterance) -> Self {
        Self {
            id,
            env,
            utterance,
            steps: Vec::new(),
            history: ActionHistory::default(),
            referee_state: RefereeState::default(),
            referee_cache: None,
            suggestion: None,
            finished: false,
            last_active: Instant::now(),
        }
    }

    pub fn view(&self) -> SessionView {
        let cfg = self.env.config();
        SessionView {
            session_id: self.id.clone(),
            task_id: cfg.task_id.clone(),
            utterance: cfg.utterance.clone(),
            masked_utterance: self.utterance.masked_text.clone(),
            entities: self.utterance.entities.clone(),
            step: self.env.steps(),
            screen: self.env.observation().clone(),
            verdict: self.env.verdict(),
            over: self.finished || self.env.verdict().is_terminal(),
        }
    }

    fn touch(&mut self) {
        self.last_active = Instant::now();
    }

    fn referee_verdict(&mut self, referee: &RefereeNet) -> Result<RefereeVerdict, GatewayError> {
        if self.referee_cache.is_none() {
            let r = referee
                .step(self.env.observation(), &self.utterance, self.history, &self.referee_state)
                .map_err(|e| GatewayError::Internal(e.to_string()))?;
            self.referee_cache = Some(r);
        }
        Ok(self.referee_cache.as_ref().expect("just filled").0.clone())
    }

    pub fn suggestion(&mut self, models: &Models) -> Result<SuggestionView, GatewayError> {
        self.touch();
        if self.finished {
            return Err(GatewayError::EpisodeOver);
        }
        let screen = self.env.observation();
        let (action, element_weights, kind_probabilities) = match &models.agent {
            Some(agent) if !self.env.verdict().is_terminal() => {
                let p = agent
                    .predict(screen, &self.utterance)
                    .map_err(|e| GatewayError::Internal(e.to_string()))?;
                let a = decode_action(&p, screen, &self.utterance, &agent.vocab).ok();
                (a, p.element_weights, p.action_kind)
            }
            _ => (None, Vec::new(), Vec::new()),
        };
        let screen_id = screen.screen_id.clone();
        self.suggestion = action.clone();
        let referee = match &models.referee {
            Some(r) => Some(self.referee_verdict(r)?),
            None => None,
        };
        Ok(SuggestionView {
            screen_id,
            action,
            element_weights,
            kind_probabilities,
            referee,
        })
    }

    pub fn submit(&mut self, req: &SubmitRequest, models: &Models) -> Result<SubmitResponse, GatewayError> {
        self.touch();
        if self.finished || self.env.verdict().is_terminal() {
            return Err(GatewayError::EpisodeOver);
        }
        let action = match (&req.action, req.accept_suggestion) {
            (Some(_), true) => return Err(GatewayError::BadRequest("give an action or accept, not both".into())),
            (Some(a), false) => a.clone(),
            (None, true) => self
                .suggestion
                .clone()
                .ok_or_else(|| GatewayError::BadRequest("no suggestion to accept; fetch one first".into()))?,
            (None, false) => return Err(GatewayError::BadRequest("missing action".into())),
        };
        action.check().map_err(|e| GatewayError::BadRequest(e.to_string()))?;
        let screen = self.env.observation().clone();
        if let Some(id) = &req.screen_id {
            if *id != screen.screen_id {
                return Err(GatewayError::StaleAction(format!(
                    "action built on {id} but the device shows {}",
                    screen.screen_id
                )));
            }
        }
        // Advance the referee over the screen being left before it changes.
        if let Some(r) = &models.referee {
            self.referee_verdict(r)?;
        }
        let label = RefereeLabel::from(self.env.verdict());
        let step = self.env.steps();
        let result = self.env.step_checked(&action, &screen)?;
        if let Some((_, next)) = self.referee_cache.take() {
            self.referee_state = next;
        }
        self.history = ActionHistory::after(action.kind, &result.outcome);
        self.suggestion = None;
        let record = StepRecord {
            step,
            episode_id: Demonstration::episode_id_for(self.env.config()),
            screen,
            action: Some(action),
            outcome: Some(result.outcome),
            referee_label: label,
            provenance: Provenance::Human,
        };
        self.steps.push(record.clone());
        Ok(SubmitResponse {
            record,
            session: self.view(),
        })
    }

    /// The trace so far; when `close` the final screen is appended the way
    /// a headless recording does.
    pub fn trace(&self, close: bool, label: Option<RefereeLabel>) -> Demonstration {
        let cfg = self.env.config().clone();
        let episode_id = Demonstration::episode_id_for(&cfg);
        let mut steps = self.steps.clone();
        if close {
            steps.push(StepRecord {
                step: self.env.steps(),
                episode_id: episode_id.clone(),
                screen: self.env.observation().clone(),
                action: None,
                outcome: None,
                referee_label: RefereeLabel::from(self.env.verdict()),
                provenance: Provenance::Human,
            });
        }
        Demonstration {
            episode_id,
            config: cfg,
            utterance: self.utterance.clone(),
            final_verdict: if close {
                Some(label.unwrap_or_else(|| RefereeLabel::from(self.env.verdict())))
            } else {
                None
            },
            steps,
        }
    }
}

/// Writes traces under one lock so file numbering never collides.
#[derive(Default)]
pub struct PoolWriter {
    lock: Mutex<()>,
}

impl PoolWriter {
    pub fn write(&self, dir: &Path, d: &Demonstration) -> Result<PathBuf, GatewayError> {
        let _guard = self.lock.lock().expect("pool writer poisoned");
        fs::create_dir_all(dir)?;
        let next = trace_files(dir)?.len();
        let path = dir.join(format!("{next:05}-{}.{TRACE_EXT}", d.episode_id));
        d.save(&path)?;
        Ok(path)
    }
}

pub type SessionHandle = Arc<tokio::sync::Mutex<Session>>;

/// All live sessions. Each session sits behind its own FIFO lock, so
/// commands on one session run in arrival order while sessions proceed
/// independently.
pub struct SessionStore {
    pub suite: Arc<Suite>,
    pub models: Models,
    pub data: DataDir,
    pub idle_timeout: Duration,
    sessions: Mutex<HashMap<String, SessionHandle>>,
    writer: PoolWriter,
}

impl SessionStore {
    pub fn new(suite: Arc<Suite>, models: Models, data: DataDir, idle_timeout: Duration) -> Self {
        Self {
            suite,
            models,
            data,
            idle_timeout,
            sessions: Mutex::new(HashMap::new()),
            writer: PoolWriter::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().expect("session map poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn start(&self, req: &StartRequest) -> Result<SessionView, GatewayError> {
        let mut cfg = if req.randomize {
            EpisodeConfig::sample(&self.suite, &req.task_id, req.seed, req.split)?
        } else {
            EpisodeConfig::clean(&self.suite, &req.task_id, req.seed, req.split)?
        };
        if let Some(u) = &req.utterance {
            cfg.utterance = u.clone();
        }
        let env = SimEnv::reset(self.suite.clone(), cfg)?;
        let utterance = mask_or_unmasked(&env.config().utterance, &self.suite.templates, true);
        let id = uuid::Uuid::new_v4().simple().to_string();
        let session = Session::new(id.clone(), env, utterance);
        let view = session.view();
        self.sessions
            .lock()
            .expect("session map poisoned")
            .insert(id, Arc::new(tokio::sync::Mutex::new(session)));
        Ok(view)
    }

    pub fn get(&self, id: &str) -> Result<SessionHandle, GatewayError> {
        self.sessions
            .lock()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| GatewayError::UnknownSession(id.to_owned()))
    }

    /// Persists the demonstration and closes the session.
    pub fn finish(&self, s: &mut Session, label: Option<RefereeLabel>) -> Result<FinishResponse, GatewayError> {
        if s.finished {
            return Err(GatewayError::EpisodeOver);
        }
        let verdict = RefereeLabel::from(s.env.verdict());
        if let Some(l) = label {
            if s.env.verdict().is_terminal() && l != verdict {
                return Err(GatewayError::BadRequest(format!(
                    "label {} contradicts the episode outcome {}",
                    l.as_str(),
                    verdict.as_str()
                )));
            }
        }
        let d = s.trace(true, label);
        let path = self.writer.write(&self.data.demos(), &d)?;
        s.finished = true;
        self.sessions.lock().expect("session map poisoned").remove(&s.id);
        Ok(FinishResponse {
            episode_id: d.episode_id.clone(),
            path: path.display().to_string(),
            steps: d.steps.len(),
            final_verdict: d.final_verdict.expect("closed traces carry a verdict"),
        })
    }

    /// Drops sessions idle for longer than the timeout, saving their partial
    /// traces. Sessions busy with a command are skipped.
    pub fn expire_idle(&self, now: Instant) -> Vec<PathBuf> {
        let handles: Vec<(String, SessionHandle)> = self
            .sessions
            .lock()
            .expect("session map poisoned")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let mut saved = Vec::new();
        for (id, h) in handles {
            let Ok(mut s) = h.try_lock() else { continue };
            if now.saturating_duration_since(s.last_active) < self.idle_timeout || s.finished {
                continue;
            }
            let d = s.trace(false, None);
            match self.writer.write(&self.data.partial(), &d) {
                Ok(p) => saved.push(p),
                Err(e) => log::warn!("could not save partial trace of {id}: {e}"),
            }
            s.finished = true;
            self.sessions.lock().expect("session map poisoned").remove(&id);
            log::info!("session {id} expired after {} steps", s.steps.len());
        }
        saved
    }
}
