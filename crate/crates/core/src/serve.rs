//! REST session API around a trained model.
//!
//! Routes:
//! - `POST /session` with `{profile, knowledge, target}` returns `{id}`
//! - `POST /session/{id}/utterance` with `{text}` returns the reply, the
//!   keyword panel, the top scenario-bias tokens and the achieved flag
//! - `GET /session/{id}` returns the transcript
//! - `DELETE /session/{id}`
//!
//! Sessions idle for longer than the configured timeout are dropped the next
//! time any request arrives.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;
use uuid::Uuid;

use crate::bridging::PredictionDump;
use crate::corpus::{
    encode_sample, DialogueSample, IntentKeyword, KeywordInventory, KnowledgeTriple, Speaker, Turn,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::generator::{generate, DecodeSettings, GenerationContext};
use crate::metrics::target_achieved;
use crate::model::DialogueModel;
use crate::scenario::BiasEntry;

pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(30 * 60);
pub const BIAS_TOP_K: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpec {
    #[serde(rename = "type")]
    pub kind: String,
    pub topic: String,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    #[serde(default)]
    pub profile: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    pub knowledge: Vec<[String; 3]>,
    pub target: TargetSpec,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub id: String,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub reply: String,
    /// `null` when the bridging module is disabled.
    pub keywords: Option<PredictionDump>,
    pub bias_top: Vec<BiasEntry>,
    pub achieved: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptTurn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub id: String,
    pub target: TargetSpec,
    pub turns: Vec<TranscriptTurn>,
    pub achieved: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

/// An error response: status plus `{error, field}` body.
#[derive(Debug)]
pub struct ApiFailure(StatusCode, ApiError);

impl ApiFailure {
    fn bad_request(field: &str, msg: impl Into<String>) -> Self {
        Self(
            StatusCode::BAD_REQUEST,
            ApiError {
                error: msg.into(),
                field: Some(field.to_string()),
            },
        )
    }

    fn not_found(id: &str) -> Self {
        Self(
            StatusCode::NOT_FOUND,
            ApiError {
                error: format!("no session {id}"),
                field: None,
            },
        )
    }

    fn internal(e: Error) -> Self {
        Self(
            StatusCode::INTERNAL_SERVER_ERROR,
            ApiError {
                error: e.to_string(),
                field: None,
            },
        )
    }
}

impl From<JsonRejection> for ApiFailure {
    fn from(r: JsonRejection) -> Self {
        Self(
            StatusCode::BAD_REQUEST,
            ApiError {
                error: r.body_text(),
                field: None,
            },
        )
    }
}

impl IntoResponse for ApiFailure {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

struct Session {
    target: IntentKeyword,
    profile: Vec<(String, String)>,
    knowledge: Vec<KnowledgeTriple>,
    history: Vec<Turn>,
    achieved: bool,
    last_active: Instant,
}

/// Model, vocabulary and live sessions shared by all handlers.
pub struct AppState {
    model: DialogueModel,
    vocab: Vocabulary,
    inventory: KeywordInventory,
    settings: DecodeSettings,
    idle_timeout: Duration,
    sessions: std::sync::Mutex<HashMap<Uuid, Arc<Mutex<Session>>>>,
}

impl AppState {
    pub fn new(
        model: DialogueModel,
        vocab: Vocabulary,
        inventory: KeywordInventory,
        settings: DecodeSettings,
        idle_timeout: Duration,
    ) -> Result<Self> {
        settings.validate()?;
        if settings.max_len > model.config.max_tgt_len {
            return Err(Error::Validation(format!(
                "max decode length {} exceeds the model's target cap {}",
                settings.max_len, model.config.max_tgt_len
            )));
        }
        Ok(Self {
            model,
            vocab,
            inventory,
            settings,
            idle_timeout,
            sessions: Default::default(),
        })
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table poisoned").len()
    }

    fn expire_idle(&self) {
        let now = Instant::now();
        let mut table = self.sessions.lock().expect("session table poisoned");
        // A session whose lock is held is in use, so it is not idle.
        table.retain(|_, s| {
            s.try_lock().map_or(true, |s| {
                now.duration_since(s.last_active) <= self.idle_timeout
            })
        });
    }

    fn lookup(&self, id: &str) -> std::result::Result<(Uuid, Arc<Mutex<Session>>), ApiFailure> {
        let uuid = Uuid::parse_str(id).map_err(|_| ApiFailure::not_found(id))?;
        let table = self.sessions.lock().expect("session table poisoned");
        table
            .get(&uuid)
            .cloned()
            .map(|s| (uuid, s))
            .ok_or_else(|| ApiFailure::not_found(id))
    }

    fn respond(&self, session: &mut Session, text: &str) -> Result<Reply> {
        let mut history = session.history.clone();
        history.push(Turn {
            speaker: Speaker::User,
            text: text.to_string(),
            keyword: None,
        });
        let sample = DialogueSample {
            history,
            target: session.target,
            profile: session.profile.clone(),
            knowledge: session.knowledge.clone(),
            bridge: vec![session.target],
            reference: String::new(),
        };
        let ex = encode_sample(
            &sample,
            &self.vocab,
            &self.inventory,
            self.settings.m,
            self.model.config.limits(),
        )?;
        let ctx = GenerationContext::prepare(&self.model, &ex, self.settings)?;
        let result = generate(&self.model, &ctx, &self.vocab)?;
        let achieved = target_achieved(
            &result.text,
            self.inventory.topic_name(session.target.topic_id),
        );
        session.achieved |= achieved;
        session.history = sample.history;
        session.history.push(Turn {
            speaker: Speaker::System,
            text: result.text.clone(),
            keyword: None,
        });
        let keywords = match (&ctx.distribution, &ctx.selection) {
            (Some(d), Some(s)) => Some(PredictionDump::new(d, s, &self.inventory)),
            _ => None,
        };
        let bias_top = if self.settings.ablation.use_csm {
            ctx.bias.top_k(&self.vocab, BIAS_TOP_K)
        } else {
            Vec::new()
        };
        Ok(Reply {
            reply: result.text,
            keywords,
            bias_top,
            achieved,
        })
    }
}

fn json_body<T>(
    body: std::result::Result<Json<T>, JsonRejection>,
) -> std::result::Result<T, ApiFailure> {
    body.map(|Json(v)| v).map_err(ApiFailure::from)
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: std::result::Result<Json<CreateSession>, JsonRejection>,
) -> std::result::Result<(StatusCode, Json<SessionCreated>), ApiFailure> {
    app.expire_idle();
    let req = json_body(body)?;
    let type_id = app.inventory.type_id(&req.target.kind).ok_or_else(|| {
        ApiFailure::bad_request(
            "target.type",
            format!("unknown keyword type {:?}", req.target.kind),
        )
    })?;
    let topic_id = app.inventory.topic_id(&req.target.topic).ok_or_else(|| {
        ApiFailure::bad_request(
            "target.topic",
            format!("unknown keyword topic {:?}", req.target.topic),
        )
    })?;
    let mut profile = Vec::with_capacity(req.profile.len());
    for (k, v) in req.profile {
        let value = match v {
            serde_json::Value::String(s) => s,
            serde_json::Value::Array(items) => {
                let parts: Option<Vec<String>> = items
                    .into_iter()
                    .map(|i| i.as_str().map(str::to_string))
                    .collect();
                parts
                    .ok_or_else(|| {
                        ApiFailure::bad_request(
                            &format!("profile.{k}"),
                            "list values must be strings",
                        )
                    })?
                    .join(" ")
            }
            _ => {
                return Err(ApiFailure::bad_request(
                    &format!("profile.{k}"),
                    "expected a string or a list of strings",
                ))
            }
        };
        profile.push((k, value));
    }
    let knowledge = req
        .knowledge
        .into_iter()
        .map(|[subject, relation, object]| KnowledgeTriple {
            subject,
            relation,
            object,
        })
        .collect();
    let session = Session {
        target: IntentKeyword { type_id, topic_id },
        profile,
        knowledge,
        history: Vec::new(),
        achieved: false,
        last_active: Instant::now(),
    };
    let id = Uuid::new_v4();
    app.sessions
        .lock()
        .expect("session table poisoned")
        .insert(id, Arc::new(Mutex::new(session)));
    Ok((
        StatusCode::CREATED,
        Json(SessionCreated { id: id.to_string() }),
    ))
}

async fn post_utterance(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: std::result::Result<Json<Utterance>, JsonRejection>,
) -> std::result::Result<Json<Reply>, ApiFailure> {
    app.expire_idle();
    let req = json_body(body)?;
    let text = crate::corpus::normalize_whitespace(&req.text);
    if text.is_empty() {
        return Err(ApiFailure::bad_request("text", "utterance is empty"));
    }
    let (_, session) = app.lookup(&id)?;
    let mut guard = session.lock_owned().await;
    let worker = Arc::clone(&app);
    let reply = tokio::task::spawn_blocking(move || {
        let r = worker.respond(&mut guard, &text);
        guard.last_active = Instant::now();
        r
    })
    .await
    .map_err(|e| {
        ApiFailure::internal(Error::Validation(format!("generation worker failed: {e}")))
    })?;
    reply.map(Json).map_err(ApiFailure::internal)
}

async fn get_session(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> std::result::Result<Json<Transcript>, ApiFailure> {
    app.expire_idle();
    let (uuid, session) = app.lookup(&id)?;
    let mut s = session.lock().await;
    s.last_active = Instant::now();
    Ok(Json(Transcript {
        id: uuid.to_string(),
        target: TargetSpec {
            kind: app.inventory.type_name(s.target.type_id).to_string(),
            topic: app.inventory.topic_name(s.target.topic_id).to_string(),
        },
        turns: s
            .history
            .iter()
            .map(|t| TranscriptTurn {
                speaker: t.speaker,
                text: t.text.clone(),
            })
            .collect(),
        achieved: s.achieved,
    }))
}

async fn delete_session(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> std::result::Result<StatusCode, ApiFailure> {
    app.expire_idle();
    let (uuid, _) = app.lookup(&id)?;
    app.sessions
        .lock()
        .expect("session table poisoned")
        .remove(&uuid);
    Ok(StatusCode::NO_CONTENT)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/session", post(create_session))
        .route("/session/{id}", get(get_session).delete(delete_session))
        .route("/session/{id}/utterance", post(post_utterance))
        .with_state(state)
}

/// Serves until the process is interrupted.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(format!("binding {addr}"), e))?;
    let sweeper = Arc::clone(&state);
    let period = state
        .idle_timeout
        .min(Duration::from_secs(60))
        .max(Duration::from_secs(1));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            sweeper.expire_idle();
        }
    });
    axum::serve(listener, router(state))
        .await
        .map_err(|e| Error::io(format!("serving on {addr}"), e))
}
