//! Chat-completion access.
//!
//! Everything that talks to a model goes through [`Gateway`]. Three
//! implementations ship here: [`HttpGateway`] for a live OpenAI-style
//! endpoint, [`ReplayGateway`] serving a recorded transcript store, and
//! [`ScriptedGateway`] backed by a closure for tests. [`RecordingGateway`]
//! wraps any of them and appends each exchange to a transcript store.

mod http;
mod transcript;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{
    GatewayConfig, HttpGateway, HttpReply, SecretString, Transport, TransportFailure,
    UreqTransport,
};
pub use transcript::{
    load_transcript, RecordingGateway, ReplayGateway, TranscriptMode, TranscriptRecord,
};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 1024;
pub const DEFAULT_MODEL: &str = "llama-3.1-8b-instruct";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("endpoint rejected credentials (HTTP {status})")]
    Unauthorized { status: u16 },
    #[error("endpoint rejected request (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("transport failure after {attempts} attempt(s){}: {message}", last_status.map(|s| format!(", last status HTTP {s}")).unwrap_or_default())]
    Transport {
        attempts: u32,
        last_status: Option<u16>,
        message: String,
    },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("unrecorded exchange: message {index} diverges from every recorded exchange ({message})")]
    UnrecordedExchange { index: usize, message: String },
    #[error("transcript store {path}: {message}")]
    Store { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Decoding parameters sent with every request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    #[serde(rename = "model")]
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be non-negative, got {}",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_output_tokens must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            model_name: DEFAULT_MODEL.to_string(),
            temperature: DEFAULT_TEMPERATURE,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// One request/response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub messages: Vec<ChatMessage>,
    pub params: GenerationParams,
    pub response_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
}

/// Messages must be non-empty and end with a user turn.
pub fn validate_messages(messages: &[ChatMessage]) -> Result<(), GatewayError> {
    match messages.last() {
        None => Err(GatewayError::InvalidRequest("empty message list".into())),
        Some(m) if m.role != Role::User => Err(GatewayError::InvalidRequest(format!(
            "last message has role {}, expected user",
            m.role
        ))),
        Some(_) => Ok(()),
    }
}

pub trait Gateway: Send + Sync {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<ChatExchange, GatewayError>;

    /// Number of `complete` calls issued so far. Never decreases.
    fn calls(&self) -> u64;
}

impl<G: Gateway + ?Sized> Gateway for Arc<G> {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<ChatExchange, GatewayError> {
        (**self).complete(messages, params)
    }

    fn calls(&self) -> u64 {
        (**self).calls()
    }
}

impl<G: Gateway + ?Sized> Gateway for &G {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<ChatExchange, GatewayError> {
        (**self).complete(messages, params)
    }

    fn calls(&self) -> u64 {
        (**self).calls()
    }
}

#[derive(Debug, Default)]
pub(crate) struct CallCounter(AtomicU64);

impl CallCounter {
    pub(crate) fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

type ScriptFn =
    dyn Fn(&[ChatMessage], &GenerationParams) -> Result<String, GatewayError> + Send + Sync;

/// Gateway whose responses come from a closure.
pub struct ScriptedGateway {
    script: Box<ScriptFn>,
    counter: CallCounter,
}

impl ScriptedGateway {
    pub fn new<F>(script: F) -> Self
    where
        F: Fn(&[ChatMessage], &GenerationParams) -> Result<String, GatewayError>
            + Send
            + Sync
            + 'static,
    {
        ScriptedGateway {
            script: Box::new(script),
            counter: CallCounter::default(),
        }
    }
}

impl Gateway for ScriptedGateway {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<ChatExchange, GatewayError> {
        self.counter.bump();
        validate_messages(messages)?;
        let response_text = (self.script)(messages, params)?;
        if response_text.trim().is_empty() {
            return Err(GatewayError::MalformedResponse(
                "empty response text".into(),
            ));
        }
        Ok(ChatExchange {
            messages: messages.to_vec(),
            params: params.clone(),
            response_text,
            usage: None,
        })
    }

    fn calls(&self) -> u64 {
        self.counter.get()
    }
}

impl fmt::Debug for ScriptedGateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScriptedGateway")
            .field("calls", &self.counter.get())
            .finish_non_exhaustive()
    }
}
