use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use tracing::warn;

use super::{
    validate_messages, CallCounter, ChatExchange, ChatMessage, Gateway, GatewayError,
    GenerationParams, TokenUsage,
};

/// Credential that never shows up in `Debug` output or serialized state.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretString(String);

impl SecretString {
    pub fn new(secret: impl Into<String>) -> Self {
        SecretString(secret.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for SecretString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretString(***)")
    }
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub endpoint_url: String,
    pub auth_token: Option<SecretString>,
    pub retry_limit: u32,
    pub backoff_base: Duration,
    pub timeout: Duration,
}

impl GatewayConfig {
    pub fn new(endpoint_url: impl Into<String>) -> Self {
        GatewayConfig {
            endpoint_url: endpoint_url.into(),
            auth_token: None,
            retry_limit: 3,
            backoff_base: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let url = self.endpoint_url.trim();
        if !(url.starts_with("http://") || url.starts_with("https://")) {
            return Err(GatewayError::InvalidRequest(format!(
                "endpoint url must be http(s), got {:?}",
                self.endpoint_url
            )));
        }
        Ok(())
    }

    /// Delay before retry number `retry` (0-based): `base * 2^retry`.
    pub fn backoff(&self, retry: u32) -> Duration {
        self.backoff_base.saturating_mul(1u32 << retry.min(20))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportFailure {
    Timeout(String),
    Connect(String),
    Other(String),
}

impl TransportFailure {
    fn is_transient(&self) -> bool {
        matches!(
            self,
            TransportFailure::Timeout(_) | TransportFailure::Connect(_)
        )
    }

    fn message(&self) -> &str {
        match self {
            TransportFailure::Timeout(m) | TransportFailure::Connect(m) | TransportFailure::Other(m) => m,
        }
    }
}

/// Sends one JSON POST. Status codes are returned, never raised.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &str,
        timeout: Duration,
    ) -> Result<HttpReply, TransportFailure>;
}

#[derive(Debug, Default)]
pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &str,
        timeout: Duration,
    ) -> Result<HttpReply, TransportFailure> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut request = agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = bearer {
            request = request.header("Authorization", format!("Bearer {token}"));
        }
        let mut response = request.send(body).map_err(classify_ureq_error)?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(classify_ureq_error)?;
        Ok(HttpReply { status, body })
    }
}

fn classify_ureq_error(err: ureq::Error) -> TransportFailure {
    match err {
        ureq::Error::Timeout(t) => TransportFailure::Timeout(format!("timeout: {t}")),
        ureq::Error::Io(e) if e.kind() == std::io::ErrorKind::TimedOut => {
            TransportFailure::Timeout(e.to_string())
        }
        ureq::Error::Io(e) => TransportFailure::Connect(e.to_string()),
        ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => {
            TransportFailure::Connect(err.to_string())
        }
        other => TransportFailure::Other(other.to_string()),
    }
}

type Sleeper = dyn Fn(Duration) + Send + Sync;

/// Live chat-completion client with retry on timeouts, 429 and 5xx.
pub struct HttpGateway {
    config: GatewayConfig,
    transport: Arc<dyn Transport>,
    sleeper: Arc<Sleeper>,
    counter: CallCounter,
}

impl HttpGateway {
    pub fn new(config: GatewayConfig) -> Result<Self, GatewayError> {
        Self::with_transport(config, Arc::new(UreqTransport))
    }

    pub fn with_transport(
        config: GatewayConfig,
        transport: Arc<dyn Transport>,
    ) -> Result<Self, GatewayError> {
        config.validate()?;
        Ok(HttpGateway {
            config,
            transport,
            sleeper: Arc::new(std::thread::sleep),
            counter: CallCounter::default(),
        })
    }

    /// Replaces the backoff sleep, e.g. to record delays in tests.
    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    fn request_body(messages: &[ChatMessage], params: &GenerationParams) -> String {
        json!({
            "model": params.model_name,
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
            "n": 1,
        })
        .to_string()
    }
}

fn parse_completion(body: &str) -> Result<(String, Option<TokenUsage>), GatewayError> {
    let value: Value = serde_json::from_str(body)
        .map_err(|e| GatewayError::MalformedResponse(format!("invalid JSON: {e}")))?;
    let text = value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| {
            GatewayError::MalformedResponse("missing choices[0].message.content".into())
        })?;
    if text.trim().is_empty() {
        return Err(GatewayError::MalformedResponse(
            "empty response text".into(),
        ));
    }
    let usage = match (
        value.pointer("/usage/prompt_tokens").and_then(Value::as_u64),
        value.pointer("/usage/completion_tokens").and_then(Value::as_u64),
    ) {
        (Some(input_tokens), Some(output_tokens)) => Some(TokenUsage {
            input_tokens,
            output_tokens,
        }),
        _ => None,
    };
    Ok((text.to_string(), usage))
}

impl Gateway for HttpGateway {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<ChatExchange, GatewayError> {
        self.counter.bump();
        validate_messages(messages)?;
        params.validate()?;
        let body = Self::request_body(messages, params);
        let bearer = self.config.auth_token.as_ref().map(SecretString::expose);

        let mut last_status = None;
        let mut last_message: String;
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let outcome = self.transport.post_json(
                &self.config.endpoint_url,
                bearer,
                &body,
                self.config.timeout,
            );
            match outcome {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    let (response_text, usage) = parse_completion(&reply.body)?;
                    return Ok(ChatExchange {
                        messages: messages.to_vec(),
                        params: params.clone(),
                        response_text,
                        usage,
                    });
                }
                Ok(reply) if reply.status == 429 || reply.status >= 500 => {
                    last_status = Some(reply.status);
                    last_message = format!("HTTP {}", reply.status);
                }
                Ok(reply) if reply.status == 401 || reply.status == 403 => {
                    return Err(GatewayError::Unauthorized {
                        status: reply.status,
                    });
                }
                Ok(reply) => {
                    return Err(GatewayError::Rejected {
                        status: reply.status,
                        body: reply.body,
                    });
                }
                Err(failure) => {
                    last_message = failure.message().to_string();
                    if !failure.is_transient() {
                        return Err(GatewayError::Transport {
                            attempts: attempt,
                            last_status,
                            message: last_message,
                        });
                    }
                }
            }
            let retry = attempt - 1;
            if retry >= self.config.retry_limit {
                return Err(GatewayError::Transport {
                    attempts: attempt,
                    last_status,
                    message: last_message,
                });
            }
            let delay = self.config.backoff(retry);
            warn!(attempt, ?delay, reason = %last_message, "retrying chat completion");
            (self.sleeper)(delay);
        }
    }

    fn calls(&self) -> u64 {
        self.counter.get()
    }
}

impl fmt::Debug for HttpGateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpGateway")
            .field("config", &self.config)
            .field("calls", &self.counter.get())
            .finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;
    use std::sync::Mutex;

    struct FakeTransport {
        replies: Mutex<VecDeque<Result<HttpReply, TransportFailure>>>,
        seen: Mutex<Vec<(Option<String>, String)>>,
    }

    impl FakeTransport {
        fn new(replies: Vec<Result<HttpReply, TransportFailure>>) -> Arc<Self> {
            Arc::new(FakeTransport {
                replies: Mutex::new(replies.into()),
                seen: Mutex::new(Vec::new()),
            })
        }

        fn attempts(&self) -> usize {
            self.seen.lock().unwrap().len()
        }
    }

    impl Transport for FakeTransport {
        fn post_json(
            &self,
            _url: &str,
            bearer: Option<&str>,
            body: &str,
            _timeout: Duration,
        ) -> Result<HttpReply, TransportFailure> {
            self.seen
                .lock()
                .unwrap()
                .push((bearer.map(str::to_owned), body.to_owned()));
            self.replies
                .lock()
                .unwrap()
                .pop_front()
                .expect("unexpected extra request")
        }
    }

    fn status(code: u16) -> Result<HttpReply, TransportFailure> {
        Ok(HttpReply {
            status: code,
            body: String::new(),
        })
    }

    fn ok(text: &str) -> Result<HttpReply, TransportFailure> {
        Ok(HttpReply {
            status: 200,
            body: json!({
                "choices": [{"message": {"role": "assistant", "content": text}}],
                "usage": {"prompt_tokens": 7, "completion_tokens": 3}
            })
            .to_string(),
        })
    }

    fn gateway(transport: Arc<FakeTransport>) -> (HttpGateway, Arc<Mutex<Vec<Duration>>>) {
        let mut config = GatewayConfig::new("http://localhost:9/v1/chat/completions");
        config.retry_limit = 3;
        config.backoff_base = Duration::from_millis(100);
        config.auth_token = Some(SecretString::new("sk-test-secret"));
        let delays = Arc::new(Mutex::new(Vec::new()));
        let sink = Arc::clone(&delays);
        let gw = HttpGateway::with_transport(config, transport)
            .unwrap()
            .with_sleeper(move |d| sink.lock().unwrap().push(d));
        (gw, delays)
    }

    fn call(gw: &HttpGateway) -> Result<ChatExchange, GatewayError> {
        gw.complete(&[ChatMessage::user("hello")], &GenerationParams::default())
    }

    #[test]
    fn retries_server_errors_with_exponential_backoff() {
        let transport = FakeTransport::new(vec![status(500), status(500), ok("bonjour")]);
        let (gw, delays) = gateway(Arc::clone(&transport));
        let ex = call(&gw).unwrap();
        assert_eq!(ex.response_text, "bonjour");
        assert_eq!(
            ex.usage,
            Some(TokenUsage {
                input_tokens: 7,
                output_tokens: 3
            })
        );
        assert_eq!(transport.attempts(), 3);
        assert_eq!(
            *delays.lock().unwrap(),
            vec![Duration::from_millis(100), Duration::from_millis(200)]
        );
        assert_eq!(gw.calls(), 1);
    }

    #[test]
    fn unauthorized_fails_without_retry() {
        let transport = FakeTransport::new(vec![status(401)]);
        let (gw, delays) = gateway(Arc::clone(&transport));
        let err = call(&gw).unwrap_err();
        assert!(matches!(err, GatewayError::Unauthorized { status: 401 }));
        assert_eq!(transport.attempts(), 1);
        assert!(delays.lock().unwrap().is_empty());
    }

    #[test]
    fn other_client_errors_are_not_retried() {
        let transport = FakeTransport::new(vec![status(400)]);
        let (gw, _) = gateway(Arc::clone(&transport));
        assert!(matches!(
            call(&gw).unwrap_err(),
            GatewayError::Rejected { status: 400, .. }
        ));
        assert_eq!(transport.attempts(), 1);
    }

    #[test]
    fn rate_limit_and_timeouts_are_retried() {
        let transport = FakeTransport::new(vec![
            status(429),
            Err(TransportFailure::Timeout("slow".into())),
            ok("ok"),
        ]);
        let (gw, delays) = gateway(Arc::clone(&transport));
        assert_eq!(call(&gw).unwrap().response_text, "ok");
        assert_eq!(delays.lock().unwrap().len(), 2);
    }

    #[test]
    fn exhausted_retries_report_last_status() {
        let transport = FakeTransport::new(vec![status(503); 4]);
        let (gw, delays) = gateway(Arc::clone(&transport));
        match call(&gw).unwrap_err() {
            GatewayError::Transport {
                attempts,
                last_status,
                ..
            } => {
                assert_eq!(attempts, 4);
                assert_eq!(last_status, Some(503));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(
            *delays.lock().unwrap(),
            vec![
                Duration::from_millis(100),
                Duration::from_millis(200),
                Duration::from_millis(400)
            ]
        );
    }

    #[test]
    fn empty_or_missing_content_is_malformed() {
        let transport = FakeTransport::new(vec![ok("  ")]);
        let (gw, _) = gateway(transport);
        assert!(matches!(
            call(&gw).unwrap_err(),
            GatewayError::MalformedResponse(_)
        ));

        let transport = FakeTransport::new(vec![Ok(HttpReply {
            status: 200,
            body: "{\"choices\": []}".into(),
        })]);
        let (gw, _) = gateway(transport);
        assert!(matches!(
            call(&gw).unwrap_err(),
            GatewayError::MalformedResponse(_)
        ));
    }

    #[test]
    fn request_body_follows_chat_schema() {
        let transport = FakeTransport::new(vec![ok("x")]);
        let (gw, _) = gateway(Arc::clone(&transport));
        call(&gw).unwrap();
        let seen = transport.seen.lock().unwrap();
        let (bearer, body) = &seen[0];
        assert_eq!(bearer.as_deref(), Some("sk-test-secret"));
        let body: Value = serde_json::from_str(body).unwrap();
        assert_eq!(body["model"], "llama-3.1-8b-instruct");
        assert_eq!(body["temperature"], 0.1);
        assert_eq!(body["max_tokens"], 1024);
        assert_eq!(body["n"], 1);
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"], "hello");
    }

    #[test]
    fn secret_is_redacted_in_debug() {
        let transport = FakeTransport::new(vec![]);
        let (gw, _) = gateway(transport);
        let dbg = format!("{gw:?}");
        assert!(!dbg.contains("sk-test-secret"));
        assert!(dbg.contains("***"));
    }

    #[test]
    fn rejects_non_http_endpoint() {
        assert!(HttpGateway::new(GatewayConfig::new("ftp://x")).is_err());
    }
}
