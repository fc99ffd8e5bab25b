use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{
    validate_messages, CallCounter, ChatExchange, ChatMessage, Gateway, GatewayError,
    GenerationParams, TokenUsage,
};

/// One line of a transcript store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub messages: Vec<ChatMessage>,
    pub params: GenerationParams,
    pub response_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
}

impl From<TranscriptRecord> for ChatExchange {
    fn from(r: TranscriptRecord) -> Self {
        ChatExchange {
            messages: r.messages,
            params: r.params,
            response_text: r.response_text,
            usage: r.usage,
        }
    }
}

impl From<&ChatExchange> for TranscriptRecord {
    fn from(ex: &ChatExchange) -> Self {
        TranscriptRecord {
            messages: ex.messages.clone(),
            params: ex.params.clone(),
            response_text: ex.response_text.clone(),
            usage: ex.usage,
        }
    }
}

pub enum TranscriptMode {
    /// Forward to a live gateway and append every exchange to the store.
    Record(Arc<dyn Gateway>),
    /// Serve exchanges from the store only.
    Replay,
}

impl TranscriptMode {
    /// Opens `store_path` in this mode.
    pub fn open(self, store_path: impl AsRef<Path>) -> Result<Arc<dyn Gateway>, GatewayError> {
        Ok(match self {
            TranscriptMode::Record(inner) => Arc::new(RecordingGateway::open(inner, store_path)?),
            TranscriptMode::Replay => Arc::new(ReplayGateway::open(store_path)?),
        })
    }
}

fn store_error(path: &Path, message: impl Into<String>) -> GatewayError {
    GatewayError::Store {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Reads every record of a newline-delimited transcript store.
pub fn load_transcript(path: impl AsRef<Path>) -> Result<Vec<TranscriptRecord>, GatewayError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| store_error(path, e.to_string()))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| store_error(path, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TranscriptRecord = serde_json::from_str(&line)
            .map_err(|e| store_error(path, format!("line {}: {e}", i + 1)))?;
        records.push(record);
    }
    Ok(records)
}

/// Serves recorded exchanges by exact message-list match. When the same
/// message list was recorded more than once, the first recording wins.
#[derive(Debug)]
pub struct ReplayGateway {
    records: Vec<TranscriptRecord>,
    by_messages: HashMap<Vec<ChatMessage>, usize>,
    counter: CallCounter,
}

impl ReplayGateway {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        Ok(Self::from_records(load_transcript(path)?))
    }

    pub fn from_records(records: Vec<TranscriptRecord>) -> Self {
        let mut by_messages = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            by_messages.entry(r.messages.clone()).or_insert(i);
        }
        ReplayGateway {
            records,
            by_messages,
            counter: CallCounter::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn divergence(&self, messages: &[ChatMessage]) -> GatewayError {
        let shared = self
            .records
            .iter()
            .map(|r| {
                r.messages
                    .iter()
                    .zip(messages)
                    .take_while(|(a, b)| a == b)
                    .count()
            })
            .max()
            .unwrap_or(0);
        let message = match messages.get(shared) {
            Some(m) => {
                let mut preview: String = m.content.chars().take(80).collect();
                if preview.len() < m.content.len() {
                    preview.push('…');
                }
                format!("{}: {:?}", m.role, preview)
            }
            None => "request ends before any recorded exchange does".to_string(),
        };
        GatewayError::UnrecordedExchange {
            index: shared,
            message,
        }
    }
}

impl Gateway for ReplayGateway {
    fn complete(
        &self,
        messages: &[ChatMessage],
        _params: &GenerationParams,
    ) -> Result<ChatExchange, GatewayError> {
        self.counter.bump();
        validate_messages(messages)?;
        match self.by_messages.get(messages) {
            Some(&i) => Ok(self.records[i].clone().into()),
            None => Err(self.divergence(messages)),
        }
    }

    fn calls(&self) -> u64 {
        self.counter.get()
    }
}

/// Appends every successful exchange of `inner` to a transcript store.
pub struct RecordingGateway {
    inner: Arc<dyn Gateway>,
    path: PathBuf,
    writer: Mutex<BufWriter<File>>,
    counter: CallCounter,
}

impl RecordingGateway {
    pub fn open(inner: Arc<dyn Gateway>, path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| store_error(&path, e.to_string()))?;
        Ok(RecordingGateway {
            inner,
            path,
            writer: Mutex::new(BufWriter::new(file)),
            counter: CallCounter::default(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Gateway for RecordingGateway {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<ChatExchange, GatewayError> {
        self.counter.bump();
        let exchange = self.inner.complete(messages, params)?;
        let line = serde_json::to_string(&TranscriptRecord::from(&exchange))
            .map_err(|e| store_error(&self.path, e.to_string()))?;
        let mut writer = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        writeln!(writer, "{line}")
            .and_then(|_| writer.flush())
            .map_err(|e| store_error(&self.path, e.to_string()))?;
        Ok(exchange)
    }

    fn calls(&self) -> u64 {
        self.counter.get()
    }
}

impl std::fmt::Debug for RecordingGateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RecordingGateway")
            .field("path", &self.path)
            .field("calls", &self.counter.get())
            .finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedGateway;

    fn upper() -> Arc<dyn Gateway> {
        Arc::new(ScriptedGateway::new(|msgs, _| {
            Ok(msgs.last().unwrap().content.to_uppercase())
        }))
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let store = dir.path().join("t.jsonl");
        let params = GenerationParams::default();
        let rec = TranscriptMode::Record(upper()).open(&store).unwrap();
        for q in ["one", "two", "three"] {
            rec.complete(&[ChatMessage::user(q)], &params).unwrap();
        }
        assert_eq!(rec.calls(), 3);
        assert_eq!(load_transcript(&store).unwrap().len(), 3);

        let replay = TranscriptMode::Replay.open(&store).unwrap();
        let ex = replay.complete(&[ChatMessage::user("two")], &params).unwrap();
        assert_eq!(ex.response_text, "TWO");
        assert_eq!(replay.calls(), 1);
    }

    #[test]
    fn cache_miss_names_divergent_message() {
        let params = GenerationParams::default();
        let records = vec![TranscriptRecord {
            messages: vec![ChatMessage::system("sys"), ChatMessage::user("translate me")],
            params: params.clone(),
            response_text: "ok".into(),
            usage: None,
        }];
        let replay = ReplayGateway::from_records(records);
        let err = replay
            .complete(
                &[ChatMessage::system("sys"), ChatMessage::user("translate you")],
                &params,
            )
            .unwrap_err();
        match err {
            GatewayError::UnrecordedExchange { index, message } => {
                assert_eq!(index, 1);
                assert!(message.contains("translate you"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn first_recording_wins() {
        let params = GenerationParams::default();
        let rec = |text: &str| TranscriptRecord {
            messages: vec![ChatMessage::user("q")],
            params: params.clone(),
            response_text: text.into(),
            usage: None,
        };
        let replay = ReplayGateway::from_records(vec![rec("first"), rec("second")]);
        let ex = replay.complete(&[ChatMessage::user("q")], &params).unwrap();
        assert_eq!(ex.response_text, "first");
    }

    #[test]
    fn failed_calls_are_not_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let store = dir.path().join("t.jsonl");
        let failing: Arc<dyn Gateway> = Arc::new(ScriptedGateway::new(|_, _| {
            Err(GatewayError::Unauthorized { status: 401 })
        }));
        let rec = RecordingGateway::open(failing, &store).unwrap();
        assert!(rec
            .complete(&[ChatMessage::user("x")], &GenerationParams::default())
            .is_err());
        assert!(load_transcript(&store).unwrap().is_empty());
    }

    #[test]
    fn malformed_store_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let store = dir.path().join("t.jsonl");
        std::fs::write(&store, "{\"messages\": [\n").unwrap();
        let err = ReplayGateway::open(&store).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }
}
