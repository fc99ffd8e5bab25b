//! Helpers for driving the `dat` binary: a local chat-completion server
//! backed by the simulated model, and command shorthands.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Command, Output};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;

use dat_core::gateway::ChatMessage;
use dat_core::testing::simulated_response;

/// Chat-completion endpoint on 127.0.0.1 answering with the simulated model.
pub struct SimServer {
    pub url: String,
    requests: Arc<AtomicU64>,
}

impl SimServer {
    pub fn start() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicU64::new(0));
        let counter = Arc::clone(&requests);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let counter = Arc::clone(&counter);
                thread::spawn(move || {
                    let _ = handle(stream, &counter);
                });
            }
        });
        SimServer { url, requests }
    }

    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }
}

fn handle(stream: TcpStream, counter: &AtomicU64) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream);
    let mut length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body)?;
    counter.fetch_add(1, Ordering::SeqCst);
    let request: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
    let messages: Vec<ChatMessage> =
        serde_json::from_value(request["messages"].clone()).unwrap_or_default();
    let (status, reply) = match simulated_response(&messages) {
        Ok(text) => (
            200,
            serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}),
        ),
        Err(e) => (400, serde_json::json!({"error": e.to_string()})),
    };
    let reply = reply.to_string();
    let mut stream = reader.into_inner();
    write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
        reply.len()
    )?;
    stream.flush()
}

/// The `dat` binary with a clean environment.
pub fn dat() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dat"));
    for var in ["DAT_CONFIG", "DAT_ENDPOINT_URL", "DAT_API_KEY", "RUST_LOG"] {
        c.env_remove(var);
    }
    c
}

pub fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("dat runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn write_lines(path: &Path, lines: &[String]) {
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}
