//! External quality scorer spoken to over JSON lines: one
//! `{"source": .., "target": ..}` object per pair on stdin, one score per
//! line on stdout (a bare number or `{"score": n}`).

use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};

use serde_json::{json, Value};

use dat_core::metrics::QualityScorer;

pub struct CommandScorer {
    command: String,
}

impl CommandScorer {
    pub fn new(command: impl Into<String>) -> Self {
        CommandScorer {
            command: command.into(),
        }
    }

    fn shell(&self) -> Command {
        if cfg!(windows) {
            let mut c = Command::new("cmd");
            c.args(["/C", &self.command]);
            c
        } else {
            let mut c = Command::new("sh");
            c.args(["-c", &self.command]);
            c
        }
    }
}

fn parse_score(line: &str) -> Option<f64> {
    match serde_json::from_str::<Value>(line).ok()? {
        Value::Number(n) => n.as_f64(),
        Value::Object(map) => map.get("score")?.as_f64(),
        _ => None,
    }
}

impl QualityScorer for CommandScorer {
    fn score(&self, pairs: &[(String, String)]) -> Result<Vec<f64>, String> {
        let mut child = self
            .shell()
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| format!("could not start {:?}: {e}", self.command))?;

        let mut stdin = child.stdin.take().expect("piped stdin");
        let payload: String = pairs
            .iter()
            .map(|(s, t)| json!({"source": s, "target": t}).to_string() + "\n")
            .collect();
        let writer = std::thread::spawn(move || {
            // A scorer that exits early closes the pipe; its exit status reports that.
            let _ = stdin.write_all(payload.as_bytes());
        });

        let stdout = child.stdout.take().expect("piped stdout");
        let mut scores = Vec::with_capacity(pairs.len());
        let mut bad_line = None;
        for (i, line) in BufReader::new(stdout).lines().enumerate() {
            let line = line.map_err(|e| format!("reading scorer output: {e}"))?;
            if line.trim().is_empty() {
                continue;
            }
            match parse_score(line.trim()) {
                Some(s) => scores.push(s),
                None => {
                    bad_line.get_or_insert(format!("unparseable score on line {}: {line:?}", i + 1));
                }
            }
        }
        let _ = writer.join();
        let status = child.wait().map_err(|e| format!("waiting for scorer: {e}"))?;
        if !status.success() {
            return Err(format!("scorer {:?} exited with {status}", self.command));
        }
        if let Some(msg) = bad_line {
            return Err(msg);
        }
        Ok(scores)
    }
}
