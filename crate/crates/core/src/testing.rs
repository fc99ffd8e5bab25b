//! Deterministic stand-in model and synthetic corpora for tests.
//!
//! The simulated model answers the two prompt shapes produced by the
//! default templates: source generation (a numbered list of variants of
//! the query) and translation (the source words reversed and uppercased).

use crate::gateway::{ChatMessage, GatewayError, ScriptedGateway};
use crate::prompt::PAIR_ARROW;
use crate::text::tokenize;

const VOCAB: [&str; 24] = [
    "river", "market", "teacher", "mountain", "village", "doctor", "garden", "window",
    "letter", "island", "winter", "engine", "forest", "council", "harbor", "museum",
    "festival", "bridge", "farmer", "library", "storm", "station", "kitchen", "planet",
];

const ORDINALS: [&str; 12] = [
    "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth",
    "tenth", "eleventh", "twelfth",
];

const VERBS: [&str; 8] = [
    "visited", "painted", "described", "crossed", "opened", "watched", "repaired", "praised",
];

const ADJECTIVES: [&str; 8] = [
    "old", "quiet", "busy", "famous", "distant", "small", "bright", "hidden",
];

fn fnv(text: &str) -> u64 {
    text.bytes().fold(0xcbf29ce484222325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x100000001b3)
    })
}

fn capitalize(words: &[String]) -> String {
    let mut s = words.join(" ");
    if let Some(first) = s.get(0..1) {
        let upper = first.to_uppercase();
        s.replace_range(0..1, &upper);
    }
    s.push('.');
    s
}

/// Variant `i` of `query`: one word swapped for a vocabulary word, every
/// third variant shortened by dropping words from its first half, and an
/// ordinal appended so variants differ.
pub fn simulated_candidate(query: &str, i: usize) -> String {
    let mut words = tokenize(query).into_inner();
    if words.is_empty() {
        words.push("something".into());
    }
    let h = fnv(query) as usize;
    let n = words.len();
    words[i % n] = VOCAB[(h + i) % VOCAB.len()].to_string();
    if i % 3 == 2 && n > 3 {
        words.drain(1..n / 2);
    }
    words.push(ORDINALS[i % ORDINALS.len()].to_string());
    capitalize(&words)
}

/// The simulated translation of `source`.
pub fn simulated_translation(source: &str) -> String {
    let mut words = tokenize(source).into_inner();
    words.reverse();
    words.join(" ").to_uppercase()
}

fn requested_count(prompt: &str) -> usize {
    prompt
        .split_whitespace()
        .skip_while(|w| *w != "Write")
        .nth(1)
        .and_then(|w| w.parse().ok())
        .unwrap_or(10)
}

/// Answers one prompt the way the simulated model would.
pub fn simulated_response(messages: &[ChatMessage]) -> Result<String, GatewayError> {
    let prompt = &messages
        .last()
        .ok_or_else(|| GatewayError::InvalidRequest("no messages".into()))?
        .content;
    if let Some((_, query)) = prompt.rsplit_once("Query sentence: ") {
        let m = requested_count(prompt);
        let mut out = String::from("Here are the sentences:\n");
        for i in 0..m {
            out.push_str(&format!("{}. {}\n", i + 1, simulated_candidate(query.trim(), i)));
        }
        return Ok(out);
    }
    let last = prompt.lines().last().unwrap_or_default();
    let source = last
        .strip_suffix(PAIR_ARROW)
        .ok_or_else(|| GatewayError::InvalidRequest(format!("unrecognized prompt tail {last:?}")))?;
    Ok(simulated_translation(source.trim()))
}

pub fn simulated_llm() -> ScriptedGateway {
    ScriptedGateway::new(|messages, _| simulated_response(messages))
}

/// `n` distinct English-like sentences, deterministic in `seed`.
pub fn synthetic_queries(n: usize, seed: u64) -> Vec<String> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = move |bound: usize| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 33) as usize) % bound
    };
    (0..n)
        .map(|i| {
            let subject = VOCAB[next(VOCAB.len())];
            let object = VOCAB[next(VOCAB.len())];
            let place = VOCAB[next(VOCAB.len())];
            format!(
                "The {} {} {} the {} {} near the {} in sentence {}.",
                ADJECTIVES[next(ADJECTIVES.len())],
                subject,
                VERBS[next(VERBS.len())],
                ADJECTIVES[next(ADJECTIVES.len())],
                object,
                place,
                i + 1
            )
        })
        .collect()
}
