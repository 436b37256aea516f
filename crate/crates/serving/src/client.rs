use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use opd_core::{Prompt, TokenId};

use crate::error::{Result, ServingError};
use crate::routing::{RoundRobin, RoutingTable};
use crate::wire::{ErrorBody, ScoreRequest, ScoreResponse};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientConfig {
    /// Per-attempt timeout.
    pub timeout: Duration,
    /// Seeds the per-pool rotation order.
    pub seed: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(5),
            seed: 0,
        }
    }
}

/// Blocking scoring client shared freely between threads.
pub struct TeacherClient {
    table: RoutingTable,
    rotations: BTreeMap<String, RoundRobin>,
    http: reqwest::blocking::Client,
    retries: AtomicU64,
    attempts: Mutex<BTreeMap<String, u64>>,
}

impl TeacherClient {
    pub fn new(table: RoutingTable, config: ClientConfig) -> Result<Self> {
        table.validate()?;
        let mut rotations = BTreeMap::new();
        for (teacher, pool) in &table.pools {
            if !pool.is_empty() {
                rotations.insert(teacher.clone(), RoundRobin::new(pool.clone(), config.seed)?);
            }
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ServingError::Config(e.to_string()))?;
        Ok(Self {
            table,
            rotations,
            http,
            retries: AtomicU64::new(0),
            attempts: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn table(&self) -> &RoutingTable {
        &self.table
    }

    pub fn rotation(&self, teacher: &str) -> Option<&RoundRobin> {
        self.rotations.get(teacher)
    }

    /// Failovers performed so far.
    pub fn retry_count(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }

    /// Attempts issued per endpoint so far.
    pub fn attempts_per_endpoint(&self) -> BTreeMap<String, u64> {
        self.attempts.lock().expect("attempt counter").clone()
    }

    /// Teacher log-probs of `response` for `prompt`, via the routed pool.
    pub fn score_remote(&self, prompt: &Prompt, response: &[TokenId]) -> Result<Vec<f64>> {
        let teacher = self.table.teacher_for(&prompt.domain)?;
        let rotation = &self.rotations[teacher];
        let request = ScoreRequest {
            prompt_tokens: prompt.tokens.clone(),
            response_tokens: response.to_vec(),
        };
        let mut last_error = String::new();
        for attempt in 0..rotation.len() {
            if attempt > 0 {
                self.retries.fetch_add(1, Ordering::Relaxed);
            }
            let endpoint = rotation.next_endpoint();
            *self
                .attempts
                .lock()
                .expect("attempt counter")
                .entry(endpoint.to_string())
                .or_default() += 1;
            match self
                .http
                .post(format!("http://{endpoint}/v1/score"))
                .json(&request)
                .send()
            {
                Ok(reply) => return decode(endpoint, reply, response.len()),
                Err(e) => last_error = format!("{endpoint}: {e}"),
            }
        }
        Err(ServingError::EnsembleUnavailable {
            teacher: teacher.to_string(),
            attempts: rotation.len(),
            last_error,
        })
    }
}

fn decode(endpoint: &str, reply: reqwest::blocking::Response, expected: usize) -> Result<Vec<f64>> {
    let status = reply.status();
    let body = reply.bytes().map_err(|e| ServingError::Response {
        endpoint: endpoint.to_string(),
        message: e.to_string(),
    })?;
    if !status.is_success() {
        let message = serde_json::from_slice::<ErrorBody>(&body)
            .map(|b| b.error)
            .unwrap_or_else(|_| String::from_utf8_lossy(&body).into_owned());
        return Err(ServingError::Request {
            endpoint: endpoint.to_string(),
            status: status.as_u16(),
            message,
        });
    }
    let parsed: ScoreResponse = serde_json::from_slice(&body).map_err(|e| ServingError::Response {
        endpoint: endpoint.to_string(),
        message: e.to_string(),
    })?;
    if parsed.token_logprobs.len() != expected {
        return Err(ServingError::Response {
            endpoint: endpoint.to_string(),
            message: format!("expected {expected} log-probs, got {}", parsed.token_logprobs.len()),
        });
    }
    if let Some(bad) = parsed.token_logprobs.iter().find(|v| !v.is_finite() || **v > 0.0) {
        return Err(ServingError::Response {
            endpoint: endpoint.to_string(),
            message: format!("invalid log-prob {bad}"),
        });
    }
    Ok(parsed.token_logprobs)
}
