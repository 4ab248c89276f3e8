//! Category naming through a chat-completion endpoint, with offline fallback.
//!
//! For each aspect the client sends one request carrying the prompt template,
//! the candidate category list and the aspect's top terms, and expects a
//! single category string back. Failures degrade gracefully: an offline
//! mapping file is applied when present, otherwise the placeholder
//! `aspect_{k}` names are kept and the outcome is marked degraded. Every
//! request/response is appended to an audit log.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::lexicon::{AspectLexicon, Provenance};

/// Default prompt, mirroring the aspect-categorization instructions: pick
/// from the candidate list, or propose a new category when nothing fits.
pub const DEFAULT_PROMPT_TEMPLATE: &str = "Refer to the given aspect term list and select the most appropriate aspect category.\nTry to match it with the aspect category list below, but if no suitable match is found, you may suggest a new category.\nAnswer with the category name only.";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamingClientConfig {
    /// Chat-completion style endpoint URL; `None` disables the service path.
    pub endpoint: Option<String>,
    /// Environment variable holding the bearer token, if any.
    pub auth_env: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub max_retries: usize,
    pub timeout_secs: u64,
}

impl Default for NamingClientConfig {
    fn default() -> Self {
        NamingClientConfig {
            endpoint: None,
            auth_env: None,
            model: "gpt-3.5-turbo".into(),
            temperature: 0.0,
            max_retries: 3,
            timeout_secs: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NamingStatus {
    /// Every aspect was named through the requested path.
    Complete,
    /// At least one aspect fell back to the mapping file or a placeholder.
    Degraded,
}

#[derive(Debug, Clone)]
pub struct NamingOutcome {
    pub status: NamingStatus,
    /// Aspects whose returned name is not in the candidate list.
    pub novel: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Offline mapping file: JSON object of aspect index to category name,
/// e.g. `{"0": "View", "1": "Service"}`.
pub fn load_mapping(path: &Path) -> Result<BTreeMap<usize, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: BTreeMap<String, String> = serde_json::from_str(&text)?;
    let mut out = BTreeMap::new();
    for (key, name) in raw {
        let index: usize = key.parse().map_err(|_| Error::Format {
            what: "category mapping".into(),
            path: path.to_path_buf(),
            detail: format!("key {key:?} is not an aspect index"),
        })?;
        out.insert(index, name);
    }
    Ok(out)
}

fn build_prompt(template: &str, candidates: &[String], terms: &[String]) -> String {
    format!(
        "{template}\n\nAspect Category Candidates: {}\n\nAspect Terms: {}",
        candidates.join(", "),
        terms.join(", ")
    )
}

/// A usable category string from the raw response content, or `None` when
/// the response is malformed (empty or multi-line).
fn parse_category(content: &str) -> Option<String> {
    let trimmed = content
        .trim()
        .trim_end_matches('.')
        .trim_matches(|c| c == '"' || c == '\'')
        .trim();
    if trimmed.is_empty() || trimmed.lines().count() != 1 {
        return None;
    }
    Some(trimmed.to_owned())
}

enum ServiceError {
    /// Connection, auth or transport failure: the endpoint is unusable.
    Unreachable(String),
    /// The endpoint answered but never produced a parseable category.
    Malformed(String),
}

struct ServiceClient {
    agent: ureq::Agent,
    endpoint: String,
    token: Option<String>,
    model: String,
    temperature: f64,
    max_retries: usize,
}

impl ServiceClient {
    fn request_name(
        &self,
        prompt: &str,
        aspect: usize,
        audit: &mut AuditLog,
    ) -> std::result::Result<String, ServiceError> {
        let body = json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut last_malformed = String::new();
        for attempt in 1..=self.max_retries.max(1) {
            let mut request = self.agent.post(&self.endpoint);
            if let Some(token) = &self.token {
                request = request.header("authorization", format!("Bearer {token}"));
            }
            match request.send_json(&body) {
                Err(e) => {
                    audit.record(aspect, attempt, &body, &format!("transport error: {e}"));
                    return Err(ServiceError::Unreachable(e.to_string()));
                }
                Ok(mut response) => {
                    let status = response.status();
                    let text = response
                        .body_mut()
                        .read_to_string()
                        .unwrap_or_else(|e| format!("<unreadable body: {e}>"));
                    audit.record(aspect, attempt, &body, &text);
                    if status.as_u16() == 401 || status.as_u16() == 403 {
                        return Err(ServiceError::Unreachable(format!("auth failure: {status}")));
                    }
                    if !status.is_success() {
                        last_malformed = format!("status {status}");
                        continue;
                    }
                    let content = serde_json::from_str::<serde_json::Value>(&text)
                        .ok()
                        .and_then(|v| {
                            v["choices"][0]["message"]["content"].as_str().map(str::to_owned)
                        });
                    match content.as_deref().and_then(parse_category) {
                        Some(name) => return Ok(name),
                        None => {
                            last_malformed = format!("unparseable response: {text:.100}");
                            continue;
                        }
                    }
                }
            }
        }
        Err(ServiceError::Malformed(last_malformed))
    }
}

struct AuditLog {
    file: Option<std::fs::File>,
}

impl AuditLog {
    fn open(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?,
            ),
            None => None,
        };
        Ok(AuditLog { file })
    }

    fn record(&mut self, aspect: usize, attempt: usize, request: &serde_json::Value, response: &str) {
        if let Some(file) = &mut self.file {
            let line = json!({
                "aspect": aspect,
                "attempt": attempt,
                "request": request,
                "response": response,
            });
            let _ = writeln!(file, "{line}");
        }
    }
}

/// Assign human-readable category names to every aspect.
///
/// The service path runs when `client.endpoint` is set; otherwise the mapping
/// file is applied directly. On service failure the mapping file (if any)
/// takes over, else the placeholder names survive. The lexicon is updated in
/// place and the outcome reports degradation and novel names.
pub fn name_categories(
    lexicon: &mut AspectLexicon,
    prompt_template: &str,
    candidates: &[String],
    client: &NamingClientConfig,
    mapping_file: Option<&Path>,
    audit_log: Option<&Path>,
) -> Result<NamingOutcome> {
    if client.endpoint.is_none() && mapping_file.is_none() {
        return Err(Error::Config(
            "category naming needs an endpoint or an offline mapping file".into(),
        ));
    }

    let mapping = match mapping_file {
        Some(path) => Some(load_mapping(path)?),
        None => None,
    };

    let mut outcome = NamingOutcome {
        status: NamingStatus::Complete,
        novel: Vec::new(),
        warnings: Vec::new(),
    };

    // Offline-only path.
    let Some(endpoint) = client.endpoint.clone() else {
        apply_mapping(lexicon, mapping.as_ref().expect("checked above"), &mut outcome);
        return Ok(outcome);
    };

    let token = match &client.auth_env {
        Some(var) => match std::env::var(var) {
            Ok(value) => Some(value),
            Err(_) => {
                outcome
                    .warnings
                    .push(format!("auth env var {var} is not set; falling back"));
                fall_back(lexicon, mapping.as_ref(), &mut outcome);
                return Ok(outcome);
            }
        },
        None => None,
    };

    let agent = ureq::Agent::new_with_config(
        ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(client.timeout_secs)))
            .http_status_as_error(false)
            .build(),
    );
    let service = ServiceClient {
        agent,
        endpoint,
        token,
        model: client.model.clone(),
        temperature: client.temperature,
        max_retries: client.max_retries,
    };
    let mut audit = AuditLog::open(audit_log)?;

    let mut unreachable = false;
    for i in 0..lexicon.aspects.len() {
        if unreachable {
            break;
        }
        let terms: Vec<String> = lexicon.aspects[i]
            .terms
            .iter()
            .take(30)
            .map(|t| t.token.clone())
            .collect();
        let prompt = build_prompt(prompt_template, candidates, &terms);
        match service.request_name(&prompt, i, &mut audit) {
            Ok(name) => {
                if !candidates.iter().any(|c| c.eq_ignore_ascii_case(&name)) {
                    outcome.novel.push(i);
                }
                lexicon.aspects[i].category_name = name;
                lexicon.aspects[i].provenance = Provenance::LlmNamed;
            }
            Err(ServiceError::Unreachable(detail)) => {
                outcome
                    .warnings
                    .push(format!("naming endpoint unreachable: {detail}"));
                unreachable = true;
            }
            Err(ServiceError::Malformed(detail)) => {
                outcome
                    .warnings
                    .push(format!("aspect {i}: no usable response ({detail})"));
                outcome.status = NamingStatus::Degraded;
                if let Some(map) = &mapping {
                    if let Some(name) = map.get(&i) {
                        lexicon.aspects[i].category_name = name.clone();
                        lexicon.aspects[i].provenance = Provenance::HumanEdited;
                    }
                }
            }
        }
    }
    if unreachable {
        fall_back(lexicon, mapping.as_ref(), &mut outcome);
    }
    Ok(outcome)
}

/// Apply the mapping file to aspects that still carry automatic names.
fn fall_back(
    lexicon: &mut AspectLexicon,
    mapping: Option<&BTreeMap<usize, String>>,
    outcome: &mut NamingOutcome,
) {
    outcome.status = NamingStatus::Degraded;
    if let Some(map) = mapping {
        apply_mapping(lexicon, map, outcome);
    }
}

fn apply_mapping(
    lexicon: &mut AspectLexicon,
    mapping: &BTreeMap<usize, String>,
    outcome: &mut NamingOutcome,
) {
    for aspect in &mut lexicon.aspects {
        if aspect.provenance == Provenance::LlmNamed {
            continue;
        }
        match mapping.get(&aspect.index) {
            Some(name) => {
                aspect.category_name = name.clone();
                aspect.provenance = Provenance::HumanEdited;
            }
            None => outcome
                .warnings
                .push(format!("mapping file has no entry for aspect {}", aspect.index)),
        }
    }
}
