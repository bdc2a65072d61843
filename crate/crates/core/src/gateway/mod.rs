//! Uniform access to the debate roles and the policy model.
//!
//! A backend only has to turn a prompt into raw text ([`ModelBackend::complete`]);
//! verdict parsing, re-instruction on malformed replies and the retry budget
//! live here so that scripted and remote backends behave identically.

pub mod prompt;
pub mod remote;
pub mod scripted;
pub mod verdict;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dataset::AdSample;
use crate::policy::{PolicyClause, PolicyError, PolicyRegistry};
use crate::PolicyKey;

pub use prompt::{build_policy_prompt, build_prompt, PromptContext};
pub use verdict::{parse_verdict, parse_verdict_with, ParsedVerdict, Verdict, VerdictError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Prosecutor,
    Defender,
    Skeptic,
    Umpire,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Prosecutor, Role::Defender, Role::Skeptic, Role::Umpire];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Prosecutor => "Prosecutor",
            Role::Defender => "Defender",
            Role::Skeptic => "Skeptic",
            Role::Umpire => "Umpire",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s.trim()))
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One parsed agent turn. Equality ignores latency.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentReply {
    pub role: Role,
    pub verdicts: BTreeMap<PolicyKey, Verdict>,
    pub cot: String,
    pub raw: String,
    /// Wall-clock time of the successful attempt; not persisted.
    #[serde(skip)]
    pub latency: Duration,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl PartialEq for AgentReply {
    fn eq(&self, other: &Self) -> bool {
        self.role == other.role
            && self.verdicts == other.verdicts
            && self.cot == other.cot
            && self.raw == other.raw
            && self.warnings == other.warnings
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModelOutput {
    pub labels: BTreeMap<PolicyKey, u8>,
    /// Absent when the backend only returns verdicts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<BTreeMap<PolicyKey, f64>>,
    pub cot: String,
}

impl PolicyModelOutput {
    pub fn positives(&self) -> Vec<PolicyKey> {
        self.labels
            .iter()
            .filter(|(_, &v)| v == 1)
            .map(|(k, _)| k.clone())
            .collect()
    }
}

/// A policy-model response drawn for a rollout group.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledResponse {
    pub labels: BTreeMap<PolicyKey, u8>,
    pub cot: String,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("umpire prompt needs at least one argument")]
    UmpireWithoutArguments,
    #[error("environment variable {0} with the API key is not set")]
    MissingAuth(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed reply after {attempts} attempt(s): {source}")]
    Malformed {
        attempts: u32,
        #[source]
        source: VerdictError,
    },
    #[error("reply is missing verdicts for {0:?}")]
    MissingKeys(Vec<PolicyKey>),
    #[error("model returned {got} dimensions, version has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

impl GatewayError {
    /// Errors worth another attempt within the retry budget.
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Timeout(_) | GatewayError::Transport(_) => true,
            GatewayError::Http { status, .. } => *status == 429 || *status >= 500,
            GatewayError::Malformed { .. } | GatewayError::MissingKeys(_) => true,
            _ => false,
        }
    }
}

/// A model endpoint.
pub trait ModelBackend: Send + Sync {
    fn name(&self) -> &str;

    /// One round trip: prompt in, raw reply out.
    fn complete(&self, prompt: &str) -> Result<String, GatewayError>;

    /// Extra attempts allowed after the first one.
    fn max_retries(&self) -> u32 {
        0
    }

    /// Scores `sample` on `policies`. The default asks for a verdict line and
    /// therefore reports no probabilities.
    fn predict(&self, sample: &AdSample, policies: &[PolicyClause]) -> Result<PolicyModelOutput, GatewayError> {
        let keys: Vec<PolicyKey> = policies.iter().map(|c| c.id.clone()).collect();
        let prompt = build_policy_prompt(sample, policies, None, false);
        let parsed = complete_with_retries(self, &prompt, &keys, false)?.0;
        Ok(PolicyModelOutput {
            labels: parsed.verdicts.iter().map(|(k, v)| (k.clone(), v.label())).collect(),
            probabilities: None,
            cot: parsed.cot,
        })
    }
}

fn complete_with_retries<B: ModelBackend + ?Sized>(
    backend: &B,
    prompt: &str,
    keys: &[PolicyKey],
    allow_empty_cot: bool,
) -> Result<(ParsedVerdict, String), GatewayError> {
    let budget = backend.max_retries();
    let mut attempt = 0u32;
    let mut current = prompt.to_string();
    loop {
        attempt += 1;
        let outcome = backend.complete(&current).and_then(|raw| {
            let mut parsed = parse_verdict_with(&raw, allow_empty_cot).map_err(|source| {
                GatewayError::Malformed {
                    attempts: attempt,
                    source,
                }
            })?;
            let missing: Vec<PolicyKey> = keys
                .iter()
                .filter(|k| !parsed.verdicts.contains_key(*k))
                .cloned()
                .collect();
            if !missing.is_empty() {
                return Err(GatewayError::MissingKeys(missing));
            }
            let extra: Vec<PolicyKey> = parsed
                .verdicts
                .keys()
                .filter(|k| !keys.contains(k))
                .cloned()
                .collect();
            for k in extra {
                parsed.verdicts.remove(&k);
                parsed.warnings.push(format!("dropped verdict for unqueried key {k}"));
            }
            Ok((parsed, raw))
        });
        match outcome {
            Ok(ok) => return Ok(ok),
            Err(e) if e.is_retryable() && attempt <= budget => {
                log::warn!("{}: attempt {attempt} failed ({e}); retrying", backend.name());
                if matches!(e, GatewayError::Malformed { .. } | GatewayError::MissingKeys(_)) {
                    current = format!("{prompt}{}", prompt::reinstruction_suffix(keys));
                }
            }
            Err(GatewayError::Malformed { source, .. }) => {
                return Err(GatewayError::Malformed {
                    attempts: attempt,
                    source,
                })
            }
            Err(e) => return Err(e),
        }
    }
}

/// Sends `prompt` to `backend` as `role` and parses the reply.
///
/// `keys` are the policies the prompt asks about; every one must receive a
/// verdict. `labels_only` accepts replies without reasoning.
pub fn invoke_agent(
    role: Role,
    prompt: &str,
    keys: &[PolicyKey],
    backend: &dyn ModelBackend,
    labels_only: bool,
) -> Result<AgentReply, GatewayError> {
    let started = Instant::now();
    let (parsed, raw) = complete_with_retries(backend, prompt, keys, labels_only)?;
    Ok(AgentReply {
        role,
        verdicts: parsed.verdicts,
        cot: parsed.cot,
        raw,
        latency: started.elapsed(),
        warnings: parsed.warnings,
    })
}

/// Runs the policy model over every active dimension of `version`.
pub fn predict(
    sample: &AdSample,
    registry: &PolicyRegistry,
    version: &str,
    backend: &dyn ModelBackend,
) -> Result<PolicyModelOutput, GatewayError> {
    let dims = registry.active_dimensions(version)?;
    let clauses: Vec<PolicyClause> = dims.iter().filter_map(|k| registry.clause(k)).collect();
    let out = backend.predict(sample, &clauses)?;
    let shape_ok = out.labels.len() == dims.len()
        && dims.iter().all(|k| out.labels.contains_key(k))
        && out
            .probabilities
            .as_ref()
            .is_none_or(|p| p.len() == dims.len() && dims.iter().all(|k| p.contains_key(k)));
    if !shape_ok {
        return Err(GatewayError::DimensionMismatch {
            expected: dims.len(),
            got: out.labels.len(),
        });
    }
    Ok(out)
}

/// Draws `n` policy-model responses for a rollout group.
pub fn sample_responses(
    sample: &AdSample,
    policies: &[PolicyClause],
    n: usize,
    backend: &dyn ModelBackend,
    labels_only: bool,
) -> Result<Vec<SampledResponse>, GatewayError> {
    let keys: Vec<PolicyKey> = policies.iter().map(|c| c.id.clone()).collect();
    (0..n)
        .map(|i| {
            let prompt = build_policy_prompt(sample, policies, Some(i), labels_only);
            let (parsed, _) = complete_with_retries(backend, &prompt, &keys, labels_only)?;
            Ok(SampledResponse {
                labels: parsed.verdicts.iter().map(|(k, v)| (k.clone(), v.label())).collect(),
                cot: if labels_only { String::new() } else { parsed.cot },
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Scripted,
    Remote,
}

fn default_auth_env() -> String {
    "ARGUS_API_KEY".to_string()
}
fn default_max_tokens() -> u32 {
    1024
}
fn default_timeout() -> u64 {
    60
}
fn default_retries() -> u32 {
    2
}
fn default_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default = "default_auth_env")]
    pub auth_env_var: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    /// Scripted only: scorer weights to load instead of the full fixture table.
    #[serde(default)]
    pub cue_model_path: Option<PathBuf>,
}

impl BackendConfig {
    pub fn scripted(seed: u64) -> Self {
        BackendConfig {
            kind: BackendKind::Scripted,
            endpoint_url: None,
            model_name: None,
            auth_env_var: default_auth_env(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            seed: Some(seed),
            max_concurrency: default_concurrency(),
            cue_model_path: None,
        }
    }

    pub fn remote(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        BackendConfig {
            kind: BackendKind::Remote,
            endpoint_url: Some(endpoint_url.into()),
            model_name: Some(model_name.into()),
            seed: None,
            ..BackendConfig::scripted(0)
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::Config(m.to_string()));
        match self.kind {
            BackendKind::Remote => {
                if self.endpoint_url.as_deref().is_none_or(str::is_empty) {
                    return bad("remote backend needs endpoint_url");
                }
                if self.model_name.as_deref().is_none_or(str::is_empty) {
                    return bad("remote backend needs model_name");
                }
            }
            BackendKind::Scripted => {
                if self.seed.is_none() {
                    return bad("scripted backend needs seed");
                }
            }
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return bad("temperature must be >= 0");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        if self.timeout_secs == 0 {
            return bad("timeout_secs must be positive");
        }
        if self.max_concurrency == 0 {
            return bad("max_concurrency must be positive");
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Arc<dyn ModelBackend>, GatewayError> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Scripted => {
                let model = match &self.cue_model_path {
                    Some(p) => scripted::CueModel::load(p)
                        .map_err(|e| GatewayError::Config(format!("{}: {e}", p.display())))?,
                    None => scripted::CueModel::fixture(),
                };
                Arc::new(scripted::ScriptedBackend::new(self.seed.unwrap_or_default(), Arc::new(model)))
            }
            BackendKind::Remote => Arc::new(remote::RemoteBackend::new(self.clone())?),
        })
    }
}

/// Backend configuration per role, as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleBackendsConfig {
    pub prosecutor: BackendConfig,
    pub defender: BackendConfig,
    pub skeptic: BackendConfig,
    pub umpire: BackendConfig,
    pub policy: BackendConfig,
}

impl RoleBackendsConfig {
    pub fn uniform(config: BackendConfig) -> Self {
        RoleBackendsConfig {
            prosecutor: config.clone(),
            defender: config.clone(),
            skeptic: config.clone(),
            umpire: config.clone(),
            policy: config,
        }
    }

    pub fn build(&self) -> Result<RoleBackends, GatewayError> {
        Ok(RoleBackends {
            prosecutor: self.prosecutor.build()?,
            defender: self.defender.build()?,
            skeptic: self.skeptic.build()?,
            umpire: self.umpire.build()?,
            policy: self.policy.build()?,
        })
    }
}

#[derive(Clone)]
pub struct RoleBackends {
    pub prosecutor: Arc<dyn ModelBackend>,
    pub defender: Arc<dyn ModelBackend>,
    pub skeptic: Arc<dyn ModelBackend>,
    pub umpire: Arc<dyn ModelBackend>,
    /// The production policy model f.
    pub policy: Arc<dyn ModelBackend>,
}

impl RoleBackends {
    pub fn uniform(backend: Arc<dyn ModelBackend>) -> Self {
        RoleBackends {
            prosecutor: backend.clone(),
            defender: backend.clone(),
            skeptic: backend.clone(),
            umpire: backend.clone(),
            policy: backend,
        }
    }

    pub fn for_role(&self, role: Role) -> &Arc<dyn ModelBackend> {
        match role {
            Role::Prosecutor => &self.prosecutor,
            Role::Defender => &self.defender,
            Role::Skeptic => &self.skeptic,
            Role::Umpire => &self.umpire,
        }
    }
}

impl std::fmt::Debug for RoleBackends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RoleBackends")
            .field("prosecutor", &self.prosecutor.name())
            .field("defender", &self.defender.name())
            .field("skeptic", &self.skeptic.name())
            .field("umpire", &self.umpire.name())
            .field("policy", &self.policy.name())
            .finish()
    }
}
