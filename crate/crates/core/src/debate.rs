//! Multi-agent dialectic: conflict and latent-candidate selection, the
//! bilateral (prosecutor / defender) and tripartite (plus skeptic) debates,
//! and umpire adjudication.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::dataset::{AdSample, LabeledSample, ProvenanceStage};
use crate::gateway::{
    build_prompt, invoke_agent, AgentReply, GatewayError, PolicyModelOutput, PromptContext, Role,
    RoleBackends,
};
use crate::jsonl::{self, JsonlError};
use crate::policy::{PolicyClause, PolicyError, PolicyRegistry};
use crate::retrieval::{Evidence, EvidenceIndex, DEFAULT_CLAUSE_HITS, DEFAULT_EXEMPLAR_HITS};
use crate::PolicyKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    II,
    III,
}

impl Stage {
    pub fn provenance(self) -> ProvenanceStage {
        match self {
            Stage::II => ProvenanceStage::II,
            Stage::III => ProvenanceStage::III,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::II => "II",
            Stage::III => "III",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "II" | "2" => Ok(Stage::II),
            "III" | "3" => Ok(Stage::III),
            other => Err(format!("unknown stage {other:?} (expected II or III)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Scope {
    #[default]
    ConflictsOnly,
    AllHistorical,
}

impl std::str::FromStr for Stage2Scope {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conflicts_only" => Ok(Stage2Scope::ConflictsOnly),
            "all_historical" => Ok(Stage2Scope::AllHistorical),
            other => Err(format!("unknown scope {other:?}")),
        }
    }
}

fn yes() -> bool {
    true
}
fn default_tau() -> f64 {
    0.7
}
fn default_workers() -> usize {
    4
}
fn default_clause_hits() -> usize {
    DEFAULT_CLAUSE_HITS
}
fn default_exemplar_hits() -> usize {
    DEFAULT_EXEMPLAR_HITS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebateConfig {
    #[serde(default = "yes")]
    pub enable_prosecutor: bool,
    #[serde(default = "yes")]
    pub enable_defender: bool,
    #[serde(default = "yes")]
    pub enable_skeptic: bool,
    /// Agents return verdicts without reasoning.
    #[serde(default)]
    pub labels_only: bool,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub stage2_scope: Stage2Scope,
    /// Width of the per-sample worker pool.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_clause_hits")]
    pub clause_hits: usize,
    #[serde(default = "default_exemplar_hits")]
    pub exemplar_hits: usize,
}

impl Default for DebateConfig {
    fn default() -> Self {
        DebateConfig {
            enable_prosecutor: true,
            enable_defender: true,
            enable_skeptic: true,
            labels_only: false,
            tau: default_tau(),
            stage2_scope: Stage2Scope::ConflictsOnly,
            workers: default_workers(),
            clause_hits: DEFAULT_CLAUSE_HITS,
            exemplar_hits: DEFAULT_EXEMPLAR_HITS,
        }
    }
}

impl DebateConfig {
    pub fn validate(&self) -> Result<(), DebateError> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(DebateError::InvalidConfig(format!("tau {} outside [0, 1]", self.tau)));
        }
        if !self.enable_prosecutor && !self.enable_defender {
            return Err(DebateError::InvalidConfig(
                "at least one of prosecutor and defender must be enabled".into(),
            ));
        }
        if self.workers == 0 {
            return Err(DebateError::InvalidConfig("workers must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscriptStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebateTranscript {
    pub transcript_id: String,
    pub sample_id: String,
    pub stage: Stage,
    pub policy_version: String,
    /// Policies the debate was asked about.
    pub keys: Vec<PolicyKey>,
    /// Prosecutor, then defender, then skeptic, as enabled.
    pub replies: Vec<AgentReply>,
    pub evidence: Vec<Evidence>,
    pub status: TranscriptStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub labels_only: bool,
}

impl DebateTranscript {
    pub fn reply(&self, role: Role) -> Option<&AgentReply> {
        self.replies.iter().find(|r| r.role == role)
    }
}

/// The umpire's ruling: rectified labels and the standardized rationale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adjudication {
    pub adjudication_id: String,
    pub sample_id: String,
    pub policy_version: String,
    pub stage: Stage,
    pub rectified_labels: BTreeMap<PolicyKey, u8>,
    pub rationale: String,
    pub cited_clause_ids: Vec<String>,
    pub umpire_raw: String,
}

#[derive(Debug, thiserror::Error)]
pub enum DebateError {
    #[error("invalid debate config: {0}")]
    InvalidConfig(String),
    #[error("no prediction for sample {0}")]
    MissingPrediction(String),
    #[error("sample {0} has no probability for the requested policy; latent mining needs probabilities")]
    ProbabilitiesAbsent(String),
    #[error("transcript {0} failed; nothing to adjudicate")]
    FailedTranscript(String),
    #[error("adjudication of {sample_id} unresolved: {reason}")]
    Unresolved { sample_id: String, reason: String },
    #[error("policy {0} is not an active dimension")]
    UnknownKey(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Records(#[from] JsonlError),
}

/// Samples whose stored labels disagree with the model on any of `delta_keys`
/// (or every sample, for [`Stage2Scope::AllHistorical`]). Input order is kept.
pub fn select_conflicts(
    hist: &[LabeledSample],
    predictions: &HashMap<String, PolicyModelOutput>,
    delta_keys: &[PolicyKey],
    scope: Stage2Scope,
) -> Result<Vec<String>, DebateError> {
    let mut out = Vec::new();
    for s in hist {
        let pred = predictions
            .get(&s.sample_id)
            .ok_or_else(|| DebateError::MissingPrediction(s.sample_id.clone()))?;
        let disagrees = delta_keys
            .iter()
            .any(|k| pred.labels.get(k).copied().unwrap_or(0) != s.vector.label(k));
        if scope == Stage2Scope::AllHistorical || disagrees {
            out.push(s.sample_id.clone());
        }
    }
    Ok(out)
}

/// Samples currently labeled 0 on `key` whose probability of violating it is
/// strictly above `tau`. Probabilities are read from each sample's vector.
pub fn select_latent(samples: &[LabeledSample], key: &str, tau: f64) -> Result<Vec<String>, DebateError> {
    let mut out = Vec::new();
    for s in samples {
        let p = s
            .vector
            .probability(key)
            .ok_or_else(|| DebateError::ProbabilitiesAbsent(s.sample_id.clone()))?;
        if s.vector.label(key) == 0 && p > tau {
            out.push(s.sample_id.clone());
        }
    }
    Ok(out)
}

/// Clause ids of the form `P<digits>` mentioned in `text` that are registered,
/// in order of first mention.
pub fn cited_clauses(text: &str, registry: &PolicyRegistry) -> Vec<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\bP\d+\b").expect("valid regex"));
    let mut out: Vec<String> = Vec::new();
    for m in re.find_iter(text) {
        let id = m.as_str();
        if registry.contains(id) && !out.iter().any(|o| o == id) {
            out.push(id.to_string());
        }
    }
    out
}

/// Result of debating one sample.
#[derive(Debug, Clone)]
pub struct DebateOutcome {
    pub transcript: DebateTranscript,
    /// `None` when the transcript failed.
    pub adjudication: Option<Result<Adjudication, String>>,
}

impl DebateOutcome {
    pub fn resolved(&self) -> Option<&Adjudication> {
        self.adjudication.as_ref().and_then(|a| a.as_ref().ok())
    }
}

pub struct DebateEngine {
    registry: Arc<PolicyRegistry>,
    backends: RoleBackends,
    index: Arc<EvidenceIndex>,
    config: DebateConfig,
    pool: rayon::ThreadPool,
}

impl DebateEngine {
    pub fn new(
        registry: Arc<PolicyRegistry>,
        backends: RoleBackends,
        index: Arc<EvidenceIndex>,
        config: DebateConfig,
    ) -> Result<Self, DebateError> {
        config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .thread_name(|i| format!("debate-{i}"))
            .build()
            .map_err(|e| DebateError::InvalidConfig(e.to_string()))?;
        Ok(DebateEngine {
            registry,
            backends,
            index,
            config,
            pool,
        })
    }

    pub fn config(&self) -> &DebateConfig {
        &self.config
    }

    fn clauses(&self, version: &str, keys: &[PolicyKey]) -> Result<Vec<PolicyClause>, DebateError> {
        let dims = self.registry.active_dimensions(version)?;
        keys.iter()
            .map(|k| {
                if !dims.contains(k) {
                    return Err(DebateError::UnknownKey(k.clone()));
                }
                self.registry.clause(k).ok_or_else(|| DebateError::UnknownKey(k.clone()))
            })
            .collect()
    }

    /// Prosecutor and defender, invoked concurrently.
    pub fn bilateral_debate(
        &self,
        sample: &AdSample,
        version: &str,
        keys: &[PolicyKey],
    ) -> Result<DebateTranscript, DebateError> {
        self.debate(sample, version, keys, Stage::II)
    }

    /// As [`Self::bilateral_debate`] plus the skeptic, when enabled.
    pub fn tripartite_debate(
        &self,
        sample: &AdSample,
        version: &str,
        keys: &[PolicyKey],
    ) -> Result<DebateTranscript, DebateError> {
        self.debate(sample, version, keys, Stage::III)
    }

    fn debate(
        &self,
        sample: &AdSample,
        version: &str,
        keys: &[PolicyKey],
        stage: Stage,
    ) -> Result<DebateTranscript, DebateError> {
        let clauses = self.clauses(version, keys)?;
        let evidence = self.index.retrieve_evidence(
            &sample.content_text(),
            self.config.clause_hits,
            self.config.exemplar_hits,
        );
        let mut roles = Vec::new();
        if self.config.enable_prosecutor {
            roles.push(Role::Prosecutor);
        }
        if self.config.enable_defender {
            roles.push(Role::Defender);
        }
        if stage == Stage::III && self.config.enable_skeptic {
            roles.push(Role::Skeptic);
        }
        let ctx = PromptContext {
            sample,
            policies: &clauses,
            evidence: &evidence,
            arguments: &[],
            labels_only: self.config.labels_only,
        };
        let results: Vec<Result<AgentReply, GatewayError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = roles
                .iter()
                .map(|&role| {
                    let ctx = &ctx;
                    let backend = self.backends.for_role(role).clone();
                    scope.spawn(move || {
                        let prompt = build_prompt(role, ctx)?;
                        invoke_agent(role, &prompt, keys, backend.as_ref(), ctx.labels_only)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(GatewayError::Transport("agent thread panicked".into())))
                })
                .collect()
        });
        let mut replies = Vec::with_capacity(results.len());
        let mut error = None;
        for (role, r) in roles.iter().zip(results) {
            match r {
                Ok(reply) => replies.push(reply),
                Err(e) => {
                    log::warn!("{} failed on sample {}: {e}", role, sample.id);
                    error.get_or_insert_with(|| format!("{role}: {e}"));
                }
            }
        }
        Ok(DebateTranscript {
            transcript_id: format!("tx-{stage}-{}", sample.id),
            sample_id: sample.id.clone(),
            stage,
            policy_version: version.to_string(),
            keys: keys.to_vec(),
            replies,
            evidence,
            status: if error.is_some() {
                TranscriptStatus::Failed
            } else {
                TranscriptStatus::Ok
            },
            error,
            labels_only: self.config.labels_only,
        })
    }

    /// Invokes the umpire on all replies of `transcript` with its evidence.
    pub fn adjudicate(&self, sample: &AdSample, transcript: &DebateTranscript) -> Result<Adjudication, DebateError> {
        if transcript.status == TranscriptStatus::Failed || transcript.replies.is_empty() {
            return Err(DebateError::FailedTranscript(transcript.transcript_id.clone()));
        }
        let clauses = self.clauses(&transcript.policy_version, &transcript.keys)?;
        let ctx = PromptContext {
            sample,
            policies: &clauses,
            evidence: &transcript.evidence,
            arguments: &transcript.replies,
            labels_only: transcript.labels_only,
        };
        let unresolved = |reason: String| DebateError::Unresolved {
            sample_id: sample.id.clone(),
            reason,
        };
        let prompt = build_prompt(Role::Umpire, &ctx).map_err(|e| unresolved(e.to_string()))?;
        let reply = invoke_agent(
            Role::Umpire,
            &prompt,
            &transcript.keys,
            self.backends.umpire.as_ref(),
            false,
        )
        .map_err(|e| unresolved(e.to_string()))?;
        Ok(Adjudication {
            adjudication_id: format!("adj-{}-{}", transcript.stage, sample.id),
            sample_id: sample.id.clone(),
            policy_version: transcript.policy_version.clone(),
            stage: transcript.stage,
            rectified_labels: reply.verdicts.iter().map(|(k, v)| (k.clone(), v.label())).collect(),
            cited_clause_ids: cited_clauses(&reply.cot, &self.registry),
            rationale: reply.cot,
            umpire_raw: reply.raw,
        })
    }

    /// Debates and adjudicates every item on the worker pool. Output order
    /// matches input order regardless of completion order.
    pub fn run_batch(
        &self,
        items: &[(AdSample, Vec<PolicyKey>)],
        version: &str,
        stage: Stage,
    ) -> Result<Vec<DebateOutcome>, DebateError> {
        self.pool.install(|| {
            items
                .par_iter()
                .map(|(sample, keys)| {
                    let transcript = self.debate(sample, version, keys, stage)?;
                    let adjudication = if transcript.status == TranscriptStatus::Ok {
                        let a = self.adjudicate(sample, &transcript).map_err(|e| {
                            log::warn!("{e}");
                            e.to_string()
                        });
                        Some(a)
                    } else {
                        None
                    };
                    Ok(DebateOutcome {
                        transcript,
                        adjudication,
                    })
                })
                .collect()
        })
    }
}

pub fn write_transcripts(path: &Path, transcripts: &[DebateTranscript]) -> Result<usize, DebateError> {
    Ok(jsonl::write_records(path, transcripts)?)
}

pub fn read_transcripts(path: &Path) -> Result<Vec<DebateTranscript>, DebateError> {
    Ok(jsonl::read_records(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ComplianceVector, LabelSource};

    fn labeled(id: &str, y: u8, p: Option<f64>) -> LabeledSample {
        let mut vector = ComplianceVector::from_labels([("P33", y)]);
        vector.probabilities = p.map(|p| [("P33".to_string(), p)].into_iter().collect());
        LabeledSample {
            sample_id: id.into(),
            vector,
            vintage: "v".into(),
            source: LabelSource::Legacy,
            cot: None,
        }
    }

    fn prediction(label: u8) -> PolicyModelOutput {
        PolicyModelOutput {
            labels: [("P33".to_string(), label)].into_iter().collect(),
            probabilities: None,
            cot: String::new(),
        }
    }

    #[test]
    fn latent_selection_definition() {
        let set = [labeled("a", 0, Some(0.85)), labeled("b", 1, Some(0.9)), labeled("c", 0, Some(0.7))];
        assert_eq!(select_latent(&set, "P33", 0.7).unwrap(), vec!["a"]);
        let missing = [labeled("d", 0, None)];
        assert!(matches!(
            select_latent(&missing, "P33", 0.7),
            Err(DebateError::ProbabilitiesAbsent(id)) if id == "d"
        ));
    }

    #[test]
    fn conflict_selection_definition_and_scope() {
        let hist = [labeled("a", 0, None), labeled("b", 1, None), labeled("c", 0, None)];
        let preds: HashMap<String, PolicyModelOutput> = [
            ("a".to_string(), prediction(1)),
            ("b".to_string(), prediction(1)),
            ("c".to_string(), prediction(0)),
        ]
        .into_iter()
        .collect();
        let keys = vec!["P33".to_string()];
        assert_eq!(select_conflicts(&hist, &preds, &keys, Stage2Scope::ConflictsOnly).unwrap(), vec!["a"]);
        assert_eq!(
            select_conflicts(&hist, &preds, &keys, Stage2Scope::AllHistorical).unwrap().len(),
            3
        );
        let partial: HashMap<_, _> = preds.into_iter().filter(|(k, _)| k != "c").collect();
        assert!(matches!(
            select_conflicts(&hist, &partial, &keys, Stage2Scope::ConflictsOnly),
            Err(DebateError::MissingPrediction(id)) if id == "c"
        ));
    }

    #[test]
    fn config_validation() {
        assert!(DebateConfig::default().validate().is_ok());
        let bad = DebateConfig {
            enable_prosecutor: false,
            enable_defender: false,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad_tau = DebateConfig {
            tau: 1.5,
            ..Default::default()
        };
        assert!(bad_tau.validate().is_err());
    }

    #[test]
    fn citations_are_filtered_to_registry() {
        let reg = PolicyRegistry::new();
        reg.load_catalog(crate::fixtures::builtin_catalog(), &crate::clock::LogicalClock::default())
            .unwrap();
        let ids = cited_clauses("Per P33 (K12-T) and P99, see also P33 and P5.", &reg);
        assert_eq!(ids, vec!["P33", "P5"]);
    }
}
