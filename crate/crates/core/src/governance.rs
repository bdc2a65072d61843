//! Online cascade: screening rules, engine evaluation, sampled human review
//! feeding gold labels back into the store, and governance metrics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::dataset::{AdSample, ComplianceVector, DatasetError, DatasetStore, LabelSource, LabeledSample, Partition};
use crate::debate::{DebateEngine, DebateTranscript};
use crate::fixtures::P_NEW;
use crate::gateway::{predict, ModelBackend, PolicyModelOutput};
use crate::jsonl::{self, JsonlError};
use crate::policy::{PolicyError, PolicyRegistry};
use crate::text::{contains_phrase, normalized_padded, stable_hash};
use crate::PolicyKey;

pub const DEFAULT_SAMPLING_RATE: f64 = 0.05;

/// z for a two-sided 99% normal interval.
pub const Z_99: f64 = 2.576;

#[derive(Debug, thiserror::Error)]
pub enum GovernanceError {
    #[error("{path}:{line}: malformed screening rule: {reason}")]
    MalformedRule { path: String, line: usize, reason: String },
    #[error("submission {0} already exists")]
    DuplicateSubmission(String),
    #[error("invalid submission: {0}")]
    InvalidSubmission(String),
    #[error("unknown decision {0}")]
    UnknownDecision(String),
    #[error("unknown review task {0}")]
    UnknownTask(String),
    #[error("review task {0} is already completed")]
    TaskCompleted(String),
    #[error("review task {task_id} is claimed by {holder}")]
    ClaimConflict { task_id: String, holder: String },
    #[error("verdict references inactive policy keys {0:?}")]
    InvalidKeys(Vec<String>),
    #[error("invalid governance config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Records(#[from] JsonlError),
}

impl GovernanceError {
    /// True for errors a client causes by racing another client.
    pub fn is_conflict(&self) -> bool {
        matches!(
            self,
            GovernanceError::TaskCompleted(_) | GovernanceError::ClaimConflict { .. } | GovernanceError::DuplicateSubmission(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    /// Whole-word phrase match after normalization.
    Phrase,
    /// Case-insensitive regular expression over the raw text and caption.
    Pattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningRule {
    pub id: String,
    pub kind: RuleKind,
    pub value: String,
    /// Policy reported as triggering when the rule fires.
    pub policy: PolicyKey,
}

#[derive(Debug, Clone, Default)]
pub struct ScreeningRules {
    rules: Vec<(ScreeningRule, Option<Regex>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScreenOutcome {
    Pass,
    Reject { rule_id: String, policy: PolicyKey },
}

impl ScreeningRules {
    pub fn new(rules: Vec<ScreeningRule>) -> Result<Self, String> {
        let mut out = Vec::with_capacity(rules.len());
        let mut ids = HashSet::new();
        for r in rules {
            if r.id.trim().is_empty() {
                return Err("empty rule id".into());
            }
            if !ids.insert(r.id.clone()) {
                return Err(format!("duplicate rule id {}", r.id));
            }
            if r.value.trim().is_empty() {
                return Err(format!("rule {} has an empty value", r.id));
            }
            if r.policy.trim().is_empty() {
                return Err(format!("rule {} names no policy", r.id));
            }
            let re = match r.kind {
                RuleKind::Phrase => None,
                RuleKind::Pattern => Some(
                    Regex::new(&format!("(?i){}", r.value)).map_err(|e| format!("rule {}: {e}", r.id))?,
                ),
            };
            out.push((r, re));
        }
        Ok(ScreeningRules { rules: out })
    }

    /// One JSON rule per line.
    pub fn load(path: &Path) -> Result<Self, GovernanceError> {
        let malformed = |line: usize, reason: String| GovernanceError::MalformedRule {
            path: path.display().to_string(),
            line,
            reason,
        };
        let raw = std::fs::read_to_string(path).map_err(|e| malformed(0, e.to_string()))?;
        let mut rules = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rule: ScreeningRule = serde_json::from_str(line).map_err(|e| malformed(i + 1, e.to_string()))?;
            rules.push(rule);
        }
        ScreeningRules::new(rules).map_err(|reason| malformed(0, reason))
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// First matching rule in file order.
    pub fn screen(&self, sample: &AdSample) -> ScreenOutcome {
        if self.rules.is_empty() {
            return ScreenOutcome::Pass;
        }
        let content = sample.content_text();
        let padded = normalized_padded(&content);
        for (rule, re) in &self.rules {
            let hit = match re {
                Some(re) => re.is_match(&content),
                None => contains_phrase(&padded, &rule.value),
            };
            if hit {
                return ScreenOutcome::Reject {
                    rule_id: rule.id.clone(),
                    policy: rule.policy.clone(),
                };
            }
        }
        ScreenOutcome::Pass
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionStatus {
    RejectedScreening,
    Approved,
    Rejected,
    PendingReview,
}

impl DecisionStatus {
    pub fn is_final(self) -> bool {
        self != DecisionStatus::PendingReview
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub submission_id: String,
    pub status: DecisionStatus,
    pub triggering_policies: Vec<PolicyKey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub engine_output: Option<PolicyModelOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript_id: Option<String>,
    pub decided_at: DateTime<Utc>,
    pub policy_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screening_rule: Option<String>,
    /// What the cascade decided before any review diversion; `None` when the
    /// engine failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub automatic_status: Option<DecisionStatus>,
    /// Set when the engine failed and the ad went to humans by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub engine_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finalized_at: Option<DateTime<Utc>>,
}

impl Decision {
    pub fn reviewed(&self) -> bool {
        self.task_id.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Open,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub reviewer_id: String,
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewTask {
    pub task_id: String,
    pub decision_id: String,
    #[serde(default)]
    pub transcript_id: Option<String>,
    pub enqueued_at: DateTime<Utc>,
    pub state: TaskState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claim: Option<Claim>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<ReviewVerdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewVerdict {
    #[serde(default)]
    pub task_id: String,
    pub labels: BTreeMap<PolicyKey, u8>,
    pub reviewer_id: String,
    #[serde(default)]
    pub notes: String,
    #[serde(default = "Utc::now")]
    pub submitted_at: DateTime<Utc>,
}

/// Independent post-hoc audit of a decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backcheck {
    pub submission_id: String,
    pub labels: BTreeMap<PolicyKey, u8>,
    pub checked_at: DateTime<Utc>,
}

impl Backcheck {
    pub fn violation(&self) -> bool {
        self.labels.values().any(|&v| v == 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogEvent {
    Decided,
    Finalized,
}

/// One entry of the append-only decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionLogEntry {
    pub seq: u64,
    pub event: LogEvent,
    pub submission_id: String,
    pub status: DecisionStatus,
    pub at: DateTime<Utc>,
}

/// Governance metrics; `None` where the denominator is empty.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub decisions: usize,
    pub approved: usize,
    pub automatic_rejections: usize,
    pub reviewed: usize,
    pub leaked: usize,
    pub overturned: usize,
    /// Violation leakage rate.
    pub vlr: Option<f64>,
    /// Audit automation rate.
    pub aar: Option<f64>,
    pub fpr: Option<f64>,
    /// Share of decisions routed to human review.
    pub reviewed_fraction: Option<f64>,
}

/// VLR, AAR and FPR over `decisions`, joined with `backchecks` by submission.
///
/// * VLR: approved decisions a backcheck found violating, over approved decisions.
/// * AAR: decisions finalized without a human, over all decisions.
/// * FPR: automatic rejections (screening or engine) that a human verdict or a
///   backcheck found compliant, over automatic rejections.
pub fn compute_metrics(decisions: &[Decision], backchecks: &[Backcheck]) -> Metrics {
    let mut checked: HashMap<&str, bool> = HashMap::new();
    for b in backchecks {
        checked.insert(b.submission_id.as_str(), b.violation());
    }
    let mut m = Metrics {
        decisions: decisions.len(),
        ..Metrics::default()
    };
    for d in decisions {
        if d.reviewed() {
            m.reviewed += 1;
        }
        if d.status == DecisionStatus::Approved {
            m.approved += 1;
            if checked.get(d.submission_id.as_str()) == Some(&true) {
                m.leaked += 1;
            }
        }
        let auto_reject = matches!(
            d.automatic_status,
            Some(DecisionStatus::Rejected | DecisionStatus::RejectedScreening)
        );
        if auto_reject {
            m.automatic_rejections += 1;
            let human_cleared = d.reviewed() && d.status == DecisionStatus::Approved;
            let audit_cleared = checked.get(d.submission_id.as_str()) == Some(&false);
            if human_cleared || audit_cleared {
                m.overturned += 1;
            }
        }
    }
    let ratio = |n: usize, d: usize| (d > 0).then(|| n as f64 / d as f64);
    m.vlr = ratio(m.leaked, m.approved);
    m.aar = ratio(m.decisions - m.reviewed, m.decisions);
    m.fpr = ratio(m.overturned, m.automatic_rejections);
    m.reviewed_fraction = ratio(m.reviewed, m.decisions);
    m
}

/// Relative improvement in percent. For rates where lower is better the sign
/// is flipped so that an improvement is positive.
pub fn relative_improvement(before: f64, after: f64, lower_is_better: bool) -> Option<f64> {
    if before == 0.0 || !before.is_finite() || !after.is_finite() {
        return None;
    }
    let delta = if lower_is_better { before - after } else { after - before };
    Some(100.0 * delta / before)
}

/// 99% normal-approximation interval of a sampled fraction of `n` trials at `rate`.
pub fn binomial_ci99(rate: f64, n: usize) -> (f64, f64) {
    let half = Z_99 * (rate * (1.0 - rate) / n as f64).sqrt();
    (rate - half, rate + half)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GovernanceConfig {
    #[serde(default = "default_rate")]
    pub sampling_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_version")]
    pub policy_version: String,
    #[serde(default = "default_ttl")]
    pub claim_ttl_secs: u64,
}

fn default_rate() -> f64 {
    DEFAULT_SAMPLING_RATE
}
fn default_version() -> String {
    P_NEW.to_string()
}
fn default_ttl() -> u64 {
    900
}

impl Default for GovernanceConfig {
    fn default() -> Self {
        GovernanceConfig {
            sampling_rate: default_rate(),
            seed: 0,
            policy_version: default_version(),
            claim_ttl_secs: default_ttl(),
        }
    }
}

impl GovernanceConfig {
    pub fn validate(&self) -> Result<(), GovernanceError> {
        if !(0.0..=1.0).contains(&self.sampling_rate) {
            return Err(GovernanceError::Config(format!(
                "sampling_rate {} outside [0, 1]",
                self.sampling_rate
            )));
        }
        Ok(())
    }
}

#[derive(Default)]
struct State {
    decisions: HashMap<String, Decision>,
    ads: HashMap<String, AdSample>,
    in_flight: HashSet<String>,
    tasks: BTreeMap<String, ReviewTask>,
    transcripts: HashMap<String, DebateTranscript>,
    backchecks: Vec<Backcheck>,
    log: Vec<DecisionLogEntry>,
    next_id: u64,
}

impl State {
    fn log(&mut self, event: LogEvent, d: &Decision, at: DateTime<Utc>) {
        let seq = self.log.len() as u64;
        self.log.push(DecisionLogEntry {
            seq,
            event,
            submission_id: d.submission_id.clone(),
            status: d.status,
            at,
        });
    }
}

pub struct GovernanceService {
    registry: Arc<PolicyRegistry>,
    store: Arc<DatasetStore>,
    rules: ScreeningRules,
    engine: Arc<dyn ModelBackend>,
    debate: Option<Arc<DebateEngine>>,
    clock: Arc<dyn Clock>,
    config: GovernanceConfig,
    dims: Vec<PolicyKey>,
    state: Mutex<State>,
}

impl GovernanceService {
    pub fn new(
        registry: Arc<PolicyRegistry>,
        store: Arc<DatasetStore>,
        rules: ScreeningRules,
        engine: Arc<dyn ModelBackend>,
        clock: Arc<dyn Clock>,
        config: GovernanceConfig,
    ) -> Result<Self, GovernanceError> {
        config.validate()?;
        let dims = registry.active_dimensions(&config.policy_version)?;
        Ok(GovernanceService {
            registry,
            store,
            rules,
            engine,
            debate: None,
            clock,
            config,
            dims,
            state: Mutex::new(State::default()),
        })
    }

    /// Attaches a debate transcript to every decision routed to review.
    pub fn with_debate(mut self, engine: Arc<DebateEngine>) -> Self {
        self.debate = Some(engine);
        self
    }

    pub fn config(&self) -> &GovernanceConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<DatasetStore> {
        &self.store
    }

    pub fn dimensions(&self) -> &[PolicyKey] {
        &self.dims
    }

    fn reserve_id(&self, requested: &str) -> Result<String, GovernanceError> {
        let mut s = self.state.lock();
        let id = if requested.trim().is_empty() {
            loop {
                let id = format!("sub-{:08}", s.next_id);
                s.next_id += 1;
                if !s.decisions.contains_key(&id) && !s.in_flight.contains(&id) {
                    break id;
                }
            }
        } else {
            requested.to_string()
        };
        if s.decisions.contains_key(&id) || !s.in_flight.insert(id.clone()) {
            return Err(GovernanceError::DuplicateSubmission(id));
        }
        Ok(id)
    }

    /// Runs the cascade for one ad. An empty `sample.id` gets a generated id.
    pub fn submit(&self, mut sample: AdSample) -> Result<Decision, GovernanceError> {
        if sample.text.trim().is_empty() && sample.image_ref.is_none() {
            return Err(GovernanceError::InvalidSubmission("ad has neither text nor image_ref".into()));
        }
        let id = self.reserve_id(&sample.id)?;
        sample.id = id.clone();
        sample.partition = Partition::Live;
        let decision = self.evaluate_and_decide(&sample, self.config.sampling_rate);

        let transcript = match (&self.debate, decision.status) {
            (Some(engine), DecisionStatus::PendingReview) => {
                let keys = self.debate_keys(&decision);
                match engine.tripartite_debate(&sample, &self.config.policy_version, &keys) {
                    Ok(t) => Some(t),
                    Err(e) => {
                        log::warn!("review transcript for {id}: {e}");
                        None
                    }
                }
            }
            _ => None,
        };

        let mut s = self.state.lock();
        let mut decision = decision;
        if let Some(mut t) = transcript {
            t.transcript_id = format!("tx-review-{id}");
            decision.transcript_id = Some(t.transcript_id.clone());
            s.transcripts.insert(t.transcript_id.clone(), t);
        }
        if decision.status == DecisionStatus::PendingReview {
            let task_id = format!("task-{id}");
            decision.task_id = Some(task_id.clone());
            s.tasks.insert(
                task_id.clone(),
                ReviewTask {
                    task_id,
                    decision_id: id.clone(),
                    transcript_id: decision.transcript_id.clone(),
                    enqueued_at: decision.decided_at,
                    state: TaskState::Open,
                    claim: None,
                    verdict: None,
                },
            );
        }
        s.in_flight.remove(&id);
        s.log(LogEvent::Decided, &decision, decision.decided_at);
        s.ads.insert(id.clone(), sample);
        s.decisions.insert(id, decision.clone());
        Ok(decision)
    }

    fn debate_keys(&self, d: &Decision) -> Vec<PolicyKey> {
        let positives = d.engine_output.as_ref().map(|o| o.positives()).unwrap_or_default();
        if !positives.is_empty() {
            return positives;
        }
        let old = self.registry.versions();
        match old.iter().rev().nth(1) {
            Some(prev) => self
                .registry
                .diff_versions(&prev.version, &self.config.policy_version)
                .map(|c| c.into_iter().map(|c| c.id).collect())
                .unwrap_or_default(),
            None => self.dims.clone(),
        }
    }

    /// Screening, then the engine over the full active dimension set, then
    /// seeded review sampling. Does not record the decision.
    pub fn evaluate_and_decide(&self, sample: &AdSample, sampling_rate: f64) -> Decision {
        let now = self.clock.now();
        let mut d = Decision {
            submission_id: sample.id.clone(),
            status: DecisionStatus::Approved,
            triggering_policies: Vec::new(),
            engine_output: None,
            transcript_id: None,
            decided_at: now,
            policy_version: self.config.policy_version.clone(),
            screening_rule: None,
            automatic_status: None,
            engine_error: None,
            task_id: None,
            finalized_at: None,
        };
        if let ScreenOutcome::Reject { rule_id, policy } = self.rules.screen(sample) {
            d.status = DecisionStatus::RejectedScreening;
            d.triggering_policies = vec![policy];
            d.screening_rule = Some(rule_id);
            d.automatic_status = Some(d.status);
            d.finalized_at = Some(now);
            return d;
        }
        match predict(sample, &self.registry, &self.config.policy_version, self.engine.as_ref()) {
            Ok(out) => {
                let positives = out.positives();
                d.status = if positives.is_empty() {
                    DecisionStatus::Approved
                } else {
                    DecisionStatus::Rejected
                };
                d.triggering_policies = positives;
                d.automatic_status = Some(d.status);
                d.engine_output = Some(out);
            }
            Err(e) => {
                log::warn!("engine failed on {}: {e}", sample.id);
                d.engine_error = Some(e.to_string());
                d.status = DecisionStatus::PendingReview;
                return d;
            }
        }
        let seed = stable_hash(&[&self.config.seed.to_le_bytes(), sample.id.as_bytes()]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if rng.gen::<f64>() < sampling_rate {
            d.status = DecisionStatus::PendingReview;
            d.triggering_policies.clear();
        } else {
            d.finalized_at = Some(now);
        }
        d
    }

    pub fn decision(&self, id: &str) -> Option<Decision> {
        self.state.lock().decisions.get(id).cloned()
    }

    pub fn ad(&self, id: &str) -> Option<AdSample> {
        self.state.lock().ads.get(id).cloned()
    }

    pub fn decisions(&self) -> Vec<Decision> {
        let s = self.state.lock();
        let mut out: Vec<Decision> = s.decisions.values().cloned().collect();
        out.sort_by(|a, b| a.decided_at.cmp(&b.decided_at).then(a.submission_id.cmp(&b.submission_id)));
        out
    }

    pub fn decision_log(&self) -> Vec<DecisionLogEntry> {
        self.state.lock().log.clone()
    }

    pub fn write_decision_log(&self, path: &Path) -> Result<usize, GovernanceError> {
        Ok(jsonl::write_records(path, &self.decision_log())?)
    }

    pub fn transcript(&self, id: &str) -> Option<DebateTranscript> {
        self.state.lock().transcripts.get(id).cloned()
    }

    pub fn task(&self, id: &str) -> Option<ReviewTask> {
        self.state.lock().tasks.get(id).cloned()
    }

    /// Open tasks nobody holds a live claim on, oldest first.
    pub fn review_queue(&self) -> Vec<ReviewTask> {
        let now = self.clock.now();
        let s = self.state.lock();
        let mut out: Vec<ReviewTask> = s
            .tasks
            .values()
            .filter(|t| t.state == TaskState::Open && t.claim.as_ref().is_none_or(|c| c.expires_at <= now))
            .cloned()
            .collect();
        out.sort_by(|a, b| a.enqueued_at.cmp(&b.enqueued_at).then(a.task_id.cmp(&b.task_id)));
        out
    }

    /// Locks `task_id` for `reviewer_id` until the claim TTL passes. The same
    /// reviewer may renew; anyone else gets a conflict while the claim lives.
    pub fn claim(&self, task_id: &str, reviewer_id: &str) -> Result<ReviewTask, GovernanceError> {
        let now = self.clock.now();
        let mut s = self.state.lock();
        let task = s
            .tasks
            .get_mut(task_id)
            .ok_or_else(|| GovernanceError::UnknownTask(task_id.to_string()))?;
        if task.state == TaskState::Completed {
            return Err(GovernanceError::TaskCompleted(task_id.to_string()));
        }
        if let Some(c) = &task.claim {
            if c.reviewer_id != reviewer_id && c.expires_at > now {
                return Err(GovernanceError::ClaimConflict {
                    task_id: task_id.to_string(),
                    holder: c.reviewer_id.clone(),
                });
            }
        }
        task.claim = Some(Claim {
            reviewer_id: reviewer_id.to_string(),
            expires_at: now + chrono::Duration::seconds(self.config.claim_ttl_secs as i64),
        });
        Ok(task.clone())
    }

    /// Finalizes the task's decision and appends a human-reviewed gold sample.
    /// Keys absent from the verdict are read as compliant.
    pub fn submit_verdict(&self, task_id: &str, mut verdict: ReviewVerdict) -> Result<Decision, GovernanceError> {
        let bad: Vec<String> = verdict
            .labels
            .iter()
            .filter(|(k, v)| !self.dims.contains(k) || **v > 1)
            .map(|(k, _)| k.clone())
            .collect();
        if !bad.is_empty() {
            return Err(GovernanceError::InvalidKeys(bad));
        }
        let now = self.clock.now();
        let mut s = self.state.lock();
        let task = s
            .tasks
            .get(task_id)
            .ok_or_else(|| GovernanceError::UnknownTask(task_id.to_string()))?;
        if task.state == TaskState::Completed {
            return Err(GovernanceError::TaskCompleted(task_id.to_string()));
        }
        if let Some(c) = &task.claim {
            if c.reviewer_id != verdict.reviewer_id && c.expires_at > now {
                return Err(GovernanceError::ClaimConflict {
                    task_id: task_id.to_string(),
                    holder: c.reviewer_id.clone(),
                });
            }
        }
        let decision_id = task.decision_id.clone();
        let ad = s.ads.get(&decision_id).cloned().expect("task refers to a recorded ad");
        let labels: BTreeMap<PolicyKey, u8> = self
            .dims
            .iter()
            .map(|k| (k.clone(), verdict.labels.get(k).copied().unwrap_or(0)))
            .collect();
        let gold_id = format!("review-{decision_id}");
        let mut gold = ad.clone();
        gold.id = gold_id.clone();
        gold.partition = Partition::Gold;
        gold.metadata.insert("submission_id".into(), decision_id.clone());
        let label = LabeledSample {
            sample_id: gold_id,
            vector: ComplianceVector {
                labels: labels.clone(),
                probabilities: None,
            },
            vintage: self.config.policy_version.clone(),
            source: LabelSource::HumanReview,
            cot: (!verdict.notes.is_empty()).then(|| verdict.notes.clone()),
        };
        // Written under the state lock so a racing verdict cannot also land.
        self.store.insert(gold, Some(label))?;

        verdict.task_id = task_id.to_string();
        verdict.submitted_at = now;
        let task = s.tasks.get_mut(task_id).expect("checked above");
        task.state = TaskState::Completed;
        task.verdict = Some(verdict);
        let positives: Vec<PolicyKey> = labels.iter().filter(|(_, &v)| v == 1).map(|(k, _)| k.clone()).collect();
        let d = s.decisions.get_mut(&decision_id).expect("task refers to a recorded decision");
        d.status = if positives.is_empty() {
            DecisionStatus::Approved
        } else {
            DecisionStatus::Rejected
        };
        d.triggering_policies = positives;
        d.finalized_at = Some(now);
        let d = d.clone();
        s.log(LogEvent::Finalized, &d, now);
        Ok(d)
    }

    pub fn record_backcheck(
        &self,
        submission_id: &str,
        labels: BTreeMap<PolicyKey, u8>,
    ) -> Result<Backcheck, GovernanceError> {
        let now = self.clock.now();
        let mut s = self.state.lock();
        if !s.decisions.contains_key(submission_id) {
            return Err(GovernanceError::UnknownDecision(submission_id.to_string()));
        }
        let b = Backcheck {
            submission_id: submission_id.to_string(),
            labels,
            checked_at: now,
        };
        s.backchecks.push(b.clone());
        Ok(b)
    }

    /// Metrics over decisions made within `window` of now (all when `None`).
    pub fn metrics(&self, window: Option<Duration>) -> Metrics {
        let now = self.clock.now();
        let since = window.map(|w| now - chrono::Duration::from_std(w).unwrap_or(chrono::Duration::MAX));
        let s = self.state.lock();
        let decisions: Vec<Decision> = s
            .decisions
            .values()
            .filter(|d| since.is_none_or(|t| d.decided_at >= t))
            .cloned()
            .collect();
        compute_metrics(&decisions, &s.backchecks)
    }
}
