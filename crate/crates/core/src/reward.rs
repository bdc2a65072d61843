//! Rewards for adjudicated rollouts and group-relative advantages.
//!
//! `dialectic = 1(y = y*) + sim(C, C*)` with `sim` the token LCS-F1 of the two
//! reasoning chains. The historical term blends in agreement with the legacy
//! labels: `total = (1 - λ)·dialectic + λ·1(y = y_old)`. Advantages are
//! `(r_i - mean) / (std + ε)` with the population standard deviation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::debate::{Adjudication, Stage};
use crate::gateway::SampledResponse;
use crate::jsonl::{self, JsonlError};
use crate::text::tokenize;
use crate::PolicyKey;

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("{0} text is empty after normalization")]
    EmptyText(&'static str),
    #[error("adjudication {0} is unresolved")]
    Unresolved(String),
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
    #[error("rollout {sample_id}/{group_id} is incomplete: {field}")]
    IncompleteRecord {
        sample_id: String,
        group_id: String,
        field: &'static str,
    },
    #[error(transparent)]
    Records(#[from] JsonlError),
}

/// Similarity between a response's reasoning and the reference rationale.
pub trait CotSimilarity: Send + Sync {
    fn similarity(&self, cot: &str, reference: &str) -> Result<f64, RewardError>;
}

/// Token-level longest-common-subsequence F1.
#[derive(Debug, Clone, Copy, Default)]
pub struct LcsF1;

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut row = vec![0usize; short.len() + 1];
    for x in long {
        let mut diag = 0;
        for (j, y) in short.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[short.len()]
}

impl CotSimilarity for LcsF1 {
    fn similarity(&self, cot: &str, reference: &str) -> Result<f64, RewardError> {
        let a = tokenize(cot);
        let b = tokenize(reference);
        if a.is_empty() {
            return Err(RewardError::EmptyText("response"));
        }
        if b.is_empty() {
            return Err(RewardError::EmptyText("reference"));
        }
        let l = lcs_len(&a, &b) as f64;
        if l == 0.0 {
            return Ok(0.0);
        }
        let prec = l / a.len() as f64;
        let rec = l / b.len() as f64;
        Ok(2.0 * prec * rec / (prec + rec))
    }
}

pub fn cot_similarity(cot: &str, reference: &str) -> Result<f64, RewardError> {
    LcsF1.similarity(cot, reference)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DialecticReward {
    #[serde(rename = "match")]
    pub matched: u8,
    pub sim: f64,
    pub total: f64,
}

fn labels_match(labels: &BTreeMap<PolicyKey, u8>, adjudication: &Adjudication) -> u8 {
    let all = adjudication
        .rectified_labels
        .iter()
        .all(|(k, v)| labels.get(k).copied().unwrap_or(0) == *v);
    u8::from(all)
}

pub fn dialectic_reward(
    labels: &BTreeMap<PolicyKey, u8>,
    cot: &str,
    adjudication: &Adjudication,
) -> Result<DialecticReward, RewardError> {
    dialectic_reward_with(&LcsF1, labels, cot, adjudication)
}

pub fn dialectic_reward_with(
    sim: &dyn CotSimilarity,
    labels: &BTreeMap<PolicyKey, u8>,
    cot: &str,
    adjudication: &Adjudication,
) -> Result<DialecticReward, RewardError> {
    if adjudication.rationale.trim().is_empty() || adjudication.rectified_labels.is_empty() {
        return Err(RewardError::Unresolved(adjudication.adjudication_id.clone()));
    }
    let matched = labels_match(labels, adjudication);
    let s = sim.similarity(cot, &adjudication.rationale)?;
    Ok(DialecticReward {
        matched,
        sim: s,
        total: matched as f64 + s,
    })
}

/// Reward when agents give verdicts only: the similarity term is zero.
pub fn labels_only_reward(
    labels: &BTreeMap<PolicyKey, u8>,
    adjudication: &Adjudication,
) -> Result<DialecticReward, RewardError> {
    if adjudication.rectified_labels.is_empty() {
        return Err(RewardError::Unresolved(adjudication.adjudication_id.clone()));
    }
    let matched = labels_match(labels, adjudication);
    Ok(DialecticReward {
        matched,
        sim: 0.0,
        total: matched as f64,
    })
}

/// 1 when `labels` equals the legacy vector on every key of `labels`.
pub fn historical_agreement(labels: &BTreeMap<PolicyKey, u8>, legacy: &BTreeMap<PolicyKey, u8>) -> u8 {
    u8::from(labels.iter().all(|(k, v)| legacy.get(k).copied().unwrap_or(0) == *v))
}

pub fn total_reward(
    dialectic_total: f64,
    labels: &BTreeMap<PolicyKey, u8>,
    legacy: &BTreeMap<PolicyKey, u8>,
    config: &RewardConfig,
) -> f64 {
    if config.lambda_hist == 0.0 {
        return dialectic_total;
    }
    let hist = historical_agreement(labels, legacy) as f64;
    (1.0 - config.lambda_hist) * dialectic_total + config.lambda_hist * hist
}

/// Group-relative advantages. Single-member and constant groups get zeros.
pub fn grpo_advantages(rewards: &[f64], epsilon: f64) -> Vec<f64> {
    let g = rewards.len();
    // Equality rather than std == 0: rounding in the mean leaves a tiny
    // non-zero std for constant groups.
    if g < 2 || rewards.iter().all(|r| *r == rewards[0]) {
        return vec![0.0; g];
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    if std == 0.0 {
        return vec![0.0; g];
    }
    rewards.iter().map(|r| (r - mean) / (std + epsilon)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    #[serde(default)]
    pub lambda_hist: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_group")]
    pub group_size: usize,
}

fn default_epsilon() -> f64 {
    1e-6
}
fn default_group() -> usize {
    8
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda_hist: 0.0,
            epsilon: default_epsilon(),
            group_size: default_group(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(0.0..=1.0).contains(&self.lambda_hist) {
            return Err(RewardError::InvalidConfig("lambda_hist outside [0, 1]".into()));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(RewardError::InvalidConfig("epsilon must be positive".into()));
        }
        if self.group_size == 0 {
            return Err(RewardError::InvalidConfig("group_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub sample_id: String,
    pub group_id: String,
    pub response_labels: BTreeMap<PolicyKey, u8>,
    pub response_cot: String,
    pub reward_match: u8,
    pub reward_sim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_hist: Option<u8>,
    pub reward_total: f64,
    pub advantage: f64,
    pub stage: Stage,
}

impl RolloutRecord {
    fn check(&self) -> Result<(), RewardError> {
        let incomplete = |field| RewardError::IncompleteRecord {
            sample_id: self.sample_id.clone(),
            group_id: self.group_id.clone(),
            field,
        };
        if self.sample_id.is_empty() {
            return Err(incomplete("sample_id"));
        }
        if self.group_id.is_empty() {
            return Err(incomplete("group_id"));
        }
        if !self.reward_total.is_finite() {
            return Err(incomplete("reward_total"));
        }
        if !self.advantage.is_finite() {
            return Err(incomplete("advantage"));
        }
        Ok(())
    }
}

/// Scores one group of responses against an adjudication.
pub fn score_group(
    stage: Stage,
    adjudication: &Adjudication,
    responses: &[SampledResponse],
    legacy: Option<&BTreeMap<PolicyKey, u8>>,
    labels_only: bool,
    config: &RewardConfig,
) -> Result<Vec<RolloutRecord>, RewardError> {
    config.validate()?;
    let empty = BTreeMap::new();
    let mut records = Vec::with_capacity(responses.len());
    for r in responses {
        let d = if labels_only || tokenize(&r.cot).is_empty() {
            labels_only_reward(&r.labels, adjudication)?
        } else {
            dialectic_reward(&r.labels, &r.cot, adjudication)?
        };
        let hist = legacy.map(|l| historical_agreement(&r.labels, l));
        let total = total_reward(d.total, &r.labels, legacy.unwrap_or(&empty), config);
        records.push(RolloutRecord {
            sample_id: adjudication.sample_id.clone(),
            group_id: format!("{stage}-{}", adjudication.sample_id),
            response_labels: r.labels.clone(),
            response_cot: r.cot.clone(),
            reward_match: d.matched,
            reward_sim: d.sim,
            reward_hist: hist,
            reward_total: total,
            advantage: 0.0,
            stage,
        });
    }
    let totals: Vec<f64> = records.iter().map(|r| r.reward_total).collect();
    for (r, a) in records.iter_mut().zip(grpo_advantages(&totals, config.epsilon)) {
        r.advantage = a;
    }
    Ok(records)
}

pub fn export_rollouts(records: &[RolloutRecord], path: &Path) -> Result<usize, RewardError> {
    for r in records {
        r.check()?;
    }
    Ok(jsonl::write_records(path, records)?)
}

pub fn read_rollouts(path: &Path) -> Result<Vec<RolloutRecord>, RewardError> {
    let records: Vec<RolloutRecord> = jsonl::read_records(path)?;
    for r in &records {
        r.check()?;
    }
    Ok(records)
}
