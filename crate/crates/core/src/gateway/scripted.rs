//! Deterministic offline backend.
//!
//! The policy model is a [`CueModel`]: a logistic scorer over known surface
//! phrases. The debate roles are scripted around the fixture lexicon:
//!
//! * the prosecutor is the current model with its suppressors ignored; it
//!   quotes every known violation cue it finds;
//! * the defender always argues compliance and quotes benign-context markers;
//! * the skeptic reports the model's own probability and the phrases behind it;
//! * the umpire is an oracle over the lexicon. It rules a key violated when an
//!   argument quotes a genuine violation cue of that key that occurs in the ad
//!   and the defender has not shown a benign marker of that key in the ad.
//!   Quotes that do not occur in the ad are discarded.
//!
//! Every reply is a pure function of the seed, the backend's model and the
//! prompt text.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::dataset::AdSample;
use crate::fixtures::{self, CueTier, BASE_RATE, DECISION_THRESHOLD};
use crate::policy::PolicyClause;
use crate::text::{contains_phrase, normalized_padded, stable_hash};
use crate::PolicyKey;

use super::prompt::ParsedPrompt;
use super::verdict::{format_verdict_line, Verdict};
use super::{GatewayError, ModelBackend, PolicyModelOutput, Role};

/// Logit contribution of a phrase that neutralises the key's cues.
pub const SUPPRESSOR_WEIGHT: f64 = -10.0;

/// Probability that a rollout draw leaves out one cue mention.
const MENTION_DROPOUT: f64 = 0.3;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Weight a positive cue needs so that, alone, it yields the tier's probability.
pub fn tier_weight(tier: CueTier) -> f64 {
    logit(tier.probability()) - logit(BASE_RATE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueWeight {
    pub key: PolicyKey,
    pub phrase: String,
    pub weight: f64,
}

/// Logistic keyword scorer: `p_k(x) = sigmoid(logit(base) + sum of weights of
/// key-k phrases present in x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueModel {
    pub base_rate: f64,
    pub threshold: f64,
    cues: Vec<CueWeight>,
}

impl Default for CueModel {
    fn default() -> Self {
        CueModel {
            base_rate: BASE_RATE,
            threshold: DECISION_THRESHOLD,
            cues: Vec::new(),
        }
    }
}

impl CueModel {
    /// Knows every cue and benign marker of the lexicon.
    pub fn fixture() -> Self {
        let mut m = CueModel::default();
        for c in fixtures::lexicon().all() {
            if c.tier.is_violation() {
                m.set(c.key, c.phrase, tier_weight(c.tier));
            } else {
                m.set(c.key, c.phrase, SUPPRESSOR_WEIGHT);
            }
        }
        m
    }

    /// The legacy model: knows the historical policies only.
    pub fn historical_only() -> Self {
        let mut m = CueModel::default();
        for key in fixtures::historical_keys() {
            for c in fixtures::lexicon().violation_cues(&key) {
                m.set(c.key, c.phrase, tier_weight(c.tier));
            }
        }
        m
    }

    /// Inserts or replaces the weight of `phrase` under `key`.
    pub fn set(&mut self, key: &str, phrase: &str, weight: f64) {
        match self
            .cues
            .binary_search_by(|c| (c.key.as_str(), c.phrase.as_str()).cmp(&(key, phrase)))
        {
            Ok(i) => self.cues[i].weight = weight,
            Err(i) => self.cues.insert(
                i,
                CueWeight {
                    key: key.to_string(),
                    phrase: phrase.to_string(),
                    weight,
                },
            ),
        }
    }

    pub fn weight(&self, key: &str, phrase: &str) -> Option<f64> {
        self.cues
            .iter()
            .find(|c| c.key == key && c.phrase == phrase)
            .map(|c| c.weight)
    }

    pub fn cues(&self) -> &[CueWeight] {
        &self.cues
    }

    pub fn cues_for<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a CueWeight> + 'a {
        self.cues.iter().filter(move |c| c.key == key)
    }

    /// Positive cues of `key` present in the padded text, in table order.
    pub fn matched_positive<'a>(&'a self, key: &'a str, padded: &str) -> Vec<&'a str> {
        self.cues_for(key)
            .filter(|c| c.weight > 0.0 && contains_phrase(padded, &c.phrase))
            .map(|c| c.phrase.as_str())
            .collect()
    }

    /// P(violation of `key`) for text already passed through [`normalized_padded`].
    pub fn probability_padded(&self, key: &str, padded: &str) -> f64 {
        let z: f64 = self
            .cues_for(key)
            .filter(|c| contains_phrase(padded, &c.phrase))
            .map(|c| c.weight)
            .sum();
        sigmoid(logit(self.base_rate) + z)
    }

    pub fn probability(&self, key: &str, text: &str) -> f64 {
        self.probability_padded(key, &normalized_padded(text))
    }

    /// Labels and probabilities over `keys`.
    pub fn score(&self, text: &str, keys: &[PolicyKey]) -> PolicyModelOutput {
        let padded = normalized_padded(text);
        let mut labels = BTreeMap::new();
        let mut probs = BTreeMap::new();
        let mut cot = String::new();
        for k in keys {
            let p = self.probability_padded(k, &padded);
            let label = u8::from(p >= self.threshold);
            if label == 1 {
                let cues = self.matched_positive(k, &padded);
                let _ = writeln!(cot, "{k}: p={p:.2}, triggered by {}.", quote_list(&cues));
            }
            labels.insert(k.clone(), label);
            probs.insert(k.clone(), p);
        }
        if cot.is_empty() {
            cot.push_str("No policy under review is triggered.");
        }
        PolicyModelOutput {
            labels,
            probabilities: Some(probs),
            cot: cot.trim_end().to_string(),
        }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, json)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

fn quote_list(phrases: &[&str]) -> String {
    let quoted: Vec<String> = phrases.iter().map(|p| format!("\"{p}\"")).collect();
    match quoted.len() {
        0 => "no specific phrase".to_string(),
        1 => quoted[0].clone(),
        n => format!("{} and {}", quoted[..n - 1].join(", "), quoted[n - 1]),
    }
}

fn quotes(text: &str) -> Vec<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#""([^"\n]+)""#).expect("valid regex"))
        .captures_iter(text)
        .map(|c| c[1].to_string())
        .collect()
}

/// Scripted agents and policy model over one [`CueModel`].
pub struct ScriptedBackend {
    seed: u64,
    model: Arc<CueModel>,
    name: String,
}

impl ScriptedBackend {
    pub fn new(seed: u64, model: Arc<CueModel>) -> Self {
        ScriptedBackend {
            seed,
            model,
            name: format!("scripted(seed={seed})"),
        }
    }

    pub fn model(&self) -> &Arc<CueModel> {
        &self.model
    }

    fn rng(&self, tag: &str, prompt: &str) -> ChaCha8Rng {
        let h = stable_hash(&[&self.seed.to_le_bytes(), tag.as_bytes(), prompt.as_bytes()]);
        ChaCha8Rng::seed_from_u64(h)
    }

    fn finish(&self, cot: String, verdicts: &BTreeMap<PolicyKey, Verdict>, labels_only: bool) -> String {
        let line = format_verdict_line(verdicts);
        if labels_only {
            line
        } else {
            format!("{}\n{line}", cot.trim_end())
        }
    }

    fn prosecutor(&self, p: &ParsedPrompt, prompt: &str) -> String {
        let padded = normalized_padded(&p.ad_text);
        let mut rng = self.rng("prosecutor", prompt);
        let opener = [
            "Inspecting the creative clause by clause.",
            "Reviewing the copy for every policy under review.",
        ][rng.gen_range(0..2)];
        let mut cot = format!("{opener}\n");
        let mut verdicts = BTreeMap::new();
        for (key, code) in &p.policies {
            let cues = self.model.matched_positive(key, &padded);
            if cues.is_empty() {
                verdicts.insert(key.clone(), Verdict::Comply);
            } else {
                let _ = writeln!(
                    cot,
                    "Per {key} ({code}), the ad states {}, which is exactly the conduct the clause prohibits.",
                    quote_list(&cues)
                );
                verdicts.insert(key.clone(), Verdict::Violate);
            }
        }
        if verdicts.values().all(|v| *v == Verdict::Comply) {
            cot.push_str("I found no phrase in the ad that supports a violation.\n");
        }
        self.finish(cot, &verdicts, p.labels_only)
    }

    fn defender(&self, p: &ParsedPrompt, prompt: &str) -> String {
        let padded = normalized_padded(&p.ad_text);
        let lex = fixtures::lexicon();
        let mut rng = self.rng("defender", prompt);
        let mut cot = String::new();
        let mut verdicts = BTreeMap::new();
        for (key, code) in &p.policies {
            let markers: Vec<&str> = lex
                .benign_markers(key)
                .map(|c| c.phrase)
                .filter(|m| contains_phrase(&padded, m))
                .collect();
            if markers.is_empty() {
                let line = [
                    "the wording is ordinary promotional enthusiasm, not a literal promise",
                    "read in context the copy describes a service and makes no prohibited claim",
                ][rng.gen_range(0..2)];
                let _ = writeln!(cot, "For {key} ({code}), {line}.");
            } else {
                let _ = writeln!(
                    cot,
                    "For {key} ({code}), the ad says {}, which places it in a legitimate context.",
                    quote_list(&markers)
                );
            }
            verdicts.insert(key.clone(), Verdict::Comply);
        }
        self.finish(cot, &verdicts, p.labels_only)
    }

    fn skeptic(&self, p: &ParsedPrompt) -> String {
        let padded = normalized_padded(&p.ad_text);
        let mut cot = String::new();
        let mut verdicts = BTreeMap::new();
        for (key, code) in &p.policies {
            let prob = self.model.probability_padded(key, &padded);
            let cues = self.model.matched_positive(key, &padded);
            if !cues.is_empty() {
                let _ = writeln!(
                    cot,
                    "For {key} ({code}) my violation probability is {prob:.2}, driven by {}; the copy never states the claim outright, which is why I am unsure.",
                    quote_list(&cues)
                );
            }
            let v = if prob >= self.model.threshold {
                Verdict::Violate
            } else {
                Verdict::Comply
            };
            verdicts.insert(key.clone(), v);
        }
        if cot.is_empty() {
            cot.push_str("No feature of the ad raises my violation probability above the base rate.\n");
        }
        self.finish(cot, &verdicts, p.labels_only)
    }

    fn umpire(&self, p: &ParsedPrompt) -> String {
        let padded = normalized_padded(&p.ad_text);
        let lex = fixtures::lexicon();
        let mut cot = String::new();
        let mut verdicts = BTreeMap::new();

        if p.labels_only {
            for (key, code) in &p.policies {
                let (mut violate, mut comply) = (0usize, 0usize);
                let mut prosecutor_vote = None;
                for a in &p.arguments {
                    match a.verdicts.get(key) {
                        Some(Verdict::Violate) => violate += 1,
                        Some(Verdict::Comply) => comply += 1,
                        None => continue,
                    }
                    if a.role == Role::Prosecutor {
                        prosecutor_vote = a.verdicts.get(key).copied();
                    }
                }
                let v = match violate.cmp(&comply) {
                    std::cmp::Ordering::Greater => Verdict::Violate,
                    std::cmp::Ordering::Less => Verdict::Comply,
                    std::cmp::Ordering::Equal => prosecutor_vote.unwrap_or(Verdict::Comply),
                };
                let _ = writeln!(
                    cot,
                    "Per {key} ({code}), {violate} of {} arguments find a violation; ruling {v}.",
                    violate + comply
                );
                verdicts.insert(key.clone(), v);
            }
            return self.finish(cot, &verdicts, false);
        }

        let mut accusing = Vec::new();
        let mut defending = Vec::new();
        for a in &p.arguments {
            let qs = quotes(&a.cot);
            match a.role {
                Role::Defender => defending.extend(qs),
                _ => accusing.extend(qs),
            }
        }
        let mut discarded: Vec<&str> = accusing
            .iter()
            .chain(defending.iter())
            .map(String::as_str)
            .filter(|q| !contains_phrase(&padded, q))
            .collect();
        discarded.sort_unstable();
        discarded.dedup();
        for q in &discarded {
            let _ = writeln!(
                cot,
                "Discarded the argument quoting \"{q}\": the phrase does not appear in the advertisement."
            );
        }
        for (key, code) in &p.policies {
            let mut cues: Vec<&str> = lex
                .violation_cues(key)
                .map(|c| c.phrase)
                .filter(|c| accusing.iter().any(|q| q == c) && contains_phrase(&padded, c))
                .collect();
            cues.dedup();
            let markers: Vec<&str> = lex
                .benign_markers(key)
                .map(|c| c.phrase)
                .filter(|m| defending.iter().any(|q| q == m) && contains_phrase(&padded, m))
                .collect();
            let v = if cues.is_empty() {
                let _ = writeln!(cot, "Per {key} ({code}), nothing in the ad meets the definition of a violation.");
                Verdict::Comply
            } else if !markers.is_empty() {
                let _ = writeln!(
                    cot,
                    "Per {key} ({code}), {} appears alongside {}, which establishes a legitimate context, so the clause is not violated.",
                    quote_list(&cues),
                    quote_list(&markers)
                );
                Verdict::Comply
            } else {
                let _ = writeln!(
                    cot,
                    "Per {key} ({code}), the ad's use of {} meets the definition of a violation.",
                    quote_list(&cues)
                );
                Verdict::Violate
            };
            verdicts.insert(key.clone(), v);
        }
        self.finish(cot, &verdicts, false)
    }

    /// One draw of the policy model for a rollout group. Each label is a
    /// Bernoulli draw at the model's probability; the reasoning follows the
    /// umpire's template with random cue mentions dropped.
    fn policy_draw(&self, p: &ParsedPrompt, prompt: &str) -> String {
        let padded = normalized_padded(&p.ad_text);
        let mut rng = self.rng("policy", prompt);
        let mut cot = String::new();
        let mut verdicts = BTreeMap::new();
        for (key, code) in &p.policies {
            let prob = self.model.probability_padded(key, &padded);
            let violate = rng.gen_bool(prob.clamp(0.0, 1.0));
            if violate {
                let cues: Vec<&str> = self
                    .model
                    .matched_positive(key, &padded)
                    .into_iter()
                    .filter(|_| !rng.gen_bool(MENTION_DROPOUT))
                    .collect();
                let evidence = if cues.is_empty() {
                    "its wording".to_string()
                } else {
                    quote_list(&cues)
                };
                let _ = writeln!(cot, "Per {key} ({code}), the ad's use of {evidence} meets the definition of a violation.");
            } else if !rng.gen_bool(MENTION_DROPOUT) {
                let _ = writeln!(cot, "Per {key} ({code}), nothing in the ad meets the definition of a violation.");
            }
            verdicts.insert(key.clone(), Verdict::from_label(u8::from(violate)));
        }
        if cot.is_empty() {
            cot.push_str("The ad is compliant.\n");
        }
        self.finish(cot, &verdicts, p.labels_only)
    }

    fn policy_verdict(&self, p: &ParsedPrompt) -> String {
        let keys: Vec<PolicyKey> = p.policies.iter().map(|(k, _)| k.clone()).collect();
        let out = self.model.score(&p.ad_text, &keys);
        let verdicts = out
            .labels
            .iter()
            .map(|(k, &l)| (k.clone(), Verdict::from_label(l)))
            .collect();
        self.finish(out.cot, &verdicts, p.labels_only)
    }
}

impl ModelBackend for ScriptedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, prompt: &str) -> Result<String, GatewayError> {
        let p = ParsedPrompt::parse(prompt);
        if p.policy_model {
            return Ok(match p.response_index {
                Some(_) => self.policy_draw(&p, prompt),
                None => self.policy_verdict(&p),
            });
        }
        Ok(match p.role {
            Some(Role::Prosecutor) => self.prosecutor(&p, prompt),
            Some(Role::Defender) => self.defender(&p, prompt),
            Some(Role::Skeptic) => self.skeptic(&p),
            Some(Role::Umpire) => self.umpire(&p),
            None => "The prompt names no role I can play.".to_string(),
        })
    }

    fn predict(&self, sample: &AdSample, policies: &[PolicyClause]) -> Result<PolicyModelOutput, GatewayError> {
        let keys: Vec<PolicyKey> = policies.iter().map(|c| c.id.clone()).collect();
        Ok(self.model.score(&sample.content_text(), &keys))
    }
}
