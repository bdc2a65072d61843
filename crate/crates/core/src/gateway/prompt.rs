//! Role prompts.
//!
//! Every prompt has the same section layout so that the umpire always sees
//! clause text and exemplars before the arguments it is judging:
//!
//! ```text
//! === ROLE: UMPIRE ===
//! === POLICIES UNDER REVIEW ===
//! === RETRIEVED EVIDENCE ===
//! === ADVERTISEMENT ===
//! === ARGUMENTS ===          (umpire only)
//! === OUTPUT FORMAT ===
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::dataset::AdSample;
use crate::policy::PolicyClause;
use crate::retrieval::{DocKind, Evidence};
use crate::PolicyKey;

use super::verdict::{Verdict, VERDICT_PREFIX};
use super::{AgentReply, GatewayError, Role};

pub(crate) const LABELS_ONLY_LINE: &str = "Mode: verdict only, no reasoning.";
pub(crate) const UMPIRE_LABELS_ONLY_LINE: &str = "Mode: the arguments carry verdicts only.";

const PROSECUTOR: &str = "\
You are a strict regulatory inspector reviewing an advertisement against the policies below.
Look for any possible violation, including subtle ones: misleading layouts, inflated claims,
manufactured urgency and legal exposure. Assume nothing is innocent until checked.
Quote the exact phrases from the advertisement that support each violation you raise.";

const DEFENDER: &str = "\
You argue for the advertiser. For every point a prosecutor could raise, offer the most
plausible benign reading of the advertisement: treat emphatic wording as figurative where
the context allows it, and treat time-limited offers as ordinary promotions where they are.
Quote the exact phrases that establish the benign context. Do not invent context that is not there.";

const SKEPTIC: &str = "\
You are the production policy model and this advertisement falls in your uncertainty zone.
Describe the specific features that raise your estimated violation probability, and the
tension between those features and a compliant reading. Quote the exact phrases involved.";

const UMPIRE: &str = "\
You are a neutral adjudicator. Work facts first, logic second: first check the policy
clauses and reference exemplars below, then judge the arguments only against them.
Discard any argument that cites content absent from the advertisement or that is irrelevant
to the clauses, and say that you discarded it. Write one standardized reasoning chain that
cites clause ids (for example \"Per P33 (K12-T)\"), then give the verdict line.";

/// Everything a role prompt is assembled from.
#[derive(Debug, Clone, Copy)]
pub struct PromptContext<'a> {
    pub sample: &'a AdSample,
    /// Clauses whose verdicts are requested, in dimension order.
    pub policies: &'a [PolicyClause],
    pub evidence: &'a [Evidence],
    /// Replies the umpire adjudicates; ignored for other roles.
    pub arguments: &'a [AgentReply],
    pub labels_only: bool,
}

fn role_instructions(role: Role) -> &'static str {
    match role {
        Role::Prosecutor => PROSECUTOR,
        Role::Defender => DEFENDER,
        Role::Skeptic => SKEPTIC,
        Role::Umpire => UMPIRE,
    }
}

/// Renders the prompt for `role`. Deterministic for fixed inputs.
pub fn build_prompt(role: Role, ctx: &PromptContext<'_>) -> Result<String, GatewayError> {
    if role == Role::Umpire && ctx.arguments.is_empty() {
        return Err(GatewayError::UmpireWithoutArguments);
    }
    let mut p = String::new();
    let _ = writeln!(p, "=== ROLE: {} ===", role.as_str().to_uppercase());
    p.push_str(role_instructions(role));
    p.push('\n');
    if ctx.labels_only {
        p.push_str(if role == Role::Umpire {
            UMPIRE_LABELS_ONLY_LINE
        } else {
            LABELS_ONLY_LINE
        });
        p.push('\n');
    }

    p.push_str("\n=== POLICIES UNDER REVIEW ===\n");
    for c in ctx.policies {
        let _ = writeln!(p, "[{}] {} | {}", c.id, c.code, c.title);
        let _ = writeln!(p, "{}", c.body);
    }

    if !ctx.evidence.is_empty() {
        p.push_str("\n=== RETRIEVED EVIDENCE ===\n");
        for e in ctx.evidence {
            match e.kind {
                DocKind::Clause => {
                    let _ = writeln!(p, "[clause {} score={:.4}] {}", e.doc_id, e.score, e.text);
                }
                DocKind::Exemplar => {
                    let labels = if e.positive_keys.is_empty() {
                        "compliant".to_string()
                    } else {
                        format!("violates {}", e.positive_keys.join(","))
                    };
                    let _ = writeln!(
                        p,
                        "[exemplar {} score={:.4} {}] {}",
                        e.doc_id, e.score, labels, e.text
                    );
                }
            }
        }
    }

    p.push_str("\n=== ADVERTISEMENT ===\n");
    let s = ctx.sample;
    let _ = writeln!(p, "id: {}", s.id);
    let _ = writeln!(p, "text: {}", s.text.replace('\n', " "));
    if let Some(c) = &s.caption {
        let _ = writeln!(p, "caption: {}", c.replace('\n', " "));
    }
    if let Some(i) = &s.image_ref {
        let _ = writeln!(p, "image_ref: {i}");
    }

    if role == Role::Umpire {
        p.push_str("\n=== ARGUMENTS ===\n");
        for a in ctx.arguments {
            let _ = writeln!(p, "--- {} ---", a.role.as_str());
            let verdicts: Vec<String> = a.verdicts.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let _ = writeln!(p, "verdicts: {}", verdicts.join(", "));
            if !a.cot.is_empty() {
                let _ = writeln!(p, "{}", a.cot);
            }
        }
    }

    p.push_str("\n=== OUTPUT FORMAT ===\n");
    if ctx.labels_only && role != Role::Umpire {
        p.push_str("Reply with the verdict line only.\n");
    } else {
        p.push_str("Give your reasoning first.\n");
    }
    let keys: Vec<String> = ctx
        .policies
        .iter()
        .map(|c| format!("{}=<Violate|Comply>", c.id))
        .collect();
    let _ = writeln!(p, "End your reply with exactly one line: {VERDICT_PREFIX} {}", keys.join(", "));
    Ok(p)
}

const POLICY_MODEL: &str = "\
You are the production advertisement compliance model. Decide for each policy below whether
the advertisement violates it and explain the decisive evidence briefly.";

pub(crate) const POLICY_ROLE_HEADER: &str = "POLICY MODEL";

/// Prompt for the policy model itself. `response_index` numbers the draws of
/// a rollout group so that each draw is a distinct request.
pub fn build_policy_prompt(
    sample: &AdSample,
    policies: &[PolicyClause],
    response_index: Option<usize>,
    labels_only: bool,
) -> String {
    let mut p = String::new();
    let _ = writeln!(p, "=== ROLE: {POLICY_ROLE_HEADER} ===");
    p.push_str(POLICY_MODEL);
    p.push('\n');
    if labels_only {
        p.push_str(LABELS_ONLY_LINE);
        p.push('\n');
    }
    if let Some(i) = response_index {
        let _ = writeln!(p, "Sample {i}.");
    }
    p.push_str("\n=== POLICIES UNDER REVIEW ===\n");
    for c in policies {
        let _ = writeln!(p, "[{}] {} | {}", c.id, c.code, c.title);
        let _ = writeln!(p, "{}", c.body);
    }
    p.push_str("\n=== ADVERTISEMENT ===\n");
    let _ = writeln!(p, "id: {}", sample.id);
    let _ = writeln!(p, "text: {}", sample.text.replace('\n', " "));
    if let Some(c) = &sample.caption {
        let _ = writeln!(p, "caption: {}", c.replace('\n', " "));
    }
    if let Some(i) = &sample.image_ref {
        let _ = writeln!(p, "image_ref: {i}");
    }
    p.push_str("\n=== OUTPUT FORMAT ===\n");
    let keys: Vec<String> = policies.iter().map(|c| format!("{}=<Violate|Comply>", c.id)).collect();
    let _ = writeln!(p, "End your reply with exactly one line: {VERDICT_PREFIX} {}", keys.join(", "));
    p
}

/// Suffix appended when a reply could not be parsed.
pub fn reinstruction_suffix(keys: &[PolicyKey]) -> String {
    let keys: Vec<String> = keys.iter().map(|k| format!("{k}=<Violate|Comply>")).collect();
    format!(
        "\n\nYour previous reply could not be parsed. End your reply with exactly one line: {VERDICT_PREFIX} {}",
        keys.join(", ")
    )
}

/// A prompt read back into its parts; used by the scripted backend.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct ParsedPrompt {
    pub role: Option<Role>,
    pub policy_model: bool,
    pub response_index: Option<usize>,
    pub labels_only: bool,
    /// (key, code) for each policy under review.
    pub policies: Vec<(PolicyKey, String)>,
    pub clause_bodies: BTreeMap<PolicyKey, String>,
    pub ad_text: String,
    pub arguments: Vec<ParsedArgument>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParsedArgument {
    pub role: Role,
    pub verdicts: BTreeMap<PolicyKey, Verdict>,
    pub cot: String,
}

impl ParsedPrompt {
    pub fn parse(prompt: &str) -> Self {
        let mut out = ParsedPrompt::default();
        let mut section = "";
        let mut pending_policy: Option<PolicyKey> = None;
        let mut text = String::new();
        let mut caption = String::new();
        for line in prompt.lines() {
            if let Some(rest) = line.strip_prefix("=== ").and_then(|l| l.strip_suffix(" ===")) {
                if let Some(role) = rest.strip_prefix("ROLE: ") {
                    out.role = Role::parse(role);
                    out.policy_model = role == POLICY_ROLE_HEADER;
                    section = "ROLE";
                } else {
                    section = match rest {
                        "POLICIES UNDER REVIEW" => "POLICIES",
                        "RETRIEVED EVIDENCE" => "EVIDENCE",
                        "ADVERTISEMENT" => "AD",
                        "ARGUMENTS" => "ARGS",
                        _ => "OTHER",
                    };
                }
                continue;
            }
            match section {
                "ROLE" if line == LABELS_ONLY_LINE || line == UMPIRE_LABELS_ONLY_LINE => {
                    out.labels_only = true
                }
                "ROLE" => {
                    if let Some(i) = line.strip_prefix("Sample ").and_then(|l| l.strip_suffix('.')) {
                        out.response_index = i.parse().ok();
                    }
                }
                "POLICIES" => {
                    if let Some(key) = pending_policy.take() {
                        out.clause_bodies.insert(key, line.to_string());
                    } else if let Some(rest) = line.strip_prefix('[') {
                        if let Some((key, tail)) = rest.split_once("] ") {
                            let code = tail.split(" | ").next().unwrap_or("").to_string();
                            out.policies.push((key.to_string(), code));
                            pending_policy = Some(key.to_string());
                        }
                    }
                }
                "AD" => {
                    if let Some(t) = line.strip_prefix("text: ") {
                        text = t.to_string();
                    } else if let Some(c) = line.strip_prefix("caption: ") {
                        caption = c.to_string();
                    }
                }
                "ARGS" => {
                    if let Some(role) = line.strip_prefix("--- ").and_then(|l| l.strip_suffix(" ---")) {
                        if let Some(role) = Role::parse(role) {
                            out.arguments.push(ParsedArgument {
                                role,
                                verdicts: BTreeMap::new(),
                                cot: String::new(),
                            });
                        }
                    } else if let Some(arg) = out.arguments.last_mut() {
                        if let Some(v) = line.strip_prefix("verdicts: ") {
                            for entry in v.split(", ").filter(|e| !e.is_empty()) {
                                if let Some((k, val)) = entry.split_once('=') {
                                    let verdict = if val == "Violate" {
                                        Verdict::Violate
                                    } else {
                                        Verdict::Comply
                                    };
                                    arg.verdicts.insert(k.to_string(), verdict);
                                }
                            }
                        } else if !line.is_empty() {
                            if !arg.cot.is_empty() {
                                arg.cot.push('\n');
                            }
                            arg.cot.push_str(line);
                        }
                    }
                }
                _ => {}
            }
        }
        out.ad_text = if caption.is_empty() {
            text
        } else {
            format!("{text} {caption}")
        };
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Partition;
    use crate::fixtures;
    use std::time::Duration;

    fn p33() -> PolicyClause {
        fixtures::builtin_catalog().into_iter().find(|c| c.id == "P33").unwrap()
    }

    fn reply(role: Role, verdict: Verdict, cot: &str) -> AgentReply {
        AgentReply {
            role,
            verdicts: [("P33".to_string(), verdict)].into_iter().collect(),
            cot: cot.into(),
            raw: String::new(),
            latency: Duration::ZERO,
            warnings: vec![],
        }
    }

    #[test]
    fn prosecutor_prompt_embeds_clause_and_bias() {
        let sample = AdSample::new("s1", "Guaranteed admission to elite schools", Partition::Historical);
        let policies = [p33()];
        let ctx = PromptContext {
            sample: &sample,
            policies: &policies,
            evidence: &[],
            arguments: &[],
            labels_only: false,
        };
        let p = build_prompt(Role::Prosecutor, &ctx).unwrap();
        assert!(p.contains(&p33().body));
        assert!(p.contains("Look for any possible violation"));
        assert!(p.contains("VERDICT: P33=<Violate|Comply>"));
        assert_eq!(p, build_prompt(Role::Prosecutor, &ctx).unwrap());
    }

    #[test]
    fn umpire_prompt_orders_facts_before_arguments() {
        let sample = AdSample::new("s1", "Guaranteed admission", Partition::Historical);
        let policies = [p33()];
        let args = [
            reply(Role::Prosecutor, Verdict::Violate, "It says \"guaranteed admission\"."),
            reply(Role::Defender, Verdict::Comply, "Just enthusiasm."),
        ];
        let ctx = PromptContext {
            sample: &sample,
            policies: &policies,
            evidence: &[],
            arguments: &args,
            labels_only: false,
        };
        let p = build_prompt(Role::Umpire, &ctx).unwrap();
        let clause_at = p.find(&p33().body).unwrap();
        let pros_at = p.find("--- Prosecutor ---").unwrap();
        let def_at = p.find("--- Defender ---").unwrap();
        assert!(clause_at < pros_at && pros_at < def_at);
        assert!(p.contains("Just enthusiasm."));

        let parsed = ParsedPrompt::parse(&p);
        assert_eq!(parsed.role, Some(Role::Umpire));
        assert_eq!(parsed.policies, vec![("P33".to_string(), "K12-T".to_string())]);
        assert_eq!(parsed.arguments.len(), 2);
        assert_eq!(parsed.arguments[0].verdicts["P33"], Verdict::Violate);
        assert_eq!(parsed.arguments[1].cot, "Just enthusiasm.");
        assert_eq!(parsed.ad_text, "Guaranteed admission");
    }

    #[test]
    fn umpire_needs_arguments() {
        let sample = AdSample::new("s1", "x", Partition::Historical);
        let ctx = PromptContext {
            sample: &sample,
            policies: &[],
            evidence: &[],
            arguments: &[],
            labels_only: false,
        };
        assert!(matches!(
            build_prompt(Role::Umpire, &ctx),
            Err(GatewayError::UmpireWithoutArguments)
        ));
    }
}
