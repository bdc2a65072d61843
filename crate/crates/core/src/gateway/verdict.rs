//! The trailing verdict line every agent reply must carry:
//!
//! ```text
//! VERDICT: P33=Violate, P34=Comply
//! ```
//!
//! Everything that is not a verdict line is the chain of thought.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::PolicyKey;

pub const VERDICT_PREFIX: &str = "VERDICT:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Violate,
    Comply,
}

impl Verdict {
    pub fn from_label(label: u8) -> Self {
        if label == 1 {
            Verdict::Violate
        } else {
            Verdict::Comply
        }
    }

    pub fn label(self) -> u8 {
        match self {
            Verdict::Violate => 1,
            Verdict::Comply => 0,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Violate => "Violate",
            Verdict::Comply => "Comply",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VerdictError {
    #[error("reply has no VERDICT line")]
    MissingBlock,
    #[error("unparseable verdict entry {0:?}")]
    BadEntry(String),
    #[error("reply has a verdict but no reasoning")]
    EmptyCot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedVerdict {
    pub verdicts: BTreeMap<PolicyKey, Verdict>,
    pub cot: String,
    pub warnings: Vec<String>,
}

/// Renders a verdict line for `verdicts` in key order.
pub fn format_verdict_line<'a, I>(verdicts: I) -> String
where
    I: IntoIterator<Item = (&'a PolicyKey, &'a Verdict)>,
{
    let entries: Vec<String> = verdicts
        .into_iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    format!("{VERDICT_PREFIX} {}", entries.join(", "))
}

fn parse_block(body: &str) -> Result<BTreeMap<PolicyKey, Verdict>, VerdictError> {
    let mut out = BTreeMap::new();
    for entry in body.split(',') {
        let entry = entry.trim();
        let (key, value) = entry
            .split_once('=')
            .ok_or_else(|| VerdictError::BadEntry(entry.to_string()))?;
        let key = key.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(VerdictError::BadEntry(entry.to_string()));
        }
        let verdict = match value.trim() {
            "Violate" => Verdict::Violate,
            "Comply" => Verdict::Comply,
            _ => return Err(VerdictError::BadEntry(entry.to_string())),
        };
        out.insert(key.to_string(), verdict);
    }
    Ok(out)
}

/// Splits a raw reply into its verdict block and reasoning. When several
/// blocks are present the last one wins and a warning is recorded.
pub fn parse_verdict(raw: &str) -> Result<ParsedVerdict, VerdictError> {
    parse_verdict_with(raw, false)
}

/// As [`parse_verdict`]; `allow_empty_cot` accepts verdict-only replies.
pub fn parse_verdict_with(raw: &str, allow_empty_cot: bool) -> Result<ParsedVerdict, VerdictError> {
    let mut blocks = Vec::new();
    let mut prose = Vec::new();
    for line in raw.lines() {
        match line.trim().strip_prefix(VERDICT_PREFIX) {
            Some(body) => blocks.push(parse_block(body)?),
            None => prose.push(line),
        }
    }
    let mut warnings = Vec::new();
    if blocks.len() > 1 {
        let conflicting = blocks.windows(2).any(|w| w[0] != w[1]);
        warnings.push(format!(
            "{} verdict blocks{}; using the last",
            blocks.len(),
            if conflicting { " disagree" } else { "" }
        ));
    }
    let verdicts = blocks.pop().ok_or(VerdictError::MissingBlock)?;
    let cot = prose.join("\n").trim().to_string();
    if cot.is_empty() && !allow_empty_cot {
        return Err(VerdictError::EmptyCot);
    }
    Ok(ParsedVerdict {
        verdicts,
        cot,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_and_prose_split() {
        let p = parse_verdict("The ad promises guaranteed admission.\nVERDICT: P33=Violate").unwrap();
        assert_eq!(p.verdicts.len(), 1);
        assert_eq!(p.verdicts["P33"], Verdict::Violate);
        assert_eq!(p.cot, "The ad promises guaranteed admission.");
        assert!(p.warnings.is_empty());
    }

    #[test]
    fn verdict_only_needs_opt_in() {
        assert_eq!(parse_verdict("VERDICT: P33=Comply"), Err(VerdictError::EmptyCot));
        let p = parse_verdict_with("VERDICT: P33=Comply", true).unwrap();
        assert_eq!(p.cot, "");
    }

    #[test]
    fn last_of_conflicting_blocks_wins() {
        // Oracle: the rule is "last block wins", so scan lines backwards for the first block.
        let raw = "first thoughts\nVERDICT: P33=Violate, P34=Comply\nsecond thoughts\nVERDICT: P33=Comply";
        let p = parse_verdict(raw).unwrap();
        let last_line = raw.lines().rev().find(|l| l.starts_with(VERDICT_PREFIX)).unwrap();
        assert_eq!(p.verdicts, parse_block(&last_line[VERDICT_PREFIX.len()..]).unwrap());
        assert_eq!(p.verdicts.len(), 1);
        assert_eq!(p.warnings.len(), 1);
        assert!(p.warnings[0].contains("disagree"));
        assert_eq!(p.cot, "first thoughts\nsecond thoughts");
    }

    #[test]
    fn missing_or_bad_block() {
        assert_eq!(parse_verdict("free text, Verdict: Violate"), Err(VerdictError::MissingBlock));
        assert!(matches!(parse_verdict("x\nVERDICT: P33=Maybe"), Err(VerdictError::BadEntry(_))));
        assert!(matches!(parse_verdict("x\nVERDICT: P33"), Err(VerdictError::BadEntry(_))));
        assert!(matches!(parse_verdict("x\nVERDICT:"), Err(VerdictError::BadEntry(_))));
    }

    #[test]
    fn format_round_trips() {
        let mut m = BTreeMap::new();
        m.insert("P33".to_string(), Verdict::Violate);
        m.insert("P34".to_string(), Verdict::Comply);
        let line = format_verdict_line(&m);
        assert_eq!(line, "VERDICT: P33=Violate, P34=Comply");
        let p = parse_verdict(&format!("why\n{line}")).unwrap();
        assert_eq!(p.verdicts, m);
    }
}
