//! Built-in policy catalog and the cue lexicon behind the scripted backends.
//!
//! The catalog holds 32 historical clauses (P1..P32) and the five emerging
//! clauses P33..P37. The lexicon lists, per policy, the surface phrases that
//! signal a violation (by tier) and the benign-context markers that neutralise
//! an otherwise violating phrase. Scripted agents, the synthetic corpus
//! generator and the scripted policy scorer all read from this one table.

use std::sync::OnceLock;

use crate::policy::{ClauseStatus, PolicyClause};

/// Version id of the historical policy set (P1..P32).
pub const P_OLD: &str = "2024-h2";
/// Version id of the expanded policy set (P1..P37).
pub const P_NEW: &str = "2025-h1";

/// Probability the scripted scorer assigns when no known cue is present.
pub const BASE_RATE: f64 = 0.05;
/// Label threshold of the scripted scorer.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CueTier {
    /// Phrases quoted by the clause itself; easy to spot.
    Overt,
    /// Paraphrases that still carry the violating intent.
    Subtle,
    /// Indirect framing; only learnable from co-occurrence with subtle cues.
    Deep,
    /// Context that makes a violating-looking phrase legitimate.
    Benign,
}

impl CueTier {
    /// Scorer output when exactly one cue of this tier is known and present.
    pub fn probability(self) -> f64 {
        match self {
            CueTier::Overt => 0.9,
            CueTier::Subtle => 0.8,
            CueTier::Deep => 0.75,
            CueTier::Benign => 0.75,
        }
    }

    pub fn is_violation(self) -> bool {
        !matches!(self, CueTier::Benign)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cue {
    pub key: &'static str,
    pub phrase: &'static str,
    pub tier: CueTier,
}

pub struct Lexicon {
    cues: Vec<Cue>,
}

impl Lexicon {
    pub fn all(&self) -> &[Cue] {
        &self.cues
    }

    pub fn for_key<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a Cue> + 'a {
        self.cues.iter().filter(move |c| c.key == key)
    }

    pub fn violation_cues<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a Cue> + 'a {
        self.for_key(key).filter(|c| c.tier.is_violation())
    }

    pub fn benign_markers<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a Cue> + 'a {
        self.for_key(key).filter(|c| c.tier == CueTier::Benign)
    }

    pub fn tier(&self, key: &str, phrase: &str) -> Option<CueTier> {
        self.for_key(key).find(|c| c.phrase == phrase).map(|c| c.tier)
    }

    pub fn phrases_of_tier<'a>(&'a self, key: &'a str, tier: CueTier) -> Vec<&'static str> {
        self.for_key(key)
            .filter(|c| c.tier == tier)
            .map(|c| c.phrase)
            .collect()
    }
}

struct HistoricalEntry {
    code: &'static str,
    title: &'static str,
    cue: &'static str,
}

const HISTORICAL: [HistoricalEntry; 32] = [
    HistoricalEntry { code: "Porn", title: "Pornographic Content", cue: "explicit nude content" },
    HistoricalEntry { code: "Viol", title: "Graphic Violence", cue: "graphic violence" },
    HistoricalEntry { code: "Gore", title: "Gore and Bloodiness", cue: "bloody gore" },
    HistoricalEntry { code: "Hate", title: "Hate Speech", cue: "hate speech" },
    HistoricalEntry { code: "Proh", title: "Prohibited Items", cue: "buy firearms online" },
    HistoricalEntry { code: "Drug", title: "Illegal Drugs", cue: "recreational drugs delivered" },
    HistoricalEntry { code: "Gamb", title: "Unlicensed Gambling", cue: "online casino bonus" },
    HistoricalEntry { code: "AbsT", title: "Absolute Terminology", cue: "number one in the world" },
    HistoricalEntry { code: "Exag", title: "Exaggerated Marketing", cue: "one hundred percent effective" },
    HistoricalEntry { code: "IPIn", title: "Intellectual Property Infringement", cue: "replica designer logo" },
    HistoricalEntry { code: "Cntf", title: "Counterfeit Goods", cue: "counterfeit watches" },
    HistoricalEntry { code: "Tobc", title: "Tobacco Promotion", cue: "discount cigarettes" },
    HistoricalEntry { code: "Alcm", title: "Alcohol Targeting Minors", cue: "alcohol for teens" },
    HistoricalEntry { code: "Weap", title: "Weapons and Accessories", cue: "tactical knives sale" },
    HistoricalEntry { code: "Scam", title: "Advance-Fee Fraud", cue: "send money to claim" },
    HistoricalEntry { code: "Pyrm", title: "Pyramid Schemes", cue: "recruit three friends to earn" },
    HistoricalEntry { code: "Medl", title: "Unlicensed Medical Services", cue: "prescription without doctor" },
    HistoricalEntry { code: "Priv", title: "Privacy Violation", cue: "phone number lookup service" },
    HistoricalEntry { code: "Hack", title: "Hacking Tools", cue: "hack any account" },
    HistoricalEntry { code: "Poli", title: "Undisclosed Political Advertising", cue: "vote for our candidate" },
    HistoricalEntry { code: "Disc", title: "Discriminatory Targeting", cue: "no minorities allowed" },
    HistoricalEntry { code: "Chld", title: "Child Endangerment", cue: "kids left unsupervised" },
    HistoricalEntry { code: "Self", title: "Self-Harm Promotion", cue: "self harm tips" },
    HistoricalEntry { code: "Terr", title: "Extremist Content", cue: "extremist recruitment" },
    HistoricalEntry { code: "Pric", title: "Misleading Pricing", cue: "hidden fees apply" },
    HistoricalEntry { code: "Revw", title: "Fake Reviews", cue: "paid five star reviews" },
    HistoricalEntry { code: "Cryp", title: "Unlicensed Crypto Offerings", cue: "guaranteed crypto returns" },
    HistoricalEntry { code: "Loan", title: "Predatory Lending", cue: "instant loan no credit check" },
    HistoricalEntry { code: "Escr", title: "Adult Services", cue: "escort service" },
    HistoricalEntry { code: "Vulg", title: "Vulgar Language", cue: "profanity laced" },
    HistoricalEntry { code: "Supr", title: "Superstition", cue: "lucky charm cures" },
    HistoricalEntry { code: "Impr", title: "Government Impersonation", cue: "official government notice" },
];

struct EmergingEntry {
    id: &'static str,
    code: &'static str,
    title: &'static str,
    body: &'static str,
    overt: [&'static str; 2],
    subtle: [&'static str; 2],
    deep: [&'static str; 2],
    benign: [&'static str; 2],
}

const EMERGING: [EmergingEntry; 5] = [
    EmergingEntry {
        id: "P33",
        code: "K12-T",
        title: "K12 Achievement-Driven Tutoring",
        body: "Targets achievement-driven academic tutoring for K-12 students. It prohibits promoting \"exam shortcuts\" or \"guaranteed admission\" that exploit parental anxiety and utilitarian educational goals.",
        overt: ["guaranteed admission", "exam shortcuts"],
        subtle: ["admission ticket", "master six years of math in 15 days"],
        deep: ["top school seat secured", "parents who wait fall behind"],
        benign: ["free public open day", "library homework club"],
    },
    EmergingEntry {
        id: "P34",
        code: "Aest-A",
        title: "Body & Aesthetic Anxiety",
        body: "Regulates content that promotes singular beauty standards (e.g., extreme thinness) or implies that physical flaws are barriers to a successful life, thereby inducing psychological distress and body dysmorphia.",
        overt: ["extreme thinness", "imperfect profiles"],
        subtle: ["loss of assets", "jawline angle score"],
        deep: ["ticket to top social circles", "one degree off"],
        benign: ["figure drawing class", "body positive campaign"],
    },
    EmergingEntry {
        id: "P35",
        code: "Info-A",
        title: "Information Arbitrage Inducement",
        body: "Prohibits inducing financial investment through claims of \"insider info\" or \"unclosed trends.\" It targets the masking of fraudulent risks under the guise of \"wealth shortcuts\" or exclusive \"circle privileges.\"",
        overt: ["insider info", "unclosed trends"],
        subtle: ["wealth shortcuts", "circle privileges"],
        deep: ["only members see the next move", "quiet money moves first"],
        benign: ["licensed investor education", "past performance is not indicative"],
    },
    EmergingEntry {
        id: "P36",
        code: "Press-I",
        title: "High-Pressure Purchase Inducement",
        body: "Regulates the use of artificial urgency (e.g., fake countdowns, false stock limits) and compulsive logic (e.g., \"regret for life\") designed to bypass rational decision-making in e-commerce.",
        overt: ["regret for life", "last chance forever"],
        subtle: ["only 3 left in stock", "timer ends tonight"],
        deep: ["everyone else already bought", "price doubles at midnight"],
        benign: ["annual holiday sale", "official seasonal promotion"],
    },
    EmergingEntry {
        id: "P37",
        code: "Heal-E",
        title: "Non-Medical Health Exaggeration",
        body: "Targets non-medical supplements claiming therapeutic effects (e.g., \"curing cancer\" or \"restoring physiological indicators\"). It prohibits substituting professional medical treatment with vague health-related efficacy claims.",
        overt: ["curing cancer", "restoring physiological indicators"],
        subtle: ["no need for medication", "doctors hate this"],
        deep: ["feel decades younger inside", "cellular reset formula"],
        benign: ["not intended to diagnose or treat", "consult your physician"],
    },
];

/// Relative positive volume of the emerging policies, per thousand positives.
pub const EMERGING_POSITIVE_WEIGHTS: [(&str, u32); 5] =
    [("P33", 45), ("P34", 98), ("P35", 75), ("P36", 52), ("P37", 57)];

/// The five emerging keys.
pub fn emerging_keys() -> Vec<String> {
    EMERGING.iter().map(|e| e.id.to_string()).collect()
}

/// The 32 historical keys.
pub fn historical_keys() -> Vec<String> {
    (1..=HISTORICAL.len()).map(|k| format!("P{k}")).collect()
}

/// P1..P32 introduced in [`P_OLD`], P33..P37 introduced in [`P_NEW`].
pub fn builtin_catalog() -> Vec<PolicyClause> {
    let mut out = Vec::with_capacity(37);
    for (i, h) in HISTORICAL.iter().enumerate() {
        out.push(PolicyClause {
            id: format!("P{}", i + 1),
            code: h.code.to_string(),
            title: h.title.to_string(),
            body: format!(
                "Prohibits advertisements involving {}. Creatives featuring \"{}\" or equivalent material are rejected.",
                h.title.to_lowercase(),
                h.cue
            ),
            status: ClauseStatus::Historical,
            introduced_in: P_OLD.to_string(),
        });
    }
    for e in &EMERGING {
        out.push(PolicyClause {
            id: e.id.to_string(),
            code: e.code.to_string(),
            title: e.title.to_string(),
            body: e.body.to_string(),
            status: ClauseStatus::Emerging,
            introduced_in: P_NEW.to_string(),
        });
    }
    out
}

pub fn lexicon() -> &'static Lexicon {
    static LEXICON: OnceLock<Lexicon> = OnceLock::new();
    LEXICON.get_or_init(|| {
        let mut cues = Vec::new();
        for (i, h) in HISTORICAL.iter().enumerate() {
            // Leaked so every cue carries a &'static key; the table is built once.
            let key: &'static str = Box::leak(format!("P{}", i + 1).into_boxed_str());
            cues.push(Cue {
                key,
                phrase: h.cue,
                tier: CueTier::Overt,
            });
        }
        for e in &EMERGING {
            let tiers = [
                (CueTier::Overt, &e.overt),
                (CueTier::Subtle, &e.subtle),
                (CueTier::Deep, &e.deep),
                (CueTier::Benign, &e.benign),
            ];
            for (tier, phrases) in tiers {
                for p in phrases.iter() {
                    cues.push(Cue {
                        key: e.id,
                        phrase: p,
                        tier,
                    });
                }
            }
        }
        Lexicon { cues }
    })
}

/// Word-level homophone and look-alike substitutions used to build evasion corpora.
/// Words without an entry are obfuscated by letter spacing instead.
pub const HOMOPHONES: [(&str, &str); 24] = [
    ("guaranteed", "garanteed"),
    ("admission", "admisshun"),
    ("exam", "egzam"),
    ("shortcuts", "shawtcuts"),
    ("extreme", "xtreme"),
    ("thinness", "thinnes"),
    ("imperfect", "imperfekt"),
    ("insider", "1nsider"),
    ("info", "inf0"),
    ("trends", "trendz"),
    ("regret", "regrett"),
    ("life", "lyfe"),
    ("chance", "chanse"),
    ("curing", "kuring"),
    ("cancer", "canser"),
    ("restoring", "restorin"),
    ("wealth", "welth"),
    ("privileges", "privilejes"),
    ("medication", "medikation"),
    ("doctors", "docs"),
    ("ticket", "tikket"),
    ("assets", "asets"),
    ("stock", "stok"),
    ("tonight", "2nite"),
];
