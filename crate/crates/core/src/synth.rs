//! Planted synthetic corpora.
//!
//! Every generated ad is built from neutral filler sentences plus the cue
//! phrases of its plant, and the generator checks that no other lexicon phrase
//! slipped in. Ground truth is therefore known exactly.
//!
//! Emerging-policy violators come in five tiers of difficulty:
//!
//! | kind           | cues present        | who can see it                       |
//! |----------------|---------------------|--------------------------------------|
//! | `overt`        | overt               | a model seeded from gold data        |
//! | `overt_subtle` | overt + subtle      | the same; teaches subtle once fixed  |
//! | `subtle`       | subtle              | a model that learned subtle cues     |
//! | `subtle_deep`  | subtle + deep       | the same; teaches deep once fixed    |
//! | `deep`         | deep                | only a model that learned deep cues  |
//!
//! Look-alikes pair an overt cue with a benign-context marker and are compliant.
//! Historical samples carry labels under the old policy set, so every emerging
//! violator is stored as compliant there.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AdSample, ComplianceVector, LabelSource, LabeledSample, Partition};
use crate::fixtures::{self, CueTier, EMERGING_POSITIVE_WEIGHTS, HOMOPHONES, P_NEW, P_OLD};
use crate::retrieval::Exemplar;
use crate::text::{contains_phrase, normalized_padded, stable_hash, tokenize};
use crate::PolicyKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    Clean,
    Historical,
    Overt,
    OvertSubtle,
    Subtle,
    SubtleDeep,
    Deep,
    LookAlike,
}

impl PlantKind {
    pub const EMERGING_TIERS: [PlantKind; 5] = [
        PlantKind::Overt,
        PlantKind::OvertSubtle,
        PlantKind::Subtle,
        PlantKind::SubtleDeep,
        PlantKind::Deep,
    ];

    fn tiers(self) -> &'static [CueTier] {
        match self {
            PlantKind::Overt | PlantKind::Historical => &[CueTier::Overt],
            PlantKind::OvertSubtle => &[CueTier::Overt, CueTier::Subtle],
            PlantKind::Subtle => &[CueTier::Subtle],
            PlantKind::SubtleDeep => &[CueTier::Subtle, CueTier::Deep],
            PlantKind::Deep => &[CueTier::Deep],
            PlantKind::LookAlike => &[CueTier::Overt, CueTier::Benign],
            PlantKind::Clean => &[],
        }
    }

    pub fn is_emerging_violation(self) -> bool {
        Self::EMERGING_TIERS.contains(&self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSample {
    pub sample: AdSample,
    pub kind: PlantKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_key: Option<PolicyKey>,
    /// Keys violated under the new policy set.
    pub truth: Vec<PolicyKey>,
    /// Keys labeled violated under the old policy set.
    pub legacy: Vec<PolicyKey>,
}

impl PlantedSample {
    pub fn truth_vector(&self, dims: &[PolicyKey]) -> ComplianceVector {
        vector(dims, &self.truth)
    }

    pub fn legacy_vector(&self, dims: &[PolicyKey]) -> ComplianceVector {
        vector(dims, &self.legacy)
    }
}

fn vector(dims: &[PolicyKey], positives: &[PolicyKey]) -> ComplianceVector {
    ComplianceVector::from_labels(
        dims.iter()
            .map(|k| (k.clone(), u8::from(positives.contains(k)))),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_hist: usize,
    pub n_gold: usize,
    pub n_test: usize,
    /// Share of historical and test samples that violate an emerging policy.
    pub emerging_rate: f64,
    pub historical_rate: f64,
    pub lookalike_rate: f64,
    /// Share of gold samples that are overt emerging violators.
    pub gold_emerging_rate: f64,
    pub gold_historical_rate: f64,
    /// Relative weight of each emerging tier, in [`PlantKind::EMERGING_TIERS`] order.
    pub tier_mix: [f64; 5],
    /// Share of samples whose planted cue sits in the image caption.
    pub caption_rate: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 7,
            n_hist: 1500,
            n_gold: 150,
            n_test: 600,
            emerging_rate: 0.15,
            historical_rate: 0.15,
            lookalike_rate: 0.04,
            gold_emerging_rate: 0.5,
            gold_historical_rate: 0.2,
            tier_mix: [15.0, 30.0, 15.0, 25.0, 15.0],
            caption_rate: 0.2,
        }
    }
}

impl CorpusSpec {
    /// The 500-sample historical corpus used for rectification runs.
    pub fn small(seed: u64) -> Self {
        CorpusSpec {
            seed,
            n_hist: 500,
            n_gold: 100,
            n_test: 200,
            ..CorpusSpec::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub corpus_id: String,
    pub spec: CorpusSpec,
    pub historical: Vec<PlantedSample>,
    pub gold: Vec<PlantedSample>,
    pub test: Vec<PlantedSample>,
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("corpus file {path}: {message}")]
    File { path: String, message: String },
}

const BRANDS: [&str; 8] = [
    "Northwind", "Bluepeak", "Harbor Lane", "Maple Row", "Solstice", "Everly", "Quillon", "Tidewater",
];
const PRODUCTS: [&str; 10] = [
    "learning center",
    "fitness studio",
    "skincare line",
    "herbal tea blend",
    "market newsletter",
    "fashion outlet",
    "coffee subscription",
    "language school",
    "travel club",
    "home bakery",
];
const FILLERS: [&str; 10] = [
    "{brand} {product} opens a new branch this month.",
    "Visit the {brand} {product} downtown or browse online.",
    "Members of the {product} get a welcome gift.",
    "Thousands of customers trust {brand}.",
    "Free shipping on orders over forty dollars.",
    "Friendly staff are ready to help you choose.",
    "Follow {brand} for weekly updates.",
    "Our {product} has served the neighborhood for ten years.",
    "Book a visit with one click.",
    "Gift cards are available in every store.",
];
const CUE_FRAMES: [&str; 6] = [
    "Our promise: {cue}.",
    "Sign up today for {cue}.",
    "{Cue}, only at {brand}.",
    "Ask our team about {cue}.",
    "This season it is all about {cue}.",
    "{Cue} for every customer.",
];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, xs: &'a [T]) -> &'a T {
    xs.choose(rng).expect("non-empty table")
}

fn fill(template: &str, brand: &str, product: &str, cue: &str) -> String {
    template
        .replace("{brand}", brand)
        .replace("{product}", product)
        .replace("{Cue}", &capitalize(cue))
        .replace("{cue}", cue)
}

/// Every lexicon phrase present in `text`, as (key, phrase).
pub fn lexicon_hits(text: &str) -> BTreeSet<(String, String)> {
    let padded = normalized_padded(text);
    fixtures::lexicon()
        .all()
        .iter()
        .filter(|c| contains_phrase(&padded, c.phrase))
        .map(|c| (c.key.to_string(), c.phrase.to_string()))
        .collect()
}

fn weighted_index(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

fn emerging_key(rng: &mut ChaCha8Rng) -> PolicyKey {
    let weights: Vec<f64> = EMERGING_POSITIVE_WEIGHTS.iter().map(|(_, w)| *w as f64).collect();
    EMERGING_POSITIVE_WEIGHTS[weighted_index(rng, &weights)].0.to_string()
}

/// Builds ad text carrying exactly `cues`.
fn compose(
    rng: &mut ChaCha8Rng,
    id: &str,
    cues: &[(String, &'static str)],
    caption_rate: f64,
    partition: Partition,
) -> AdSample {
    let expected: BTreeSet<(String, String)> =
        cues.iter().map(|(k, p)| (k.clone(), p.to_string())).collect();
    for _ in 0..32 {
        let brand = *pick(rng, &BRANDS);
        let product = *pick(rng, &PRODUCTS);
        let mut sentences: Vec<String> = (0..rng.gen_range(1..=3))
            .map(|_| fill(pick(rng, &FILLERS), brand, product, ""))
            .collect();
        let mut caption = None;
        for (i, (_, cue)) in cues.iter().enumerate() {
            let s = fill(pick(rng, &CUE_FRAMES), brand, product, cue);
            if i == 0 && rng.gen_bool(caption_rate) {
                caption = Some(format!("Image: a banner reading \"{s}\""));
            } else {
                let at = rng.gen_range(0..=sentences.len());
                sentences.insert(at, s);
            }
        }
        sentences.dedup();
        let mut sample = AdSample::new(id, sentences.join(" "), partition);
        if let Some(c) = caption {
            sample.image_ref = Some(format!("img://synth/{id}.png"));
            sample.caption = Some(c);
        }
        if lexicon_hits(&sample.content_text()) == expected {
            return sample;
        }
    }
    panic!("could not compose a clean ad for {id} with cues {expected:?}");
}

fn plant(
    rng: &mut ChaCha8Rng,
    id: &str,
    kind: PlantKind,
    key: Option<PolicyKey>,
    spec: &CorpusSpec,
    partition: Partition,
) -> PlantedSample {
    let lex = fixtures::lexicon();
    let cues: Vec<(String, &'static str)> = match &key {
        Some(k) => kind
            .tiers()
            .iter()
            .map(|&t| (k.clone(), *pick(rng, &lex.phrases_of_tier(k, t))))
            .collect(),
        None => Vec::new(),
    };
    let sample = compose(rng, id, &cues, spec.caption_rate, partition);
    let truth: Vec<PolicyKey> = match (&key, kind) {
        (Some(k), PlantKind::Historical) => vec![k.clone()],
        (Some(k), kind) if kind.is_emerging_violation() => vec![k.clone()],
        _ => Vec::new(),
    };
    let legacy = truth
        .iter()
        .filter(|k| !fixtures::emerging_keys().contains(k))
        .cloned()
        .collect();
    PlantedSample {
        sample,
        kind,
        planted_key: key,
        truth,
        legacy,
    }
}

fn draw_kind(rng: &mut ChaCha8Rng, spec: &CorpusSpec) -> (PlantKind, Option<PolicyKey>) {
    let u: f64 = rng.gen();
    if u < spec.emerging_rate {
        let kind = PlantKind::EMERGING_TIERS[weighted_index(rng, &spec.tier_mix)];
        (kind, Some(emerging_key(rng)))
    } else if u < spec.emerging_rate + spec.lookalike_rate {
        (PlantKind::LookAlike, Some(emerging_key(rng)))
    } else if u < spec.emerging_rate + spec.lookalike_rate + spec.historical_rate {
        (PlantKind::Historical, Some(pick(rng, &fixtures::historical_keys()).clone()))
    } else {
        (PlantKind::Clean, None)
    }
}

fn split_rng(seed: u64, split: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_hash(&[&seed.to_le_bytes(), split.as_bytes()]))
}

impl Corpus {
    pub fn generate(spec: &CorpusSpec) -> Corpus {
        let mut rng = split_rng(spec.seed, "historical");
        let historical = (0..spec.n_hist)
            .map(|i| {
                let (kind, key) = draw_kind(&mut rng, spec);
                plant(&mut rng, &format!("h{i:05}"), kind, key, spec, Partition::Historical)
            })
            .collect();

        let mut rng = split_rng(spec.seed, "gold");
        let gold = (0..spec.n_gold)
            .map(|i| {
                let u: f64 = rng.gen();
                let (kind, key) = if u < spec.gold_emerging_rate {
                    (PlantKind::Overt, Some(emerging_key(&mut rng)))
                } else if u < spec.gold_emerging_rate + spec.gold_historical_rate {
                    (PlantKind::Historical, Some(pick(&mut rng, &fixtures::historical_keys()).clone()))
                } else {
                    (PlantKind::Clean, None)
                };
                plant(&mut rng, &format!("g{i:05}"), kind, key, spec, Partition::Gold)
            })
            .collect();

        let mut rng = split_rng(spec.seed, "test");
        let test = (0..spec.n_test)
            .map(|i| {
                let (kind, key) = draw_kind(&mut rng, spec);
                plant(&mut rng, &format!("t{i:05}"), kind, key, spec, Partition::Synthetic)
            })
            .collect();

        Corpus {
            corpus_id: format!("synth-s{}-h{}-g{}-t{}", spec.seed, spec.n_hist, spec.n_gold, spec.n_test),
            spec: spec.clone(),
            historical,
            gold,
            test,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        let err = |message: String| SynthError::File {
            path: path.display().to_string(),
            message,
        };
        let json = serde_json::to_string(self).map_err(|e| err(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Corpus, SynthError> {
        let err = |message: String| SynthError::File {
            path: path.display().to_string(),
            message,
        };
        let raw = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&raw).map_err(|e| err(e.to_string()))
    }

    /// Historical samples with their legacy labels under the old policy set.
    pub fn historical_labels(&self, old_dims: &[PolicyKey]) -> Vec<LabeledSample> {
        self.historical
            .iter()
            .map(|p| LabeledSample {
                sample_id: p.sample.id.clone(),
                vector: p.legacy_vector(old_dims),
                vintage: P_OLD.to_string(),
                source: LabelSource::Legacy,
                cot: None,
            })
            .collect()
    }

    pub fn gold_labels(&self, new_dims: &[PolicyKey]) -> Vec<LabeledSample> {
        self.gold
            .iter()
            .map(|p| LabeledSample {
                sample_id: p.sample.id.clone(),
                vector: p.truth_vector(new_dims),
                vintage: P_NEW.to_string(),
                source: LabelSource::Gold,
                cot: None,
            })
            .collect()
    }

    /// Gold samples as retrieval exemplars.
    pub fn exemplars(&self) -> Vec<Exemplar> {
        self.gold
            .iter()
            .map(|p| Exemplar {
                id: p.sample.id.clone(),
                text: p.sample.content_text(),
                positive_keys: p.truth.clone(),
            })
            .collect()
    }

    /// Historical samples whose legacy labels disagree with the truth.
    pub fn stale(&self) -> impl Iterator<Item = &PlantedSample> {
        self.historical.iter().filter(|p| p.truth != p.legacy)
    }
}

/// The K12 tutoring ad of the first case study.
pub fn case_k12() -> AdSample {
    AdSample::new(
        "case-k12",
        "Master six years of math in 15 days! Guaranteed admission to a top middle school for every student.",
        Partition::Live,
    )
    .with_caption("Image: a smiling student holding an acceptance letter")
}

/// The aesthetic-anxiety ad of the second case study: no overt cue, only
/// subtle and deep ones.
pub fn case_aesthetic() -> AdSample {
    let mut s = AdSample::new(
        "case-aest",
        "Sculpt your profile at Everly clinic. Our jawline angle score shows it: one degree off and you lose your ticket to top social circles.",
        Partition::Live,
    );
    s.image_ref = Some("img://cases/plaster-head.png".into());
    s.caption = Some("Image: a plaster head with angle measurements drawn on the jaw".into());
    s
}

fn obfuscate_word(word: &str) -> String {
    match HOMOPHONES.iter().find(|(w, _)| *w == word) {
        Some((_, h)) => h.to_string(),
        None => word.chars().map(|c| c.to_string()).collect::<Vec<_>>().join(" "),
    }
}

/// Rewrites every violation-cue word of `text` by homophone substitution or
/// letter spacing, so that no cue phrase survives tokenization.
pub fn evade_text(text: &str) -> String {
    let padded = normalized_padded(text);
    let words: BTreeSet<String> = fixtures::lexicon()
        .all()
        .iter()
        .filter(|c| c.tier.is_violation() && contains_phrase(&padded, c.phrase))
        .flat_map(|c| tokenize(c.phrase))
        .collect();
    if words.is_empty() {
        return text.to_string();
    }
    tokenize(text)
        .into_iter()
        .map(|t| if words.contains(&t) { obfuscate_word(&t) } else { t })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn evade(sample: &AdSample) -> AdSample {
    let mut out = sample.clone();
    out.text = evade_text(&sample.text);
    out.caption = sample.caption.as_deref().map(evade_text);
    out
}

/// Per-key positive counts of the emerging policies in `samples`.
pub fn emerging_support(samples: &[PlantedSample]) -> BTreeMap<PolicyKey, usize> {
    let mut out: BTreeMap<PolicyKey, usize> = fixtures::emerging_keys().into_iter().map(|k| (k, 0)).collect();
    for s in samples {
        for k in &s.truth {
            if let Some(c) = out.get_mut(k) {
                *c += 1;
            }
        }
    }
    out
}
