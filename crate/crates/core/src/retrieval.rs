//! Lexical evidence retrieval for the umpire.
//!
//! Clause bodies and gold exemplars are indexed together and ranked with
//! Okapi BM25 (`k1 = 1.2`, `b = 0.75`):
//!
//! ```text
//! score(d, q) = Σ_{t ∈ uniq(q)} idf(t) · tf(t,d)·(k1+1) / (tf(t,d) + k1·(1 − b + b·|d|/avgdl))
//! idf(t)      = ln(1 + (N − df(t) + 0.5) / (df(t) + 0.5))
//! ```
//!
//! Query terms are deduplicated. Documents scoring zero are never returned.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::policy::PolicyClause;
use crate::text::tokenize;
use crate::PolicyKey;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

/// Default evidence budget per adjudication.
pub const DEFAULT_CLAUSE_HITS: usize = 3;
pub const DEFAULT_EXEMPLAR_HITS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocKind {
    Clause,
    Exemplar,
}

/// A gold sample offered as reference material.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: String,
    pub text: String,
    /// Policies the exemplar is labeled as violating.
    pub positive_keys: Vec<PolicyKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexedDoc {
    doc_id: String,
    kind: DocKind,
    text: String,
    positive_keys: Vec<PolicyKey>,
    length: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub doc_id: String,
    pub kind: DocKind,
    pub score: f64,
}

/// A hit together with the material the umpire reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub doc_id: String,
    pub kind: DocKind,
    pub score: f64,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub positive_keys: Vec<PolicyKey>,
}

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("cannot build an evidence index without clauses")]
    EmptyClauseSet,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("duplicate document id {0}")]
    DuplicateDoc(String),
    #[error("index snapshot {path}: {message}")]
    Snapshot { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceIndex {
    docs: Vec<IndexedDoc>,
    /// term -> postings (doc index, term frequency), doc indices ascending.
    postings: BTreeMap<String, Vec<(u32, u32)>>,
    avg_len: f64,
    skipped_exemplars: usize,
}

impl EvidenceIndex {
    /// Indexes every clause and every non-empty exemplar. Exemplars are keyed `ex:<id>`.
    pub fn build(clauses: &[PolicyClause], exemplars: &[Exemplar]) -> Result<Self, RetrievalError> {
        if clauses.is_empty() {
            return Err(RetrievalError::EmptyClauseSet);
        }
        let mut raw: Vec<(IndexedDoc, Vec<String>)> = Vec::new();
        for c in clauses {
            let tokens = tokenize(&c.body);
            raw.push((
                IndexedDoc {
                    doc_id: c.id.clone(),
                    kind: DocKind::Clause,
                    text: c.body.clone(),
                    positive_keys: Vec::new(),
                    length: tokens.len() as u32,
                },
                tokens,
            ));
        }
        let mut skipped = 0;
        for e in exemplars {
            let tokens = tokenize(&e.text);
            if tokens.is_empty() {
                log::warn!("skipping exemplar {} with empty text", e.id);
                skipped += 1;
                continue;
            }
            raw.push((
                IndexedDoc {
                    doc_id: format!("ex:{}", e.id),
                    kind: DocKind::Exemplar,
                    text: e.text.clone(),
                    positive_keys: e.positive_keys.clone(),
                    length: tokens.len() as u32,
                },
                tokens,
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for (d, _) in &raw {
            if !seen.insert(d.doc_id.clone()) {
                return Err(RetrievalError::DuplicateDoc(d.doc_id.clone()));
            }
        }

        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut total_len = 0u64;
        for (i, (d, tokens)) in raw.iter().enumerate() {
            total_len += d.length as u64;
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t.as_str()).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t.to_string()).or_default().push((i as u32, n));
            }
        }
        let avg_len = total_len as f64 / raw.len() as f64;
        Ok(Self {
            docs: raw.into_iter().map(|(d, _)| d).collect(),
            postings,
            avg_len,
            skipped_exemplars: skipped,
        })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn skipped_exemplars(&self) -> usize {
        self.skipped_exemplars
    }

    pub fn count_kind(&self, kind: DocKind) -> usize {
        self.docs.iter().filter(|d| d.kind == kind).count()
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn average_length(&self) -> f64 {
        self.avg_len
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.docs.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn scores(&self, query: &str) -> Vec<f64> {
        let mut terms = tokenize(query);
        terms.sort_unstable();
        terms.dedup();
        let mut scores = vec![0.0; self.docs.len()];
        for t in &terms {
            let Some(list) = self.postings.get(t) else {
                continue;
            };
            let idf = self.idf(list.len());
            for &(doc, tf) in list {
                let tf = tf as f64;
                let dl = self.docs[doc as usize].length as f64;
                let norm = tf * (BM25_K1 + 1.0)
                    / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * dl / self.avg_len));
                scores[doc as usize] += idf * norm;
            }
        }
        scores
    }

    fn ranked(&self, query: &str, kind: Option<DocKind>) -> Vec<(usize, f64)> {
        let mut hits: Vec<(usize, f64)> = self
            .scores(query)
            .into_iter()
            .enumerate()
            .filter(|&(i, s)| s > 0.0 && kind.is_none_or(|k| self.docs[i].kind == k))
            .collect();
        hits.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.docs[a.0].doc_id.cmp(&self.docs[b.0].doc_id))
        });
        hits
    }

    /// Top-`k` documents of any kind.
    pub fn retrieve(&self, query: &str, k: usize) -> Result<Vec<RetrievalHit>, RetrievalError> {
        if k < 1 {
            return Err(RetrievalError::InvalidK);
        }
        Ok(self
            .ranked(query, None)
            .into_iter()
            .take(k)
            .map(|(i, score)| RetrievalHit {
                doc_id: self.docs[i].doc_id.clone(),
                kind: self.docs[i].kind,
                score,
            })
            .collect())
    }

    /// Up to `clauses` clause hits followed by up to `exemplars` exemplar hits.
    pub fn retrieve_evidence(&self, query: &str, clauses: usize, exemplars: usize) -> Vec<Evidence> {
        let mut out = Vec::new();
        for (kind, k) in [(DocKind::Clause, clauses), (DocKind::Exemplar, exemplars)] {
            for (i, score) in self.ranked(query, Some(kind)).into_iter().take(k) {
                let d = &self.docs[i];
                out.push(Evidence {
                    doc_id: d.doc_id.clone(),
                    kind: d.kind,
                    score,
                    text: d.text.clone(),
                    positive_keys: d.positive_keys.clone(),
                });
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let err = |message: String| RetrievalError::Snapshot {
            path: path.display().to_string(),
            message,
        };
        let json = serde_json::to_vec(self).map_err(|e| err(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let err = |message: String| RetrievalError::Snapshot {
            path: path.display().to_string(),
            message,
        };
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))
    }
}

/// Holder that lets a rebuilt index replace the live one atomically.
pub struct SharedIndex {
    current: RwLock<Arc<EvidenceIndex>>,
}

impl SharedIndex {
    pub fn new(index: EvidenceIndex) -> Self {
        Self {
            current: RwLock::new(Arc::new(index)),
        }
    }

    pub fn current(&self) -> Arc<EvidenceIndex> {
        self.current.read().clone()
    }

    pub fn swap(&self, index: EvidenceIndex) -> Arc<EvidenceIndex> {
        std::mem::replace(&mut *self.current.write(), Arc::new(index))
    }
}
