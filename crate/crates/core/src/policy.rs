//! Versioned policy sets.
//!
//! Clauses are registered once and never change. A [`PolicyVersionSet`] is an
//! immutable snapshot of which clauses are in force; policy evolution always
//! creates a new version. Dimension order inside a version follows clause
//! registration order, so label vectors produced under an older version stay
//! index-compatible when new clauses land.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::jsonl::{self, JsonlError};
use crate::PolicyKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClauseStatus {
    Historical,
    Emerging,
}

/// One regulation clause. Also the record layout of the policy catalog file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyClause {
    pub id: PolicyKey,
    pub code: String,
    pub title: String,
    pub body: String,
    pub status: ClauseStatus,
    pub introduced_in: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyVersionSet {
    pub version: String,
    pub clause_ids: Vec<PolicyKey>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("clause id {0} is already registered")]
    DuplicateClause(String),
    #[error("clause {0} has an empty body")]
    EmptyBody(String),
    #[error("clause id must not be empty")]
    EmptyId,
    #[error("unknown clause {0}")]
    UnknownClause(String),
    #[error("unknown policy version {0}")]
    UnknownVersion(String),
    #[error("policy version {0} already exists")]
    DuplicateVersion(String),
    #[error(transparent)]
    Catalog(#[from] JsonlError),
}

#[derive(Default)]
struct RegistryInner {
    clauses: Vec<PolicyClause>,
    by_id: HashMap<PolicyKey, usize>,
    versions: Vec<PolicyVersionSet>,
}

impl RegistryInner {
    fn version(&self, id: &str) -> Result<&PolicyVersionSet, PolicyError> {
        self.versions
            .iter()
            .find(|v| v.version == id)
            .ok_or_else(|| PolicyError::UnknownVersion(id.to_string()))
    }
}

/// Outcome of importing a catalog file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImportSummary {
    pub clauses: usize,
    /// Versions created, oldest first.
    pub versions: Vec<String>,
}

/// Shared registry of clauses and versions. Reads are concurrent; writes are serialized.
#[derive(Default)]
pub struct PolicyRegistry {
    inner: RwLock<RegistryInner>,
}

impl PolicyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_clause(&self, clause: PolicyClause) -> Result<PolicyKey, PolicyError> {
        if clause.id.trim().is_empty() {
            return Err(PolicyError::EmptyId);
        }
        if clause.body.trim().is_empty() {
            return Err(PolicyError::EmptyBody(clause.id));
        }
        let mut inner = self.inner.write();
        if inner.by_id.contains_key(&clause.id) {
            return Err(PolicyError::DuplicateClause(clause.id));
        }
        let id = clause.id.clone();
        let idx = inner.clauses.len();
        inner.by_id.insert(id.clone(), idx);
        inner.clauses.push(clause);
        Ok(id)
    }

    pub fn clause(&self, id: &str) -> Option<PolicyClause> {
        let inner = self.inner.read();
        inner.by_id.get(id).map(|&i| inner.clauses[i].clone())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.inner.read().by_id.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.inner.read().clauses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All clauses in registration order.
    pub fn clauses(&self) -> Vec<PolicyClause> {
        self.inner.read().clauses.clone()
    }

    /// Freezes a new version. Ids are deduplicated and reordered by registration order.
    pub fn create_version(
        &self,
        version: &str,
        clause_ids: &[PolicyKey],
        created_at: DateTime<Utc>,
    ) -> Result<PolicyVersionSet, PolicyError> {
        let mut inner = self.inner.write();
        if inner.versions.iter().any(|v| v.version == version) {
            return Err(PolicyError::DuplicateVersion(version.to_string()));
        }
        let mut indices = Vec::with_capacity(clause_ids.len());
        let mut seen = HashSet::new();
        for id in clause_ids {
            let idx = *inner
                .by_id
                .get(id)
                .ok_or_else(|| PolicyError::UnknownClause(id.clone()))?;
            if seen.insert(idx) {
                indices.push(idx);
            }
        }
        indices.sort_unstable();
        let set = PolicyVersionSet {
            version: version.to_string(),
            clause_ids: indices.iter().map(|&i| inner.clauses[i].id.clone()).collect(),
            created_at,
        };
        inner.versions.push(set.clone());
        Ok(set)
    }

    pub fn version(&self, id: &str) -> Result<PolicyVersionSet, PolicyError> {
        self.inner.read().version(id).cloned()
    }

    /// Versions in creation order.
    pub fn versions(&self) -> Vec<PolicyVersionSet> {
        self.inner.read().versions.clone()
    }

    /// Most recently created version, if any.
    pub fn latest_version(&self) -> Option<PolicyVersionSet> {
        self.inner.read().versions.last().cloned()
    }

    /// Clauses in `new` but not in `old`, each marked emerging, in dimension order.
    pub fn diff_versions(&self, old: &str, new: &str) -> Result<Vec<PolicyClause>, PolicyError> {
        let inner = self.inner.read();
        let old = inner.version(old)?;
        let new = inner.version(new)?;
        let old_ids: HashSet<&str> = old.clause_ids.iter().map(String::as_str).collect();
        Ok(new
            .clause_ids
            .iter()
            .filter(|id| !old_ids.contains(id.as_str()))
            .map(|id| {
                let mut c = inner.clauses[inner.by_id[id]].clone();
                c.status = ClauseStatus::Emerging;
                c
            })
            .collect())
    }

    /// Ordered policy keys that make up the label vector of `version`.
    pub fn active_dimensions(&self, version: &str) -> Result<Vec<PolicyKey>, PolicyError> {
        Ok(self.inner.read().version(version)?.clause_ids.clone())
    }

    /// Registers every clause in `records` and creates one cumulative version per
    /// distinct `introduced_in` value, in order of first appearance.
    pub fn load_catalog(
        &self,
        records: Vec<PolicyClause>,
        clock: &dyn Clock,
    ) -> Result<ImportSummary, PolicyError> {
        let mut order: Vec<String> = Vec::new();
        let mut members: HashMap<String, Vec<PolicyKey>> = HashMap::new();
        let count = records.len();
        for clause in records {
            if !members.contains_key(&clause.introduced_in) {
                order.push(clause.introduced_in.clone());
            }
            members
                .entry(clause.introduced_in.clone())
                .or_default()
                .push(clause.id.clone());
            self.register_clause(clause)?;
        }
        let mut cumulative: Vec<PolicyKey> = Vec::new();
        for v in &order {
            cumulative.extend(members[v].iter().cloned());
            self.create_version(v, &cumulative, clock.now())?;
        }
        Ok(ImportSummary {
            clauses: count,
            versions: order,
        })
    }

    pub fn import_catalog(&self, path: &Path, clock: &dyn Clock) -> Result<ImportSummary, PolicyError> {
        let records: Vec<PolicyClause> = jsonl::read_records(path)?;
        self.load_catalog(records, clock)
    }

    pub fn export_catalog(&self, path: &Path) -> Result<usize, PolicyError> {
        let clauses = self.clauses();
        Ok(jsonl::write_records(path, &clauses)?)
    }
}
