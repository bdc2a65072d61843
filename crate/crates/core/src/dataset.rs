//! Ad samples, multi-dimensional labels and their provenance.
//!
//! Storage is an append-only event log. The current-label view is an in-memory
//! index rebuilt by replaying the log, so the label a sample was ingested with
//! is never overwritten: rectifications append a [`ProvenanceRecord`] and move
//! the current view forward.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::debate::Adjudication;
use crate::jsonl::{self, JsonlError};
use crate::policy::PolicyRegistry;
use crate::PolicyKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Historical,
    Gold,
    Synthetic,
    Live,
}

impl std::str::FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "historical" => Ok(Partition::Historical),
            "gold" => Ok(Partition::Gold),
            "synthetic" => Ok(Partition::Synthetic),
            "live" => Ok(Partition::Live),
            other => Err(format!("unknown partition {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdSample {
    pub id: String,
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    pub partition: Partition,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl AdSample {
    pub fn new(id: impl Into<String>, text: impl Into<String>, partition: Partition) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            image_ref: None,
            caption: None,
            partition,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_caption(mut self, caption: impl Into<String>) -> Self {
        self.caption = Some(caption.into());
        self
    }

    /// Text and caption joined; what text-only scorers and retrieval see.
    pub fn content_text(&self) -> String {
        match &self.caption {
            Some(c) if !c.is_empty() => format!("{} {}", self.text, c),
            _ => self.text.clone(),
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty sample id".into());
        }
        if self.text.trim().is_empty() && self.image_ref.is_none() {
            return Err("sample has neither text nor image_ref".into());
        }
        Ok(())
    }
}

/// Per-policy binary labels with optional model probabilities.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComplianceVector {
    pub labels: BTreeMap<PolicyKey, u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<BTreeMap<PolicyKey, f64>>,
}

impl ComplianceVector {
    pub fn from_labels<I, K>(labels: I) -> Self
    where
        I: IntoIterator<Item = (K, u8)>,
        K: Into<PolicyKey>,
    {
        Self {
            labels: labels.into_iter().map(|(k, v)| (k.into(), v)).collect(),
            probabilities: None,
        }
    }

    /// Label on `key`; dimensions that were never labeled read as compliant.
    pub fn label(&self, key: &str) -> u8 {
        self.labels.get(key).copied().unwrap_or(0)
    }

    pub fn probability(&self, key: &str) -> Option<f64> {
        self.probabilities.as_ref().and_then(|p| p.get(key).copied())
    }

    pub fn positives(&self) -> impl Iterator<Item = &PolicyKey> {
        self.labels.iter().filter(|(_, &v)| v == 1).map(|(k, _)| k)
    }

    fn validate(&self, registry: &PolicyRegistry) -> Result<(), String> {
        for (k, v) in &self.labels {
            if !registry.contains(k) {
                return Err(format!("unregistered policy key {k}"));
            }
            if *v > 1 {
                return Err(format!("label for {k} is {v}, expected 0 or 1"));
            }
        }
        if let Some(probs) = &self.probabilities {
            for (k, p) in probs {
                if !registry.contains(k) {
                    return Err(format!("unregistered policy key {k}"));
                }
                if !(0.0..=1.0).contains(p) {
                    return Err(format!("probability for {k} is {p}, outside [0, 1]"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Legacy,
    Gold,
    UmpireRectified,
    HumanReview,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub sample_id: String,
    pub vector: ComplianceVector,
    /// Policy version the labels were assigned under.
    pub vintage: String,
    pub source: LabelSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProvenanceStage {
    #[serde(rename = "II")]
    II,
    #[serde(rename = "III")]
    III,
    #[serde(rename = "review")]
    Review,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub seq: u64,
    pub sample_id: String,
    pub old_vector: ComplianceVector,
    pub new_vector: ComplianceVector,
    pub adjudication_id: String,
    pub stage: ProvenanceStage,
    pub timestamp: DateTime<Utc>,
}

/// Ad content as it appears in record files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdInput {
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

/// One line of a sample / label / SFT file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub input: AdInput,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<BTreeMap<PolicyKey, u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<BTreeMap<PolicyKey, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<LabelSource>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl SampleRecord {
    pub fn from_parts(sample: &AdSample, label: Option<&LabeledSample>) -> Self {
        Self {
            sample_id: sample.id.clone(),
            input: AdInput {
                text: sample.text.clone(),
                caption: sample.caption.clone(),
                image_ref: sample.image_ref.clone(),
            },
            labels: label.map(|l| l.vector.labels.clone()),
            probabilities: label.and_then(|l| l.vector.probabilities.clone()),
            cot: label.map(|l| l.cot.clone().unwrap_or_default()),
            policy_version: label.map(|l| l.vintage.clone()),
            source: label.map(|l| l.source),
            metadata: sample.metadata.clone(),
        }
    }

    pub fn to_sample(&self, partition: Partition) -> AdSample {
        AdSample {
            id: self.sample_id.clone(),
            text: self.input.text.clone(),
            image_ref: self.input.image_ref.clone(),
            caption: self.input.caption.clone(),
            partition,
            metadata: self.metadata.clone(),
        }
    }

    /// The labeled view of this record, if it carries labels. An empty `cot`
    /// reads back as absent.
    pub fn to_labeled(&self, default_source: LabelSource) -> Option<Result<LabeledSample, String>> {
        let labels = self.labels.as_ref()?;
        let vintage = match &self.policy_version {
            Some(v) => v.clone(),
            None => return Some(Err("labels present without policy_version".into())),
        };
        Some(Ok(LabeledSample {
            sample_id: self.sample_id.clone(),
            vector: ComplianceVector {
                labels: labels.clone(),
                probabilities: self.probabilities.clone(),
            },
            vintage,
            source: self.source.unwrap_or(default_source),
            cot: self.cot.clone().filter(|c| !c.is_empty()),
        }))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("duplicate sample id {0}")]
    DuplicateId(String),
    #[error("invalid sample {id}: {reason}")]
    InvalidSample { id: String, reason: String },
    #[error("unknown sample {0}")]
    UnknownSample(String),
    #[error("adjudication {0} covers no policy key")]
    EmptyAdjudication(String),
    #[error("adjudication for {adjudicated} applied to sample {target}")]
    SampleMismatch { adjudicated: String, target: String },
    #[error("adjudication references unregistered policy key {0}")]
    UnknownPolicyKey(String),
    #[error("blend ratio {0} outside [0, 1]")]
    RatioOutOfRange(f64),
    #[error("sample {0} has no labels")]
    Unlabeled(String),
    #[error("log i/o on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Records(#[from] JsonlError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum StoreEvent {
    Sample { sample: AdSample },
    Label { label: LabeledSample },
    Rectification {
        record: ProvenanceRecord,
        label: LabeledSample,
    },
}

#[derive(Default)]
struct StoreState {
    samples: Vec<AdSample>,
    index: HashMap<String, usize>,
    original: HashMap<String, LabeledSample>,
    current: HashMap<String, LabeledSample>,
    history: HashMap<String, Vec<usize>>,
    provenance: Vec<ProvenanceRecord>,
}

impl StoreState {
    fn apply(&mut self, event: StoreEvent) {
        match event {
            StoreEvent::Sample { sample } => {
                self.index.insert(sample.id.clone(), self.samples.len());
                self.samples.push(sample);
            }
            StoreEvent::Label { label } => {
                self.original
                    .entry(label.sample_id.clone())
                    .or_insert_with(|| label.clone());
                self.current.insert(label.sample_id.clone(), label);
            }
            StoreEvent::Rectification { record, label } => {
                self.history
                    .entry(record.sample_id.clone())
                    .or_default()
                    .push(self.provenance.len());
                self.provenance.push(record);
                self.current.insert(label.sample_id.clone(), label);
            }
        }
    }
}

/// Append-only sample and label store with a single writer and snapshot readers.
pub struct DatasetStore {
    registry: Arc<PolicyRegistry>,
    clock: Arc<dyn Clock>,
    state: RwLock<StoreState>,
    log: Mutex<Option<(PathBuf, BufWriter<File>)>>,
}

impl DatasetStore {
    pub fn in_memory(registry: Arc<PolicyRegistry>, clock: Arc<dyn Clock>) -> Self {
        Self {
            registry,
            clock,
            state: RwLock::new(StoreState::default()),
            log: Mutex::new(None),
        }
    }

    /// Opens (or creates) a log file, replaying any existing events.
    pub fn open(
        path: &Path,
        registry: Arc<PolicyRegistry>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, DatasetError> {
        let display = path.display().to_string();
        let io = |source| DatasetError::Io {
            path: display.clone(),
            source,
        };
        let mut state = StoreState::default();
        if path.exists() {
            let file = File::open(path).map_err(io)?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let event: StoreEvent =
                    serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
                        path: display.clone(),
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                state.apply(event);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        Ok(Self {
            registry,
            clock,
            state: RwLock::new(state),
            log: Mutex::new(Some((path.to_path_buf(), BufWriter::new(file)))),
        })
    }

    pub fn registry(&self) -> &Arc<PolicyRegistry> {
        &self.registry
    }

    // Caller holds the state write lock, which makes this the single writer.
    fn append(&self, state: &mut StoreState, events: Vec<StoreEvent>) -> Result<(), DatasetError> {
        let mut log = self.log.lock();
        if let Some((path, w)) = log.as_mut() {
            let io = |source| DatasetError::Io {
                path: path.display().to_string(),
                source,
            };
            for e in &events {
                jsonl::append_record(w, e).map_err(io)?;
            }
            w.flush().map_err(io)?;
        }
        for e in events {
            state.apply(e);
        }
        Ok(())
    }

    fn check_label(&self, label: &LabeledSample) -> Result<(), String> {
        label.vector.validate(&self.registry)?;
        self.registry
            .version(&label.vintage)
            .map_err(|e| e.to_string())?;
        if label.source == LabelSource::Gold {
            let latest = self.registry.latest_version().map(|v| v.version);
            if latest.as_deref() != Some(label.vintage.as_str()) {
                return Err(format!(
                    "gold label vintage {} is not the newest policy version",
                    label.vintage
                ));
            }
        }
        Ok(())
    }

    /// Adds one sample with an optional initial label.
    pub fn insert(&self, sample: AdSample, label: Option<LabeledSample>) -> Result<(), DatasetError> {
        self.insert_many(vec![(sample, label)]).map(|_| ())
    }

    /// Validates every entry first, then appends all of them; nothing is written on error.
    pub fn insert_many(
        &self,
        entries: Vec<(AdSample, Option<LabeledSample>)>,
    ) -> Result<usize, DatasetError> {
        let mut state = self.state.write();
        let mut seen = HashSet::new();
        for (sample, label) in &entries {
            sample.validate().map_err(|reason| DatasetError::InvalidSample {
                id: sample.id.clone(),
                reason,
            })?;
            if state.index.contains_key(&sample.id) || !seen.insert(sample.id.clone()) {
                return Err(DatasetError::DuplicateId(sample.id.clone()));
            }
            if let Some(l) = label {
                if l.sample_id != sample.id {
                    return Err(DatasetError::InvalidSample {
                        id: sample.id.clone(),
                        reason: format!("label refers to {}", l.sample_id),
                    });
                }
                self.check_label(l).map_err(|reason| DatasetError::InvalidSample {
                    id: sample.id.clone(),
                    reason,
                })?;
            }
        }
        let n = entries.len();
        let mut events = Vec::with_capacity(n * 2);
        for (sample, label) in entries {
            events.push(StoreEvent::Sample { sample });
            if let Some(label) = label {
                events.push(StoreEvent::Label { label });
            }
        }
        self.append(&mut state, events)?;
        Ok(n)
    }

    /// Reads a sample file into `partition`. Labels, when present, become the
    /// initial label (legacy for historical data, gold for gold data).
    pub fn ingest(&self, path: &Path, partition: Partition) -> Result<usize, DatasetError> {
        let records: Vec<SampleRecord> = jsonl::read_records(path).map_err(|e| match e {
            JsonlError::Parse {
                path,
                line,
                message,
            } => DatasetError::Parse {
                path,
                line,
                message,
            },
            other => DatasetError::Records(other),
        })?;
        let default_source = match partition {
            Partition::Gold => LabelSource::Gold,
            _ => LabelSource::Legacy,
        };
        let mut entries = Vec::with_capacity(records.len());
        for r in records {
            let label = match r.to_labeled(default_source) {
                None => None,
                Some(Ok(l)) => Some(l),
                Some(Err(reason)) => {
                    return Err(DatasetError::InvalidSample {
                        id: r.sample_id,
                        reason,
                    })
                }
            };
            entries.push((r.to_sample(partition), label));
        }
        self.insert_many(entries)
    }

    /// Appends a fresh label for an existing sample (e.g. a human review verdict).
    pub fn add_label(&self, label: LabeledSample) -> Result<(), DatasetError> {
        let mut state = self.state.write();
        if !state.index.contains_key(&label.sample_id) {
            return Err(DatasetError::UnknownSample(label.sample_id));
        }
        self.check_label(&label)
            .map_err(|reason| DatasetError::InvalidSample {
                id: label.sample_id.clone(),
                reason,
            })?;
        self.append(&mut state, vec![StoreEvent::Label { label }])
    }

    /// Logically overwrites the current labels of `sample_id` with the adjudicated ones.
    pub fn apply_rectification(
        &self,
        sample_id: &str,
        adjudication: &Adjudication,
        stage: ProvenanceStage,
    ) -> Result<ProvenanceRecord, DatasetError> {
        if adjudication.sample_id != sample_id {
            return Err(DatasetError::SampleMismatch {
                adjudicated: adjudication.sample_id.clone(),
                target: sample_id.to_string(),
            });
        }
        if adjudication.rectified_labels.is_empty() {
            return Err(DatasetError::EmptyAdjudication(
                adjudication.adjudication_id.clone(),
            ));
        }
        for (k, v) in &adjudication.rectified_labels {
            if !self.registry.contains(k) || *v > 1 {
                return Err(DatasetError::UnknownPolicyKey(k.clone()));
            }
        }
        let mut state = self.state.write();
        if !state.index.contains_key(sample_id) {
            return Err(DatasetError::UnknownSample(sample_id.to_string()));
        }
        let old_vector = state
            .current
            .get(sample_id)
            .map(|l| l.vector.clone())
            .unwrap_or_default();
        let mut new_vector = old_vector.clone();
        for (k, v) in &adjudication.rectified_labels {
            new_vector.labels.insert(k.clone(), *v);
        }
        let record = ProvenanceRecord {
            seq: state.provenance.len() as u64,
            sample_id: sample_id.to_string(),
            old_vector,
            new_vector: new_vector.clone(),
            adjudication_id: adjudication.adjudication_id.clone(),
            stage,
            timestamp: self.clock.now(),
        };
        let label = LabeledSample {
            sample_id: sample_id.to_string(),
            vector: new_vector,
            vintage: adjudication.policy_version.clone(),
            source: match stage {
                ProvenanceStage::Review => LabelSource::HumanReview,
                _ => LabelSource::UmpireRectified,
            },
            cot: Some(adjudication.rationale.clone()),
        };
        self.append(
            &mut state,
            vec![StoreEvent::Rectification {
                record: record.clone(),
                label,
            }],
        )?;
        Ok(record)
    }

    pub fn sample(&self, id: &str) -> Option<AdSample> {
        let s = self.state.read();
        s.index.get(id).map(|&i| s.samples[i].clone())
    }

    pub fn len(&self) -> usize {
        self.state.read().samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Samples of a partition in insertion order.
    pub fn samples_in(&self, partition: Partition) -> Vec<AdSample> {
        self.state
            .read()
            .samples
            .iter()
            .filter(|s| s.partition == partition)
            .cloned()
            .collect()
    }

    pub fn count_in(&self, partition: Partition) -> usize {
        self.state
            .read()
            .samples
            .iter()
            .filter(|s| s.partition == partition)
            .count()
    }

    pub fn current_label(&self, id: &str) -> Option<LabeledSample> {
        self.state.read().current.get(id).cloned()
    }

    /// The label the sample was first stored with.
    pub fn original_label(&self, id: &str) -> Option<LabeledSample> {
        self.state.read().original.get(id).cloned()
    }

    /// Current labels of every labeled sample in `partition`, in insertion order.
    pub fn labeled_in(&self, partition: Partition) -> Vec<LabeledSample> {
        let s = self.state.read();
        s.samples
            .iter()
            .filter(|x| x.partition == partition)
            .filter_map(|x| s.current.get(&x.id).cloned())
            .collect()
    }

    /// Rectification chain of one sample, oldest first.
    pub fn history(&self, id: &str) -> Vec<ProvenanceRecord> {
        let s = self.state.read();
        s.history
            .get(id)
            .map(|idx| idx.iter().map(|&i| s.provenance[i].clone()).collect())
            .unwrap_or_default()
    }

    pub fn provenance_log(&self) -> Vec<ProvenanceRecord> {
        self.state.read().provenance.clone()
    }

    pub fn write_provenance(&self, path: &Path) -> Result<usize, DatasetError> {
        let log = self.provenance_log();
        Ok(jsonl::write_records(path, &log)?)
    }

    /// One record per sample with its content, labels and CoT; missing CoTs export as "".
    pub fn export_sft(&self, dataset: &[LabeledSample], path: &Path) -> Result<usize, DatasetError> {
        let records = self.sft_records(dataset)?;
        Ok(jsonl::write_records(path, &records)?)
    }

    pub fn sft_records(&self, dataset: &[LabeledSample]) -> Result<Vec<SampleRecord>, DatasetError> {
        let s = self.state.read();
        dataset
            .iter()
            .map(|l| {
                if l.vector.labels.is_empty() {
                    return Err(DatasetError::Unlabeled(l.sample_id.clone()));
                }
                let sample = s
                    .index
                    .get(&l.sample_id)
                    .map(|&i| &s.samples[i])
                    .ok_or_else(|| DatasetError::UnknownSample(l.sample_id.clone()))?;
                Ok(SampleRecord::from_parts(sample, Some(l)))
            })
            .collect()
    }
}

/// Stage-I blend: every gold sample plus a seeded uniform sample (without
/// replacement) of `round(ratio * |hist|)` historical samples.
///
/// Output order is gold first, then the drawn historical samples in their input order.
pub fn blend_sft(
    gold: &[LabeledSample],
    hist: &[LabeledSample],
    ratio: f64,
    seed: u64,
) -> Result<Vec<LabeledSample>, DatasetError> {
    if !(0.0..=1.0).contains(&ratio) || ratio.is_nan() {
        return Err(DatasetError::RatioOutOfRange(ratio));
    }
    let take = (ratio * hist.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, hist.len(), take).into_vec();
    picked.sort_unstable();

    let mut out: Vec<LabeledSample> = gold.to_vec();
    let gold_ids: HashSet<&str> = gold.iter().map(|g| g.sample_id.as_str()).collect();
    out.extend(
        picked
            .into_iter()
            .map(|i| &hist[i])
            .filter(|h| !gold_ids.contains(h.sample_id.as_str()))
            .cloned(),
    );
    Ok(out)
}

/// Reads an SFT / sample file back into labeled samples.
pub fn read_labeled(path: &Path, default_source: LabelSource) -> Result<Vec<LabeledSample>, DatasetError> {
    let records: Vec<SampleRecord> = jsonl::read_records(path)?;
    records
        .into_iter()
        .map(|r| match r.to_labeled(default_source) {
            Some(Ok(l)) => Ok(l),
            Some(Err(reason)) => Err(DatasetError::InvalidSample {
                id: r.sample_id,
                reason,
            }),
            None => Err(DatasetError::Unlabeled(r.sample_id)),
        })
        .collect()
}
