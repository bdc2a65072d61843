//! The offline stages on a planted corpus.
//!
//! Stage I fits the policy model on gold data blended with a share of the
//! historical corpus. Stage II debates the historical samples whose stored
//! labels conflict with that model and rectifies them. Stage III mines latent
//! violations the refit model is confident about and debates those with the
//! skeptic present. After every stage the model is refit and scored on the
//! held-out test split.
//!
//! Training is delegated to [`CueLearner`], which stands in for fine-tuning:
//! it activates lexicon phrases that the current labels support.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clock::LogicalClock;
use crate::dataset::{blend_sft, AdSample, ComplianceVector, DatasetError, DatasetStore, LabeledSample};
use crate::debate::{
    select_conflicts, select_latent, Adjudication, DebateConfig, DebateEngine, DebateError, DebateTranscript, Stage,
};
use crate::eval::{self, EvalError, EvalReport, LabelMatrix};
use crate::fixtures::{self, CueTier, P_NEW, P_OLD};
use crate::gateway::scripted::{tier_weight, CueModel, ScriptedBackend, SUPPRESSOR_WEIGHT};
use crate::gateway::{sample_responses, GatewayError, ModelBackend, RoleBackends};
use crate::policy::{PolicyClause, PolicyError, PolicyRegistry};
use crate::retrieval::{EvidenceIndex, RetrievalError};
use crate::reward::{score_group, RewardConfig, RewardError, RolloutRecord};
use crate::synth::Corpus;
use crate::text::{contains_phrase, normalized_padded};
use crate::PolicyKey;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Debate(#[from] DebateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("evaluation failed: {0}")]
    Eval(String),
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        PipelineError::Eval(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StageId {
    I,
    II,
    III,
}

impl StageId {
    /// Row label of the cumulative configuration ending at this stage.
    pub fn label(self) -> &'static str {
        match self {
            StageId::I => "Stage I",
            StageId::II => "Stage I+II",
            StageId::III => "Stage I+II+III",
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageId::I => "I",
            StageId::II => "II",
            StageId::III => "III",
        })
    }
}

impl std::str::FromStr for StageId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(StageId::I),
            "II" | "2" => Ok(StageId::II),
            "III" | "3" => Ok(StageId::III),
            other => Err(format!("unknown stage {other:?}")),
        }
    }
}

/// Fits a [`CueModel`] from labeled text by activating lexicon phrases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueLearner {
    /// Positive samples a phrase needs before it is activated.
    pub min_support: usize,
    /// Share of the phrase's samples that must be positive.
    pub min_precision: f64,
    /// Share of negatives among marker+cue samples that makes a marker a suppressor.
    pub suppress_fraction: f64,
}

impl Default for CueLearner {
    fn default() -> Self {
        CueLearner {
            min_support: 2,
            min_precision: 0.5,
            suppress_fraction: 0.5,
        }
    }
}

impl CueLearner {
    /// Starts from the legacy model and learns the phrases of `keys` from
    /// `training` (ad text, labels).
    pub fn fit(&self, training: &[(String, ComplianceVector)], keys: &[PolicyKey]) -> CueModel {
        let padded: Vec<(String, &ComplianceVector)> =
            training.iter().map(|(t, v)| (normalized_padded(t), v)).collect();
        let lex = fixtures::lexicon();
        let mut model = CueModel::historical_only();
        for key in keys {
            let markers: Vec<&str> = lex.benign_markers(key).map(|c| c.phrase).collect();
            // Samples carrying a benign marker are explained by the marker, not the cue.
            let plain: Vec<&(String, &ComplianceVector)> = padded
                .iter()
                .filter(|(t, _)| !markers.iter().any(|m| contains_phrase(t, m)))
                .collect();
            for cue in lex.violation_cues(key) {
                let (mut pos, mut all) = (0usize, 0usize);
                for (text, v) in plain.iter().copied() {
                    if contains_phrase(text, cue.phrase) {
                        all += 1;
                        pos += usize::from(v.label(key) == 1);
                    }
                }
                if pos >= self.min_support && pos as f64 >= self.min_precision * all as f64 {
                    model.set(key, cue.phrase, tier_weight(cue.tier));
                }
            }
            let active: Vec<String> = model
                .cues_for(key)
                .filter(|c| c.weight > 0.0)
                .map(|c| c.phrase.clone())
                .collect();
            for marker in lex.benign_markers(key) {
                let (mut neg, mut all) = (0usize, 0usize);
                for (text, v) in &padded {
                    if contains_phrase(text, marker.phrase) && active.iter().any(|p| contains_phrase(text, p)) {
                        all += 1;
                        neg += usize::from(v.label(key) == 0);
                    }
                }
                if all >= self.min_support && neg as f64 >= self.suppress_fraction * all as f64 {
                    model.set(key, marker.phrase, SUPPRESSOR_WEIGHT);
                }
            }
        }
        model
    }
}

/// Known phrases of `model` on `key`, by tier.
pub fn known_tiers(model: &CueModel, key: &str) -> BTreeMap<CueTier, usize> {
    let lex = fixtures::lexicon();
    let mut out = BTreeMap::new();
    for c in model.cues_for(key) {
        if let Some(t) = lex.tier(key, &c.phrase) {
            *out.entry(t).or_insert(0) += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Share of the historical corpus blended into the Stage-I training set.
    pub blend_ratio: f64,
    pub debate: DebateConfig,
    pub reward: RewardConfig,
    pub learner: CueLearner,
    /// Draw rollout groups for every resolved adjudication.
    pub rollouts: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            blend_ratio: 0.4,
            debate: DebateConfig::default(),
            reward: RewardConfig::default(),
            learner: CueLearner::default(),
            rollouts: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub stage: StageId,
    pub model: CueModel,
    pub report: EvalReport,
    /// Samples sent to debate.
    pub debated: Vec<String>,
    pub transcripts: Vec<DebateTranscript>,
    pub adjudications: Vec<Adjudication>,
    /// Debated samples whose labels the adjudication changed.
    pub changed: usize,
    pub failed: usize,
    pub unresolved: usize,
    pub rollouts: Vec<RolloutRecord>,
}

pub struct PipelineRun {
    pub registry: Arc<PolicyRegistry>,
    pub store: DatasetStore,
    pub emerging: Vec<PolicyKey>,
    pub stages: Vec<StageResult>,
}

impl PipelineRun {
    pub fn stage(&self, id: StageId) -> Option<&StageResult> {
        self.stages.iter().find(|s| s.stage == id)
    }

    /// Rows of every stage in order, as a text table.
    pub fn table(&self) -> String {
        let codes = self
            .registry
            .clauses()
            .into_iter()
            .map(|c| (c.id, c.code))
            .collect();
        let reports: Vec<EvalReport> = self.stages.iter().map(|s| s.report.clone()).collect();
        eval::render_table(&reports, &codes)
    }
}

/// Registry holding the built-in catalog under the old and new versions.
pub fn builtin_registry() -> Result<Arc<PolicyRegistry>, PolicyError> {
    let registry = PolicyRegistry::new();
    registry.load_catalog(fixtures::builtin_catalog(), &LogicalClock::default())?;
    Ok(Arc::new(registry))
}

/// Transcripts, resolved adjudications, changed / failed / unresolved counts and rollouts.
type DebateStageOutput = (Vec<DebateTranscript>, Vec<Adjudication>, usize, usize, usize, Vec<RolloutRecord>);

struct Context<'a> {
    corpus: &'a Corpus,
    config: &'a PipelineConfig,
    registry: Arc<PolicyRegistry>,
    store: DatasetStore,
    index: Arc<EvidenceIndex>,
    dims: Vec<PolicyKey>,
    emerging: Vec<PolicyKey>,
    texts: HashMap<String, String>,
}

impl Context<'_> {
    fn backends(&self, model: &CueModel) -> RoleBackends {
        let current: Arc<dyn ModelBackend> = Arc::new(ScriptedBackend::new(self.config.seed, Arc::new(model.clone())));
        let oracle: Arc<dyn ModelBackend> =
            Arc::new(ScriptedBackend::new(self.config.seed, Arc::new(CueModel::fixture())));
        RoleBackends {
            prosecutor: current.clone(),
            defender: oracle.clone(),
            skeptic: current.clone(),
            umpire: oracle,
            policy: current,
        }
    }

    fn training_set(&self, ids: &[String]) -> Vec<(String, ComplianceVector)> {
        ids.iter()
            .filter_map(|id| {
                let label = self.store.current_label(id)?;
                Some((self.texts[id].clone(), label.vector))
            })
            .collect()
    }

    fn evaluate(&self, model: &CueModel, stage: StageId) -> Result<EvalReport, PipelineError> {
        let mut predictions = LabelMatrix::new();
        let mut gold = LabelMatrix::new();
        for p in &self.corpus.test {
            predictions.insert(p.sample.id.clone(), model.score(&p.sample.content_text(), &self.dims).labels);
            gold.insert(p.sample.id.clone(), p.truth_vector(&self.dims).labels);
        }
        let mut report = eval::score(&predictions, &gold, &self.dims, &self.emerging)?;
        report.corpus_id = self.corpus.corpus_id.clone();
        report.label = stage.label().to_string();
        report.config = serde_json::json!({ "stage": stage, "pipeline": self.config });
        Ok(report)
    }

    fn historical_samples(&self) -> Vec<AdSample> {
        self.corpus.historical.iter().map(|p| p.sample.clone()).collect()
    }

    /// Debates `items`, applies every resolved adjudication in input order and
    /// draws rollout groups.
    fn debate_stage(
        &self,
        stage: Stage,
        model: &CueModel,
        items: Vec<(AdSample, Vec<PolicyKey>)>,
    ) -> Result<DebateStageOutput, PipelineError> {
        let backends = self.backends(model);
        let policy = backends.policy.clone();
        let engine = DebateEngine::new(
            self.registry.clone(),
            backends,
            self.index.clone(),
            self.config.debate.clone(),
        )?;
        let outcomes = engine.run_batch(&items, P_NEW, stage)?;
        let (mut failed, mut unresolved, mut changed) = (0, 0, 0);
        let mut transcripts = Vec::with_capacity(outcomes.len());
        let mut adjudications = Vec::new();
        for o in outcomes {
            match &o.adjudication {
                None => failed += 1,
                Some(Err(_)) => unresolved += 1,
                Some(Ok(adj)) => {
                    let record = self.store.apply_rectification(&adj.sample_id, adj, stage.provenance())?;
                    if keys_changed(&record.old_vector, &record.new_vector) {
                        changed += 1;
                    }
                    adjudications.push(adj.clone());
                }
            }
            transcripts.push(o.transcript);
        }
        let mut rollouts = Vec::new();
        if self.config.rollouts {
            let by_id: HashMap<&str, &(AdSample, Vec<PolicyKey>)> =
                items.iter().map(|it| (it.0.id.as_str(), it)).collect();
            for adj in &adjudications {
                let (sample, keys) = by_id[adj.sample_id.as_str()];
                let clauses: Vec<PolicyClause> = keys.iter().filter_map(|k| self.registry.clause(k)).collect();
                let responses = sample_responses(
                    sample,
                    &clauses,
                    self.config.reward.group_size,
                    policy.as_ref(),
                    self.config.debate.labels_only,
                )?;
                let original = self.store.original_label(&sample.id);
                let legacy: BTreeMap<PolicyKey, u8> = keys
                    .iter()
                    .map(|k| (k.clone(), original.as_ref().map_or(0, |o| o.vector.label(k))))
                    .collect();
                rollouts.extend(score_group(
                    stage,
                    adj,
                    &responses,
                    Some(&legacy),
                    self.config.debate.labels_only,
                    &self.config.reward,
                )?);
            }
        }
        Ok((transcripts, adjudications, changed, failed, unresolved, rollouts))
    }
}

fn keys_changed(old: &ComplianceVector, new: &ComplianceVector) -> bool {
    new.labels.iter().any(|(k, v)| old.label(k) != *v)
}

/// Runs Stage I through `last` on `corpus`.
pub fn run(corpus: &Corpus, config: &PipelineConfig, last: StageId) -> Result<PipelineRun, PipelineError> {
    config.debate.validate()?;
    config.reward.validate()?;
    let registry = builtin_registry()?;
    let old_dims = registry.active_dimensions(P_OLD)?;
    let dims = registry.active_dimensions(P_NEW)?;
    let emerging: Vec<PolicyKey> = registry.diff_versions(P_OLD, P_NEW)?.into_iter().map(|c| c.id).collect();
    let store = DatasetStore::in_memory(registry.clone(), Arc::new(LogicalClock::default()));

    let hist_labels = corpus.historical_labels(&old_dims);
    let gold_labels = corpus.gold_labels(&dims);
    let mut entries: Vec<(AdSample, Option<LabeledSample>)> = Vec::new();
    for (p, l) in corpus.historical.iter().zip(&hist_labels) {
        entries.push((p.sample.clone(), Some(l.clone())));
    }
    for (p, l) in corpus.gold.iter().zip(&gold_labels) {
        entries.push((p.sample.clone(), Some(l.clone())));
    }
    store.insert_many(entries)?;

    let clauses = registry.clauses();
    let index = Arc::new(EvidenceIndex::build(&clauses, &corpus.exemplars())?);
    let texts = corpus
        .historical
        .iter()
        .chain(&corpus.gold)
        .map(|p| (p.sample.id.clone(), p.sample.content_text()))
        .collect();
    let cx = Context {
        corpus,
        config,
        registry: registry.clone(),
        store,
        index,
        dims,
        emerging,
        texts,
    };

    let mut stages = Vec::new();
    let sft = blend_sft(&gold_labels, &hist_labels, config.blend_ratio, config.seed)?;
    let mut train_ids: Vec<String> = sft.iter().map(|l| l.sample_id.clone()).collect();
    let model_i = config.learner.fit(&cx.training_set(&train_ids), &cx.emerging);
    log::info!("stage I: trained on {} samples", train_ids.len());
    stages.push(StageResult {
        stage: StageId::I,
        report: cx.evaluate(&model_i, StageId::I)?,
        model: model_i,
        debated: Vec::new(),
        transcripts: Vec::new(),
        adjudications: Vec::new(),
        changed: 0,
        failed: 0,
        unresolved: 0,
        rollouts: Vec::new(),
    });
    if last == StageId::I {
        return Ok(finish(cx, stages));
    }

    let model = &stages[0].model;
    let hist_current = current_labels(&cx.store, &cx.corpus.historical.iter().map(|p| &p.sample.id).collect::<Vec<_>>());
    let predictions: HashMap<String, _> = cx
        .corpus
        .historical
        .iter()
        .map(|p| (p.sample.id.clone(), model.score(&p.sample.content_text(), &cx.dims)))
        .collect();
    let conflicts = select_conflicts(&hist_current, &predictions, &cx.emerging, config.debate.stage2_scope)?;
    let conflict_set: HashSet<&str> = conflicts.iter().map(String::as_str).collect();
    let items: Vec<(AdSample, Vec<PolicyKey>)> = cx
        .historical_samples()
        .into_iter()
        .filter(|s| conflict_set.contains(s.id.as_str()))
        .map(|s| (s, cx.emerging.clone()))
        .collect();
    log::info!("stage II: {} conflicts", items.len());
    let (transcripts, adjudications, changed, failed, unresolved, rollouts) =
        cx.debate_stage(Stage::II, model, items)?;
    extend_unique(&mut train_ids, adjudications.iter().map(|a| a.sample_id.clone()));
    let model_ii = config.learner.fit(&cx.training_set(&train_ids), &cx.emerging);
    stages.push(StageResult {
        stage: StageId::II,
        report: cx.evaluate(&model_ii, StageId::II)?,
        model: model_ii,
        debated: conflicts,
        transcripts,
        adjudications,
        changed,
        failed,
        unresolved,
        rollouts,
    });
    if last == StageId::II {
        return Ok(finish(cx, stages));
    }

    let model = &stages[1].model;
    let mut hist_current =
        current_labels(&cx.store, &cx.corpus.historical.iter().map(|p| &p.sample.id).collect::<Vec<_>>());
    for (l, p) in hist_current.iter_mut().zip(&cx.corpus.historical) {
        l.vector.probabilities = model.score(&p.sample.content_text(), &cx.emerging).probabilities;
    }
    let mut latent: BTreeMap<String, Vec<PolicyKey>> = BTreeMap::new();
    for k in &cx.emerging {
        for id in select_latent(&hist_current, k, config.debate.tau)? {
            latent.entry(id).or_default().push(k.clone());
        }
    }
    let items: Vec<(AdSample, Vec<PolicyKey>)> = cx
        .historical_samples()
        .into_iter()
        .filter_map(|s| latent.get(&s.id).map(|keys| (s.clone(), keys.clone())))
        .collect();
    let debated = items.iter().map(|(s, _)| s.id.clone()).collect();
    log::info!("stage III: {} latent candidates", items.len());
    let (transcripts, adjudications, changed, failed, unresolved, rollouts) =
        cx.debate_stage(Stage::III, model, items)?;
    extend_unique(&mut train_ids, adjudications.iter().map(|a| a.sample_id.clone()));
    let model_iii = config.learner.fit(&cx.training_set(&train_ids), &cx.emerging);
    stages.push(StageResult {
        stage: StageId::III,
        report: cx.evaluate(&model_iii, StageId::III)?,
        model: model_iii,
        debated,
        transcripts,
        adjudications,
        changed,
        failed,
        unresolved,
        rollouts,
    });
    Ok(finish(cx, stages))
}

fn current_labels(store: &DatasetStore, ids: &[&String]) -> Vec<LabeledSample> {
    ids.iter().filter_map(|id| store.current_label(id)).collect()
}

fn extend_unique(ids: &mut Vec<String>, more: impl Iterator<Item = String>) {
    let mut seen: HashSet<String> = ids.iter().cloned().collect();
    for id in more {
        if seen.insert(id.clone()) {
            ids.push(id);
        }
    }
}

fn finish(cx: Context<'_>, stages: Vec<StageResult>) -> PipelineRun {
    PipelineRun {
        registry: cx.registry,
        store: cx.store,
        emerging: cx.emerging,
        stages,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_id_parses_and_orders() {
        assert_eq!("ii".parse::<StageId>().unwrap(), StageId::II);
        assert_eq!("3".parse::<StageId>().unwrap(), StageId::III);
        assert!(StageId::I < StageId::III);
        assert!("IV".parse::<StageId>().is_err());
    }

    #[test]
    fn learner_needs_support_and_precision() {
        let key = "P33";
        let cue = fixtures::lexicon().phrases_of_tier(key, CueTier::Overt)[0];
        let pos = |v| ComplianceVector::from_labels([(key, v)]);
        let text = format!("Buy now. {cue}.");
        let learner = CueLearner::default();
        let keys = vec![key.to_string()];

        let one = learner.fit(&[(text.clone(), pos(1))], &keys);
        assert!(one.weight(key, cue).is_none());
        let two = learner.fit(&[(text.clone(), pos(1)), (text.clone(), pos(1))], &keys);
        assert!(two.weight(key, cue).unwrap() > 0.0);
        let noisy = learner.fit(
            &[(text.clone(), pos(1)), (text.clone(), pos(1)), (text.clone(), pos(0)), (text.clone(), pos(0)), (text, pos(0))],
            &keys,
        );
        assert!(noisy.weight(key, cue).is_none());
    }

    #[test]
    fn learner_turns_benign_markers_into_suppressors() {
        let key = "P33";
        let cue = fixtures::lexicon().phrases_of_tier(key, CueTier::Overt)[0];
        let marker = fixtures::lexicon().phrases_of_tier(key, CueTier::Benign)[0];
        let v = |l| ComplianceVector::from_labels([(key, l)]);
        let training = vec![
            (format!("{cue}."), v(1)),
            (format!("{cue}."), v(1)),
            (format!("{cue}. {marker}."), v(0)),
            (format!("{cue}. {marker}."), v(0)),
        ];
        let m = CueLearner::default().fit(&training, &[key.to_string()]);
        assert_eq!(m.weight(key, marker), Some(SUPPRESSOR_WEIGHT));
        assert!(m.probability(key, &format!("{cue}. {marker}.")) < 0.5);
    }
}
