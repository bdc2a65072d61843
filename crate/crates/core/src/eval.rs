//! Offline evaluation: per-policy precision and recall, the stage and
//! component ablations, and recall under adversarial evasion.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::debate::DebateConfig;
use crate::pipeline::{self, PipelineConfig, PipelineError, StageId};
use crate::synth::{Corpus, PlantedSample};
use crate::PolicyKey;

/// Sample id -> per-policy labels.
pub type LabelMatrix = BTreeMap<String, BTreeMap<PolicyKey, u8>>;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("predictions and gold differ on sample {0}")]
    IdMismatch(String),
    #[error("corpora differ in size: {normal} normal vs {evasion} evasion samples")]
    SizeMismatch { normal: usize, evasion: usize },
    #[error("invalid flag combination: {0}")]
    InvalidFlags(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyScore {
    pub precision: f64,
    pub recall: f64,
    pub support: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// No predicted positives; precision reported as 0.
    pub precision_degenerate: bool,
    /// No positives in the gold labels; recall reported as 0.
    pub recall_degenerate: bool,
}

impl PolicyScore {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        PolicyScore {
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            support: tp + fn_,
            tp,
            fp,
            fn_,
            precision_degenerate: tp + fp == 0,
            recall_degenerate: tp + fn_ == 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus_id: String,
    /// Row label, e.g. "Stage I" or "w/o Defender".
    pub label: String,
    pub per_policy: BTreeMap<PolicyKey, PolicyScore>,
    /// Macro average over historical keys that have positives or predictions.
    pub historical_overall: Aggregate,
    /// Unweighted mean over the emerging keys.
    pub avg_delta_p: Aggregate,
    pub emerging_keys: Vec<PolicyKey>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Micro recall over all emerging positives.
    pub fn delta_p_micro_recall(&self) -> f64 {
        let (tp, sup) = self
            .emerging_keys
            .iter()
            .filter_map(|k| self.per_policy.get(k))
            .fold((0, 0), |(tp, s), p| (tp + p.tp, s + p.support));
        if sup == 0 {
            0.0
        } else {
            tp as f64 / sup as f64
        }
    }
}

/// Confusion counts per key of `dims`; the first `emerging.len()` aggregate
/// is taken over `emerging`, the historical one over the rest.
pub fn score(
    predictions: &LabelMatrix,
    gold: &LabelMatrix,
    dims: &[PolicyKey],
    emerging: &[PolicyKey],
) -> Result<EvalReport, EvalError> {
    if let Some(id) = predictions.keys().find(|id| !gold.contains_key(*id)) {
        return Err(EvalError::IdMismatch(id.clone()));
    }
    if let Some(id) = gold.keys().find(|id| !predictions.contains_key(*id)) {
        return Err(EvalError::IdMismatch(id.clone()));
    }
    let mut counts: BTreeMap<&PolicyKey, (usize, usize, usize)> = dims.iter().map(|k| (k, (0, 0, 0))).collect();
    for (id, truth) in gold {
        let pred = &predictions[id];
        for k in dims {
            let y = truth.get(k).copied().unwrap_or(0);
            let p = pred.get(k).copied().unwrap_or(0);
            let c = counts.get_mut(k).expect("dims key");
            match (p, y) {
                (1, 1) => c.0 += 1,
                (1, 0) => c.1 += 1,
                (0, 1) => c.2 += 1,
                _ => {}
            }
        }
    }
    let per_policy: BTreeMap<PolicyKey, PolicyScore> = counts
        .into_iter()
        .map(|(k, (tp, fp, fn_))| (k.clone(), PolicyScore::from_counts(tp, fp, fn_)))
        .collect();

    let mean = |rows: Vec<&PolicyScore>| {
        if rows.is_empty() {
            return Aggregate {
                precision: 0.0,
                recall: 0.0,
            };
        }
        let n = rows.len() as f64;
        Aggregate {
            precision: rows.iter().map(|r| r.precision).sum::<f64>() / n,
            recall: rows.iter().map(|r| r.recall).sum::<f64>() / n,
        }
    };
    let emerging_rows = emerging.iter().filter_map(|k| per_policy.get(k)).collect();
    let hist_rows = dims
        .iter()
        .filter(|k| !emerging.contains(k))
        .filter_map(|k| per_policy.get(k))
        .filter(|r| r.support > 0 || r.tp + r.fp > 0)
        .collect();
    Ok(EvalReport {
        corpus_id: String::new(),
        label: String::new(),
        historical_overall: mean(hist_rows),
        avg_delta_p: mean(emerging_rows),
        per_policy,
        emerging_keys: emerging.to_vec(),
        config: serde_json::Value::Null,
    })
}

/// Aligned text table: one row per report; historical macro, each emerging policy, then the average.
pub fn render_table(reports: &[EvalReport], codes: &BTreeMap<PolicyKey, String>) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let keys = &first.emerging_keys;
    let label_w = reports.iter().map(|r| r.label.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "# corpus {}; Historical Overall is a macro average", first.corpus_id);
    let _ = write!(out, "{:<label_w$} | {:^15} |", "Method", "Hist. Overall");
    for k in keys {
        let name = codes.get(k).map(String::as_str).unwrap_or(k);
        let _ = write!(out, " {:^15} |", name);
    }
    let _ = writeln!(out, " {:^15}", "Avg. dP");
    let _ = write!(out, "{:<label_w$} | {:>7} {:>7} |", "", "Prec.", "Rec.");
    for _ in keys {
        let _ = write!(out, " {:>7} {:>7} |", "Prec.", "Rec.");
    }
    let _ = writeln!(out, " {:>7} {:>7}", "Prec.", "Rec.");
    for r in reports {
        let _ = write!(
            out,
            "{:<label_w$} | {:>7.3} {:>7.3} |",
            r.label, r.historical_overall.precision, r.historical_overall.recall
        );
        for k in keys {
            let s = r.per_policy.get(k);
            let _ = write!(
                out,
                " {:>7.3} {:>7.3} |",
                s.map_or(0.0, |s| s.precision),
                s.map_or(0.0, |s| s.recall)
            );
        }
        let _ = writeln!(out, " {:>7.3} {:>7.3}", r.avg_delta_p.precision, r.avg_delta_p.recall);
    }
    out
}

/// One report per cumulative stage in `stages` (each of I, II, III at most
/// once), all on the same corpus and seed.
pub fn run_stage_ablation(
    corpus: &Corpus,
    config: &PipelineConfig,
    stages: &[StageId],
) -> Result<Vec<EvalReport>, EvalError> {
    let last = stages.iter().copied().max().unwrap_or(StageId::I);
    let run = pipeline::run(corpus, config, last)?;
    Ok(run
        .stages
        .into_iter()
        .filter(|s| stages.contains(&s.stage))
        .map(|s| s.report)
        .collect())
}

/// A named debate variant of the component ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentVariant {
    pub label: String,
    pub debate: DebateConfig,
}

/// The full configuration plus the three ablated rows.
pub fn default_component_variants(base: &DebateConfig) -> Vec<ComponentVariant> {
    vec![
        ComponentVariant {
            label: "Full".into(),
            debate: base.clone(),
        },
        ComponentVariant {
            label: "w/o Prosecutor".into(),
            debate: DebateConfig {
                enable_prosecutor: false,
                ..base.clone()
            },
        },
        ComponentVariant {
            label: "w/o Defender".into(),
            debate: DebateConfig {
                enable_defender: false,
                ..base.clone()
            },
        },
        ComponentVariant {
            label: "w/o Rationale (Labels Only)".into(),
            debate: DebateConfig {
                labels_only: true,
                ..base.clone()
            },
        },
    ]
}

/// A component-ablation row with the rollouts it produced.
#[derive(Debug, Clone)]
pub struct ComponentRow {
    pub report: EvalReport,
    pub rollouts: Vec<crate::reward::RolloutRecord>,
}

/// Runs all three stages once per variant.
pub fn run_component_ablation(
    corpus: &Corpus,
    config: &PipelineConfig,
    variants: &[ComponentVariant],
) -> Result<Vec<ComponentRow>, EvalError> {
    for v in variants {
        if !v.debate.enable_prosecutor && !v.debate.enable_defender {
            return Err(EvalError::InvalidFlags(format!(
                "{}: prosecutor and defender both disabled",
                v.label
            )));
        }
    }
    variants
        .iter()
        .map(|v| {
            let cfg = PipelineConfig {
                debate: v.debate.clone(),
                ..config.clone()
            };
            let run = pipeline::run(corpus, &cfg, StageId::III)?;
            let rollouts = run.stages.iter().flat_map(|s| s.rollouts.clone()).collect();
            let mut report = run.stages.last().expect("three stages").report.clone();
            report.label = v.label.clone();
            Ok(ComponentRow { report, rollouts })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialReport {
    pub positives: usize,
    /// `None` when there are no positives.
    pub normal_recall: Option<f64>,
    pub evasion_recall: Option<f64>,
    /// `(normal - evasion) / normal`; `None` when undefined.
    pub relative_drop: Option<f64>,
}

/// Recall over (`sample`, `key`) positives of `keys` on a normal corpus and
/// its evasion counterpart. `predict` maps a sample to its labels.
pub fn adversarial_eval<F>(
    normal: &[PlantedSample],
    evasion: &[PlantedSample],
    keys: &[PolicyKey],
    predict: F,
) -> Result<AdversarialReport, EvalError>
where
    F: Fn(&PlantedSample) -> BTreeMap<PolicyKey, u8>,
{
    if normal.len() != evasion.len() {
        return Err(EvalError::SizeMismatch {
            normal: normal.len(),
            evasion: evasion.len(),
        });
    }
    let recall = |set: &[PlantedSample]| {
        let (mut tp, mut pos) = (0usize, 0usize);
        for s in set {
            let pred = predict(s);
            for k in s.truth.iter().filter(|k| keys.contains(k)) {
                pos += 1;
                if pred.get(k).copied().unwrap_or(0) == 1 {
                    tp += 1;
                }
            }
        }
        (pos, (pos > 0).then(|| tp as f64 / pos as f64))
    };
    let (positives, normal_recall) = recall(normal);
    let (_, evasion_recall) = recall(evasion);
    let relative_drop = match (normal_recall, evasion_recall) {
        (Some(n), Some(e)) if n > 0.0 => Some((n - e) / n),
        _ => None,
    };
    Ok(AdversarialReport {
        positives,
        normal_recall,
        evasion_recall,
        relative_drop,
    })
}
