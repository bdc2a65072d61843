use std::collections::{BTreeMap, HashMap};

use argus_core::dataset::{blend_sft, AdSample, ComplianceVector, LabelSource, LabeledSample, Partition};
use argus_core::debate::{select_conflicts, Adjudication, Stage, Stage2Scope};
use argus_core::eval::{score, LabelMatrix};
use argus_core::fixtures::{P_NEW, P_OLD};
use argus_core::gateway::PolicyModelOutput;
use argus_core::governance::{compute_metrics, Decision, DecisionStatus, RuleKind, ScreenOutcome, ScreeningRule, ScreeningRules};
use argus_core::reward::{cot_similarity, dialectic_reward, grpo_advantages, total_reward, RewardConfig};
use argus_core::text::tokenize;
use chrono::Utc;
use proptest::prelude::*;

/// Full-table LCS, written independently of the rolling-row version.
fn lcs_table(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

fn words() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "ad", "p33", "violates", "the", "clause"]), 1..20)
        .prop_map(|w| w.join(" "))
}

fn adjudication(rationale: String, label: u8) -> Adjudication {
    Adjudication {
        adjudication_id: "a".into(),
        sample_id: "s".into(),
        policy_version: P_NEW.into(),
        stage: Stage::III,
        rectified_labels: [("P33".to_string(), label)].into_iter().collect(),
        rationale,
        cited_clause_ids: vec![],
        umpire_raw: String::new(),
    }
}

proptest! {
    #[test]
    fn similarity_matches_lcs_oracle(a in words(), b in words()) {
        let (ta, tb) = (tokenize(&a), tokenize(&b));
        let l = lcs_table(&ta, &tb) as f64;
        let expected = if l == 0.0 { 0.0 } else {
            let (p, r) = (l / ta.len() as f64, l / tb.len() as f64);
            2.0 * p * r / (p + r)
        };
        let got = cot_similarity(&a, &b).unwrap();
        prop_assert!((got - expected).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
        prop_assert!((got - cot_similarity(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn dialectic_reward_is_bounded(cot in words(), reference in words(), y in 0u8..2, ystar in 0u8..2) {
        let labels = [("P33".to_string(), y)].into_iter().collect();
        let d = dialectic_reward(&labels, &cot, &adjudication(reference, ystar)).unwrap();
        prop_assert!((0.0..=2.0).contains(&d.total));
        prop_assert_eq!(d.matched, u8::from(y == ystar));
        prop_assert!((d.total - (d.matched as f64 + d.sim)).abs() < 1e-15);
    }

    #[test]
    fn hist_blend_is_convex(d in 0.0f64..2.0, lambda in 0.0f64..=1.0, y in 0u8..2, old in 0u8..2) {
        let labels: BTreeMap<String, u8> = [("P33".to_string(), y)].into_iter().collect();
        let legacy: BTreeMap<String, u8> = [("P33".to_string(), old)].into_iter().collect();
        let cfg = RewardConfig { lambda_hist: lambda, ..RewardConfig::default() };
        let t = total_reward(d, &labels, &legacy, &cfg);
        let h = f64::from(u8::from(y == old));
        prop_assert!(t >= d.min(h) - 1e-12 && t <= d.max(h) + 1e-12);
        let zero = RewardConfig::default();
        prop_assert_eq!(total_reward(d, &labels, &legacy, &zero), d);
    }

    #[test]
    fn advantages_center_and_scale(rewards in prop::collection::vec(0.0f64..2.0, 2..16), shift in -5.0f64..5.0) {
        let a = grpo_advantages(&rewards, 1e-6);
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let b = grpo_advantages(&shifted, 1e-6);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-6);
        }
        // Order is preserved: a larger reward never gets a smaller advantage.
        for i in 0..rewards.len() {
            for j in 0..rewards.len() {
                if rewards[i] > rewards[j] {
                    prop_assert!(a[i] >= a[j]);
                }
            }
        }
    }

    #[test]
    fn blend_contains_gold_and_has_rounded_size(n_gold in 0usize..40, n_hist in 0usize..200, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let mk = |p: &str, n: usize, v: &str, s| (0..n).map(|i| LabeledSample {
            sample_id: format!("{p}{i}"),
            vector: ComplianceVector::from_labels([("P1", 0u8)]),
            vintage: v.to_string(),
            source: s,
            cot: None,
        }).collect::<Vec<_>>();
        let gold = mk("g", n_gold, P_NEW, LabelSource::Gold);
        let hist = mk("h", n_hist, P_OLD, LabelSource::Legacy);
        let out = blend_sft(&gold, &hist, ratio, seed).unwrap();
        prop_assert_eq!(out.len(), n_gold + (ratio * n_hist as f64).round() as usize);
        prop_assert_eq!(&out[..n_gold], &gold[..]);
        prop_assert_eq!(out, blend_sft(&gold, &hist, ratio, seed).unwrap());
    }

    #[test]
    fn eval_scores_are_rates_and_avg_is_mean(cells in prop::collection::vec((0u8..2, 0u8..2, 0u8..2, 0u8..2), 1..60)) {
        let keys = vec!["P1".to_string(), "P33".to_string(), "P34".to_string()];
        let emerging = vec!["P33".to_string(), "P34".to_string()];
        let mut pred = LabelMatrix::new();
        let mut gold = LabelMatrix::new();
        for (i, (p33, g33, p34, g34)) in cells.iter().enumerate() {
            let id = format!("s{i}");
            pred.insert(id.clone(), [("P33".to_string(), *p33), ("P34".to_string(), *p34)].into_iter().collect());
            gold.insert(id, [("P33".to_string(), *g33), ("P34".to_string(), *g34)].into_iter().collect());
        }
        let r = score(&pred, &gold, &keys, &emerging).unwrap();
        for s in r.per_policy.values() {
            prop_assert!((0.0..=1.0).contains(&s.precision) && (0.0..=1.0).contains(&s.recall));
        }
        let mean_p = (r.per_policy["P33"].precision + r.per_policy["P34"].precision) / 2.0;
        let mean_r = (r.per_policy["P33"].recall + r.per_policy["P34"].recall) / 2.0;
        prop_assert!((r.avg_delta_p.precision - mean_p).abs() < 1e-15);
        prop_assert!((r.avg_delta_p.recall - mean_r).abs() < 1e-15);
        let tp = cells.iter().filter(|c| c.0 == 1 && c.1 == 1).count();
        prop_assert_eq!(r.per_policy["P33"].tp, tp);
    }

    #[test]
    fn conflicts_match_brute_force(rows in prop::collection::vec((0u8..2, 0u8..2, 0u8..2, 0u8..2), 0..50)) {
        let keys = vec!["P33".to_string(), "P34".to_string()];
        let mut hist = Vec::new();
        let mut preds = HashMap::new();
        let mut expected = Vec::new();
        for (i, (y33, y34, p33, p34)) in rows.iter().enumerate() {
            let id = format!("h{i}");
            hist.push(LabeledSample {
                sample_id: id.clone(),
                vector: ComplianceVector::from_labels([("P33", *y33), ("P34", *y34)]),
                vintage: P_OLD.into(),
                source: LabelSource::Legacy,
                cot: None,
            });
            preds.insert(id.clone(), PolicyModelOutput {
                labels: [("P33".to_string(), *p33), ("P34".to_string(), *p34)].into_iter().collect(),
                probabilities: None,
                cot: String::new(),
            });
            if y33 != p33 || y34 != p34 {
                expected.push(id);
            }
        }
        prop_assert_eq!(select_conflicts(&hist, &preds, &keys, Stage2Scope::ConflictsOnly).unwrap(), expected);
        prop_assert_eq!(select_conflicts(&hist, &preds, &keys, Stage2Scope::AllHistorical).unwrap().len(), rows.len());
    }
}

#[test]
fn screening_counts_planted_matches() {
    let rules = ScreeningRules::new(vec![
        ScreeningRule { id: "p".into(), kind: RuleKind::Phrase, value: "miracle weight pill".into(), policy: "P37".into() },
        ScreeningRule { id: "re".into(), kind: RuleKind::Pattern, value: r"\bcasino\s+bonus\b".into(), policy: "P7".into() },
    ])
    .unwrap();
    let mut planted = 0;
    let mut rejects = 0;
    for i in 0..1000 {
        let mut text = format!("Ad number {i} for fresh bread and coffee.");
        if i % 40 == 0 {
            text.push_str(" Ask about the Miracle Weight Pill!");
            planted += 1;
        } else if i % 40 == 7 {
            text.push_str(" Big CASINO  bonus tonight.");
            planted += 1;
        } else if i % 40 == 9 {
            // Near misses: partial phrase and a word boundary violation.
            text.push_str(" miracle weight pillow, casinobonus");
        }
        let ad = AdSample::new(format!("a{i}"), text, Partition::Live);
        if matches!(rules.screen(&ad), ScreenOutcome::Reject { .. }) {
            rejects += 1;
        }
    }
    assert_eq!(planted, 50);
    assert_eq!(rejects, 50);
    assert_eq!(ScreeningRules::new(vec![]).unwrap().screen(&AdSample::new("x", "anything", Partition::Live)), ScreenOutcome::Pass);
}

fn decision(i: usize, status: DecisionStatus, auto: Option<DecisionStatus>, reviewed: bool) -> Decision {
    Decision {
        submission_id: format!("d{i}"),
        status,
        triggering_policies: if matches!(status, DecisionStatus::Rejected | DecisionStatus::RejectedScreening) {
            vec!["P33".into()]
        } else {
            vec![]
        },
        engine_output: None,
        transcript_id: None,
        decided_at: Utc::now(),
        policy_version: P_NEW.into(),
        screening_rule: None,
        automatic_status: auto,
        engine_error: None,
        task_id: reviewed.then(|| format!("task-d{i}")),
        finalized_at: None,
    }
}

#[test]
fn metrics_follow_counting_oracle() {
    use DecisionStatus::*;
    let mut ds = Vec::new();
    // 9000 automatic: 8000 approvals, 1000 rejections.
    for i in 0..9000 {
        let s = if i < 8000 { Approved } else { Rejected };
        ds.push(decision(i, s, Some(s), false));
    }
    // 1000 reviewed: 600 auto-approved kept, 300 auto-rejected of which 100 overturned, 100 still pending.
    for i in 9000..10_000 {
        let (s, auto) = match i - 9000 {
            0..=599 => (Approved, Approved),
            600..=799 => (Rejected, Rejected),
            800..=899 => (Approved, Rejected),
            _ => (PendingReview, Approved),
        };
        ds.push(decision(i, s, Some(auto), true));
    }
    let backchecks: Vec<_> = (0..40)
        .map(|i| argus_core::governance::Backcheck {
            submission_id: format!("d{i}"),
            labels: [("P34".to_string(), 1)].into_iter().collect(),
            checked_at: Utc::now(),
        })
        .collect();
    let m = compute_metrics(&ds, &backchecks);
    assert_eq!(m.aar, Some(0.9));
    assert_eq!(m.approved, 8000 + 600 + 100);
    assert_eq!(m.vlr, Some(40.0 / 8700.0));
    assert_eq!(m.automatic_rejections, 1300);
    assert_eq!(m.fpr, Some(100.0 / 1300.0));
    assert!((m.aar.unwrap() + m.reviewed_fraction.unwrap() - 1.0).abs() < 1e-15);

    let none = compute_metrics(&[decision(0, Rejected, Some(Rejected), false)], &[]);
    assert_eq!(none.vlr, None);
    assert_eq!(none.fpr, Some(0.0));
}
