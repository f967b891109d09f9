//! Task metrics: intent accuracy suites, dialog-state joint/slot accuracy,
//! micro/macro F1 for multi-label prediction, and recall@k for ranking.
//!
//! Every metric lies in [0, 1]. Undefined quantities (e.g. out-of-scope
//! recall without out-of-scope gold examples) are reported as absent
//! rather than 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intent-classification metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentMetrics {
    /// Accuracy over all examples.
    pub acc_all: f64,
    /// Accuracy over examples whose gold label is in-domain.
    pub acc_in: Option<f64>,
    /// Accuracy of the binary in-domain/out-of-scope decision.
    pub acc_out: Option<f64>,
    /// Fraction of gold out-of-scope examples predicted out-of-scope.
    pub recall_out: Option<f64>,
}

/// Intent metrics; `out_of_scope_class` is the catch-all class id when the
/// corpus has one.
pub fn metric_intent(
    preds: &[usize],
    gold: &[usize],
    out_of_scope_class: Option<usize>,
) -> Result<IntentMetrics> {
    if preds.is_empty() {
        return Err(Error::InvalidInput(
            "intent metrics over no examples".into(),
        ));
    }
    if preds.len() != gold.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} gold labels",
            preds.len(),
            gold.len()
        )));
    }
    let correct = preds.iter().zip(gold).filter(|(p, g)| p == g).count();
    let acc_all = correct as f64 / preds.len() as f64;

    let Some(oos) = out_of_scope_class else {
        return Ok(IntentMetrics {
            acc_all,
            acc_in: Some(acc_all),
            acc_out: None,
            recall_out: None,
        });
    };

    let mut in_total = 0usize;
    let mut in_correct = 0usize;
    let mut inout_correct = 0usize;
    let mut oos_total = 0usize;
    let mut oos_predicted = 0usize;
    for (&p, &g) in preds.iter().zip(gold) {
        if g != oos {
            in_total += 1;
            if p == g {
                in_correct += 1;
            }
        } else {
            oos_total += 1;
            if p == oos {
                oos_predicted += 1;
            }
        }
        if (p == oos) == (g == oos) {
            inout_correct += 1;
        }
    }
    Ok(IntentMetrics {
        acc_all,
        acc_in: (in_total > 0).then(|| in_correct as f64 / in_total as f64),
        acc_out: Some(inout_correct as f64 / preds.len() as f64),
        recall_out: (oos_total > 0).then(|| oos_predicted as f64 / oos_total as f64),
    })
}

/// Dialog-state-tracking metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DstMetrics {
    /// Fraction of examples whose full assignment matches exactly.
    pub joint_acc: f64,
    /// Per-(example, pair) value match rate.
    pub slot_acc: f64,
}

pub fn metric_dst(preds: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<DstMetrics> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("dst metrics over no examples".into()));
    }
    if preds.len() != gold.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} gold assignments",
            preds.len(),
            gold.len()
        )));
    }
    let mut joint = 0usize;
    let mut slots_correct = 0usize;
    let mut slots_total = 0usize;
    for (p, g) in preds.iter().zip(gold) {
        if p.len() != g.len() {
            return Err(Error::ShapeMismatch(format!(
                "assignment over {} pairs vs gold over {}",
                p.len(),
                g.len()
            )));
        }
        let matched = p.iter().zip(g).filter(|(a, b)| a == b).count();
        slots_correct += matched;
        slots_total += p.len();
        if matched == p.len() {
            joint += 1;
        }
    }
    Ok(DstMetrics {
        joint_acc: joint as f64 / preds.len() as f64,
        slot_acc: slots_correct as f64 / slots_total as f64,
    })
}

/// Multi-label F1 metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Metrics {
    pub micro_f1: f64,
    pub macro_f1: f64,
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    // No positives anywhere scores 0 by convention.
    if 2 * tp + fp + fn_ == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Micro-F1 over pooled counts and macro-F1 as the unweighted mean of
/// per-class F1, with classes that never occur scoring 0.
pub fn metric_f1(preds: &[Vec<bool>], gold: &[Vec<bool>], classes: usize) -> Result<F1Metrics> {
    if classes == 0 {
        return Err(Error::InvalidInput("f1 over zero classes".into()));
    }
    if preds.is_empty() {
        return Err(Error::InvalidInput("f1 metrics over no examples".into()));
    }
    if preds.len() != gold.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} gold sets",
            preds.len(),
            gold.len()
        )));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (p, g) in preds.iter().zip(gold) {
        if p.len() != classes || g.len() != classes {
            return Err(Error::ShapeMismatch(format!(
                "label width {} or {} differs from {classes} classes",
                p.len(),
                g.len()
            )));
        }
        for c in 0..classes {
            match (p[c], g[c]) {
                (true, true) => tp[c] += 1,
                (true, false) => fp[c] += 1,
                (false, true) => fn_[c] += 1,
                (false, false) => {}
            }
        }
    }
    let micro_f1 = f1_from_counts(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let macro_f1 = (0..classes)
        .map(|c| f1_from_counts(tp[c], fp[c], fn_[c]))
        .sum::<f64>()
        / classes as f64;
    Ok(F1Metrics { micro_f1, macro_f1 })
}

/// One evaluated ranking: candidate ids in rank order plus the true one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub ordered_candidates: Vec<usize>,
    pub true_candidate: usize,
}

impl Ranking {
    /// 1-based rank of the true candidate.
    pub fn true_rank(&self) -> Result<usize> {
        self.ordered_candidates
            .iter()
            .position(|&c| c == self.true_candidate)
            .map(|p| p + 1)
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "true candidate {} absent from its ranking",
                    self.true_candidate
                ))
            })
    }
}

/// Fraction of rankings whose true candidate sits within the top `k`.
pub fn metric_recall_at_k(rankings: &[Ranking], k: usize) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::InvalidInput("recall@k over no rankings".into()));
    }
    let mut hits = 0usize;
    for r in rankings {
        if r.true_rank()? <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / rankings.len() as f64)
}

/// Plain accuracy between aligned label sequences.
pub fn accuracy<T: PartialEq>(preds: &[T], gold: &[T]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gold.len() {
        return Err(Error::ShapeMismatch(format!(
            "accuracy over {} predictions vs {} gold",
            preds.len(),
            gold.len()
        )));
    }
    Ok(preds.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::StreamRng;

    #[test]
    fn intent_perfect_predictions() {
        let m = metric_intent(&[0, 1, 2], &[0, 1, 2], Some(2)).unwrap();
        assert_eq!(m.acc_all, 1.0);
        assert_eq!(m.acc_in, Some(1.0));
        assert_eq!(m.acc_out, Some(1.0));
        assert_eq!(m.recall_out, Some(1.0));
    }

    #[test]
    fn intent_hand_case() {
        // gold = [in(0), out], pred = [in(0), in(1)], oos class = 9.
        let m = metric_intent(&[0, 1], &[0, 9], Some(9)).unwrap();
        assert_eq!(m.acc_all, 0.5);
        assert_eq!(m.acc_in, Some(1.0));
        assert_eq!(m.acc_out, Some(0.5));
        assert_eq!(m.recall_out, Some(0.0));
    }

    #[test]
    fn intent_without_oos_gold_reports_absent_recall() {
        let m = metric_intent(&[0, 1], &[0, 0], Some(9)).unwrap();
        assert_eq!(m.recall_out, None);
        assert!(metric_intent(&[], &[], Some(0)).is_err());
    }

    #[test]
    fn dst_hand_cases() {
        let m = metric_dst(&[vec![1, 2]], &[vec![1, 2]]).unwrap();
        assert_eq!(m.joint_acc, 1.0);
        assert_eq!(m.slot_acc, 1.0);

        let m = metric_dst(&[vec![1, 0]], &[vec![1, 2]]).unwrap();
        assert_eq!(m.joint_acc, 0.0);
        assert_eq!(m.slot_acc, 0.5);

        assert!(metric_dst(&[vec![1]], &[vec![1, 2]]).is_err());
    }

    #[test]
    fn dst_joint_never_exceeds_slot() {
        let mut rng = StreamRng::new(3);
        for _ in 0..50 {
            let n = 1 + rng.below(20);
            let pairs = 1 + rng.below(4);
            let draw = |rng: &mut StreamRng| {
                (0..n)
                    .map(|_| (0..pairs).map(|_| rng.below(3)).collect::<Vec<_>>())
                    .collect::<Vec<_>>()
            };
            let preds = draw(&mut rng);
            let gold = draw(&mut rng);
            let m = metric_dst(&preds, &gold).unwrap();
            assert!(m.joint_acc <= m.slot_acc + 1e-12);
        }
    }

    #[test]
    fn f1_hand_case() {
        // gold {0},{1}; pred {0},{0}.
        let gold = vec![vec![true, false], vec![false, true]];
        let preds = vec![vec![true, false], vec![true, false]];
        let m = metric_f1(&preds, &gold, 2).unwrap();
        assert!((m.micro_f1 - 0.5).abs() < 1e-12);
        assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_perfect_and_empty_conventions() {
        let gold = vec![vec![true, false], vec![true, true]];
        let m = metric_f1(&gold, &gold, 2).unwrap();
        assert_eq!(m.micro_f1, 1.0);
        assert_eq!(m.macro_f1, 1.0);

        let nothing = vec![vec![false, false]; 3];
        let m = metric_f1(&nothing, &nothing, 2).unwrap();
        assert_eq!(m.micro_f1, 0.0);
        assert_eq!(m.macro_f1, 0.0);

        assert!(metric_f1(&nothing, &nothing, 0).is_err());
    }

    // Independent recount of per-class confusion cells, composed into F1
    // the long way.
    fn brute_force_f1(preds: &[Vec<bool>], gold: &[Vec<bool>], classes: usize) -> (f64, f64) {
        let mut per_class = Vec::new();
        let (mut tp_all, mut fp_all, mut fn_all) = (0.0, 0.0, 0.0);
        for c in 0..classes {
            let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
            for i in 0..preds.len() {
                if preds[i][c] && gold[i][c] {
                    tp += 1.0;
                }
                if preds[i][c] && !gold[i][c] {
                    fp += 1.0;
                }
                if !preds[i][c] && gold[i][c] {
                    fn_ += 1.0;
                }
            }
            tp_all += tp;
            fp_all += fp;
            fn_all += fn_;
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            per_class.push(f1);
        }
        let precision = if tp_all + fp_all > 0.0 {
            tp_all / (tp_all + fp_all)
        } else {
            0.0
        };
        let recall = if tp_all + fn_all > 0.0 {
            tp_all / (tp_all + fn_all)
        } else {
            0.0
        };
        let micro = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let macro_ = per_class.iter().sum::<f64>() / classes as f64;
        (micro, macro_)
    }

    #[test]
    fn f1_matches_brute_force_on_random_instances() {
        let mut rng = StreamRng::new(17);
        for _ in 0..100 {
            let n = 1 + rng.below(15);
            let classes = 1 + rng.below(6);
            let draw = |rng: &mut StreamRng| {
                (0..n)
                    .map(|_| {
                        (0..classes)
                            .map(|_| rng.uniform() < 0.4)
                            .collect::<Vec<_>>()
                    })
                    .collect::<Vec<_>>()
            };
            let preds = draw(&mut rng);
            let gold = draw(&mut rng);
            let m = metric_f1(&preds, &gold, classes).unwrap();
            let (micro, macro_) = brute_force_f1(&preds, &gold, classes);
            assert!((m.micro_f1 - micro).abs() < 1e-12);
            assert!((m.macro_f1 - macro_).abs() < 1e-12);
            assert!(m.micro_f1 >= 0.0 && m.micro_f1 <= 1.0);
            assert!(m.macro_f1 >= 0.0 && m.macro_f1 <= 1.0);
        }
    }

    #[test]
    fn recall_at_k_hand_cases() {
        let ranking = |order: Vec<usize>, truth: usize| Ranking {
            ordered_candidates: order,
            true_candidate: truth,
        };
        let always_first = vec![ranking(vec![5, 1, 2], 5), ranking(vec![7, 0, 3], 7)];
        assert_eq!(metric_recall_at_k(&always_first, 1).unwrap(), 1.0);
        assert_eq!(metric_recall_at_k(&always_first, 3).unwrap(), 1.0);

        // Ranks 1, 2, 5.
        let mixed = vec![
            ranking(vec![9, 1, 2, 3, 4], 9),
            ranking(vec![1, 9, 2, 3, 4], 9),
            ranking(vec![1, 2, 3, 4, 9], 9),
        ];
        let r1 = metric_recall_at_k(&mixed, 1).unwrap();
        let r3 = metric_recall_at_k(&mixed, 3).unwrap();
        assert!((r1 - 1.0 / 3.0).abs() < 1e-12);
        assert!((r3 - 2.0 / 3.0).abs() < 1e-12);
        assert!(r1 <= r3);
    }

    #[test]
    fn recall_requires_true_candidate_present() {
        let bad = vec![Ranking {
            ordered_candidates: vec![1, 2],
            true_candidate: 7,
        }];
        assert!(metric_recall_at_k(&bad, 1).is_err());
    }
}
