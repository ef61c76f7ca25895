//! POPE confusion metrics and MME accuracy / accuracy+.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::dataset::{BinaryQARecord, Gold};
use crate::error::{Error, Result};

/// Which metrics had a zero denominator and were reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UndefinedFlags {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
}

impl UndefinedFlags {
    pub fn any(&self) -> bool {
        self.precision || self.recall || self.f1
    }

    /// `precision|recall|f1` subset, empty when nothing is undefined.
    pub fn render(&self) -> String {
        let mut names = Vec::new();
        for (set, name) in [(self.precision, "precision"), (self.recall, "recall"), (self.f1, "f1")] {
            if set {
                names.push(name);
            }
        }
        names.join("|")
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut f = Self::default();
        for name in s.split('|').filter(|n| !n.is_empty()) {
            match name {
                "precision" => f.precision = true,
                "recall" => f.recall = true,
                "f1" => f.f1 = true,
                other => return Err(Error::Parse(format!("unknown flag '{other}'"))),
            }
        }
        Ok(f)
    }
}

/// Yes is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub retrieval_fraction: f64,
    pub undefined: UndefinedFlags,
}

impl MetricReport {
    pub fn n(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64, retrieval_fraction: f64) -> Self {
        let ratio = |num: u64, den: u64| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
        let (precision, p_undef) = ratio(tp, tp + fp);
        let (recall, r_undef) = ratio(tp, tp + fn_);
        let (f1, f_undef) = if precision + recall == 0.0 {
            (0.0, true)
        } else {
            (2.0 * precision * recall / (precision + recall), false)
        };
        let n = tp + fp + fn_ + tn;
        Self {
            accuracy: if n == 0 { 0.0 } else { (tp + tn) as f64 / n as f64 },
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            tn,
            retrieval_fraction,
            undefined: UndefinedFlags { precision: p_undef, recall: r_undef, f1: f_undef },
        }
    }
}

pub fn pope_metrics(records: &[BinaryQARecord]) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::MissingPredictions(0));
    }
    let (mut tp, mut fp, mut fn_, mut tn, mut retrieved) = (0, 0, 0, 0, 0u64);
    for (i, r) in records.iter().enumerate() {
        let predicted = r.predicted.ok_or(Error::MissingPredictions(i))?.effective(r.gold);
        match (r.gold, predicted) {
            (Gold::Yes, Gold::Yes) => tp += 1,
            (Gold::No, Gold::Yes) => fp += 1,
            (Gold::Yes, Gold::No) => fn_ += 1,
            (Gold::No, Gold::No) => tn += 1,
        }
        retrieved += r.retrieval_used as u64;
    }
    Ok(MetricReport::from_counts(tp, fp, fn_, tn, retrieved as f64 / records.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmeScores {
    pub acc: f64,
    pub acc_plus: f64,
    /// `100 * (acc + acc_plus)`, at most 200.
    pub score: f64,
}

/// Groups records by image; every image must carry exactly two questions.
pub fn mme_scores(records: &[BinaryQARecord]) -> Result<MmeScores> {
    if records.is_empty() {
        return Err(Error::MalformedGrouping("no records".into()));
    }
    let mut groups: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(&r.image_uri).or_default().push(r.is_correct().ok_or(Error::MissingPredictions(i))?);
    }
    if let Some((uri, g)) = groups.iter().find(|(_, g)| g.len() != 2) {
        return Err(Error::MalformedGrouping(format!("{uri} has {} questions, expected 2", g.len())));
    }
    let correct = groups.values().flatten().filter(|c| **c).count();
    let both = groups.values().filter(|g| g.iter().all(|c| *c)).count();
    let acc = correct as f64 / records.len() as f64;
    let acc_plus = both as f64 / groups.len() as f64;
    Ok(MmeScores { acc, acc_plus, score: 100.0 * (acc + acc_plus) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::dataset::Prediction;
    use proptest::prelude::*;

    fn record(uri: &str, gold: Gold, pred: Prediction) -> BinaryQARecord {
        let mut r = BinaryQARecord::new(uri, "q", gold);
        r.predicted = Some(pred);
        r
    }

    fn counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Vec<BinaryQARecord> {
        let mut v = Vec::new();
        v.extend((0..tp).map(|_| record("u", Gold::Yes, Prediction::Yes)));
        v.extend((0..fp).map(|_| record("u", Gold::No, Prediction::Yes)));
        v.extend((0..fn_).map(|_| record("u", Gold::Yes, Prediction::No)));
        v.extend((0..tn).map(|_| record("u", Gold::No, Prediction::No)));
        v
    }

    #[test]
    fn all_correct() {
        let r = pope_metrics(&counts(5, 0, 0, 5)).unwrap();
        assert_eq!((r.accuracy, r.precision, r.recall, r.f1), (1.0, 1.0, 1.0, 1.0));
        assert!(!r.undefined.any());
    }

    #[test]
    fn reconstructed_table_row() {
        let r = pope_metrics(&counts(1125, 30, 375, 1470)).unwrap();
        for (got, want) in [(r.accuracy, 86.50), (r.precision, 97.40), (r.recall, 75.00), (r.f1, 84.75)] {
            assert!((100.0 * got - want).abs() <= 0.01, "{got} vs {want}");
        }
        assert_eq!(r.n(), 3000);
    }

    #[test]
    fn all_no_on_balanced() {
        let r = pope_metrics(&counts(0, 0, 5, 5)).unwrap();
        assert_eq!((r.accuracy, r.precision, r.recall, r.f1), (0.5, 0.0, 0.0, 0.0));
        assert!(r.undefined.precision && r.undefined.f1 && !r.undefined.recall);
        assert_eq!(UndefinedFlags::parse(&r.undefined.render()).unwrap(), r.undefined);
    }

    #[test]
    fn missing_prediction() {
        let mut v = counts(1, 0, 0, 1);
        v[1].predicted = None;
        assert!(matches!(pope_metrics(&v), Err(Error::MissingPredictions(1))));
    }

    fn pairs(outcomes: &[(bool, bool)]) -> Vec<BinaryQARecord> {
        let p = |ok: bool| if ok { Prediction::Yes } else { Prediction::No };
        outcomes
            .iter()
            .enumerate()
            .flat_map(|(i, &(a, b))| {
                let uri = format!("img{i}");
                [record(&uri, Gold::Yes, p(a)), record(&uri, Gold::Yes, p(b))]
            })
            .collect()
    }

    #[test]
    fn mme_examples() {
        assert_eq!(mme_scores(&pairs(&[(true, true); 4])).unwrap().score, 200.0);
        let half = mme_scores(&pairs(&[(true, false), (false, true)])).unwrap();
        assert_eq!((half.acc, half.acc_plus, half.score), (0.5, 0.0, 50.0));
        let mut ten = vec![(true, true); 8];
        ten.extend([(true, false), (false, true)]);
        let s = mme_scores(&pairs(&ten)).unwrap();
        assert!((s.score - 170.0).abs() < 1e-9);
        let mut bad = pairs(&[(true, true)]);
        bad.pop();
        assert!(matches!(mme_scores(&bad), Err(Error::MalformedGrouping(_))));
    }

    fn any_pred() -> impl Strategy<Value = Prediction> {
        prop_oneof![Just(Prediction::Yes), Just(Prediction::No), Just(Prediction::Unparseable)]
    }

    proptest! {
        #[test]
        fn f1_between_precision_and_recall(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50, tn in 0u64..50) {
            prop_assume!(tp + fp + fn_ + tn > 0);
            let r = MetricReport::from_counts(tp, fp, fn_, tn, 0.0);
            if !r.undefined.any() {
                prop_assert!(r.f1 >= r.precision.min(r.recall) - 1e-12);
                prop_assert!(r.f1 <= r.precision.max(r.recall) + 1e-12);
            }
            prop_assert_eq!(r.accuracy, (tp + tn) as f64 / (tp + fp + fn_ + tn) as f64);
        }

        #[test]
        fn relabeling_keeps_accuracy(
            rows in prop::collection::vec((prop::bool::ANY, any_pred()), 1..60)
        ) {
            let recs: Vec<_> = rows.iter().map(|&(y, p)| record("u", if y { Gold::Yes } else { Gold::No }, p)).collect();
            let flipped: Vec<_> = recs.iter().map(|r| record("u", r.gold.flipped(), r.predicted.unwrap().flipped())).collect();
            let (a, b) = (pope_metrics(&recs).unwrap(), pope_metrics(&flipped).unwrap());
            prop_assert_eq!(a.accuracy, b.accuracy);
            prop_assert_eq!((a.tp, a.fp, a.fn_, a.tn), (b.tn, b.fn_, b.fp, b.tp));
        }

        #[test]
        fn mme_bounds(rows in prop::collection::vec((prop::bool::ANY, prop::bool::ANY), 1..30)) {
            let s = mme_scores(&pairs(&rows)).unwrap();
            prop_assert!(s.acc_plus <= s.acc + 1e-12);
            prop_assert!((0.0..=200.0).contains(&s.score));
        }
    }
}
