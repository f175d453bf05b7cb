//! Confusion counts and patch-level metrics (positive = changed), plus
//! object-level matching against planted changes.

use std::fmt;
use std::path::Path;

use crate::change::{ChangeStatus, ObjectClass, ReportRow};
use crate::synth::ChangeRecord;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// The same counts with the negative class taken as positive.
    pub fn transposed(&self) -> Confusion {
        Confusion { tp: self.tn, tn: self.tp, fp: self.fn_, fn_: self.fp }
    }
}

/// A ratio that may be undefined (zero denominator).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Value(f64),
    Undefined,
}

impl Metric {
    fn ratio(num: u64, den: u64) -> Metric {
        if den == 0 {
            Metric::Undefined
        } else {
            Metric::Value(num as f64 / den as f64)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(v),
            Metric::Undefined => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Value(v) => write!(f, "{v:.6}"),
            Metric::Undefined => f.write_str("undefined"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub precision: Metric,
    pub recall: Metric,
    pub accuracy: Metric,
}

/// `predictions[i]` and `labels[i]` are `true` for changed.
pub fn tally(predictions: &[bool], labels: &[bool]) -> Result<Confusion> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape {
            expected: format!("{} labels", predictions.len()),
            got: format!("{}", labels.len()),
        });
    }
    let mut c = Confusion::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn metrics(c: &Confusion) -> Metrics {
    Metrics {
        precision: Metric::ratio(c.tp, c.tp + c.fp),
        recall: Metric::ratio(c.tp, c.tp + c.fn_),
        accuracy: Metric::ratio(c.tp + c.tn, c.total()),
    }
}

pub const METRICS_HEADER: &str = "tp,tn,fp,fn,accuracy,precision,recall";

pub fn metrics_csv(c: &Confusion) -> String {
    let m = metrics(c);
    format!("{METRICS_HEADER}\n{},{},{},{},{},{},{}\n", c.tp, c.tn, c.fp, c.fn_, m.accuracy, m.precision, m.recall)
}

pub fn write_metrics(path: &Path, c: &Confusion) -> Result<()> {
    std::fs::write(path, metrics_csv(c)).map_err(|e| Error::io(path, e))
}

/// Object-level recovery of planted changes of one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ObjectScore {
    pub true_changes: usize,
    /// True changes matched by at least one reported change.
    pub recovered: usize,
    /// Reported changes that match no true change.
    pub false_changes: usize,
}

/// A reported change matches a record of the same class and status when its
/// centroid lies in the record's footprint box grown by `tolerance` meters.
pub fn score_objects(records: &[ChangeRecord], reported: &[ReportRow], class: ObjectClass, tolerance: f64) -> ObjectScore {
    let is_change = |s: ChangeStatus| s != ChangeStatus::UnchangedAfterVerification;
    let matches = |rec: &ChangeRecord, row: &ReportRow| {
        rec.class == row.class && rec.status == row.status && {
            let b = rec.footprint.bbox().expanded(tolerance);
            b.contains(row.centroid.0, row.centroid.1)
        }
    };
    let recs: Vec<&ChangeRecord> = records.iter().filter(|r| r.class == class).collect();
    let rows: Vec<&ReportRow> = reported.iter().filter(|r| r.class == class && is_change(r.status)).collect();
    ObjectScore {
        true_changes: recs.len(),
        recovered: recs.iter().filter(|rec| rows.iter().any(|row| matches(rec, row))).count(),
        false_changes: rows.iter().filter(|row| !recs.iter().any(|rec| matches(rec, row))).count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_confusion_matrix() {
        let m = metrics(&Confusion { tp: 1746, tn: 3715, fp: 439, fn_: 419 });
        assert!((m.accuracy.value().unwrap() - 0.864).abs() <= 0.0005);
        assert!((m.precision.value().unwrap() - 0.799).abs() <= 0.0005);
        assert!((m.recall.value().unwrap() - 0.806).abs() <= 0.0005);
    }

    #[test]
    fn degenerate_counts_are_undefined() {
        let m = metrics(&Confusion { tp: 0, tn: 5, fp: 0, fn_: 0 });
        assert_eq!(m.accuracy, Metric::Value(1.0));
        assert_eq!(m.precision, Metric::Undefined);
        assert_eq!(m.recall, Metric::Undefined);
        assert!(metrics_csv(&Confusion { tp: 0, tn: 5, fp: 0, fn_: 0 }).contains("undefined"));
    }

    #[test]
    fn symmetric_counts_give_one_half() {
        let m = metrics(&Confusion { tp: 1, tn: 1, fp: 1, fn_: 1 });
        for v in [m.accuracy, m.precision, m.recall] {
            assert_eq!(v, Metric::Value(0.5));
        }
    }

    #[test]
    fn tally_examples() {
        let labels: Vec<bool> = (0..20).map(|i| i < 10).collect();
        assert_eq!(tally(&labels, &labels).unwrap(), Confusion { tp: 10, tn: 10, fp: 0, fn_: 0 });
        let all = vec![true; 20];
        let c = tally(&all, &labels).unwrap();
        assert_eq!((c.tp, c.fp), (10, 10));
        assert!(matches!(tally(&all[..3], &labels), Err(Error::Shape { .. })));
    }

    #[test]
    fn object_matching() {
        use crate::change::Epoch;
        use crate::pointcloud_io::Bounds2;
        use crate::synth::Footprint;
        let rect = |x: f64, y: f64| Footprint::Rect(Bounds2 { min_x: x, min_y: y, max_x: x + 8.0, max_y: y + 12.0 });
        let records = vec![
            ChangeRecord { id: 1, class: ObjectClass::Building, status: ChangeStatus::New, footprint: rect(0.0, 0.0) },
            ChangeRecord { id: 2, class: ObjectClass::Building, status: ChangeStatus::Demolished, footprint: rect(50.0, 0.0) },
        ];
        let row = |x: f64, y: f64, status| ReportRow {
            id: 0,
            class: ObjectClass::Building,
            status,
            epoch: Epoch::B,
            centroid: (x, y),
            evidence: None,
        };
        let reported = vec![
            row(4.0, 6.0, ChangeStatus::New),
            row(4.5, 6.0, ChangeStatus::New),
            // right place, wrong status
            row(54.0, 6.0, ChangeStatus::New),
            row(90.0, 90.0, ChangeStatus::UnchangedAfterVerification),
        ];
        let s = score_objects(&records, &reported, ObjectClass::Building, 1.0);
        assert_eq!(s, ObjectScore { true_changes: 2, recovered: 1, false_changes: 1 });
        assert_eq!(score_objects(&records, &reported, ObjectClass::Tree, 1.0), ObjectScore::default());
    }

    proptest! {
        #[test]
        fn tally_matches_counting_oracle(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 0..200)) {
            let (p, l): (Vec<bool>, Vec<bool>) = pairs.iter().copied().unzip();
            let c = tally(&p, &l).unwrap();
            let count = |a: bool, b: bool| pairs.iter().filter(|&&x| x == (a, b)).count() as u64;
            prop_assert_eq!(c, Confusion { tp: count(true, true), tn: count(false, false), fp: count(true, false), fn_: count(false, true) });
            prop_assert_eq!(c.total(), pairs.len() as u64);
        }

        #[test]
        fn metrics_are_bounded(tp in 0u64..1000, tn in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000) {
            let c = Confusion { tp, tn, fp, fn_ };
            let m = metrics(&c);
            for v in [m.accuracy, m.precision, m.recall].into_iter().filter_map(Metric::value) {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if c.total() > 0 {
                prop_assert_eq!(m.accuracy.value().unwrap(), (tp + tn) as f64 / c.total() as f64);
            }
        }

        #[test]
        fn swapping_classes_transposes(p in proptest::collection::vec(any::<bool>(), 1..100), seed in any::<u64>()) {
            let l: Vec<bool> = p.iter().enumerate().map(|(i, &x)| x ^ ((seed >> (i % 64)) & 1 == 1)).collect();
            let neg_p: Vec<bool> = p.iter().map(|x| !x).collect();
            let neg_l: Vec<bool> = l.iter().map(|x| !x).collect();
            let c = tally(&p, &l).unwrap();
            let swapped = tally(&neg_p, &neg_l).unwrap();
            prop_assert_eq!(swapped, c.transposed());
            let m = metrics(&swapped);
            prop_assert_eq!(m.precision, Metric::ratio(c.tn, c.tn + c.fn_));
            prop_assert_eq!(m.recall, Metric::ratio(c.tn, c.tn + c.fp));
        }
    }
}
