use std::io::{self, Write};

use thiserror::Error;

use super::dataset::Dataset;
use crate::micronet::{argmax, NetError, Network};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("ROC needs at least one positive and one negative sample")]
    OneSidedRoc,
    #[error("{scores} scores but {labels} labels")]
    Length { scores: usize, labels: usize },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// One-vs-rest confusion counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

/// `num / den`, or 1 when there was nothing to get wrong.
fn rate(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Counts with each class taken as the positive one.
    pub per_class: Vec<Counts>,
    /// Sum of `per_class`.
    pub micro: Counts,
    /// Counts behind the headline rates: class 1 as positive for two
    /// classes, `micro` otherwise.
    pub headline: Counts,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub error: f64,
    pub wall_time_seconds: f64,
}

impl Metrics {
    /// Rates from a single confusion table.
    pub fn from_counts(counts: Counts) -> Metrics {
        let accuracy = rate(counts.tp + counts.tn, counts.total());
        Metrics {
            per_class: vec![counts],
            micro: counts,
            headline: counts,
            accuracy,
            sensitivity: rate(counts.tp, counts.tp + counts.fn_),
            specificity: rate(counts.tn, counts.tn + counts.fp),
            error: 1.0 - accuracy,
            wall_time_seconds: 0.0,
        }
    }

    /// Counts from true and predicted labels over `classes` classes.
    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Metrics {
        let per_class: Vec<Counts> = (0..classes)
            .map(|c| {
                let mut k = Counts::default();
                for (&t, &p) in truth.iter().zip(predicted) {
                    match (t == c, p == c) {
                        (true, true) => k.tp += 1,
                        (false, false) => k.tn += 1,
                        (false, true) => k.fp += 1,
                        (true, false) => k.fn_ += 1,
                    }
                }
                k
            })
            .collect();
        let micro = per_class.iter().fold(Counts::default(), |a, &b| a + b);
        let headline = if classes == 2 { per_class[1] } else { micro };
        Metrics {
            per_class,
            micro,
            ..Metrics::from_counts(headline)
        }
    }

    /// `accuracy,specificity,sensitivity,time_s,error`.
    pub fn write_csv<W: Write>(&self, mut out: W, time_s: f64) -> io::Result<()> {
        writeln!(out, "accuracy,specificity,sensitivity,time_s,error")?;
        writeln!(
            out,
            "{},{},{},{},{}",
            self.accuracy, self.specificity, self.sensitivity, time_s, self.error
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Sweeps the threshold down through the distinct scores; tied scores move
/// together, so ties produce diagonal segments.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Result<RocCurve, MetricsError> {
    if scores.len() != positive.len() {
        return Err(MetricsError::Length {
            scores: scores.len(),
            labels: positive.len(),
        });
    }
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::OneSidedRoc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = trapezoid_area(&points);
    Ok(RocCurve { points, auc })
}

/// ROC curves for a run: one curve for two classes (class 1 scores), one
/// per class otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct RocReport {
    pub curves: Vec<RocCurve>,
    /// The single curve's area, or the macro average over classes.
    pub auc: f64,
}

impl RocReport {
    /// `fpr,tpr` rows (`class,fpr,tpr` with several curves), then `auc,<value>`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        if self.curves.len() == 1 {
            writeln!(out, "fpr,tpr")?;
            for (x, y) in &self.curves[0].points {
                writeln!(out, "{x},{y}")?;
            }
        } else {
            writeln!(out, "class,fpr,tpr")?;
            for (c, curve) in self.curves.iter().enumerate() {
                for (x, y) in &curve.points {
                    writeln!(out, "{c},{x},{y}")?;
                }
            }
        }
        writeln!(out, "auc,{}", self.auc)
    }
}

pub fn roc_report(probabilities: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<RocReport, MetricsError> {
    let curve_for = |c: usize| {
        let scores: Vec<f64> = probabilities.iter().map(|p| p[c]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        roc_curve(&scores, &positive)
    };
    let curves = if classes == 2 {
        vec![curve_for(1)?]
    } else {
        (0..classes).map(curve_for).collect::<Result<Vec<_>, _>>()?
    };
    let auc = curves.iter().map(|c| c.auc).sum::<f64>() / curves.len() as f64;
    Ok(RocReport { curves, auc })
}

/// Predicts every test sample (argmax, lowest class on ties) and scores the
/// result. `wall_time_seconds` is left at zero for the caller to fill.
pub fn evaluate(network: &Network, test_set: &Dataset) -> Result<(Metrics, RocReport), MetricsError> {
    if test_set.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    let examples = test_set.to_examples();
    let inputs: Vec<_> = examples.iter().map(|e| &e.input).collect();
    let probs = network.predict(&inputs)?;
    let rows: Vec<Vec<f64>> = (0..examples.len()).map(|i| probs.row(i).to_vec()).collect();
    let truth = test_set.labels();
    let predicted: Vec<usize> = rows.iter().map(|r| argmax(r)).collect();
    let classes = network.spec.num_classes;
    let metrics = Metrics::from_predictions(&truth, &predicted, classes);
    let roc = roc_report(&rows, &truth, classes)?;
    Ok((metrics, roc))
}
