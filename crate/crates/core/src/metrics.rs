//! Classification and energy scores for estimated appliance power.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn on_off(series: &[f64], on_threshold: f64) -> Vec<bool> {
    series.iter().map(|&v| v > on_threshold).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl ConfusionCounts {
    pub fn from_states(pred: &[bool], truth: &[bool]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Alignment(format!("{} predicted vs {} true samples", pred.len(), truth.len())));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp as f64, self.positives() as f64)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp as f64, (self.tp + self.fp) as f64)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        ratio(2.0 * p * r, p + r)
    }

    pub fn accuracy(&self) -> f64 {
        ratio((self.tp + self.tn) as f64, (self.positives() + self.negatives()) as f64)
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Alignment(format!("{} vs {} samples", a.len(), b.len())));
    }
    Ok(())
}

/// `|Ê - E| / max(E, Ê)` on power sums; 0 when both are 0.
pub fn relative_error_total_energy(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_len(pred, truth)?;
    let e_hat: f64 = pred.iter().sum();
    let e: f64 = truth.iter().sum();
    Ok(ratio((e_hat - e).abs(), e.max(e_hat)))
}

pub fn mean_absolute_error(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_len(pred, truth)?;
    Ok(ratio(
        pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum(),
        pred.len() as f64,
    ))
}

/// `1 - Σ_t Σ_i |ŷ_t(i) - y_t(i)| / (2 Σ_t ȳ_t)` over appliances `i`.
/// Unclamped. With a zero aggregate the score is 1 for zero error and 0
/// otherwise.
pub fn proportion_energy_correct(preds: &[&[f64]], truths: &[&[f64]], aggregate: &[f64]) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::Alignment(format!("{} predicted vs {} true appliances", preds.len(), truths.len())));
    }
    let mut err = 0.0;
    for (p, t) in preds.iter().zip(truths) {
        check_len(p, aggregate)?;
        check_len(t, aggregate)?;
        err += p.iter().zip(t.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>();
    }
    let total: f64 = aggregate.iter().sum();
    if total == 0.0 {
        return Ok(if err == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(1.0 - err / (2.0 * total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub appliance: String,
    pub algorithm: String,
    pub counts: ConfusionCounts,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub relative_error_total_energy: f64,
    pub mean_absolute_error: f64,
    pub proportion_energy_correct: f64,
}

pub const METRIC_NAMES: [&str; 7] = [
    "recall",
    "precision",
    "f1",
    "accuracy",
    "relative_error_total_energy",
    "mean_absolute_error",
    "proportion_energy_correct",
];

impl MetricsReport {
    /// Single-appliance report; the proportion score uses `aggregate` as the
    /// denominator.
    pub fn compute(appliance: &str, algorithm: &str, pred: &[f64], truth: &[f64], aggregate: &[f64], on_threshold: f64) -> Result<Self> {
        let counts = ConfusionCounts::from_states(&on_off(pred, on_threshold), &on_off(truth, on_threshold))?;
        Ok(MetricsReport {
            appliance: appliance.into(),
            algorithm: algorithm.into(),
            counts,
            recall: counts.recall(),
            precision: counts.precision(),
            f1: counts.f1(),
            accuracy: counts.accuracy(),
            relative_error_total_energy: relative_error_total_energy(pred, truth)?,
            mean_absolute_error: mean_absolute_error(pred, truth)?,
            proportion_energy_correct: proportion_energy_correct(&[pred], &[truth], aggregate)?,
        })
    }

    pub fn values(&self) -> [f64; 7] {
        [
            self.recall,
            self.precision,
            self.f1,
            self.accuracy,
            self.relative_error_total_energy,
            self.mean_absolute_error,
            self.proportion_energy_correct,
        ]
    }
}

/// Long-format table `metric,appliance,algorithm,value`.
pub fn reports_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("metric,appliance,algorithm,value\n");
    for (i, name) in METRIC_NAMES.iter().enumerate() {
        for r in reports {
            out.push_str(&format!("{name},{},{},{}\n", r.appliance, r.algorithm, r.values()[i]));
        }
    }
    out
}
