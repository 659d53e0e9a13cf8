//! Evaluation mathematics: per-task accuracy bookkeeping, average accuracy,
//! average forgetting, average intransigence, confusion matrices, and the
//! prototype-vs-exemplar memory accounting.
//!
//! Stage/task arguments follow the 1-based convention of the definitions:
//! `t` is the number of tasks learned so far, task `i` satisfies
//! 1 <= i <= t. Values are computed in [0,1]; file outputs convert to
//! percent.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Lower-triangular record of per-task evaluation counts: entry (t, i)
/// holds (correct, total) for task i after learning t tasks. Storing counts
/// rather than ratios makes CSV round-trips exact.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<(u64, u64)>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build directly from counts; row t (0-based) must have t+1 entries.
    pub fn from_counts(rows: Vec<Vec<(u64, u64)>>) -> Result<Self> {
        for (idx, row) in rows.iter().enumerate() {
            if row.len() != idx + 1 {
                return Err(Error::InvalidArgument(format!(
                    "row {} must have {} entries, got {}",
                    idx + 1,
                    idx + 1,
                    row.len()
                )));
            }
            if row.iter().any(|&(c, n)| n == 0 || c > n) {
                return Err(Error::InvalidArgument(
                    "counts must satisfy 0 <= correct <= total, total > 0".into(),
                ));
            }
        }
        Ok(AccuracyMatrix { rows })
    }

    /// Append the evaluation row after learning one more task.
    pub fn push_stage(&mut self, per_task: Vec<(u64, u64)>) -> Result<()> {
        if per_task.len() != self.rows.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "stage {} needs {} per-task entries, got {}",
                self.rows.len() + 1,
                self.rows.len() + 1,
                per_task.len()
            )));
        }
        if per_task.iter().any(|&(c, n)| n == 0 || c > n) {
            return Err(Error::InvalidArgument(
                "counts must satisfy 0 <= correct <= total, total > 0".into(),
            ));
        }
        self.rows.push(per_task);
        Ok(())
    }

    /// Number of completed stages (T).
    pub fn stage_count(&self) -> usize {
        self.rows.len()
    }

    pub fn counts(&self, t: usize, i: usize) -> Result<(u64, u64)> {
        if !(1 <= i && i <= t && t <= self.rows.len()) {
            return Err(Error::InvalidArgument(format!(
                "entry ({t},{i}) outside the lower triangle of {} stages",
                self.rows.len()
            )));
        }
        Ok(self.rows[t - 1][i - 1])
    }

    /// a_{t,i}: accuracy of task i after learning t tasks.
    pub fn accuracy(&self, t: usize, i: usize) -> Result<f64> {
        let (c, n) = self.counts(t, i)?;
        Ok(c as f64 / n as f64)
    }

    /// Overall accuracy after t tasks, over the union of all seen test sets.
    pub fn overall(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.rows.len() {
            return Err(Error::InvalidArgument(format!("no row for t={t}")));
        }
        let (c, n) = self.rows[t - 1]
            .iter()
            .fold((0u64, 0u64), |(ac, an), &(c, n)| (ac + c, an + n));
        Ok(c as f64 / n as f64)
    }

    /// A_t = (1/t) sum_i a_{t,i}.
    pub fn average_accuracy(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.rows.len() {
            return Err(Error::InvalidArgument(format!("row t={t} incomplete")));
        }
        let mut sum = 0.0;
        for i in 1..=t {
            sum += self.accuracy(t, i)?;
        }
        Ok(sum / t as f64)
    }

    /// F_t = (1/(t-1)) sum_{i<t} [max_{k<t} a_{k,i} - a_{t,i}].
    ///
    /// This is the positive-forgetting convention: larger means more was
    /// forgotten. (The literal printed formula with the operands swapped
    /// yields non-positive values, contradicting its own reported scale.)
    pub fn average_forgetting(&self, t: usize) -> Result<f64> {
        if t < 2 {
            return Err(Error::InvalidArgument(
                "forgetting is undefined before the second task".into(),
            ));
        }
        if t > self.rows.len() {
            return Err(Error::InvalidArgument(format!("row t={t} incomplete")));
        }
        let mut sum = 0.0;
        for i in 1..t {
            let mut best = f64::NEG_INFINITY;
            for k in i..t {
                best = best.max(self.accuracy(k, i)?);
            }
            sum += best - self.accuracy(t, i)?;
        }
        Ok(sum / (t - 1) as f64)
    }

    /// CSV serialization: one line per (stage, task) with raw counts plus a
    /// human-readable accuracy column. Parsing the counts back reproduces
    /// the matrix exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,task,correct,total,accuracy\n");
        for (t0, row) in self.rows.iter().enumerate() {
            for (i0, &(c, n)) in row.iter().enumerate() {
                let acc = c as f64 / n as f64;
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    t0 + 1,
                    i0 + 1,
                    c,
                    n,
                    format_sig(acc, 6)
                ));
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("stage,task,correct,total,accuracy") => {}
            other => {
                return Err(Error::Data(format!(
                    "unexpected accuracy-matrix header {other:?}"
                )))
            }
        }
        let mut rows: Vec<Vec<(u64, u64)>> = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Data(format!("malformed row: {line}")));
            }
            let parse = |s: &str| -> Result<u64> {
                s.parse()
                    .map_err(|_| Error::Data(format!("bad integer {s} in: {line}")))
            };
            let (t, i) = (parse(fields[0])? as usize, parse(fields[1])? as usize);
            let (c, n) = (parse(fields[2])?, parse(fields[3])?);
            if t == rows.len() + 1 && i == 1 {
                rows.push(Vec::new());
            }
            if t != rows.len() || i != rows[t - 1].len() + 1 {
                return Err(Error::Data(format!("out-of-order row: {line}")));
            }
            rows[t - 1].push((c, n));
        }
        Self::from_counts(rows)
    }
}

/// Mean of the per-stage overall accuracies (the "Accuracy" column
/// convention of incremental-learning result tables).
pub fn incremental_average(overall_accuracies: &[f64]) -> Result<f64> {
    if overall_accuracies.is_empty() {
        return Err(Error::InvalidArgument(
            "incremental average needs at least one stage".into(),
        ));
    }
    Ok(overall_accuracies.iter().sum::<f64>() / overall_accuracies.len() as f64)
}

/// I_t = (1/t) sum_i (a*_i - a_{i,i}), where a*_i is the accuracy of a
/// reference model trained on task i alone.
pub fn average_intransigence(
    matrix: &AccuracyMatrix,
    reference_accuracies: &[f64],
    t: usize,
) -> Result<f64> {
    if t == 0 || t > matrix.stage_count() {
        return Err(Error::InvalidArgument(format!("row t={t} incomplete")));
    }
    if reference_accuracies.len() < t {
        return Err(Error::InvalidArgument(format!(
            "need {t} reference accuracies, got {}",
            reference_accuracies.len()
        )));
    }
    let mut sum = 0.0;
    for i in 1..=t {
        sum += reference_accuracies[i - 1] - matrix.accuracy(i, i)?;
    }
    Ok(sum / t as f64)
}

/// Counts[true][predicted] over a prediction/label pairing.
pub fn confusion_matrix(
    predictions: &[usize],
    labels: &[usize],
    class_count: usize,
) -> Result<Vec<u64>> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut counts = vec![0u64; class_count * class_count];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= class_count || l >= class_count {
            return Err(Error::InvalidArgument(format!(
                "class index out of range: predicted {p}, true {l}, classes {class_count}"
            )));
        }
        counts[l * class_count + p] += 1;
    }
    Ok(counts)
}

/// Memory accounting: values held by prototype replay vs exemplar replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    /// class_count * feature_dim stored prototype values.
    pub prototype_values: u64,
    /// class_count * exemplars_per_class * c * h * w stored pixel values.
    pub exemplar_values: u64,
    pub note: String,
}

/// Compute both storage figures from the printed expressions. The note
/// records that a commonly cited exemplar total ("about 9.2M" for
/// 100x20x32x32x3) does not match its own expression, which evaluates to
/// 6.144M; this report always follows the expression.
pub fn memory_report(
    class_count: usize,
    feature_dim: usize,
    exemplars_per_class: usize,
    image_shape: (usize, usize, usize),
) -> MemoryReport {
    let (c, h, w) = image_shape;
    MemoryReport {
        prototype_values: (class_count * feature_dim) as u64,
        exemplar_values: (class_count * exemplars_per_class * c * h * w) as u64,
        note: "exemplar figure follows class_count*exemplars*c*h*w exactly; the often-quoted \
               9.2M for 100x20x32x32x3 disagrees with that expression (6.144M)"
            .into(),
    }
}

/// Decimal formatting with a fixed number of significant digits and a '.'
/// separator, locale-independent.
pub fn format_sig(v: f64, sig: usize) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let exponent = v.abs().log10().floor() as i32;
    let decimals = (sig as i32 - 1 - exponent).clamp(0, 17) as usize;
    format!("{v:.decimals$}")
}
