use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class scores in percent. `acc` is the per-class recall.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassScores {
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassScores>,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<usize>>,
    /// Overall fraction correct, in percent.
    pub accuracy: f64,
    pub macro_acc: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

pub fn evaluate(predictions: &[usize], truths: &[usize], n_classes: usize) -> Result<EvalReport> {
    if predictions.is_empty() || predictions.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::invalid(format!("label outside {n_classes} classes")));
        }
        confusion[t][p] += 1;
    }
    let classes: Vec<ClassScores> = (0..n_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let support = confusion[c].iter().sum::<usize>();
            let predicted = (0..n_classes).map(|t| confusion[t][c]).sum::<usize>();
            let precision = pct(tp, predicted);
            let recall = pct(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScores {
                acc: recall,
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let k = n_classes.max(1) as f64;
    let mean = |f: fn(&ClassScores) -> f64| classes.iter().map(f).sum::<f64>() / k;
    Ok(EvalReport {
        accuracy: pct(
            (0..n_classes).map(|c| confusion[c][c]).sum(),
            predictions.len(),
        ),
        macro_acc: mean(|c| c.acc),
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        classes,
        confusion,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    (
        m,
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 3, 3, 2];
        let r = evaluate(&y, &y, 4).unwrap();
        assert_eq!(r.accuracy, 100.0);
        assert!(r.classes.iter().all(|c| c.f1 == 100.0));
        for (i, row) in r.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), row[i]);
        }
    }

    #[test]
    fn constant_prediction_on_balanced_truth() {
        let t: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let r = evaluate(&[2; 40], &t, 4).unwrap();
        assert_eq!(r.classes[2].recall, 100.0);
        assert_eq!(r.classes[0].recall, 0.0);
        assert_eq!(r.macro_acc, 25.0);
        assert_eq!(r.classes[2].precision, 25.0);
        assert!(evaluate(&[], &[], 4).is_err());
    }
}
