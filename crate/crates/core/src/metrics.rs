//! Evaluation diagnostics: accuracy with a confusion matrix, the source
//! knowledge forgetting rate, and the incorrect-supervision rates. All
//! metrics read labeled evaluation views; the optimization path never
//! sees them.

use serde::Serialize;

use crate::data::LabeledDataset;
use crate::error::{ProcalError, Result};
use crate::math::argmax;
use crate::memory_bank::MemoryBank;
use crate::model::ModelParams;
use crate::objectives::{build_targets, CalibrationVariant};

/// Accuracy summary over a labeled dataset.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvaluationReport {
    pub overall_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub mean_per_class_accuracy: f64,
    /// `confusion[true_class][predicted_class]` counts; row sums equal
    /// per-class sample counts, and the trace over N is the overall
    /// accuracy.
    pub confusion: Vec<Vec<usize>>,
}

/// Argmax predictions of a model over every input of a dataset.
/// Ties break toward the lowest class index.
pub fn predict(model: &ModelParams, dataset: &LabeledDataset) -> Result<Vec<usize>> {
    (0..dataset.len())
        .map(|i| {
            let (_, _, p) = model.forward(dataset.input(i))?;
            Ok(p.argmax())
        })
        .collect()
}

/// Evaluates a model on a labeled dataset.
pub fn evaluate(model: &ModelParams, dataset: &LabeledDataset) -> Result<EvaluationReport> {
    if model.classes() != dataset.classes() {
        return Err(ProcalError::ShapeMismatch(format!(
            "model outputs {} classes, dataset has {}",
            model.classes(),
            dataset.classes()
        )));
    }
    let predictions = predict(model, dataset)?;
    accuracy_report(&predictions, dataset.labels(), dataset.classes())
}

/// Builds an [`EvaluationReport`] from precomputed predictions.
pub fn accuracy_report(
    predictions: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<EvaluationReport> {
    if predictions.len() != labels.len() {
        return Err(ProcalError::ShapeMismatch(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(ProcalError::Parameter("evaluation of an empty dataset".into()));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&pred, &label) in predictions.iter().zip(labels) {
        if pred >= classes || label >= classes {
            return Err(ProcalError::Parameter(format!(
                "class index out of range: prediction {pred}, label {label}"
            )));
        }
        confusion[label][pred] += 1;
    }
    let n = predictions.len();
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class: Vec<f64> = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let count: usize = row.iter().sum();
            if count == 0 {
                0.0
            } else {
                confusion[c][c] as f64 / count as f64
            }
        })
        .collect();
    let mean_per_class = per_class.iter().sum::<f64>() / classes as f64;
    Ok(EvaluationReport {
        overall_accuracy: correct as f64 / n as f64,
        per_class_accuracy: per_class,
        mean_per_class_accuracy: mean_per_class,
        confusion,
    })
}

/// Error rate of the current predictions restricted to the samples the
/// source model classified correctly. Returns 0 for an empty mask.
pub fn forgetting_rate(
    source_correct_mask: &[bool],
    current_predictions: &[usize],
    labels: &[usize],
) -> Result<f64> {
    if source_correct_mask.len() != current_predictions.len()
        || source_correct_mask.len() != labels.len()
    {
        return Err(ProcalError::ShapeMismatch(format!(
            "mask {}, predictions {}, labels {}",
            source_correct_mask.len(),
            current_predictions.len(),
            labels.len()
        )));
    }
    let mut masked = 0usize;
    let mut wrong = 0usize;
    for ((&m, &pred), &label) in source_correct_mask
        .iter()
        .zip(current_predictions)
        .zip(labels)
    {
        if m {
            masked += 1;
            if pred != label {
                wrong += 1;
            }
        }
    }
    if masked == 0 {
        return Ok(0.0);
    }
    Ok(wrong as f64 / masked as f64)
}

/// Supervision-quality rates computed over bank state.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct SupervisionError {
    /// Fraction of samples whose supervising neighbors are all wrong
    /// (the strict reading of "entirely erroneous").
    pub completely_incorrect: f64,
    /// Fraction of samples with at least one wrong supervising neighbor.
    pub partially_incorrect: f64,
    /// Fraction of samples whose calibrated target argmax disagrees with
    /// the label; present only for the calibrated objective.
    pub calibrated_incorrect: Option<f64>,
}

/// Computes the incorrect-supervision rates from cached bank state.
///
/// A neighbor supervises sample `i` through its cached probability
/// vector; it counts as wrong when that vector's argmax differs from
/// `i`'s true label. When `calibration_gamma` is given, the calibrated
/// target `p_N + gamma (p_t + p_s)` is additionally scored, with the
/// cached prediction standing in for the online output.
pub fn incorrect_supervision_rate(
    bank: &MemoryBank,
    labels: &[usize],
    calibration_gamma: Option<f64>,
) -> Result<SupervisionError> {
    if labels.len() != bank.len() {
        return Err(ProcalError::ShapeMismatch(format!(
            "bank holds {} samples but {} labels were supplied",
            bank.len(),
            labels.len()
        )));
    }
    let n = bank.len();
    let mut all_wrong = 0usize;
    let mut any_wrong = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let neighbors = bank.neighbor_list(i);
        let wrong = neighbors
            .iter()
            .filter(|&&j| bank.prob(j).argmax() != label)
            .count();
        if wrong == neighbors.len() && !neighbors.is_empty() {
            all_wrong += 1;
        }
        if wrong > 0 {
            any_wrong += 1;
        }
    }
    let calibrated_incorrect = match calibration_gamma {
        None => None,
        Some(gamma) => {
            let indices: Vec<usize> = (0..n).collect();
            let cached: Vec<_> = (0..n).map(|i| bank.prob(i).clone()).collect();
            let targets =
                build_targets(&indices, &cached, bank, gamma, CalibrationVariant::Full)?;
            let wrong = targets
                .iter()
                .zip(labels)
                .filter(|(t, &label)| argmax(t.p_cal().as_slice()) != label)
                .count();
            Some(wrong as f64 / n as f64)
        }
    };
    Ok(SupervisionError {
        completely_incorrect: all_wrong as f64 / n as f64,
        partially_incorrect: any_wrong as f64 / n as f64,
        calibrated_incorrect,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{FeatureVector, ProbVector};

    #[test]
    fn perfect_predictions_give_identity_confusion() {
        let labels = [0usize, 1, 2, 0, 1, 2];
        let report = accuracy_report(&labels, &labels, 3).unwrap();
        assert_eq!(report.overall_accuracy, 1.0);
        assert_eq!(report.mean_per_class_accuracy, 1.0);
        for (c, row) in report.confusion.iter().enumerate() {
            for (k, &count) in row.iter().enumerate() {
                assert_eq!(count, usize::from(c == k) * 2);
            }
        }
    }

    #[test]
    fn constant_predictor_scores_chance_on_balanced_classes() {
        let labels: Vec<usize> = (0..16).map(|i| i % 4).collect();
        let predictions = vec![2usize; 16];
        let report = accuracy_report(&predictions, &labels, 4).unwrap();
        assert_eq!(report.overall_accuracy, 0.25);
    }

    #[test]
    fn two_of_three_correct() {
        let report = accuracy_report(&[0, 1, 1], &[0, 1, 0], 2).unwrap();
        assert!((report.overall_accuracy - 2.0 / 3.0).abs() < 1e-15);
        let row_sums: Vec<usize> = report.confusion.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(row_sums, vec![2, 1]);
    }

    #[test]
    fn accuracy_equals_one_minus_zero_one_loss() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.gen_range(1..40);
            let c = rng.gen_range(2..6);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let report = accuracy_report(&preds, &labels, c).unwrap();
            let zero_one: f64 = labels
                .iter()
                .zip(&preds)
                .map(|(l, p)| f64::from(u8::from(l != p)))
                .sum::<f64>()
                / n as f64;
            assert!((report.overall_accuracy - (1.0 - zero_one)).abs() <= 1e-15);
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(
            accuracy_report(&[], &[], 2),
            Err(ProcalError::Parameter(_))
        ));
    }

    #[test]
    fn forgetting_zero_when_source_unchanged() {
        let labels = [0usize, 1, 0, 1];
        let source_preds = [0usize, 1, 1, 1];
        let mask: Vec<bool> = source_preds
            .iter()
            .zip(&labels)
            .map(|(p, l)| p == l)
            .collect();
        let rate = forgetting_rate(&mask, &source_preds, &labels).unwrap();
        assert_eq!(rate, 0.0);
    }

    #[test]
    fn forgetting_counts_only_masked_samples() {
        // Mask covers samples 0, 1, 2; the current model is wrong on 2.
        let mask = [true, true, true, false];
        let labels = [0usize, 1, 0, 1];
        let current = [0usize, 1, 1, 0];
        let rate = forgetting_rate(&mask, &current, &labels).unwrap();
        assert!((rate - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn forgetting_empty_mask_is_zero() {
        let mask = [false, false];
        let rate = forgetting_rate(&mask, &[0, 1], &[1, 0]).unwrap();
        assert_eq!(rate, 0.0);
    }

    fn bank_with_probs(probs: Vec<ProbVector>, k: usize) -> MemoryBank {
        let features: Vec<FeatureVector> = (0..probs.len())
            .map(|i| {
                let a = i as f64 * 0.4;
                FeatureVector::new(vec![a.cos(), a.sin()]).unwrap()
            })
            .collect();
        MemoryBank::initialize(&probs, &features, k).unwrap()
    }

    #[test]
    fn clean_supervision_scores_zero() {
        let probs: Vec<ProbVector> = vec![ProbVector::new(vec![0.9, 0.1]).unwrap(); 4];
        let bank = bank_with_probs(probs, 2);
        let labels = vec![0usize; 4];
        let err = incorrect_supervision_rate(&bank, &labels, None).unwrap();
        assert_eq!(err.completely_incorrect, 0.0);
        assert_eq!(err.partially_incorrect, 0.0);
        assert!(err.calibrated_incorrect.is_none());
    }

    #[test]
    fn one_correct_neighbor_rescues_a_sample() {
        // With k = 2 every sample sees at least one neighbor predicting
        // the true class 0, so nothing is entirely mis-supervised even
        // though sample 1 leans the wrong way.
        let probs = vec![
            ProbVector::new(vec![0.9, 0.1]).unwrap(),
            ProbVector::new(vec![0.2, 0.8]).unwrap(),
            ProbVector::new(vec![0.8, 0.2]).unwrap(),
        ];
        let bank = bank_with_probs(probs, 2);
        let labels = vec![0usize; 3];
        let err = incorrect_supervision_rate(&bank, &labels, None).unwrap();
        assert_eq!(err.completely_incorrect, 0.0);
        // Samples 0 and 2 each have sample 1 (wrong) among their neighbors.
        assert!((err.partially_incorrect - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn strict_rate_is_monotone_in_correct_neighbors() {
        // Holding everything else fixed, swapping a wrong supervising
        // neighbor for a correct one never increases the strict rate.
        let wrong = ProbVector::new(vec![0.1, 0.9]).unwrap();
        let right = ProbVector::new(vec![0.9, 0.1]).unwrap();
        let labels = vec![0usize; 4];
        let mut previous = f64::INFINITY;
        for correct_neighbors in 0..=3 {
            let probs: Vec<ProbVector> = (0..4)
                .map(|j| if j < correct_neighbors { right.clone() } else { wrong.clone() })
                .collect();
            let bank = bank_with_probs(probs, 3);
            let rate = incorrect_supervision_rate(&bank, &labels, None)
                .unwrap()
                .completely_incorrect;
            assert!(rate <= previous, "rate rose from {previous} to {rate}");
            previous = rate;
        }
        assert_eq!(previous, 0.0);
    }

    #[test]
    fn fully_wrong_neighbors_score_one() {
        let probs = vec![
            ProbVector::new(vec![0.1, 0.9]).unwrap(),
            ProbVector::new(vec![0.2, 0.8]).unwrap(),
        ];
        let bank = bank_with_probs(probs, 1);
        let labels = vec![0usize; 2];
        let err = incorrect_supervision_rate(&bank, &labels, None).unwrap();
        assert_eq!(err.completely_incorrect, 1.0);
    }

    #[test]
    fn calibrated_rate_tracks_prior_strength() {
        // Neighbors and cached predictions lean the wrong way; strong
        // priors pointing at the true class rescue the calibrated target.
        let probs = vec![
            ProbVector::new(vec![0.45, 0.55]).unwrap(),
            ProbVector::new(vec![0.45, 0.55]).unwrap(),
        ];
        let features = vec![
            FeatureVector::new(vec![1.0, 0.0]).unwrap(),
            FeatureVector::new(vec![0.9, 0.1]).unwrap(),
        ];
        let mut bank = MemoryBank::initialize(&probs, &features, 1).unwrap();
        // Rewrite cached predictions only; the frozen priors stay at the
        // initialization values above.
        bank.update_probs(
            &[0, 1],
            &[
                ProbVector::new(vec![0.4, 0.6]).unwrap(),
                ProbVector::new(vec![0.4, 0.6]).unwrap(),
            ],
        )
        .unwrap();
        let labels = vec![0usize, 0];
        let weak = incorrect_supervision_rate(&bank, &labels, Some(0.0)).unwrap();
        assert_eq!(weak.calibrated_incorrect, Some(1.0));
        assert_eq!(weak.completely_incorrect, 1.0);
    }
}
