//! Malignancy scoring, lesion and patient decisions, and evaluation metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::LesionRecord;
use crate::grid::Grid2;

pub const DEFAULT_TAU: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifyError {
    #[error("lesion {label}: no prediction for slice {z}")]
    MissingSlicePrediction { label: u16, z: usize },
    #[error("lesion {label}: label absent from slice {z}")]
    EmptyLesionRegion { label: u16, z: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no lesions")]
    NoLesions,
    #[error("empty input")]
    EmptyInput,
    #[error("need at least one positive and one negative, got {positives} and {negatives}")]
    DegenerateClasses { positives: usize, negatives: usize },
    #[error("no candidate threshold reaches sensitivity 1")]
    NoCandidates,
    #[error("tau {0} outside (0, 1)")]
    InvalidTau(f64),
}

pub fn validate_tau(tau: f64) -> Result<f64, ClassifyError> {
    if tau > 0.0 && tau < 1.0 {
        Ok(tau)
    } else {
        Err(ClassifyError::InvalidTau(tau))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MalignancyScore {
    pub lesion_label: u16,
    pub p_malignant: u64,
    pub p_total: u64,
    pub score: f64,
}

/// One slice of a lesion: the patch label map and the binary prediction.
#[derive(Debug, Clone, Copy)]
pub struct SliceEvidence<'a> {
    pub z: usize,
    pub labels: &'a Grid2<u16>,
    pub prediction: Option<&'a Grid2<u8>>,
}

/// `P_malignant / P_total`, accumulated over every slice of the lesion.
/// Predicted positives outside the lesion's labeled region are ignored.
pub fn malignancy_score(
    lesion: &LesionRecord,
    slices: &[SliceEvidence<'_>],
) -> Result<MalignancyScore, ClassifyError> {
    let label = lesion.label;
    let (mut hit, mut total) = (0u64, 0u64);
    for &z in &lesion.slices {
        let ev = slices.iter().find(|s| s.z == z);
        let (labels, pred) = match ev {
            Some(SliceEvidence {
                labels,
                prediction: Some(p),
                ..
            }) => (*labels, *p),
            _ => return Err(ClassifyError::MissingSlicePrediction { label, z }),
        };
        if labels.shape() != pred.shape() {
            return Err(ClassifyError::ShapeMismatch(labels.shape(), pred.shape()));
        }
        let before = total;
        for (&l, &p) in labels.data().iter().zip(pred.data()) {
            if l == label {
                total += 1;
                hit += u64::from(p != 0);
            }
        }
        if total == before {
            return Err(ClassifyError::EmptyLesionRegion { label, z });
        }
    }
    if total == 0 {
        return Err(ClassifyError::EmptyLesionRegion { label, z: 0 });
    }
    Ok(MalignancyScore {
        lesion_label: label,
        p_malignant: hit,
        p_total: total,
        score: hit as f64 / total as f64,
    })
}

/// Malignant iff `score >= tau`.
pub fn classify_lesion(score: f64, tau: f64) -> bool {
    score >= tau
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientDecision {
    pub malignant: bool,
    pub score: f64,
    pub driving_lesion: u16,
}

/// Classifies by the most suspicious lesion; ties go to the lowest label.
pub fn classify_patient(scores: &[(u16, f64)], tau: f64) -> Result<PatientDecision, ClassifyError> {
    let &(label, score) = scores
        .iter()
        .min_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)))
        .ok_or(ClassifyError::NoLesions)?;
    Ok(PatientDecision {
        malignant: classify_lesion(score, tau),
        score,
        driving_lesion: label,
    })
}

/// Counts `(|A ∩ B|, |A|, |B|)` for two binary masks.
pub fn overlap_counts(pred: &[u8], gt: &[u8]) -> Result<(u64, u64, u64), ClassifyError> {
    if pred.len() != gt.len() {
        return Err(ClassifyError::LengthMismatch(pred.len(), gt.len()));
    }
    let mut c = (0, 0, 0);
    for (&a, &b) in pred.iter().zip(gt) {
        let (a, b) = (a != 0, b != 0);
        c.0 += u64::from(a && b);
        c.1 += u64::from(a);
        c.2 += u64::from(b);
    }
    Ok(c)
}

fn dice_from_counts(inter: u64, a: u64, b: u64) -> f64 {
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// `2|A∩B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice_coefficient(pred: &Grid2<u8>, gt: &Grid2<u8>) -> Result<f64, ClassifyError> {
    if pred.shape() != gt.shape() {
        return Err(ClassifyError::ShapeMismatch(pred.shape(), gt.shape()));
    }
    let (i, a, b) = overlap_counts(pred.data(), gt.data())?;
    Ok(dice_from_counts(i, a, b))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn add(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// `None` without positives.
    pub fn sensitivity(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| self.tp as f64 / p as f64)
    }

    /// `None` without negatives.
    pub fn specificity(&self) -> Option<f64> {
        let n = self.tn + self.fp;
        (n > 0).then(|| self.tn as f64 / n as f64)
    }
}

pub fn confusion_and_accuracy(truth: &[bool], predicted: &[bool]) -> Result<(Confusion, f64), ClassifyError> {
    if truth.len() != predicted.len() {
        return Err(ClassifyError::LengthMismatch(truth.len(), predicted.len()));
    }
    if truth.is_empty() {
        return Err(ClassifyError::EmptyInput);
    }
    let mut c = Confusion::default();
    for (&t, &p) in truth.iter().zip(predicted) {
        c.add(t, p);
    }
    Ok((c, c.accuracy()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    pub auc: f64,
    /// One point per distinct score, thresholds descending.
    pub points: Vec<RocPoint>,
}

/// Mann-Whitney AUC with ties credited one half.
///
/// Ranks are kept doubled so the statistic stays an exact integer until the
/// final division.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<Roc, ClassifyError> {
    if scores.len() != labels.len() {
        return Err(ClassifyError::LengthMismatch(scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(ClassifyError::DegenerateClasses { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut pos_rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j share the midrank (i+1+j)/2
        let rank2 = (i + 1 + j) as u64;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        pos_rank_sum2 += rank2 * pos_in_group;
        i = j;
    }
    let (np, nn) = (positives as u64, negatives as u64);
    let u2 = pos_rank_sum2 - np * (np + 1);
    let auc = u2 as f64 / (2 * np * nn) as f64;

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut k = order.len();
    while k > 0 {
        let t = scores[order[k - 1]];
        while k > 0 && scores[order[k - 1]] == t {
            if labels[order[k - 1]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k -= 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / nn as f64,
            tpr: tp as f64 / np as f64,
        });
    }
    Ok(Roc { auc, points })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub tau: f64,
    pub confusion: Confusion,
}

pub fn confusion_at(scores: &[f64], labels: &[bool], tau: f64) -> Confusion {
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        c.add(l, classify_lesion(s, tau));
    }
    c
}

/// Picks the threshold with sensitivity 1 and the best specificity, ties
/// going to the larger threshold. `candidates` defaults to the distinct
/// scores plus 0.3 and 0.5.
pub fn optimize_threshold(
    scores: &[f64],
    labels: &[bool],
    candidates: Option<&[f64]>,
) -> Result<ThresholdChoice, ClassifyError> {
    if scores.len() != labels.len() {
        return Err(ClassifyError::LengthMismatch(scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(ClassifyError::DegenerateClasses {
            positives,
            negatives: labels.len(),
        });
    }
    let mut grid: Vec<f64> = match candidates {
        Some(c) => c.to_vec(),
        None => scores.iter().copied().chain([0.3, 0.5]).collect(),
    };
    grid.retain(|t| !t.is_nan());
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let mut best: Option<(u64, ThresholdChoice)> = None;
    for &tau in &grid {
        let c = confusion_at(scores, labels, tau);
        if c.fn_ != 0 {
            continue;
        }
        // ascending grid, so >= keeps the largest tau among equals
        if best.as_ref().is_none_or(|(tn, _)| c.tn >= *tn) {
            best = Some((c.tn, ThresholdChoice { tau, confusion: c }));
        }
    }
    best.map(|(_, c)| c).ok_or(ClassifyError::NoCandidates)
}

/// Per-lesion evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionResult {
    pub patient_id: String,
    pub lesion_label: u16,
    pub truth_malignant: bool,
    pub p_malignant: u64,
    pub p_total: u64,
    pub score: f64,
    pub predicted_malignant: bool,
    /// Dice of predicted vs ground-truth malignant pixels inside the lesion
    /// region, over all its slices.
    pub dice: f64,
}

impl LesionResult {
    /// Builds the result from a score plus the in-region overlap counts.
    pub fn new(
        patient_id: &str,
        truth_malignant: bool,
        score: &MalignancyScore,
        overlap: (u64, u64, u64),
        tau: f64,
    ) -> Self {
        Self {
            patient_id: patient_id.to_string(),
            lesion_label: score.lesion_label,
            truth_malignant,
            p_malignant: score.p_malignant,
            p_total: score.p_total,
            score: score.score,
            predicted_malignant: classify_lesion(score.score, tau),
            dice: dice_from_counts(overlap.0, overlap.1, overlap.2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientResult {
    pub patient_id: String,
    pub truth_malignant: bool,
    pub predicted_malignant: bool,
    pub score: f64,
    pub driving_lesion: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tau: f64,
    pub lesion_confusion: Confusion,
    pub lesion_accuracy: f64,
    pub patient_confusion: Confusion,
    pub patient_accuracy: f64,
    /// Absent when the evaluated lesions are all one class.
    pub auc: Option<f64>,
    pub roc: Vec<RocPoint>,
    pub mean_dice: f64,
    pub lesions: Vec<LesionResult>,
    pub patients: Vec<PatientResult>,
}

impl EvalReport {
    /// Aggregates lesion results (any order) into a report; lesions are
    /// sorted by `(patient_id, label)` first so the output is order-free.
    pub fn from_lesions(tau: f64, mut lesions: Vec<LesionResult>) -> Result<Self, ClassifyError> {
        if lesions.is_empty() {
            return Err(ClassifyError::NoLesions);
        }
        lesions.sort_by(|a, b| {
            (a.patient_id.as_str(), a.lesion_label).cmp(&(b.patient_id.as_str(), b.lesion_label))
        });
        let truth: Vec<bool> = lesions.iter().map(|l| l.truth_malignant).collect();
        let pred: Vec<bool> = lesions.iter().map(|l| l.predicted_malignant).collect();
        let scores: Vec<f64> = lesions.iter().map(|l| l.score).collect();
        let (lesion_confusion, lesion_accuracy) = confusion_and_accuracy(&truth, &pred)?;
        let (auc, roc) = match roc_auc(&scores, &truth) {
            Ok(r) => (Some(r.auc), r.points),
            Err(ClassifyError::DegenerateClasses { .. }) => (None, Vec::new()),
            Err(e) => return Err(e),
        };
        let mean_dice = lesions.iter().map(|l| l.dice).sum::<f64>() / lesions.len() as f64;

        let mut by_patient: BTreeMap<&str, Vec<&LesionResult>> = BTreeMap::new();
        for l in &lesions {
            by_patient.entry(&l.patient_id).or_default().push(l);
        }
        let mut patients = Vec::new();
        let mut patient_confusion = Confusion::default();
        for (pid, ls) in by_patient {
            let pairs: Vec<(u16, f64)> = ls.iter().map(|l| (l.lesion_label, l.score)).collect();
            let d = classify_patient(&pairs, tau)?;
            let truth_malignant = ls.iter().any(|l| l.truth_malignant);
            patient_confusion.add(truth_malignant, d.malignant);
            patients.push(PatientResult {
                patient_id: pid.to_string(),
                truth_malignant,
                predicted_malignant: d.malignant,
                score: d.score,
                driving_lesion: d.driving_lesion,
            });
        }
        Ok(Self {
            tau,
            lesion_confusion,
            lesion_accuracy,
            patient_accuracy: patient_confusion.accuracy(),
            patient_confusion,
            auc,
            roc,
            mean_dice,
            lesions,
            patients,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::BBox3;

    fn lesion(label: u16, slices: Vec<usize>) -> LesionRecord {
        LesionRecord {
            patient_id: "p".into(),
            label,
            voxel_count: 0,
            bbox: BBox3 {
                min: [0; 3],
                max: [0; 3],
            },
            malignant: false,
            slices,
        }
    }

    #[test]
    fn score_sixty_of_hundred() {
        let labels = Grid2::filled(10, 10, 1u16);
        let pred = Grid2::from_fn(10, 10, |y, _| u8::from(y < 6));
        let ev = [SliceEvidence {
            z: 3,
            labels: &labels,
            prediction: Some(&pred),
        }];
        let s = malignancy_score(&lesion(1, vec![3]), &ev).unwrap();
        assert_eq!((s.p_malignant, s.p_total), (60, 100));
        assert_eq!(s.score, 0.6);
        assert!(classify_lesion(s.score, 0.3));
    }

    #[test]
    fn score_ignores_positives_outside_region() {
        let labels = Grid2::from_fn(4, 4, |y, _| if y == 0 { 2u16 } else { 0 });
        let pred = Grid2::filled(4, 4, 1u8);
        let ev = [SliceEvidence {
            z: 0,
            labels: &labels,
            prediction: Some(&pred),
        }];
        let s = malignancy_score(&lesion(2, vec![0]), &ev).unwrap();
        assert_eq!((s.p_malignant, s.p_total), (4, 4));
    }

    #[test]
    fn score_errors() {
        let labels = Grid2::filled(2, 2, 0u16);
        let pred = Grid2::filled(2, 2, 0u8);
        let ev = [SliceEvidence {
            z: 0,
            labels: &labels,
            prediction: Some(&pred),
        }];
        assert_eq!(
            malignancy_score(&lesion(1, vec![0]), &ev),
            Err(ClassifyError::EmptyLesionRegion { label: 1, z: 0 })
        );
        assert_eq!(
            malignancy_score(&lesion(1, vec![0, 1]), &ev[..0]),
            Err(ClassifyError::MissingSlicePrediction { label: 1, z: 0 })
        );
    }

    #[test]
    fn lesion_and_patient_decisions() {
        assert!(classify_lesion(0.30, 0.3));
        assert!(!classify_lesion(0.1, 0.3));
        assert!(!classify_lesion(0.4, 0.5));
        let d = classify_patient(&[(1, 0.6), (2, 0.1)], 0.3).unwrap();
        assert_eq!((d.malignant, d.driving_lesion), (true, 1));
        let d = classify_patient(&[(4, 0.29), (2, 0.29)], 0.3).unwrap();
        assert_eq!((d.malignant, d.driving_lesion), (false, 2));
        assert_eq!(classify_patient(&[], 0.3), Err(ClassifyError::NoLesions));
    }

    #[test]
    fn dice_cases() {
        let a = Grid2::new(1, 3, vec![1u8, 1, 0]);
        let b = Grid2::new(1, 3, vec![1u8, 0, 0]);
        assert!((dice_coefficient(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice_coefficient(&a, &a).unwrap(), 1.0);
        let e = Grid2::filled(1, 3, 0u8);
        assert_eq!(dice_coefficient(&e, &e).unwrap(), 1.0);
        let c = Grid2::new(1, 3, vec![0u8, 0, 1]);
        assert_eq!(dice_coefficient(&a, &c).unwrap(), 0.0);
        assert!(dice_coefficient(&a, &Grid2::filled(3, 1, 0)).is_err());
    }

    #[test]
    fn auc_small_cases() {
        assert_eq!(roc_auc(&[0.6, 0.1], &[true, false]).unwrap().auc, 1.0);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3], &[true, false, true]).unwrap().auc, 0.5);
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]).unwrap().auc, 0.5);
        assert!(matches!(
            roc_auc(&[0.5], &[true]),
            Err(ClassifyError::DegenerateClasses { .. })
        ));
        let r = roc_auc(&[0.9, 0.8, 0.3], &[true, false, true]).unwrap();
        let last = r.points.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert_eq!(r.points[0].threshold, 0.9);
    }

    #[test]
    fn threshold_choice() {
        let scores = [0.35, 0.6, 0.1, 0.32, 0.5];
        let labels = [true, true, false, false, false];
        let c = optimize_threshold(&scores, &labels, None).unwrap();
        assert_eq!(c.tau, 0.35);
        assert_eq!(c.confusion, Confusion::new(2, 2, 1, 0));

        let c = optimize_threshold(&[0.8, 0.9, 0.1], &[true, true, false], None).unwrap();
        assert_eq!((c.tau, c.confusion.specificity()), (0.8, Some(1.0)));

        let c = optimize_threshold(&[0.4, 0.4], &[true, false], None).unwrap();
        assert_eq!((c.tau, c.confusion.specificity()), (0.4, Some(0.0)));

        assert_eq!(
            optimize_threshold(&[0.4], &[true], Some(&[0.5])),
            Err(ClassifyError::NoCandidates)
        );
    }

    #[test]
    fn accuracy_of_published_matrices() {
        assert!((Confusion::new(15, 8, 5, 0).accuracy() - 23.0 / 28.0).abs() < 1e-15);
        let (c, acc) = confusion_and_accuracy(&[true; 10], &[true; 10]).unwrap();
        assert_eq!((c.tp, acc), (10, 1.0));
    }
}
