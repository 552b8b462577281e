//! Task losses and their aggregation.
//!
//! Each loss returns its value together with the gradient with respect to its
//! prediction input, so the training step can seed the encoder tape directly.
//! All losses are minimised; the binary cross-entropies are the negated
//! log-likelihoods.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tensor::Matrix;
use crate::transforms::ShuffleMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Task {
    Mlm,
    Mrfr,
    Moc,
    Ifrs,
    Titp,
    Tits,
    ItmHs,
}

impl Task {
    pub const ALL: [Task; 7] = [
        Task::Mlm,
        Task::Mrfr,
        Task::Moc,
        Task::Ifrs,
        Task::Titp,
        Task::Tits,
        Task::ItmHs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Mlm => "MLM",
            Task::Mrfr => "MRFR",
            Task::Moc => "MOC",
            Task::Ifrs => "IFRS",
            Task::Titp => "TITP",
            Task::Tits => "TITS",
            Task::ItmHs => "ITM_HS",
        }
    }

    /// Losses that depend on the image actually matching the text.
    pub fn image_grounded(self) -> bool {
        !matches!(self, Task::Mlm | Task::ItmHs)
    }

    /// Whether the loss is computed for a replaced (mismatched) pair. Only
    /// matching is; masked words of a caption paired with the wrong image
    /// would teach the text stream to ignore the image.
    pub fn kept_on_mismatch(self) -> bool {
        self == Task::ItmHs
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownTask(s.to_string()))
    }
}

impl TryFrom<String> for Task {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Task> for String {
    fn from(t: Task) -> Self {
        t.name().to_string()
    }
}

pub fn parse_tasks<S: AsRef<str>>(names: &[S]) -> Result<BTreeSet<Task>> {
    names.iter().map(|n| n.as_ref().parse()).collect()
}

/// A loss value with the gradient of that value with respect to the input it
/// was computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Matrix<T>,
}

fn log_softmax_row<T: Scalar>(row: &[T]) -> (T, Vec<T>) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = row.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + z.ln();
    let probs = row.iter().map(|&x| (x - lse).exp()).collect();
    (lse, probs)
}

/// Mean cross-entropy over the selected rows of `logits`.
fn cross_entropy<T: Scalar>(
    logits: &Matrix<T>,
    positions: &[usize],
    targets: &[usize],
    task: &'static str,
) -> Result<LossGrad<T>> {
    if positions.is_empty() {
        return Err(Error::NoMaskedPositions { task });
    }
    if positions.len() != targets.len() {
        return Err(Error::Shape(format!("{task}: {} positions vs {} targets", positions.len(), targets.len())));
    }
    let n = T::from_count(positions.len());
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = T::zero();
    for (&p, &t) in positions.iter().zip(targets) {
        if p >= logits.rows() || t >= logits.cols() {
            return Err(Error::Shape(format!("{task}: position {p} / target {t} out of range")));
        }
        let (lse, probs) = log_softmax_row(logits.row(p));
        total += lse - logits[(p, t)];
        for (g, pr) in grad.row_mut(p).iter_mut().zip(probs) {
            *g += pr / n;
        }
        grad[(p, t)] -= T::one() / n;
    }
    Ok(LossGrad {
        value: total / n,
        grad,
    })
}

/// Masked language modelling: mean cross-entropy over masked positions.
pub fn loss_mlm<T: Scalar>(logits: &Matrix<T>, mask_positions: &[usize], targets: &[usize]) -> Result<LossGrad<T>> {
    cross_entropy(logits, mask_positions, targets, "MLM")
}

/// Mean cross-entropy of one logit row per example against its class.
pub fn loss_classification<T: Scalar>(logits: &Matrix<T>, classes: &[usize]) -> Result<LossGrad<T>> {
    let rows: Vec<usize> = (0..logits.rows()).collect();
    cross_entropy(logits, &rows, classes, "classification")
}

/// Masked region feature regression: mean over masked regions of the squared
/// L2 distance to the stored feature. `targets` row `i` belongs to `mask_positions[i]`.
pub fn loss_mrfr<T: Scalar>(
    predicted: &Matrix<T>,
    mask_positions: &[usize],
    targets: &Matrix<T>,
) -> Result<LossGrad<T>> {
    if mask_positions.is_empty() {
        return Err(Error::NoMaskedPositions { task: "MRFR" });
    }
    if targets.rows() != mask_positions.len() || targets.cols() != predicted.cols() {
        return Err(Error::Shape(format!(
            "MRFR: targets {:?} for {} positions of width {}",
            targets.shape(),
            mask_positions.len(),
            predicted.cols()
        )));
    }
    let n = T::from_count(mask_positions.len());
    let two = T::c(2.0);
    let mut grad = Matrix::zeros(predicted.rows(), predicted.cols());
    let mut total = T::zero();
    for (i, &p) in mask_positions.iter().enumerate() {
        if p >= predicted.rows() {
            return Err(Error::Shape(format!("MRFR: position {p} out of range")));
        }
        for ((g, &y), &t) in grad.row_mut(p).iter_mut().zip(predicted.row(p)).zip(targets.row(i)) {
            let d = y - t;
            total += d * d;
            *g += two * d / n;
        }
    }
    Ok(LossGrad {
        value: total / n,
        grad,
    })
}

/// Gradients of the masked object classification loss for both heads.
#[derive(Clone, Debug, PartialEq)]
pub struct MocLoss<T> {
    pub value: T,
    pub category_grad: Matrix<T>,
    pub attribute_grad: Matrix<T>,
}

/// Masked object classification: category cross-entropy plus attribute
/// cross-entropy, each averaged over masked regions, equally weighted.
pub fn loss_moc<T: Scalar>(
    category_logits: &Matrix<T>,
    attribute_logits: &Matrix<T>,
    mask_positions: &[usize],
    category_targets: &[usize],
    attribute_targets: &[usize],
) -> Result<MocLoss<T>> {
    let c = cross_entropy(category_logits, mask_positions, category_targets, "MOC")?;
    let a = cross_entropy(attribute_logits, mask_positions, attribute_targets, "MOC")?;
    Ok(MocLoss {
        value: c.value + a.value,
        category_grad: c.grad,
        attribute_grad: a.grad,
    })
}

/// Shuffle restoration: squared L2 distance between the prediction at every
/// slot of every shuffled triplet and the pre-shuffle feature of that slot,
/// summed and divided by `max(3K, 1)`.
pub fn loss_ifrs<T: Scalar>(
    predicted: &Matrix<T>,
    shuffle_map: &ShuffleMap,
    original_features: &Matrix<T>,
) -> Result<LossGrad<T>> {
    let m = predicted.rows().min(original_features.rows());
    if predicted.cols() != original_features.cols() {
        return Err(Error::Shape("IFRS: prediction and feature widths differ".into()));
    }
    for &(p, o) in &shuffle_map.pairs {
        for pos in [p, o] {
            if pos >= m {
                return Err(Error::ShuffleOutOfRange { position: pos, len: m });
            }
        }
    }
    let denom = T::from_count((3 * shuffle_map.triplets()).max(1));
    let two = T::c(2.0);
    let mut grad = Matrix::zeros(predicted.rows(), predicted.cols());
    let mut total = T::zero();
    for p in shuffle_map.positions() {
        for ((g, &y), &t) in grad
            .row_mut(p)
            .iter_mut()
            .zip(predicted.row(p))
            .zip(original_features.row(p))
        {
            let d = y - t;
            total += d * d;
            *g += two * d / denom;
        }
    }
    Ok(LossGrad {
        value: total / denom,
        grad,
    })
}

fn bce_with_logit<T: Scalar>(x: T, y: u8) -> (T, T) {
    let value = if y == 1 { softplus(-x) } else { softplus(x) };
    (value, sigmoid(x) - T::from_count(y as usize))
}

/// Topic prediction (phrase and sentence variants): binary cross-entropy of
/// `sigmoid(logit)` against the 0/1 topic vector, averaged over the vocabulary
/// and then over the batch. `logits` is `batch × v`.
pub fn loss_topic<T: Scalar>(logits: &Matrix<T>, topic_targets: &[Vec<u8>]) -> Result<LossGrad<T>> {
    if topic_targets.len() != logits.rows() || topic_targets.iter().any(|y| y.len() != logits.cols()) {
        return Err(Error::Shape(format!(
            "topic: logits {:?} vs {} target rows",
            logits.shape(),
            topic_targets.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Shape("topic: empty batch".into()));
    }
    let n = T::from_count(logits.len());
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = T::zero();
    for (r, ys) in topic_targets.iter().enumerate() {
        for (c, &y) in ys.iter().enumerate() {
            let (l, g) = bce_with_logit(logits[(r, c)], y);
            total += l;
            grad[(r, c)] = g / n;
        }
    }
    Ok(LossGrad {
        value: total / n,
        grad,
    })
}

/// Image-text matching: mean binary cross-entropy of `sigmoid(logit)` against
/// the match label. `logits` is `batch × 1`.
pub fn loss_itm_hs<T: Scalar>(match_logits: &Matrix<T>, match_labels: &[u8]) -> Result<LossGrad<T>> {
    if match_logits.cols() != 1 || match_logits.rows() != match_labels.len() || match_labels.is_empty() {
        return Err(Error::Shape(format!(
            "ITM_HS: logits {:?} vs {} labels",
            match_logits.shape(),
            match_labels.len()
        )));
    }
    if let Some(&bad) = match_labels.iter().find(|&&y| y > 1) {
        return Err(Error::Invalid(format!("ITM_HS: label {bad} is not 0 or 1")));
    }
    let n = T::from_count(match_labels.len());
    let mut grad = Matrix::zeros(match_labels.len(), 1);
    let mut total = T::zero();
    for (i, &y) in match_labels.iter().enumerate() {
        let (l, g) = bce_with_logit(match_logits[(i, 0)], y);
        total += l;
        grad[(i, 0)] = g / n;
    }
    Ok(LossGrad {
        value: total / n,
        grad,
    })
}

/// Per-task multipliers of the aggregate; 1.0 unless overridden.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights(pub BTreeMap<Task, f64>);

impl TaskWeights {
    pub fn get(&self, t: Task) -> f64 {
        self.0.get(&t).copied().unwrap_or(1.0)
    }
}

/// One computed task loss and the number of elements it averaged over.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskLoss {
    pub task: Task,
    pub value: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub losses: BTreeMap<Task, f64>,
    pub counts: BTreeMap<Task, usize>,
    pub inactive: BTreeSet<Task>,
    pub aggregate: f64,
}

impl LossReport {
    /// One JSON line with fixed six-decimal values.
    pub fn log_line(&self, step: usize, stage: &str) -> String {
        let losses: Vec<String> = self
            .losses
            .iter()
            .map(|(t, v)| format!("\"{t}\":{v:.6}"))
            .collect();
        let counts: Vec<String> = self
            .counts
            .iter()
            .map(|(t, c)| format!("\"{t}\":{c}"))
            .collect();
        format!(
            "{{\"step\":{step},\"stage\":\"{stage}\",\"losses\":{{{}}},\"counts\":{{{}}},\"aggregate\":{:.6}}}",
            losses.join(","),
            counts.join(","),
            self.aggregate
        )
    }
}

/// Weighted sum of the active tasks' losses. Parts for inactive tasks and
/// tasks with zero contributing elements add nothing.
pub fn aggregate(parts: &[TaskLoss], active: &BTreeSet<Task>, weights: &TaskWeights) -> Result<LossReport> {
    let mut report = LossReport {
        inactive: Task::ALL.into_iter().filter(|t| !active.contains(t)).collect(),
        ..LossReport::default()
    };
    for part in parts {
        if !active.contains(&part.task) {
            continue;
        }
        if !part.value.is_finite() || part.value < 0.0 {
            return Err(Error::Invalid(format!("{} loss {} is not a finite non-negative value", part.task, part.value)));
        }
        report.counts.insert(part.task, part.count);
        if part.count == 0 {
            continue;
        }
        report.losses.insert(part.task, part.value);
        report.aggregate += weights.get(part.task) * part.value;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_uniform_cross_entropy() {
        let mut logits = Matrix::<f64>::zeros(2, 5);
        logits[(0, 3)] = 60.0;
        let perfect = loss_mlm(&logits, &[0], &[3]).unwrap();
        assert!(perfect.value < 1e-20);
        let uniform = loss_mlm(&logits, &[1], &[2]).unwrap();
        assert!((uniform.value - 5f64.ln()).abs() < 1e-12);
        assert!(loss_mlm(&logits, &[], &[]).is_err());
    }

    #[test]
    fn mrfr_unit_offset() {
        let t = Matrix::<f64>::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let mut p = Matrix::<f64>::zeros(2, 3);
        p.row_mut(1).copy_from_slice(&[1.0, 3.0, 3.0]);
        assert!((loss_mrfr(&p, &[1], &t).unwrap().value - 1.0).abs() < 1e-12);
        p.row_mut(1).copy_from_slice(&[1.0, 2.0, 3.0]);
        assert_eq!(loss_mrfr(&p, &[1], &t).unwrap().value, 0.0);
    }

    #[test]
    fn moc_decomposes() {
        let mut cat = Matrix::<f64>::zeros(1, 4);
        cat[(0, 1)] = 80.0;
        let attr = Matrix::<f64>::zeros(1, 6);
        let l = loss_moc(&cat, &attr, &[0], &[1], &[4]).unwrap();
        assert!((l.value - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ifrs_hand_computed() {
        // Triplet rotated (1, 2, 0); 2-d features.
        let original = Matrix::<f64>::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 1.0]]);
        let pred = Matrix::<f64>::from_rows(&[vec![1.5, 0.0], vec![0.0, 1.0], vec![2.0, 3.0]]);
        let map = ShuffleMap {
            pairs: vec![(0, 1), (1, 2), (2, 0)],
        };
        // (0.25 + 0) + (0 + 1) + (1 + 4) = 6.25, over 3.
        let l = loss_ifrs(&pred, &map, &original).unwrap();
        assert!((l.value - 6.25 / 3.0).abs() < 1e-12);
        assert_eq!(loss_ifrs(&original, &map, &original).unwrap().value, 0.0);
        assert_eq!(loss_ifrs(&pred, &ShuffleMap::default(), &original).unwrap().value, 0.0);
        let bad = ShuffleMap {
            pairs: vec![(0, 1), (1, 2), (5, 0)],
        };
        assert!(matches!(loss_ifrs(&pred, &bad, &original), Err(Error::ShuffleOutOfRange { .. })));
    }

    #[test]
    fn bce_special_values() {
        let zeros = Matrix::<f64>::zeros(2, 3);
        let y = vec![vec![1, 0, 1], vec![0, 0, 0]];
        assert!((loss_topic(&zeros, &y).unwrap().value - 2f64.ln()).abs() < 1e-12);
        let sat = Matrix::<f64>::from_rows(&[
            vec![f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY],
            vec![f64::NEG_INFINITY; 3],
        ]);
        assert_eq!(loss_topic(&sat, &y).unwrap().value, 0.0);
        let z = Matrix::<f64>::zeros(2, 1);
        assert!((loss_itm_hs(&z, &[1, 0]).unwrap().value - 2f64.ln()).abs() < 1e-12);
        let strong = Matrix::<f64>::from_vec(1, 1, vec![50.0]);
        assert!(loss_itm_hs(&strong, &[1]).unwrap().value < 1e-20);
    }

    #[test]
    fn aggregate_is_weighted_sum_over_active() {
        let parts = [
            TaskLoss { task: Task::Mlm, value: 2.0, count: 3 },
            TaskLoss { task: Task::ItmHs, value: 0.5, count: 4 },
            TaskLoss { task: Task::Mrfr, value: 7.0, count: 0 },
        ];
        let all: BTreeSet<Task> = Task::ALL.into_iter().collect();
        let r = aggregate(&parts, &all, &TaskWeights::default()).unwrap();
        assert_eq!(r.aggregate, 2.5);
        let mut w = TaskWeights::default();
        w.0.insert(Task::Mlm, 0.25);
        let r = aggregate(&parts, &all, &w).unwrap();
        assert_eq!(r.aggregate, 1.0);
        let only: BTreeSet<Task> = [Task::Mlm].into();
        let r = aggregate(&parts, &only, &TaskWeights::default()).unwrap();
        assert_eq!(r.aggregate, 2.0);
        assert!(r.inactive.contains(&Task::ItmHs));
    }

    #[test]
    fn task_names_round_trip() {
        for t in Task::ALL {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
        }
        assert!(matches!("QA".parse::<Task>(), Err(Error::UnknownTask(_))));
    }
}
