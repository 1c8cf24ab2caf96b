//! Open-world evaluation: closed-world accuracy with rejection (CwCA),
//! unknown detection rate (UDA), joint known+1 accuracy (OwCA), and
//! threshold calibration for a fixed UDA.

use serde::Serialize;

use crate::agent::{Decision, Verdict};
use crate::error::{Error, Result};
use crate::features::ClassId;

/// Threshold above every valid score; rejects everything.
pub const REJECT_ALL: f64 = 1.0 + f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Truth {
    Known(ClassId),
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub truth: Truth,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricRecord {
    pub cwca: Option<f64>,
    pub uda: Option<f64>,
    pub owca: Option<f64>,
    pub n_known_samples: usize,
    pub n_unknown_samples: usize,
}

pub fn compute_metrics(scored: &[ScoredSample]) -> MetricRecord {
    let (mut n_known, mut n_unknown) = (0usize, 0usize);
    let (mut known_correct, mut unknown_rejected) = (0usize, 0usize);
    for s in scored {
        match s.truth {
            Truth::Known(c) => {
                n_known += 1;
                if s.verdict.decision == Decision::Known(c) {
                    known_correct += 1;
                }
            }
            Truth::Unknown => {
                n_unknown += 1;
                if s.verdict.decision == Decision::Unknown {
                    unknown_rejected += 1;
                }
            }
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let cwca = ratio(known_correct, n_known);
    let uda = ratio(unknown_rejected, n_unknown);
    // Written as the sample-weighted mean of the two group accuracies, which
    // is the (known + 1)-class accuracy.
    let total = n_known + n_unknown;
    let owca = (total > 0).then(|| {
        (n_known as f64 * cwca.unwrap_or(0.0) + n_unknown as f64 * uda.unwrap_or(0.0))
            / total as f64
    });
    MetricRecord {
        cwca,
        uda,
        owca,
        n_known_samples: n_known,
        n_unknown_samples: n_unknown,
    }
}

/// Fraction of `scores` strictly below `delta`, i.e. the UDA that threshold achieves.
pub fn rejection_rate(scores: &[f64], delta: f64) -> f64 {
    scores.iter().filter(|&&s| s < delta).count() as f64 / scores.len() as f64
}

/// Smallest threshold among the scores themselves and [`REJECT_ALL`] that
/// rejects (score strictly below) at least `target_uda` of `unknown_scores`.
///
/// With distinct scores the achieved rate exceeds the target by less than
/// `1 / n`. Tied scores move together, so the achievable rates jump by the
/// size of each tie group.
pub fn calibrate_threshold(unknown_scores: &[f64], target_uda: f64) -> Result<f64> {
    if unknown_scores.is_empty() {
        return Err(Error::MissingData("no unknown scores to calibrate on".into()));
    }
    if !(0.0..=1.0).contains(&target_uda) {
        return Err(Error::InvalidArgument(format!(
            "target UDA must lie in [0, 1], got {target_uda}"
        )));
    }
    if let Some(bad) = unknown_scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidArgument(format!("score {bad} outside [0, 1]")));
    }
    let mut sorted = unknown_scores.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut below = 0usize;
    for (i, &s) in sorted.iter().enumerate() {
        if i > 0 && s == sorted[i - 1] {
            continue;
        }
        below = i;
        if below as f64 / n >= target_uda {
            return Ok(s);
        }
    }
    debug_assert!(below < sorted.len());
    Ok(REJECT_ALL)
}

/// Mean over all evaluation points, the initial one included.
pub fn average_incremental_accuracy(per_step_top1: &[f64]) -> Result<f64> {
    if per_step_top1.is_empty() {
        return Err(Error::MissingData("no accuracies to average".into()));
    }
    Ok(per_step_top1.iter().sum::<f64>() / per_step_top1.len() as f64)
}
