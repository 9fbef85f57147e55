//! Point-tracking metrics: average distance, within-threshold fraction,
//! average Jaccard and occlusion accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];

/// One prediction paired with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query: usize,
    pub pred: [f64; 2],
    pub pred_occluded: bool,
    pub gt: [f64; 2],
    pub gt_occluded: bool,
}

impl EvalRecord {
    pub fn error(&self) -> f64 {
        ((self.pred[0] - self.gt[0]).powi(2) + (self.pred[1] - self.gt[1]).powi(2)).sqrt()
    }
}

fn check(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Data("no evaluation records".into()));
    }
    if records.iter().any(|r| !r.pred.iter().chain(&r.gt).all(|v| v.is_finite())) {
        return Err(Error::Numerical("non-finite point in evaluation records".into()));
    }
    Ok(())
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::config("empty threshold list"));
    }
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) || !(thresholds[0] >= 0.0) {
        return Err(Error::config("thresholds must be non-negative and ascending"));
    }
    Ok(())
}

fn visible_errors(records: &[EvalRecord]) -> Result<Vec<f64>> {
    check(records)?;
    let errs: Vec<f64> = records.iter().filter(|r| !r.gt_occluded).map(EvalRecord::error).collect();
    if errs.is_empty() {
        return Err(Error::Data("no ground-truth visible records".into()));
    }
    Ok(errs)
}

/// Mean endpoint error over ground-truth visible records.
pub fn average_distance(records: &[EvalRecord]) -> Result<f64> {
    let errs = visible_errors(records)?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Fraction of visible records within `t` pixels, for each threshold.
pub fn within_fractions(records: &[EvalRecord], thresholds: &[f64]) -> Result<Vec<f64>> {
    check_thresholds(thresholds)?;
    let errs = visible_errors(records)?;
    Ok(thresholds
        .iter()
        .map(|&t| errs.iter().filter(|&&e| e <= t).count() as f64 / errs.len() as f64)
        .collect())
}

pub fn delta_avg(records: &[EvalRecord], thresholds: &[f64]) -> Result<f64> {
    let f = within_fractions(records, thresholds)?;
    Ok(f.iter().sum::<f64>() / f.len() as f64)
}

/// Jaccard index at each threshold; an empty union counts as 1.
pub fn jaccards(records: &[EvalRecord], thresholds: &[f64]) -> Result<Vec<f64>> {
    check(records)?;
    check_thresholds(thresholds)?;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
            for r in records {
                let close = r.error() <= t;
                let pv = !r.pred_occluded;
                let gv = !r.gt_occluded;
                if pv && gv && close {
                    tp += 1;
                }
                if pv && (!gv || !close) {
                    fp += 1;
                }
                if gv && (!pv || !close) {
                    fnn += 1;
                }
            }
            let den = tp + fp + fnn;
            if den == 0 {
                1.0
            } else {
                tp as f64 / den as f64
            }
        })
        .collect())
}

pub fn average_jaccard(records: &[EvalRecord], thresholds: &[f64]) -> Result<f64> {
    let j = jaccards(records, thresholds)?;
    Ok(j.iter().sum::<f64>() / j.len() as f64)
}

pub fn occlusion_accuracy(records: &[EvalRecord]) -> Result<f64> {
    check(records)?;
    let hits = records.iter().filter(|r| r.pred_occluded == r.gt_occluded).count();
    Ok(hits as f64 / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub within: f64,
    pub jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` when no query is visible in the ground truth.
    pub ad: Option<f64>,
    pub aj: f64,
    pub delta_avg: Option<f64>,
    pub oa: f64,
    pub per_threshold: Vec<ThresholdRow>,
    pub queries: usize,
    pub visible: usize,
}

impl MetricsReport {
    pub fn compute(records: &[EvalRecord], thresholds: &[f64]) -> Result<Self> {
        check(records)?;
        check_thresholds(thresholds)?;
        let visible = records.iter().filter(|r| !r.gt_occluded).count();
        let j = jaccards(records, thresholds)?;
        let (ad, within) = if visible > 0 {
            (Some(average_distance(records)?), Some(within_fractions(records, thresholds)?))
        } else {
            (None, None)
        };
        let per_threshold = thresholds
            .iter()
            .enumerate()
            .map(|(i, &t)| ThresholdRow {
                threshold: t,
                within: within.as_ref().map_or(f64::NAN, |w| w[i]),
                jaccard: j[i],
            })
            .collect();
        Ok(MetricsReport {
            ad,
            aj: j.iter().sum::<f64>() / j.len() as f64,
            delta_avg: within.map(|w| w.iter().sum::<f64>() / w.len() as f64),
            oa: occlusion_accuracy(records)?,
            per_threshold,
            queries: records.len(),
            visible,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(err: f64, pred_occ: bool, gt_occ: bool) -> EvalRecord {
        EvalRecord {
            query: 0,
            pred: [err, 0.0],
            pred_occluded: pred_occ,
            gt: [0.0, 0.0],
            gt_occluded: gt_occ,
        }
    }

    #[test]
    fn hand_cases() {
        let two = [rec(1.5, false, false), rec(3.0, false, false)];
        assert_eq!(average_distance(&two).unwrap(), 2.25);
        assert!((delta_avg(&two, &DEFAULT_THRESHOLDS).unwrap() - 0.7).abs() < 1e-15);
        assert!((average_jaccard(&two, &DEFAULT_THRESHOLDS).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let mut three = two.to_vec();
        three.push(rec(40.0, true, true));
        assert_eq!(average_distance(&three).unwrap(), 2.25);
        let occ = [rec(5.0, true, true), rec(1.0, true, true)];
        assert_eq!(average_jaccard(&occ, &DEFAULT_THRESHOLDS).unwrap(), 1.0);
        let four = [rec(0.0, false, false), rec(0.0, true, true), rec(0.0, true, false), rec(0.0, false, false)];
        assert_eq!(occlusion_accuracy(&four).unwrap(), 0.75);
        let base: Vec<_> = (0..10).map(|i| rec(0.0, false, i == 0)).collect();
        assert!((occlusion_accuracy(&base).unwrap() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(average_distance(&[]).is_err());
        assert!(delta_avg(&[rec(1.0, false, false)], &[]).is_err());
        assert!(delta_avg(&[rec(1.0, false, false)], &[2.0, 1.0]).is_err());
        assert!(average_distance(&[rec(1.0, true, true)]).is_err());
        let r = MetricsReport::compute(&[rec(1.0, true, true)], &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(r.ad, None);
        assert_eq!(r.aj, 1.0);
    }
}
