//! Outcome-guided margin calibration of trajectory returns.
//!
//! Each prompt group is split into correct (positive) and incorrect
//! (negative) rollouts. The prompt-level margin compares the two sides; when
//! it falls short of the target `delta` the group is repaired either by
//! masking the most ordering-violating rollouts or by shifting the returns of
//! one or both sides.

use serde::{Deserialize, Serialize};

use crate::error::{OpdError, Result};
use crate::rollout::RolloutGroup;

/// Slack used when deciding whether a margin already meets its target.
///
/// A shifted group lands on `delta` only up to rounding, so without this a
/// second pass could apply a sub-ulp correction.
pub const MARGIN_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Mask,
    Shift,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginMode {
    MinMax,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftDirection {
    Lift,
    Suppress,
    Spread,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub strategy: Strategy,
    pub mode: MarginMode,
    pub direction: ShiftDirection,
    pub target_margin: f64,
    pub retention_ratio: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self::textual()
    }
}

impl CalibrationConfig {
    /// Shift / Mean / Spread with `delta = 0.4`.
    pub fn textual() -> Self {
        Self {
            strategy: Strategy::Shift,
            mode: MarginMode::Mean,
            direction: ShiftDirection::Spread,
            target_margin: 0.4,
            retention_ratio: 0.25,
        }
    }

    /// Shift / Mean / Lift with `delta = 0`.
    pub fn multimodal() -> Self {
        Self {
            strategy: Strategy::Shift,
            mode: MarginMode::Mean,
            direction: ShiftDirection::Lift,
            target_margin: 0.0,
            retention_ratio: 0.25,
        }
    }

    pub fn identity() -> Self {
        Self {
            strategy: Strategy::None,
            ..Self::textual()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_margin >= 0.0 && self.target_margin.is_finite()) {
            return Err(OpdError::InvalidConfig(format!(
                "target margin must be finite and >= 0, got {}",
                self.target_margin
            )));
        }
        if !(self.retention_ratio > 0.0 && self.retention_ratio < 1.0) {
            return Err(OpdError::InvalidConfig(format!(
                "retention ratio must lie in (0, 1), got {}",
                self.retention_ratio
            )));
        }
        Ok(())
    }
}

/// Trajectory returns of one prompt together with their outcome labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredGroup {
    pub returns: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredGroup {
    pub fn new(returns: Vec<f64>, labels: Vec<bool>) -> Self {
        assert_eq!(returns.len(), labels.len(), "returns and labels differ in length");
        Self { returns, labels }
    }

    pub fn from_rollouts(group: &RolloutGroup) -> Result<Self> {
        Ok(Self::new(group.returns()?, group.labels()))
    }

    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }

    pub fn positive_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i]).collect()
    }

    pub fn negative_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.labels[i]).collect()
    }

    pub fn is_degenerate(&self) -> bool {
        self.labels.iter().all(|&l| l) || self.labels.iter().all(|&l| !l)
    }

    fn side(&self, positive: bool) -> Vec<f64> {
        self.returns
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == positive)
            .map(|(&r, _)| r)
            .collect()
    }

    /// Margin under `mode`, or `None` when either side is empty.
    pub fn margin(&self, mode: MarginMode) -> Option<f64> {
        prompt_margin(&self.side(true), &self.side(false), mode).ok()
    }
}

/// Calibrated returns of one prompt group.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedGroup {
    pub source: ScoredGroup,
    pub calibrated_returns: Vec<f64>,
    pub keep_mask: Vec<bool>,
    /// Margin before calibration; `None` for degenerate groups.
    pub margin_before: Option<f64>,
    pub shift_magnitude: f64,
    /// Indices dropped by the greedy mask, in drop order.
    pub dropped: Vec<usize>,
}

impl CalibratedGroup {
    fn identity(source: &ScoredGroup, mode: MarginMode) -> Self {
        Self {
            calibrated_returns: source.returns.clone(),
            keep_mask: vec![true; source.len()],
            margin_before: source.margin(mode),
            shift_magnitude: 0.0,
            dropped: Vec::new(),
            source: source.clone(),
        }
    }

    /// Margin of the kept, calibrated returns.
    pub fn margin_after(&self, mode: MarginMode) -> Option<f64> {
        let (pos, neg) = self.kept_sides();
        prompt_margin(&pos, &neg, mode).ok()
    }

    fn kept_sides(&self) -> (Vec<f64>, Vec<f64>) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for i in 0..self.calibrated_returns.len() {
            if !self.keep_mask[i] {
                continue;
            }
            if self.source.labels[i] {
                pos.push(self.calibrated_returns[i]);
            } else {
                neg.push(self.calibrated_returns[i]);
            }
        }
        (pos, neg)
    }

    pub fn masked_count(&self) -> usize {
        self.keep_mask.iter().filter(|&&k| !k).count()
    }
}

/// True when `margin` meets `target` up to [`MARGIN_TOLERANCE`].
pub fn meets_target(margin: f64, target: f64) -> bool {
    margin >= target - MARGIN_TOLERANCE
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Prompt-level margin between positive and negative returns.
pub fn prompt_margin(positive: &[f64], negative: &[f64], mode: MarginMode) -> Result<f64> {
    if positive.is_empty() {
        return Err(OpdError::MarginUndefined { side: "positive" });
    }
    if negative.is_empty() {
        return Err(OpdError::MarginUndefined { side: "negative" });
    }
    Ok(match mode {
        MarginMode::MinMax => {
            let lo = positive.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = negative.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            lo - hi
        }
        MarginMode::Mean => mean(positive) - mean(negative),
    })
}

/// Closed-form additive correction so the margin reaches `target_margin`.
pub fn margin_shift(group: &ScoredGroup, config: &CalibrationConfig) -> Result<CalibratedGroup> {
    config.validate()?;
    let mut out = CalibratedGroup::identity(group, config.mode);
    let Some(margin) = out.margin_before else {
        return Ok(out);
    };
    if meets_target(margin, config.target_margin) {
        return Ok(out);
    }
    let lambda = config.target_margin - margin;
    let (up, down) = match config.direction {
        ShiftDirection::Lift => (lambda, 0.0),
        ShiftDirection::Suppress => (0.0, lambda),
        ShiftDirection::Spread => (lambda / 2.0, lambda / 2.0),
    };
    for (value, &positive) in out.calibrated_returns.iter_mut().zip(&group.labels) {
        if positive {
            *value += up;
        } else {
            *value -= down;
        }
    }
    out.shift_magnitude = lambda;
    Ok(out)
}

/// Which side a greedy mask iteration dropped from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Positive,
    Negative,
}

/// One iteration of the greedy mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStep {
    pub margin: f64,
    /// Gain from dropping the positive front, `None` when that side is at its floor.
    pub gain_positive: Option<f64>,
    pub gain_negative: Option<f64>,
    pub side: Side,
    pub dropped: usize,
}

/// Smallest number of rollouts a side keeps under retention ratio `rho`.
pub fn retention_floor(rho: f64, count: usize) -> usize {
    (rho * count as f64).ceil() as usize
}

/// Greedy margin mask, returning the calibrated group and the per-iteration trace.
///
/// Positives are visited lowest return first and negatives highest return
/// first (ties broken by rollout index). Each iteration compares the margin
/// gain of dropping either front; a side already at its retention floor is
/// not a candidate. Equal gains drop the negative front.
pub fn greedy_margin_mask_trace(
    group: &ScoredGroup,
    config: &CalibrationConfig,
) -> Result<(CalibratedGroup, Vec<MaskStep>)> {
    config.validate()?;
    let mode = config.mode;
    let mut out = CalibratedGroup::identity(group, mode);
    let mut trace = Vec::new();
    if out.margin_before.is_none() {
        return Ok((out, trace));
    }

    let r = &group.returns;
    let mut pos = group.positive_indices();
    let mut neg = group.negative_indices();
    pos.sort_by(|&a, &b| r[a].total_cmp(&r[b]).then(a.cmp(&b)));
    neg.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
    let floor_pos = retention_floor(config.retention_ratio, pos.len());
    let floor_neg = retention_floor(config.retention_ratio, neg.len());

    let values = |idx: &[usize]| idx.iter().map(|&i| r[i]).collect::<Vec<_>>();
    // fronts sit at the start of each list; `p0`/`n0` index the first kept entry
    let (mut p0, mut n0) = (0usize, 0usize);
    loop {
        let kept_pos = values(&pos[p0..]);
        let kept_neg = values(&neg[n0..]);
        let margin = prompt_margin(&kept_pos, &kept_neg, mode)?;
        if meets_target(margin, config.target_margin) {
            break;
        }
        let pos_open = kept_pos.len() > floor_pos;
        let neg_open = kept_neg.len() > floor_neg;
        if !pos_open && !neg_open {
            break;
        }
        let gain_positive = if pos_open {
            Some(prompt_margin(&kept_pos[1..], &kept_neg, mode)? - margin)
        } else {
            None
        };
        let gain_negative = if neg_open {
            Some(prompt_margin(&kept_pos, &kept_neg[1..], mode)? - margin)
        } else {
            None
        };
        let gp = gain_positive.unwrap_or(f64::NEG_INFINITY);
        let gn = gain_negative.unwrap_or(f64::NEG_INFINITY);
        if gp.max(gn) <= 0.0 {
            break;
        }
        let (side, dropped) = if gp > gn {
            p0 += 1;
            (Side::Positive, pos[p0 - 1])
        } else {
            n0 += 1;
            (Side::Negative, neg[n0 - 1])
        };
        out.keep_mask[dropped] = false;
        out.calibrated_returns[dropped] = 0.0;
        out.dropped.push(dropped);
        trace.push(MaskStep {
            margin,
            gain_positive,
            gain_negative,
            side,
            dropped,
        });
    }
    Ok((out, trace))
}

pub fn greedy_margin_mask(group: &ScoredGroup, config: &CalibrationConfig) -> Result<CalibratedGroup> {
    greedy_margin_mask_trace(group, config).map(|(g, _)| g)
}

/// Dispatches on `config.strategy`.
pub fn calibrate(group: &ScoredGroup, config: &CalibrationConfig) -> Result<CalibratedGroup> {
    match config.strategy {
        Strategy::Mask => greedy_margin_mask(group, config),
        Strategy::Shift => margin_shift(group, config),
        Strategy::None => {
            config.validate()?;
            Ok(CalibratedGroup::identity(group, config.mode))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shift_cfg(mode: MarginMode, direction: ShiftDirection, delta: f64) -> CalibrationConfig {
        CalibrationConfig {
            strategy: Strategy::Shift,
            mode,
            direction,
            target_margin: delta,
            retention_ratio: 0.25,
        }
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn margin_examples() {
        let pos = [0.2, 0.5];
        let neg = [-0.1, 0.3];
        assert!((prompt_margin(&pos, &neg, MarginMode::MinMax).unwrap() + 0.1).abs() < 1e-12);
        assert!((prompt_margin(&pos, &neg, MarginMode::Mean).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(
            prompt_margin(&pos, &[], MarginMode::Mean),
            Err(OpdError::MarginUndefined { side: "negative" })
        );
        assert!(prompt_margin(&[], &neg, MarginMode::MinMax).is_err());
    }

    fn example_group() -> ScoredGroup {
        ScoredGroup::new(vec![0.2, 0.5, -0.1, 0.3], vec![true, true, false, false])
    }

    #[test]
    fn shift_lift_example() {
        let cfg = shift_cfg(MarginMode::MinMax, ShiftDirection::Lift, 0.4);
        let out = margin_shift(&example_group(), &cfg).unwrap();
        assert!((out.shift_magnitude - 0.5).abs() < 1e-12);
        assert!(close(&out.calibrated_returns, &[0.7, 1.0, -0.1, 0.3]));
        assert!((out.margin_after(MarginMode::MinMax).unwrap() - 0.4).abs() < 1e-12);
        assert!(out.keep_mask.iter().all(|&k| k));
    }

    #[test]
    fn shift_spread_example() {
        let cfg = shift_cfg(MarginMode::MinMax, ShiftDirection::Spread, 0.4);
        let out = margin_shift(&example_group(), &cfg).unwrap();
        assert!(close(&out.calibrated_returns, &[0.45, 0.75, -0.35, 0.05]));
        assert!((out.margin_after(MarginMode::MinMax).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn shift_suppress_moves_negatives_only() {
        let cfg = shift_cfg(MarginMode::Mean, ShiftDirection::Suppress, 0.4);
        let out = margin_shift(&example_group(), &cfg).unwrap();
        assert!((out.shift_magnitude - 0.15).abs() < 1e-12);
        assert!(close(&out.calibrated_returns, &[0.2, 0.5, -0.25, 0.15]));
    }

    #[test]
    fn shift_leaves_satisfied_and_degenerate_groups() {
        let cfg = shift_cfg(MarginMode::MinMax, ShiftDirection::Lift, 0.4);
        let g = ScoredGroup::new(vec![0.8, 0.2], vec![true, false]);
        let out = margin_shift(&g, &cfg).unwrap();
        assert_eq!(out.shift_magnitude, 0.0);
        assert_eq!(out.calibrated_returns, g.returns);

        let g = ScoredGroup::new(vec![-3.0, 0.2], vec![true, true]);
        let out = margin_shift(&g, &cfg).unwrap();
        assert_eq!(out.shift_magnitude, 0.0);
        assert_eq!(out.margin_before, None);
        assert_eq!(out.calibrated_returns, g.returns);
    }

    fn mask_cfg(delta: f64, rho: f64, mode: MarginMode) -> CalibrationConfig {
        CalibrationConfig {
            strategy: Strategy::Mask,
            mode,
            direction: ShiftDirection::Spread,
            target_margin: delta,
            retention_ratio: rho,
        }
    }

    #[test]
    fn greedy_mask_hand_trace() {
        // positives {0.1, 0.6}, negatives {0.5, 0.0}
        let g = ScoredGroup::new(vec![0.1, 0.6, 0.5, 0.0], vec![true, true, false, false]);
        let (out, trace) = greedy_margin_mask_trace(&g, &mask_cfg(0.4, 0.25, MarginMode::MinMax)).unwrap();
        assert_eq!(trace.len(), 2);
        assert!((trace[0].margin + 0.4).abs() < 1e-12);
        assert!((trace[0].gain_positive.unwrap() - 0.5).abs() < 1e-12);
        assert!((trace[0].gain_negative.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(trace[0].side, Side::Negative);
        assert_eq!(trace[0].dropped, 2);
        assert!((trace[1].margin - 0.1).abs() < 1e-12);
        assert_eq!(trace[1].gain_negative, None);
        assert_eq!(trace[1].side, Side::Positive);
        assert_eq!(trace[1].dropped, 0);
        assert_eq!(out.keep_mask, vec![false, true, false, true]);
        assert_eq!(out.calibrated_returns, vec![0.0, 0.6, 0.0, 0.0]);
        assert!((out.margin_after(MarginMode::MinMax).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(out.shift_magnitude, 0.0);
    }

    #[test]
    fn greedy_mask_noop_cases() {
        let cfg = mask_cfg(0.4, 0.25, MarginMode::MinMax);
        let all_correct = ScoredGroup::new(vec![0.1, -0.3, 0.2], vec![true; 3]);
        let out = greedy_margin_mask(&all_correct, &cfg).unwrap();
        assert!(out.keep_mask.iter().all(|&k| k));

        let fine = ScoredGroup::new(vec![1.0, 0.9, 0.1, 0.0], vec![true, true, false, false]);
        let (out, trace) = greedy_margin_mask_trace(&fine, &cfg).unwrap();
        assert!(trace.is_empty());
        assert!(out.keep_mask.iter().all(|&k| k));
    }

    #[test]
    fn greedy_mask_stops_at_floors() {
        let g = ScoredGroup::new(vec![-1.0, 1.0], vec![true, false]);
        let (out, trace) = greedy_margin_mask_trace(&g, &mask_cfg(0.4, 0.25, MarginMode::Mean)).unwrap();
        assert!(trace.is_empty());
        assert!(out.keep_mask.iter().all(|&k| k));
    }

    #[test]
    fn calibrate_dispatch() {
        let g = example_group();
        let none = calibrate(&g, &CalibrationConfig::identity()).unwrap();
        assert_eq!(none.calibrated_returns, g.returns);

        let consistent = ScoredGroup::new(vec![1.0, 0.9, 0.1, 0.0], vec![true, true, false, false]);
        let a = calibrate(&consistent, &CalibrationConfig::identity()).unwrap();
        let b = calibrate(&consistent, &CalibrationConfig::textual()).unwrap();
        assert_eq!(a, b);

        let masked = ScoredGroup::new(vec![0.1, 0.6, 0.5, 0.0], vec![true, true, false, false]);
        let out = calibrate(&masked, &mask_cfg(0.4, 0.25, MarginMode::MinMax)).unwrap();
        assert_eq!(out.keep_mask, vec![false, true, false, true]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = CalibrationConfig::textual();
        cfg.target_margin = -0.1;
        assert!(cfg.validate().is_err());
        let mut cfg = CalibrationConfig::textual();
        cfg.retention_ratio = 1.0;
        assert!(margin_shift(&example_group(), &cfg).is_err());
        assert!(CalibrationConfig::multimodal().validate().is_ok());
    }
}
