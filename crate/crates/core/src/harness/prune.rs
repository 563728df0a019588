//! Accuracy-curve early stopping.
//!
//! A candidate must keep its accuracy at epoch `e` above
//! `lambda(e / total) * best(e)` with `lambda(x) = theta + (1 - theta) x`.
//! Epochs are counted as completed epochs, so the last report of a run is
//! held to the best curve exactly.

use std::collections::BTreeMap;

use serde::Serialize;

/// Accuracy per completed epoch; epochs may be sparse.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AccuracyCurve {
    points: BTreeMap<u32, f64>,
}

impl AccuracyCurve {
    pub fn new() -> AccuracyCurve {
        AccuracyCurve::default()
    }

    pub fn from_points(points: impl IntoIterator<Item = (u32, f64)>) -> AccuracyCurve {
        let mut c = AccuracyCurve::new();
        for (e, a) in points {
            c.record(e, a);
        }
        c
    }

    /// Store an accuracy, clamped into `[0, 1]`.
    pub fn record(&mut self, epoch: u32, accuracy: f64) {
        self.points.insert(epoch, accuracy.clamp(0.0, 1.0));
    }

    pub fn get(&self, epoch: u32) -> Option<f64> {
        self.points.get(&epoch).copied()
    }

    pub fn last(&self) -> Option<(u32, f64)> {
        self.points.iter().next_back().map(|(e, a)| (*e, *a))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.points.iter().map(|(e, a)| (*e, *a))
    }
}

pub fn lambda(theta: f64, x: f64) -> f64 {
    theta + (1.0 - theta) * x
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneRule {
    pub theta: f64,
    /// `None` until the first candidate completes.
    pub best: Option<AccuracyCurve>,
}

impl Default for PruneRule {
    fn default() -> Self {
        PruneRule {
            theta: 0.5,
            best: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    Continue,
    Prune { threshold: f64, accuracy: f64 },
}

impl PruneRule {
    pub fn new(theta: f64) -> PruneRule {
        PruneRule {
            theta: theta.clamp(0.0, 1.0),
            best: None,
        }
    }

    /// Required accuracy at `epoch` of `total`, if the best curve has a
    /// value there.
    pub fn threshold(&self, epoch: u32, total: u32) -> Option<f64> {
        let best = self.best.as_ref()?.get(epoch)?;
        let x = if total == 0 { 1.0 } else { (epoch as f64 / total as f64).min(1.0) };
        Some(lambda(self.theta, x) * best)
    }

    /// Offer a completed curve; it becomes the best one if none exists yet or
    /// its final accuracy is higher. Returns whether it was adopted.
    pub fn offer(&mut self, curve: &AccuracyCurve) -> bool {
        let Some((_, fin)) = curve.last() else { return false };
        let better = match self.best.as_ref().and_then(|b| b.last()) {
            Some((_, best)) => fin > best,
            None => true,
        };
        if better {
            self.best = Some(curve.clone());
        }
        better
    }
}

pub fn prune_decision(rule: &PruneRule, candidate: &AccuracyCurve, epoch: u32, total_epochs: u32) -> Decision {
    match (candidate.get(epoch), rule.threshold(epoch, total_epochs)) {
        (Some(accuracy), Some(threshold)) if accuracy < threshold => Decision::Prune { threshold, accuracy },
        _ => Decision::Continue,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: f64, n: u32) -> AccuracyCurve {
        AccuracyCurve::from_points((0..=n).map(|e| (e, v)))
    }

    #[test]
    fn endpoints() {
        assert_eq!(lambda(0.5, 0.0), 0.5);
        assert_eq!(lambda(0.5, 1.0), 1.0);
        let mut rule = PruneRule::new(0.5);
        rule.offer(&flat(0.8, 10));
        assert_eq!(rule.threshold(0, 10), Some(0.4));
        assert_eq!(rule.threshold(10, 10), Some(0.8));
    }

    #[test]
    fn midpoint() {
        let mut rule = PruneRule::new(0.5);
        rule.offer(&AccuracyCurve::from_points([(150, 0.60)]));
        let t = rule.threshold(150, 300).unwrap();
        assert!((t - 0.45).abs() < 1e-12);
        let c = AccuracyCurve::from_points([(150, 0.44)]);
        assert!(matches!(prune_decision(&rule, &c, 150, 300), Decision::Prune { .. }));
        let c = AccuracyCurve::from_points([(150, 0.46)]);
        assert_eq!(prune_decision(&rule, &c, 150, 300), Decision::Continue);
    }

    #[test]
    fn cold_start_never_prunes() {
        let rule = PruneRule::default();
        assert_eq!(prune_decision(&rule, &flat(0.0, 3), 1, 3), Decision::Continue);
    }

    #[test]
    fn best_curve_updates_on_higher_final() {
        let mut rule = PruneRule::default();
        assert!(rule.offer(&flat(0.5, 3)));
        assert!(!rule.offer(&flat(0.4, 3)));
        assert!(rule.offer(&flat(0.6, 3)));
        assert_eq!(rule.best.unwrap().last(), Some((3, 0.6)));
    }
}
