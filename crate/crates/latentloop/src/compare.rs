//! Side-by-side accuracy comparison of two runs.

use std::fmt;

use latentloop_core::trainer::ExperimentLog;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CompareError {
    #[error("logs cover different epochs ({a:?} vs {b:?})")]
    EpochRange { a: Vec<u32>, b: Vec<u32> },
    #[error("log `{0}` has no epochs")]
    Empty(&'static str),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochDelta {
    pub epoch: u32,
    pub acc_a: f64,
    pub acc_b: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub epochs: Vec<EpochDelta>,
    pub final_a: f64,
    pub final_b: f64,
    pub final_delta: f64,
    pub threshold: f64,
    /// First epoch at which each run reaches `threshold`; `None` if never.
    pub first_epoch_a: Option<u32>,
    pub first_epoch_b: Option<u32>,
}

/// Compares run `a` against reference run `b`. The threshold defaults to
/// `b`'s final accuracy.
pub fn compare(a: &ExperimentLog, b: &ExperimentLog, threshold: Option<f64>) -> Result<Comparison, CompareError> {
    let ea: Vec<u32> = a.records.iter().map(|r| r.epoch).collect();
    let eb: Vec<u32> = b.records.iter().map(|r| r.epoch).collect();
    if ea.is_empty() {
        return Err(CompareError::Empty("a"));
    }
    if eb.is_empty() {
        return Err(CompareError::Empty("b"));
    }
    if ea != eb {
        return Err(CompareError::EpochRange { a: ea, b: eb });
    }
    let epochs: Vec<EpochDelta> = a
        .records
        .iter()
        .zip(&b.records)
        .map(|(ra, rb)| EpochDelta {
            epoch: ra.epoch,
            acc_a: ra.val_acc,
            acc_b: rb.val_acc,
            delta: ra.val_acc - rb.val_acc,
        })
        .collect();
    let last = epochs.last().expect("non-empty");
    let threshold = threshold.unwrap_or(last.acc_b);
    Ok(Comparison {
        final_a: last.acc_a,
        final_b: last.acc_b,
        final_delta: last.delta,
        threshold,
        first_epoch_a: a.first_epoch_reaching(threshold),
        first_epoch_b: b.first_epoch_reaching(threshold),
        epochs,
    })
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>5}  {:>8}  {:>8}  {:>8}", "epoch", "acc_a", "acc_b", "delta")?;
        for d in &self.epochs {
            writeln!(f, "{:>5}  {:>8.4}  {:>8.4}  {:>+8.4}", d.epoch, d.acc_a, d.acc_b, d.delta)?;
        }
        let show = |e: Option<u32>| e.map_or("none".to_string(), |e| e.to_string());
        writeln!(
            f,
            "final: a {:.4}  b {:.4}  delta {:+.2} points",
            self.final_a,
            self.final_b,
            100.0 * self.final_delta
        )?;
        write!(
            f,
            "first epoch reaching {:.4}: a {}  b {}",
            self.threshold,
            show(self.first_epoch_a),
            show(self.first_epoch_b)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use latentloop_core::models::BackboneSpec;
    use latentloop_core::trainer::{EpochRecord, Mode, SessionConfig};

    fn log(accs: &[f64]) -> ExperimentLog {
        let mut l = ExperimentLog::new(SessionConfig::new("x", BackboneSpec::default_mlp(2, 2), Mode::Baseline));
        for (i, &a) in accs.iter().enumerate() {
            l.records.push(EpochRecord {
                epoch: i as u32 + 1,
                l_ce: 0.0,
                l_human: 0.0,
                center: 0.0,
                spread: 0.0,
                separation: 0.0,
                scale_model: 0.0,
                l_global: 0.0,
                val_acc: a,
                val_loss: 0.0,
                layout_id: None,
                wall_ms: 0,
            });
        }
        l
    }

    #[test]
    fn identical_logs_have_zero_deltas() {
        let a = log(&[0.5, 0.6, 0.7]);
        let c = compare(&a, &a, None).unwrap();
        assert!(c.epochs.iter().all(|d| d.delta == 0.0));
        assert_eq!(c.first_epoch_a, Some(3));
    }

    #[test]
    fn unreached_threshold_is_none() {
        let c = compare(&log(&[0.5, 0.6]), &log(&[0.4, 0.9]), Some(0.95)).unwrap();
        assert_eq!((c.first_epoch_a, c.first_epoch_b), (None, None));
        assert!(c.to_string().contains("a none  b none"));
        let c = compare(&log(&[0.5, 0.9]), &log(&[0.4, 0.6]), None).unwrap();
        assert_eq!(c.first_epoch_a, Some(2));
        assert!((c.final_delta - 0.3).abs() < 1e-12);
    }

    #[test]
    fn mismatched_ranges() {
        assert!(matches!(compare(&log(&[0.5]), &log(&[0.5, 0.6]), None), Err(CompareError::EpochRange { .. })));
        assert_eq!(compare(&log(&[]), &log(&[0.5]), None), Err(CompareError::Empty("a")));
    }
}
