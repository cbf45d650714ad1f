use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::SessionConfig;
use crate::guidance::LossBreakdown;

/// One line of the experiment log. Loss fields are epoch means over the
/// training batches, weighted by batch size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub l_ce: f64,
    pub l_human: f64,
    pub center: f64,
    pub spread: f64,
    pub separation: f64,
    pub scale_model: f64,
    pub l_global: f64,
    pub val_acc: f64,
    pub val_loss: f64,
    pub layout_id: Option<u64>,
    pub wall_ms: u64,
}

impl EpochRecord {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            l_ce: self.l_ce,
            l_human: self.l_human,
            center_term: self.center,
            spread_term: self.spread,
            separation_term: self.separation,
            scale_model: self.scale_model,
            scale_penalty: 0.0,
            l_global: self.l_global,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs_completed: u32,
    pub final_val_acc: f64,
    pub best_val_acc: f64,
    pub best_epoch: u32,
    pub layouts_committed: u64,
    pub test_acc: Option<f64>,
    pub final_state: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentLog {
    pub config: SessionConfig,
    pub records: Vec<EpochRecord>,
    pub summary: Option<RunSummary>,
}

impl ExperimentLog {
    pub fn new(config: SessionConfig) -> Self {
        ExperimentLog { config, records: Vec::new(), summary: None }
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.val_acc)
    }

    /// First epoch whose validation accuracy reaches `threshold`.
    pub fn first_epoch_reaching(&self, threshold: f64) -> Option<u32> {
        self.records.iter().find(|r| r.val_acc >= threshold).map(|r| r.epoch)
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.val_acc).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::BackboneSpec;
    use crate::trainer::Mode;

    fn record(epoch: u32, acc: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            l_ce: 1.0,
            l_human: 0.0,
            center: 0.0,
            spread: 0.0,
            separation: 0.0,
            scale_model: 1.0,
            l_global: 1.0,
            val_acc: acc,
            val_loss: 1.0,
            layout_id: None,
            wall_ms: 0,
        }
    }

    #[test]
    fn threshold_search() {
        let mut log = ExperimentLog::new(SessionConfig::new("x", BackboneSpec::default_mlp(2, 2), Mode::Baseline));
        log.records = alloc::vec![record(1, 0.4), record(2, 0.7), record(3, 0.6)];
        assert_eq!(log.first_epoch_reaching(0.6), Some(2));
        assert_eq!(log.first_epoch_reaching(0.9), None);
        assert_eq!(log.final_accuracy(), Some(0.6));
    }
}
