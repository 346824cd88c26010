use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    StepBudget,
    EarlyStopping,
    MaxEpochs,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::StepBudget => "step_budget",
            StopReason::EarlyStopping => "early_stopping",
            StopReason::MaxEpochs => "max_epochs",
        })
    }
}

/// One finished epoch. The last epoch of a step budget may be partial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Absent when the split has no validation users.
    pub val_loss: Option<f64>,
    pub cum_seconds: f64,
    /// Cumulative optimizer steps at the end of the epoch.
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub total_steps: u64,
    pub total_seconds: f64,
    pub best_epoch: Option<usize>,
    pub stop_reason: StopReason,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,val_loss,cum_seconds,steps";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            let loss = e.val_loss.map(|l| l.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{:.6},{}\n",
                e.epoch, loss, e.cum_seconds, e.steps
            ));
        }
        out
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        let best = self.best_epoch?;
        self.epochs.iter().find(|e| e.epoch == best)?.val_loss
    }
}

/// Patience rule: stop once `patience` epochs pass without a strict
/// improvement over the best validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
        }
    }

    /// Records an epoch's loss; returns `true` when it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        match self.best {
            Some((_, best)) if loss >= best => false,
            _ => {
                self.best = Some((epoch, loss));
                true
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        self.best
            .is_some_and(|(best, _)| epoch - best >= self.patience)
    }
}
