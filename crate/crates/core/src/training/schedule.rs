//! Learning-rate schedules: exponential staircase decay, or a constant rate
//! dropped once when dev loss stops improving.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::{TrainConfig, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrMode {
    Exp,
    Drop,
}

impl fmt::Display for LrMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrMode::Exp => "exp",
            LrMode::Drop => "drop",
        })
    }
}

impl FromStr for LrMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "exp" => Ok(LrMode::Exp),
            "drop" => Ok(LrMode::Drop),
            _ => Err(format!("unknown lr mode {s:?} (exp or drop)")),
        }
    }
}

/// Rate at `step`. Exp: `lr0 * decay^floor(step / decay_steps)`. Drop: `lr0`,
/// or `lr0 * lr_drop_factor` once `dropped`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig, dropped: bool) -> f64 {
    match cfg.lr_mode {
        LrMode::Exp => cfg.lr0 * cfg.decay.powi((step / cfg.decay_steps) as i32),
        LrMode::Drop if dropped => cfg.lr0 * cfg.lr_drop_factor,
        LrMode::Drop => cfg.lr0,
    }
}

/// Drop-trigger bookkeeping. An evaluation counts as an improvement when it
/// beats the best so far by at least `min_improvement` (relative).
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub best: f64,
    pub stale: usize,
    pub dropped: bool,
}

impl Default for Plateau {
    fn default() -> Self {
        Self {
            best: f64::INFINITY,
            stale: 0,
            dropped: false,
        }
    }
}

impl Plateau {
    /// Records a dev loss; returns true when this call fires the drop.
    pub fn observe(&mut self, dev_loss: f64, cfg: &TrainConfig) -> bool {
        if dev_loss < self.best * (1.0 - cfg.min_improvement) {
            self.best = dev_loss;
            self.stale = 0;
        } else {
            self.best = self.best.min(dev_loss);
            self.stale += 1;
        }
        if cfg.lr_mode == LrMode::Drop && !self.dropped && self.stale >= cfg.patience {
            self.dropped = true;
            return true;
        }
        false
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            (
                "plateau_best".into(),
                format!("{:016x}", self.best.to_bits()),
            ),
            ("plateau_stale".into(), self.stale.to_string()),
            ("plateau_dropped".into(), self.dropped.to_string()),
        ])
    }

    pub fn from_map(m: &BTreeMap<String, String>) -> Result<Self, TrainError> {
        let get = |k: &str| {
            m.get(k)
                .ok_or_else(|| TrainError::Resume(format!("schedule missing {k}")))
        };
        let bad = |k: &str| TrainError::Resume(format!("schedule field {k} unreadable"));
        Ok(Self {
            best: f64::from_bits(
                u64::from_str_radix(get("plateau_best")?, 16).map_err(|_| bad("plateau_best"))?,
            ),
            stale: get("plateau_stale")?
                .parse()
                .map_err(|_| bad("plateau_stale"))?,
            dropped: get("plateau_dropped")?
                .parse()
                .map_err(|_| bad("plateau_dropped"))?,
        })
    }
}
