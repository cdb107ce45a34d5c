use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reasoning-progress interval in percent. State `i` of `n` (1-based) belongs
/// to the bin with `lower < 100·i/n <= upper`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProgressBin {
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
}

impl ProgressBin {
    pub fn label(&self) -> String {
        format!("{:.0}-{:.0}% states", self.lower, self.upper)
    }
}

pub fn progress_bins(count: usize) -> Result<Vec<ProgressBin>> {
    if count < 1 {
        return Err(Error::Argument("bin count must be >= 1".into()));
    }
    Ok((0..count)
        .map(|b| ProgressBin {
            index: b,
            lower: 100.0 * b as f64 / count as f64,
            upper: 100.0 * (b + 1) as f64 / count as f64,
        })
        .collect())
}

/// Bin of state `i` (1-based) among `n`, computed in exact integer arithmetic.
pub fn bin_of(i: usize, n: usize, count: usize) -> usize {
    debug_assert!(i >= 1 && i <= n && count >= 1);
    (i * count).div_ceil(n) - 1
}

/// Bin index for each of the `n` states of a trajectory.
pub fn assign_progress_bins(n: usize, count: usize) -> Result<Vec<usize>> {
    if n < 1 || count < 1 {
        return Err(Error::Argument("need n >= 1 states and >= 1 bins".into()));
    }
    Ok((1..=n).map(|i| bin_of(i, n, count)).collect())
}
