//! Dual-cycle sparsity schedule: a dense warm-up prefix, then repeating
//! cycles of `dense_prefix` full-compute steps followed by sparse steps at
//! `p_sparse`. The warm-up shifts the cycle phase; cycles begin at step
//! `warmup`, not step 0.

use serde::{Deserialize, Serialize};

pub const DEFAULT_CYCLE_LEN: u64 = 128;
pub const DEFAULT_DENSE_PREFIX: u64 = 16;
pub const DEFAULT_P_SPARSE: f64 = 0.5;
pub const DEFAULT_WARMUP: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_cycle_len")]
    pub cycle_len: u64,
    #[serde(default = "default_dense_prefix")]
    pub dense_prefix: u64,
    #[serde(default = "default_p_sparse")]
    pub p_sparse: f64,
    #[serde(default = "default_warmup")]
    pub warmup: u64,
}

fn default_cycle_len() -> u64 {
    DEFAULT_CYCLE_LEN
}
fn default_dense_prefix() -> u64 {
    DEFAULT_DENSE_PREFIX
}
fn default_p_sparse() -> f64 {
    DEFAULT_P_SPARSE
}
fn default_warmup() -> u64 {
    DEFAULT_WARMUP
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            cycle_len: DEFAULT_CYCLE_LEN,
            dense_prefix: DEFAULT_DENSE_PREFIX,
            p_sparse: DEFAULT_P_SPARSE,
            warmup: DEFAULT_WARMUP,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.cycle_len == 0 {
            return Err("schedule.cycle_len must be positive".into());
        }
        if self.dense_prefix > self.cycle_len {
            return Err(format!(
                "schedule.dense_prefix {} exceeds cycle_len {}",
                self.dense_prefix, self.cycle_len
            ));
        }
        if !(self.p_sparse > 0.0 && self.p_sparse <= 1.0) || !self.p_sparse.is_finite() {
            return Err(format!(
                "schedule.p_sparse must lie in (0, 1], got {}",
                self.p_sparse
            ));
        }
        Ok(())
    }

    /// Keep fraction p(t) for training step `t` (0-based).
    pub fn keep_fraction(&self, t: u64) -> f64 {
        if t < self.warmup {
            return 1.0;
        }
        let t = t - self.warmup;
        if t % self.cycle_len < self.dense_prefix {
            1.0
        } else {
            self.p_sparse
        }
    }

    /// Mean keep fraction over one full cycle.
    pub fn cycle_mean(&self) -> f64 {
        let c = self.cycle_len as f64;
        let f = self.dense_prefix as f64;
        (f + (c - f) * self.p_sparse) / c
    }

    /// Average of `keep_fraction` over steps [0, n_steps), in closed form.
    /// Tests cross-check this against an exhaustive loop.
    pub fn expected_keep_ratio(&self, n_steps: u64) -> f64 {
        if n_steps == 0 {
            return 1.0;
        }
        let warm = n_steps.min(self.warmup);
        let after = n_steps - warm;
        let cycles = after / self.cycle_len;
        let rem = after % self.cycle_len;
        let dense_rem = rem.min(self.dense_prefix);
        let sparse_rem = rem - dense_rem;
        let per_cycle =
            self.dense_prefix as f64 + (self.cycle_len - self.dense_prefix) as f64 * self.p_sparse;
        let total = warm as f64
            + cycles as f64 * per_cycle
            + dense_rem as f64
            + sparse_rem as f64 * self.p_sparse;
        total / n_steps as f64
    }
}
