//! Resource guards shared by the long-running operations.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};

/// Caps on polynomial size, enumeration size and wall-clock time.
#[derive(Clone, Copy, Debug)]
pub struct Budget {
    pub max_keys: usize,
    pub max_enumeration: u64,
    deadline: Option<Instant>,
}

impl Default for Budget {
    fn default() -> Self {
        Self::unlimited()
    }
}

impl Budget {
    pub fn unlimited() -> Self {
        Self { max_keys: usize::MAX, max_enumeration: u64::MAX, deadline: None }
    }

    pub fn new(max_keys: usize, max_enumeration: u64, wall_clock: Option<Duration>) -> Self {
        Self { max_keys, max_enumeration, deadline: wall_clock.map(|d| Instant::now() + d) }
    }

    pub fn check_keys(&self, n: usize, what: &str) -> Result<()> {
        if n > self.max_keys {
            return Err(Error::BudgetExceeded(format!("{what} has {n} keys (cap {})", self.max_keys)));
        }
        Ok(())
    }

    pub fn check_enumeration(&self, n: u64, what: &str) -> Result<()> {
        if n > self.max_enumeration {
            return Err(Error::BudgetExceeded(format!("{what} needs {n} evaluations (cap {})", self.max_enumeration)));
        }
        Ok(())
    }

    pub fn check_time(&self, what: &str) -> Result<()> {
        match self.deadline {
            Some(d) if Instant::now() > d => Err(Error::BudgetExceeded(format!("wall-clock limit reached during {what}"))),
            _ => Ok(()),
        }
    }
}
