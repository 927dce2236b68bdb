use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::filters::FilterId;

pub const N_ADD_GRID: [usize; 5] = [1, 2, 4, 8, 16];
pub const N_REM_GRID: [usize; 4] = [0, 1, 2, 4];

/// How many patches to distort and how many distortions to undo in one step,
/// and with which filter when several are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub n_add: usize,
    pub n_rem: usize,
    pub filter: FilterId,
}

/// Discrete action set: `filters x N_ADD_GRID x N_REM_GRID`, indexed
/// filter-major, then `n_add`, then `n_rem`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    filters: Vec<FilterId>,
}

impl ActionSpace {
    pub fn new(filters: Vec<FilterId>) -> Result<Self> {
        if filters.is_empty() {
            return invalid("action space needs at least one filter");
        }
        Ok(Self { filters })
    }

    pub fn filters(&self) -> &[FilterId] {
        &self.filters
    }

    const fn per_filter() -> usize {
        N_ADD_GRID.len() * N_REM_GRID.len()
    }

    pub fn len(&self) -> usize {
        self.filters.len() * Self::per_filter()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn decode(&self, index: usize) -> ActionSpec {
        assert!(index < self.len(), "action {index} out of range");
        let filter = self.filters[index / Self::per_filter()];
        let rest = index % Self::per_filter();
        ActionSpec { n_add: N_ADD_GRID[rest / N_REM_GRID.len()], n_rem: N_REM_GRID[rest % N_REM_GRID.len()], filter }
    }

    pub fn encode(&self, spec: &ActionSpec) -> Option<usize> {
        let f = self.filters.iter().position(|&f| f == spec.filter)?;
        let a = N_ADD_GRID.iter().position(|&n| n == spec.n_add)?;
        let r = N_REM_GRID.iter().position(|&n| n == spec.n_rem)?;
        Some(f * Self::per_filter() + a * N_REM_GRID.len() + r)
    }

    /// Actions whose `n_rem` does not exceed the available remove candidates.
    pub fn valid_mask(&self, removable: usize) -> Vec<bool> {
        (0..self.len()).map(|i| self.decode(i).n_rem <= removable).collect()
    }
}
