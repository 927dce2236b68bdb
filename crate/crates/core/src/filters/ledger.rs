use std::collections::BTreeMap;
use std::sync::Arc;

use super::{FilterBank, FilterId};
use crate::error::{invalid, Error, Result};
use crate::tensor::{write_window, ImageTensor, PatchGrid};

/// Reversible record of every distortion applied to an image.
///
/// Only non-zero counts are stored. Rendering depends on the counts alone,
/// so any add/remove history that ends in the same counts renders the same
/// image.
#[derive(Debug, Clone)]
pub struct DistortionLedger {
    original: Arc<ImageTensor>,
    grid: PatchGrid,
    seed: u64,
    counts: BTreeMap<(usize, FilterId), u32>,
}

impl PartialEq for DistortionLedger {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed
            && self.grid == other.grid
            && self.counts == other.counts
            && (Arc::ptr_eq(&self.original, &other.original) || self.original == other.original)
    }
}

impl DistortionLedger {
    pub fn new(original: Arc<ImageTensor>, grid: PatchGrid, seed: u64) -> Result<Self> {
        if original.shape() != grid.shape() {
            return invalid(format!("grid built for {} but image is {}", grid.shape(), original.shape()));
        }
        Ok(Self { original, grid, seed, counts: BTreeMap::new() })
    }

    pub fn original(&self) -> &Arc<ImageTensor> {
        &self.original
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn count(&self, patch_id: usize, filter: FilterId) -> u32 {
        self.counts.get(&(patch_id, filter)).copied().unwrap_or(0)
    }

    /// All (patch, filter) pairs with a non-zero count, ascending.
    pub fn distorted_pairs(&self) -> impl Iterator<Item = ((usize, FilterId), u32)> + '_ {
        self.counts.iter().map(|(k, v)| (*k, *v))
    }

    pub fn num_distorted_pairs(&self) -> usize {
        self.counts.len()
    }

    pub fn total_applications(&self) -> u64 {
        self.counts.values().map(|&k| u64::from(k)).sum()
    }

    pub fn is_clean(&self) -> bool {
        self.counts.is_empty()
    }

    fn check_patch(&self, patch_id: usize) -> Result<()> {
        if patch_id >= self.grid.num_patches() {
            return invalid(format!("patch {patch_id} outside grid of {} patches", self.grid.num_patches()));
        }
        Ok(())
    }

    /// Records one more application of `filter` on `patch_id`.
    pub fn add(&mut self, patch_id: usize, filter: FilterId) -> Result<()> {
        self.check_patch(patch_id)?;
        *self.counts.entry((patch_id, filter)).or_insert(0) += 1;
        Ok(())
    }

    /// Pops the last application of `filter` on `patch_id`.
    pub fn remove(&mut self, patch_id: usize, filter: FilterId) -> Result<()> {
        self.check_patch(patch_id)?;
        match self.counts.get_mut(&(patch_id, filter)) {
            None => Err(Error::Precondition(format!("no {filter} application on patch {patch_id} to remove"))),
            Some(k) => {
                *k -= 1;
                if *k == 0 {
                    self.counts.remove(&(patch_id, filter));
                }
                Ok(())
            }
        }
    }

    pub fn with_added(&self, patch_id: usize, filter: FilterId) -> Result<Self> {
        let mut next = self.clone();
        next.add(patch_id, filter)?;
        Ok(next)
    }

    pub fn with_removed(&self, patch_id: usize, filter: FilterId) -> Result<Self> {
        let mut next = self.clone();
        next.remove(patch_id, filter)?;
        Ok(next)
    }

    fn patch_counts(&self, patch_id: usize) -> Vec<(FilterId, u32)> {
        self.counts
            .range((patch_id, FilterId::GaussianNoise)..=(patch_id, FilterId::Custom(u8::MAX)))
            .map(|(&(_, f), &k)| (f, k))
            .collect()
    }

    /// Renders a single patch with the count of `filter` shifted by `delta`.
    pub(crate) fn render_patch_with(
        &self,
        bank: &FilterBank,
        patch_id: usize,
        filter: FilterId,
        delta: i64,
    ) -> Result<Vec<f64>> {
        let mut counts = self.patch_counts(patch_id);
        match counts.iter_mut().find(|(f, _)| *f == filter) {
            Some((_, k)) => {
                let shifted = i64::from(*k) + delta;
                if shifted < 0 {
                    return Err(Error::Precondition(format!(
                        "count of {filter} on patch {patch_id} would become negative"
                    )));
                }
                *k = shifted as u32;
            }
            None if delta < 0 => {
                return Err(Error::Precondition(format!("no {filter} application on patch {patch_id} to remove")))
            }
            None => {
                counts.push((filter, delta as u32));
                counts.sort_by_key(|(f, _)| *f);
            }
        }
        let window = self.grid.window(patch_id);
        let original = self.original.read_window(&window);
        bank.render_patch(&original, self.grid.shape().channels, &window, patch_id, self.seed, &counts)
    }

    /// `current` (this ledger's render) with one patch re-rendered for a
    /// single add (`delta = 1`) or remove (`delta = -1`) of `filter`.
    pub fn candidate(
        &self,
        bank: &FilterBank,
        current: &ImageTensor,
        patch_id: usize,
        filter: FilterId,
        delta: i64,
    ) -> Result<ImageTensor> {
        self.check_patch(patch_id)?;
        let patch = self.render_patch_with(bank, patch_id, filter, delta)?;
        Ok(current.with_window(&self.grid.window(patch_id), &patch))
    }

    /// Renders the distorted image. Patches without applications are copied
    /// verbatim from the original.
    pub fn render(&self, bank: &FilterBank) -> Result<ImageTensor> {
        let shape = self.grid.shape();
        let mut data = self.original.data().to_vec();
        let mut last_patch = None;
        for &(patch_id, filter) in self.counts.keys() {
            bank.check(filter)?;
            if last_patch == Some(patch_id) {
                continue;
            }
            last_patch = Some(patch_id);
            let window = self.grid.window(patch_id);
            let original = self.original.read_window(&window);
            let patch = bank.render_patch(
                &original,
                shape.channels,
                &window,
                patch_id,
                self.seed,
                &self.patch_counts(patch_id),
            )?;
            write_window(shape, &mut data, &window, &patch);
        }
        ImageTensor::new(shape, data)
    }
}
