//! One-level sensitivity analysis and the agent's observation.
//!
//! Every step evaluates each patch with one extra application of each active
//! filter, and each distorted (patch, filter) pair with one application
//! removed. That is the whole lookahead: the cost per step is linear in the
//! number of patches.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierHandle, ProbabilityVector, QueryCounter};
use crate::error::{invalid, Result};
use crate::filters::{DistortionLedger, FilterBank, FilterId};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    /// Push the tracked (ground-truth) probability down.
    Untargeted,
    /// Push the tracked (target) probability up.
    Targeted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Add,
    Remove,
}

/// Change of the tracked probability caused by one candidate move.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEntry {
    pub patch_id: usize,
    pub filter: FilterId,
    pub direction: Direction,
    pub delta_p: f64,
}

/// Add and remove candidates, each sorted most-useful first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SensitivityLists {
    pub plus: Vec<SensitivityEntry>,
    pub minus: Vec<SensitivityEntry>,
}

fn compare(mode: AttackMode, a: &SensitivityEntry, b: &SensitivityEntry) -> Ordering {
    let by_delta = match mode {
        AttackMode::Untargeted => a.delta_p.total_cmp(&b.delta_p),
        AttackMode::Targeted => b.delta_p.total_cmp(&a.delta_p),
    };
    by_delta.then(a.patch_id.cmp(&b.patch_id)).then(a.filter.cmp(&b.filter))
}

impl SensitivityLists {
    /// Sorts both lists: by `delta_p` in the helpful direction for `mode`,
    /// then by patch id, then by filter.
    pub fn sorted(mut plus: Vec<SensitivityEntry>, mut minus: Vec<SensitivityEntry>, mode: AttackMode) -> Self {
        plus.sort_by(|a, b| compare(mode, a, b));
        minus.sort_by(|a, b| compare(mode, a, b));
        Self { plus, minus }
    }
}

/// Everything a scan needs about the current state.
#[derive(Debug, Clone, Copy)]
pub struct ScanInput<'a> {
    pub ledger: &'a DistortionLedger,
    pub bank: &'a FilterBank,
    /// The ledger's render.
    pub current: &'a ImageTensor,
    /// The victim's output on `current`, already known to the caller.
    pub current_probs: &'a ProbabilityVector,
    pub filters: &'a [FilterId],
    pub tracked_class: usize,
    pub mode: AttackMode,
}

/// Number of classifier evaluations one scan of this state costs.
pub fn scan_cost(ledger: &DistortionLedger, filters: &[FilterId]) -> usize {
    ledger.grid().num_patches() * filters.len() + ledger.num_distorted_pairs()
}

/// Evaluates every one-step add and remove candidate of the current state.
///
/// Candidates are rendered in parallel and submitted in chunks of the
/// handle's batch size; results come back in candidate order, so the output
/// is a pure function of the inputs.
pub fn scan(
    input: ScanInput<'_>,
    classifier: &ClassifierHandle,
    counter: Option<&QueryCounter>,
) -> Result<SensitivityLists> {
    if input.tracked_class >= input.current_probs.len() {
        return invalid(format!("tracked class {} outside {} classes", input.tracked_class, input.current_probs.len()));
    }
    for &f in input.filters {
        input.bank.check(f)?;
    }
    let grid = input.ledger.grid();
    let mut moves: Vec<(usize, FilterId, Direction)> = Vec::with_capacity(scan_cost(input.ledger, input.filters));
    for patch in 0..grid.num_patches() {
        for &f in input.filters {
            moves.push((patch, f, Direction::Add));
        }
    }
    for ((patch, f), _) in input.ledger.distorted_pairs() {
        moves.push((patch, f, Direction::Remove));
    }

    let baseline = input.current_probs.get(input.tracked_class);
    let mut plus = Vec::new();
    let mut minus = Vec::new();
    for chunk in moves.chunks(classifier.max_batch()) {
        let images = chunk
            .par_iter()
            .map(|&(patch, f, dir)| {
                let delta = if dir == Direction::Add { 1 } else { -1 };
                input.ledger.candidate(input.bank, input.current, patch, f, delta)
            })
            .collect::<Result<Vec<_>>>()?;
        let probs = classifier.predict_tracked(&images, counter)?;
        for (&(patch_id, filter, direction), p) in chunk.iter().zip(probs) {
            let entry =
                SensitivityEntry { patch_id, filter, direction, delta_p: p.get(input.tracked_class) - baseline };
            match direction {
                Direction::Add => plus.push(entry),
                Direction::Remove => minus.push(entry),
            }
        }
    }
    Ok(SensitivityLists::sorted(plus, minus, input.mode))
}

/// Shape of the observation vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    /// Entries kept from each sensitivity list.
    pub top_k: usize,
    pub num_classes: usize,
    pub max_iter: usize,
}

/// Class counts up to this size are included in full.
pub const FULL_PROBS_LIMIT: usize = 32;
/// Otherwise the top probabilities kept, plus the tracked class.
pub const TOP_PROBS: usize = 10;

impl StateLayout {
    pub fn probs_len(&self) -> usize {
        if self.num_classes <= FULL_PROBS_LIMIT {
            self.num_classes
        } else {
            TOP_PROBS + 1
        }
    }

    /// `[plus deltas; K] [minus deltas; K] [class probabilities] [l2] [step / max_iter]`
    pub fn len(&self) -> usize {
        2 * self.top_k + self.probs_len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Fixed-length observation fed to the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(pub Vec<f64>);

impl StateVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn build_state(
    lists: &SensitivityLists,
    probs: &ProbabilityVector,
    tracked_class: usize,
    l2: f64,
    step: usize,
    layout: &StateLayout,
) -> StateVector {
    let mut v = Vec::with_capacity(layout.len());
    for list in [&lists.plus, &lists.minus] {
        v.extend(list.iter().take(layout.top_k).map(|e| e.delta_p));
        v.resize(v.len() + layout.top_k.saturating_sub(list.len()), 0.0);
    }
    if layout.num_classes <= FULL_PROBS_LIMIT {
        v.extend_from_slice(probs.as_slice());
        v.resize(2 * layout.top_k + layout.num_classes, 0.0);
    } else {
        let mut sorted = probs.as_slice().to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        v.extend(sorted.iter().take(TOP_PROBS));
        v.resize(2 * layout.top_k + TOP_PROBS, 0.0);
        v.push(probs.get(tracked_class));
    }
    v.push(l2);
    v.push(step as f64 / layout.max_iter.max(1) as f64);
    for x in v.iter_mut() {
        if !x.is_finite() {
            *x = 0.0;
        }
    }
    StateVector(v)
}

/// Writes `row,col,filter,direction,delta_p` lines for every candidate.
pub fn write_heatmap_csv(
    lists: &SensitivityLists,
    ledger: &DistortionLedger,
    bank: &FilterBank,
    out: impl Write,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row", "col", "filter", "direction", "delta_p"]).map_err(csv_err)?;
    let mut all: Vec<&SensitivityEntry> = lists.plus.iter().chain(&lists.minus).collect();
    all.sort_by_key(|e| (e.patch_id, e.filter, e.direction));
    for e in all {
        let win = ledger.grid().window(e.patch_id);
        let dir = match e.direction {
            Direction::Add => "add",
            Direction::Remove => "remove",
        };
        w.write_record([
            win.row.to_string(),
            win.col.to_string(),
            bank.display_name(e.filter),
            dir.to_string(),
            format!("{:.9e}", e.delta_p),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Format(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ConstantClassifier, ToyLinear};
    use crate::filters::FilterParams;
    use crate::tensor::{partition_patches, Shape};
    use std::sync::Arc;

    fn entry(patch_id: usize, delta_p: f64) -> SensitivityEntry {
        SensitivityEntry { patch_id, filter: FilterId::Brightness, direction: Direction::Add, delta_p }
    }

    #[test]
    fn sort_order_and_ties() {
        let raw = vec![entry(3, 0.0), entry(1, -0.2), entry(0, 0.0), entry(2, 0.1)];
        let un = SensitivityLists::sorted(raw.clone(), vec![], AttackMode::Untargeted);
        let ids: Vec<_> = un.plus.iter().map(|e| e.patch_id).collect();
        assert_eq!(ids, vec![1, 0, 3, 2]);
        let tg = SensitivityLists::sorted(raw, vec![], AttackMode::Targeted);
        let ids: Vec<_> = tg.plus.iter().map(|e| e.patch_id).collect();
        assert_eq!(ids, vec![2, 0, 3, 1]);
    }

    #[test]
    fn constant_victim_is_insensitive() {
        let shape = Shape::new(1, 4, 4);
        let img = Arc::new(ImageTensor::filled(shape, 0.5).unwrap());
        let grid = partition_patches(shape, 2).unwrap();
        let bank = FilterBank::new(FilterParams::default()).unwrap();
        let mut ledger = DistortionLedger::new(img.clone(), grid, 1).unwrap();
        ledger.add(2, FilterId::GaussianNoise).unwrap();
        let current = ledger.render(&bank).unwrap();
        let handle = ClassifierHandle::new("const", Arc::new(ConstantClassifier::certain(3, 0).unwrap()));
        let probs = handle.predict_one(&current).unwrap();
        let filters = [FilterId::GaussianNoise];
        let lists = scan(
            ScanInput {
                ledger: &ledger,
                bank: &bank,
                current: &current,
                current_probs: &probs,
                filters: &filters,
                tracked_class: 0,
                mode: AttackMode::Untargeted,
            },
            &handle,
            None,
        )
        .unwrap();
        assert!(lists.plus.iter().chain(&lists.minus).all(|e| e.delta_p == 0.0));
        let ids: Vec<_> = lists.plus.iter().map(|e| e.patch_id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        assert_eq!(lists.minus.len(), 1);
        assert_eq!(lists.minus[0].patch_id, 2);
        // 4 patches x 1 filter + 1 distorted pair, plus the baseline query.
        assert_eq!(handle.queries().evaluations, 6);
    }

    #[test]
    fn linear_victim_deltas_match_closed_form() {
        let shape = Shape::new(1, 4, 4);
        let data: Vec<f64> = (0..16).map(|i| 0.3 + 0.025 * i as f64).collect();
        let img = Arc::new(ImageTensor::new(shape, data.clone()).unwrap());
        let w: Vec<f64> = (0..32).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
        let b = vec![0.1, -0.1];
        let toy = ToyLinear::new(w.clone(), b.clone()).unwrap();
        let handle = ClassifierHandle::new("toy", Arc::new(toy));
        let grid = partition_patches(shape, 2).unwrap();
        let bank = FilterBank::new(FilterParams::default()).unwrap();
        let ledger = DistortionLedger::new(img.clone(), grid, 0).unwrap();
        let probs = handle.predict_one(&img).unwrap();
        let filters = [FilterId::Brightness];
        let lists = scan(
            ScanInput {
                ledger: &ledger,
                bank: &bank,
                current: &img,
                current_probs: &probs,
                filters: &filters,
                tracked_class: 0,
                mode: AttackMode::Untargeted,
            },
            &handle,
            None,
        )
        .unwrap();

        // Independent oracle: shift the patch by -0.1, scalar-loop softmax.
        let p0 = |x: &[f64]| {
            let l: Vec<f64> = (0..2).map(|c| (0..16).map(|i| w[c * 16 + i] * x[i]).sum::<f64>() + b[c]).collect();
            l[0].exp() / (l[0].exp() + l[1].exp())
        };
        let base = p0(&data);
        for e in &lists.plus {
            let (pr, pc) = (e.patch_id / 2, e.patch_id % 2);
            let mut x = data.clone();
            for y in 2 * pr..2 * pr + 2 {
                for xx in 2 * pc..2 * pc + 2 {
                    x[y * 4 + xx] -= 0.1;
                }
            }
            assert!((e.delta_p - (p0(&x) - base)).abs() < 1e-6, "patch {}", e.patch_id);
        }
    }

    #[test]
    fn state_layout_pads_with_zeros() {
        let layout = StateLayout { top_k: 4, num_classes: 3, max_iter: 10 };
        let lists = SensitivityLists {
            plus: vec![entry(0, -0.3), entry(2, -0.1), entry(1, 0.05)],
            minus: vec![SensitivityEntry { direction: Direction::Remove, ..entry(0, 0.2) }],
        };
        let probs = ProbabilityVector::new(vec![0.5, 0.3, 0.2]).unwrap();
        let s = build_state(&lists, &probs, 0, 0.75, 2, &layout);
        let expected = vec![
            -0.3, -0.1, 0.05, 0.0, // plus
            0.2, 0.0, 0.0, 0.0, // minus
            0.5, 0.3, 0.2, // probabilities
            0.75, 0.2, // l2, step fraction
        ];
        assert_eq!(s.0, expected);
        assert_eq!(s.len(), layout.len());
        assert_eq!(build_state(&lists, &probs, 0, 0.75, 2, &layout), s);
    }

    #[test]
    fn many_classes_use_top_probabilities() {
        let layout = StateLayout { top_k: 1, num_classes: 40, max_iter: 4 };
        let mut p = vec![0.0; 40];
        for (i, v) in p.iter_mut().enumerate() {
            *v = (i + 1) as f64;
        }
        let total: f64 = p.iter().sum();
        let probs = ProbabilityVector::new(p.iter().map(|v| v / total).collect()).unwrap();
        let s = build_state(&SensitivityLists::default(), &probs, 3, 0.0, 0, &layout);
        assert_eq!(s.len(), layout.len());
        assert_eq!(s.len(), 2 + 11 + 2);
        assert!((s.0[2] - 40.0 / total).abs() < 1e-15);
        assert!((s.0[12] - 4.0 / total).abs() < 1e-15);
    }
}
