//! Inspector-style reordering of the coefficient list.
//!
//! Sorting `Phi` by one mode turns that mode's indirection array into runs of
//! equal values ("sub-vectors"). Runs are what make reuse of the indirectly
//! accessed vector possible, and what the run-aligned thread mappings in
//! [`crate::engine`] are built on.

use std::ops::Range;
use std::time::Instant;

use crate::datagen::Problem;
use crate::engine::{self, PartitionStrategy, SpmvOp};
use crate::error::{Error, Result};
use crate::tensor::{precompute_offsets, CoeffOrder, Index, Key, PhiTensor};

/// `map[i]` is the original position of the `i`-th reordered coefficient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    pub map: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation { map: (0..n).collect() }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.map.len()];
        for &m in &self.map {
            if m >= seen.len() || seen[m] {
                return false;
            }
            seen[m] = true;
        }
        true
    }

    /// Gathers `src` into reordered position: `out[i] = src[map[i]]`.
    pub fn gather<T: Copy>(&self, src: &[T]) -> Vec<T> {
        self.map.iter().map(|&m| src[m]).collect()
    }

    /// Inverse of [`gather`](Self::gather): `out[map[i]] = src[i]`.
    pub fn scatter<T: Copy + Default>(&self, src: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); src.len()];
        for (i, &m) in self.map.iter().enumerate() {
            out[m] = src[i];
        }
        out
    }

    /// Undoes the reordering of a tensor produced by [`sort_by`].
    pub fn restore(&self, sorted: &PhiTensor) -> PhiTensor {
        PhiTensor {
            dims: sorted.dims,
            atoms: self.scatter(&sorted.atoms),
            voxels: self.scatter(&sorted.voxels),
            fibers: self.scatter(&sorted.fibers),
            values: self.scatter(&sorted.values),
            order: CoeffOrder::Unsorted,
        }
    }
}

/// Maximal runs of equal keys in a sorted indirection array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunTable {
    /// Starts at 0, ends at `Nc`, strictly increasing.
    pub boundaries: Vec<usize>,
    pub key_values: Vec<Index>,
}

impl RunTable {
    pub fn len(&self) -> usize {
        self.key_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.key_values.is_empty()
    }

    pub fn run(&self, i: usize) -> Range<usize> {
        self.boundaries[i]..self.boundaries[i + 1]
    }

    pub fn runs(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.boundaries.windows(2).map(|w| w[0]..w[1])
    }

    /// Index of the run containing coefficient `k`.
    pub fn run_of(&self, k: usize) -> usize {
        self.boundaries.partition_point(|&b| b <= k) - 1
    }

    pub fn mean_length(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            *self.boundaries.last().unwrap() as f64 / self.len() as f64
        }
    }
}

/// Stable reorder of all four coefficient arrays so that `key` is non-decreasing.
///
/// Counting sort over the key's value range; equal keys keep their relative order.
pub fn sort_by(tensor: &PhiTensor, key: Key) -> (PhiTensor, Permutation) {
    let keys = tensor.keys(key);
    let extent = keys.iter().map(|&k| k as usize + 1).max().unwrap_or(0);
    let mut starts = vec![0usize; extent + 1];
    for &k in keys {
        starts[k as usize + 1] += 1;
    }
    for i in 1..starts.len() {
        starts[i] += starts[i - 1];
    }
    let mut map = vec![0usize; keys.len()];
    for (pos, &k) in keys.iter().enumerate() {
        let slot = &mut starts[k as usize];
        map[*slot] = pos;
        *slot += 1;
    }
    let perm = Permutation { map };
    let sorted = PhiTensor {
        dims: tensor.dims,
        atoms: perm.gather(&tensor.atoms),
        voxels: perm.gather(&tensor.voxels),
        fibers: perm.gather(&tensor.fibers),
        values: perm.gather(&tensor.values),
        order: CoeffOrder::Sorted(key),
    };
    (sorted, perm)
}

/// Run table of a tensor whose ordering tag says it is sorted by `key`.
pub fn detect_runs(tensor: &PhiTensor, key: Key) -> Result<RunTable> {
    if !tensor.order.is_sorted_by(key) {
        return Err(Error::NotSorted(key));
    }
    Ok(runs_of(tensor.keys(key)))
}

/// Scans any key array for maximal runs of equal values.
pub(crate) fn runs_of(keys: &[Index]) -> RunTable {
    let mut boundaries = vec![0];
    let mut key_values = Vec::new();
    if let Some(&first) = keys.first() {
        key_values.push(first);
        for (i, w) in keys.windows(2).enumerate() {
            if w[0] != w[1] {
                boundaries.push(i + 1);
                key_values.push(w[1]);
            }
        }
        boundaries.push(keys.len());
    }
    RunTable { boundaries, key_values }
}

/// Outcome of runtime restructuring selection.
#[derive(Debug, Clone, PartialEq)]
pub struct RestructureChoice {
    pub key: Key,
    /// Mean seconds per candidate, in candidate order.
    pub measured_times: Vec<(Key, f64)>,
}

/// Restructurings tried by [`autotune`]. Fiber order is never a candidate.
pub const AUTOTUNE_CANDIDATES: [Key; 2] = [Key::Atom, Key::Voxel];

/// Partition strategy paired with a restructuring when timing it.
pub fn paired_strategy(op: SpmvOp, key: Key) -> PartitionStrategy {
    match (op, key) {
        (SpmvOp::Dsc, Key::Voxel) => PartitionStrategy::sync_free(),
        _ => PartitionStrategy::coefficient(),
    }
}

/// Lowest mean wins; ties go to voxel.
pub fn select_restructure(measured: &[(Key, f64)]) -> Key {
    let mut best: Option<(Key, f64)> = None;
    for &(key, t) in measured {
        best = match best {
            Some((_, bt)) if t < bt || (t == bt && key == Key::Voxel) => Some((key, t)),
            None => Some((key, t)),
            keep => keep,
        };
    }
    best.map(|(k, _)| k).unwrap_or(Key::Voxel)
}

/// Times each candidate restructuring `trials` times with its paired
/// partition strategy and picks the one with the lower mean.
pub fn autotune(problem: &Problem, op: SpmvOp, threads: usize, trials: usize) -> Result<RestructureChoice> {
    problem.validate()?;
    let trials = trials.max(1);
    let dims = problem.tensor.dims;
    let ones = vec![1.0; dims.n_fibers];
    let y = match op {
        SpmvOp::Dsc => None,
        SpmvOp::Wc => Some(problem.signal()?),
    };
    let mut measured_times = Vec::with_capacity(AUTOTUNE_CANDIDATES.len());
    for key in AUTOTUNE_CANDIDATES {
        let (sorted, _) = sort_by(&problem.tensor, key);
        let plan = engine::build_plan(&sorted, paired_strategy(op, key), threads)?;
        let tensor = precompute_offsets(sorted)?;
        let mut total = 0.0;
        for _ in 0..trials {
            let start = Instant::now();
            match y {
                None => {
                    let mut out = vec![0.0; dims.n_rows()];
                    engine::dsc_parallel(&tensor, &problem.dict, &ones, &mut out, &plan)?;
                }
                Some(y) => {
                    let mut out = vec![0.0; dims.n_fibers];
                    engine::wc_parallel(&tensor, &problem.dict, y, &mut out, &plan)?;
                }
            }
            total += start.elapsed().as_secs_f64();
        }
        measured_times.push((key, total / trials as f64));
    }
    Ok(RestructureChoice { key: select_restructure(&measured_times), measured_times })
}
