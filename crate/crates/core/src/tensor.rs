//! Decomposed connectome model.
//!
//! The connectome matrix `M` of shape `(n_voxels * n_dirs) x n_fibers` is never
//! stored. It is represented by a coordinate-format sparse 3-tensor `Phi`
//! (one `(atom, voxel, fiber, value)` quadruple per nonzero) contracted with a
//! dense dictionary `D` of diffusion atoms:
//!
//! ```text
//! M[v * n_dirs + t, f] = sum over k with voxels[k] = v, fibers[k] = f of
//!                        values[k] * D[atoms[k] * n_dirs + t]
//! ```
//!
//! Any per-voxel baseline scaling is assumed to be folded into `values`.

use std::fmt;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Field, Result, ValidationIssue, ValidationReport};

/// Index type used by the coordinate arrays.
pub type Index = u32;

/// Upper bound on dense oracle size, in matrix entries.
pub const DENSE_ORACLE_LIMIT: u128 = 100_000_000;

/// One of the three tensor modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Key {
    Atom,
    Voxel,
    Fiber,
}

impl Key {
    pub const ALL: [Key; 3] = [Key::Atom, Key::Voxel, Key::Fiber];

    pub fn as_str(self) -> &'static str {
        match self {
            Key::Atom => "atom",
            Key::Voxel => "voxel",
            Key::Fiber => "fiber",
        }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Coefficient ordering of a [`PhiTensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoeffOrder {
    Unsorted,
    Sorted(Key),
}

impl CoeffOrder {
    pub fn is_sorted_by(self, key: Key) -> bool {
        self == CoeffOrder::Sorted(key)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub n_atoms: usize,
    pub n_voxels: usize,
    pub n_fibers: usize,
    pub n_dirs: usize,
    pub n_coeffs: usize,
}

impl Dims {
    /// Number of rows of `M`.
    pub fn n_rows(&self) -> usize {
        self.n_voxels * self.n_dirs
    }

    pub fn extent(&self, key: Key) -> usize {
        match key {
            Key::Atom => self.n_atoms,
            Key::Voxel => self.n_voxels,
            Key::Fiber => self.n_fibers,
        }
    }

    /// Checks positivity of the mode sizes and `Nc <= Na * Nv * Nf`.
    ///
    /// `n_coeffs == 0` is accepted: an empty tensor is a legal (all-zero) `M`.
    pub fn check(&self) -> std::result::Result<(), String> {
        for (name, n) in [
            ("n_atoms", self.n_atoms),
            ("n_voxels", self.n_voxels),
            ("n_fibers", self.n_fibers),
            ("n_dirs", self.n_dirs),
        ] {
            if n == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        let cells = (self.n_atoms as u128) * (self.n_voxels as u128) * (self.n_fibers as u128);
        if self.n_coeffs as u128 > cells {
            return Err(format!(
                "n_coeffs = {} exceeds n_atoms * n_voxels * n_fibers = {cells}",
                self.n_coeffs
            ));
        }
        Ok(())
    }
}

/// Coordinate-format sparse tensor `Phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiTensor {
    pub dims: Dims,
    pub atoms: Vec<Index>,
    pub voxels: Vec<Index>,
    pub fibers: Vec<Index>,
    pub values: Vec<f64>,
    pub order: CoeffOrder,
}

impl PhiTensor {
    /// Builds an unsorted tensor and checks it.
    pub fn new(
        dims: Dims,
        atoms: Vec<Index>,
        voxels: Vec<Index>,
        fibers: Vec<Index>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let t = PhiTensor { dims, atoms, voxels, fibers, values, order: CoeffOrder::Unsorted };
        t.check()?;
        Ok(t)
    }

    pub fn n_coeffs(&self) -> usize {
        self.values.len()
    }

    pub fn keys(&self, key: Key) -> &[Index] {
        match key {
            Key::Atom => &self.atoms,
            Key::Voxel => &self.voxels,
            Key::Fiber => &self.fibers,
        }
    }

    /// Tensor-only validation (dims, lengths, ranges, finiteness, ordering tag).
    pub fn check(&self) -> std::result::Result<(), ValidationReport> {
        let mut report = ValidationReport::default();
        check_tensor(self, &mut report);
        report.into_result()
    }
}

/// Dense dictionary `D`, stored atom-major: atom `a` occupies
/// `data[a * n_dirs .. (a + 1) * n_dirs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub n_atoms: usize,
    pub n_dirs: usize,
    pub data: Vec<f64>,
}

impl Dictionary {
    pub fn new(n_atoms: usize, n_dirs: usize, data: Vec<f64>) -> Result<Self> {
        let d = Dictionary { n_atoms, n_dirs, data };
        let mut report = ValidationReport::default();
        check_len_finite(Field::Dictionary, &d.data, n_atoms * n_dirs, &mut report);
        report.into_result()?;
        Ok(d)
    }

    pub fn atom(&self, a: usize) -> &[f64] {
        &self.data[a * self.n_dirs..(a + 1) * self.n_dirs]
    }
}

macro_rules! vector_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Default)]
        pub struct $name(pub Vec<f64>);

        impl $name {
            pub fn zeros(len: usize) -> Self {
                $name(vec![0.0; len])
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }
        }

        impl Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut [f64] {
                &mut self.0
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                $name(v)
            }
        }
    };
}

vector_newtype!(
    /// Demeaned diffusion signal, voxel-major (`n_voxels * n_dirs`).
    SignalVector
);
vector_newtype!(
    /// Fiber weights (`n_fibers`).
    WeightVector
);

/// Checks every index-range, length and finiteness invariant across a tensor,
/// its dictionary, and optionally the signal and weight vectors.
///
/// The report carries the first violation of each category.
pub fn validate(
    tensor: &PhiTensor,
    dict: &Dictionary,
    y: Option<&[f64]>,
    w: Option<&[f64]>,
) -> std::result::Result<(), ValidationReport> {
    let mut report = ValidationReport::default();
    check_tensor(tensor, &mut report);
    let dims = &tensor.dims;
    if dict.n_atoms != dims.n_atoms || dict.n_dirs != dims.n_dirs {
        report.push(ValidationIssue::LengthMismatch {
            field: Field::Dictionary,
            expected: dims.n_atoms * dims.n_dirs,
            found: dict.n_atoms * dict.n_dirs,
        });
    } else {
        check_len_finite(Field::Dictionary, &dict.data, dims.n_atoms * dims.n_dirs, &mut report);
    }
    if let Some(y) = y {
        check_len_finite(Field::Signal, y, dims.n_rows(), &mut report);
    }
    if let Some(w) = w {
        check_len_finite(Field::Weights, w, dims.n_fibers, &mut report);
    }
    report.into_result()
}

fn check_tensor(t: &PhiTensor, report: &mut ValidationReport) {
    if let Err(msg) = t.dims.check() {
        report.push(ValidationIssue::BadDims(msg));
    }
    let nc = t.dims.n_coeffs;
    for (key, field) in [(Key::Atom, Field::Atoms), (Key::Voxel, Field::Voxels), (Key::Fiber, Field::Fibers)] {
        let arr = t.keys(key);
        if arr.len() != nc {
            report.push(ValidationIssue::LengthMismatch { field, expected: nc, found: arr.len() });
            continue;
        }
        let extent = t.dims.extent(key);
        if let Some(position) = arr.iter().position(|&i| i as usize >= extent) {
            report.push(ValidationIssue::IndexOutOfRange { dimension: key, position });
        }
    }
    check_len_finite(Field::Values, &t.values, nc, report);
    if let CoeffOrder::Sorted(key) = t.order {
        let arr = t.keys(key);
        if let Some(i) = arr.windows(2).position(|w| w[0] > w[1]) {
            report.push(ValidationIssue::OrderingViolated { key, position: i + 1 });
        }
    }
}

fn check_len_finite(field: Field, data: &[f64], expected: usize, report: &mut ValidationReport) {
    if data.len() != expected {
        report.push(ValidationIssue::LengthMismatch { field, expected, found: data.len() });
    } else if let Some(position) = data.iter().position(|v| !v.is_finite()) {
        report.push(ValidationIssue::NonFiniteValue { field, position });
    }
}

/// A validated tensor with precomputed `index * n_dirs` offsets into the
/// dictionary and the signal vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetPhiTensor {
    tensor: PhiTensor,
    atom_offsets: Vec<Index>,
    voxel_offsets: Vec<Index>,
}

impl OffsetPhiTensor {
    pub fn tensor(&self) -> &PhiTensor {
        &self.tensor
    }

    pub fn dims(&self) -> &Dims {
        &self.tensor.dims
    }

    pub fn atom_offsets(&self) -> &[Index] {
        &self.atom_offsets
    }

    pub fn voxel_offsets(&self) -> &[Index] {
        &self.voxel_offsets
    }

    /// Drops the offsets.
    pub fn into_tensor(self) -> PhiTensor {
        self.tensor
    }
}

/// Precomputes `atoms[k] * n_dirs` and `voxels[k] * n_dirs` once so the kernels
/// never multiply inside the coefficient loop.
pub fn precompute_offsets(tensor: PhiTensor) -> Result<OffsetPhiTensor> {
    tensor.check()?;
    let nd = tensor.dims.n_dirs;
    for (dimension, n) in [("n_atoms", tensor.dims.n_atoms), ("n_voxels", tensor.dims.n_voxels)] {
        match n.checked_mul(nd) {
            Some(total) if total <= Index::MAX as usize => {}
            _ => return Err(Error::ArithmeticOverflow { dimension }),
        }
    }
    let nd = nd as Index;
    let atom_offsets = tensor.atoms.iter().map(|&a| a * nd).collect();
    let voxel_offsets = tensor.voxels.iter().map(|&v| v * nd).collect();
    Ok(OffsetPhiTensor { tensor, atom_offsets, voxel_offsets })
}

/// Dense row-major materialization of `M`. Test oracle only.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseM {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseM {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `M w`
    pub fn mul_vec(&self, w: &[f64]) -> Vec<f64> {
        assert_eq!(w.len(), self.cols);
        self.data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| row.iter().zip(w).map(|(m, x)| m * x).sum())
            .collect()
    }

    /// `M^T y`
    pub fn mul_transpose_vec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, m) in out.iter_mut().zip(row) {
                *o += m * yr;
            }
        }
        out
    }
}

/// Materializes `M` densely by brute-force summation over coefficients.
///
/// Contributions are accumulated in a canonical coefficient order, so the
/// result is bit-identical under any joint permutation of the tensor arrays.
pub fn materialize_dense(tensor: &PhiTensor, dict: &Dictionary) -> Result<DenseM> {
    validate(tensor, dict, None, None)?;
    let dims = tensor.dims;
    let rows = dims.n_rows();
    let cols = dims.n_fibers;
    let entries = rows as u128 * cols as u128;
    if entries > DENSE_ORACLE_LIMIT {
        return Err(Error::OracleTooLarge { entries, limit: DENSE_ORACLE_LIMIT });
    }
    let mut order: Vec<usize> = (0..tensor.n_coeffs()).collect();
    order.sort_by_key(|&k| {
        (tensor.voxels[k], tensor.fibers[k], tensor.atoms[k], tensor.values[k].to_bits())
    });
    let nd = dims.n_dirs;
    let mut data = vec![0.0; rows * cols];
    for k in order {
        let v = tensor.voxels[k] as usize;
        let f = tensor.fibers[k] as usize;
        let atom = dict.atom(tensor.atoms[k] as usize);
        for (t, d) in atom.iter().enumerate() {
            data[(v * nd + t) * cols + f] += tensor.values[k] * d;
        }
    }
    Ok(DenseM { rows, cols, data })
}
