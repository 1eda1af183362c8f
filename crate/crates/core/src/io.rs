//! Binary problem container and CSV reports.
//!
//! Container layout, little-endian, no padding:
//!
//! | bytes      | content                                           |
//! |------------|---------------------------------------------------|
//! | 0..4       | magic `LIFE`                                      |
//! | 4..8       | version, u32 = 1                                  |
//! | 8..12      | flags, u32: bit0 y present, bit1 w_true present,  |
//! |            | bit2 tensor sorted by voxel                       |
//! | 12..52     | n_atoms, n_voxels, n_fibers, n_dirs, n_coeffs: u64 |
//! | ...        | atoms, voxels, fibers: u32 x n_coeffs each        |
//! | ...        | values: f64 x n_coeffs                            |
//! | ...        | dictionary: f64 x n_atoms * n_dirs, atom-major    |
//! | ...        | y: f64 x n_voxels * n_dirs (if bit0)              |
//! | ...        | w_true: f64 x n_fibers (if bit1)                  |

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::Problem;
use crate::error::{Error, Result};
use crate::solver::SolverTrace;
use crate::tensor::{CoeffOrder, Dictionary, Dims, Index, Key, PhiTensor, SignalVector, WeightVector};

pub const MAGIC: [u8; 4] = *b"LIFE";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 52;

pub const FLAG_Y: u32 = 1 << 0;
pub const FLAG_W_TRUE: u32 = 1 << 1;
pub const FLAG_VOXEL_SORTED: u32 = 1 << 2;
const KNOWN_FLAGS: u32 = FLAG_Y | FLAG_W_TRUE | FLAG_VOXEL_SORTED;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerHeader {
    pub version: u32,
    pub flags: u32,
    pub dims: Dims,
}

impl ContainerHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4..8].copy_from_slice(&self.version.to_le_bytes());
        out[8..12].copy_from_slice(&self.flags.to_le_bytes());
        let d = &self.dims;
        for (i, n) in [d.n_atoms, d.n_voxels, d.n_fibers, d.n_dirs, d.n_coeffs].into_iter().enumerate() {
            out[12 + 8 * i..20 + 8 * i].copy_from_slice(&(n as u64).to_le_bytes());
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::CorruptContainer(format!(
                "file has {} bytes, header needs {HEADER_LEN}",
                bytes.len()
            )));
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::CorruptContainer("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let flags = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if flags & !KNOWN_FLAGS != 0 {
            return Err(Error::CorruptContainer(format!("unknown flag bits {flags:#x}")));
        }
        let mut dims = [0usize; 5];
        for (i, d) in dims.iter_mut().enumerate() {
            let raw = u64::from_le_bytes(bytes[12 + 8 * i..20 + 8 * i].try_into().unwrap());
            *d = usize::try_from(raw)
                .map_err(|_| Error::CorruptContainer(format!("dimension {raw} too large")))?;
        }
        let [n_atoms, n_voxels, n_fibers, n_dirs, n_coeffs] = dims;
        Ok(ContainerHeader {
            version,
            flags,
            dims: Dims { n_atoms, n_voxels, n_fibers, n_dirs, n_coeffs },
        })
    }

    /// Total file length implied by the header, if it fits in `u64`.
    fn expected_len(&self) -> Option<u64> {
        let d = &self.dims;
        let n = |x: usize| x as u64;
        let mut len = HEADER_LEN as u64;
        len = len.checked_add(n(d.n_coeffs).checked_mul(3 * 4 + 8)?)?;
        len = len.checked_add(n(d.n_atoms).checked_mul(n(d.n_dirs))?.checked_mul(8)?)?;
        if self.flags & FLAG_Y != 0 {
            len = len.checked_add(n(d.n_voxels).checked_mul(n(d.n_dirs))?.checked_mul(8)?)?;
        }
        if self.flags & FLAG_W_TRUE != 0 {
            len = len.checked_add(n(d.n_fibers).checked_mul(8)?)?;
        }
        Some(len)
    }
}

/// Serializes a problem into the container byte layout.
pub fn encode(problem: &Problem) -> Result<Vec<u8>> {
    problem.validate()?;
    let t = &problem.tensor;
    for (name, n) in [("n_atoms", t.dims.n_atoms), ("n_voxels", t.dims.n_voxels), ("n_fibers", t.dims.n_fibers)] {
        if n > Index::MAX as usize + 1 {
            return Err(Error::DimensionMismatch(format!("{name} = {n} exceeds 32-bit indices")));
        }
    }
    let mut flags = 0;
    if problem.y.is_some() {
        flags |= FLAG_Y;
    }
    if problem.w_true.is_some() {
        flags |= FLAG_W_TRUE;
    }
    if t.order == CoeffOrder::Sorted(Key::Voxel) {
        flags |= FLAG_VOXEL_SORTED;
    }
    let header = ContainerHeader { version: VERSION, flags, dims: t.dims };
    let mut out = Vec::with_capacity(header.expected_len().unwrap_or(0) as usize);
    out.extend_from_slice(&header.to_bytes());
    for arr in [&t.atoms, &t.voxels, &t.fibers] {
        for &i in arr.iter() {
            out.extend_from_slice(&i.to_le_bytes());
        }
    }
    let reals = [Some(&t.values[..]), Some(&problem.dict.data[..]), problem.y.as_deref(), problem.w_true.as_deref()];
    for arr in reals.into_iter().flatten() {
        for &x in arr {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> &[u8] {
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn indices(&mut self, n: usize) -> Vec<Index> {
        self.take(n * 4).chunks_exact(4).map(|c| Index::from_le_bytes(c.try_into().unwrap())).collect()
    }

    fn reals(&mut self, n: usize) -> Vec<f64> {
        self.take(n * 8).chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
    }
}

/// Parses and validates a container.
pub fn decode(bytes: &[u8]) -> Result<Problem> {
    let header = ContainerHeader::parse(bytes)?;
    let expected = header
        .expected_len()
        .ok_or_else(|| Error::CorruptContainer("dimensions overflow".into()))?;
    if bytes.len() as u64 != expected {
        return Err(Error::CorruptContainer(format!(
            "file has {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let d = header.dims;
    let mut r = Reader { bytes, pos: HEADER_LEN };
    let atoms = r.indices(d.n_coeffs);
    let voxels = r.indices(d.n_coeffs);
    let fibers = r.indices(d.n_coeffs);
    let values = r.reals(d.n_coeffs);
    let dict = Dictionary { n_atoms: d.n_atoms, n_dirs: d.n_dirs, data: r.reals(d.n_atoms * d.n_dirs) };
    let y = (header.flags & FLAG_Y != 0).then(|| SignalVector(r.reals(d.n_voxels * d.n_dirs)));
    let w_true = (header.flags & FLAG_W_TRUE != 0).then(|| WeightVector(r.reals(d.n_fibers)));
    let order = if header.flags & FLAG_VOXEL_SORTED != 0 {
        CoeffOrder::Sorted(Key::Voxel)
    } else {
        CoeffOrder::Unsorted
    };
    let problem = Problem {
        tensor: PhiTensor { dims: d, atoms, voxels, fibers, values, order },
        dict,
        y,
        w_true,
        config: None,
    };
    problem.validate().map_err(|e| Error::CorruptContainer(e.to_string()))?;
    Ok(problem)
}

pub fn save(problem: &Problem, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(problem)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Problem> {
    decode(&fs::read(path)?)
}

/// One timed kernel run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub iteration: usize,
    pub op: String,
    pub restructure: String,
    pub partition: String,
    pub threads: usize,
    pub elapsed_s: f64,
    pub skipped: usize,
}

/// Writes `iteration,op,restructure,partition,threads,elapsed_s,skipped` rows.
pub fn export_report(rows: &[BenchRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["iteration", "op", "restructure", "partition", "threads", "elapsed_s", "skipped"])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<BenchRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<BenchRecord>, _>>()?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TraceRow {
    iteration: usize,
    objective: f64,
    alpha: f64,
    grad_norm: f64,
    zeros: usize,
    dsc_s: f64,
    wc_s: f64,
}

/// Writes `iteration,objective,alpha,grad_norm,zeros,dsc_s,wc_s`, one row per update.
pub fn export_trace(trace: &SolverTrace, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if trace.records.is_empty() {
        w.write_record(["iteration", "objective", "alpha", "grad_norm", "zeros", "dsc_s", "wc_s"])?;
    }
    for r in &trace.records {
        w.serialize(TraceRow {
            iteration: r.iteration,
            objective: r.objective,
            alpha: r.alpha,
            grad_norm: r.grad_norm,
            zeros: r.zeros,
            dsc_s: r.dsc_s,
            wc_s: r.wc_s,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Thread-scaling summary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub threads: usize,
    pub iters: usize,
    pub elapsed_s: f64,
    pub speedup_vs_1thread: f64,
}

pub fn export_scaling(rows: &[ScalingRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["threads", "iters", "elapsed_s", "speedup_vs_1thread"])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// One weight per line.
pub fn export_weights(w: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for x in w {
        writeln!(f, "{x:?}")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GenConfig};
    use crate::restructure::sort_by;

    fn problem(seed: u64) -> Problem {
        generate(&GenConfig::new(
            Dims { n_atoms: 6, n_voxels: 12, n_fibers: 9, n_dirs: 96, n_coeffs: 80 },
            seed,
        ))
        .unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&problem(1)).unwrap();
        assert_eq!(&bytes[0..4], b"LIFE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), FLAG_Y | FLAG_W_TRUE);
        let field = |i: usize| u64::from_le_bytes(bytes[12 + 8 * i..20 + 8 * i].try_into().unwrap());
        assert_eq!([field(0), field(1), field(2), field(3), field(4)], [6, 12, 9, 96, 80]);
        assert_eq!(&bytes[36..44], &96u64.to_le_bytes());
        let expected = 52 + 80 * 20 + 6 * 96 * 8 + 12 * 96 * 8 + 9 * 8;
        assert_eq!(bytes.len(), expected);
    }

    #[test]
    fn round_trip_in_memory() {
        let mut p = problem(2);
        let decoded = decode(&encode(&p).unwrap()).unwrap();
        p.config = None;
        assert_eq!(decoded, p);

        let (sorted, _) = sort_by(&p.tensor, Key::Voxel);
        p.tensor = sorted;
        p.w_true = None;
        let bytes = encode(&p).unwrap();
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), FLAG_Y | FLAG_VOXEL_SORTED);
        let decoded = decode(&bytes).unwrap();
        assert_eq!(decoded, p);
        assert_eq!(encode(&decoded).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = encode(&problem(3)).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::CorruptContainer(_))));
        assert!(matches!(decode(&bytes[..20]), Err(Error::CorruptContainer(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::CorruptContainer(_))));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::CorruptContainer(_))));

        let mut bad = bytes.clone();
        bad[8] |= 1 << 3;
        assert!(matches!(decode(&bad), Err(Error::CorruptContainer(_))));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(Error::UnsupportedVersion(2))));

        // atom index 0 -> 200, out of range
        let mut bad = bytes.clone();
        bad[HEADER_LEN] = 200;
        assert!(matches!(decode(&bad), Err(Error::CorruptContainer(_))));

        // claims voxel order but is not sorted
        let mut bad = bytes;
        bad[8] |= FLAG_VOXEL_SORTED as u8;
        assert!(matches!(decode(&bad), Err(Error::CorruptContainer(_))));
    }

    #[test]
    fn save_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.life");
        let p = problem(4);
        save(&p, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.tensor, p.tensor);
        assert_eq!(fs::read(&path).unwrap(), encode(&loaded).unwrap());
        assert!(matches!(load(dir.path().join("missing")), Err(Error::Io(_))));
    }

    fn record(i: usize, elapsed_s: f64) -> BenchRecord {
        BenchRecord {
            iteration: i,
            op: "dsc".into(),
            restructure: "voxel".into(),
            partition: "coeff+syncfree".into(),
            threads: 4,
            elapsed_s,
            skipped: 17,
        }
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        export_report(&[], &path).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "iteration,op,restructure,partition,threads,elapsed_s,skipped\n"
        );
        assert!(read_report(&path).unwrap().is_empty());

        let rows = vec![record(0, 0.1 + 0.2), record(1, 1.0e-7)];
        export_report(&rows, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().next().unwrap(), "iteration,op,restructure,partition,threads,elapsed_s,skipped");
        assert_eq!(read_report(&path).unwrap(), rows);
    }
}
