//! SpMV kernels over the decomposed tensor.
//!
//! * DSC: `y = M w`. For each coefficient `k`, `s = w[f_k] * value_k` is hoisted
//!   out of the direction loop, skipped when exactly zero, and otherwise
//!   `y[v_k * Nd ..] += s * D[a_k * Nd ..]` (an axpy).
//! * WC: `w = M^T y`. For each coefficient, `w[f_k] += value_k * <y[v_k * Nd ..], D[a_k * Nd ..]>`.
//!
//! Parallel execution splits the coefficient range into per-thread chunks
//! ([`ExecutionPlan`]). When the tensor is sorted by the output key (voxel for
//! DSC, fiber for WC), each chunk writes directly into its own disjoint region
//! of the output; only output blocks shared with a neighbouring chunk go through
//! a private buffer. Otherwise every chunk accumulates into a private copy of
//! the output. Private buffers are merged in ascending chunk order, so results
//! never depend on scheduling.

use std::fmt;
use std::ops::Range;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::restructure::runs_of;
use crate::tensor::{CoeffOrder, Dictionary, Index, Key, OffsetPhiTensor, PhiTensor};

/// The two SpMV operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpmvOp {
    /// Diffusion signal computation, `y = M w`.
    Dsc,
    /// Weight computation, `w = M^T y`.
    Wc,
}

impl SpmvOp {
    pub fn as_str(self) -> &'static str {
        match self {
            SpmvOp::Dsc => "dsc",
            SpmvOp::Wc => "wc",
        }
    }
}

impl fmt::Display for SpmvOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PartitionKind {
    /// Equal contiguous coefficient ranges.
    Coefficient,
    /// Whole atom runs per thread (atom-sorted tensor).
    Atom,
    /// Whole voxel runs per thread (voxel-sorted tensor).
    Voxel,
}

impl PartitionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PartitionKind::Coefficient => "coeff",
            PartitionKind::Atom => "atom",
            PartitionKind::Voxel => "voxel",
        }
    }

    fn required_order(self) -> Option<Key> {
        match self {
            PartitionKind::Coefficient => None,
            PartitionKind::Atom => Some(Key::Atom),
            PartitionKind::Voxel => Some(Key::Voxel),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PartitionStrategy {
    pub kind: PartitionKind,
    /// Snap chunk boundaries to voxel runs so DSC needs no shared writes.
    /// Requires a voxel-sorted tensor.
    pub sync_free: bool,
}

impl PartitionStrategy {
    pub fn coefficient() -> Self {
        PartitionStrategy { kind: PartitionKind::Coefficient, sync_free: false }
    }

    pub fn sync_free() -> Self {
        PartitionStrategy { kind: PartitionKind::Coefficient, sync_free: true }
    }

    pub fn by_runs(key: Key) -> Self {
        let kind = match key {
            Key::Atom => PartitionKind::Atom,
            Key::Voxel => PartitionKind::Voxel,
            Key::Fiber => PartitionKind::Coefficient,
        };
        PartitionStrategy { kind, sync_free: false }
    }

    /// Short label used in reports, e.g. `coeff` or `coeff+syncfree`.
    pub fn label(&self) -> String {
        if self.sync_free {
            format!("{}+syncfree", self.kind.as_str())
        } else {
            self.kind.as_str().to_string()
        }
    }
}

/// Per-thread coefficient ranges for one parallel SpMV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionPlan {
    strategy: PartitionStrategy,
    threads: usize,
    chunks: Vec<Range<usize>>,
    n_coeffs: usize,
    skip_zero: bool,
}

impl ExecutionPlan {
    /// Builds a plan from explicit chunks, which must tile `[0, n_coeffs)` in order.
    pub fn from_chunks(
        strategy: PartitionStrategy,
        chunks: Vec<Range<usize>>,
        n_coeffs: usize,
    ) -> Result<Self> {
        let mut cursor = 0;
        for c in &chunks {
            if c.start != cursor || c.end < c.start {
                return Err(Error::PlanTensorMismatch(format!(
                    "chunk {c:?} does not continue at {cursor}"
                )));
            }
            cursor = c.end;
        }
        if cursor != n_coeffs || chunks.is_empty() {
            return Err(Error::PlanTensorMismatch(format!(
                "chunks cover [0, {cursor}) but tensor has {n_coeffs} coefficients"
            )));
        }
        Ok(ExecutionPlan { strategy, threads: chunks.len(), chunks, n_coeffs, skip_zero: true })
    }

    pub fn strategy(&self) -> PartitionStrategy {
        self.strategy
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn chunks(&self) -> &[Range<usize>] {
        &self.chunks
    }

    pub fn skip_zero(&self) -> bool {
        self.skip_zero
    }

    /// Enables or disables the zero-weight skip in DSC (on by default).
    pub fn with_zero_skip(mut self, on: bool) -> Self {
        self.skip_zero = on;
        self
    }

    /// Checks that this plan may drive kernels over `tensor`.
    pub fn check_against(&self, tensor: &PhiTensor) -> Result<()> {
        if self.n_coeffs != tensor.n_coeffs() {
            return Err(Error::PlanTensorMismatch(format!(
                "plan built for {} coefficients, tensor has {}",
                self.n_coeffs,
                tensor.n_coeffs()
            )));
        }
        if let Some(key) = self.strategy.kind.required_order() {
            if !tensor.order.is_sorted_by(key) {
                return Err(Error::PlanTensorMismatch(format!("tensor is not sorted by {key}")));
            }
        }
        if self.strategy.sync_free {
            if !tensor.order.is_sorted_by(Key::Voxel) {
                return Err(Error::PlanTensorMismatch("sync-free plan needs voxel order".into()));
            }
            if let Some(b) = self.straddled_boundary(&tensor.voxels) {
                return Err(Error::PlanTensorMismatch(format!(
                    "voxel run straddles chunk boundary {b}"
                )));
            }
        }
        Ok(())
    }

    /// First internal chunk boundary that splits a run of equal `keys`.
    pub fn straddled_boundary(&self, keys: &[Index]) -> Option<usize> {
        self.chunks
            .iter()
            .skip(1)
            .map(|c| c.start)
            .find(|&b| b > 0 && b < keys.len() && keys[b - 1] == keys[b])
    }
}

/// Builds per-thread chunks for `tensor` according to `strategy`.
pub fn build_plan(tensor: &PhiTensor, strategy: PartitionStrategy, threads: usize) -> Result<ExecutionPlan> {
    let threads = threads.max(1);
    let nc = tensor.n_coeffs();
    if let Some(key) = strategy.kind.required_order() {
        if !tensor.order.is_sorted_by(key) {
            return Err(Error::StrategyRequiresSorted { required: key });
        }
    }
    if strategy.sync_free && !tensor.order.is_sorted_by(Key::Voxel) {
        return Err(Error::StrategyRequiresSorted { required: Key::Voxel });
    }
    let bounds = match strategy.kind {
        PartitionKind::Coefficient => {
            let mut bounds = equal_bounds(nc, threads);
            if strategy.sync_free {
                let runs = runs_of(&tensor.voxels);
                for b in bounds.iter_mut() {
                    *b = snap_to_run(*b, &runs.boundaries);
                }
            }
            bounds
        }
        PartitionKind::Atom | PartitionKind::Voxel => {
            let runs = runs_of(tensor.keys(strategy.kind.required_order().unwrap()));
            equal_bounds(runs.len(), threads)
                .into_iter()
                .map(|r| runs.boundaries[r])
                .collect()
        }
    };
    let mut chunks = Vec::with_capacity(threads);
    for w in bounds.windows(2) {
        if w[1] > w[0] {
            chunks.push(w[0]..w[1]);
        }
    }
    if chunks.is_empty() {
        chunks.push(0..nc);
    }
    Ok(ExecutionPlan { strategy, threads, chunks, n_coeffs: nc, skip_zero: true })
}

/// `[0, c, 2c, ..., n]` with `c = ceil(n / parts)`, `parts + 1` entries.
fn equal_bounds(n: usize, parts: usize) -> Vec<usize> {
    let size = n.div_ceil(parts);
    (0..=parts).map(|i| (i * size).min(n)).collect()
}

/// Moves a boundary that falls inside a run to whichever end of the run adds
/// fewer coefficients to the thread that takes the whole run. Ties move the
/// boundary to the run start.
fn snap_to_run(b: usize, run_bounds: &[usize]) -> usize {
    let idx = run_bounds.partition_point(|&x| x <= b);
    if idx == 0 || idx >= run_bounds.len() {
        return b;
    }
    let (start, end) = (run_bounds[idx - 1], run_bounds[idx]);
    if start == b {
        return b;
    }
    let extra_if_left = end - b;
    let extra_if_right = b - start;
    if extra_if_right <= extra_if_left {
        start
    } else {
        end
    }
}

/// Counters for one kernel call.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KernelStats {
    /// Coefficients whose hoisted scale `w[f] * value` was exactly zero.
    pub skipped_coefficients: usize,
    pub elapsed: Duration,
}

impl KernelStats {
    pub fn elapsed_secs(&self) -> f64 {
        self.elapsed.as_secs_f64()
    }
}

/// Scalar reference loop: `dst[t] += scale * src[t]`.
pub fn axpy_reference(scale: f64, src: &[f64], dst: &mut [f64]) {
    for t in 0..dst.len() {
        dst[t] += scale * src[t];
    }
}

/// Scalar reference loop: `sum_t a[t] * b[t]`.
pub fn dot_reference(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for t in 0..a.len() {
        s += a[t] * b[t];
    }
    s
}

/// `dst[t] += scale * src[t]`, unrolled by four. Per element it performs the
/// same single multiply and add as [`axpy_reference`], so results are identical.
#[inline]
pub fn inner_axpy(scale: f64, src: &[f64], dst: &mut [f64]) {
    assert_eq!(src.len(), dst.len());
    let mut d4 = dst.chunks_exact_mut(4);
    let mut s4 = src.chunks_exact(4);
    for (d, s) in (&mut d4).zip(&mut s4) {
        d[0] += scale * s[0];
        d[1] += scale * s[1];
        d[2] += scale * s[2];
        d[3] += scale * s[3];
    }
    for (d, s) in d4.into_remainder().iter_mut().zip(s4.remainder()) {
        *d += scale * s;
    }
}

/// Dot product with four independent partial sums.
#[inline]
pub fn inner_dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let a4 = a.chunks_exact(4);
    let b4 = b.chunks_exact(4);
    let (ra, rb) = (a4.remainder(), b4.remainder());
    for (x, y) in a4.zip(b4) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Output sink for a kernel: resolves an offset into the full output vector
/// to a writable block.
trait Sink {
    fn block(&mut self, offset: usize, len: usize) -> &mut [f64];
}

impl Sink for [f64] {
    #[inline]
    fn block(&mut self, offset: usize, len: usize) -> &mut [f64] {
        &mut self[offset..offset + len]
    }
}

/// Per-chunk view of the output.
enum ChunkSink<'a> {
    /// Disjoint window `[base, base + window.len())` written in place, plus
    /// private copies of blocks shared with neighbouring chunks.
    Owned { base: usize, window: &'a mut [f64], shared: Vec<(usize, Vec<f64>)> },
    /// Private copy of the whole output.
    Private(Vec<f64>),
}

/// Private data left to merge once a chunk has finished.
enum Leftover {
    Shared(Vec<(usize, Vec<f64>)>),
    Private(Vec<f64>),
}

impl ChunkSink<'_> {
    fn into_leftover(self) -> Leftover {
        match self {
            ChunkSink::Owned { shared, .. } => Leftover::Shared(shared),
            ChunkSink::Private(buf) => Leftover::Private(buf),
        }
    }
}

impl Sink for ChunkSink<'_> {
    #[inline]
    fn block(&mut self, offset: usize, len: usize) -> &mut [f64] {
        match self {
            ChunkSink::Owned { base, window, shared } => {
                if offset >= *base && offset + len <= *base + window.len() {
                    let o = offset - *base;
                    &mut window[o..o + len]
                } else {
                    let buf = shared
                        .iter_mut()
                        .find(|(o, _)| *o == offset)
                        .expect("write outside the chunk's output region");
                    &mut buf.1[..len]
                }
            }
            ChunkSink::Private(buf) => &mut buf[offset..offset + len],
        }
    }
}

fn dsc_range<S: Sink + ?Sized>(
    tensor: &OffsetPhiTensor,
    dict: &[f64],
    w: &[f64],
    range: Range<usize>,
    out: &mut S,
    skip_zero: bool,
) -> usize {
    let nd = tensor.dims().n_dirs;
    let t = tensor.tensor();
    let (aoff, voff) = (tensor.atom_offsets(), tensor.voxel_offsets());
    let mut skipped = 0;
    for k in range {
        let scale = w[t.fibers[k] as usize] * t.values[k];
        if scale == 0.0 {
            skipped += 1;
            if skip_zero {
                continue;
            }
        }
        let a = aoff[k] as usize;
        inner_axpy(scale, &dict[a..a + nd], out.block(voff[k] as usize, nd));
    }
    if skip_zero {
        skipped
    } else {
        0
    }
}

fn wc_range<S: Sink + ?Sized>(
    tensor: &OffsetPhiTensor,
    dict: &[f64],
    y: &[f64],
    range: Range<usize>,
    out: &mut S,
) {
    let nd = tensor.dims().n_dirs;
    let t = tensor.tensor();
    let (aoff, voff) = (tensor.atom_offsets(), tensor.voxel_offsets());
    for k in range {
        let (a, v) = (aoff[k] as usize, voff[k] as usize);
        let acc = inner_dot(&y[v..v + nd], &dict[a..a + nd]);
        out.block(t.fibers[k] as usize, 1)[0] += acc * t.values[k];
    }
}

fn check_dims(tensor: &OffsetPhiTensor, dict: &Dictionary, input: usize, output: usize, op: SpmvOp) -> Result<()> {
    let d = tensor.dims();
    if dict.n_atoms != d.n_atoms || dict.n_dirs != d.n_dirs || dict.data.len() != d.n_atoms * d.n_dirs {
        return Err(Error::DimensionMismatch(format!(
            "dictionary is {}x{}, tensor expects {}x{}",
            dict.n_atoms, dict.n_dirs, d.n_atoms, d.n_dirs
        )));
    }
    let (want_in, want_out) = match op {
        SpmvOp::Dsc => (d.n_fibers, d.n_rows()),
        SpmvOp::Wc => (d.n_rows(), d.n_fibers),
    };
    if input != want_in || output != want_out {
        return Err(Error::DimensionMismatch(format!(
            "{op}: input {input} / output {output}, expected {want_in} / {want_out}"
        )));
    }
    Ok(())
}

/// Sequential `y_out += M w` with the zero-weight skip.
pub fn dsc_sequential(
    tensor: &OffsetPhiTensor,
    dict: &Dictionary,
    w: &[f64],
    y_out: &mut [f64],
) -> Result<KernelStats> {
    dsc_sequential_opts(tensor, dict, w, y_out, true)
}

/// Sequential DSC with the zero-weight skip switchable.
pub fn dsc_sequential_opts(
    tensor: &OffsetPhiTensor,
    dict: &Dictionary,
    w: &[f64],
    y_out: &mut [f64],
    skip_zero: bool,
) -> Result<KernelStats> {
    check_dims(tensor, dict, w.len(), y_out.len(), SpmvOp::Dsc)?;
    let start = Instant::now();
    let skipped = dsc_range(tensor, &dict.data, w, 0..tensor.tensor().n_coeffs(), y_out, skip_zero);
    Ok(KernelStats { skipped_coefficients: skipped, elapsed: start.elapsed() })
}

/// Sequential `w_out += M^T y`.
pub fn wc_sequential(
    tensor: &OffsetPhiTensor,
    dict: &Dictionary,
    y: &[f64],
    w_out: &mut [f64],
) -> Result<KernelStats> {
    check_dims(tensor, dict, y.len(), w_out.len(), SpmvOp::Wc)?;
    let start = Instant::now();
    wc_range(tensor, &dict.data, y, 0..tensor.tensor().n_coeffs(), w_out);
    Ok(KernelStats { skipped_coefficients: 0, elapsed: start.elapsed() })
}

/// Parallel `y_out += M w` following `plan`.
///
/// With a sync-free plan every voxel block has exactly one writer and the
/// result is bit-identical to [`dsc_sequential`].
pub fn dsc_parallel(
    tensor: &OffsetPhiTensor,
    dict: &Dictionary,
    w: &[f64],
    y_out: &mut [f64],
    plan: &ExecutionPlan,
) -> Result<KernelStats> {
    check_dims(tensor, dict, w.len(), y_out.len(), SpmvOp::Dsc)?;
    plan.check_against(tensor.tensor())?;
    let start = Instant::now();
    let t = tensor.tensor();
    let nd = tensor.dims().n_dirs;
    let skip = plan.skip_zero;
    let skipped = scatter_parallel(
        plan.chunks(),
        &t.voxels,
        t.order == CoeffOrder::Sorted(Key::Voxel),
        nd,
        y_out,
        |range, sink| dsc_range(tensor, &dict.data, w, range, sink, skip),
    );
    Ok(KernelStats { skipped_coefficients: skipped, elapsed: start.elapsed() })
}

/// Parallel `w_out += M^T y` following `plan`.
///
/// Each chunk owns the fiber entries only it touches (fiber-sorted tensor) or
/// accumulates into a private copy of `w`; privates are merged in ascending
/// chunk order.
pub fn wc_parallel(
    tensor: &OffsetPhiTensor,
    dict: &Dictionary,
    y: &[f64],
    w_out: &mut [f64],
    plan: &ExecutionPlan,
) -> Result<KernelStats> {
    check_dims(tensor, dict, y.len(), w_out.len(), SpmvOp::Wc)?;
    plan.check_against(tensor.tensor())?;
    let start = Instant::now();
    let t = tensor.tensor();
    scatter_parallel(
        plan.chunks(),
        &t.fibers,
        t.order == CoeffOrder::Sorted(Key::Fiber),
        1,
        w_out,
        |range, sink| {
            wc_range(tensor, &dict.data, y, range, sink);
            0
        },
    );
    Ok(KernelStats { skipped_coefficients: 0, elapsed: start.elapsed() })
}

/// Runs `kernel` over each chunk on its own thread, routing writes keyed by
/// `keys[k] * block` into `out`. Returns the sum of the kernel results.
fn scatter_parallel<K>(
    chunks: &[Range<usize>],
    keys: &[Index],
    keys_sorted: bool,
    block: usize,
    out: &mut [f64],
    kernel: K,
) -> usize
where
    K: Fn(Range<usize>, &mut ChunkSink<'_>) -> usize + Sync,
{
    if chunks.len() == 1 {
        let mut sink = ChunkSink::Owned { base: 0, window: out, shared: Vec::new() };
        return kernel(chunks[0].clone(), &mut sink);
    }

    let mut sinks: Vec<ChunkSink<'_>> = Vec::with_capacity(chunks.len());
    if keys_sorted {
        let mut rest: &mut [f64] = out;
        let mut consumed = 0;
        for (i, c) in chunks.iter().enumerate() {
            if c.is_empty() {
                sinks.push(ChunkSink::Owned { base: consumed, window: &mut [], shared: Vec::new() });
                continue;
            }
            let lo = keys[c.start] as usize;
            let hi = keys[c.end - 1] as usize;
            let shared_lo = i > 0 && c.start > 0 && keys[c.start - 1] as usize == lo;
            let shared_hi = c.end < keys.len() && keys[c.end] as usize == hi;
            let mut shared = Vec::new();
            if shared_lo {
                shared.push((lo * block, vec![0.0; block]));
            }
            if shared_hi && !(shared_lo && lo == hi) {
                shared.push((hi * block, vec![0.0; block]));
            }
            let ex_lo = lo + shared_lo as usize;
            let ex_hi = (hi + 1).saturating_sub(shared_hi as usize);
            let (base, len) = if ex_hi > ex_lo {
                (ex_lo * block, (ex_hi - ex_lo) * block)
            } else {
                (consumed, 0)
            };
            let tail = std::mem::take(&mut rest);
            let (_, tail) = tail.split_at_mut(base - consumed);
            let (window, tail) = tail.split_at_mut(len);
            rest = tail;
            consumed = base + len;
            sinks.push(ChunkSink::Owned { base, window, shared });
        }
    } else {
        let n = out.len();
        sinks.extend(chunks.iter().map(|_| ChunkSink::Private(vec![0.0; n])));
    }

    let kernel = &kernel;
    let results: Vec<(usize, Leftover)> = std::thread::scope(|scope| {
        let mut iter = chunks.iter().cloned().zip(sinks);
        let (first_range, mut first_sink) = iter.next().unwrap();
        let handles: Vec<_> = iter
            .map(|(range, mut sink)| {
                scope.spawn(move || {
                    let n = kernel(range, &mut sink);
                    (n, sink.into_leftover())
                })
            })
            .collect();
        let first = kernel(first_range, &mut first_sink);
        let mut all = vec![(first, first_sink.into_leftover())];
        all.extend(handles.into_iter().map(|h| h.join().expect("kernel thread panicked")));
        all
    });

    let mut total = 0;
    for (n, leftover) in results {
        total += n;
        match leftover {
            Leftover::Shared(shared) => {
                for (offset, buf) in shared {
                    for (o, b) in out[offset..offset + block].iter_mut().zip(&buf) {
                        *o += b;
                    }
                }
            }
            Leftover::Private(buf) => {
                for (o, b) in out.iter_mut().zip(&buf) {
                    *o += b;
                }
            }
        }
    }
    total
}
