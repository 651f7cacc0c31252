//! Matrix multiplication on compressed 2:4 storage, exact operation counts,
//! and a dense-vs-sparse timing harness.

use std::fmt::Write as _;
use std::time::Instant;

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{axpy, dense_row, Matrix};
use crate::nm_patterns::{
    compress, decompress, enumerate_patterns, BitMask, Compressed24, NmConfig,
};

/// `a * x` computed from compressed storage.
pub fn spmm(a: &Compressed24, x: &Matrix) -> Result<Matrix> {
    let mut macs = 0;
    spmm_counted(a, x, &mut macs)
}

/// [`spmm`] that adds the multiply-accumulates it performs to `macs`.
///
/// Each output row accumulates its blocks in ascending order, two retained
/// values per block.
pub fn spmm_counted(a: &Compressed24, x: &Matrix, macs: &mut u64) -> Result<Matrix> {
    check_spmm(a, x)?;
    let mut out = Matrix::zeros(a.rows(), x.cols());
    for r in 0..a.rows() {
        *macs += sparse_row(a, r, x, out.row_mut(r));
    }
    Ok(out)
}

/// Row-parallel [`spmm`]; bitwise identical to the serial result.
pub fn spmm_parallel(a: &Compressed24, x: &Matrix) -> Result<Matrix> {
    check_spmm(a, x)?;
    let mut out = Matrix::zeros(a.rows(), x.cols());
    let n = x.cols().max(1);
    out.as_mut_slice()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(r, row)| {
            sparse_row(a, r, x, row);
        });
    Ok(out)
}

/// Row-parallel dense product; bitwise identical to [`Matrix::matmul`].
pub fn matmul_parallel(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::DimensionMismatch(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Matrix::zeros(a.rows(), b.cols());
    let n = b.cols().max(1);
    out.as_mut_slice()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(r, row)| dense_row(a.row(r), b, row));
    Ok(out)
}

fn check_spmm(a: &Compressed24, x: &Matrix) -> Result<()> {
    if a.cols() != x.rows() {
        return Err(Error::DimensionMismatch(format!(
            "compressed {}x{} times {:?}",
            a.rows(),
            a.cols(),
            x.shape()
        )));
    }
    a.check_indices()
}

#[inline]
fn sparse_row(a: &Compressed24, r: usize, x: &Matrix, out: &mut [f64]) -> u64 {
    let vals = a.row_values(r);
    let idx = a.row_indices(r);
    let mut macs = 0;
    for (block, (v, i)) in vals.chunks_exact(2).zip(idx.chunks_exact(2)).enumerate() {
        let base = block * 4;
        axpy(out, v[0], x.row(base + i[0] as usize));
        axpy(out, v[1], x.row(base + i[1] as usize));
        macs += 2 * x.cols() as u64;
    }
    macs
}

/// Arithmetic and storage model of one `rows x cols` by `cols x l` product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopReport {
    pub dense_macs: u64,
    pub sparse_macs: u64,
    pub ratio: f64,
    pub bytes_dense: u64,
    pub bytes_compressed: u64,
}

/// MAC and byte counts for dense vs N:M execution with `f64` values and
/// `ceil(log2 M)`-bit position indices.
pub fn flop_count(rows: usize, cols: usize, l: usize, config: NmConfig) -> Result<FlopReport> {
    let m = config.block_len();
    let k = config.kept();
    if !cols.is_multiple_of(m) {
        return Err(Error::Misaligned { cols, block_len: m });
    }
    let dense_macs = (rows * cols * l) as u64;
    let sparse_macs = (rows * (cols / m) * k * l) as u64;
    let kept = (rows * (cols / m) * k) as u64;
    let index_bits = usize::BITS - (m - 1).leading_zeros();
    let value_bytes = std::mem::size_of::<f64>() as u64;
    Ok(FlopReport {
        dense_macs,
        sparse_macs,
        ratio: m as f64 / k as f64,
        bytes_dense: (rows * cols) as u64 * value_bytes,
        bytes_compressed: kept * value_bytes + (kept * index_bits as u64).div_ceil(8),
    })
}

/// One benchmarked product shape, `rows x inner` times `inner x cols`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchSize {
    pub rows: usize,
    pub inner: usize,
    pub cols: usize,
}

impl BenchSize {
    pub fn cube(n: usize) -> Self {
        Self {
            rows: n,
            inner: n,
            cols: n,
        }
    }
}

impl std::fmt::Display for BenchSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.rows, self.inner, self.cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    Dense,
    Sparse,
}

impl BenchMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            BenchMode::Dense => "dense",
            BenchMode::Sparse => "sparse24",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub sizes: Vec<BenchSize>,
    pub reps: usize,
    pub seed: u64,
    pub parallel: bool,
}

/// Timings of one (size, mode) pair.
#[derive(Debug, Clone)]
pub struct BenchEntry {
    pub size: BenchSize,
    pub mode: BenchMode,
    pub samples_ns: Vec<u64>,
    pub macs: u64,
}

impl BenchEntry {
    pub fn median_ns(&self) -> u64 {
        let mut s = self.samples_ns.clone();
        s.sort_unstable();
        let n = s.len();
        if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2
        }
    }

    pub fn min_ns(&self) -> u64 {
        self.samples_ns.iter().copied().min().unwrap_or(0)
    }

    /// Multiply-accumulates per second at the median time.
    pub fn macs_per_sec(&self) -> f64 {
        self.macs as f64 / (self.median_ns().max(1) as f64 * 1e-9)
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub parallel: bool,
    pub entries: Vec<BenchEntry>,
}

impl BenchReport {
    fn entry(&self, size: BenchSize, mode: BenchMode) -> Option<&BenchEntry> {
        self.entries
            .iter()
            .find(|e| e.size == size && e.mode == mode)
    }

    /// Dense median over sparse median for `size`.
    pub fn speedup(&self, size: BenchSize) -> Option<f64> {
        let d = self.entry(size, BenchMode::Dense)?;
        let s = self.entry(size, BenchMode::Sparse)?;
        Some(d.median_ns() as f64 / s.median_ns().max(1) as f64)
    }

    /// Human-readable summary table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:<9} {:>14} {:>14} {:>12} {:>10} {:>8}",
            "size", "mode", "median_ns", "min_ns", "macs", "GMAC/s", "speedup"
        );
        for e in &self.entries {
            let speedup = match e.mode {
                BenchMode::Sparse => self
                    .speedup(e.size)
                    .map_or_else(|| "-".into(), |s| format!("{s:.2}")),
                BenchMode::Dense => "-".into(),
            };
            let _ = writeln!(
                out,
                "{:<16} {:<9} {:>14} {:>14} {:>12} {:>10.3} {:>8}",
                e.size.to_string(),
                e.mode.as_str(),
                e.median_ns(),
                e.min_ns(),
                e.macs,
                e.macs_per_sec() * 1e-9,
                speedup
            );
        }
        out
    }

    /// Tab-separated records, one per measurement, with a header line.
    pub fn to_records(&self) -> String {
        let mut out = String::from("size\tmode\trep\tnanoseconds\n");
        for e in &self.entries {
            for (rep, ns) in e.samples_ns.iter().enumerate() {
                let _ = writeln!(out, "{}\t{}\t{}\t{}", e.size, e.mode.as_str(), rep, ns);
            }
        }
        out
    }
}

/// Seeded operands for one benchmark size: a random dense matrix under a
/// random valid 2:4 mask, and a random right-hand side.
pub fn bench_operands(size: BenchSize, seed: u64) -> Result<(Compressed24, Matrix)> {
    let patterns = enumerate_patterns(NmConfig::two_four());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(-1.0, 1.0).expect("finite bounds");
    let inner = NmConfig::two_four().aligned_width(size.inner);
    let w = Matrix::from_fn(size.rows, inner, |_, _| dist.sample(&mut rng));
    let choices: Vec<usize> = (0..size.rows * inner / 4)
        .map(|_| rng.random_range(0..patterns.pattern_count()))
        .collect();
    let mask = BitMask::from_choices(size.rows, inner, &choices, &patterns)?;
    let a = compress(&w, &mask)?;
    let x = Matrix::from_fn(inner, size.cols, |_, _| dist.sample(&mut rng));
    Ok((a, x))
}

/// Times dense multiplication of the decompressed matrix against [`spmm`]
/// on identical data. One warm-up run per mode is discarded; results are
/// cross-checked before timing starts.
pub fn bench_compare(config: &BenchConfig) -> Result<BenchReport> {
    if config.sizes.is_empty() {
        return Err(Error::InvalidParameter("no benchmark sizes".into()));
    }
    if config.reps < 5 {
        return Err(Error::InvalidParameter(format!(
            "need at least 5 repetitions, got {}",
            config.reps
        )));
    }
    let mut entries = Vec::new();
    for (i, &size) in config.sizes.iter().enumerate() {
        let (a, x) = bench_operands(size, config.seed.wrapping_add(i as u64))?;
        let dense = decompress(&a)?;
        let run_dense = || {
            if config.parallel {
                matmul_parallel(&dense, &x)
            } else {
                dense.matmul(&x)
            }
        };
        let run_sparse = || {
            if config.parallel {
                spmm_parallel(&a, &x)
            } else {
                spmm(&a, &x)
            }
        };
        let reference = run_dense()?;
        let candidate = run_sparse()?;
        let scale = reference
            .as_slice()
            .iter()
            .fold(1.0f64, |m, v| m.max(v.abs()));
        if reference.max_abs_diff(&candidate) > 1e-12 * scale {
            return Err(Error::InvalidParameter(format!(
                "sparse result disagrees with dense at {size}"
            )));
        }
        let report = flop_count(size.rows, a.cols(), size.cols, NmConfig::two_four())?;
        for (mode, macs) in [
            (BenchMode::Dense, report.dense_macs),
            (BenchMode::Sparse, report.sparse_macs),
        ] {
            let mut samples_ns = Vec::with_capacity(config.reps);
            for rep in 0..=config.reps {
                let start = Instant::now();
                let out = match mode {
                    BenchMode::Dense => run_dense()?,
                    BenchMode::Sparse => run_sparse()?,
                };
                let ns = start.elapsed().as_nanos() as u64;
                std::hint::black_box(out);
                if rep > 0 {
                    samples_ns.push(ns);
                }
            }
            entries.push(BenchEntry {
                size,
                mode,
                samples_ns,
                macs,
            });
        }
    }
    Ok(BenchReport {
        parallel: config.parallel,
        entries,
    })
}
