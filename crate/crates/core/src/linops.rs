//! Dense linear operators and seeded instance generators.
//!
//! Everything here is deterministic given its seed: generators draw from a
//! ChaCha8 stream with a fixed per-component stream id, so regenerating a
//! matrix never perturbs the signal or initializer draws.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Stream ids keeping the per-component substreams of one experiment apart.
pub mod stream {
    pub const MATRIX: u64 = 1;
    pub const SIGNAL: u64 = 2;
    pub const INIT: u64 = 3;
    pub const ESCAPE_BASE: u64 = 1000;
}

pub(crate) fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A dense matrix together with forward and adjoint application.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOperator {
    matrix: DMatrix<f64>,
}

impl LinearOperator {
    pub fn from_matrix(matrix: DMatrix<f64>) -> Self {
        LinearOperator { matrix }
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.cols(), "operator input dimension mismatch");
        &self.matrix * x
    }

    pub fn apply_adjoint(&self, u: &DVector<f64>) -> DVector<f64> {
        assert_eq!(u.len(), self.rows(), "operator adjoint dimension mismatch");
        self.matrix.tr_mul(u)
    }

    pub fn dense(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn row(&self, j: usize) -> DVector<f64> {
        self.matrix.row(j).transpose()
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.matrix *= factor;
        self
    }

    /// Largest relative mismatch `|<Ax,u> - <x,A^T u>| / (|x||u|)` over
    /// random probes.
    pub fn adjoint_mismatch(&self, probes: usize, seed: u64) -> f64 {
        let mut rng = seeded_rng(seed, 17);
        let mut worst = 0.0_f64;
        for _ in 0..probes {
            let x = DVector::from_fn(self.cols(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let u = DVector::from_fn(self.rows(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let lhs = self.apply(&x).dot(&u);
            let rhs = x.dot(&self.apply_adjoint(&u));
            worst = worst.max((lhs - rhs).abs() / (x.norm() * u.norm()));
        }
        worst
    }
}

/// Standard Gaussian `m x n` sensing matrix, deterministic in the seed.
pub fn gaussian_matrix(m: usize, n: usize, seed: u64) -> LinearOperator {
    assert!(m >= 1 && n >= 1);
    let mut rng = seeded_rng(seed, stream::MATRIX);
    // Row-major fill so the draw order is part of the format.
    let mut matrix = DMatrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            matrix[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    LinearOperator::from_matrix(matrix)
}

/// Forward-difference operator `(Dx)_i = x_{i+1} - x_i`, shape `(n-1) x n`,
/// no wraparound.
pub fn finite_difference(n: usize) -> Result<LinearOperator> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "finite differences need n >= 2, got {n}"
        )));
    }
    let mut matrix = DMatrix::zeros(n - 1, n);
    for i in 0..n - 1 {
        matrix[(i, i)] = -1.0;
        matrix[(i, i + 1)] = 1.0;
    }
    Ok(LinearOperator::from_matrix(matrix))
}

/// Shift-invariant Haar synthesis dictionary on `R^n` (`n` a power of two).
///
/// One channel of `n` circular shifts per wavelet scale `j = 0..j_max-1`
/// plus a coarse averaging channel, every column normalized to unit length.
/// Shape: `n x (n * (j_max + 1))`.
pub fn haar_dictionary(n: usize, j_max: usize) -> Result<LinearOperator> {
    if !n.is_power_of_two() || n < 4 {
        return Err(Error::InvalidArgument(format!(
            "haar dictionary needs n a power of two >= 4, got {n}"
        )));
    }
    let log2n = n.trailing_zeros() as usize;
    if j_max < 1 || j_max >= log2n {
        return Err(Error::InvalidArgument(format!(
            "haar dictionary needs 1 <= j_max < log2(n), got j_max={j_max}, n={n}"
        )));
    }
    let mut matrix = DMatrix::zeros(n, n * (j_max + 1));
    for j in 0..j_max {
        let half = 1usize << j;
        let scale = 1.0 / ((2 * half) as f64).sqrt();
        for shift in 0..n {
            let col = j * n + shift;
            for o in 0..half {
                matrix[((shift + o) % n, col)] += scale;
                matrix[((shift + n - 1 - o) % n, col)] -= scale;
            }
        }
    }
    // Coarse channel: normalized box average at the coarsest dyadic extent.
    let width = 1usize << j_max;
    let scale = 1.0 / (width as f64).sqrt();
    for shift in 0..n {
        let col = j_max * n + shift;
        for o in 0..width {
            matrix[((shift + o) % n, col)] += scale;
        }
    }
    Ok(LinearOperator::from_matrix(matrix))
}

/// Structure of a planted ground-truth signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalKind {
    Sparse { nonzeros: usize },
    BlockSparse { blocks: usize, block_size: usize },
    PiecewiseConstant { jumps: usize },
}

/// Deterministic planted signal with unit-scale nonzero entries
/// (`+-1` signs times uniform `[0.5, 1.5]` magnitudes).
pub fn planted_signal(kind: SignalKind, n: usize, seed: u64) -> Result<DVector<f64>> {
    let mut rng = seeded_rng(seed, stream::SIGNAL);
    let amplitude = |rng: &mut ChaCha8Rng| -> f64 {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        sign * (0.5 + rng.random::<f64>())
    };
    match kind {
        SignalKind::Sparse { nonzeros } => {
            if nonzeros > n {
                return Err(Error::InvalidArgument(format!(
                    "cannot place {nonzeros} nonzeros in dimension {n}"
                )));
            }
            let support = choose_distinct(&mut rng, n, nonzeros);
            let mut x = DVector::zeros(n);
            for i in support {
                x[i] = amplitude(&mut rng);
            }
            Ok(x)
        }
        SignalKind::BlockSparse { blocks, block_size } => {
            if block_size == 0 || n % block_size != 0 || blocks > n / block_size {
                return Err(Error::InvalidArgument(format!(
                    "block spec {blocks} x {block_size} infeasible for n={n}"
                )));
            }
            let slots = choose_distinct(&mut rng, n / block_size, blocks);
            let mut x = DVector::zeros(n);
            for b in slots {
                for i in 0..block_size {
                    x[b * block_size + i] = amplitude(&mut rng);
                }
            }
            Ok(x)
        }
        SignalKind::PiecewiseConstant { jumps } => {
            if jumps > n - 1 {
                return Err(Error::InvalidArgument(format!(
                    "cannot place {jumps} jumps in dimension {n}"
                )));
            }
            let mut positions = choose_distinct(&mut rng, n - 1, jumps);
            positions.sort_unstable();
            let mut x = DVector::zeros(n);
            let mut level = amplitude(&mut rng);
            let mut next = 0usize;
            for i in 0..n {
                // Jump at position p sits between entries p and p + 1.
                if next < positions.len() && i == positions[next] + 1 {
                    level += amplitude(&mut rng);
                    next += 1;
                }
                x[i] = level;
            }
            Ok(x)
        }
    }
}

fn choose_distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    // Partial Fisher-Yates over 0..n.
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.random_range(0..n - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Measurement-count recipes used by the experiment presets
/// (natural log, rounded up).
pub fn measurements_l1(s: usize, n: usize) -> usize {
    (0.5 * (s as f64).powf(1.5) * (n as f64).ln()).ceil() as usize
}

pub fn measurements_group(block_mass: usize, n: usize) -> usize {
    (0.5 * (block_mass as f64).powi(2) * (n as f64).ln()).ceil() as usize
}

pub fn measurements_tv(jumps: usize, n: usize) -> usize {
    (0.5 * (jumps as f64).powi(2) * (n as f64).ln()).ceil() as usize
}

const MATRIX_MAGIC: &str = "ibpg-matrix";
const VECTOR_MAGIC: &str = "ibpg-vector";
const FORMAT_VERSION: u32 = 1;

/// Text fixture format: magic + version line, dimensions line, then
/// row-major decimal values (shortest round-trip representation).
pub fn matrix_to_text(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MATRIX_MAGIC} {FORMAT_VERSION}");
    let _ = writeln!(out, "{} {}", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

pub fn vector_to_text(v: &DVector<f64>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{VECTOR_MAGIC} {FORMAT_VERSION}");
    let _ = writeln!(out, "{}", v.len());
    let vals: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    let _ = writeln!(out, "{}", vals.join(" "));
    out
}

fn parse_header(line: Option<&str>, magic: &str) -> Result<()> {
    let line = line.ok_or_else(|| Error::Domain("empty fixture file".into()))?;
    let mut parts = line.split_whitespace();
    let found = parts.next().unwrap_or("");
    if found != magic {
        return Err(Error::Domain(format!(
            "bad fixture magic: expected {magic}, found {found}"
        )));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Domain("missing fixture version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Domain(format!(
            "unsupported {magic} version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

pub fn matrix_from_text(text: &str) -> Result<DMatrix<f64>> {
    let mut lines = text.lines();
    parse_header(lines.next(), MATRIX_MAGIC)?;
    let dims = lines
        .next()
        .ok_or_else(|| Error::Domain("missing dimensions line".into()))?;
    let mut it = dims.split_whitespace();
    let rows: usize = it
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Domain("bad row count".into()))?;
    let cols: usize = it
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Domain("bad column count".into()))?;
    let mut values = Vec::with_capacity(rows * cols);
    for line in lines {
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::Domain(format!("bad value token {tok:?}")))?;
            values.push(v);
        }
    }
    if values.len() != rows * cols {
        return Err(Error::Domain(format!(
            "expected {} values, found {}",
            rows * cols,
            values.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn vector_from_text(text: &str) -> Result<DVector<f64>> {
    let mut lines = text.lines();
    parse_header(lines.next(), VECTOR_MAGIC)?;
    let len: usize = lines
        .next()
        .and_then(|v| v.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Domain("bad vector length".into()))?;
    let mut values = Vec::with_capacity(len);
    for line in lines {
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::Domain(format!("bad value token {tok:?}")))?;
            values.push(v);
        }
    }
    if values.len() != len {
        return Err(Error::Domain(format!(
            "expected {len} values, found {}",
            values.len()
        )));
    }
    Ok(DVector::from_vec(values))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    std::fs::write(path, matrix_to_text(m))?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    matrix_from_text(&std::fs::read_to_string(path)?)
}

pub fn write_vector(path: &Path, v: &DVector<f64>) -> Result<()> {
    std::fs::write(path, vector_to_text(v))?;
    Ok(())
}

pub fn read_vector(path: &Path) -> Result<DVector<f64>> {
    vector_from_text(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_deterministic_and_standard() {
        let a = gaussian_matrix(2000, 10, 5);
        let b = gaussian_matrix(2000, 10, 5);
        assert_eq!(a.dense(), b.dense());
        for j in 0..10 {
            let col = a.dense().column(j);
            let mean = col.sum() / 2000.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1999.0;
            assert!((0.8..1.2).contains(&var), "column {j} variance {var}");
        }
        assert!(a.adjoint_mismatch(20, 1) < 1e-10);
    }

    #[test]
    fn finite_difference_basics() {
        let d = finite_difference(3).unwrap();
        let x = DVector::from_column_slice(&[0.0, 1.0, 3.0]);
        assert_eq!(d.apply(&x), DVector::from_column_slice(&[1.0, 2.0]));
        let ones = DVector::from_element(4, 1.0);
        let d4 = finite_difference(4).unwrap();
        assert_eq!(d4.apply(&ones).norm(), 0.0);
        assert_eq!(d4.dense().rank(1e-12), 3);
        assert!(finite_difference(1).is_err());
    }

    #[test]
    fn haar_shape_and_unit_columns() {
        let w = haar_dictionary(8, 1).unwrap();
        assert_eq!((w.rows(), w.cols()), (8, 16));
        let w = haar_dictionary(32, 3).unwrap();
        assert_eq!((w.rows(), w.cols()), (32, 128));
        for j in 0..w.cols() {
            let norm = w.dense().column(j).norm();
            assert!((norm - 1.0).abs() < 1e-12, "column {j} has norm {norm}");
        }
        assert!(w.adjoint_mismatch(20, 2) < 1e-10);
        assert!(haar_dictionary(12, 1).is_err());
        assert!(haar_dictionary(8, 3).is_err());
    }

    #[test]
    fn planted_signals_have_requested_structure() {
        let x = planted_signal(SignalKind::Sparse { nonzeros: 12 }, 128, 3).unwrap();
        assert_eq!(x.iter().filter(|v| **v != 0.0).count(), 12);
        assert!(x.iter().all(|v| *v == 0.0 || (0.5..=1.5).contains(&v.abs())));

        let x = planted_signal(
            SignalKind::BlockSparse {
                blocks: 2,
                block_size: 8,
            },
            128,
            3,
        )
        .unwrap();
        let active: Vec<usize> = (0..16)
            .filter(|b| (0..8).any(|i| x[b * 8 + i] != 0.0))
            .collect();
        assert_eq!(active.len(), 2);
        for b in active {
            assert!(
                (0..8).all(|i| x[b * 8 + i] != 0.0),
                "block {b} not fully active"
            );
        }

        let x = planted_signal(SignalKind::PiecewiseConstant { jumps: 12 }, 128, 3).unwrap();
        let d = finite_difference(128).unwrap();
        assert_eq!(d.apply(&x).iter().filter(|v| **v != 0.0).count(), 12);

        assert!(planted_signal(SignalKind::Sparse { nonzeros: 10 }, 4, 0).is_err());
    }

    #[test]
    fn measurement_recipes() {
        // 0.5 * 12^1.5 * ln(128) = 100.84... -> 101
        assert_eq!(measurements_l1(12, 128), 101);
        assert_eq!(measurements_group(16, 128), 622);
        assert_eq!(measurements_tv(12, 128), 350);
    }

    #[test]
    fn fixture_roundtrip() {
        let m = gaussian_matrix(7, 5, 9).dense().clone();
        let back = matrix_from_text(&matrix_to_text(&m)).unwrap();
        assert_eq!(m, back);
        let v = planted_signal(SignalKind::Sparse { nonzeros: 3 }, 9, 1).unwrap();
        let back = vector_from_text(&vector_to_text(&v)).unwrap();
        assert_eq!(v, back);
        assert!(matrix_from_text("ibpg-matrix 2\n1 1\n0\n").is_err());
        assert!(vector_from_text("wrong 1\n1\n0\n").is_err());
    }
}
