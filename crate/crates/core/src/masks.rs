//! Bidirectional decay masks.
//!
//! For decays `λ_0..λ_{L-1}` the mask is
//!
//! ```text
//! M[i][j] = Π_{k=j}^{i-1} λ_k   (i > j)
//!         = 1                   (i = j)
//!         = Π_{k=i+1}^{j} λ_k   (i < j)
//! ```
//!
//! and splits as `M = MF + MB - I` with `MF` lower and `MB` upper
//! triangular (diagonal included). Selective masks are built in log space
//! from rank-1 factors; the upper factor is the lower construction run on
//! the reversed decay sequence and mapped back with `J·X·J`.

use std::ops::Range;

use crate::error::{LionError, Result, LOG_DECAY_LIMIT};
use crate::numerics::{cumsum, exchange_conjugate, tril, Matrix, Vector};
use crate::projections::DecaySpec;

#[derive(Debug, Clone, PartialEq)]
pub struct BidirectionalMask {
    pub m: Matrix,
    pub mf: Matrix,
    pub mb: Matrix,
}

impl BidirectionalMask {
    pub fn len(&self) -> usize {
        self.m.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn from_factors(mf: Matrix, mb: Matrix) -> Self {
        let eye = Matrix::identity(mf.rows());
        let m = mf
            .add(&mb)
            .and_then(|s| s.sub(&eye))
            .expect("mask factors share a shape");
        BidirectionalMask { m, mf, mb }
    }
}

/// Forward and backward cumulative decay products, one column per channel.
///
/// `lb`/`ub` are stored in reversed sequence order: row `m` belongs to
/// original position `L - 1 - m`.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeFactors {
    pub lf: Matrix,
    pub uf: Matrix,
    pub lb: Matrix,
    pub ub: Matrix,
}

/// Kac–Murdock–Szegö mask `λ^|i-j|`.
pub fn build_fixed_mask(lambda: f64, len: usize) -> Result<BidirectionalMask> {
    DecaySpec::FixedScalar(lambda).validate(len)?;
    if len == 0 {
        return Err(LionError::shape("mask length must be at least 1"));
    }
    let mf = Matrix::from_fn(len, len, |i, j| {
        if i >= j {
            fixed_entry(lambda, i, j)
        } else {
            0.0
        }
    });
    let mb = Matrix::from_fn(len, len, |i, j| {
        if i <= j {
            fixed_entry(lambda, i, j)
        } else {
            0.0
        }
    });
    Ok(BidirectionalMask::from_factors(mf, mb))
}

#[inline]
fn fixed_entry(lambda: f64, i: usize, j: usize) -> f64 {
    lambda.powi(i.abs_diff(j) as i32)
}

/// `E_r = Σ_{k<r} a_k`.
fn exclusive_log_cumsum(a: &Vector) -> Vec<f64> {
    let inclusive = cumsum(a);
    let mut out = Vec::with_capacity(a.len());
    out.push(0.0);
    out.extend_from_slice(&inclusive.as_slice()[..a.len() - 1]);
    out
}

fn check_overflow(a: &Vector) -> Result<()> {
    let magnitude = cumsum(a).iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if !magnitude.is_finite() || magnitude > LOG_DECAY_LIMIT {
        return Err(LionError::Stability {
            magnitude,
            limit: LOG_DECAY_LIMIT,
        });
    }
    Ok(())
}

/// Rank-1 factors `(l, u)` with `u = 1/l` such that
/// `MF = Tril(l·uᵀ)` entrywise: `l_r = exp(Σ_{k<r} a_k)`.
pub fn semiseparable_factors(a: &Vector) -> Result<(Vector, Vector)> {
    check_overflow(a)?;
    let e = exclusive_log_cumsum(a);
    let l = e.iter().map(|x| x.exp()).collect();
    let u = e.iter().map(|x| (-x).exp()).collect();
    Ok((Vector::new(l)?, Vector::new(u)?))
}

fn lower_factor(a: &Vector) -> Result<Matrix> {
    let (l, u) = semiseparable_factors(a)?;
    let n = a.len();
    let outer = Matrix::from_fn(n, n, |r, c| l[r] * u[c]);
    tril(&outer, -1)?.add(&Matrix::identity(n))
}

/// Selective mask from log-decays `a = ln λ`.
///
/// Fails with [`LionError::Stability`] when `|cumsum(a)|` exceeds the
/// overflow guard; the chunked or recurrent forms handle such sequences.
pub fn build_selective_mask(a: &Vector) -> Result<BidirectionalMask> {
    if let Some((index, &x)) = a.iter().enumerate().find(|(_, x)| x.is_nan() || **x > 0.0) {
        return Err(LionError::InvalidDecay {
            index,
            value: x.exp(),
        });
    }
    let mf = lower_factor(a)?;
    let mb = exchange_conjugate(&lower_factor(&a.reversed())?)?;
    Ok(BidirectionalMask::from_factors(mf, mb))
}

/// Dense mask for any scalar decay family.
pub fn build_mask(spec: &DecaySpec, len: usize) -> Result<BidirectionalMask> {
    spec.validate(len)?;
    match spec {
        DecaySpec::NoDecay => {
            let mf = tril(&Matrix::ones(len, len), 0)?;
            Ok(BidirectionalMask::from_factors(mf.clone(), mf.transpose()))
        }
        DecaySpec::FixedScalar(l) => build_fixed_mask(*l, len),
        DecaySpec::SelectiveScalar(v) => build_selective_mask(&v.map(f64::ln)),
        DecaySpec::SelectiveDiagonal(_) => Err(LionError::Unsupported(
            "diagonal decay has one mask per channel; use diagonal_cum_factors".into(),
        )),
    }
}

/// Pads a decay spec to `padded_len` positions with decay 1.
pub(crate) fn pad_decay(spec: &DecaySpec, len: usize, padded_len: usize) -> DecaySpec {
    if padded_len == len {
        return spec.clone();
    }
    match spec {
        DecaySpec::SelectiveScalar(v) => {
            let mut data = v.as_slice().to_vec();
            data.resize(padded_len, 1.0);
            DecaySpec::SelectiveScalar(Vector::new(data).expect("nonempty"))
        }
        DecaySpec::SelectiveDiagonal(d) => {
            let mut data = d.as_slice().to_vec();
            data.resize(padded_len * d.cols(), 1.0);
            DecaySpec::SelectiveDiagonal(
                Matrix::new(padded_len, d.cols(), data).expect("padded shape"),
            )
        }
        other => other.clone(),
    }
}

pub(crate) fn padded_len(len: usize, chunk: usize) -> usize {
    len.div_ceil(chunk) * chunk
}

/// Log-decay sums for one scan direction, split at chunk boundaries:
/// `local[r] = Σ a_k` over `k` from the start of `r`'s chunk up to `r - 1`,
/// and `totals[b]` = the sum over all of chunk `b`.
#[derive(Debug, Clone)]
struct ChunkLogSums {
    local: Vec<f64>,
    totals: Vec<f64>,
}

impl ChunkLogSums {
    fn new(a: &Vector, chunk: usize) -> Result<Self> {
        let mut local = Vec::with_capacity(a.len());
        let mut totals = Vec::with_capacity(a.len() / chunk);
        for block in a.as_slice().chunks(chunk) {
            let block = Vector::new(block.to_vec())?;
            local.extend(exclusive_log_cumsum(&block));
            totals.push(cumsum(&block)[block.len() - 1]);
        }
        let magnitude = local.iter().fold(0.0_f64, |m, x| m.max(-x));
        if !magnitude.is_finite() || magnitude > LOG_DECAY_LIMIT {
            return Err(LionError::Stability {
                magnitude,
                limit: LOG_DECAY_LIMIT,
            });
        }
        Ok(Self { local, totals })
    }

    /// `Π_{k=col}^{row-1} λ_k` for `row > col`, where `col` lies in chunk
    /// `col_chunk` and `between` is the log-decay of the chunks strictly
    /// between (or 0 when both share a chunk).
    #[inline]
    fn lower(&self, row: usize, col: usize, between: f64) -> f64 {
        (between + self.local[row]).exp() * (-self.local[col]).exp()
    }

    /// Log-decay accumulated from the start of chunk `from` to the start of
    /// each chunk `i >= from`; index `i - from`.
    fn offsets(&self, from: usize, upto: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(upto + 1 - from);
        let mut acc = 0.0;
        out.push(acc);
        for b in from..upto {
            acc += self.totals[b];
            out.push(acc);
        }
        out
    }
}

#[derive(Debug, Clone)]
enum MaskKind {
    Ones,
    Fixed(f64),
    Selective {
        fwd: ChunkLogSums,
        rev: ChunkLogSums,
    },
}

/// Evaluates blocks of the mask without materializing it.
///
/// Selective entries are products of a chunk-local factor, the decay of
/// whole chunks in between, and the inverse chunk-local factor of the
/// column, so the only exponent that can grow is a within-chunk one. The
/// overflow guard therefore applies per chunk rather than to the whole
/// sequence.
#[derive(Debug, Clone)]
pub(crate) struct ChunkMasker {
    len: usize,
    chunk: usize,
    kind: MaskKind,
}

impl ChunkMasker {
    /// `len` must already be a multiple of `chunk`.
    pub(crate) fn new(spec: &DecaySpec, len: usize, chunk: usize) -> Result<Self> {
        debug_assert!(chunk > 0 && len.is_multiple_of(chunk));
        let kind = match spec {
            DecaySpec::NoDecay => MaskKind::Ones,
            DecaySpec::FixedScalar(l) => MaskKind::Fixed(*l),
            DecaySpec::SelectiveScalar(v) => {
                let a = v.map(f64::ln);
                MaskKind::Selective {
                    fwd: ChunkLogSums::new(&a, chunk)?,
                    rev: ChunkLogSums::new(&a.reversed(), chunk)?,
                }
            }
            DecaySpec::SelectiveDiagonal(_) => {
                return Err(LionError::Unsupported(
                    "chunk masks need a scalar decay".into(),
                ))
            }
        };
        Ok(Self { len, chunk, kind })
    }

    pub(crate) fn chunks(&self) -> usize {
        self.len / self.chunk
    }

    /// Writes `M[rows, jC..(j+1)C]` row-major into `out`.
    pub(crate) fn fill(&self, rows: Range<usize>, j: usize, out: &mut [f64]) {
        let c = self.chunk;
        let cols = j * c..(j + 1) * c;
        debug_assert_eq!(out.len(), rows.len() * c);
        match &self.kind {
            MaskKind::Ones => out.fill(1.0),
            MaskKind::Fixed(l) => {
                for (r, row) in rows.zip(out.chunks_mut(c)) {
                    for (col, o) in cols.clone().zip(row.iter_mut()) {
                        *o = fixed_entry(*l, r, col);
                    }
                }
            }
            MaskKind::Selective { fwd, rev } => {
                let n = self.len;
                let chunks = self.chunks();
                let j_rev = chunks - 1 - j;
                let last_row_chunk = (rows.end - 1) / c;
                let first_row_chunk = rows.start / c;
                let fwd_off = fwd.offsets(j, last_row_chunk.max(j));
                let rev_off = rev.offsets(j_rev, (chunks - 1 - first_row_chunk).max(j_rev));
                for (r, row) in rows.zip(out.chunks_mut(c)) {
                    for (col, o) in cols.clone().zip(row.iter_mut()) {
                        *o = if r > col {
                            fwd.lower(r, col, fwd_off[r / c - j])
                        } else if r < col {
                            let (m, k) = (n - 1 - r, n - 1 - col);
                            rev.lower(m, k, rev_off[m / c - j_rev])
                        } else {
                            1.0
                        };
                    }
                }
            }
        }
    }
}

/// The `C x C` block `(i, j)` of the bidirectional mask.
///
/// Sequences whose length is not a multiple of `chunk` are right-padded
/// with decay 1; blocks covering padding are those of the padded mask.
pub fn chunk_mask(
    spec: &DecaySpec,
    len: usize,
    chunk: usize,
    i: usize,
    j: usize,
) -> Result<Matrix> {
    if chunk == 0 {
        return Err(LionError::shape("chunk size must be at least 1"));
    }
    spec.validate(len)?;
    let padded = padded_len(len, chunk);
    let masker = ChunkMasker::new(&pad_decay(spec, len, padded), padded, chunk)?;
    let chunks = masker.chunks();
    if i >= chunks || j >= chunks {
        return Err(LionError::ChunkIndex { i, j, chunks });
    }
    let mut data = vec![0.0; chunk * chunk];
    masker.fill(i * chunk..(i + 1) * chunk, j, &mut data);
    Matrix::new(chunk, chunk, data)
}

fn column_log_cumprod(d: &Matrix) -> Result<(Matrix, Matrix)> {
    let (rows, cols) = d.shape();
    let mut lf = Matrix::zeros(rows, cols);
    let mut uf = Matrix::zeros(rows, cols);
    for p in 0..cols {
        let logs = cumsum(&d.column(p).map(f64::ln));
        for (r, &x) in logs.iter().enumerate() {
            if !x.is_finite() || x.abs() > LOG_DECAY_LIMIT {
                return Err(LionError::Stability {
                    magnitude: x.abs(),
                    limit: LOG_DECAY_LIMIT,
                });
            }
            lf.set(r, p, x.exp());
            uf.set(r, p, (-x).exp());
        }
    }
    Ok((lf, uf))
}

/// Column-wise cumulative products of per-channel decays `d` (`L x N`) and
/// their inverses, forward and on the row-reversed sequence.
pub fn diagonal_cum_factors(d: &Matrix) -> Result<CumulativeFactors> {
    DecaySpec::SelectiveDiagonal(d.clone()).validate(d.rows())?;
    let (lf, uf) = column_log_cumprod(d)?;
    let (lb, ub) = column_log_cumprod(&crate::numerics::flip_rows(d))?;
    Ok(CumulativeFactors { lf, uf, lb, ub })
}
