//! The equivalent bidirectional mixer computations.
//!
//! * [`full_attention`]: `Y = scale(QKᵀ ⊙ M) V` with a dense mask.
//! * [`bidirectional_rnn`]: a forward and a backward linear recurrence whose
//!   outputs are summed, with half the diagonal term removed from each so it
//!   is counted once.
//! * [`chunkwise`] / [`parallel_chunkwise`]: block decompositions that hold
//!   `C`-wide slices of the mask and scores at a time.
//!
//! All of them reproduce the same `L x d` output. Memory figures reported
//! through [`MemoryCounter`] cover working storage only; the `L x d` output
//! and the per-token scaling accumulators are excluded since every form
//! must produce them.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::error::{LionError, Result};
use crate::masks::{pad_decay, padded_len, BidirectionalMask, ChunkMasker, CumulativeFactors};
use crate::numerics::{dot, matmul, matmul_transposed, tril, triu, Matrix, ScalingMode};
use crate::projections::{DecaySpec, MixerInputs};

/// Work (in multiply-adds) below which chunk loops stay on the calling thread.
const PARALLEL_THRESHOLD: usize = 1 << 16;

/// Tracks auxiliary element counts. Shareable across threads.
#[derive(Debug, Default)]
pub struct MemoryCounter {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl MemoryCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `elements` as live until the returned guard is dropped.
    pub fn reserve(&self, elements: usize) -> Reservation<'_> {
        let now = self.current.fetch_add(elements, Ordering::SeqCst) + elements;
        self.peak.fetch_max(now, Ordering::SeqCst);
        Reservation {
            counter: self,
            elements,
        }
    }

    pub fn current(&self) -> usize {
        self.current.load(Ordering::SeqCst)
    }

    pub fn peak_aux_elements(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    /// Folds another counter's peak into this one (per-worker max-merge).
    pub fn merge_max(&self, other: &MemoryCounter) {
        self.peak
            .fetch_max(other.peak_aux_elements(), Ordering::SeqCst);
    }
}

#[must_use = "the reservation is released when dropped"]
#[derive(Debug)]
pub struct Reservation<'a> {
    counter: &'a MemoryCounter,
    elements: usize,
}

impl Drop for Reservation<'_> {
    fn drop(&mut self) {
        self.counter
            .current
            .fetch_sub(self.elements, Ordering::SeqCst);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Backward,
}

/// Inputs read in forward or reversed token order without copying.
#[derive(Clone, Copy)]
struct SeqView<'a> {
    inputs: &'a MixerInputs,
    direction: Direction,
}

impl<'a> SeqView<'a> {
    fn new(inputs: &'a MixerInputs, direction: Direction) -> Self {
        Self { inputs, direction }
    }

    #[inline]
    fn pos(&self, t: usize) -> usize {
        match self.direction {
            Direction::Forward => t,
            Direction::Backward => self.inputs.len() - 1 - t,
        }
    }

    #[inline]
    fn q(&self, t: usize) -> &'a [f64] {
        self.inputs.q.row(self.pos(t))
    }

    #[inline]
    fn k(&self, t: usize) -> &'a [f64] {
        self.inputs.k.row(self.pos(t))
    }

    #[inline]
    fn v(&self, t: usize) -> &'a [f64] {
        self.inputs.v.row(self.pos(t))
    }

    /// Decay applied to the state when stepping from `t - 1` to `t`: the
    /// decay of the token just left behind.
    #[inline]
    fn step_decay(&self, t: usize) -> f64 {
        self.inputs
            .decay
            .scalar_at(self.pos(t - 1))
            .expect("scalar decay")
    }
}

/// Hidden state of one scan direction.
#[derive(Debug, Clone)]
pub struct RnnState {
    /// `d_k x d_v` key-value state.
    pub s: Matrix,
    /// Key accumulator feeding the scaling denominator.
    pub z: Vec<f64>,
    /// Scaling contribution of the most recent token.
    pub c: f64,
    pub direction: Direction,
}

impl RnnState {
    pub fn new(key_dim: usize, value_dim: usize, direction: Direction) -> Self {
        Self {
            s: Matrix::zeros(key_dim, value_dim),
            z: vec![0.0; key_dim],
            c: 0.0,
            direction,
        }
    }

    pub fn elements(&self) -> usize {
        self.s.len() + self.z.len()
    }

    /// Advances by one token and adds `y_t = qᵀS - ½(q·k)v` into `y`.
    ///
    /// `decay` scales `S`; `z` is scaled too unless `decay_z` is false.
    fn step(&mut self, q: &[f64], k: &[f64], v: &[f64], decay: f64, decay_z: bool, y: &mut [f64]) {
        if decay != 1.0 {
            self.s.as_mut_slice().iter_mut().for_each(|x| *x *= decay);
            if decay_z {
                self.z.iter_mut().for_each(|x| *x *= decay);
            }
        }
        for (p, &kp) in k.iter().enumerate() {
            for (s, &vf) in self.s.row_mut(p).iter_mut().zip(v) {
                *s += kp * vf;
            }
            self.z[p] += kp;
        }
        let qk = dot(q, k);
        let half = 0.5 * qk;
        for (f, out) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (p, &qp) in q.iter().enumerate() {
                acc += qp * self.s.get(p, f);
            }
            *out += acc - half * v[f];
        }
        self.c = dot(q, &self.z) - half;
    }
}

/// Accumulator for one output chunk, living in the output rows themselves.
pub struct ChunkState<'a> {
    /// `C x d_v` accumulated (unnormalized) outputs.
    pub s: &'a mut [f64],
    /// Accumulated masked row sums.
    pub cacc: &'a mut [f64],
    /// Accumulated unmasked row sums.
    pub cacc_unmasked: &'a mut [f64],
}

impl ChunkState<'_> {
    /// Adds `A · V_chunk` and the row sums of `A` (`rows x C`).
    fn accumulate(&mut self, scores: &[f64], v: &Matrix, col0: usize, width: usize) {
        let dv = v.cols();
        for ((row_scores, out), acc) in scores
            .chunks(width)
            .zip(self.s.chunks_mut(dv))
            .zip(self.cacc.iter_mut())
        {
            for (c, &a) in row_scores.iter().enumerate() {
                for (o, &vf) in out.iter_mut().zip(v.row(col0 + c)) {
                    *o += a * vf;
                }
            }
            for &a in row_scores {
                *acc += a;
            }
        }
    }
}

fn require_scalar(inputs: &MixerInputs, form: &str) -> Result<()> {
    if inputs.decay.is_scalar() {
        Ok(())
    } else {
        Err(LionError::Unsupported(format!(
            "{form} needs scalar decay; use the diagonal forms"
        )))
    }
}

fn require_diagonal(inputs: &MixerInputs) -> Result<&Matrix> {
    match &inputs.decay {
        DecaySpec::SelectiveDiagonal(d) if d.cols() == inputs.key_dim() => Ok(d),
        DecaySpec::SelectiveDiagonal(d) => Err(LionError::shape(format!(
            "diagonal decay has {} channels, keys have {}",
            d.cols(),
            inputs.key_dim()
        ))),
        _ => Err(LionError::Unsupported(
            "diagonal forms need SelectiveDiagonal decay".into(),
        )),
    }
}

/// Divides each of the first `rows` output rows by its scaling divisor.
fn normalize(
    out: &mut Matrix,
    rows: usize,
    masked: &[f64],
    unmasked: &[f64],
    mode: ScalingMode,
) -> Result<()> {
    for i in 0..rows {
        let denom = if mode == ScalingMode::SumUnmasked {
            unmasked[i]
        } else {
            masked[i]
        };
        if let Some(div) = mode.divisor(i, denom)? {
            out.row_mut(i).iter_mut().for_each(|x| *x /= div);
        }
    }
    Ok(())
}

/// Dense form, `Y = scale(QKᵀ ⊙ M) V`.
///
/// Denominators are taken after masking (`c_i = Σ_j (q_i·k_j) M_ij`), except
/// under [`ScalingMode::SumUnmasked`]. Working set: the score matrix plus the
/// dense mask, `2L²` elements.
pub fn full_attention(
    inputs: &MixerInputs,
    mask: &BidirectionalMask,
    mode: ScalingMode,
    ctr: &MemoryCounter,
) -> Result<Matrix> {
    inputs.validate()?;
    let len = inputs.len();
    if mask.len() != len {
        return Err(LionError::shape(format!(
            "mask is {0}x{0}, inputs have {len} tokens",
            mask.len()
        )));
    }
    let _mem = ctr.reserve(2 * len * len);
    let mut scores = matmul_transposed(&inputs.q, &inputs.k)?;
    let unmasked: Vec<f64> = if mode == ScalingMode::SumUnmasked {
        (0..len).map(|i| row_sum(scores.row(i))).collect()
    } else {
        Vec::new()
    };
    for (a, &m) in scores.as_mut_slice().iter_mut().zip(mask.m.as_slice()) {
        *a *= m;
    }
    let masked: Vec<f64> = (0..len).map(|i| row_sum(scores.row(i))).collect();
    let mut y = matmul(&scores, &inputs.v)?;
    normalize(&mut y, len, &masked, &unmasked, mode)?;
    Ok(y)
}

#[inline]
fn row_sum(row: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &x in row {
        acc += x;
    }
    acc
}

/// Two linear recurrences, one per direction, combined per token.
///
/// The backward pass is the forward kernel run over the reversed sequence.
/// Each direction keeps a `d_k x d_v` state and a `d_k` key accumulator, and
/// only one direction is live at a time, so the working set does not depend
/// on the sequence length.
pub fn bidirectional_rnn(
    inputs: &MixerInputs,
    mode: ScalingMode,
    ctr: &MemoryCounter,
) -> Result<Matrix> {
    inputs.validate()?;
    require_scalar(inputs, "bidirectional_rnn")?;
    let len = inputs.len();
    let mut out = Matrix::zeros(len, inputs.value_dim());
    let mut scale = vec![0.0; len];
    let decay_z = mode != ScalingMode::SumUnmasked;
    for direction in [Direction::Forward, Direction::Backward] {
        let view = SeqView::new(inputs, direction);
        let mut state = RnnState::new(inputs.key_dim(), inputs.value_dim(), direction);
        let _mem = ctr.reserve(state.elements());
        for t in 0..len {
            let decay = if t == 0 { 1.0 } else { view.step_decay(t) };
            let pos = view.pos(t);
            state.step(
                view.q(t),
                view.k(t),
                view.v(t),
                decay,
                decay_z,
                out.row_mut(pos),
            );
            scale[pos] += state.c;
        }
    }
    // Both scaling modes read the same combined c^F + c^B.
    normalize(&mut out, len, &scale, &scale, mode)?;
    Ok(out)
}

/// Output rows, masked sums, unmasked sums and scratch for one output chunk.
type ChunkSlices<'a> = (
    usize,
    (
        ((&'a mut [f64], &'a mut [f64]), &'a mut [f64]),
        &'a mut [f64],
    ),
);

/// Zero-padded copy of `m` with `rows` rows.
fn pad_rows(m: &Matrix, rows: usize) -> Matrix {
    if rows == m.rows() {
        return m.clone();
    }
    let mut data = m.as_slice().to_vec();
    data.resize(rows * m.cols(), 0.0);
    Matrix::new(rows, m.cols(), data).expect("padded shape")
}

struct Padded {
    inputs: MixerInputs,
    masker: ChunkMasker,
}

fn pad_for_chunks(inputs: &MixerInputs, chunk: usize) -> Result<Padded> {
    if chunk == 0 {
        return Err(LionError::shape("chunk size must be at least 1"));
    }
    inputs.validate()?;
    require_scalar(inputs, "chunked forms")?;
    let len = inputs.len();
    let padded = padded_len(len, chunk);
    let padded_inputs = MixerInputs {
        q: pad_rows(&inputs.q, padded),
        k: pad_rows(&inputs.k, padded),
        v: pad_rows(&inputs.v, padded),
        decay: pad_decay(&inputs.decay, len, padded),
        gates: None,
    };
    let masker = ChunkMasker::new(&padded_inputs.decay, padded, chunk)?;
    Ok(Padded {
        inputs: padded_inputs,
        masker,
    })
}

fn finish(
    mut out: Matrix,
    len: usize,
    masked: &[f64],
    unmasked: &[f64],
    mode: ScalingMode,
) -> Result<Matrix> {
    normalize(&mut out, len, masked, unmasked, mode)?;
    Ok(if out.rows() == len {
        out
    } else {
        out.row_block(0, len)
    })
}

/// Scores `(q_r · k_c) · mask` for rows `rows` against key chunk `j`, written
/// over `mask` in place. Unmasked row sums are added to `unmasked` when given.
fn masked_scores(
    inputs: &MixerInputs,
    rows: std::ops::Range<usize>,
    j: usize,
    chunk: usize,
    mask_then_scores: &mut [f64],
    unmasked: Option<&mut [f64]>,
) {
    let cols = j * chunk..(j + 1) * chunk;
    let mut unmasked = unmasked;
    for (i, (r, row)) in rows.zip(mask_then_scores.chunks_mut(chunk)).enumerate() {
        let q = inputs.q.row(r);
        let mut raw_sum = 0.0;
        for (c, m) in cols.clone().zip(row.iter_mut()) {
            let s = dot(q, inputs.k.row(c));
            raw_sum += s;
            *m *= s;
        }
        if let Some(u) = unmasked.as_deref_mut() {
            u[i] += raw_sum;
        }
    }
}

/// Block form: for each output chunk `i`, accumulates
/// `A_[ij] = Q_[i] K_[j]ᵀ ⊙ M_[ij]` times `V_[j]` over key chunks `j`.
///
/// Output chunks are independent and run in parallel; within one output
/// chunk the accumulation over `j` is sequential. Every output chunk owns a
/// `C x C` mask block and a `C x C` score block, so the working set of the
/// fully parallel schedule is `2·L·C` elements (with `L` rounded up to a
/// multiple of `C`).
pub fn chunkwise(
    inputs: &MixerInputs,
    chunk: usize,
    mode: ScalingMode,
    ctr: &MemoryCounter,
) -> Result<Matrix> {
    let Padded {
        inputs: padded,
        masker,
    } = pad_for_chunks(inputs, chunk)?;
    let len = inputs.len();
    let plen = padded.len();
    let chunks = masker.chunks();
    let dv = padded.value_dim();
    let block = chunk * chunk;
    let need_unmasked = mode == ScalingMode::SumUnmasked;

    let mut out = Matrix::zeros(plen, dv);
    let mut cacc = vec![0.0; plen];
    let mut cacc_unmasked = vec![0.0; plen];
    let _mem = ctr.reserve(chunks * 2 * block);
    let mut scratch = vec![0.0; chunks * 2 * block];

    let work = |(i, (((s, cacc), cacc_u), scratch)): ChunkSlices<'_>| {
        let (mask_block, score_block) = scratch.split_at_mut(block);
        let rows = i * chunk..(i + 1) * chunk;
        let mut state = ChunkState {
            s,
            cacc,
            cacc_unmasked: cacc_u,
        };
        for j in 0..chunks {
            masker.fill(rows.clone(), j, mask_block);
            score_block.copy_from_slice(mask_block);
            let unmasked = need_unmasked.then_some(&mut *state.cacc_unmasked);
            masked_scores(&padded, rows.clone(), j, chunk, score_block, unmasked);
            state.accumulate(score_block, &padded.v, j * chunk, chunk);
        }
    };

    let parallel = chunks > 1 && plen * plen * padded.key_dim() >= PARALLEL_THRESHOLD;
    if parallel {
        out.as_mut_slice()
            .par_chunks_mut(chunk * dv)
            .zip(cacc.par_chunks_mut(chunk))
            .zip(cacc_unmasked.par_chunks_mut(chunk))
            .zip(scratch.par_chunks_mut(2 * block))
            .enumerate()
            .for_each(work);
    } else {
        out.as_mut_slice()
            .chunks_mut(chunk * dv)
            .zip(cacc.chunks_mut(chunk))
            .zip(cacc_unmasked.chunks_mut(chunk))
            .zip(scratch.chunks_mut(2 * block))
            .enumerate()
            .for_each(work);
    }
    finish(out, len, &cacc, &cacc_unmasked, mode)
}

/// Slab form: for each key chunk `j`, scores every output row against that
/// chunk at once. The mask slice for the `L x C` slab is written into the
/// slab and overwritten by the masked scores, so the per-step working set is
/// `L·C` elements.
pub fn parallel_chunkwise(
    inputs: &MixerInputs,
    chunk: usize,
    mode: ScalingMode,
    ctr: &MemoryCounter,
) -> Result<Matrix> {
    let Padded {
        inputs: padded,
        masker,
    } = pad_for_chunks(inputs, chunk)?;
    let len = inputs.len();
    let plen = padded.len();
    let chunks = masker.chunks();
    let dv = padded.value_dim();
    let need_unmasked = mode == ScalingMode::SumUnmasked;

    let mut out = Matrix::zeros(plen, dv);
    let mut cacc = vec![0.0; plen];
    let mut cacc_unmasked = vec![0.0; plen];
    let parallel = chunks > 1 && plen * plen * padded.key_dim() >= PARALLEL_THRESHOLD;

    for j in 0..chunks {
        let _mem = ctr.reserve(plen * chunk);
        let mut slab = vec![0.0; plen * chunk];
        let step = |(i, (((s, cacc), cacc_u), slab)): ChunkSlices<'_>| {
            let rows = i * chunk..(i + 1) * chunk;
            masker.fill(rows.clone(), j, slab);
            let unmasked = need_unmasked.then_some(&mut *cacc_u);
            masked_scores(&padded, rows, j, chunk, slab, unmasked);
            let mut state = ChunkState {
                s,
                cacc,
                cacc_unmasked: &mut [],
            };
            state.accumulate(slab, &padded.v, j * chunk, chunk);
        };
        if parallel {
            out.as_mut_slice()
                .par_chunks_mut(chunk * dv)
                .zip(cacc.par_chunks_mut(chunk))
                .zip(cacc_unmasked.par_chunks_mut(chunk))
                .zip(slab.par_chunks_mut(chunk * chunk))
                .enumerate()
                .for_each(step);
        } else {
            out.as_mut_slice()
                .chunks_mut(chunk * dv)
                .zip(cacc.chunks_mut(chunk))
                .zip(cacc_unmasked.chunks_mut(chunk))
                .zip(slab.chunks_mut(chunk * chunk))
                .enumerate()
                .for_each(step);
        }
    }
    finish(out, len, &cacc, &cacc_unmasked, mode)
}

/// Row `r - 1` of `m`, or ones for `r == 0`.
fn shifted_row(m: &Matrix, r: usize) -> Vec<f64> {
    if r == 0 {
        vec![1.0; m.cols()]
    } else {
        m.row(r - 1).to_vec()
    }
}

fn scale_rows_by(x: &Matrix, factor: impl Fn(usize) -> Vec<f64>) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let f = factor(r);
        for (o, s) in out.row_mut(r).iter_mut().zip(f) {
            *o *= s;
        }
    }
    out
}

/// Dense form with per-channel decay (unscaled):
///
/// `Y = (Tril[(Q⊙Lᶠ)(K⊙Uᶠ)ᵀ] + Triu[(Q⊙Lᴮ)(K⊙Uᴮ)ᵀ] - Diag(QKᵀ)) V`
///
/// where the factors are the cumulative products shifted by one position,
/// so that entry `(i, j)` carries exactly the decays strictly between the
/// two tokens on the side of the later one.
pub fn diagonal_attention(inputs: &MixerInputs, factors: &CumulativeFactors) -> Result<Matrix> {
    inputs.validate()?;
    let d = require_diagonal(inputs)?;
    let len = inputs.len();
    if factors.lf.shape() != d.shape() || factors.lb.shape() != d.shape() {
        return Err(LionError::shape(
            "cumulative factors do not match the decay shape",
        ));
    }
    let q_f = scale_rows_by(&inputs.q, |r| shifted_row(&factors.lf, r));
    let k_f = scale_rows_by(&inputs.k, |c| shifted_row(&factors.uf, c));
    // Reversed-order row m = L-1-r; its predecessor in reversed order is m-1 = L-2-r.
    let q_b = scale_rows_by(&inputs.q, |r| shifted_row(&factors.lb, len - 1 - r));
    let k_b = scale_rows_by(&inputs.k, |c| shifted_row(&factors.ub, len - 1 - c));
    let lower = tril(&matmul_transposed(&q_f, &k_f)?, 0)?;
    let upper = triu(&matmul_transposed(&q_b, &k_b)?, 0)?;
    let diag = Matrix::from_fn(len, len, |i, j| {
        if i == j {
            dot(inputs.q.row(i), inputs.k.row(i))
        } else {
            0.0
        }
    });
    let scores = lower.add(&upper)?.sub(&diag)?;
    matmul(&scores, &inputs.v)
}

/// Recurrent form with per-channel decay (unscaled): row `p` of each
/// direction's state is scaled by the channel-`p` decay of the token just
/// left behind.
pub fn diagonal_bidirectional_rnn(inputs: &MixerInputs) -> Result<Matrix> {
    inputs.validate()?;
    let d = require_diagonal(inputs)?;
    let len = inputs.len();
    let mut out = Matrix::zeros(len, inputs.value_dim());
    for direction in [Direction::Forward, Direction::Backward] {
        let view = SeqView::new(inputs, direction);
        let mut state = RnnState::new(inputs.key_dim(), inputs.value_dim(), direction);
        for t in 0..len {
            if t > 0 {
                let prev = view.pos(t - 1);
                for p in 0..inputs.key_dim() {
                    let lambda = d.get(prev, p);
                    state.s.row_mut(p).iter_mut().for_each(|x| *x *= lambda);
                }
            }
            let pos = view.pos(t);
            state.step(
                view.q(t),
                view.k(t),
                view.v(t),
                1.0,
                false,
                out.row_mut(pos),
            );
        }
    }
    Ok(out)
}

/// Sum of two independent causal linear-attention passes, without any
/// diagonal correction. Equals `((I + 1) ⊙ QKᵀ) V`: the diagonal is counted
/// twice.
pub fn naive_two_pass(inputs: &MixerInputs) -> Result<Matrix> {
    inputs.validate()?;
    if inputs.decay != DecaySpec::NoDecay {
        return Err(LionError::Unsupported(
            "the two-pass baseline is defined without decay".into(),
        ));
    }
    let (len, dk, dv) = (inputs.len(), inputs.key_dim(), inputs.value_dim());
    let mut out = Matrix::zeros(len, dv);
    for direction in [Direction::Forward, Direction::Backward] {
        let view = SeqView::new(inputs, direction);
        let mut s = Matrix::zeros(dk, dv);
        for t in 0..len {
            let (q, k, v) = (view.q(t), view.k(t), view.v(t));
            for (p, &kp) in k.iter().enumerate() {
                for (x, &vf) in s.row_mut(p).iter_mut().zip(v) {
                    *x += kp * vf;
                }
            }
            let y = out.row_mut(view.pos(t));
            for (f, o) in y.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (p, &qp) in q.iter().enumerate() {
                    acc += qp * s.get(p, f);
                }
                *o += acc;
            }
        }
    }
    Ok(out)
}

/// The four interchangeable scalar-decay forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Form {
    Attention,
    Rnn,
    Chunk,
    ParallelChunk,
}

impl Form {
    pub const ALL: [Form; 4] = [Form::Attention, Form::Rnn, Form::Chunk, Form::ParallelChunk];

    pub fn name(self) -> &'static str {
        match self {
            Form::Attention => "attention",
            Form::Rnn => "rnn",
            Form::Chunk => "chunk",
            Form::ParallelChunk => "parallel-chunk",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn uses_chunks(self) -> bool {
        matches!(self, Form::Chunk | Form::ParallelChunk)
    }

    /// Runs this form; the attention form builds its dense mask first.
    pub fn run(
        self,
        inputs: &MixerInputs,
        chunk: usize,
        mode: ScalingMode,
        ctr: &MemoryCounter,
    ) -> Result<Matrix> {
        match self {
            Form::Attention => {
                let mask = crate::masks::build_mask(&inputs.decay, inputs.len())?;
                full_attention(inputs, &mask, mode, ctr)
            }
            Form::Rnn => bidirectional_rnn(inputs, mode, ctr),
            Form::Chunk => chunkwise(inputs, chunk, mode, ctr),
            Form::ParallelChunk => parallel_chunkwise(inputs, chunk, mode, ctr),
        }
    }
}

impl std::fmt::Display for Form {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{build_mask, diagonal_cum_factors};
    use crate::numerics::{max_rel_err, Vector};
    use crate::oracle::{reference_diagonal_output, reference_mask, reference_output};
    use crate::projections::{feature_map_silu, project, seeded_fixture, ZooConfig, ZooModel};
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn positive_rows(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix {
        let raw = random_matrix(rng, rows, cols);
        let mut out = raw.clone();
        for i in 0..rows {
            out.row_mut(i)
                .copy_from_slice(&feature_map_silu(raw.row(i)));
        }
        out
    }

    fn inputs(seed: u64, len: usize, d: usize, decay: DecaySpec) -> MixerInputs {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let q = positive_rows(&mut rng, len, d);
        let k = positive_rows(&mut rng, len, d);
        let v = random_matrix(&mut rng, len, d);
        MixerInputs::new(q, k, v, decay).unwrap()
    }

    fn selective(seed: u64, len: usize, lo: f64, hi: f64) -> DecaySpec {
        let mut rng = SplitMix64::seed_from_u64(seed ^ 0xdeca);
        DecaySpec::SelectiveScalar(
            Vector::new((0..len).map(|_| rng.random_range(lo..=hi)).collect()).unwrap(),
        )
    }

    fn oracle(inputs: &MixerInputs, mode: ScalingMode) -> Matrix {
        let m = reference_mask(&inputs.decay, inputs.len());
        reference_output(&inputs.q, &inputs.k, &inputs.v, &m, mode).unwrap()
    }

    fn attention(inputs: &MixerInputs, mode: ScalingMode) -> Matrix {
        let mask = build_mask(&inputs.decay, inputs.len()).unwrap();
        full_attention(inputs, &mask, mode, &MemoryCounter::new()).unwrap()
    }

    fn rnn(inputs: &MixerInputs, mode: ScalingMode) -> Matrix {
        bidirectional_rnn(inputs, mode, &MemoryCounter::new()).unwrap()
    }

    #[test]
    fn counter_tracks_peak() {
        let ctr = MemoryCounter::new();
        {
            let _a = ctr.reserve(10);
            {
                let _b = ctr.reserve(5);
                assert_eq!(ctr.current(), 15);
            }
            assert_eq!(ctr.current(), 10);
        }
        assert_eq!(ctr.current(), 0);
        assert_eq!(ctr.peak_aux_elements(), 15);
        let other = MemoryCounter::new();
        drop(other.reserve(40));
        ctr.merge_max(&other);
        assert_eq!(ctr.peak_aux_elements(), 40);
    }

    #[test]
    fn single_token_normalizes_to_value() {
        let x = inputs(1, 1, 3, DecaySpec::NoDecay);
        for y in [attention(&x, ScalingMode::Sum), rnn(&x, ScalingMode::Sum)] {
            assert!(max_rel_err(&y, &x.v) < 1e-14);
        }
    }

    #[test]
    fn uniform_attention_gives_column_mean() {
        let len = 5;
        let q = Matrix::filled(len, 2, 0.5);
        let k = Matrix::filled(len, 2, 0.5);
        let v = Matrix::from_fn(len, 3, |i, j| (i * 3 + j) as f64);
        let x = MixerInputs::new(q, k, v.clone(), DecaySpec::NoDecay).unwrap();
        let y = attention(&x, ScalingMode::Sum);
        for f in 0..3 {
            let mean: f64 = (0..len).map(|i| v.get(i, f)).sum::<f64>() / len as f64;
            for i in 0..len {
                assert!((y.get(i, f) - mean).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn attention_matches_oracle_all_modes() {
        for (seed, decay) in [
            (1, DecaySpec::NoDecay),
            (2, DecaySpec::FixedScalar(0.7)),
            (3, selective(3, 8, 0.5, 1.0)),
        ] {
            let x = inputs(seed, 8, 4, decay);
            for mode in ScalingMode::ALL {
                assert!(max_rel_err(&attention(&x, mode), &oracle(&x, mode)) < 1e-12);
            }
        }
    }

    #[test]
    fn rnn_single_token_unscaled_is_qk_v() {
        let x = inputs(4, 1, 4, DecaySpec::NoDecay);
        let qk = dot(x.q.row(0), x.k.row(0));
        let y = rnn(&x, ScalingMode::None);
        for f in 0..4 {
            assert!((y.get(0, f) - qk * x.v.get(0, f)).abs() < 1e-15);
        }
    }

    #[test]
    fn rnn_matches_attention() {
        let x = inputs(5, 7, 4, DecaySpec::NoDecay);
        assert!(max_rel_err(&rnn(&x, ScalingMode::Sum), &attention(&x, ScalingMode::Sum)) < 1e-12);
        let x = inputs(6, 5, 4, DecaySpec::SelectiveScalar(Vector::filled(5, 0.98)));
        assert!(max_rel_err(&rnn(&x, ScalingMode::Sum), &attention(&x, ScalingMode::Sum)) < 1e-12);
        let x = inputs(7, 9, 3, selective(7, 9, 0.3, 1.0));
        for mode in ScalingMode::ALL {
            assert!(
                max_rel_err(&rnn(&x, mode), &oracle(&x, mode)) < 1e-12,
                "{mode}"
            );
        }
    }

    /// Backward scan written directly as a reverse iteration, as a second
    /// witness for the flip-and-reuse implementation.
    #[test]
    fn backward_pass_matches_direct_reverse_iteration() {
        let len = 6;
        let x = inputs(8, len, 3, selective(8, len, 0.4, 1.0));
        let lambdas = x.decay.scalar_decays(len).unwrap();
        let mut s = Matrix::zeros(3, 3);
        let mut yb = Matrix::zeros(len, 3);
        for i in (0..len).rev() {
            if i + 1 < len {
                s = s.map(|v| v * lambdas[i + 1]);
            }
            for p in 0..3 {
                for f in 0..3 {
                    s.set(p, f, s.get(p, f) + x.k.get(i, p) * x.v.get(i, f));
                }
            }
            let qk = dot(x.q.row(i), x.k.row(i));
            for f in 0..3 {
                let qs: f64 = (0..3).map(|p| x.q.get(i, p) * s.get(p, f)).sum();
                yb.set(i, f, qs - 0.5 * qk * x.v.get(i, f));
            }
        }
        // Pair it with a direct forward scan and compare the sum.
        let mut s = Matrix::zeros(3, 3);
        let mut yf = Matrix::zeros(len, 3);
        for i in 0..len {
            if i > 0 {
                s = s.map(|v| v * lambdas[i - 1]);
            }
            for p in 0..3 {
                for f in 0..3 {
                    s.set(p, f, s.get(p, f) + x.k.get(i, p) * x.v.get(i, f));
                }
            }
            let qk = dot(x.q.row(i), x.k.row(i));
            for f in 0..3 {
                let qs: f64 = (0..3).map(|p| x.q.get(i, p) * s.get(p, f)).sum();
                yf.set(i, f, qs - 0.5 * qk * x.v.get(i, f));
            }
        }
        let expected = yf.add(&yb).unwrap();
        assert!(max_rel_err(&rnn(&x, ScalingMode::None), &expected) < 1e-13);
    }

    #[test]
    fn rnn_rejects_diagonal_and_degenerate_rows() {
        let d = Matrix::filled(3, 2, 0.9);
        let x = inputs(9, 3, 2, DecaySpec::SelectiveDiagonal(d));
        assert!(matches!(
            bidirectional_rnn(&x, ScalingMode::None, &MemoryCounter::new()),
            Err(LionError::Unsupported(_))
        ));
        let q = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let k = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        let x = MixerInputs::new(q, k, Matrix::ones(1, 2), DecaySpec::NoDecay).unwrap();
        assert!(matches!(
            bidirectional_rnn(&x, ScalingMode::Sum, &MemoryCounter::new()),
            Err(LionError::DegenerateRow { row: 0, .. })
        ));
    }

    #[test]
    fn single_chunk_is_bitwise_attention() {
        for (seed, decay) in [
            (10, DecaySpec::NoDecay),
            (11, DecaySpec::FixedScalar(0.8)),
            (12, selective(12, 12, 0.5, 1.0)),
        ] {
            let x = inputs(seed, 12, 4, decay);
            for mode in ScalingMode::ALL {
                let full = attention(&x, mode);
                let ctr = MemoryCounter::new();
                assert_eq!(chunkwise(&x, 12, mode, &ctr).unwrap(), full);
                assert_eq!(parallel_chunkwise(&x, 12, mode, &ctr).unwrap(), full);
            }
        }
    }

    #[test]
    fn chunk_sizes_agree_with_attention() {
        let x = inputs(13, 8, 4, DecaySpec::FixedScalar(0.5));
        let full = attention(&x, ScalingMode::Sum);
        for chunk in [1, 2, 3, 4, 5, 8, 11] {
            let ctr = MemoryCounter::new();
            let y = chunkwise(&x, chunk, ScalingMode::Sum, &ctr).unwrap();
            assert!(max_rel_err(&y, &full) <= 1e-10, "chunk {chunk}");
        }
        let x = inputs(14, 16, 4, selective(14, 16, 0.5, 1.0));
        for mode in ScalingMode::ALL {
            let ctr = MemoryCounter::new();
            let a = chunkwise(&x, 4, mode, &ctr).unwrap();
            let b = parallel_chunkwise(&x, 4, mode, &ctr).unwrap();
            assert!(max_rel_err(&b, &a) <= 1e-12);
            assert!(max_rel_err(&a, &oracle(&x, mode)) <= 1e-12);
        }
    }

    #[test]
    fn chunk_memory_figures() {
        let x = inputs(15, 16, 4, selective(15, 16, 0.5, 1.0));
        let ctr = MemoryCounter::new();
        parallel_chunkwise(&x, 4, ScalingMode::Sum, &ctr).unwrap();
        assert_eq!(ctr.peak_aux_elements(), 16 * 4);
        let ctr = MemoryCounter::new();
        chunkwise(&x, 4, ScalingMode::Sum, &ctr).unwrap();
        assert_eq!(ctr.peak_aux_elements(), 2 * 16 * 4);
        assert_eq!(ctr.current(), 0);
        assert!(matches!(
            chunkwise(&x, 0, ScalingMode::Sum, &ctr),
            Err(LionError::Shape(_))
        ));
    }

    #[test]
    fn diagonal_forms_agree() {
        let len = 8;
        let mut rng = SplitMix64::seed_from_u64(16);
        let d = Matrix::from_fn(len, 4, |_, _| rng.random_range(0.9..=1.0));
        let x = inputs(16, len, 4, DecaySpec::SelectiveDiagonal(d.clone()));
        let f = diagonal_cum_factors(&d).unwrap();
        let a = diagonal_attention(&x, &f).unwrap();
        let r = diagonal_bidirectional_rnn(&x).unwrap();
        let o = reference_diagonal_output(&x.q, &x.k, &x.v, &d).unwrap();
        assert!(max_rel_err(&a, &r) < 1e-10);
        assert!(max_rel_err(&r, &o) < 1e-12);
    }

    #[test]
    fn diagonal_without_decay_is_plain_attention() {
        let x = inputs(17, 6, 3, DecaySpec::SelectiveDiagonal(Matrix::ones(6, 3)));
        let f = diagonal_cum_factors(&Matrix::ones(6, 3)).unwrap();
        let plain = inputs(17, 6, 3, DecaySpec::NoDecay);
        let expected = attention(&plain, ScalingMode::None);
        assert!(max_rel_err(&diagonal_attention(&x, &f).unwrap(), &expected) < 1e-12);
        assert!(
            max_rel_err(
                &diagonal_bidirectional_rnn(&x).unwrap(),
                &rnn(&plain, ScalingMode::None)
            ) < 1e-12
        );
    }

    #[test]
    fn single_channel_diagonal_is_scalar_selective() {
        let len = 7;
        let decay = selective(18, len, 0.5, 1.0);
        let lambdas = decay.scalar_decays(len).unwrap();
        let scalar = inputs(18, len, 1, decay);
        let diag = MixerInputs::new(
            scalar.q.clone(),
            scalar.k.clone(),
            scalar.v.clone(),
            DecaySpec::SelectiveDiagonal(lambdas.to_column()),
        )
        .unwrap();
        let f = diagonal_cum_factors(&lambdas.to_column()).unwrap();
        let expected = attention(&scalar, ScalingMode::None);
        assert!(max_rel_err(&diagonal_attention(&diag, &f).unwrap(), &expected) < 1e-10);
    }

    #[test]
    fn diagonal_single_token() {
        let x = inputs(
            19,
            1,
            3,
            DecaySpec::SelectiveDiagonal(Matrix::filled(1, 3, 0.7)),
        );
        let qk = dot(x.q.row(0), x.k.row(0));
        let y = diagonal_bidirectional_rnn(&x).unwrap();
        for f in 0..3 {
            assert!((y.get(0, f) - qk * x.v.get(0, f)).abs() < 1e-15);
        }
        let scalar = inputs(19, 3, 3, DecaySpec::NoDecay);
        assert!(diagonal_bidirectional_rnn(&scalar).is_err());
    }

    #[test]
    fn naive_two_pass_double_counts_diagonal() {
        let q = Matrix::from_rows(&[[1.0], [1.0]]).unwrap();
        let k = Matrix::from_rows(&[[1.0], [1.0]]).unwrap();
        let v = Matrix::from_rows(&[[1.0], [0.0]]).unwrap();
        let x = MixerInputs::new(q, k, v, DecaySpec::NoDecay).unwrap();
        assert_eq!(
            naive_two_pass(&x).unwrap(),
            Matrix::from_rows(&[[2.0], [1.0]]).unwrap()
        );
        let zero_v = MixerInputs::new(
            x.q.clone(),
            x.k.clone(),
            Matrix::zeros(2, 1),
            DecaySpec::NoDecay,
        )
        .unwrap();
        assert_eq!(naive_two_pass(&zero_v).unwrap(), Matrix::zeros(2, 1));
        let decayed = inputs(20, 3, 2, DecaySpec::FixedScalar(0.5));
        assert!(naive_two_pass(&decayed).is_err());
    }

    #[test]
    fn zoo_configs_agree_across_forms() {
        for model in ZooConfig::scalar_models() {
            let cfg = ZooConfig::of(model);
            let (tokens, w) = seeded_fixture(21, 13, 4, &cfg);
            let x = project(&tokens, &w, &cfg).unwrap();
            let reference = oracle(&x, cfg.scaling);
            for form in Form::ALL {
                let y = form.run(&x, 4, cfg.scaling, &MemoryCounter::new()).unwrap();
                assert!(max_rel_err(&y, &reference) < 1e-10, "{model:?} {form}");
            }
        }
        assert_eq!(
            ZooConfig::of(ZooModel::DiagonalDecay).scaling,
            ScalingMode::None
        );
    }

    #[test]
    fn form_names_round_trip() {
        for f in Form::ALL {
            assert_eq!(Form::from_name(f.name()), Some(f));
        }
        assert!(Form::from_name("softmax").is_none());
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn forms_match_oracle(seed in any::<u64>(), len in 1usize..24, d in 1usize..6,
                                  chunk in 1usize..10, lo in 0.05f64..1.0) {
                let x = inputs(seed, len, d, selective(seed, len, lo, 1.0));
                let reference = oracle(&x, ScalingMode::Sum);
                for form in Form::ALL {
                    let y = form.run(&x, chunk, ScalingMode::Sum, &MemoryCounter::new()).unwrap();
                    prop_assert!(max_rel_err(&y, &reference) <= 1e-10, "{form}");
                }
            }

            #[test]
            fn rnn_memory_is_length_free(seed in any::<u64>(), len in 1usize..40, d in 1usize..6) {
                let x = inputs(seed, len, d, DecaySpec::FixedScalar(0.9));
                let ctr = MemoryCounter::new();
                bidirectional_rnn(&x, ScalingMode::Sum, &ctr).unwrap();
                prop_assert_eq!(ctr.peak_aux_elements(), d * d + d);
            }

            #[test]
            fn chunk_memory_sits_between(seed in any::<u64>(), blocks in 1usize..6,
                                         chunk in 2usize..8, d in 1usize..3) {
                let len = blocks * chunk;
                let x = inputs(seed, len, d, DecaySpec::FixedScalar(0.9));
                let peak = |f: Form| {
                    let ctr = MemoryCounter::new();
                    f.run(&x, chunk, ScalingMode::Sum, &ctr).unwrap();
                    ctr.peak_aux_elements()
                };
                prop_assert!(peak(Form::ParallelChunk) <= peak(Form::Chunk));
                prop_assert!(peak(Form::Chunk) <= peak(Form::Attention));
            }

            #[test]
            fn diagonal_forms_match_oracle(seed in any::<u64>(), len in 1usize..16, d in 1usize..5) {
                let mut rng = SplitMix64::seed_from_u64(seed);
                let decays = Matrix::from_fn(len, d, |_, _| rng.random_range(0.2..=1.0));
                let x = inputs(seed, len, d, DecaySpec::SelectiveDiagonal(decays.clone()));
                let f = diagonal_cum_factors(&decays).unwrap();
                let o = reference_diagonal_output(&x.q, &x.k, &x.v, &decays).unwrap();
                prop_assert!(max_rel_err(&diagonal_attention(&x, &f).unwrap(), &o) <= 1e-9);
                prop_assert!(max_rel_err(&diagonal_bidirectional_rnn(&x).unwrap(), &o) <= 1e-12);
            }
        }
    }
}
