//! Brute-force reference implementations.
//!
//! Everything here is evaluated literally, entry by entry: mask entries are
//! explicit products of decays between two positions, and outputs are a
//! triple loop over (row, key, feature). Nothing in this module calls into
//! the mask builders, the mixer forms or the numerics kernels; keep it that
//! way, since every equivalence test leans on this independence.

#![allow(clippy::needless_range_loop)]

use crate::error::{LionError, Result};
use crate::numerics::{Matrix, ScalingMode};
use crate::projections::DecaySpec;

/// Longest sequence the oracle accepts.
pub const MAX_ORACLE_LEN: usize = 64;

fn decay_at(spec: &DecaySpec, k: usize) -> f64 {
    match spec {
        DecaySpec::NoDecay => 1.0,
        DecaySpec::FixedScalar(l) => *l,
        DecaySpec::SelectiveScalar(v) => v.as_slice()[k],
        DecaySpec::SelectiveDiagonal(_) => unreachable!("scalar decay expected"),
    }
}

/// Bidirectional mask by nested products:
/// `M[i][j] = Π_{k=j}^{i-1} λ_k` below the diagonal, `Π_{k=i+1}^{j} λ_k`
/// above it, and 1 on it.
///
/// # Panics
///
/// On `len > MAX_ORACLE_LEN` or a diagonal decay spec.
pub fn reference_mask(spec: &DecaySpec, len: usize) -> Matrix {
    assert!(
        (1..=MAX_ORACLE_LEN).contains(&len),
        "oracle supports 1..={MAX_ORACLE_LEN} positions"
    );
    assert!(
        !matches!(spec, DecaySpec::SelectiveDiagonal(_)),
        "use reference_channel_mask for diagonal decay"
    );
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in 0..len {
            let mut prod = 1.0;
            if i > j {
                for k in j..i {
                    prod *= decay_at(spec, k);
                }
            } else if i < j {
                for k in (i + 1)..=j {
                    prod *= decay_at(spec, k);
                }
            }
            data[i * len + j] = prod;
        }
    }
    Matrix::new(len, len, data).expect("square oracle mask")
}

/// Per-channel mask for diagonal decay: entry `[i][j]` of the returned
/// vector's `p`-th matrix uses column `p` of `decays`.
pub fn reference_channel_masks(decays: &Matrix) -> Vec<Matrix> {
    let len = decays.rows();
    assert!(
        len <= MAX_ORACLE_LEN,
        "oracle supports up to {MAX_ORACLE_LEN} positions"
    );
    (0..decays.cols())
        .map(|p| {
            let mut data = vec![0.0; len * len];
            for i in 0..len {
                for j in 0..len {
                    let mut prod = 1.0;
                    if i > j {
                        for k in j..i {
                            prod *= decays.get(k, p);
                        }
                    } else if i < j {
                        for k in (i + 1)..=j {
                            prod *= decays.get(k, p);
                        }
                    }
                    data[i * len + j] = prod;
                }
            }
            Matrix::new(len, len, data).expect("square oracle mask")
        })
        .collect()
}

/// `y_i = Σ_j (q_i·k_j) M_ij v_j / denominator_i`, computed by a triple loop.
///
/// The denominator is the masked score sum for `Sum`, `max(|masked sum|, 1)`
/// for `MaxOne`, the unmasked score sum for `SumUnmasked`, and 1 for `None`.
pub fn reference_output(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &Matrix,
    mode: ScalingMode,
) -> Result<Matrix> {
    let len = q.rows();
    let dk = q.cols();
    let dv = v.cols();
    if k.rows() != len || v.rows() != len || k.cols() != dk || mask.shape() != (len, len) {
        return Err(LionError::Shape("oracle inputs disagree".into()));
    }
    let mut out = vec![0.0; len * dv];
    for i in 0..len {
        let mut masked = 0.0;
        let mut unmasked = 0.0;
        let mut numer = vec![0.0; dv];
        for j in 0..len {
            let mut s = 0.0;
            for p in 0..dk {
                s += q.get(i, p) * k.get(j, p);
            }
            unmasked += s;
            let a = s * mask.get(i, j);
            masked += a;
            for f in 0..dv {
                numer[f] += a * v.get(j, f);
            }
        }
        let denom = match mode {
            ScalingMode::None => 1.0,
            ScalingMode::Sum => masked,
            ScalingMode::SumUnmasked => unmasked,
            ScalingMode::MaxOne => {
                if masked.abs() > 1.0 {
                    masked.abs()
                } else {
                    1.0
                }
            }
        };
        if denom.abs() < 1e-12 {
            return Err(LionError::DegenerateRow {
                row: i,
                value: denom,
            });
        }
        for f in 0..dv {
            out[i * dv + f] = numer[f] / denom;
        }
    }
    Ok(Matrix::new(len, dv, out).expect("oracle output shape"))
}

/// Unscaled diagonal-decay output:
/// `y_i = Σ_j Σ_p q_ip k_jp M^(p)_ij v_j`.
pub fn reference_diagonal_output(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    decays: &Matrix,
) -> Result<Matrix> {
    let len = q.rows();
    let dk = q.cols();
    let dv = v.cols();
    if decays.shape() != (len, dk) || k.shape() != (len, dk) || v.rows() != len {
        return Err(LionError::Shape("oracle inputs disagree".into()));
    }
    let masks = reference_channel_masks(decays);
    let mut out = vec![0.0; len * dv];
    for i in 0..len {
        for j in 0..len {
            let mut s = 0.0;
            for p in 0..dk {
                s += q.get(i, p) * k.get(j, p) * masks[p].get(i, j);
            }
            for f in 0..dv {
                out[i * dv + f] += s * v.get(j, f);
            }
        }
    }
    Ok(Matrix::new(len, dv, out).expect("oracle output shape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Vector;

    fn approx_eq(a: &Matrix, b: &[&[f64]], tol: f64) {
        for (i, row) in b.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                assert!(
                    (a.get(i, j) - x).abs() <= tol,
                    "entry ({i},{j}): {} vs {x}",
                    a.get(i, j)
                );
            }
        }
    }

    #[test]
    fn no_decay_is_all_ones() {
        assert_eq!(reference_mask(&DecaySpec::NoDecay, 5), Matrix::ones(5, 5));
    }

    #[test]
    fn selective_hand_expansion() {
        let l = Vector::new(vec![0.5, 0.2, 0.1]).unwrap();
        let m = reference_mask(&DecaySpec::SelectiveScalar(l), 3);
        approx_eq(
            &m,
            &[&[1.0, 0.2, 0.02], &[0.5, 1.0, 0.1], &[0.1, 0.2, 1.0]],
            1e-16,
        );
    }

    #[test]
    fn fixed_is_kms() {
        let m = reference_mask(&DecaySpec::FixedScalar(0.5), 3);
        approx_eq(
            &m,
            &[&[1.0, 0.5, 0.25], &[0.5, 1.0, 0.5], &[0.25, 0.5, 1.0]],
            0.0,
        );
    }

    #[test]
    fn single_token_sum_returns_value() {
        let q = Matrix::from_rows(&[[0.3, 0.9]]).unwrap();
        let k = Matrix::from_rows(&[[0.7, 0.2]]).unwrap();
        let v = Matrix::from_rows(&[[1.5, -2.0, 4.0]]).unwrap();
        let y = reference_output(&q, &k, &v, &Matrix::ones(1, 1), ScalingMode::Sum).unwrap();
        approx_eq(&y, &[&[1.5, -2.0, 4.0]], 1e-15);
    }

    #[test]
    fn identity_mask_isolates_self() {
        let q = Matrix::from_fn(4, 3, |i, j| 0.1 + (i * 3 + j) as f64 * 0.05);
        let k = Matrix::from_fn(4, 3, |i, j| 0.2 + (i + j) as f64 * 0.1);
        let v = Matrix::from_fn(4, 2, |i, j| i as f64 - j as f64);
        let y = reference_output(&q, &k, &v, &Matrix::identity(4), ScalingMode::Sum).unwrap();
        for i in 0..4 {
            for f in 0..2 {
                assert!((y.get(i, f) - v.get(i, f)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn all_ones_sum_is_standard_linear_attention() {
        // y_i = q_i^T (Σ_j k_j v_j^T) / q_i^T (Σ_j k_j)
        let q = Matrix::from_fn(5, 3, |i, j| 0.1 + ((i * 7 + j * 3) % 5) as f64 * 0.2);
        let k = Matrix::from_fn(5, 3, |i, j| 0.3 + ((i * 2 + j) % 4) as f64 * 0.1);
        let v = Matrix::from_fn(5, 2, |i, j| (i as f64 - 2.0) * (j as f64 + 1.0));
        let y = reference_output(&q, &k, &v, &Matrix::ones(5, 5), ScalingMode::Sum).unwrap();
        let mut kv = [[0.0; 2]; 3];
        let mut ksum = [0.0; 3];
        for j in 0..5 {
            for p in 0..3 {
                ksum[p] += k.get(j, p);
                for f in 0..2 {
                    kv[p][f] += k.get(j, p) * v.get(j, f);
                }
            }
        }
        for i in 0..5 {
            let den: f64 = (0..3).map(|p| q.get(i, p) * ksum[p]).sum();
            for f in 0..2 {
                let num: f64 = (0..3).map(|p| q.get(i, p) * kv[p][f]).sum();
                assert!((y.get(i, f) - num / den).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn degenerate_denominator_errors() {
        let q = Matrix::from_rows(&[[1.0]]).unwrap();
        let k = Matrix::from_rows(&[[0.0]]).unwrap();
        let v = Matrix::from_rows(&[[1.0]]).unwrap();
        assert!(matches!(
            reference_output(&q, &k, &v, &Matrix::ones(1, 1), ScalingMode::Sum),
            Err(LionError::DegenerateRow { row: 0, .. })
        ));
    }

    #[test]
    #[should_panic]
    fn refuses_long_sequences() {
        reference_mask(&DecaySpec::NoDecay, MAX_ORACLE_LEN + 1);
    }
}
