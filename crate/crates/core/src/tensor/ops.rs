use ndarray::Axis;

use super::{dims, ensure_finite, Mask, NumArray, Result, TensorError};

/// Probability floor applied before taking a logarithm in the loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Logits beyond this magnitude saturate the sigmoid. Keeps the output
/// strictly inside (0, 1) in double precision.
pub(crate) const SIGMOID_CLAMP: f64 = 30.0;

pub fn matmul(a: &NumArray, b: &NumArray) -> Result<NumArray> {
    if a.ncols() != b.nrows() {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: dims(a),
            right: dims(b),
        });
    }
    let out = a.dot(b);
    ensure_finite("matmul", &out)?;
    Ok(out)
}

/// Row-wise softmax. Masked-out entries (`false`) are exactly zero.
pub fn softmax_rows(x: &NumArray, mask: Option<&Mask>) -> Result<NumArray> {
    if let Some(m) = mask {
        if m.dim() != x.dim() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax",
                left: dims(x),
                right: m.dim(),
            });
        }
    }
    ensure_finite("softmax", x)?;
    let mut out = NumArray::zeros(x.dim());
    for (r, (row, mut out_row)) in x
        .axis_iter(Axis(0))
        .zip(out.axis_iter_mut(Axis(0)))
        .enumerate()
    {
        let keep = |c: usize| mask.is_none_or(|m| m[[r, c]]);
        let max = row
            .iter()
            .enumerate()
            .filter(|(c, _)| keep(*c))
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(TensorError::FullyMasked { row: r });
        }
        let mut total = 0.0;
        for (c, v) in row.iter().enumerate() {
            if keep(c) {
                let e = (v - max).exp();
                out_row[c] = e;
                total += e;
            }
        }
        out_row.mapv_inplace(|e| e / total);
    }
    Ok(out)
}

/// Softmax of a single vector, optionally masked.
pub fn softmax(x: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let row = NumArray::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape");
    let mask = mask
        .map(|m| {
            Mask::from_shape_vec((1, m.len()), m.to_vec()).map_err(|_| TensorError::ShapeMismatch {
                op: "softmax",
                left: (1, x.len()),
                right: (1, m.len()),
            })
        })
        .transpose()?;
    Ok(softmax_rows(&row, mask.as_ref())?
        .into_raw_vec_and_offset()
        .0)
}

pub fn sigmoid(x: f64) -> f64 {
    let x = x.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-ln(max(p[gold], 1e-12))` for a probability vector `p`.
pub fn cross_entropy(p: &[f64], gold: usize) -> Result<f64> {
    if gold >= p.len() {
        return Err(TensorError::IndexOutOfRange {
            op: "cross_entropy",
            index: gold,
            len: p.len(),
        });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(TensorError::NotADistribution {
            op: "cross_entropy",
            sum,
        });
    }
    Ok(-p[gold].max(PROB_FLOOR).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &NumArray, b: &NumArray) -> NumArray {
        let (n, k) = a.dim();
        let m = b.ncols();
        let mut out = NumArray::zeros((n, m));
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for t in 0..k {
                    s += a[[i, t]] * b[[t, j]];
                }
                out[[i, j]] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let x = array![[1.5, -2.0], [0.25, 4.0]];
        assert_eq!(matmul(&NumArray::eye(2), &x).unwrap(), x);
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let b = array![[1.0], [1.0]];
        assert_eq!(matmul(&a, &b).unwrap(), array![[3.0], [7.0]]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = NumArray::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let b = NumArray::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0));
        let fast = matmul(&a, &b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.iter().zip(slow.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let err = matmul(&NumArray::zeros((2, 3)), &NumArray::zeros((2, 3))).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0], None).unwrap(), vec![0.5, 0.5]);
        let s = softmax(&[1000.0, 0.0], None).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-6 && s[1].abs() < 1e-6);
        let s = softmax(&[1.0, 2.0, 3.0], Some(&[true, true, false])).unwrap();
        let e = std::f64::consts::E;
        assert!((s[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((s[1] - e / (1.0 + e)).abs() < 1e-15);
        assert_eq!(s[2], 0.0);
    }

    #[test]
    fn softmax_fully_masked_row_is_an_error() {
        let err = softmax(&[1.0, 2.0], Some(&[false, false])).unwrap_err();
        assert_eq!(err, TensorError::FullyMasked { row: 0 });
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(softmax(&[f64::NAN, 0.0], None).is_err());
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(f64::INFINITY) < 1.0);
        assert!(sigmoid(f64::NEG_INFINITY) > 0.0);
        assert!((sigmoid(-(3.0f64).ln()) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert!((cross_entropy(&[0.5, 0.5], 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((cross_entropy(&[1.0, 0.0], 1).unwrap() + PROB_FLOOR.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[1.0], 3).is_err());
        assert!(cross_entropy(&[0.3, 0.3], 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_are_distributions_and_shift_invariant(
            xs in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&xs, None).unwrap();
            let total: f64 = p.iter().sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-6);
            proptest::prop_assert!(p.iter().all(|v| *v >= 0.0));
            let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
            let q = softmax(&shifted, None).unwrap();
            for (a, b) in p.iter().zip(&q) {
                proptest::prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
