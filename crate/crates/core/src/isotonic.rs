//! Least-squares projection onto non-decreasing sequences (pool adjacent
//! violators, equal weights).

/// The non-decreasing sequence closest to `values` in Euclidean norm.
pub fn isotonic_increasing(values: &[f64]) -> Vec<f64> {
    // blocks of (sum, count), merged while their means are out of order
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (s1, c1) = blocks[blocks.len() - 1];
            let (s0, c0) = blocks[blocks.len() - 2];
            if s0 / c0 as f64 <= s1 / c1 as f64 {
                break;
            }
            blocks.pop();
            *blocks.last_mut().unwrap() = (s0 + s1, c0 + c1);
        }
    }
    let mut out = Vec::with_capacity(values.len());
    for (s, c) in blocks {
        out.extend(std::iter::repeat(s / c as f64).take(c));
    }
    out
}

/// Clamp to `[0, 1]`, then project onto non-decreasing sequences. The result
/// stays in `[0, 1]` because block means of values in `[0, 1]` do.
pub fn monotone_cdf_projection(values: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = values.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    isotonic_increasing(&clamped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(isotonic_increasing(&[]), Vec::<f64>::new());
        assert_eq!(isotonic_increasing(&[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0]);
        assert_eq!(isotonic_increasing(&[3.0, 1.0]), vec![2.0, 2.0]);
        assert_eq!(isotonic_increasing(&[1.0, 3.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(isotonic_increasing(&[4.0, 3.0, 2.0, 1.0]), vec![2.5; 4]);
        assert_eq!(monotone_cdf_projection(&[-0.2, 0.5, 1.4, 0.9]), vec![0.0, 0.5, 0.95, 0.95]);
    }

    /// Brute-force oracle: the projection onto the monotone cone equals the
    /// min-max formula `x̂_i = max_{k≤i} min_{l≥i} mean(x_k..=x_l)`.
    fn minmax(values: &[f64]) -> Vec<f64> {
        let n = values.len();
        (0..n)
            .map(|i| {
                (0..=i)
                    .map(|k| {
                        (i..n)
                            .map(|l| values[k..=l].iter().sum::<f64>() / (l - k + 1) as f64)
                            .fold(f64::INFINITY, f64::min)
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn matches_minmax_formula(v in proptest::collection::vec(-2.0f64..2.0, 0..12)) {
            let a = isotonic_increasing(&v);
            let b = minmax(&v);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!(a.windows(2).all(|w| w[0] <= w[1]));
            let s: f64 = v.iter().sum();
            prop_assert!((a.iter().sum::<f64>() - s).abs() < 1e-9);
        }

        #[test]
        fn monotone_input_is_fixed(mut v in proptest::collection::vec(0.0f64..1.0, 0..30)) {
            v.sort_by(f64::total_cmp);
            prop_assert_eq!(monotone_cdf_projection(&v), v);
        }
    }
}
