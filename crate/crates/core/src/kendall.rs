//! Kendall's tau-b rank correlation in O(n log n) (Knight's algorithm).

use crate::error::{Error, Result};

/// Kendall's tau-b between `x` and `y`.
///
/// Fails with [`Error::Invalid`] when the slices differ in length, contain
/// NaN, or when either side is constant (tau-b is undefined).
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "kendall_tau_b",
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::Invalid("kendall tau-b input contains NaN".into()));
    }
    let n = x.len() as i64;
    let n0 = n * (n - 1) / 2;

    let mut idx: Vec<usize> = (0..x.len()).collect();
    // NaN was rejected above; partial_cmp keeps -0.0 and 0.0 tied
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap().then(y[a].partial_cmp(&y[b]).unwrap()));

    // pairs tied in x (n1) and tied in both (n3)
    let (mut n1, mut n3) = (0i64, 0i64);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let t = (j - i + 1) as i64;
        n1 += t * (t - 1) / 2;
        let mut k = i;
        while k <= j {
            let mut l = k;
            while l < j && y[idx[l + 1]] == y[idx[k]] {
                l += 1;
            }
            let u = (l - k + 1) as i64;
            n3 += u * (u - 1) / 2;
            k = l + 1;
        }
        i = j + 1;
    }

    let mut ys: Vec<f64> = idx.iter().map(|&k| y[k]).collect();
    let swaps = merge_sort_count(&mut ys);

    let mut n2 = 0i64;
    let mut i = 0;
    while i < ys.len() {
        let mut j = i;
        while j + 1 < ys.len() && ys[j + 1] == ys[i] {
            j += 1;
        }
        let t = (j - i + 1) as i64;
        n2 += t * (t - 1) / 2;
        i = j + 1;
    }

    if n0 - n1 == 0 || n0 - n2 == 0 {
        return Err(Error::Invalid("kendall tau-b undefined for constant input".into()));
    }
    let s = n0 - n1 - n2 + n3 - 2 * swaps;
    Ok(s as f64 / (((n0 - n1) as f64) * ((n0 - n2) as f64)).sqrt())
}

/// Sorts `v` ascending and returns the number of inversions.
fn merge_sort_count(v: &mut [f64]) -> i64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_sort_count(&mut v[..mid]) + merge_sort_count(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            merged.push(v[j]);
            swaps += (mid - i) as i64;
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..]);
    v.copy_from_slice(&merged);
    swaps
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// O(n^2) definition used as the oracle.
    fn brute(x: &[f64], y: &[f64]) -> Option<f64> {
        let n = x.len();
        let (mut c, mut d, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
        for i in 0..n {
            for j in i + 1..n {
                let a = x[i].partial_cmp(&x[j]).unwrap();
                let b = y[i].partial_cmp(&y[j]).unwrap();
                match (a.is_eq(), b.is_eq()) {
                    (true, true) => {}
                    (true, false) => tx += 1,
                    (false, true) => ty += 1,
                    (false, false) if a == b => c += 1,
                    _ => d += 1,
                }
            }
        }
        let denom = (((c + d + tx) as f64) * ((c + d + ty) as f64)).sqrt();
        (c + d + tx > 0 && c + d + ty > 0).then(|| (c - d) as f64 / denom)
    }

    #[test]
    fn perfect_agreement_and_reversal() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(kendall_tau_b(&x, &x).unwrap(), 1.0);
        let r = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(kendall_tau_b(&x, &r).unwrap(), -1.0);
    }

    #[test]
    fn textbook_example_with_ties() {
        let x = [1.0, 2.0, 2.0, 3.0, 4.0];
        let y = [1.0, 3.0, 2.0, 2.0, 5.0];
        let expected = brute(&x, &y).unwrap();
        assert!((kendall_tau_b(&x, &y).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_side_is_undefined() {
        assert!(kendall_tau_b(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(kendall_tau_b(&[1.0], &[1.0]).is_err());
        assert!(kendall_tau_b(&[1.0, 2.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force(pairs in prop::collection::vec((0u8..6, 0u8..6), 2..60)) {
            let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            match brute(&x, &y) {
                Some(t) => prop_assert!((kendall_tau_b(&x, &y).unwrap() - t).abs() < 1e-12),
                None => prop_assert!(kendall_tau_b(&x, &y).is_err()),
            }
        }

        #[test]
        fn bounded_and_symmetric(x in prop::collection::vec(-1e3f64..1e3, 3..80), seed in any::<u64>()) {
            let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v.sin() * ((i as u64 ^ seed) % 7) as f64).collect();
            if let (Ok(a), Ok(b)) = (kendall_tau_b(&x, &y), kendall_tau_b(&y, &x)) {
                prop_assert!((-1.0..=1.0).contains(&a));
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn invariant_under_monotone_transforms(x in prop::collection::vec(-5f64..5.0, 3..50), y in prop::collection::vec(-5f64..5.0, 50)) {
            let y = &y[..x.len()];
            if let Ok(t) = kendall_tau_b(&x, y) {
                let tx: Vec<f64> = x.iter().map(|v| v.exp()).collect();
                let ty: Vec<f64> = y.iter().map(|v| v * 3.0 + 1.0).collect();
                prop_assert!((kendall_tau_b(&tx, &ty).unwrap() - t).abs() < 1e-12);
            }
        }
    }
}
