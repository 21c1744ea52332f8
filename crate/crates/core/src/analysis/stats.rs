//! Rank correlation, dispersion and mask-shape statistics.

use crate::error::{Error, Result};
use crate::mask::LayerMask;

/// 1-based ranks in ascending order; tied values share the mean of the
/// positions they occupy.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        let mean = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = mean;
        }
        start = end;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("constant input has no correlation"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::DegenerateInput("inputs differ in length"));
    }
    if xs.len() < 2 {
        return Err(Error::DegenerateInput("need at least two observations"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite value"));
    }
    Ok(())
}

/// Spearman's rho: Pearson correlation of the average ranks.
///
/// ```
/// use depthsel::analysis::spearman;
/// assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
/// assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
/// ```
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Population variance (divides by `n`).
pub fn inter_method_variance(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::DegenerateInput("need at least two values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok(values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
}

/// `|A ∩ B| / |A ∪ B|`, and 1 for two empty masks.
pub fn jaccard(a: &LayerMask, b: &LayerMask) -> Result<f64> {
    if a.depth() != b.depth() {
        return Err(Error::DepthMismatch {
            expected: a.depth(),
            actual: b.depth(),
        });
    }
    let inter = a.intersection_len(b);
    let union = a.k() + b.k() - inter;
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Number of maximal runs of consecutive removed layers and the longest run.
pub fn contiguity(mask: &LayerMask) -> (usize, usize) {
    let mut runs = 0;
    let mut longest = 0;
    let mut current = 0;
    let mut prev: Option<usize> = None;
    for &i in mask.removed() {
        if prev.is_some_and(|p| p + 1 == i) {
            current += 1;
        } else {
            runs += 1;
            current = 1;
        }
        longest = longest.max(current);
        prev = Some(i);
    }
    (runs, longest)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const MARGIN: [f64; 7] = [-0.312, -0.408, -0.887, -0.106, -0.218, -0.210, -0.312];
    const AVG: [f64; 7] = [57.99, 60.69, 60.12, 57.63, 60.90, 59.93, 57.99];

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert!(matches!(
            spearman(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(Error::DegenerateInput(_))
        ));
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&MARGIN), vec![3.5, 2.0, 1.0, 7.0, 5.0, 6.0, 3.5]);
        assert_eq!(average_ranks(&AVG), vec![2.5, 6.0, 5.0, 1.0, 7.0, 4.0, 2.5]);
    }

    #[test]
    fn margin_and_accuracy_columns() {
        // Σ dx·dy = -11.5 over sqrt(27.5 · 27.5) after average ranking.
        let rho = spearman(&MARGIN, &AVG).unwrap();
        assert!((rho - (-23.0 / 55.0)).abs() < 1e-12);
        let var = inter_method_variance(&AVG).unwrap();
        assert!((var - 16491.0 / 9800.0).abs() < 1e-9);
        assert!((0.7..=5.7).contains(&var));
    }

    #[test]
    fn variance_examples() {
        assert_eq!(inter_method_variance(&[4.0, 4.0, 4.0]).unwrap(), 0.0);
        assert_eq!(inter_method_variance(&[1.0, 3.0]).unwrap(), 1.0);
        assert!(inter_method_variance(&[1.0]).is_err());
    }

    fn m(depth: usize, ix: &[usize]) -> LayerMask {
        LayerMask::new(depth, ix.iter().copied()).unwrap()
    }

    #[test]
    fn jaccard_examples() {
        let a = m(32, &[9, 10, 11]);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &m(32, &[1, 2])).unwrap(), 0.0);
        assert_eq!(jaccard(&a, &m(32, &[9, 10, 12])).unwrap(), 0.5);
        assert_eq!(jaccard(&m(4, &[]), &m(4, &[])).unwrap(), 1.0);
        assert!(matches!(
            jaccard(&m(4, &[1]), &m(5, &[1])),
            Err(Error::DepthMismatch { .. })
        ));
    }

    #[test]
    fn contiguity_examples() {
        assert_eq!(contiguity(&m(32, &[9, 10, 11, 12, 22, 23, 24])), (2, 4));
        assert_eq!(contiguity(&m(32, &[])), (0, 0));
        assert_eq!(contiguity(&m(8, &[1, 3, 5])), (3, 1));
    }

    fn non_constant() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100i32..100, 2..20)
            .prop_filter("non-constant", |v| v.iter().any(|x| *x != v[0]))
            .prop_map(|v| v.into_iter().map(f64::from).collect())
    }

    fn mask() -> impl Strategy<Value = LayerMask> {
        prop::collection::btree_set(0usize..16, 0..=16).prop_map(|s| LayerMask::new(16, s).unwrap())
    }

    proptest! {
        #[test]
        fn spearman_symmetric_and_reflexive((x, y) in (2usize..20).prop_flat_map(|n| {
            let col = prop::collection::vec(-50i32..50, n);
            (col.clone(), col)
        })) {
            let x: Vec<f64> = x.into_iter().map(f64::from).collect();
            let y: Vec<f64> = y.into_iter().map(f64::from).collect();
            match (spearman(&x, &y), spearman(&y, &x)) {
                (Ok(a), Ok(b)) => {
                    prop_assert_eq!(a, b);
                    prop_assert!((-1.0..=1.0).contains(&a));
                }
                (Err(_), Err(_)) => {}
                other => prop_assert!(false, "asymmetric: {:?}", other),
            }
        }

        #[test]
        fn spearman_self_is_one(x in non_constant()) {
            prop_assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn spearman_rank_invariant(x in non_constant(), y in non_constant()) {
            let n = x.len().min(y.len());
            let (x, y) = (&x[..n], &y[..n]);
            let tx: Vec<f64> = x.iter().map(|v| v.powi(3) + 7.0 * v).collect();
            let ty: Vec<f64> = y.iter().map(|v| (v / 10.0).exp()).collect();
            match (spearman(x, y), spearman(&tx, &ty)) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (Err(_), Err(_)) => {}
                other => prop_assert!(false, "{:?}", other),
            }
        }

        #[test]
        fn jaccard_bounds(a in mask(), b in mask()) {
            let j = jaccard(&a, &b).unwrap();
            prop_assert_eq!(j, jaccard(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&j));
            prop_assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn contiguity_bounds(a in mask()) {
            let (runs, longest) = contiguity(&a);
            prop_assert!(runs <= a.k() && longest <= a.k());
            prop_assert_eq!(runs == 0, a.k() == 0);
            // run lengths add up to k: the gaps between runs are exactly runs - 1
            let breaks = a.removed().windows(2).filter(|w| w[1] != w[0] + 1).count();
            prop_assert_eq!(runs, if a.k() == 0 { 0 } else { breaks + 1 });
        }
    }
}
