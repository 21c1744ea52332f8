//! Layer-removal masks.
//!
//! A [`LayerMask`] names the set of transformer blocks removed from a model of
//! a given depth. Indices are 0-based. The keep-mask (`true` for every
//! retained block) is derived on demand.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawMask")]
pub struct LayerMask {
    depth: usize,
    removed: Vec<usize>,
}

#[derive(Deserialize)]
struct RawMask {
    depth: usize,
    removed: Vec<usize>,
}

impl TryFrom<RawMask> for LayerMask {
    type Error = Error;

    fn try_from(raw: RawMask) -> Result<Self> {
        LayerMask::new(raw.depth, raw.removed)
    }
}

impl LayerMask {
    /// Builds a mask, sorting and deduplicating `removed`.
    ///
    /// Out-of-range indices are rejected, never clamped.
    pub fn new(depth: usize, removed: impl IntoIterator<Item = usize>) -> Result<Self> {
        if depth == 0 {
            return Err(Error::ZeroDepth);
        }
        let mut removed: Vec<usize> = removed.into_iter().collect();
        if let Some(&index) = removed.iter().find(|&&i| i >= depth) {
            return Err(Error::IndexOutOfRange { index, depth });
        }
        removed.sort_unstable();
        removed.dedup();
        Ok(Self { depth, removed })
    }

    pub fn dense(depth: usize) -> Result<Self> {
        Self::new(depth, [])
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn removed(&self) -> &[usize] {
        &self.removed
    }

    /// Number of removed blocks.
    pub fn k(&self) -> usize {
        self.removed.len()
    }

    pub fn is_dense(&self) -> bool {
        self.removed.is_empty()
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.removed.binary_search(&layer).is_ok()
    }

    /// `keep[i]` is true iff block `i` is retained.
    pub fn keep_mask(&self) -> Vec<bool> {
        let mut keep = vec![true; self.depth];
        for &i in &self.removed {
            keep[i] = false;
        }
        keep
    }

    /// Retained block indices in ascending order.
    pub fn kept(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.depth).filter(move |i| !self.contains(*i))
    }

    /// Canonical key `"N:i1,i2,...,ik"`.
    pub fn key(&self) -> String {
        self.to_string()
    }

    /// The mask with `layer` additionally removed.
    pub fn with_removed(&self, layer: usize) -> Result<Self> {
        if layer >= self.depth {
            return Err(Error::IndexOutOfRange {
                index: layer,
                depth: self.depth,
            });
        }
        let mut removed = self.removed.clone();
        if let Err(pos) = removed.binary_search(&layer) {
            removed.insert(pos, layer);
        }
        Ok(Self {
            depth: self.depth,
            removed,
        })
    }

    /// Replaces removed layer `out` by currently kept layer `inp`.
    pub fn swapped(&self, out: usize, inp: usize) -> Self {
        debug_assert!(self.contains(out) && !self.contains(inp) && inp < self.depth);
        let removed = self.removed.iter().map(|&i| if i == out { inp } else { i });
        Self::new(self.depth, removed).expect("swap keeps indices in range")
    }

    /// All masks reachable by exchanging one removed index for one kept index.
    ///
    /// Returned in ascending mask order; there are `k * (N - k)` of them.
    pub fn cardinality_neighbors(&self) -> Result<Vec<LayerMask>> {
        let k = self.k();
        if k == 0 || k == self.depth {
            return Err(Error::EmptyNeighborhood {
                k,
                depth: self.depth,
            });
        }
        let kept: Vec<usize> = self.kept().collect();
        let mut out = Vec::with_capacity(k * kept.len());
        for &r in &self.removed {
            for &a in &kept {
                out.push(self.swapped(r, a));
            }
        }
        out.sort();
        Ok(out)
    }

    /// Number of positions where the two keep-masks differ.
    pub fn hamming(&self, other: &LayerMask) -> usize {
        let (mut i, mut j, mut common) = (0, 0, 0);
        let (a, b) = (&self.removed, &other.removed);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    common += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        a.len() + b.len() - 2 * common
    }

    pub fn intersection_len(&self, other: &LayerMask) -> usize {
        self.removed.iter().filter(|&&i| other.contains(i)).count()
    }
}

impl fmt::Display for LayerMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.depth)?;
        for (n, i) in self.removed.iter().enumerate() {
            if n > 0 {
                f.write_str(",")?;
            }
            write!(f, "{i}")?;
        }
        Ok(())
    }
}

impl FromStr for LayerMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::BadMaskKey(s.to_string());
        let (depth, rest) = s.split_once(':').ok_or_else(bad)?;
        let depth: usize = depth.parse().map_err(|_| bad())?;
        let removed = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split(',')
                .map(|t| t.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?
        };
        if removed.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad());
        }
        LayerMask::new(depth, removed)
    }
}

/// Number of layers to remove.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Budget(pub usize);

impl Budget {
    pub fn check(self, depth: usize) -> Result<usize> {
        if self.0 > depth {
            Err(Error::BudgetTooLarge { k: self.0, depth })
        } else {
            Ok(self.0)
        }
    }
}

/// `C(n, k)` without overflow for the sizes used here.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
}

#[cfg(test)]
mod tests {
    use itertools::Itertools;
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn make_mask_examples() {
        let m = LayerMask::new(32, [9, 10, 11, 12, 22, 23, 24]).unwrap();
        assert_eq!(m.k(), 7);
        assert_eq!(m.depth(), 32);

        let dense = LayerMask::new(12, []).unwrap();
        assert!(dense.is_dense());
        assert_eq!(dense.k(), 0);

        let m = LayerMask::new(12, [5, 3, 3]).unwrap();
        assert_eq!(m.removed(), &[3, 5]);
        assert_eq!(m.k(), 2);
    }

    #[test]
    fn make_mask_rejects_out_of_range() {
        assert!(matches!(
            LayerMask::new(12, [3, 12]),
            Err(Error::IndexOutOfRange {
                index: 12,
                depth: 12
            })
        ));
        assert!(matches!(LayerMask::new(0, []), Err(Error::ZeroDepth)));
    }

    #[test]
    fn key_format() {
        assert_eq!(LayerMask::new(12, [3, 5]).unwrap().key(), "12:3,5");
        assert_eq!(LayerMask::new(12, []).unwrap().key(), "12:");
        assert_eq!(LayerMask::new(32, [9, 22]).unwrap().key(), "32:9,22");
    }

    #[test]
    fn key_parse_rejects_garbage() {
        for bad in ["", "12", "x:1", "12:1,,2", "12:3,1", "12:1,1", "4:7"] {
            assert!(bad.parse::<LayerMask>().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn keep_mask_matches_removed() {
        let m = LayerMask::new(5, [1, 3]).unwrap();
        assert_eq!(m.keep_mask(), vec![true, false, true, false, true]);
        assert_eq!(m.kept().collect::<Vec<_>>(), vec![0, 2, 4]);
    }

    #[test]
    fn neighbor_examples() {
        let keys = |m: LayerMask| {
            m.cardinality_neighbors()
                .unwrap()
                .into_iter()
                .map(|n| n.key())
                .collect::<Vec<_>>()
        };
        assert_eq!(
            keys(LayerMask::new(4, [0]).unwrap()),
            vec!["4:1", "4:2", "4:3"]
        );
        assert_eq!(keys(LayerMask::new(3, [0, 1]).unwrap()), vec!["3:0,2", "3:1,2"]);

        let m = LayerMask::new(14, [0, 3, 6, 9, 12]).unwrap();
        let n = m.cardinality_neighbors().unwrap();
        assert_eq!(n.len(), 45);
        // independent count: every 5-subset at Hamming distance 2
        let brute = (0..14)
            .combinations(5)
            .filter(|c| LayerMask::new(14, c.clone()).unwrap().hamming(&m) == 2)
            .count();
        assert_eq!(brute, 45);
    }

    #[test]
    fn neighbors_empty_at_extremes() {
        assert!(matches!(
            LayerMask::dense(4).unwrap().cardinality_neighbors(),
            Err(Error::EmptyNeighborhood { k: 0, depth: 4 })
        ));
        assert!(LayerMask::new(3, [0, 1, 2])
            .unwrap()
            .cardinality_neighbors()
            .is_err());
    }

    #[test]
    fn neighbor_count_exhaustive_small_depths() {
        for n in 1..=8 {
            for k in 1..n {
                for c in (0..n).combinations(k) {
                    let m = LayerMask::new(n, c).unwrap();
                    let nb = m.cardinality_neighbors().unwrap();
                    assert_eq!(nb.len(), k * (n - k));
                    assert!(nb.iter().all(|x| x.k() == k && x.hamming(&m) == 2));
                    assert!(nb.windows(2).all(|w| w[0] < w[1]));
                }
            }
        }
    }

    #[test]
    fn keys_injective_on_8_choose_3() {
        let keys: std::collections::HashSet<String> = (0..8)
            .combinations(3)
            .map(|c| LayerMask::new(8, c).unwrap().key())
            .collect();
        assert_eq!(keys.len(), 56);
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(14, 5), 2002);
        assert_eq!(binomial(32, 7), 3_365_856);
        assert_eq!(binomial(12, 3), 220);
        assert_eq!(binomial(3, 4), 0);
    }

    #[test]
    fn serde_validates() {
        let m: LayerMask = serde_json::from_str(r#"{"depth":6,"removed":[4,1]}"#).unwrap();
        assert_eq!(m.removed(), &[1, 4]);
        assert!(serde_json::from_str::<LayerMask>(r#"{"depth":6,"removed":[6]}"#).is_err());
    }

    proptest! {
        #[test]
        fn key_round_trip(depth in 1usize..40, raw in proptest::collection::vec(0usize..40, 0..12)) {
            let raw: Vec<usize> = raw.into_iter().filter(|&i| i < depth).collect();
            let m = LayerMask::new(depth, raw).unwrap();
            let back: LayerMask = m.key().parse().unwrap();
            prop_assert_eq!(&back, &m);
            let again = LayerMask::new(back.depth(), back.removed().to_vec()).unwrap();
            prop_assert_eq!(again, m);
        }
    }
}
