//! Exhaustive solver for small instances.

use std::io::Write;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{binomial, Budget, LayerMask};
use crate::objective::Objective;

/// Largest number of subsets enumerated by default.
pub const DEFAULT_CAP: u128 = 2_000_000;

/// Masks evaluated per batch while enumerating.
const CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub mask_key: String,
    pub loss: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub mask_key: String,
    pub removed: Vec<usize>,
    pub depth: usize,
    pub loss: f64,
    pub delta: f64,
    pub enumerated: u64,
    /// Every subset in lexicographic order, when requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub table: Option<Vec<TableRow>>,
}

impl OracleResult {
    pub fn mask(&self) -> LayerMask {
        LayerMask::new(self.depth, self.removed.iter().copied()).expect("valid stored mask")
    }

    /// Loss at the upper edge of the best `fraction` of subsets.
    pub fn quantile_threshold(&self, fraction: f64) -> Option<f64> {
        let table = self.table.as_ref()?;
        let losses: Vec<f64> = table.iter().map(|r| r.loss).collect();
        Some(quantile_threshold(&losses, fraction))
    }

    /// Writes the table as `mask_key,loss,delta` CSV.
    pub fn write_table_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "mask_key,loss,delta")?;
        for row in self.table.iter().flatten() {
            writeln!(out, "\"{}\",{},{}", row.mask_key, row.loss, row.delta)?;
        }
        Ok(())
    }
}

/// The `ceil(fraction * n)`-th smallest loss (at least the minimum). A loss
/// is in the best `fraction` iff it is `<=` this value.
pub fn quantile_threshold(losses: &[f64], fraction: f64) -> f64 {
    assert!(!losses.is_empty(), "empty loss table");
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((fraction * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Enumerates every k-subset in lexicographic order and returns the first
/// minimiser. Refuses spaces with more than `cap` subsets.
pub fn brute_force(obj: &Objective, k: usize, keep_table: bool, cap: u128) -> Result<OracleResult> {
    let n = obj.depth();
    let k = Budget(k).check(n)?;
    let count = binomial(n, k);
    if count > cap {
        return Err(Error::SpaceTooLarge(count));
    }
    let base = obj.dense_baseline()?;
    let mut best: Option<(LayerMask, f64)> = None;
    let mut table = keep_table.then(|| Vec::with_capacity(count as usize));
    let mut enumerated = 0u64;
    for chunk in &(0..n).combinations(k).chunks(CHUNK) {
        let masks = chunk
            .map(|c| LayerMask::new(n, c))
            .collect::<Result<Vec<_>>>()?;
        let recs = obj.evaluate_many(&masks)?;
        for (m, r) in masks.into_iter().zip(recs) {
            enumerated += 1;
            if best.as_ref().is_none_or(|(_, l)| r.loss < *l) {
                best = Some((m, r.loss));
            }
            if let Some(t) = table.as_mut() {
                t.push(TableRow {
                    mask_key: r.mask_key,
                    loss: r.loss,
                    delta: r.delta,
                });
            }
        }
    }
    let (mask, loss) = best.expect("at least one subset");
    Ok(OracleResult {
        mask_key: mask.key(),
        removed: mask.removed().to_vec(),
        depth: n,
        loss,
        delta: loss - base,
        enumerated,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{GenerateParams, Landscape, LandscapeSpec};

    fn landscape(spec: LandscapeSpec) -> Objective {
        Objective::from_loss(Landscape::new(spec).unwrap())
    }

    #[test]
    fn synergy_optimum() {
        let obj = landscape(LandscapeSpec::synergy_example());
        let r = brute_force(&obj, 2, true, DEFAULT_CAP).unwrap();
        assert_eq!(r.removed, vec![1, 2]);
        assert!((r.loss - 1.6).abs() < 1e-12);
        assert_eq!(r.enumerated, 3);
        let keys: Vec<&str> = r.table.as_ref().unwrap().iter().map(|t| t.mask_key.as_str()).collect();
        assert_eq!(keys, ["3:0,1", "3:0,2", "3:1,2"]);
    }

    #[test]
    fn empty_budget_is_dense() {
        let obj = landscape(LandscapeSpec::synergy_example());
        let r = brute_force(&obj, 0, false, DEFAULT_CAP).unwrap();
        assert_eq!(r.mask_key, "3:");
        assert_eq!(r.delta, 0.0);
        assert_eq!(r.enumerated, 1);
    }

    #[test]
    fn refuses_large_spaces() {
        let obj = landscape(LandscapeSpec::additive(vec![1.0; 32], 0.0));
        match brute_force(&obj, 7, false, DEFAULT_CAP) {
            Err(Error::SpaceTooLarge(c)) => assert_eq!(c, 3_365_856),
            other => panic!("{other:?}"),
        }
        assert_eq!(obj.computed(), 0);
    }

    #[test]
    fn ties_go_to_the_first_subset() {
        let obj = landscape(LandscapeSpec::additive(vec![1.0; 5], 0.0));
        assert_eq!(brute_force(&obj, 2, false, DEFAULT_CAP).unwrap().mask_key, "5:0,1");
    }

    #[test]
    fn counts_and_dominance() {
        let spec = LandscapeSpec::generate(&GenerateParams::new(11, 10, 0.3, 0.05)).unwrap();
        let obj = landscape(spec);
        let r = brute_force(&obj, 3, true, DEFAULT_CAP).unwrap();
        assert_eq!(r.enumerated, 120);
        assert!(r.table.unwrap().iter().all(|row| r.loss <= row.loss));
    }

    #[test]
    fn quantile_rank() {
        let xs: Vec<f64> = (1..=200).map(f64::from).collect();
        assert_eq!(quantile_threshold(&xs, 0.01), 2.0);
        assert_eq!(quantile_threshold(&xs, 0.0), 1.0);
        assert_eq!(quantile_threshold(&[5.0], 0.01), 5.0);
    }

    #[test]
    fn csv_table() {
        let obj = landscape(LandscapeSpec::synergy_example());
        let r = brute_force(&obj, 2, true, DEFAULT_CAP).unwrap();
        let mut buf = Vec::new();
        r.write_table_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("mask_key,loss,delta\n\"3:0,1\",2.05,2.05\n"));
    }
}
