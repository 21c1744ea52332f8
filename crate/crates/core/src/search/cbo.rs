//! Quadratic-surrogate search: measure singles and low-cost pairs, anneal the
//! pseudo-boolean model under the cardinality constraint, re-rank the best
//! annealing candidates with the true loss.

use std::collections::HashMap;

use rand::Rng as _;

use crate::error::Result;
use crate::mask::LayerMask;
use crate::objective::Objective;
use crate::seed::rng_for;

use super::{argmin, evaluate_sorted, rank_layers, step, CboConfig, Outcome};

/// `q(S) = Σ s_i + Σ_{i<j} p_ij` over the removed set.
#[derive(Debug, Clone)]
pub(crate) struct Quadratic {
    singles: Vec<f64>,
    pairs: Vec<Vec<f64>>,
}

impl Quadratic {
    pub(crate) fn new(singles: Vec<f64>) -> Self {
        let n = singles.len();
        Self {
            singles,
            pairs: vec![vec![0.0; n]; n],
        }
    }

    pub(crate) fn set_pair(&mut self, i: usize, j: usize, p: f64) {
        self.pairs[i][j] = p;
        self.pairs[j][i] = p;
    }

    pub(crate) fn value(&self, removed: &[usize]) -> f64 {
        let mut q = 0.0;
        for (a, &i) in removed.iter().enumerate() {
            q += self.singles[i];
            for &j in &removed[a + 1..] {
                q += self.pairs[i][j];
            }
        }
        q
    }

    /// Change in `q` from swapping `out` (removed) for `inp` (kept).
    fn swap_delta(&self, removed: &[usize], out: usize, inp: usize) -> f64 {
        let mut d = self.singles[inp] - self.singles[out];
        for &j in removed {
            if j != out {
                d += self.pairs[inp][j] - self.pairs[out][j];
            }
        }
        d
    }
}

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Pairs ordered by ascending single-score sum, ties by index.
fn pair_order(scores: &[f64]) -> Vec<(usize, usize)> {
    let n = scores.len();
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    pairs.sort_by(|a, b| {
        (scores[a.0] + scores[a.1])
            .total_cmp(&(scores[b.0] + scores[b.1]))
            .then(a.cmp(b))
    });
    pairs
}

pub(crate) fn run(obj: &Objective, k: usize, cfg: &CboConfig, seed: u64) -> Result<Outcome> {
    if let Some(out) = super::ga::trivial(obj, k)? {
        return Ok(out);
    }
    let n = obj.depth();
    let scores = obj.single_layer_scores()?;
    let base = obj.known_baseline().expect("singles evaluate the baseline");
    let mut model = Quadratic::new(scores.clone());

    let mut pairs = pair_order(&scores);
    pairs.truncate(cfg.pair_sample_budget.unwrap_or(usize::MAX));
    let pair_masks = pairs
        .iter()
        .map(|&(i, j)| LayerMask::new(n, [i, j]))
        .collect::<Result<Vec<_>>>()?;
    for (m, loss) in evaluate_sorted(obj, pair_masks)? {
        let (i, j) = (m.removed()[0], m.removed()[1]);
        model.set_pair(i, j, (loss - base) - scores[i] - scores[j]);
    }

    let start = LayerMask::new(n, rank_layers(&scores).into_iter().take(k))?;
    let t0 = cfg.anneal_schedule.initial_temperature.unwrap_or_else(|| {
        let sd = std_dev(&scores);
        if sd > 0.0 && sd.is_finite() {
            sd
        } else {
            1.0
        }
    });
    let ratio = cfg.anneal_schedule.final_ratio;
    let mut rng = rng_for(seed, "cbo-anneal", 0);
    let mut current = start.clone();
    let mut q = model.value(current.removed());
    let mut visited: HashMap<LayerMask, f64> = HashMap::new();
    visited.insert(current.clone(), q);
    for t in 0..cfg.anneal_steps {
        let temp = t0 * ratio.powf(t as f64 / cfg.anneal_steps.max(1) as f64);
        let out = current.removed()[rng.random_range(0..k)];
        let kept: Vec<usize> = current.kept().collect();
        let inp = kept[rng.random_range(0..kept.len())];
        let d = model.swap_delta(current.removed(), out, inp);
        if d <= 0.0 || rng.random::<f64>() < (-d / temp).exp() {
            current = current.swapped(out, inp);
            q = model.value(current.removed());
            visited.entry(current.clone()).or_insert(q);
        }
    }

    let mut ranked: Vec<(LayerMask, f64)> = visited.into_iter().collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    // Without pair corrections the surrogate is additive and its minimiser is
    // already known exactly, so only that mask is scored.
    let keep = if pairs.is_empty() { 1 } else { cfg.refine_top };
    ranked.truncate(keep);
    let finalists: Vec<LayerMask> = ranked.into_iter().map(|(m, _)| m).collect();
    let scored = evaluate_sorted(obj, finalists)?;
    let (m, l) = argmin(scored.iter().map(|(m, l)| (m, *l))).expect("at least one finalist");
    let steps = vec![step(1, scored.len(), (m, l))];
    Ok(Outcome {
        mask: m.clone(),
        loss: l,
        steps,
    })
}
