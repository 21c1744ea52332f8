//! Score-ranked and incremental searches: one-shot, greedy, beam and
//! fast-block-select.

use crate::error::{Error, Result};
use crate::mask::LayerMask;
use crate::objective::Objective;

use super::{argmin, evaluate_sorted, rank_layers, step, Outcome, Scorer};

fn top_k(depth: usize, scores: &[f64], k: usize) -> Result<LayerMask> {
    LayerMask::new(depth, rank_layers(scores).into_iter().take(k))
}

fn finish(obj: &Objective, mask: LayerMask, candidates: usize) -> Result<Outcome> {
    let loss = obj.evaluate(&mask)?.loss;
    let steps = vec![step(1, candidates, (&mask, loss))];
    Ok(Outcome { mask, loss, steps })
}

pub(crate) fn one_shot(obj: &Objective, k: usize, scorer: Scorer) -> Result<Outcome> {
    let n = obj.depth();
    let scores = match scorer {
        Scorer::Singles => obj.single_layer_scores()?,
        Scorer::Proxy => {
            obj.dense_baseline()?;
            proxy(obj)?
        }
    };
    finish(obj, top_k(n, &scores, k)?, n)
}

fn proxy(obj: &Objective) -> Result<Vec<f64>> {
    let scores = obj.loss_fn().proxy_scores()?;
    if scores.len() != obj.depth() {
        return Err(Error::DepthMismatch {
            expected: obj.depth(),
            actual: scores.len(),
        });
    }
    Ok(scores)
}

/// Extensions of `mask` by one more removed layer, ascending.
fn extensions(mask: &LayerMask) -> Vec<LayerMask> {
    mask.kept()
        .map(|i| mask.with_removed(i).expect("kept index is in range"))
        .collect()
}

pub(crate) fn greedy(obj: &Objective, k: usize) -> Result<Outcome> {
    let mut current = LayerMask::dense(obj.depth())?;
    let mut loss = obj.evaluate(&current)?.loss;
    let mut steps = Vec::with_capacity(k);
    for j in 0..k {
        let scored = evaluate_sorted(obj, extensions(&current))?;
        let (best, best_loss) = argmin(scored.iter().map(|(m, l)| (m, *l))).expect("non-empty round");
        steps.push(step(j + 1, scored.len(), (best, best_loss)));
        current = best.clone();
        loss = best_loss;
    }
    Ok(Outcome {
        mask: current,
        loss,
        steps,
    })
}

pub(crate) fn beam(obj: &Objective, k: usize, width: usize) -> Result<Outcome> {
    let dense = LayerMask::dense(obj.depth())?;
    let base = obj.evaluate(&dense)?.loss;
    let mut frontier = vec![(dense, base)];
    let mut steps = Vec::with_capacity(k);
    for level in 1..=k {
        let candidates: Vec<LayerMask> = frontier.iter().flat_map(|(m, _)| extensions(m)).collect();
        let mut scored = evaluate_sorted(obj, candidates)?;
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        steps.push(step(level, scored.len(), (&scored[0].0, scored[0].1)));
        scored.truncate(width);
        frontier = scored;
    }
    let (mask, loss) = frontier.swap_remove(0);
    Ok(Outcome { mask, loss, steps })
}

pub(crate) fn fast_block_select(obj: &Objective, k: usize) -> Result<Outcome> {
    let n = obj.depth();
    match proxy(obj) {
        Ok(scores) => {
            obj.dense_baseline()?;
            finish(obj, top_k(n, &scores, k)?, n)
        }
        Err(Error::ProxyUnavailable) => {
            log::warn!("objective {} has no cheap proxy; falling back to one-shot", obj.name());
            one_shot(obj, k, Scorer::Singles)
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{Landscape, LandscapeSpec};

    fn synergy() -> Objective {
        Objective::from_loss(Landscape::new(LandscapeSpec::synergy_example()).unwrap())
    }

    #[test]
    fn one_shot_removes_smallest_scores() {
        let spec = LandscapeSpec::additive(vec![5.0, 1.0, 3.0, 2.0, 4.0], 0.0);
        let obj = Objective::from_loss(Landscape::new(spec).unwrap());
        let out = one_shot(&obj, 2, Scorer::Singles).unwrap();
        assert_eq!(out.mask.removed(), &[1, 3]);
        assert_eq!(out.loss, 3.0);
    }

    #[test]
    fn equal_scores_remove_lowest_indices() {
        let obj = Objective::from_loss(Landscape::new(LandscapeSpec::additive(vec![1.0; 6], 0.0)).unwrap());
        assert_eq!(one_shot(&obj, 3, Scorer::Singles).unwrap().mask.removed(), &[0, 1, 2]);
        assert_eq!(greedy(&obj, 3).unwrap().mask.removed(), &[0, 1, 2]);
    }

    #[test]
    fn synergy_instance() {
        let obj = synergy();
        let os = one_shot(&obj, 2, Scorer::Singles).unwrap();
        assert_eq!(os.mask.removed(), &[0, 1]);
        assert!((os.loss - 2.05).abs() < 1e-12);
        let g = greedy(&obj, 2).unwrap();
        assert_eq!(g.mask.removed()[0], 0);
        assert!((g.loss - 2.05).abs() < 1e-12);
        let b = beam(&obj, 2, 5).unwrap();
        assert_eq!(b.mask.removed(), &[1, 2]);
        assert!((b.loss - 1.6).abs() < 1e-12);
    }

    #[test]
    fn greedy_round_sizes() {
        let obj = Objective::from_loss(Landscape::new(LandscapeSpec::additive(vec![1.0; 12], 0.0)).unwrap());
        let out = greedy(&obj, 3).unwrap();
        let sizes: Vec<usize> = out.steps.iter().map(|s| s.candidates).collect();
        assert_eq!(sizes, vec![12, 11, 10]);
        assert_eq!(obj.computed(), 34);
    }

    #[test]
    fn k_zero_is_dense() {
        let obj = synergy();
        for out in [
            greedy(&obj, 0).unwrap(),
            beam(&obj, 0, 3).unwrap(),
            one_shot(&obj, 0, Scorer::Singles).unwrap(),
            fast_block_select(&obj, 0).unwrap(),
        ] {
            assert!(out.mask.is_dense());
            assert_eq!(out.loss, 0.0);
        }
    }

    #[test]
    fn fast_block_select_uses_proxy_budget() {
        let obj = synergy();
        let out = fast_block_select(&obj, 2).unwrap();
        assert_eq!(out.mask.removed(), &[0, 1]);
        assert_eq!(obj.computed(), 2);
    }
}
