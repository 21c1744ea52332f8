//! Prior-guided genetic algorithm over fixed-cardinality masks.

use std::collections::HashMap;

use rand::Rng as _;

use crate::error::Result;
use crate::mask::LayerMask;
use crate::objective::Objective;
use crate::seed::{rng_for, Rng};

use super::{argmin, evaluate_sorted, step, GaConfig, Outcome, Prior, Step};

/// The only feasible mask when `k` is 0 or `N`.
pub(crate) fn trivial(obj: &Objective, k: usize) -> Result<Option<Outcome>> {
    let n = obj.depth();
    if k != 0 && k != n {
        return Ok(None);
    }
    let mask = LayerMask::new(n, 0..k)?;
    obj.dense_baseline()?;
    let loss = obj.evaluate(&mask)?.loss;
    let steps = vec![step(1, 1, (&mask, loss))];
    Ok(Some(Outcome { mask, loss, steps }))
}

/// Union of two parents cut back to `k` layers by dropping the layers with the
/// highest single-removal scores (ties drop the higher index).
fn crossover(a: &LayerMask, b: &LayerMask, k: usize, scores: &[f64]) -> LayerMask {
    let mut union: Vec<usize> = a.removed().iter().chain(b.removed()).copied().collect();
    union.sort_unstable();
    union.dedup();
    union.sort_by(|&x, &y| scores[x].total_cmp(&scores[y]).then(x.cmp(&y)));
    union.truncate(k);
    LayerMask::new(a.depth(), union).expect("parent indices are valid")
}

/// Each removed layer is swapped for a uniformly chosen kept layer with
/// probability `rate`.
fn mutate(mask: LayerMask, rate: f64, rng: &mut Rng) -> LayerMask {
    let mut m = mask;
    let genes = m.removed().to_vec();
    for gene in genes {
        if rng.random::<f64>() < rate {
            let kept: Vec<usize> = m.kept().collect();
            if kept.is_empty() {
                break;
            }
            let inp = kept[rng.random_range(0..kept.len())];
            m = m.swapped(gene, inp);
        }
    }
    m
}

fn score_all(obj: &Objective, masks: &[LayerMask], seen: &mut HashMap<LayerMask, f64>) -> Result<usize> {
    let scored = evaluate_sorted(obj, masks.to_vec())?;
    let distinct = scored.len();
    seen.extend(scored);
    Ok(distinct)
}

pub(crate) fn run(obj: &Objective, k: usize, cfg: &GaConfig, seed: u64) -> Result<Outcome> {
    if let Some(out) = trivial(obj, k)? {
        return Ok(out);
    }
    let scores = obj.single_layer_scores()?;
    let prior = Prior::new(&scores, cfg.prior_temperature);
    let size = cfg.population;
    let elites = ((cfg.elitism_fraction * size as f64).ceil() as usize).min(size);

    let mut rng = rng_for(seed, "ga-init", 0);
    let mut population = (0..size)
        .map(|_| prior.sample(k, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut seen = HashMap::new();
    let mut steps: Vec<Step> = Vec::with_capacity(cfg.generations + 1);
    let distinct = score_all(obj, &population, &mut seen)?;
    let best = |seen: &HashMap<LayerMask, f64>| {
        let (m, l) = argmin(seen.iter().map(|(m, l)| (m, *l))).expect("evaluated population");
        (m.clone(), l)
    };
    let (m, l) = best(&seen);
    steps.push(step(0, distinct, (&m, l)));

    for generation in 1..=cfg.generations {
        let mut rng = rng_for(seed, "ga-generation", generation as u64);
        population.sort_by(|a, b| seen[a].total_cmp(&seen[b]).then_with(|| a.cmp(b)));
        let mut next: Vec<LayerMask> = population[..elites].to_vec();
        let mut children = Vec::with_capacity(size - elites);
        while next.len() + children.len() < size {
            let a = &population[rng.random_range(0..size)];
            let b = &population[rng.random_range(0..size)];
            let child = crossover(a, b, k, &scores);
            children.push(mutate(child, cfg.mutation_rate, &mut rng));
        }
        let distinct = score_all(obj, &children, &mut seen)?;
        next.extend(children);
        population = next;
        let (m, l) = best(&seen);
        steps.push(step(generation, distinct, (&m, l)));
    }

    let (mask, loss) = best(&seen);
    Ok(Outcome { mask, loss, steps })
}
