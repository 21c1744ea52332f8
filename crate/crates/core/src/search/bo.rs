//! Prior-guided Bayesian optimisation with a Hamming-kernel GP surrogate.

use std::collections::HashSet;

use itertools::Itertools;

use crate::error::Result;
use crate::mask::{binomial, LayerMask};
use crate::objective::Objective;
use crate::seed::{rng_for, Rng};

use super::{argmin, evaluate_sorted, expected_improvement, step, BoConfig, HammingGp, Outcome, Prior};

/// Evaluates every k-subset and returns the lexicographically first argmin.
fn exhaustive(obj: &Objective, k: usize) -> Result<Outcome> {
    let n = obj.depth();
    let all = (0..n)
        .combinations(k)
        .map(|c| LayerMask::new(n, c))
        .collect::<Result<Vec<_>>>()?;
    let scored = evaluate_sorted(obj, all)?;
    let (m, l) = argmin(scored.iter().map(|(m, l)| (m, *l))).expect("non-empty space");
    let steps = vec![step(1, scored.len(), (m, l))];
    Ok(Outcome {
        mask: m.clone(),
        loss: l,
        steps,
    })
}

fn uniform_mask(n: usize, k: usize, rng: &mut Rng) -> LayerMask {
    let picked = rand::seq::index::sample(rng, n, k).into_vec();
    LayerMask::new(n, picked).expect("indices below depth")
}

/// Highest-EI candidate; ties go to the lowest mask. EI grows with the
/// predictive spread, so candidates whose EI at an upper bound on the spread
/// cannot beat the current winner skip the variance solve.
fn acquire(gp: &HammingGp, pool: Vec<LayerMask>, best: f64) -> LayerMask {
    let mut ranked: Vec<(f64, LayerMask)> = pool
        .into_iter()
        .map(|m| {
            let (mu, cap) = gp.mean_and_std_bound(&m);
            (expected_improvement(mu, cap, best), m)
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    let mut winner: Option<(f64, LayerMask)> = None;
    for (bound, m) in ranked {
        if let Some((ei, _)) = &winner {
            if bound < *ei {
                break;
            }
        }
        let ei = gp.expected_improvement(&m, best);
        let better = match &winner {
            None => true,
            Some((w, wm)) => ei > *w || (ei == *w && m < *wm),
        };
        if better {
            winner = Some((ei, m));
        }
    }
    winner.expect("non-empty pool").1
}

pub(crate) fn run(obj: &Objective, k: usize, cfg: &BoConfig, seed: u64) -> Result<Outcome> {
    if let Some(out) = super::ga::trivial(obj, k)? {
        return Ok(out);
    }
    let n = obj.depth();
    if binomial(n, k) <= cfg.trials as u128 {
        return exhaustive(obj, k);
    }
    let scores = obj.single_layer_scores()?;
    let prior = Prior::new(&scores, cfg.prior_temperature);
    let mut gp = HammingGp::new(n, cfg.lengthscale.unwrap_or(k as f64), cfg.surrogate_noise);
    let mut observed: HashSet<LayerMask> = HashSet::new();
    let mut steps = Vec::with_capacity(cfg.trials - cfg.random_inits + 1);

    let mut rng = rng_for(seed, "bo-init", 0);
    let mut inits = Vec::with_capacity(cfg.random_inits);
    let mut draws = 0usize;
    while inits.len() < cfg.random_inits {
        let m = if draws < 64 * cfg.random_inits.max(1) {
            prior.sample(k, &mut rng)?
        } else {
            uniform_mask(n, k, &mut rng)
        };
        draws += 1;
        if observed.insert(m.clone()) {
            inits.push(m);
        }
    }
    let scored = evaluate_sorted(obj, inits)?;
    for (m, l) in &scored {
        gp.observe(m, *l);
    }
    let (m, l) = argmin(scored.iter().map(|(m, l)| (m, *l))).expect("at least one init");
    let mut incumbent = (m.clone(), l);
    steps.push(step(0, scored.len(), (&incumbent.0, incumbent.1)));

    for trial in cfg.random_inits..cfg.trials {
        let mut rng = rng_for(seed, "bo-trial", trial as u64);
        let mut pool: Vec<LayerMask> = incumbent.0.cardinality_neighbors()?;
        for _ in 0..cfg.acquisition_candidates {
            pool.push(prior.sample(k, &mut rng)?);
        }
        pool.sort();
        pool.dedup();
        pool.retain(|m| !observed.contains(m));
        while pool.is_empty() {
            let m = uniform_mask(n, k, &mut rng);
            if !observed.contains(&m) {
                pool.push(m);
            }
        }
        let size = pool.len();
        let pick = acquire(&gp, pool, incumbent.1);
        let loss = obj.evaluate(&pick)?.loss;
        gp.observe(&pick, loss);
        observed.insert(pick.clone());
        if loss < incumbent.1 || (loss == incumbent.1 && pick < incumbent.0) {
            incumbent = (pick, loss);
        }
        steps.push(step(trial + 1, size, (&incumbent.0, incumbent.1)));
    }

    Ok(Outcome {
        mask: incumbent.0,
        loss: incumbent.1,
        steps,
    })
}
