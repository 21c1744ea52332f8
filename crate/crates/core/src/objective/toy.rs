//! A small seeded decoder-only transformer used as a desk-scale stand-in for a
//! pretrained LLM.
//!
//! Weights, the calibration corpus and the multiple-choice tasks are all drawn
//! from one seed in a fixed traversal order. The corpus and the task answers
//! are sampled from the dense model itself, so every removal moves the pruned
//! model away from the behaviour the calibration data encodes.
//!
//! Removed blocks are skipped: the residual stream passes through unchanged.

use std::sync::{Arc, OnceLock};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LossFn, ObjectiveKind};
use crate::error::{Error, Result};
use crate::mask::LayerMask;
use crate::seed::{rng_for, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub depth: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub vocab: usize,
    pub context: usize,
    pub corpus_sequences: usize,
    pub corpus_len: usize,
    pub task_items: usize,
    pub choices: usize,
    pub prompt_len: usize,
    pub completion_len: usize,
    /// Standard deviation multiplier of the output head; larger = peakier.
    pub head_scale: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            depth: 12,
            model_dim: 64,
            heads: 4,
            mlp_hidden: 128,
            vocab: 256,
            context: 128,
            corpus_sequences: 32,
            corpus_len: 24,
            task_items: 64,
            choices: 4,
            prompt_len: 6,
            completion_len: 3,
            head_scale: 4.0,
            seed: 0,
        }
    }
}

impl ToyConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("toy model: {m}")));
        if self.depth == 0 {
            return Err(Error::ZeroDepth);
        }
        if self.model_dim == 0 || self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad("model_dim must be a positive multiple of heads");
        }
        if self.vocab < 2 || self.mlp_hidden == 0 {
            return bad("vocab must be at least 2 and mlp_hidden positive");
        }
        if self.corpus_len < 2 || self.corpus_len > self.context {
            return bad("corpus_len must lie in [2, context]");
        }
        if self.prompt_len == 0
            || self.completion_len == 0
            || self.prompt_len + self.completion_len > self.context
        {
            return bad("prompt_len + completion_len must fit the context");
        }
        if self.choices == 0 || self.choices > self.vocab {
            return bad("choices must lie in [1, vocab]");
        }
        Ok(())
    }
}

/// One multiple-choice item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskItem {
    pub prompt: Vec<u32>,
    pub correct: Vec<u32>,
    pub incorrect: Vec<Vec<u32>>,
}

struct Block {
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    w1: Vec<f32>,
    w2: Vec<f32>,
}

/// Per-block key/value cache for incremental decoding.
#[derive(Clone)]
struct State {
    len: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

impl State {
    fn new(depth: usize) -> Self {
        Self {
            len: 0,
            keys: vec![Vec::new(); depth],
            values: vec![Vec::new(); depth],
        }
    }
}

pub struct ToyModel {
    cfg: ToyConfig,
    embed: Vec<f32>,
    pos: Vec<f32>,
    blocks: Vec<Block>,
    head: Vec<f32>,
    corpus: Vec<Vec<u32>>,
    tasks: Vec<TaskItem>,
    proxy: OnceLock<Vec<f64>>,
}

fn normal_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Vec<f32> {
    (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as f32
        })
        .collect()
}

/// `out[t × n] = x[t × m] · w[m × n]`.
fn matmul(x: &[f32], w: &[f32], t: usize, m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; t * n];
    for (row, o) in x.chunks_exact(m).zip(out.chunks_exact_mut(n)) {
        for (xi, wr) in row.iter().zip(w.chunks_exact(n)) {
            for (oj, wij) in o.iter_mut().zip(wr) {
                *oj += xi * wij;
            }
        }
    }
    debug_assert_eq!(out.len(), t * n);
    out
}

fn layer_norm(x: &[f32], d: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(d) {
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + 1e-5).sqrt();
        out.extend(row.iter().map(|v| (v - mean) * inv));
    }
    out
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (0.797_884_6 * (x + 0.044_715 * x * x * x)).tanh())
}

fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let lse = logits
        .iter()
        .map(|&v| (v as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|&v| v as f64 - lse).collect()
}

fn angular_distance(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        ab += (*x as f64) * (*y as f64);
        aa += (*x as f64).powi(2);
        bb += (*y as f64).powi(2);
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0).acos() / std::f64::consts::PI
}

fn sample_token(rng: &mut Rng, logits: &[f32]) -> u32 {
    let lp = log_softmax(logits);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, l) in lp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return i as u32;
        }
    }
    (lp.len() - 1) as u32
}

/// Token indices sorted by descending logit (ties: lower index first).
fn ranked(logits: &[f32]) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..logits.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        logits[b as usize]
            .total_cmp(&logits[a as usize])
            .then(a.cmp(&b))
    });
    idx
}

impl ToyModel {
    pub fn build(cfg: &ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let h = cfg.mlp_hidden;
        let mut rng = rng_for(cfg.seed, "toy-weights", 0);
        let embed = normal_matrix(&mut rng, cfg.vocab, d, 1.0);
        let pos = normal_matrix(&mut rng, cfg.context, d, 0.5);
        let in_std = 1.0 / (d as f64).sqrt();
        let mut blocks = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            // per-block residual gain, log-uniform in [0.2, 2]
            let gain = 10f64.powf(rng.random_range(-0.7..0.3));
            blocks.push(Block {
                wq: normal_matrix(&mut rng, d, d, in_std),
                wk: normal_matrix(&mut rng, d, d, in_std),
                wv: normal_matrix(&mut rng, d, d, in_std),
                wo: normal_matrix(&mut rng, d, d, gain * in_std),
                w1: normal_matrix(&mut rng, d, h, in_std),
                w2: normal_matrix(&mut rng, h, d, gain / (h as f64).sqrt()),
            });
        }
        let head = normal_matrix(&mut rng, d, cfg.vocab, cfg.head_scale * in_std);
        let mut model = Self {
            cfg: cfg.clone(),
            embed,
            pos,
            blocks,
            head,
            corpus: Vec::new(),
            tasks: Vec::new(),
            proxy: OnceLock::new(),
        };
        model.corpus = (0..cfg.corpus_sequences)
            .map(|s| model.sample_sequence(&mut rng_for(cfg.seed, "toy-corpus", s as u64)))
            .collect();
        model.tasks = (0..cfg.task_items)
            .map(|i| model.make_task(&mut rng_for(cfg.seed, "toy-tasks", i as u64)))
            .collect();
        Ok(model)
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    pub fn depth(&self) -> usize {
        self.cfg.depth
    }

    pub fn corpus(&self) -> &[Vec<u32>] {
        &self.corpus
    }

    pub fn tasks(&self) -> &[TaskItem] {
        &self.tasks
    }

    /// The same model with an all-zero output head, so every token is equally
    /// likely: perplexity equals the vocabulary size and every margin is zero.
    pub fn with_constant_head(mut self) -> Self {
        self.head.iter_mut().for_each(|w| *w = 0.0);
        self
    }

    fn all_blocks(&self) -> Vec<usize> {
        (0..self.cfg.depth).collect()
    }

    fn sample_sequence(&self, rng: &mut Rng) -> Vec<u32> {
        let blocks = self.all_blocks();
        let mut state = State::new(self.cfg.depth);
        let mut seq = vec![rng.random_range(0..self.cfg.vocab as u32)];
        while seq.len() < self.cfg.corpus_len {
            let last = *seq.last().unwrap();
            let logits = self.extend(&mut state, &[last], &blocks, None);
            seq.push(sample_token(rng, &logits));
        }
        seq
    }

    fn make_task(&self, rng: &mut Rng) -> TaskItem {
        let blocks = self.all_blocks();
        let cfg = &self.cfg;
        let mut state = State::new(cfg.depth);
        let mut prompt = vec![rng.random_range(0..cfg.vocab as u32)];
        let mut logits = self.extend(&mut state, &prompt, &blocks, None);
        while prompt.len() < cfg.prompt_len {
            let tok = sample_token(rng, &logits);
            prompt.push(tok);
            logits = self.extend(&mut state, &[tok], &blocks, None);
        }
        // choice j starts with the (j+1)-th most likely token, then continues greedily
        let firsts = ranked(&logits);
        let mut completions = Vec::with_capacity(cfg.choices);
        for &first in firsts.iter().take(cfg.choices) {
            let mut st = state.clone();
            let mut completion = vec![first];
            while completion.len() < cfg.completion_len {
                let l = self.extend(&mut st, &[*completion.last().unwrap()], &blocks, None);
                completion.push(ranked(&l)[0]);
            }
            completions.push(completion);
        }
        let correct = completions.remove(0);
        TaskItem {
            prompt,
            correct,
            incorrect: completions,
        }
    }

    /// Feeds `tokens` after whatever `state` already holds and returns the
    /// logits of every new position (`tokens.len() × vocab`).
    ///
    /// `angles[l]` accumulates the angular distance between the input and
    /// output of block `l` at every new position.
    fn extend(
        &self,
        state: &mut State,
        tokens: &[u32],
        blocks: &[usize],
        mut angles: Option<&mut [f64]>,
    ) -> Vec<f32> {
        let cfg = &self.cfg;
        let (d, hd, nh) = (cfg.model_dim, cfg.model_dim / cfg.heads, cfg.heads);
        let t = tokens.len();
        let start = state.len;
        assert!(start + t <= cfg.context, "sequence exceeds context");

        let mut x = Vec::with_capacity(t * d);
        for (p, &tok) in tokens.iter().enumerate() {
            let e = &self.embed[tok as usize * d..][..d];
            let q = &self.pos[(start + p) * d..][..d];
            x.extend(e.iter().zip(q).map(|(a, b)| a + b));
        }

        let scale = 1.0 / (hd as f32).sqrt();
        for &l in blocks {
            let blk = &self.blocks[l];
            let x_in = angles.as_ref().map(|_| x.clone());

            let h = layer_norm(&x, d);
            let q = matmul(&h, &blk.wq, t, d, d);
            state.keys[l].extend(matmul(&h, &blk.wk, t, d, d));
            state.values[l].extend(matmul(&h, &blk.wv, t, d, d));
            let (keys, values) = (&state.keys[l], &state.values[l]);

            let mut att = vec![0f32; t * d];
            let mut weights = vec![0f32; start + t];
            for p in 0..t {
                let visible = start + p + 1;
                for head in 0..nh {
                    let off = head * hd;
                    let qh = &q[p * d + off..][..hd];
                    let mut max = f32::NEG_INFINITY;
                    for (j, w) in weights[..visible].iter_mut().enumerate() {
                        let kh = &keys[j * d + off..][..hd];
                        *w = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f32>() * scale;
                        max = max.max(*w);
                    }
                    let mut sum = 0f32;
                    for w in &mut weights[..visible] {
                        *w = (*w - max).exp();
                        sum += *w;
                    }
                    let out = &mut att[p * d + off..][..hd];
                    for (j, w) in weights[..visible].iter().enumerate() {
                        let vh = &values[j * d + off..][..hd];
                        let w = w / sum;
                        for (o, v) in out.iter_mut().zip(vh) {
                            *o += w * v;
                        }
                    }
                }
            }
            let o = matmul(&att, &blk.wo, t, d, d);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

            let h = layer_norm(&x, d);
            let mut u = matmul(&h, &blk.w1, t, d, cfg.mlp_hidden);
            u.iter_mut().for_each(|v| *v = gelu(*v));
            let m = matmul(&u, &blk.w2, t, cfg.mlp_hidden, d);
            x.iter_mut().zip(&m).for_each(|(a, b)| *a += b);

            if let (Some(acc), Some(x_in)) = (angles.as_deref_mut(), x_in) {
                for (a, b) in x_in.chunks_exact(d).zip(x.chunks_exact(d)) {
                    acc[l] += angular_distance(a, b);
                }
            }
        }
        state.len += t;
        matmul(&layer_norm(&x, d), &self.head, t, d, cfg.vocab)
    }

    fn check_depth(&self, mask: &LayerMask) -> Result<Vec<usize>> {
        if mask.depth() != self.cfg.depth {
            return Err(Error::DepthMismatch {
                expected: self.cfg.depth,
                actual: mask.depth(),
            });
        }
        Ok(mask.kept().collect())
    }

    /// Logits of the unmasked model on `tokens`.
    pub fn dense_logits(&self, tokens: &[u32]) -> Vec<f32> {
        let mut state = State::new(self.cfg.depth);
        self.extend(&mut state, tokens, &self.all_blocks(), None)
    }

    pub fn masked_logits(&self, tokens: &[u32], mask: &LayerMask) -> Result<Vec<f32>> {
        let blocks = self.check_depth(mask)?;
        let mut state = State::new(self.cfg.depth);
        Ok(self.extend(&mut state, tokens, &blocks, None))
    }

    fn sequence_nll(&self, seq: &[u32], blocks: &[usize]) -> f64 {
        let mut state = State::new(self.cfg.depth);
        let logits = self.extend(&mut state, &seq[..seq.len() - 1], blocks, None);
        logits
            .chunks_exact(self.cfg.vocab)
            .zip(&seq[1..])
            .map(|(row, &next)| -log_softmax(row)[next as usize])
            .sum()
    }

    /// `exp(mean next-token NLL)` over `corpus`.
    pub fn perplexity_on(&self, corpus: &[Vec<u32>], mask: &LayerMask) -> Result<f64> {
        let blocks = self.check_depth(mask)?;
        let per_seq: Vec<f64> = corpus
            .par_iter()
            .map(|s| self.sequence_nll(s, &blocks))
            .collect();
        let tokens: usize = corpus.iter().map(|s| s.len() - 1).sum();
        Ok((per_seq.iter().sum::<f64>() / tokens as f64).exp())
    }

    pub fn perplexity(&self, mask: &LayerMask) -> Result<f64> {
        self.perplexity_on(&self.corpus, mask)
    }

    fn completion_loglik(&self, state: &State, first_logits: &[f32], completion: &[u32], blocks: &[usize]) -> f64 {
        let mut ll = log_softmax(first_logits)[completion[0] as usize];
        if completion.len() > 1 {
            let mut st = state.clone();
            let logits = self.extend(&mut st, &completion[..completion.len() - 1], blocks, None);
            for (row, &tok) in logits.chunks_exact(self.cfg.vocab).zip(&completion[1..]) {
                ll += log_softmax(row)[tok as usize];
            }
        }
        ll
    }

    fn item_margin(&self, item: &TaskItem, blocks: &[usize]) -> f64 {
        let mut state = State::new(self.cfg.depth);
        let logits = self.extend(&mut state, &item.prompt, blocks, None);
        let last = &logits[logits.len() - self.cfg.vocab..];
        let correct = self.completion_loglik(&state, last, &item.correct, blocks);
        let wrong: f64 = item
            .incorrect
            .iter()
            .map(|c| self.completion_loglik(&state, last, c, blocks))
            .sum::<f64>()
            / item.incorrect.len() as f64;
        wrong - correct
    }

    /// Mean over items of (mean incorrect log-likelihood − correct
    /// log-likelihood). Negative means the model prefers the right answers.
    pub fn margin_on(&self, items: &[TaskItem], mask: &LayerMask) -> Result<f64> {
        let blocks = self.check_depth(mask)?;
        if let Some(i) = items.iter().position(|it| it.incorrect.is_empty()) {
            return Err(Error::ItemMalformed(i));
        }
        if items.is_empty() {
            return Err(Error::DegenerateInput("no task items"));
        }
        let per_item: Vec<f64> = items
            .par_iter()
            .map(|it| self.item_margin(it, &blocks))
            .collect();
        Ok(per_item.iter().sum::<f64>() / items.len() as f64)
    }

    pub fn margin(&self, mask: &LayerMask) -> Result<f64> {
        self.margin_on(&self.tasks, mask)
    }

    /// Mean angular distance between each block's input and output over the
    /// corpus, from one dense pass.
    pub fn angular_proxy(&self) -> &[f64] {
        self.proxy.get_or_init(|| {
            let blocks = self.all_blocks();
            let mut acc = vec![0f64; self.cfg.depth];
            let mut count = 0usize;
            for seq in &self.corpus {
                let mut state = State::new(self.cfg.depth);
                self.extend(&mut state, seq, &blocks, Some(&mut acc));
                count += seq.len();
            }
            acc.iter().map(|a| a / count as f64).collect()
        })
    }
}

/// Perplexity or margin of a [`ToyModel`] as a loss.
pub struct ToyObjective {
    model: Arc<ToyModel>,
    kind: ObjectiveKind,
}

impl ToyObjective {
    pub fn perplexity(model: Arc<ToyModel>) -> Self {
        Self {
            model,
            kind: ObjectiveKind::ToyPerplexity,
        }
    }

    pub fn margin(model: Arc<ToyModel>) -> Self {
        Self {
            model,
            kind: ObjectiveKind::ToyMargin,
        }
    }

    pub fn model(&self) -> &Arc<ToyModel> {
        &self.model
    }
}

impl LossFn for ToyObjective {
    fn depth(&self) -> usize {
        self.model.depth()
    }

    fn kind(&self) -> ObjectiveKind {
        self.kind
    }

    fn loss(&self, mask: &LayerMask) -> Result<f64> {
        match self.kind {
            ObjectiveKind::ToyPerplexity => self.model.perplexity(mask),
            _ => self.model.margin(mask),
        }
    }

    fn proxy_scores(&self) -> Result<Vec<f64>> {
        Ok(self.model.angular_proxy().to_vec())
    }
}
