//! Evaluation metrics that need no external model: distinct-n, Self-BLEU,
//! TPR/FPR, and the conditional perplexity ratio under the unsteered backend.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::backend::{log_softmax, Backend, PlanSchedule, SamplingParams};
use crate::bank::DirectionBank;
use crate::error::{Error, Result};
use crate::generator::build_plan;
use crate::par::Parallelism;

/// Replacement for a zero n-gram match count in Self-BLEU.
pub const BLEU_EPSILON: f64 = 0.1;
pub const BLEU_ORDER: usize = 4;

/// Mean over `n = 1..=n_max` of unique/total n-grams. A text shorter than `n`
/// contributes 1.0 at that order.
pub fn distinct_n<T: Hash + Eq>(tokens: &[T], n_max: usize) -> f64 {
    if n_max == 0 {
        return 1.0;
    }
    let total: f64 = (1..=n_max)
        .map(|n| {
            if tokens.len() < n {
                return 1.0;
            }
            let grams: HashSet<&[T]> = tokens.windows(n).collect();
            grams.len() as f64 / (tokens.len() - n + 1) as f64
        })
        .sum();
    total / n_max as f64
}

/// Per-text distinct-n, then the mean over texts.
pub fn mean_distinct_n<T: Hash + Eq>(texts: &[Vec<T>], n_max: usize) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::InvalidInput("distinct-n of an empty corpus".into()));
    }
    Ok(texts.iter().map(|t| distinct_n(t, n_max)).sum::<f64>() / texts.len() as f64)
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU-4 with uniform weights, clipped counts against the maximum
/// over references, zero match counts replaced by [`BLEU_EPSILON`], and the
/// closest-reference brevity penalty (shorter reference on ties).
pub fn sentence_bleu<T: Hash + Eq>(hypothesis: &[T], references: &[&[T]]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::InvalidInput("BLEU needs at least one reference".into()));
    }
    let c = hypothesis.len();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 1..=BLEU_ORDER {
        let hyp = ngram_counts(hypothesis, n);
        let refs: Vec<HashMap<&[T], usize>> = references.iter().map(|r| ngram_counts(r, n)).collect();
        let matched: usize = hyp
            .iter()
            .map(|(g, &cnt)| {
                let max_ref = refs.iter().map(|r| r.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                cnt.min(max_ref)
            })
            .sum();
        let denom = c.saturating_sub(n - 1).max(1) as f64;
        let num = if matched == 0 { BLEU_EPSILON } else { matched as f64 };
        log_p += (num / denom).ln() / BLEU_ORDER as f64;
    }
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("non-empty");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * log_p.exp())
}

/// Mean BLEU-4 of each text against all others.
pub fn self_bleu<T: Hash + Eq + Sync>(corpus: &[Vec<T>], par: Parallelism) -> Result<f64> {
    if corpus.len() < 2 {
        return Err(Error::InvalidInput("Self-BLEU needs at least two texts".into()));
    }
    let scores = par.try_map_range(corpus.len(), |i| {
        let refs: Vec<&[T]> = corpus
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, t)| t.as_slice())
            .collect();
        sentence_bleu(&corpus[i], &refs)
    })?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub positives: usize,
    pub negatives: usize,
}

/// Confusion rates at an inclusive threshold. A rate is `None` when its
/// class is absent.
pub fn tpr_fpr(scores: &[(f64, bool)], threshold: f64) -> Rates {
    let mut r = Rates {
        tpr: None,
        fpr: None,
        true_positives: 0,
        false_positives: 0,
        positives: 0,
        negatives: 0,
    };
    for &(z, label) in scores {
        let hit = z >= threshold;
        if label {
            r.positives += 1;
            r.true_positives += usize::from(hit);
        } else {
            r.negatives += 1;
            r.false_positives += usize::from(hit);
        }
    }
    if r.positives > 0 {
        r.tpr = Some(r.true_positives as f64 / r.positives as f64);
    }
    if r.negatives > 0 {
        r.fpr = Some(r.false_positives as f64 / r.negatives as f64);
    }
    r
}

/// Mean negative log-likelihood of `continuation` given `prompt`, one
/// unsteered forward.
pub fn conditional_nll(backend: &dyn Backend, prompt: &[u32], continuation: &[u32]) -> Result<f64> {
    if continuation.is_empty() {
        return Err(Error::InvalidInput("perplexity of an empty continuation".into()));
    }
    if prompt.is_empty() {
        return Err(Error::InvalidInput("conditional perplexity needs a prompt".into()));
    }
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(continuation);
    let out = backend.forward(&tokens, prompt.len(), None)?;
    let mut nll = 0.0;
    for (i, &tok) in continuation.iter().enumerate() {
        let pos = prompt.len() + i - 1;
        let lp = log_softmax(out.logits_at(pos));
        nll -= lp
            .get(tok as usize)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("token {tok} outside vocabulary")))?;
    }
    Ok(nll / continuation.len() as f64)
}

pub fn conditional_ppl(backend: &dyn Backend, prompt: &[u32], continuation: &[u32]) -> Result<f64> {
    conditional_nll(backend, prompt, continuation).map(f64::exp)
}

/// `PPL(wm | prompt) / PPL(bl | prompt)`, exactly 1 for identical inputs.
pub fn ppl_ratio(backend: &dyn Backend, prompt: &[u32], wm: &[u32], bl: &[u32]) -> Result<f64> {
    Ok(conditional_ppl(backend, prompt, wm)? / conditional_ppl(backend, prompt, bl)?)
}

/// Quality weights from a steering probe.
///
/// Each record is steered alone at `alpha` on every probe prompt; the weight
/// is `min(1, 1 / r)` where `r` is the geometric-mean perplexity ratio of the
/// steered continuations against unsteered ones drawn with the same seeds.
pub fn quality_weights(
    backend: &dyn Backend,
    bank: &DirectionBank,
    prompts: &[Vec<u32>],
    alpha: f64,
    params: &SamplingParams,
    par: Parallelism,
) -> Result<Vec<f64>> {
    if prompts.is_empty() {
        return Err(Error::InvalidInput("quality probe needs prompts".into()));
    }
    let seed_for = |i: usize| {
        let mut s = [0u8; 32];
        s[..8].copy_from_slice(&(i as u64).to_le_bytes());
        s
    };
    let baseline = par.try_map_range(prompts.len(), |i| {
        backend.generate(&prompts[i], None, params, seed_for(i))
    })?;
    par.try_map(&bank.records, |r| {
        let plan = build_plan([r], alpha, 0)?;
        let mut log_ratio = 0.0;
        for (i, p) in prompts.iter().enumerate() {
            let sched = PlanSchedule::document(crate::backend::SteeringPlan {
                apply_from_token: p.len(),
                ..plan.clone()
            });
            let wm = backend.generate(p, Some(&sched), params, seed_for(i))?;
            log_ratio += conditional_nll(backend, p, &wm)? - conditional_nll(backend, p, &baseline[i])?;
        }
        let ratio = (log_ratio / prompts.len() as f64).exp();
        Ok((1.0 / ratio).min(1.0))
    })
}
