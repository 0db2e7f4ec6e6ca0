//! Watermarked generation: keyed steering plan, up to `N` candidates with
//! early stop at the calibrated threshold, degeneracy filter, and a
//! deterministic highest-ẑ fallback.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, PlanSchedule, SamplingParams, SteeringPlan};
use crate::bank::{DetectionResult, DirectionBank, Document, FeatureRecord, NullStats, WatermarkKey};
use crate::detector;
use crate::error::{Error, Result};
use crate::selection::{derive_seed, hmac_seed, selection_for_text, SelectionSpec};

/// Groups records by layer and sums their directions. `alpha` is stored once.
pub fn build_plan<'a, I>(selected: I, alpha: f64, prompt_len: usize) -> Result<SteeringPlan>
where
    I: IntoIterator<Item = &'a FeatureRecord>,
{
    let mut per_layer: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in selected {
        let acc = per_layer
            .entry(r.layer)
            .or_insert_with(|| vec![0.0; r.direction.len()]);
        if acc.len() != r.direction.len() {
            return Err(Error::Dimension(format!(
                "record {} has width {}, expected {}",
                r.feature_id,
                r.direction.len(),
                acc.len()
            )));
        }
        for (a, &d) in acc.iter_mut().zip(&r.direction) {
            *a += d as f64;
        }
    }
    if per_layer.is_empty() {
        return Err(Error::InvalidInput("cannot build a plan from an empty selection".into()));
    }
    Ok(SteeringPlan {
        per_layer,
        alpha,
        apply_from_token: prompt_len,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    Empty,
    TooShort,
    PromptEcho,
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Rejection::Empty => "empty",
            Rejection::TooShort => "too_short",
            Rejection::PromptEcho => "prompt_echo",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegeneracyConfig {
    pub min_tokens: usize,
    pub ngram: usize,
    /// Only the first `window` continuation tokens are checked for echo.
    pub window: usize,
    pub max_overlap: f64,
}

impl Default for DegeneracyConfig {
    fn default() -> Self {
        Self {
            min_tokens: 32,
            ngram: 8,
            window: 32,
            max_overlap: 0.5,
        }
    }
}

/// Fraction of the n-grams in the first `window` continuation tokens that
/// occur verbatim in the prompt. Zero when the window holds no n-gram.
pub fn echo_overlap(prompt: &[u32], continuation: &[u32], ngram: usize, window: usize) -> f64 {
    if ngram == 0 {
        return 0.0;
    }
    let head = &continuation[..continuation.len().min(window)];
    if head.len() < ngram || prompt.len() < ngram {
        return 0.0;
    }
    let seen: HashSet<&[u32]> = prompt.windows(ngram).collect();
    let grams: Vec<&[u32]> = head.windows(ngram).collect();
    let hits = grams.iter().filter(|g| seen.contains(*g)).count();
    hits as f64 / grams.len() as f64
}

/// `None` means the candidate is acceptable.
pub fn degeneracy_filter(prompt: &[u32], continuation: &[u32], cfg: &DegeneracyConfig) -> Option<Rejection> {
    if continuation.is_empty() {
        return Some(Rejection::Empty);
    }
    if continuation.len() < cfg.min_tokens {
        return Some(Rejection::TooShort);
    }
    let overlap = echo_overlap(prompt, continuation, cfg.ngram, cfg.window);
    if overlap > 0.0 && overlap > cfg.max_overlap {
        return Some(Rejection::PromptEcho);
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationParams {
    pub alpha: f64,
    pub candidates: usize,
    pub threshold: f64,
    pub sampling: SamplingParams,
    pub degeneracy: DegeneracyConfig,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            alpha: 4.0,
            candidates: 4,
            threshold: detector::DEFAULT_THRESHOLD,
            sampling: SamplingParams::default(),
            degeneracy: DegeneracyConfig::default(),
        }
    }
}

/// What happened to one candidate slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum Attempt {
    Rejected { reason: Rejection },
    Scored { z_hat: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub document: Document,
    pub detection: DetectionResult,
    pub candidates_tried: usize,
    /// Index of the returned candidate in `attempts`.
    pub chosen: usize,
    pub attempts: Vec<Attempt>,
}

/// The steering schedule for `doc_id` under `key`.
///
/// Sentence mode carries one plan per possible sentence of a continuation of
/// at most `max_new_tokens` tokens.
pub fn plan_schedule(
    key: &WatermarkKey,
    doc_id: &str,
    bank: &DirectionBank,
    spec: &SelectionSpec,
    alpha: f64,
    prompt_len: usize,
    max_new_tokens: usize,
) -> Result<PlanSchedule> {
    let n = if spec.sentence_level { max_new_tokens + 1 } else { 1 };
    let sels = selection_for_text(key, doc_id, spec, bank, n)?;
    for sel in sels.values() {
        for w in &sel.warnings {
            log::warn!("{doc_id}: {w}");
        }
    }
    let plans = sels
        .values()
        .map(|s| build_plan(s.records(), alpha, prompt_len))
        .collect::<Result<Vec<_>>>()?;
    if spec.sentence_level {
        PlanSchedule::sentences(plans)
    } else {
        Ok(PlanSchedule::document(plans.into_iter().next().expect("one plan")))
    }
}

/// Sampling seed of candidate `i`: `SHA-256(hmac_seed(key, doc_id, 0) ‖ le_u64(i))`.
pub fn candidate_seed(key: &WatermarkKey, doc_id: &str, i: u64) -> Result<[u8; 32]> {
    Ok(derive_seed(&hmac_seed(key, doc_id, 0)?, i))
}

/// Runs the candidate loop. Every attempt consumes a slot, degenerate or not,
/// so at most `params.candidates` samples are drawn. Each non-degenerate
/// candidate is scored by [`detector::detect`] on a fresh unsteered forward.
#[allow(clippy::too_many_arguments)]
pub fn generate_watermarked(
    backend: &dyn Backend,
    prompt: &[u32],
    key: &WatermarkKey,
    doc_id: &str,
    bank: &DirectionBank,
    spec: &SelectionSpec,
    nulls: &NullStats,
    params: &GenerationParams,
) -> Result<Generation> {
    if params.candidates == 0 {
        return Err(Error::InvalidInput("candidate budget must be at least 1".into()));
    }
    if prompt.is_empty() {
        return Err(Error::InvalidInput("prompt must not be empty".into()));
    }
    nulls.covers(bank)?;
    let schedule = plan_schedule(
        key,
        doc_id,
        bank,
        spec,
        params.alpha,
        prompt.len(),
        params.sampling.max_new_tokens,
    )?;

    let mut attempts = Vec::with_capacity(params.candidates);
    let mut best: Option<(usize, Document, DetectionResult)> = None;
    for i in 0..params.candidates {
        let seed = candidate_seed(key, doc_id, i as u64)?;
        let cont = backend.generate(prompt, Some(&schedule), &params.sampling, seed)?;
        if let Some(reason) = degeneracy_filter(prompt, &cont, &params.degeneracy) {
            log::debug!("{doc_id}: candidate {i} rejected ({reason})");
            attempts.push(Attempt::Rejected { reason });
            continue;
        }
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(&cont);
        let doc = Document::new(doc_id, tokens, prompt.len())?;
        let det = detector::detect(backend, &doc, key, bank, spec, nulls, params.threshold)?;
        attempts.push(Attempt::Scored { z_hat: det.z_hat });
        let clears = det.z_hat >= params.threshold;
        if best.as_ref().map_or(true, |(_, _, b)| det.z_hat > b.z_hat) {
            best = Some((i, doc, det));
        }
        if clears {
            break;
        }
    }
    let candidates_tried = attempts.len();
    match best {
        Some((chosen, document, detection)) => Ok(Generation {
            document,
            detection,
            candidates_tried,
            chosen,
            attempts,
        }),
        None => Err(Error::Generation(format!(
            "all {candidates_tried} candidates for {doc_id} were degenerate"
        ))),
    }
}
