//! Generation-model abstraction with residual-stream hook points.
//!
//! A [`Backend`] runs a forward pass over a token sequence, optionally adding
//! `α · per_layer[l]` to the residual at layer `l` for every position at or
//! after `apply_from_token`, and returns logits plus the post-injection
//! [`ActivationTrace`]. The synthetic backend implements it in-process; the
//! bridge backend drives an external `slam-bridge` executable.

mod bridge;
mod synthetic;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::bank::ActivationTrace;
use crate::error::{Error, Result};

pub use bridge::{
    plan_from_json, plan_to_json, read_checksums, verify_checksums, write_checksums, BridgeBackend,
    BridgeInfo, PLAN_SCHEMA,
};
pub use synthetic::{
    BackendSpec, Domain, PlantedPhenomenon, SyntheticBackend, SyntheticWorld, DOMAINS,
    SEPARATOR_TOKEN, SENTENCE_LEN, UNK_TOKEN,
};

/// Per-layer summed steering vectors with one shared α.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringPlan {
    pub per_layer: BTreeMap<usize, Vec<f64>>,
    pub alpha: f64,
    pub apply_from_token: usize,
}

impl SteeringPlan {
    pub fn validate(&self, d_model: usize, layers: &[usize]) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(Error::InvalidInput("steering alpha must be finite".into()));
        }
        for (l, v) in &self.per_layer {
            if !layers.contains(l) {
                return Err(Error::InvalidInput(format!(
                    "plan targets layer {l}, which the backend does not have"
                )));
            }
            if v.len() != d_model {
                return Err(Error::Dimension(format!(
                    "plan vector for layer {l} has length {}, d_model is {d_model}",
                    v.len()
                )));
            }
        }
        Ok(())
    }
}

/// Which plan applies at each position.
///
/// In document mode a single plan covers every position from
/// `apply_from_token`. In sentence mode the plan for position `t` is the one
/// for the sentence that the token at `t + 1` belongs to, i.e. the number of
/// sentence-ending tokens in `apply_from_token..=t`; past the last plan the
/// last one is reused.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanSchedule {
    pub plans: Vec<SteeringPlan>,
    pub sentence_level: bool,
}

impl PlanSchedule {
    pub fn document(plan: SteeringPlan) -> Self {
        Self {
            plans: vec![plan],
            sentence_level: false,
        }
    }

    pub fn sentences(plans: Vec<SteeringPlan>) -> Result<Self> {
        if plans.is_empty() {
            return Err(Error::InvalidInput("sentence schedule needs at least one plan".into()));
        }
        Ok(Self {
            plans,
            sentence_level: true,
        })
    }

    pub fn apply_from_token(&self) -> usize {
        self.plans.first().map(|p| p.apply_from_token).unwrap_or(0)
    }

    pub fn validate(&self, d_model: usize, layers: &[usize]) -> Result<()> {
        if self.plans.is_empty() {
            return Err(Error::InvalidInput("empty plan schedule".into()));
        }
        let start = self.apply_from_token();
        for p in &self.plans {
            p.validate(d_model, layers)?;
            if p.apply_from_token != start {
                return Err(Error::InvalidInput(
                    "all plans in a schedule must share apply_from_token".into(),
                ));
            }
        }
        Ok(())
    }

    /// Plan for sentence `idx`.
    pub fn plan_for_sentence(&self, idx: usize) -> &SteeringPlan {
        if self.sentence_level {
            &self.plans[idx.min(self.plans.len() - 1)]
        } else {
            &self.plans[0]
        }
    }

    /// Plan active at each position, `None` before `apply_from_token`.
    pub fn positions<'a, F>(&'a self, tokens: &[u32], ends_sentence: F) -> Vec<Option<&'a SteeringPlan>>
    where
        F: Fn(u32) -> bool,
    {
        let start = self.apply_from_token();
        let mut sentence = 0;
        tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| {
                if t < start {
                    return None;
                }
                if ends_sentence(tok) {
                    sentence += 1;
                }
                Some(self.plan_for_sentence(if self.sentence_level { sentence } else { 0 }))
            })
            .collect()
    }
}

/// Logits (row-major `num_tokens × vocab`) and the residual trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f32>,
    pub vocab: usize,
    pub trace: ActivationTrace,
}

impl ForwardOutput {
    pub fn logits_at(&self, position: usize) -> &[f32] {
        &self.logits[position * self.vocab..(position + 1) * self.vocab]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 0.9,
            max_new_tokens: 200,
        }
    }
}

pub trait Backend: Send + Sync {
    fn model_id(&self) -> &str;
    fn layers(&self) -> Vec<usize>;
    fn d_model(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<u32>>;
    fn decode(&self, tokens: &[u32]) -> Result<String>;

    /// Whether `token` closes a sentence. Used for sentence-level keying.
    fn ends_sentence(&self, token: u32) -> bool;

    /// One forward pass. Increments the forward counter by exactly one.
    fn forward(
        &self,
        tokens: &[u32],
        prompt_len: usize,
        plan: Option<&PlanSchedule>,
    ) -> Result<ForwardOutput>;

    /// Number of `forward` calls served so far.
    fn forward_calls(&self) -> u64;

    /// Samples a continuation of `prompt` (returned without the prompt).
    ///
    /// The default runs one full forward per new token; backends that can do
    /// better override it.
    fn generate(
        &self,
        prompt: &[u32],
        plan: Option<&PlanSchedule>,
        params: &SamplingParams,
        seed: [u8; 32],
    ) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::InvalidInput("prompt must not be empty".into()));
        }
        let mut rng = ChaCha20Rng::from_seed(seed);
        let mut tokens = prompt.to_vec();
        for _ in 0..params.max_new_tokens {
            let out = self.forward(&tokens, prompt.len(), plan)?;
            let next = sample_next(out.logits_at(tokens.len() - 1), params, &mut rng);
            tokens.push(next);
        }
        Ok(tokens[prompt.len()..].to_vec())
    }
}

/// Nucleus sampling. Temperature 0 (or below) is argmax, lowest id on ties.
pub fn sample_next<R: Rng>(logits: &[f32], params: &SamplingParams, rng: &mut R) -> u32 {
    let nucleus = nucleus(logits, params.temperature, params.top_p);
    if nucleus.len() == 1 {
        return nucleus[0].0;
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(tok, p) in &nucleus {
        acc += p;
        if u < acc {
            return tok;
        }
    }
    nucleus.last().expect("non-empty nucleus").0
}

/// Minimal set of tokens whose tempered probability mass reaches `top_p`,
/// in descending probability order (ties by id), renormalized.
pub fn nucleus(logits: &[f32], temperature: f64, top_p: f64) -> Vec<(u32, f64)> {
    assert!(!logits.is_empty(), "empty logits");
    if temperature <= 0.0 {
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        return vec![(best as u32, 1.0)];
    }
    let max = logits
        .iter()
        .copied()
        .fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut probs: Vec<(u32, f64)> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| (i as u32, ((l as f64 - max) / temperature).exp()))
        .collect();
    let z: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= z);
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut keep = 0;
    let mut mass = 0.0;
    for (i, p) in probs.iter().enumerate() {
        mass += p.1;
        keep = i + 1;
        if mass >= top_p {
            break;
        }
    }
    probs.truncate(keep);
    probs.retain(|p| p.1 > 0.0);
    let z: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= z);
    probs
}

/// Natural log-softmax of one logit row at temperature 1.
pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits
        .iter()
        .copied()
        .fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits
        .iter()
        .map(|&l| (l as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|&l| l as f64 - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn zero_temperature_is_argmax() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let p = SamplingParams {
            temperature: 0.0,
            ..SamplingParams::default()
        };
        assert_eq!(sample_next(&[0.1, 2.0, -1.0, 2.0], &p, &mut rng), 1);
    }

    #[test]
    fn softmax_frequencies_match() {
        let logits = [1.0f32, 0.0, -0.5];
        let p = SamplingParams {
            temperature: 1.0,
            top_p: 1.0,
            max_new_tokens: 1,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let n = 100_000;
        let mut counts = [0u64; 3];
        for _ in 0..n {
            counts[sample_next(&logits, &p, &mut rng) as usize] += 1;
        }
        let lp = log_softmax(&logits);
        let stat: f64 = counts
            .iter()
            .zip(&lp)
            .map(|(&c, l)| {
                let e = l.exp() * n as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        let pval = 1.0 - ChiSquared::new(2.0).unwrap().cdf(stat);
        assert!(pval > 0.01, "p = {pval}, counts {counts:?}");
    }

    #[test]
    fn nucleus_is_minimal() {
        // Tempered probs at T=1: [0.5, 0.3, 0.15, 0.05] → top_p 0.9 keeps 3.
        let probs = [0.5f64, 0.3, 0.15, 0.05];
        let logits: Vec<f32> = probs.iter().map(|p| p.ln() as f32).collect();
        let n = nucleus(&logits, 1.0, 0.9);
        let ids: Vec<u32> = n.iter().map(|x| x.0).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        let p = SamplingParams {
            temperature: 1.0,
            top_p: 0.9,
            max_new_tokens: 1,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..20_000 {
            assert_ne!(sample_next(&logits, &p, &mut rng), 3);
        }
    }

    #[test]
    fn nucleus_handles_masked_logits() {
        let n = nucleus(&[f32::NEG_INFINITY, 0.0, -40.0], 0.7, 0.9);
        assert_eq!(n, vec![(1, 1.0)]);
    }

    #[test]
    fn schedule_positions_follow_sentences() {
        let mk = |x: f64| SteeringPlan {
            per_layer: BTreeMap::from([(0, vec![x])]),
            alpha: 1.0,
            apply_from_token: 2,
        };
        let s = PlanSchedule::sentences(vec![mk(0.0), mk(1.0)]).unwrap();
        // tokens: prompt [5,5], then 7, 0(end), 7, 0(end), 7
        let toks = [5, 5, 7, 0, 7, 0, 7];
        let pos = s.positions(&toks, |t| t == 0);
        let got: Vec<Option<f64>> = pos.iter().map(|p| p.map(|p| p.per_layer[&0][0])).collect();
        assert_eq!(
            got,
            vec![None, None, Some(0.0), Some(1.0), Some(1.0), Some(1.0), Some(1.0)]
        );
        let d = PlanSchedule::document(mk(3.0));
        assert!(d.positions(&toks, |t| t == 0)[2..]
            .iter()
            .all(|p| p.unwrap().per_layer[&0][0] == 3.0));
    }
}
