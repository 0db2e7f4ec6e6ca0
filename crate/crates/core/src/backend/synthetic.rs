//! Deterministic synthetic backend and world generator.
//!
//! The residual stream lives in `R^d`. A small set of orthonormal "planted"
//! directions carries the structural signal: two per phenomenon (target form
//! and base form). Token classes are tied to planted directions through the
//! embedding and the output readout, so pushing the residual along a planted
//! direction shifts the frequency of the matching token class. Layer maps act
//! only on the orthogonal complement of the planted span, which keeps every
//! planted coordinate of an unsteered trace a pure function of the token.
//!
//! Next-token logits are a fixed random bigram table plus the planted-class
//! readout of the final residual. The complement of the residual carries
//! token identity, domain nuisance and layer noise but does not move the
//! output distribution.
//!
//! Sentences are blocks of [`SENTENCE_LEN`] tokens; the last one is always
//! the separator, enforced through a logit penalty.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{sample_next, Backend, ForwardOutput, PlanSchedule, SamplingParams, SteeringPlan};
use crate::bank::{ActivationTrace, SaeSpec};
use crate::error::{Error, Result};
use crate::linalg::{self, gaussian_vec};
use crate::mining::ContrastivePair;

pub const SEPARATOR_TOKEN: u32 = 0;
pub const UNK_TOKEN: u32 = 1;
pub const SENTENCE_LEN: usize = 16;
pub const DOMAINS: [&str; 5] = ["finance", "biology", "sports", "fiction", "news"];

const CLASS_SIZE: usize = 16;
const FIRST_CLASS_TOKEN: usize = 2;
const PHENOMENA: [&str; 8] = [
    "passive_voice",
    "it_cleft",
    "relative_clause",
    "topicalization",
    "nominalization",
    "there_insertion",
    "dative_shift",
    "negative_inversion",
];

// World constants.
const EMBED_GAIN: f64 = 0.5;
const EMBED_NOISE: f64 = 4.0;
const UNEMBED_GAIN: f64 = 0.6;
const LOGIT_SCALE: f64 = 1.0;
const READOUT_THRESHOLD: f64 = 0.5;
const NUISANCE_NORM: f64 = 2.0;
const LAYER_BIAS_SCALE: f64 = 0.1;
const SPECTRAL_NORM: f64 = 0.95;
const STRUCTURE_PENALTY: f32 = 40.0;
const PLANTED_BIAS: f32 = -0.25;
const NUISANCE_BIAS: f32 = -0.25;
const DISTRACTOR_BIAS: f32 = -1.0;
const SAE_FEATURES: usize = 128;
const PAIR_TOKENS: usize = SENTENCE_LEN;
const LEXICON_COVERAGE: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSpec {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub seed: u64,
    pub num_planted: usize,
    pub plant_gain: f64,
    pub noise_sigma: f64,
}

impl Default for BackendSpec {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            num_layers: 8,
            seed: 0,
            num_planted: 6,
            plant_gain: 2.0,
            noise_sigma: 0.5,
        }
    }
}

impl BackendSpec {
    pub fn validate(&self) -> Result<()> {
        let g = self.num_planted;
        if g == 0 {
            return Err(Error::InvalidInput("num_planted must be at least 1".into()));
        }
        if 2 * g + DOMAINS.len() > self.d_model {
            return Err(Error::InvalidInput(format!(
                "{g} phenomena need 2x{g} planted plus {} nuisance dimensions, d_model is {}",
                DOMAINS.len(),
                self.d_model
            )));
        }
        let min_vocab = FIRST_CLASS_TOKEN + 2 * g * CLASS_SIZE;
        if self.vocab_size < min_vocab {
            return Err(Error::InvalidInput(format!(
                "vocab_size {} is below the {min_vocab} tokens the classes need",
                self.vocab_size
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::InvalidInput("num_layers must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.plant_gain.is_finite() {
            return Err(Error::InvalidInput("noise_sigma must be >= 0, plant_gain finite".into()));
        }
        Ok(())
    }

    pub fn model_id(&self) -> String {
        format!("synthetic-v1-seed{}", self.seed)
    }
}

/// Deterministic RNG stream for one construction step.
fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedPhenomenon {
    pub name: String,
    /// Direction expressed by the target construction (x⁺).
    pub target: Vec<f64>,
    /// Direction expressed by the base construction (x⁻).
    pub base: Vec<f64>,
    pub peak_layer: usize,
    pub target_class: usize,
    pub base_class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub name: String,
    pub nuisance: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Backend
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct SyntheticBackend {
    model_id: String,
    vocab: usize,
    d: usize,
    planted_basis: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    embed: Vec<Vec<f64>>,
    /// Row-major `vocab × vocab`: context logits indexed by (current, next).
    bigram: Vec<f32>,
    words: Vec<String>,
    index: HashMap<String, u32>,
    token_class: Vec<Option<usize>>,
    calls: AtomicU64,
}

impl SyntheticBackend {
    fn project_out(&self, v: &mut [f64]) {
        project_out(&self.planted_basis, v);
    }

    /// Residual after every layer for one position.
    fn residuals(&self, token: u32, plan: Option<&SteeringPlan>) -> Vec<Vec<f64>> {
        let mut h = self.embed[token as usize].clone();
        let mut pre = vec![0.0; self.d];
        let mut out = Vec::with_capacity(self.weights.len());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            linalg::matvec(w, self.d, self.d, &h, &mut pre);
            for (p, bi) in pre.iter_mut().zip(b) {
                *p = (*p + bi).tanh();
            }
            self.project_out(&mut pre);
            for (hi, p) in h.iter_mut().zip(&pre) {
                *hi += p;
            }
            if let Some(plan) = plan {
                if let Some(v) = plan.per_layer.get(&l) {
                    linalg::axpy(plan.alpha, v, &mut h);
                }
            }
            out.push(h.clone());
        }
        out
    }

    /// Logits predicting the token at `position + 1` from the token at
    /// `position` and its final residual. Only the planted coordinates of the
    /// residual are read; the rest of the context is the bigram table.
    fn logits(&self, token: u32, h_last: &[f64], position: usize) -> Vec<f32> {
        let next_is_separator = (position + 1) % SENTENCE_LEN == SENTENCE_LEN - 1;
        let class_score: Vec<f64> = self
            .planted_basis
            .iter()
            .map(|p| UNEMBED_GAIN * (linalg::dot(p, h_last) - READOUT_THRESHOLD).max(0.0))
            .collect();
        let row = &self.bigram[token as usize * self.vocab..(token as usize + 1) * self.vocab];
        row.iter()
            .enumerate()
            .map(|(t, &b)| {
                let mut l = b;
                if let Some(c) = self.token_class[t] {
                    l += class_score[c] as f32;
                }
                let is_sep = t as u32 == SEPARATOR_TOKEN;
                if t as u32 == UNK_TOKEN || is_sep != next_is_separator {
                    l -= STRUCTURE_PENALTY;
                }
                l
            })
            .collect()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("token sequence must not be empty".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(Error::InvalidInput(format!(
                "token id {t} outside vocabulary of {}",
                self.vocab
            )));
        }
        Ok(())
    }

    /// Forward pass without touching the call counter.
    fn run(
        &self,
        tokens: &[u32],
        prompt_len: usize,
        plan: Option<&PlanSchedule>,
    ) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        if prompt_len > tokens.len() {
            return Err(Error::InvalidInput(format!(
                "prompt_len {prompt_len} exceeds {} tokens",
                tokens.len()
            )));
        }
        if let Some(s) = plan {
            s.validate(self.d, &self.layers())?;
        }
        let per_pos = match plan {
            Some(s) => s.positions(tokens, |t| self.ends_sentence(t)),
            None => vec![None; tokens.len()],
        };
        let n = tokens.len();
        let nl = self.weights.len();
        let mut mats = vec![Vec::with_capacity(n * self.d); nl];
        let mut logits = Vec::with_capacity(n * self.vocab);
        for (t, (&tok, p)) in tokens.iter().zip(&per_pos).enumerate() {
            let hs = self.residuals(tok, *p);
            for (m, h) in mats.iter_mut().zip(&hs) {
                m.extend(h.iter().map(|&x| x as f32));
            }
            logits.extend(self.logits(tok, &hs[nl - 1], t));
        }
        let trace = ActivationTrace::new(
            self.model_id.clone(),
            (0..nl).collect(),
            self.d,
            tokens.to_vec(),
            mats,
            prompt_len,
        )?;
        Ok(ForwardOutput {
            logits,
            vocab: self.vocab,
            trace,
        })
    }

    pub fn word(&self, token: u32) -> Option<&str> {
        self.words.get(token as usize).map(String::as_str)
    }

    /// Planted-class index of a token, if any.
    pub fn token_class(&self, token: u32) -> Option<usize> {
        self.token_class.get(token as usize).copied().flatten()
    }

    pub fn class_tokens(&self, class: usize) -> std::ops::Range<u32> {
        let start = (FIRST_CLASS_TOKEN + class * CLASS_SIZE) as u32;
        start..start + CLASS_SIZE as u32
    }
}

fn project_out(basis: &[Vec<f64>], v: &mut [f64]) {
    for b in basis {
        let c = linalg::dot(v, b);
        linalg::axpy(-c, b, v);
    }
}

impl Backend for SyntheticBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn layers(&self) -> Vec<usize> {
        (0..self.weights.len()).collect()
    }

    fn d_model(&self) -> usize {
        self.d
    }

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        Ok(text
            .split_whitespace()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK_TOKEN))
            .collect())
    }

    fn decode(&self, tokens: &[u32]) -> Result<String> {
        let words: Vec<&str> = tokens
            .iter()
            .map(|&t| {
                self.word(t)
                    .ok_or_else(|| Error::InvalidInput(format!("token id {t} outside vocabulary")))
            })
            .collect::<Result<_>>()?;
        Ok(words.join(" "))
    }

    fn ends_sentence(&self, token: u32) -> bool {
        token == SEPARATOR_TOKEN
    }

    fn forward(
        &self,
        tokens: &[u32],
        prompt_len: usize,
        plan: Option<&PlanSchedule>,
    ) -> Result<ForwardOutput> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.run(tokens, prompt_len, plan)
    }

    fn forward_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Incremental: each new token needs only its predecessor's residual.
    fn generate(
        &self,
        prompt: &[u32],
        plan: Option<&PlanSchedule>,
        params: &SamplingParams,
        seed: [u8; 32],
    ) -> Result<Vec<u32>> {
        self.check_tokens(prompt)?;
        if let Some(s) = plan {
            s.validate(self.d, &self.layers())?;
        }
        let mut rng = ChaCha20Rng::from_seed(seed);
        let mut tokens = prompt.to_vec();
        let start = plan.map(|s| s.apply_from_token()).unwrap_or(usize::MAX);
        let mut sentence = 0usize;
        for _ in 0..params.max_new_tokens {
            let t = tokens.len() - 1;
            let tok = tokens[t];
            let active = match plan {
                Some(s) if t >= start => {
                    if self.ends_sentence(tok) {
                        sentence += 1;
                    }
                    Some(s.plan_for_sentence(sentence))
                }
                _ => None,
            };
            let hs = self.residuals(tok, active);
            let logits = self.logits(tok, hs.last().expect("at least one layer"), t);
            tokens.push(sample_next(&logits, params, &mut rng));
        }
        Ok(tokens[prompt.len()..].to_vec())
    }
}

// ---------------------------------------------------------------------------
// World construction
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct SyntheticWorld {
    pub spec: BackendSpec,
    pub backend: SyntheticBackend,
    /// One SAE per backend layer, indexed by layer.
    pub saes: Vec<SaeSpec>,
    pub phenomena: Vec<PlantedPhenomenon>,
    pub domains: Vec<Domain>,
}

fn make_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    const CONS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(2..=4);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(*CONS.choose(rng).expect("non-empty") as char);
            w.push(*VOWELS.choose(rng).expect("non-empty") as char);
        }
        if rng.gen_bool(0.5) {
            w.push(*CONS.choose(rng).expect("non-empty") as char);
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn random_complement_unit(basis: &[Vec<f64>], d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut v = gaussian_vec(rng, d);
        project_out(basis, &mut v);
        if let Some(u) = linalg::normalized(&v, 1e-6) {
            return u;
        }
    }
}

impl SyntheticWorld {
    pub fn new(spec: BackendSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.d_model;
        let g = spec.num_planted;
        let seed = spec.seed;

        let mut rng = rng_for(seed, "planted");
        let raw: Vec<Vec<f64>> = (0..2 * g).map(|_| gaussian_vec(&mut rng, d)).collect();
        let planted = linalg::orthonormalize(&raw);
        if planted.len() != 2 * g {
            return Err(Error::Invariant("planted directions are linearly dependent".into()));
        }

        let mut rng = rng_for(seed, "domains");
        let mut nuis: Vec<Vec<f64>> = (0..DOMAINS.len())
            .map(|_| {
                let mut v = gaussian_vec(&mut rng, d);
                project_out(&planted, &mut v);
                v
            })
            .collect();
        let mean: Vec<f64> = (0..d)
            .map(|i| nuis.iter().map(|v| v[i]).sum::<f64>() / nuis.len() as f64)
            .collect();
        for v in &mut nuis {
            for (x, m) in v.iter_mut().zip(&mean) {
                *x -= m;
            }
        }
        let avg_norm = nuis.iter().map(|v| linalg::norm(v)).sum::<f64>() / nuis.len() as f64;
        for v in &mut nuis {
            linalg::scale(v, NUISANCE_NORM / avg_norm);
        }
        let domains: Vec<Domain> = DOMAINS
            .iter()
            .zip(nuis)
            .map(|(n, v)| Domain {
                name: n.to_string(),
                nuisance: v,
            })
            .collect();

        let phenomena: Vec<PlantedPhenomenon> = (0..g)
            .map(|p| PlantedPhenomenon {
                name: PHENOMENA
                    .get(p)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("phenomenon_{p}")),
                target: planted[2 * p].clone(),
                base: planted[2 * p + 1].clone(),
                peak_layer: (2 + p % 4).min(spec.num_layers - 1),
                target_class: 2 * p,
                base_class: 2 * p + 1,
            })
            .collect();

        // Layers act on the complement of the planted span only.
        let mut rng = rng_for(seed, "layers");
        let mut weights = Vec::with_capacity(spec.num_layers);
        let mut biases = Vec::with_capacity(spec.num_layers);
        for _ in 0..spec.num_layers {
            let a = gaussian_vec(&mut rng, d * d);
            // W = P⊥ A P⊥, built column- then row-wise.
            let mut w = a;
            for r in 0..d {
                project_out(&planted, &mut w[r * d..(r + 1) * d]);
            }
            for c in 0..d {
                let mut col: Vec<f64> = (0..d).map(|r| w[r * d + c]).collect();
                project_out(&planted, &mut col);
                for r in 0..d {
                    w[r * d + c] = col[r];
                }
            }
            let s = linalg::spectral_norm(&w, d);
            linalg::scale(&mut w, SPECTRAL_NORM / s);
            weights.push(w);
            let mut b = gaussian_vec(&mut rng, d);
            linalg::scale(&mut b, LAYER_BIAS_SCALE);
            project_out(&planted, &mut b);
            biases.push(b);
        }

        let v = spec.vocab_size;
        let mut token_class = vec![None; v];
        for c in 0..2 * g {
            for t in 0..CLASS_SIZE {
                token_class[FIRST_CLASS_TOKEN + c * CLASS_SIZE + t] = Some(c);
            }
        }

        let mut rng = rng_for(seed, "embed");
        let embed: Vec<Vec<f64>> = (0..v)
            .map(|t| {
                let mut e = random_complement_unit(&planted, d, &mut rng);
                linalg::scale(&mut e, EMBED_NOISE);
                if let Some(c) = token_class[t] {
                    linalg::axpy(EMBED_GAIN, &planted[c], &mut e);
                }
                e
            })
            .collect();

        let mut rng = rng_for(seed, "words");
        let mut words = vec![".".to_string(), "<unk>".to_string()];
        words.extend(make_words(v - 2, &mut rng));
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();

        let mut backend = SyntheticBackend {
            model_id: spec.model_id(),
            vocab: v,
            d,
            planted_basis: planted.clone(),
            weights,
            biases,
            embed,
            bigram: Vec::new(),
            words,
            index,
            token_class: token_class.clone(),
            calls: AtomicU64::new(0),
        };

        let mut rng = rng_for(seed, "bigram");
        let normal = Normal::new(0.0, LOGIT_SCALE).expect("valid normal");
        backend.bigram = (0..v * v).map(|_| normal.sample(&mut rng) as f32).collect();

        // One SAE per layer: planted rows, nuisance rows, random distractors.
        let mut saes = Vec::with_capacity(spec.num_layers);
        for l in 0..spec.num_layers {
            let mut rng = rng_for(seed, &format!("sae-{l}"));
            let mut rows: Vec<Vec<f64>> = planted.clone();
            let mut bias: Vec<f32> = vec![PLANTED_BIAS; planted.len()];
            for dom in &domains {
                rows.push(linalg::normalized(&dom.nuisance, 1e-12).expect("non-zero nuisance"));
                bias.push(NUISANCE_BIAS);
            }
            while rows.len() < SAE_FEATURES.max(rows.len()) {
                rows.push(random_complement_unit(&planted, d, &mut rng));
                bias.push(DISTRACTOR_BIAS);
            }
            let flat: Vec<f32> = rows.iter().flatten().map(|&x| x as f32).collect();
            saes.push(SaeSpec {
                sae_id: format!("synthetic-sae-L{l}"),
                layer: l,
                n_features: rows.len(),
                d_model: d,
                encoder: flat.clone(),
                encoder_bias: bias,
                decoder: flat,
            });
        }

        Ok(Self {
            spec,
            backend,
            saes,
            phenomena,
            domains,
        })
    }

    /// Default mining layers (2..=5, clipped to the model depth).
    pub fn mining_layers(&self) -> Vec<usize> {
        (2..=5).filter(|&l| l < self.spec.num_layers).collect()
    }

    /// Layer profile of a phenomenon's contrast strength.
    pub fn profile(&self, phenomenon: usize, layer: usize) -> f64 {
        let peak = self.phenomena[phenomenon].peak_layer as f64;
        (-(layer as f64 - peak).powi(2) / 2.0).exp().max(0.2)
    }

    /// SAE row index of the target (`true`) or base direction of a phenomenon.
    pub fn planted_feature(&self, phenomenon: usize, target: bool) -> usize {
        2 * phenomenon + usize::from(!target)
    }

    /// Samples `len` tokens from the unsteered backend, starting from a
    /// random word at a sentence start.
    fn sample_text(&self, len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<u32>> {
        let first = rng.gen_range(FIRST_CLASS_TOKEN as u32..self.spec.vocab_size as u32);
        let params = SamplingParams {
            max_new_tokens: len - 1,
            ..SamplingParams::default()
        };
        let mut seed = [0u8; 32];
        rng.fill(&mut seed);
        let mut toks = vec![first];
        toks.extend(self.backend.generate(&[first], None, &params, seed)?);
        Ok(toks)
    }

    /// `n` prompts of `len` tokens (use a multiple of the sentence length so
    /// continuations start on a sentence boundary).
    pub fn prompts(&self, n: usize, len: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
        if len == 0 {
            return Err(Error::InvalidInput("prompt length must be positive".into()));
        }
        let mut rng = rng_for(self.spec.seed ^ seed.rotate_left(17), "prompts");
        (0..n).map(|_| self.sample_text(len, &mut rng)).collect()
    }

    /// Contrastive pairs: `per_domain` pairs per (phenomenon, domain).
    ///
    /// Both sides share a base trace of sampled tokens; x⁺ adds
    /// `δ·profile(l)·target + ½·nuisance`, x⁻ adds
    /// `δ·profile(l)·base − ½·nuisance`, each with independent isotropic noise.
    pub fn pairs(&self, per_domain: usize, seed: u64) -> Result<Vec<ContrastivePair>> {
        let mut rng = rng_for(self.spec.seed ^ seed.rotate_left(29), "pairs");
        let noise = Normal::new(0.0, self.spec.noise_sigma.max(0.0))
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        let layers = self.backend.layers();
        let d = self.spec.d_model;
        let delta = self.spec.plant_gain;
        let mut out = Vec::new();
        for (pi, ph) in self.phenomena.iter().enumerate() {
            for dom in &self.domains {
                for k in 0..per_domain {
                    let toks = self.sample_text(PAIR_TOKENS, &mut rng)?;
                    let base = self.backend.run(&toks, 0, None)?.trace;
                    let mut side = |dir: &[f64], sign: f64| -> Result<ActivationTrace> {
                        let mats = layers
                            .iter()
                            .map(|&l| {
                                let shift = delta * self.profile(pi, l);
                                let mut m = Vec::with_capacity(toks.len() * d);
                                for row in base.rows(l).expect("layer present") {
                                    for i in 0..d {
                                        let mut x = row[i] as f64
                                            + shift * dir[i]
                                            + sign * 0.5 * dom.nuisance[i];
                                        if self.spec.noise_sigma > 0.0 {
                                            x += noise.sample(&mut rng);
                                        }
                                        m.push(x as f32);
                                    }
                                }
                                m
                            })
                            .collect();
                        ActivationTrace::new(
                            self.backend.model_id.clone(),
                            layers.clone(),
                            d,
                            toks.clone(),
                            mats,
                            0,
                        )
                    };
                    let pos = side(&ph.target, 1.0)?;
                    let neg = side(&ph.base, -1.0)?;
                    out.push(ContrastivePair {
                        pair_id: format!("{}-{}-{k:03}", ph.name, dom.name),
                        phenomenon: ph.name.clone(),
                        domain: dom.name.clone(),
                        pos,
                        neg,
                    });
                }
            }
        }
        Ok(out)
    }

    /// Class-preserving synonym lexicon covering about 70% of class words.
    pub fn lexicon(&self) -> BTreeMap<String, Vec<String>> {
        let mut rng = rng_for(self.spec.seed, "lexicon");
        let mut lex = BTreeMap::new();
        for c in 0..2 * self.spec.num_planted {
            let members: Vec<u32> = self.backend.class_tokens(c).collect();
            for &t in &members {
                if !rng.gen_bool(LEXICON_COVERAGE) {
                    continue;
                }
                let others: Vec<&u32> = members.iter().filter(|&&m| m != t).collect();
                let syn: Vec<String> = others
                    .choose_multiple(&mut rng, 2)
                    .map(|&&m| self.backend.words[m as usize].clone())
                    .collect();
                lex.insert(self.backend.words[t as usize].clone(), syn);
            }
        }
        lex
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::contrastive_stats;
    use crate::mining::consistency;
    use crate::sae::encode_token;

    fn world() -> SyntheticWorld {
        SyntheticWorld::new(BackendSpec {
            seed: 7,
            ..BackendSpec::default()
        })
        .unwrap()
    }

    fn plan(layer: usize, v: Vec<f64>, alpha: f64, from: usize) -> PlanSchedule {
        PlanSchedule::document(SteeringPlan {
            per_layer: BTreeMap::from([(layer, v)]),
            alpha,
            apply_from_token: from,
        })
    }

    #[test]
    fn construction_is_deterministic() {
        let a = world();
        let b = world();
        assert_eq!(a.saes, b.saes);
        assert_eq!(a.phenomena, b.phenomena);
        let toks = a.prompts(1, 32, 1).unwrap().remove(0);
        assert_eq!(toks, b.prompts(1, 32, 1).unwrap().remove(0));
        let fa = a.backend.forward(&toks, 16, None).unwrap();
        let fb = b.backend.forward(&toks, 16, None).unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn too_many_phenomena_is_an_error() {
        let spec = BackendSpec {
            d_model: 16,
            num_planted: 6,
            ..BackendSpec::default()
        };
        assert!(SyntheticWorld::new(spec).is_err());
    }

    #[test]
    fn zero_alpha_and_no_plan_agree() {
        let w = world();
        let toks = w.prompts(1, 48, 2).unwrap().remove(0);
        let v = w.phenomena[0].target.clone();
        let a = w.backend.forward(&toks, 32, None).unwrap();
        let b = w.backend.forward(&toks, 32, Some(&plan(3, v, 0.0, 32))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn injection_readback_and_hook_locality() {
        let w = world();
        let toks = w.prompts(1, 48, 3).unwrap().remove(0);
        let v: Vec<f64> = w.phenomena[1].target.iter().map(|x| x * 1.5).collect();
        let alpha = 2.0;
        let base = w.backend.forward(&toks, 32, None).unwrap().trace;
        let steered = w
            .backend
            .forward(&toks, 32, Some(&plan(4, v.clone(), alpha, 32)))
            .unwrap()
            .trace;
        for t in 0..toks.len() {
            for l in 0..4 {
                assert_eq!(base.row(l, t), steered.row(l, t), "layer {l} pos {t}");
            }
            let a = base.row(4, t).unwrap();
            let b = steered.row(4, t).unwrap();
            for i in 0..w.spec.d_model {
                let want = if t >= 32 { alpha * v[i] } else { 0.0 };
                assert!(((b[i] - a[i]) as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn generate_matches_forward_logits() {
        let w = world();
        let prompt = w.prompts(1, 32, 4).unwrap().remove(0);
        let p = plan(2, w.phenomena[0].target.clone(), 2.0, prompt.len());
        let params = SamplingParams {
            temperature: 0.0,
            top_p: 1.0,
            max_new_tokens: 20,
        };
        let cont = w.backend.generate(&prompt, Some(&p), &params, [1; 32]).unwrap();
        let mut all = prompt.clone();
        all.extend(&cont);
        let out = w.backend.forward(&all, prompt.len(), Some(&p)).unwrap();
        for t in prompt.len() - 1..all.len() - 1 {
            let row = out.logits_at(t);
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            assert_eq!(best as u32, all[t + 1], "position {t}");
        }
    }

    #[test]
    fn sentences_end_with_separator() {
        let w = world();
        let p = w.prompts(3, 64, 5).unwrap();
        for toks in p {
            for (i, &t) in toks.iter().enumerate() {
                assert_eq!(t == SEPARATOR_TOKEN, i % SENTENCE_LEN == SENTENCE_LEN - 1);
                assert_ne!(t, UNK_TOKEN);
            }
        }
    }

    #[test]
    fn encode_decode_roundtrip() {
        let w = world();
        let toks = w.prompts(1, 32, 6).unwrap().remove(0);
        let text = w.backend.decode(&toks).unwrap();
        assert_eq!(w.backend.encode(&text).unwrap(), toks);
        assert_eq!(w.backend.encode("zzzzqq").unwrap(), vec![UNK_TOKEN]);
        for word in &w.backend.words[2..] {
            assert!(word.chars().all(|c| c.is_ascii_alphabetic()));
            assert!((4..=9).contains(&word.len()));
        }
    }

    #[test]
    fn planted_coordinates_depend_only_on_token() {
        let w = world();
        let toks = w.prompts(1, 32, 8).unwrap().remove(0);
        let tr = w.backend.forward(&toks, 0, None).unwrap().trace;
        for (t, &tok) in toks.iter().enumerate() {
            for l in 0..w.spec.num_layers {
                let row = tr.row(l, t).unwrap();
                for (c, ph) in w.phenomena.iter().enumerate() {
                    let proj: f64 = row.iter().zip(&ph.target).map(|(&a, b)| a as f64 * b).sum();
                    let want = if w.backend.token_class(tok) == Some(2 * c) {
                        EMBED_GAIN
                    } else {
                        0.0
                    };
                    assert!((proj - want).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn noiseless_pairs_give_exact_planted_contrast() {
        // With noise 0, the target-form feature sees +δ·profile on x⁺ and
        // nothing extra on x⁻. Whenever its pre-activation is positive on
        // both sides the pooled difference equals δ·profile exactly.
        let w = SyntheticWorld::new(BackendSpec {
            seed: 3,
            noise_sigma: 0.0,
            ..BackendSpec::default()
        })
        .unwrap();
        let pairs = w.pairs(2, 1).unwrap();
        let layer = 3;
        let sae = &w.saes[layer];
        for p in pairs.iter().filter(|p| p.phenomenon == w.phenomena[0].name) {
            let j = w.planted_feature(0, true);
            let diff = {
                let s = contrastive_stats(std::slice::from_ref(p), sae, layer).unwrap();
                s.delta_mu[j]
            };
            // On x⁻ the target feature sees only the class embedding (0 or 0.5) minus 0.25.
            let mut expected = 0.0;
            for t in 0..p.pos.num_tokens() {
                let cp = encode_token(sae, p.pos.row(layer, t).unwrap()).unwrap()[j];
                let cn = encode_token(sae, p.neg.row(layer, t).unwrap()).unwrap()[j];
                expected += cp - cn;
            }
            expected /= p.pos.num_tokens() as f64;
            assert!((diff - expected).abs() < 1e-9);
            let shift = w.spec.plant_gain * w.profile(0, layer);
            // Pre-activation on x⁺ is embed + shift - 0.25 > 0 always, so the
            // difference is at least shift - 0.25 per token.
            assert!(diff >= shift - 0.25 - 1e-6, "diff {diff} shift {shift}");
            assert!(diff <= shift + 1e-6);
        }
    }

    #[test]
    fn planted_feature_is_more_consistent_than_nuisance() {
        let w = world();
        let pairs = w.pairs(8, 2).unwrap();
        let ph0: Vec<_> = pairs
            .iter()
            .filter(|p| p.phenomenon == w.phenomena[0].name)
            .cloned()
            .collect();
        let layer = w.phenomena[0].peak_layer;
        let s = contrastive_stats(&ph0, &w.saes[layer], layer).unwrap();
        let c = consistency(&s.per_domain_delta_mu).unwrap();
        let planted = c[w.planted_feature(0, true)];
        let g2 = 2 * w.spec.num_planted;
        for j in g2..g2 + DOMAINS.len() {
            assert!(planted > 10.0 * c[j], "planted {planted} vs nuisance {}", c[j]);
        }
    }

    #[test]
    fn steering_shifts_class_frequency() {
        let w = world();
        let prompts = w.prompts(200, 32, 9).unwrap();
        let class = w.phenomena[2].target_class;
        let params = SamplingParams {
            max_new_tokens: 64,
            ..SamplingParams::default()
        };
        let frac = |plan: Option<&PlanSchedule>| -> Vec<f64> {
            prompts
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut seed = [0u8; 32];
                    seed[..8].copy_from_slice(&(i as u64).to_le_bytes());
                    let c = w.backend.generate(p, plan, &params, seed).unwrap();
                    c.iter().filter(|&&t| w.backend.token_class(t) == Some(class)).count() as f64
                        / c.len() as f64
                })
                .collect()
        };
        let pl = plan(
            w.phenomena[2].peak_layer,
            w.phenomena[2].target.clone(),
            w.spec.plant_gain,
            32,
        );
        let base = frac(None);
        let steer = frac(Some(&pl));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        let se = ((var(&base) + var(&steer)) / 200.0).sqrt();
        let z = (mean(&steer) - mean(&base)) / se;
        assert!(z >= 3.0, "z = {z}");
    }

    #[test]
    fn lexicon_is_class_preserving_with_partial_coverage() {
        let w = world();
        let lex = w.lexicon();
        let class_words = 2 * w.spec.num_planted * CLASS_SIZE;
        assert!(lex.len() < class_words && lex.len() > class_words / 2);
        for (k, syns) in &lex {
            let tk = w.backend.encode(k).unwrap()[0];
            for s in syns {
                let ts = w.backend.encode(s).unwrap()[0];
                assert_eq!(w.backend.token_class(tk), w.backend.token_class(ts));
            }
        }
    }
}
