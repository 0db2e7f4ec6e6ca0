use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::SelectionSpec;

/// Tolerance on ‖direction‖₂ for persisted feature records.
pub const UNIT_NORM_TOL: f64 = 1e-6;
/// Tolerance on `composite = |Δμ|·purity·consistency`.
pub const COMPOSITE_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Activation traces
// ---------------------------------------------------------------------------

/// Per-token residual-stream vectors for one text at one or more layers.
///
/// Matrices are row-major `num_tokens × d_model`, one per entry of
/// `layer_ids`, stored in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    model_id: String,
    layer_ids: Vec<usize>,
    d_model: usize,
    tokens: Vec<u32>,
    activations: Vec<Vec<f32>>,
    prompt_len: usize,
}

impl ActivationTrace {
    pub fn new(
        model_id: impl Into<String>,
        layer_ids: Vec<usize>,
        d_model: usize,
        tokens: Vec<u32>,
        activations: Vec<Vec<f32>>,
        prompt_len: usize,
    ) -> Result<Self> {
        if d_model == 0 {
            return Err(Error::Invariant("d_model must be positive".into()));
        }
        if layer_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invariant(
                "layer_ids must be strictly increasing".into(),
            ));
        }
        if activations.len() != layer_ids.len() {
            return Err(Error::Dimension(format!(
                "{} layer ids but {} activation matrices",
                layer_ids.len(),
                activations.len()
            )));
        }
        let want = tokens.len() * d_model;
        for (l, m) in layer_ids.iter().zip(&activations) {
            if m.len() != want {
                return Err(Error::Dimension(format!(
                    "layer {l}: expected {} x {d_model} = {want} values, got {}",
                    tokens.len(),
                    m.len()
                )));
            }
        }
        if prompt_len > tokens.len() {
            return Err(Error::Invariant(format!(
                "prompt_len {prompt_len} exceeds token count {}",
                tokens.len()
            )));
        }
        Ok(Self {
            model_id: model_id.into(),
            layer_ids,
            d_model,
            tokens,
            activations,
            prompt_len,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn layer_ids(&self) -> &[usize] {
        &self.layer_ids
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn has_layer(&self, layer: usize) -> bool {
        self.layer_ids.binary_search(&layer).is_ok()
    }

    /// Whole row-major matrix for `layer`.
    pub fn layer(&self, layer: usize) -> Option<&[f32]> {
        self.layer_ids
            .binary_search(&layer)
            .ok()
            .map(|i| self.activations[i].as_slice())
    }

    pub fn row(&self, layer: usize, token: usize) -> Option<&[f32]> {
        let m = self.layer(layer)?;
        let d = self.d_model;
        m.get(token * d..(token + 1) * d)
    }

    /// Iterator over the rows of `layer` in token order.
    pub fn rows(&self, layer: usize) -> Option<std::slice::ChunksExact<'_, f32>> {
        self.layer(layer).map(|m| m.chunks_exact(self.d_model))
    }

    pub(crate) fn matrices(&self) -> &[Vec<f32>] {
        &self.activations
    }

    /// Returns a trace whose every activation row was transformed by `f(layer, token, row)`.
    pub fn map_rows<F>(&self, mut f: F) -> Self
    where
        F: FnMut(usize, usize, &mut [f32]),
    {
        let mut activations = self.activations.clone();
        for (li, &layer) in self.layer_ids.iter().enumerate() {
            for (t, row) in activations[li].chunks_exact_mut(self.d_model).enumerate() {
                f(layer, t, row);
            }
        }
        Self {
            activations,
            ..self.clone()
        }
    }

    /// Keeps only the listed layers (must be present).
    pub fn restrict_layers(&self, layers: &[usize]) -> Result<Self> {
        let mut ids = layers.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let mut mats = Vec::with_capacity(ids.len());
        for &l in &ids {
            let m = self
                .layer(l)
                .ok_or_else(|| Error::InvalidInput(format!("layer {l} not in trace")))?;
            mats.push(m.to_vec());
        }
        Self::new(
            self.model_id.clone(),
            ids,
            self.d_model,
            self.tokens.clone(),
            mats,
            self.prompt_len,
        )
    }
}

// ---------------------------------------------------------------------------
// SAE
// ---------------------------------------------------------------------------

/// Encoder/decoder weights of one sparse autoencoder.
///
/// `encoder` and `decoder` are row-major `n_features × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeSpec {
    pub sae_id: String,
    pub layer: usize,
    pub n_features: usize,
    pub d_model: usize,
    pub encoder: Vec<f32>,
    pub encoder_bias: Vec<f32>,
    pub decoder: Vec<f32>,
}

impl SaeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.d_model == 0 {
            return Err(Error::Invariant("SAE dimensions must be positive".into()));
        }
        let want = self.n_features * self.d_model;
        if self.encoder.len() != want {
            return Err(Error::Dimension(format!(
                "encoder has {} values, expected {want}",
                self.encoder.len()
            )));
        }
        if self.decoder.len() != want {
            return Err(Error::Dimension(format!(
                "decoder has {} values, expected {want}",
                self.decoder.len()
            )));
        }
        if self.encoder_bias.len() != self.n_features {
            return Err(Error::Dimension(format!(
                "encoder bias has {} values, expected {}",
                self.encoder_bias.len(),
                self.n_features
            )));
        }
        Ok(())
    }

    pub fn encoder_row(&self, j: usize) -> &[f32] {
        &self.encoder[j * self.d_model..(j + 1) * self.d_model]
    }

    pub fn decoder_row(&self, j: usize) -> &[f32] {
        &self.decoder[j * self.d_model..(j + 1) * self.d_model]
    }
}

// ---------------------------------------------------------------------------
// Feature records and banks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Forward,
    Reverse,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Forward => "forward",
            Polarity::Reverse => "reverse",
        }
    }
}

/// A mined structural direction in residual space.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub feature_id: String,
    pub phenomenon: String,
    pub layer: usize,
    /// Unit vector of length `d_model`.
    pub direction: Vec<f32>,
    pub mode_index: usize,
    pub polarity: Polarity,
    pub delta_mu: f64,
    pub purity: f64,
    pub consistency: f64,
    pub composite: f64,
    pub quality_weight: f64,
}

impl FeatureRecord {
    pub fn composite_of(delta_mu: f64, purity: f64, consistency: f64) -> f64 {
        delta_mu.abs() * purity * consistency
    }

    /// Selection weight before the temperature exponent.
    pub fn strength(&self) -> f64 {
        self.composite * self.quality_weight
    }

    pub fn validate(&self, d_model: usize, k: usize) -> Result<()> {
        let id = &self.feature_id;
        if self.direction.len() != d_model {
            return Err(Error::Dimension(format!(
                "record {id}: direction length {} != d_model {d_model}",
                self.direction.len()
            )));
        }
        let n = crate::linalg::dot_f32_f64(&self.direction, &self.direction).sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Invariant(format!(
                "record {id}: direction norm {n} is not unit"
            )));
        }
        for (name, v) in [
            ("delta_mu", self.delta_mu),
            ("purity", self.purity),
            ("consistency", self.consistency),
            ("composite", self.composite),
            ("quality_weight", self.quality_weight),
        ] {
            if !v.is_finite() {
                return Err(Error::Invariant(format!("record {id}: {name} is not finite")));
            }
        }
        if !(0.0..=1.0).contains(&self.purity) {
            return Err(Error::Invariant(format!("record {id}: purity outside [0,1]")));
        }
        if !(0.0..=1.0).contains(&self.quality_weight) {
            return Err(Error::Invariant(format!(
                "record {id}: quality_weight outside [0,1]"
            )));
        }
        if self.consistency < 0.0 || self.composite < 0.0 {
            return Err(Error::Invariant(format!(
                "record {id}: negative consistency or composite"
            )));
        }
        let expect = Self::composite_of(self.delta_mu, self.purity, self.consistency);
        if (self.composite - expect).abs() > COMPOSITE_TOL * expect.abs().max(1.0) {
            return Err(Error::Invariant(format!(
                "record {id}: composite {} != |delta_mu|*purity*consistency = {expect}",
                self.composite
            )));
        }
        if k > 0 && self.mode_index >= k {
            return Err(Error::Invariant(format!(
                "record {id}: mode_index {} outside [0, {k})",
                self.mode_index
            )));
        }
        Ok(())
    }
}

/// Versioned collection of mined directions, sorted by composite descending.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionBank {
    pub bank_id: String,
    pub model_id: String,
    pub d_model: usize,
    pub k: usize,
    pub records: Vec<FeatureRecord>,
    pub anchor_size: usize,
    pub pool_size: usize,
    /// Admission threshold every record's composite clears.
    pub composite_min: f64,
    pub created_with: String,
}

impl DirectionBank {
    pub const DEFAULT_ANCHOR: usize = 5;
    pub const DEFAULT_POOL: usize = 10;

    /// Sorts records (composite descending, ties by feature id) and clamps
    /// anchor/pool to the record count.
    pub fn assemble(
        bank_id: impl Into<String>,
        model_id: impl Into<String>,
        d_model: usize,
        k: usize,
        mut records: Vec<FeatureRecord>,
        composite_min: f64,
        created_with: impl Into<String>,
    ) -> Result<Self> {
        sort_records(&mut records);
        let pool_size = Self::DEFAULT_POOL.min(records.len());
        let anchor_size = Self::DEFAULT_ANCHOR.min(pool_size);
        let bank = Self {
            bank_id: bank_id.into(),
            model_id: model_id.into(),
            d_model,
            k,
            records,
            anchor_size,
            pool_size,
            composite_min,
            created_with: created_with.into(),
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchor_size > self.pool_size || self.pool_size > self.records.len() {
            return Err(Error::Invariant(format!(
                "need anchor_size ({}) <= pool_size ({}) <= records ({})",
                self.anchor_size,
                self.pool_size,
                self.records.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for r in &self.records {
            r.validate(self.d_model, self.k)?;
            if r.composite < self.composite_min {
                return Err(Error::Invariant(format!(
                    "record {}: composite {} below admission threshold {}",
                    r.feature_id, r.composite, self.composite_min
                )));
            }
            if !seen.insert(r.feature_id.as_str()) {
                return Err(Error::Invariant(format!(
                    "duplicate feature_id {}",
                    r.feature_id
                )));
            }
        }
        if self
            .records
            .windows(2)
            .any(|w| w[0].composite < w[1].composite)
        {
            return Err(Error::Invariant(
                "records not sorted by composite descending".into(),
            ));
        }
        Ok(())
    }

    pub fn get(&self, feature_id: &str) -> Option<&FeatureRecord> {
        self.records.iter().find(|r| r.feature_id == feature_id)
    }

    pub fn layers(&self) -> BTreeSet<usize> {
        self.records.iter().map(|r| r.layer).collect()
    }
}

pub(crate) fn sort_records(records: &mut [FeatureRecord]) {
    records.sort_by(|a, b| {
        b.composite
            .total_cmp(&a.composite)
            .then_with(|| a.feature_id.cmp(&b.feature_id))
    });
}

// ---------------------------------------------------------------------------
// Keys, null statistics, detection results
// ---------------------------------------------------------------------------

/// Watermark secret. Deliberately not `Serialize`.
#[derive(Clone, PartialEq, Eq)]
pub struct WatermarkKey {
    secret: Vec<u8>,
    key_id: String,
}

impl WatermarkKey {
    pub const MIN_SECRET_LEN: usize = 16;

    pub fn new(secret: impl Into<Vec<u8>>, key_id: impl Into<String>) -> Result<Self> {
        let secret = secret.into();
        if secret.len() < Self::MIN_SECRET_LEN {
            return Err(Error::InvalidInput(format!(
                "watermark secret must be at least {} bytes, got {}",
                Self::MIN_SECRET_LEN,
                secret.len()
            )));
        }
        Ok(Self {
            secret,
            key_id: key_id.into(),
        })
    }

    pub fn secret(&self) -> &[u8] {
        &self.secret
    }

    pub fn key_id(&self) -> &str {
        &self.key_id
    }

    /// Public fingerprint: hex HMAC-SHA256(secret, "slam-key-digest").
    pub fn digest(&self) -> String {
        use hmac::{Hmac, Mac};
        let mut mac = Hmac::<sha2::Sha256>::new_from_slice(&self.secret)
            .expect("HMAC accepts any key length");
        mac.update(b"slam-key-digest");
        hex::encode(mac.finalize().into_bytes())
    }
}

impl std::fmt::Debug for WatermarkKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WatermarkKey")
            .field("key_id", &self.key_id)
            .field("secret", &"<redacted>")
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureNull {
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BankNull {
    pub mu_raw: f64,
    pub sigma_raw: f64,
}

/// Null moments for per-feature projections and the combined statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct NullStats {
    pub bank_id: String,
    pub per_feature: BTreeMap<String, FeatureNull>,
    pub bank_level: BankNull,
    pub fitted_on: usize,
    pub key_digest: String,
    pub selection: SelectionSpec,
}

impl NullStats {
    pub fn validate(&self) -> Result<()> {
        for (id, n) in &self.per_feature {
            if !(n.sigma > 0.0) || !n.mu.is_finite() || !n.sigma.is_finite() {
                return Err(Error::InvalidNulls(format!(
                    "feature {id}: sigma must be positive and finite (mu {}, sigma {})",
                    n.mu, n.sigma
                )));
            }
        }
        if !(self.bank_level.sigma_raw > 0.0)
            || !self.bank_level.sigma_raw.is_finite()
            || !self.bank_level.mu_raw.is_finite()
        {
            return Err(Error::InvalidNulls(format!(
                "bank-level sigma_raw must be positive and finite, got {}",
                self.bank_level.sigma_raw
            )));
        }
        Ok(())
    }

    /// Checks that every bank feature has a per-feature null.
    pub fn covers(&self, bank: &DirectionBank) -> Result<()> {
        for r in &bank.records {
            if !self.per_feature.contains_key(&r.feature_id) {
                return Err(Error::MissingNull(r.feature_id.clone()));
            }
        }
        Ok(())
    }
}

/// Outcome of scoring one text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub per_feature_z: BTreeMap<String, f64>,
    pub active_set: BTreeSet<String>,
    pub z_raw: f64,
    pub z_hat: f64,
    pub decision: bool,
    pub threshold: f64,
    pub num_tokens_scored: usize,
}

/// A token sequence with its prompt prefix length and document id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub doc_id: String,
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, tokens: Vec<u32>, prompt_len: usize) -> Result<Self> {
        if prompt_len > tokens.len() {
            return Err(Error::InvalidInput(format!(
                "prompt_len {prompt_len} exceeds {} tokens",
                tokens.len()
            )));
        }
        Ok(Self {
            doc_id: doc_id.into(),
            tokens,
            prompt_len,
        })
    }

    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..self.prompt_len]
    }

    pub fn continuation(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }

    /// Same prompt, new continuation.
    pub fn with_continuation(&self, continuation: &[u32]) -> Self {
        let mut tokens = self.prompt().to_vec();
        tokens.extend_from_slice(continuation);
        Self {
            doc_id: self.doc_id.clone(),
            tokens,
            prompt_len: self.prompt_len,
        }
    }
}
