//! HMAC-keyed, strength-proportional selection of the per-document feature subset.
//!
//! The per-document seed is `HMAC-SHA256(secret, utf8(doc_id) ‖ 0x1F ‖ le_u64(sentence_idx))`.
//! Each pool record `r` (pool rank order) gets a uniform
//! `u_r ∈ (0,1)` from `SHA-256(seed ‖ le_u64(r))`, and the `F` records with
//! the largest Efraimidis–Spirakis keys `u_r^{1/w_r}` are selected, where
//! `w_r = (composite_r · quality_r)^{1/τ}`. Keys are compared as
//! `ln(−ln u_r) − ln w_r` (smaller wins), which orders identically and stays
//! finite for the very large weights a small τ produces.

use std::collections::BTreeMap;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bank::{DirectionBank, FeatureRecord, WatermarkKey};
use crate::error::{Error, Result};

pub type Seed = [u8; 32];

const UNIT_SEPARATOR: u8 = 0x1F;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSpec {
    pub features_per_doc: usize,
    pub pool_size: usize,
    pub anchor_size: usize,
    pub temperature: f64,
    #[serde(default)]
    pub sentence_level: bool,
}

impl Default for SelectionSpec {
    fn default() -> Self {
        Self {
            features_per_doc: 7,
            pool_size: 10,
            anchor_size: 5,
            temperature: 0.3,
            sentence_level: false,
        }
    }
}

impl SelectionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.anchor_size > self.pool_size {
            return Err(Error::InvalidInput(format!(
                "anchor_size {} exceeds pool_size {}",
                self.anchor_size, self.pool_size
            )));
        }
        if self.features_per_doc == 0 || self.features_per_doc > self.pool_size {
            return Err(Error::InvalidInput(format!(
                "features_per_doc must be in [1, pool_size={}], got {}",
                self.pool_size, self.features_per_doc
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidInput(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Raw HMAC-SHA256.
pub fn hmac_sha256(key: &[u8], message: &[u8]) -> Seed {
    let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(message);
    mac.finalize().into_bytes().into()
}

/// `utf8(doc_id) ‖ 0x1F ‖ le_u64(sentence_idx)`.
pub fn seed_message(doc_id: &str, sentence_idx: u64) -> Vec<u8> {
    let mut msg = Vec::with_capacity(doc_id.len() + 9);
    msg.extend_from_slice(doc_id.as_bytes());
    msg.push(UNIT_SEPARATOR);
    msg.extend_from_slice(&sentence_idx.to_le_bytes());
    msg
}

pub fn hmac_seed(key: &WatermarkKey, doc_id: &str, sentence_idx: u64) -> Result<Seed> {
    if doc_id.is_empty() {
        return Err(Error::InvalidInput("doc_id must not be empty".into()));
    }
    Ok(hmac_sha256(key.secret(), &seed_message(doc_id, sentence_idx)))
}

/// `SHA-256(seed ‖ le_u64(counter))`.
pub fn derive_seed(seed: &Seed, counter: u64) -> Seed {
    let mut h = Sha256::new();
    h.update(seed);
    h.update(counter.to_le_bytes());
    h.finalize().into()
}

/// Uniform in (0,1) from the first 8 bytes (little-endian) of `SHA-256(seed ‖ le_u64(r))`.
///
/// Uses the top 53 bits plus half an ulp so the value is exactly representable
/// and never 0 or 1.
pub fn uniform_from_seed(seed: &Seed, r: u64) -> f64 {
    let h = derive_seed(seed, r);
    let x = u64::from_le_bytes(h[..8].try_into().expect("8 bytes"));
    ((x >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// One selected record with its provenance in the pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Pick {
    pub record: FeatureRecord,
    pub pool_rank: usize,
    pub anchor: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Selection {
    pub picks: Vec<Pick>,
    pub warnings: Vec<String>,
}

impl Selection {
    pub fn records(&self) -> impl Iterator<Item = &FeatureRecord> {
        self.picks.iter().map(|p| &p.record)
    }

    pub fn feature_ids(&self) -> Vec<&str> {
        self.picks.iter().map(|p| p.record.feature_id.as_str()).collect()
    }
}

/// Weighted sampling without replacement over the top-`pool_size` records.
///
/// The anchor tier (top `anchor_size`) is an eligibility guarantee: anchor
/// records always sit in the pool and use their own weights, but are not
/// forced into the selection.
pub fn select_features(bank: &DirectionBank, spec: &SelectionSpec, seed: &Seed) -> Result<Selection> {
    spec.validate()?;
    if bank.records.len() < spec.pool_size {
        return Err(Error::InvalidInput(format!(
            "bank has {} records, fewer than pool_size {}",
            bank.records.len(),
            spec.pool_size
        )));
    }
    let pool = &bank.records[..spec.pool_size];
    let mut warnings = Vec::new();
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(pool.len());
    for (rank, rec) in pool.iter().enumerate() {
        let strength = rec.strength();
        if !(strength > 0.0) || !strength.is_finite() {
            let msg = format!(
                "skipping {}: non-positive selection weight {strength}",
                rec.feature_id
            );
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let log_w = strength.ln() / spec.temperature;
        let u = uniform_from_seed(seed, rank as u64);
        keyed.push(((-u.ln()).ln() - log_w, rank));
    }
    if keyed.is_empty() {
        return Err(Error::InvalidInput(
            "every pool record has a non-positive selection weight".into(),
        ));
    }
    if keyed.len() < spec.features_per_doc {
        let msg = format!(
            "only {} eligible records for features_per_doc {}",
            keyed.len(),
            spec.features_per_doc
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let picks = keyed
        .into_iter()
        .take(spec.features_per_doc)
        .map(|(_, rank)| Pick {
            record: pool[rank].clone(),
            pool_rank: rank,
            anchor: rank < spec.anchor_size,
        })
        .collect();
    Ok(Selection { picks, warnings })
}

/// Selections keyed by sentence index: one entry (index 0) in document mode,
/// one per sentence in sentence mode.
pub fn selection_for_text(
    key: &WatermarkKey,
    doc_id: &str,
    spec: &SelectionSpec,
    bank: &DirectionBank,
    num_sentences: usize,
) -> Result<BTreeMap<usize, Selection>> {
    let count = if spec.sentence_level {
        num_sentences.max(1)
    } else {
        1
    };
    (0..count)
        .map(|i| {
            let seed = hmac_seed(key, doc_id, i as u64)?;
            Ok((i, select_features(bank, spec, &seed)?))
        })
        .collect()
}
