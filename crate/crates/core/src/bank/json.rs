//! Canonical JSON encodings: `.slambank.json`, `.slamnull.json`, `.slamsae.json`.
//!
//! Field order is fixed by the wire structs below, maps are `BTreeMap`s, and
//! floats are written as shortest round-trip decimals, so encoding the same
//! value twice is byte-identical. Vectors of `f32` are base64 of their
//! little-endian bytes.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{BankNull, DirectionBank, FeatureNull, FeatureRecord, NullStats, Polarity, SaeSpec};
use crate::error::{Error, Result};
use crate::selection::SelectionSpec;

pub const BANK_SCHEMA: &str = "slam.bank";
pub const NULL_SCHEMA: &str = "slam.null";
pub const SAE_SCHEMA: &str = "slam.sae";
pub const SCHEMA_VERSION: u32 = 1;

pub fn f32s_to_b64(v: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn b64_to_f32s(s: &str) -> Result<Vec<f32>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::Invariant(format!("invalid base64 vector: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Invariant(format!(
            "base64 vector has {} bytes, not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

// ---------------------------------------------------------------------------
// Wire structs
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordWire {
    feature_id: String,
    phenomenon: String,
    layer: usize,
    mode_index: usize,
    polarity: Polarity,
    delta_mu: f64,
    purity: f64,
    consistency: f64,
    composite: f64,
    quality_weight: f64,
    direction: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankWire {
    schema: String,
    version: u32,
    bank_id: String,
    model_id: String,
    d_model: usize,
    k: usize,
    anchor_size: usize,
    pool_size: usize,
    composite_min: f64,
    created_with: String,
    records: Vec<RecordWire>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NullWire {
    schema: String,
    version: u32,
    bank_id: String,
    key_digest: String,
    fitted_on: usize,
    selection: SelectionSpec,
    bank_level: BankNull,
    per_feature: BTreeMap<String, FeatureNull>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SaeWire {
    sae_id: String,
    layer: usize,
    n_features: usize,
    d_model: usize,
    encoder: String,
    encoder_bias: String,
    decoder: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SaeSetWire {
    schema: String,
    version: u32,
    saes: Vec<SaeWire>,
}

// ---------------------------------------------------------------------------
// Parsing helpers
// ---------------------------------------------------------------------------

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += l.len();
    }
    text.len()
}

fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })
}

fn check_header(text: &str, schema: &str) -> Result<()> {
    let h: Header = parse_json(text)?;
    if h.schema != schema {
        return Err(Error::Parse {
            offset: 0,
            message: format!("expected schema {schema:?}, found {:?}", h.schema),
        });
    }
    if h.version != SCHEMA_VERSION {
        return Err(Error::Version {
            found: h.version,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(())
}

fn to_canonical_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("wire structs serialize");
    s.push('\n');
    s
}

fn ensure_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Invariant(format!("{name} is not finite")))
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Banks
// ---------------------------------------------------------------------------

pub fn bank_to_json(bank: &DirectionBank) -> Result<String> {
    bank.validate()?;
    ensure_finite("composite_min", bank.composite_min)?;
    let wire = BankWire {
        schema: BANK_SCHEMA.into(),
        version: SCHEMA_VERSION,
        bank_id: bank.bank_id.clone(),
        model_id: bank.model_id.clone(),
        d_model: bank.d_model,
        k: bank.k,
        anchor_size: bank.anchor_size,
        pool_size: bank.pool_size,
        composite_min: bank.composite_min,
        created_with: bank.created_with.clone(),
        records: bank
            .records
            .iter()
            .map(|r| RecordWire {
                feature_id: r.feature_id.clone(),
                phenomenon: r.phenomenon.clone(),
                layer: r.layer,
                mode_index: r.mode_index,
                polarity: r.polarity,
                delta_mu: r.delta_mu,
                purity: r.purity,
                consistency: r.consistency,
                composite: r.composite,
                quality_weight: r.quality_weight,
                direction: f32s_to_b64(&r.direction),
            })
            .collect(),
    };
    Ok(to_canonical_json(&wire))
}

pub fn bank_from_json(text: &str) -> Result<DirectionBank> {
    check_header(text, BANK_SCHEMA)?;
    let w: BankWire = parse_json(text)?;
    let records = w
        .records
        .into_iter()
        .map(|r| {
            Ok(FeatureRecord {
                direction: b64_to_f32s(&r.direction)?,
                feature_id: r.feature_id,
                phenomenon: r.phenomenon,
                layer: r.layer,
                mode_index: r.mode_index,
                polarity: r.polarity,
                delta_mu: r.delta_mu,
                purity: r.purity,
                consistency: r.consistency,
                composite: r.composite,
                quality_weight: r.quality_weight,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bank = DirectionBank {
        bank_id: w.bank_id,
        model_id: w.model_id,
        d_model: w.d_model,
        k: w.k,
        records,
        anchor_size: w.anchor_size,
        pool_size: w.pool_size,
        composite_min: w.composite_min,
        created_with: w.created_with,
    };
    bank.validate()?;
    Ok(bank)
}

pub fn save_bank(bank: &DirectionBank, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &bank_to_json(bank)?)
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<DirectionBank> {
    bank_from_json(&read(path.as_ref())?)
}

// ---------------------------------------------------------------------------
// Null statistics
// ---------------------------------------------------------------------------

pub fn nulls_to_json(nulls: &NullStats) -> Result<String> {
    nulls.validate()?;
    let wire = NullWire {
        schema: NULL_SCHEMA.into(),
        version: SCHEMA_VERSION,
        bank_id: nulls.bank_id.clone(),
        key_digest: nulls.key_digest.clone(),
        fitted_on: nulls.fitted_on,
        selection: nulls.selection.clone(),
        bank_level: nulls.bank_level,
        per_feature: nulls.per_feature.clone(),
    };
    Ok(to_canonical_json(&wire))
}

pub fn nulls_from_json(text: &str) -> Result<NullStats> {
    check_header(text, NULL_SCHEMA)?;
    let w: NullWire = parse_json(text)?;
    let nulls = NullStats {
        bank_id: w.bank_id,
        per_feature: w.per_feature,
        bank_level: w.bank_level,
        fitted_on: w.fitted_on,
        key_digest: w.key_digest,
        selection: w.selection,
    };
    nulls.validate()?;
    Ok(nulls)
}

pub fn save_nulls(nulls: &NullStats, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &nulls_to_json(nulls)?)
}

pub fn load_nulls(path: impl AsRef<Path>) -> Result<NullStats> {
    nulls_from_json(&read(path.as_ref())?)
}

// ---------------------------------------------------------------------------
// SAE sets (one SAE per layer)
// ---------------------------------------------------------------------------

pub fn saes_to_json(saes: &[SaeSpec]) -> Result<String> {
    for s in saes {
        s.validate()?;
    }
    let wire = SaeSetWire {
        schema: SAE_SCHEMA.into(),
        version: SCHEMA_VERSION,
        saes: saes
            .iter()
            .map(|s| SaeWire {
                sae_id: s.sae_id.clone(),
                layer: s.layer,
                n_features: s.n_features,
                d_model: s.d_model,
                encoder: f32s_to_b64(&s.encoder),
                encoder_bias: f32s_to_b64(&s.encoder_bias),
                decoder: f32s_to_b64(&s.decoder),
            })
            .collect(),
    };
    Ok(to_canonical_json(&wire))
}

pub fn saes_from_json(text: &str) -> Result<Vec<SaeSpec>> {
    check_header(text, SAE_SCHEMA)?;
    let w: SaeSetWire = parse_json(text)?;
    w.saes
        .into_iter()
        .map(|s| {
            let spec = SaeSpec {
                sae_id: s.sae_id,
                layer: s.layer,
                n_features: s.n_features,
                d_model: s.d_model,
                encoder: b64_to_f32s(&s.encoder)?,
                encoder_bias: b64_to_f32s(&s.encoder_bias)?,
                decoder: b64_to_f32s(&s.decoder)?,
            };
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

pub fn save_saes(saes: &[SaeSpec], path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &saes_to_json(saes)?)
}

pub fn load_saes(path: impl AsRef<Path>) -> Result<Vec<SaeSpec>> {
    saes_from_json(&read(path.as_ref())?)
}
