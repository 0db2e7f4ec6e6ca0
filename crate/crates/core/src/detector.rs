//! Projection z-scores, pre-filtered Stouffer combination, and calibration.
//!
//! Detection takes one unsteered forward pass, projects each continuation
//! token's residual onto the directions selected for the document's key, and
//! standardizes the per-feature means against token-level nulls:
//!
//! ```text
//! z_j   = (mean_j − μ_j) / (σ_j / √T)
//! z_raw = Σ_{j∈𝒜} z_j / √|𝒜|,   𝒜 = { j : z_j ≥ z_min }   (0 when 𝒜 is empty)
//! ẑ     = (z_raw − μ_raw) / σ_raw
//! ```

use std::collections::{BTreeMap, BTreeSet};

use crate::backend::Backend;
use crate::bank::{
    ActivationTrace, BankNull, DetectionResult, DirectionBank, Document, FeatureNull,
    FeatureRecord, NullStats, WatermarkKey,
};
use crate::error::{Error, Result};
use crate::par::Parallelism;
use crate::selection::{selection_for_text, Selection, SelectionSpec};

pub const Z_MIN: f64 = 0.5;
pub const DEFAULT_THRESHOLD: f64 = 2.0;
pub const MIN_NULL_TEXTS: usize = 30;
pub const RECOMMENDED_NULL_TEXTS: usize = 100;

/// Mean of `⟨h_t, d⟩` over the scored tokens, and the token count.
pub fn feature_projection_mean(
    trace: &ActivationTrace,
    record: &FeatureRecord,
    skip_prompt: bool,
) -> Result<(f64, usize)> {
    let start = if skip_prompt { trace.prompt_len() } else { 0 };
    projection_mean_range(trace, record, start, trace.num_tokens())
}

fn projection_mean_range(
    trace: &ActivationTrace,
    record: &FeatureRecord,
    start: usize,
    end: usize,
) -> Result<(f64, usize)> {
    if record.direction.len() != trace.d_model() {
        return Err(Error::Dimension(format!(
            "record {} has width {}, trace d_model is {}",
            record.feature_id,
            record.direction.len(),
            trace.d_model()
        )));
    }
    let rows = trace.rows(record.layer).ok_or_else(|| {
        Error::InvalidInput(format!(
            "layer {} of record {} not in trace",
            record.layer, record.feature_id
        ))
    })?;
    if end <= start {
        return Err(Error::InvalidInput("no tokens to score".into()));
    }
    let sum: f64 = rows
        .skip(start)
        .take(end - start)
        .map(|r| crate::linalg::dot_f32_f64(r, &record.direction))
        .sum();
    Ok((sum / (end - start) as f64, end - start))
}

pub fn feature_z(mean: f64, num_tokens: usize, null: FeatureNull) -> Result<f64> {
    if !(null.sigma > 0.0) {
        return Err(Error::InvalidNulls(format!(
            "sigma must be positive, got {}",
            null.sigma
        )));
    }
    Ok((mean - null.mu) / (null.sigma / (num_tokens as f64).sqrt()))
}

/// Pre-filtered Stouffer combination. Empty active set gives `z_raw = 0`.
pub fn stouffer(z: &BTreeMap<String, f64>, z_min: f64) -> (f64, BTreeSet<String>) {
    let active: BTreeSet<String> = z
        .iter()
        .filter(|(_, &v)| v >= z_min)
        .map(|(k, _)| k.clone())
        .collect();
    if active.is_empty() {
        return (0.0, active);
    }
    let sum: f64 = active.iter().map(|k| z[k]).sum();
    (sum / (active.len() as f64).sqrt(), active)
}

pub fn calibrate(z_raw: f64, null: BankNull) -> Result<f64> {
    if !(null.sigma_raw > 0.0) {
        return Err(Error::InvalidNulls(format!(
            "sigma_raw must be positive, got {}",
            null.sigma_raw
        )));
    }
    Ok((z_raw - null.mu_raw) / null.sigma_raw)
}

/// Continuation token ranges, one per sentence, keyed by sentence index.
///
/// A sentence-ending token belongs to the sentence it closes.
pub fn sentence_spans<F>(tokens: &[u32], prompt_len: usize, ends_sentence: F) -> Vec<(usize, usize)>
where
    F: Fn(u32) -> bool,
{
    let mut spans = Vec::new();
    let mut start = prompt_len;
    for (t, &tok) in tokens.iter().enumerate().skip(prompt_len) {
        if ends_sentence(tok) {
            spans.push((start, t + 1));
            start = t + 1;
        }
    }
    if start < tokens.len() {
        spans.push((start, tokens.len()));
    }
    spans
}

/// Uncalibrated score of one trace: per-feature z and the combined `z_raw`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScore {
    pub per_feature_z: BTreeMap<String, f64>,
    pub active_set: BTreeSet<String>,
    pub z_raw: f64,
    pub num_tokens: usize,
}

fn feature_null(per_feature: &BTreeMap<String, FeatureNull>, id: &str) -> Result<FeatureNull> {
    per_feature
        .get(id)
        .copied()
        .ok_or_else(|| Error::MissingNull(id.to_string()))
}

fn z_for_selection(
    trace: &ActivationTrace,
    sel: &Selection,
    per_feature: &BTreeMap<String, FeatureNull>,
    start: usize,
    end: usize,
) -> Result<BTreeMap<String, f64>> {
    let mut z = BTreeMap::new();
    for r in sel.records() {
        let null = feature_null(per_feature, &r.feature_id)?;
        let (mean, t) = projection_mean_range(trace, r, start, end)?;
        z.insert(r.feature_id.clone(), feature_z(mean, t, null)?);
    }
    Ok(z)
}

/// Scores a trace under the document's keyed selection(s).
///
/// Sentence mode scores each sentence with its own selection and
/// Stouffer-combines the per-sentence `z_raw` values with the same `z_min`
/// pre-filter; per-feature keys then read `"{sentence}/{feature_id}"`.
pub fn raw_score<F>(
    trace: &ActivationTrace,
    key: &WatermarkKey,
    doc_id: &str,
    bank: &DirectionBank,
    spec: &SelectionSpec,
    per_feature: &BTreeMap<String, FeatureNull>,
    ends_sentence: F,
) -> Result<RawScore>
where
    F: Fn(u32) -> bool,
{
    let start = trace.prompt_len();
    let end = trace.num_tokens();
    if end <= start {
        return Err(Error::InvalidInput("text has no continuation tokens".into()));
    }
    if !spec.sentence_level {
        let sels = selection_for_text(key, doc_id, spec, bank, 1)?;
        let z = z_for_selection(trace, &sels[&0], per_feature, start, end)?;
        let (z_raw, active_set) = stouffer(&z, Z_MIN);
        return Ok(RawScore {
            per_feature_z: z,
            active_set,
            z_raw,
            num_tokens: end - start,
        });
    }
    let spans = sentence_spans(trace.tokens(), start, ends_sentence);
    let sels = selection_for_text(key, doc_id, spec, bank, spans.len())?;
    let mut per_feature_z = BTreeMap::new();
    let mut active_set = BTreeSet::new();
    let mut sentence_z = BTreeMap::new();
    for (i, &(s, e)) in spans.iter().enumerate() {
        let z = z_for_selection(trace, &sels[&i], per_feature, s, e)?;
        let (zr, act) = stouffer(&z, Z_MIN);
        for (k, v) in z {
            per_feature_z.insert(format!("{i}/{k}"), v);
        }
        active_set.extend(act.into_iter().map(|k| format!("{i}/{k}")));
        sentence_z.insert(format!("{i:06}"), zr);
    }
    let (z_raw, _) = stouffer(&sentence_z, Z_MIN);
    Ok(RawScore {
        per_feature_z,
        active_set,
        z_raw,
        num_tokens: end - start,
    })
}

fn check_regime(nulls: &NullStats, bank: &DirectionBank, key: &WatermarkKey, spec: &SelectionSpec) -> Result<()> {
    nulls.validate()?;
    if nulls.bank_id != bank.bank_id {
        return Err(Error::InvalidNulls(format!(
            "nulls fitted for bank {}, not {}",
            nulls.bank_id, bank.bank_id
        )));
    }
    if nulls.selection.sentence_level != spec.sentence_level {
        return Err(Error::InvalidNulls(
            "nulls were fitted in a different sentence_level mode".into(),
        ));
    }
    if nulls.key_digest != key.digest() {
        log::warn!("nulls were fitted under a different key digest");
    }
    Ok(())
}

/// Scores an already computed unsteered trace.
#[allow(clippy::too_many_arguments)]
pub fn detect_trace<F>(
    trace: &ActivationTrace,
    key: &WatermarkKey,
    doc_id: &str,
    bank: &DirectionBank,
    spec: &SelectionSpec,
    nulls: &NullStats,
    threshold: f64,
    ends_sentence: F,
) -> Result<DetectionResult>
where
    F: Fn(u32) -> bool,
{
    check_regime(nulls, bank, key, spec)?;
    let raw = raw_score(trace, key, doc_id, bank, spec, &nulls.per_feature, ends_sentence)?;
    let z_hat = calibrate(raw.z_raw, nulls.bank_level)?;
    Ok(DetectionResult {
        per_feature_z: raw.per_feature_z,
        active_set: raw.active_set,
        z_raw: raw.z_raw,
        z_hat,
        decision: z_hat >= threshold,
        threshold,
        num_tokens_scored: raw.num_tokens,
    })
}

/// Full detection: keyed selection, exactly one forward pass, z-scores,
/// Stouffer, calibration, threshold. No SAE is involved.
#[allow(clippy::too_many_arguments)]
pub fn detect(
    backend: &dyn Backend,
    doc: &Document,
    key: &WatermarkKey,
    bank: &DirectionBank,
    spec: &SelectionSpec,
    nulls: &NullStats,
    threshold: f64,
) -> Result<DetectionResult> {
    check_regime(nulls, bank, key, spec)?;
    let out = backend.forward(&doc.tokens, doc.prompt_len, None)?;
    detect_trace(
        &out.trace,
        key,
        &doc.doc_id,
        bank,
        spec,
        nulls,
        threshold,
        |t| backend.ends_sentence(t),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn detect_batch(
    backend: &dyn Backend,
    docs: &[Document],
    key: &WatermarkKey,
    bank: &DirectionBank,
    spec: &SelectionSpec,
    nulls: &NullStats,
    threshold: f64,
    par: Parallelism,
) -> Result<Vec<DetectionResult>> {
    par.try_map(docs, |d| detect(backend, d, key, bank, spec, nulls, threshold))
}

/// Fits per-feature token-level nulls and the bank-level `z_raw` moments.
///
/// Per-feature `(μ, σ)` are the mean and population standard deviation of
/// every baseline continuation token's projection. `(μ_raw, σ_raw)` are the
/// moments of `z_raw` over the baseline texts, each scored with its own
/// doc-id selection.
pub fn fit_nulls(
    backend: &dyn Backend,
    baseline: &[Document],
    key: &WatermarkKey,
    bank: &DirectionBank,
    spec: &SelectionSpec,
    par: Parallelism,
) -> Result<NullStats> {
    if baseline.len() < MIN_NULL_TEXTS {
        return Err(Error::InvalidInput(format!(
            "null fitting needs at least {MIN_NULL_TEXTS} baseline texts, got {}",
            baseline.len()
        )));
    }
    if baseline.len() < RECOMMENDED_NULL_TEXTS {
        log::warn!(
            "fitting nulls on {} texts; {RECOMMENDED_NULL_TEXTS} recommended",
            baseline.len()
        );
    }
    spec.validate()?;
    let traces: Vec<ActivationTrace> = par.try_map(baseline, |d| {
        if d.continuation().is_empty() {
            return Err(Error::InvalidInput(format!(
                "baseline text {} has no continuation",
                d.doc_id
            )));
        }
        backend.forward(&d.tokens, d.prompt_len, None).map(|o| o.trace)
    })?;

    // Per-text partial sums, reduced in input order.
    let partial: Vec<Vec<(f64, usize)>> = par.map(&traces, |tr| {
        bank.records
            .iter()
            .map(|r| match feature_projection_mean(tr, r, true) {
                Ok((m, n)) => (m * n as f64, n),
                Err(_) => (f64::NAN, 0),
            })
            .collect()
    });
    let mut per_feature = BTreeMap::new();
    for (ri, r) in bank.records.iter().enumerate() {
        let (mut sum, mut n) = (0.0, 0usize);
        for p in &partial {
            sum += p[ri].0;
            n += p[ri].1;
        }
        if !sum.is_finite() {
            return Err(Error::InvalidInput(format!(
                "layer {} of {} missing from baseline traces",
                r.layer, r.feature_id
            )));
        }
        let mu = sum / n as f64;
        let sq: Vec<f64> = par.map(&traces, |tr| {
            let rows = tr.rows(r.layer).expect("layer checked above");
            rows.skip(tr.prompt_len())
                .map(|row| (crate::linalg::dot_f32_f64(row, &r.direction) - mu).powi(2))
                .sum()
        });
        let var = sq.iter().sum::<f64>() / n as f64;
        let sigma = var.sqrt();
        if !(sigma > 1e-12 * (1.0 + mu.abs())) {
            return Err(Error::InvalidNulls(format!(
                "feature {}: null sigma is zero (degenerate direction or corpus)",
                r.feature_id
            )));
        }
        per_feature.insert(r.feature_id.clone(), FeatureNull { mu, sigma });
    }

    let raws: Vec<f64> = par.try_map_range(traces.len(), |i| {
        raw_score(
            &traces[i],
            key,
            &baseline[i].doc_id,
            bank,
            spec,
            &per_feature,
            |t| backend.ends_sentence(t),
        )
        .map(|s| s.z_raw)
    })?;
    let n = raws.len() as f64;
    let mu_raw = raws.iter().sum::<f64>() / n;
    let sigma_raw = (raws.iter().map(|z| (z - mu_raw).powi(2)).sum::<f64>() / n).sqrt();
    if !(sigma_raw > 0.0) {
        return Err(Error::InvalidNulls(
            "bank-level z_raw has zero spread on the baseline corpus".into(),
        ));
    }
    let nulls = NullStats {
        bank_id: bank.bank_id.clone(),
        per_feature,
        bank_level: BankNull { mu_raw, sigma_raw },
        fitted_on: baseline.len(),
        key_digest: key.digest(),
        selection: spec.clone(),
    };
    nulls.validate()?;
    Ok(nulls)
}
