//! Contrastive feature mining.
//!
//! Pairs are pooled through the SAE, differenced, and scored per feature
//! (strength, purity, cross-domain consistency). Surviving features span the
//! matrix whose top right singular vectors become steering directions after
//! decoder projection.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bank::{ActivationTrace, DirectionBank, FeatureRecord, Polarity, SaeSpec};
use crate::error::{Error, Result};
use crate::linalg;
use crate::par::Parallelism;
use crate::sae::{self, mean_pool_encode};

pub const CONSISTENCY_EPS: f64 = 1e-8;
pub const CONSISTENCY_MAX: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastivePair {
    pub pair_id: String,
    pub phenomenon: String,
    pub domain: String,
    pub pos: ActivationTrace,
    pub neg: ActivationTrace,
}

impl ContrastivePair {
    /// The same pair with x⁺ and x⁻ exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            pair_id: self.pair_id.clone(),
            phenomenon: self.phenomenon.clone(),
            domain: self.domain.clone(),
            pos: self.neg.clone(),
            neg: self.pos.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningConfig {
    pub k: usize,
    pub bidirectional: bool,
    pub cap: usize,
    pub seed: u64,
    pub gap_min: f64,
    pub composite_min: f64,
    /// Per-phenomenon trim before merging; `None` means `2k`.
    pub max_records_per_phenomenon: Option<usize>,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            k: 10,
            bidirectional: true,
            cap: 200,
            seed: 42,
            gap_min: 0.80,
            composite_min: 0.05,
            max_records_per_phenomenon: None,
        }
    }
}

impl MiningConfig {
    pub fn trim_size(&self) -> usize {
        self.max_records_per_phenomenon.unwrap_or(2 * self.k)
    }
}

/// Per-feature contrast statistics (delta_mu, purity, consistency, composite) over a set of pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveStats {
    pub delta_mu: Vec<f64>,
    pub per_domain_delta_mu: BTreeMap<String, Vec<f64>>,
    pub gap_fraction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub delta_mu: f64,
    pub purity: f64,
    pub consistency: f64,
    pub composite: f64,
    pub gap_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub phenomenon: String,
    pub layer: usize,
    pub polarity: Polarity,
    pub candidates_total: usize,
    pub passed_gap: usize,
    pub passed_composite: usize,
    pub records_admitted: usize,
    pub per_feature: BTreeMap<usize, FeatureScore>,
    pub warnings: Vec<String>,
}

/// Rows `φ̄(x⁺) − φ̄(x⁻)`, pooling every token of each pair sentence.
pub fn difference_matrix(
    pairs: &[ContrastivePair],
    sae: &SaeSpec,
    layer: usize,
) -> Result<Vec<Vec<f64>>> {
    pairs
        .iter()
        .map(|p| {
            let pos = mean_pool_encode(sae, &p.pos, layer, false)?;
            let neg = mean_pool_encode(sae, &p.neg, layer, false)?;
            Ok(pos
                .values
                .iter()
                .zip(&neg.values)
                .map(|(a, b)| a - b)
                .collect())
        })
        .collect()
}

/// Contrast statistics from precomputed difference rows and their domain labels.
pub fn stats_from_differences(rows: &[Vec<f64>], domains: &[&str]) -> Result<ContrastiveStats> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("no contrastive pairs".into()));
    }
    if rows.len() != domains.len() {
        return Err(Error::Dimension(format!(
            "{} difference rows but {} domain labels",
            rows.len(),
            domains.len()
        )));
    }
    let n = rows[0].len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Dimension("ragged difference rows".into()));
    }
    let mut sum = vec![0.0; n];
    let mut gaps = vec![0usize; n];
    let mut dom_sum: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for (row, dom) in rows.iter().zip(domains) {
        let entry = dom_sum
            .entry(dom.to_string())
            .or_insert_with(|| (vec![0.0; n], 0));
        entry.1 += 1;
        for j in 0..n {
            sum[j] += row[j];
            entry.0[j] += row[j];
            if row[j] > 0.0 {
                gaps[j] += 1;
            }
        }
    }
    let m = rows.len() as f64;
    Ok(ContrastiveStats {
        delta_mu: sum.iter().map(|s| s / m).collect(),
        per_domain_delta_mu: dom_sum
            .into_iter()
            .map(|(d, (s, c))| (d, s.into_iter().map(|v| v / c as f64).collect()))
            .collect(),
        gap_fraction: gaps.iter().map(|&g| g as f64 / m).collect(),
    })
}

pub fn contrastive_stats(
    pairs: &[ContrastivePair],
    sae: &SaeSpec,
    layer: usize,
) -> Result<ContrastiveStats> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no contrastive pairs".into()));
    }
    let rows = difference_matrix(pairs, sae, layer)?;
    let domains: Vec<&str> = pairs.iter().map(|p| p.domain.as_str()).collect();
    stats_from_differences(&rows, &domains)
}

/// Purity is the pairwise gap fraction.
pub fn purity(gap_fraction: &[f64]) -> Vec<f64> {
    gap_fraction.to_vec()
}

/// `|mean| / (std + ε)` across domains, clamped to `[0, 100]`.
pub fn consistency(per_domain_delta_mu: &BTreeMap<String, Vec<f64>>) -> Result<Vec<f64>> {
    if per_domain_delta_mu.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "consistency needs at least 2 domains, got {}",
            per_domain_delta_mu.len()
        )));
    }
    let vals: Vec<&Vec<f64>> = per_domain_delta_mu.values().collect();
    let n = vals[0].len();
    if vals.iter().any(|v| v.len() != n) {
        return Err(Error::Dimension("per-domain vectors differ in length".into()));
    }
    let d = vals.len() as f64;
    Ok((0..n)
        .map(|j| {
            let m = vals.iter().map(|v| v[j]).sum::<f64>() / d;
            let var = vals.iter().map(|v| (v[j] - m).powi(2)).sum::<f64>() / d;
            (m.abs() / (var.sqrt() + CONSISTENCY_EPS)).clamp(0.0, CONSISTENCY_MAX)
        })
        .collect())
}

/// Two-stage funnel: gap gate first, then the inclusive composite threshold.
#[allow(clippy::too_many_arguments)]
pub fn composite_filter(
    delta_mu: &[f64],
    purity: &[f64],
    consistency: &[f64],
    gap_fraction: &[f64],
    gap_min: f64,
    composite_min: f64,
    phenomenon: &str,
    layer: usize,
    polarity: Polarity,
) -> Result<(Vec<usize>, MiningReport)> {
    let n = delta_mu.len();
    if purity.len() != n || consistency.len() != n || gap_fraction.len() != n {
        return Err(Error::Dimension("score vectors differ in length".into()));
    }
    let mut per_feature = BTreeMap::new();
    let mut passed_gap = 0;
    let mut survivors = Vec::new();
    for j in 0..n {
        let composite = FeatureRecord::composite_of(delta_mu[j], purity[j], consistency[j]);
        per_feature.insert(
            j,
            FeatureScore {
                delta_mu: delta_mu[j],
                purity: purity[j],
                consistency: consistency[j],
                composite,
                gap_fraction: gap_fraction[j],
            },
        );
        if gap_fraction[j] < gap_min {
            continue;
        }
        passed_gap += 1;
        if composite >= composite_min {
            survivors.push(j);
        }
    }
    let report = MiningReport {
        phenomenon: phenomenon.to_string(),
        layer,
        polarity,
        candidates_total: n,
        passed_gap,
        passed_composite: survivors.len(),
        records_admitted: 0,
        per_feature,
        warnings: Vec::new(),
    };
    Ok((survivors, report))
}

// ---------------------------------------------------------------------------
// SVD modes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SvdModes {
    /// Right singular vectors, descending singular value, length = columns of D.
    pub vectors: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Top-`k` right singular vectors of `D` (rows = pairs), sign-aligned with
/// `delta_mu`. Returns only `rank(D)` modes when `k` exceeds it.
pub fn svd_modes_of(rows: &[Vec<f64>], delta_mu: &[f64], k: usize) -> Result<SvdModes> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("empty difference matrix".into()));
    }
    let ncols = rows[0].len();
    if delta_mu.len() != ncols || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension("difference matrix / delta_mu shape mismatch".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let mut warnings = Vec::new();
    if rows.len() < k {
        warnings.push(format!("only {} pairs for k = {k}", rows.len()));
    }
    let d = DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]);
    let svd = d.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let smax = order
        .first()
        .map(|&i| svd.singular_values[i])
        .unwrap_or(0.0);
    let tol = smax * f64::EPSILON * rows.len().max(ncols) as f64;
    let rank = order
        .iter()
        .filter(|&&i| svd.singular_values[i] > tol && svd.singular_values[i] > 0.0)
        .count();
    if k > rank {
        warnings.push(format!("k = {k} exceeds rank(D) = {rank}; returning {rank} modes"));
    }
    let mut vectors = Vec::new();
    let mut singular_values = Vec::new();
    for (mi, &i) in order.iter().take(k.min(rank)).enumerate() {
        let mut v: Vec<f64> = v_t.row(i).iter().copied().collect();
        let dot = linalg::dot(&v, delta_mu);
        if dot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        } else if dot == 0.0 {
            warnings.push(format!("mode {mi}: v·Δμ = 0, sign left as computed"));
        }
        vectors.push(v);
        singular_values.push(svd.singular_values[i]);
    }
    Ok(SvdModes {
        vectors,
        singular_values,
        warnings,
    })
}

pub fn svd_modes(
    pairs: &[ContrastivePair],
    sae: &SaeSpec,
    layer: usize,
    k: usize,
) -> Result<SvdModes> {
    let rows = difference_matrix(pairs, sae, layer)?;
    let domains: Vec<&str> = pairs.iter().map(|p| p.domain.as_str()).collect();
    let stats = stats_from_differences(&rows, &domains)?;
    svd_modes_of(&rows, &stats.delta_mu, k)
}

// ---------------------------------------------------------------------------
// Per-phenomenon mining
// ---------------------------------------------------------------------------

/// Uniform subsample without replacement, returned in original order.
pub fn subsample_indices(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, cap).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningOutcome {
    pub records: Vec<FeatureRecord>,
    pub reports: Vec<MiningReport>,
}

pub fn feature_id(phenomenon: &str, layer: usize, polarity: Polarity, mode: usize) -> String {
    format!("{phenomenon}/L{layer}/{}/m{mode}", polarity.as_str())
}

fn mine_direction(
    rows: &[Vec<f64>],
    domains: &[&str],
    sae: &SaeSpec,
    phenomenon: &str,
    layer: usize,
    polarity: Polarity,
    cfg: &MiningConfig,
) -> Result<(Vec<FeatureRecord>, MiningReport)> {
    let stats = stats_from_differences(rows, domains)?;
    let pur = purity(&stats.gap_fraction);
    let cons = consistency(&stats.per_domain_delta_mu)?;
    let (survivors, mut report) = composite_filter(
        &stats.delta_mu,
        &pur,
        &cons,
        &stats.gap_fraction,
        cfg.gap_min,
        cfg.composite_min,
        phenomenon,
        layer,
        polarity,
    )?;
    if survivors.is_empty() {
        return Ok((Vec::new(), report));
    }
    let sub_rows: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| survivors.iter().map(|&j| r[j]).collect())
        .collect();
    let sub_mu: Vec<f64> = survivors.iter().map(|&j| stats.delta_mu[j]).collect();
    let modes = svd_modes_of(&sub_rows, &sub_mu, cfg.k)?;
    report.warnings.extend(modes.warnings.iter().cloned());

    let mut records = Vec::new();
    for (mi, v) in modes.vectors.iter().enumerate() {
        let mut full = vec![0.0; sae.n_features];
        for (&j, &x) in survivors.iter().zip(v) {
            full[j] = x;
        }
        let direction = match sae::decode_direction(sae, &full, &stats.delta_mu) {
            Ok(d) => d,
            Err(Error::DegenerateDirection { norm }) => {
                report
                    .warnings
                    .push(format!("mode {mi}: degenerate decoded direction (norm {norm:e})"));
                continue;
            }
            Err(e) => return Err(e),
        };
        // Mode-level statistics are the feature statistics of the scalar projection D_i · v.
        let proj: Vec<Vec<f64>> = sub_rows.iter().map(|r| vec![linalg::dot(r, v)]).collect();
        let ms = stats_from_differences(&proj, domains)?;
        let delta_mu = ms.delta_mu[0];
        let purity = ms.gap_fraction[0];
        let consistency = consistency(&ms.per_domain_delta_mu)?[0];
        let composite = FeatureRecord::composite_of(delta_mu, purity, consistency);
        if composite < cfg.composite_min {
            continue;
        }
        records.push(FeatureRecord {
            feature_id: feature_id(phenomenon, layer, polarity, mi),
            phenomenon: phenomenon.to_string(),
            layer,
            direction: direction.iter().map(|&x| x as f32).collect(),
            mode_index: mi,
            polarity,
            delta_mu,
            purity,
            consistency,
            composite,
            quality_weight: 1.0,
        });
    }
    // Directions are stored as f32; renormalize in f32 space so the unit-norm
    // invariant holds on the persisted values.
    for r in &mut records {
        let n = linalg::dot_f32_f64(&r.direction, &r.direction).sqrt();
        r.direction.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
    }
    report.records_admitted = records.len();
    Ok((records, report))
}

/// Mines one (phenomenon, layer) unit: subsample, filter, SVD, decode;
/// optionally repeated on swapped pairs for reverse-polarity records.
pub fn mine_phenomenon(
    pairs: &[ContrastivePair],
    sae: &SaeSpec,
    layer: usize,
    cfg: &MiningConfig,
) -> Result<MiningOutcome> {
    let phenomenon = match pairs.first() {
        Some(p) => p.phenomenon.clone(),
        None => return Err(Error::InvalidInput("no contrastive pairs".into())),
    };
    if pairs.iter().any(|p| p.phenomenon != phenomenon) {
        return Err(Error::InvalidInput(
            "mine_phenomenon needs pairs from a single phenomenon".into(),
        ));
    }
    let idx = subsample_indices(pairs.len(), cfg.cap, cfg.seed);
    let chosen: Vec<ContrastivePair> = idx.iter().map(|&i| pairs[i].clone()).collect();
    let rows = difference_matrix(&chosen, sae, layer)?;
    let domains: Vec<&str> = chosen.iter().map(|p| p.domain.as_str()).collect();

    let (mut records, fwd) =
        mine_direction(&rows, &domains, sae, &phenomenon, layer, Polarity::Forward, cfg)?;
    let mut reports = vec![fwd];
    if cfg.bidirectional {
        let neg_rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|x| -x).collect())
            .collect();
        let (rev_records, rev) =
            mine_direction(&neg_rows, &domains, sae, &phenomenon, layer, Polarity::Reverse, cfg)?;
        records.extend(rev_records);
        reports.push(rev);
    }
    for r in &reports {
        if r.records_admitted == 0 {
            log::info!(
                "{} layer {} ({}): no records admitted",
                r.phenomenon,
                r.layer,
                r.polarity.as_str()
            );
        }
    }
    Ok(MiningOutcome { records, reports })
}

/// Mines every (phenomenon, layer) unit and merges the results into a bank
/// after the per-phenomenon trim.
pub fn mine_bank(
    pairs: &[ContrastivePair],
    saes: &[SaeSpec],
    layers: &[usize],
    cfg: &MiningConfig,
    bank_id: &str,
    par: Parallelism,
) -> Result<(DirectionBank, Vec<MiningReport>)> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::InvalidInput("no contrastive pairs".into()))?;
    let model_id = first.pos.model_id().to_string();
    let d_model = first.pos.d_model();
    let mut by_phen: BTreeMap<&str, Vec<ContrastivePair>> = BTreeMap::new();
    for p in pairs {
        by_phen.entry(p.phenomenon.as_str()).or_default().push(p.clone());
    }
    let mut units = Vec::new();
    for (phen, group) in &by_phen {
        for &layer in layers {
            let sae = saes.iter().find(|s| s.layer == layer).ok_or_else(|| {
                Error::InvalidInput(format!("no SAE supplied for layer {layer}"))
            })?;
            units.push((*phen, group, sae, layer));
        }
    }
    let outcomes = par.try_map(&units, |(_, group, sae, layer)| {
        mine_phenomenon(group, sae, *layer, cfg)
    })?;

    let mut per_phen: BTreeMap<&str, Vec<FeatureRecord>> = BTreeMap::new();
    let mut reports = Vec::new();
    for ((phen, ..), out) in units.iter().zip(outcomes) {
        per_phen.entry(phen).or_default().extend(out.records);
        reports.extend(out.reports);
    }
    let trim = cfg.trim_size();
    let mut records = Vec::new();
    for (_, mut recs) in per_phen {
        crate::bank::sort_records(&mut recs);
        recs.truncate(trim);
        records.extend(recs);
    }
    let created_with = config_digest(cfg);
    let bank = DirectionBank::assemble(
        bank_id,
        model_id,
        d_model,
        cfg.k,
        records,
        cfg.composite_min,
        created_with,
    )?;
    Ok((bank, reports))
}

/// Hex SHA-256 of the canonical JSON of the mining configuration.
pub fn config_digest(cfg: &MiningConfig) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_string(cfg).expect("config serializes");
    format!("mining-sha256:{}", hex::encode(Sha256::digest(json.as_bytes())))
}

/// In-the-wild selectivity diagnostic: for each feature, the fraction of null
/// traces whose pooled code exceeds the feature's median pooled code on the
/// positive side of the pairs.
pub fn selectivity_report(
    pairs: &[ContrastivePair],
    null_traces: &[ActivationTrace],
    sae: &SaeSpec,
    layer: usize,
    features: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if pairs.is_empty() || null_traces.is_empty() {
        return Err(Error::InvalidInput("selectivity needs pairs and null traces".into()));
    }
    let pos: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| mean_pool_encode(sae, &p.pos, layer, false).map(|c| c.values))
        .collect::<Result<_>>()?;
    let nulls: Vec<Vec<f64>> = null_traces
        .iter()
        .map(|t| mean_pool_encode(sae, t, layer, false).map(|c| c.values))
        .collect::<Result<_>>()?;
    let mut out = BTreeMap::new();
    for &j in features {
        if j >= sae.n_features {
            return Err(Error::InvalidInput(format!("feature index {j} out of range")));
        }
        let mut col: Vec<f64> = pos.iter().map(|c| c[j]).collect();
        col.sort_by(f64::total_cmp);
        let mid = col.len() / 2;
        let median = if col.len() % 2 == 1 {
            col[mid]
        } else {
            0.5 * (col[mid - 1] + col[mid])
        };
        let fires = nulls.iter().filter(|c| c[j] > median).count();
        out.insert(j, fires as f64 / nulls.len() as f64);
    }
    Ok(out)
}
