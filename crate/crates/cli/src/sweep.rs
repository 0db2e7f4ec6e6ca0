//! Grid sweep over bank size `k`, steering strength `α` and features per
//! document, on a synthetic world directory.
//!
//! Every cell generates one watermarked text per prompt and reports the
//! detection rate, mean `ẑ`, distinct-n, Self-BLEU and the perplexity ratio
//! against the world's reference continuations. With `--random-control` each
//! cell is repeated with the bank's directions replaced by random unit
//! vectors.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use slam_core::backend::{Backend, SamplingParams};
use slam_core::bank::{load_saes, DirectionBank, Document};
use slam_core::corpus;
use slam_core::detector::fit_nulls;
use slam_core::generator::GenerationParams;
use slam_core::metrics;
use slam_core::mining::mine_bank;
use slam_core::par::Parallelism;
use slam_core::selection::SelectionSpec;

use crate::commands::{load_world, mining_config, sampling_params, DISTINCT_ORDER};
use crate::config::Config;
use crate::io::{self, TextDoc};
use crate::{QualityFilter, SweepArgs};

/// Prompts used to probe each direction's perplexity cost.
const QUALITY_PROBES: usize = 8;
const QUALITY_PROBE_TOKENS: usize = 64;
const CONTROL_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub alpha: f64,
    pub features: usize,
    pub quality_filter: bool,
    /// `"mined"` or `"random"`.
    pub directions: String,
    pub texts: usize,
    pub tpr: f64,
    pub mean_z_hat: f64,
    pub mean_candidates: f64,
    pub distinct_n: f64,
    pub self_bleu: f64,
    pub ppl_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema: String,
    pub version: u32,
    pub model_id: String,
    pub prompts: usize,
    pub baseline_texts: usize,
    pub rows: Vec<SweepRow>,
}

struct Inputs {
    prompts: Vec<Vec<u32>>,
    reference: Vec<Document>,
    baseline: Vec<Document>,
}

fn to_docs(backend: &dyn Backend, docs: &[TextDoc], par: Parallelism) -> Result<Vec<Document>> {
    par.try_map(docs, |d| d.to_document(backend))
}

pub fn run(a: SweepArgs, cfg: &Config, par: Parallelism) -> Result<()> {
    if a.k.is_empty() || a.alpha.is_empty() || a.features.is_empty() {
        bail!("--k, --alpha and --features each need at least one value");
    }
    let world = load_world(&a.world)?;
    let backend: &dyn Backend = &world.backend;
    let key = io::load_key(a.key.key_file.as_deref().or(cfg.key_file.as_deref()))?;
    let pairs = io::read_pairs(&a.world.join("pairs"))?;
    let saes = load_saes(a.world.join("saes.json")).context("loading saes.json from the world")?;
    let layers = cfg
        .mining
        .layers
        .clone()
        .unwrap_or_else(|| pairs[0].pos.layer_ids().to_vec());

    let mut prompt_docs = io::read_doc_dir(&a.world.join("prompts"))?;
    let mut reference = io::read_doc_dir(&a.world.join("reference"))?;
    if let Some(n) = a.prompts {
        if n > prompt_docs.len() {
            bail!("--prompts {n} exceeds the {} prompts in the world", prompt_docs.len());
        }
        prompt_docs.truncate(n);
        reference.truncate(n);
    }
    if reference.len() != prompt_docs.len() {
        bail!("world has {} reference texts for {} prompts", reference.len(), prompt_docs.len());
    }
    let inputs = Inputs {
        prompts: prompt_docs
            .iter()
            .map(|d| backend.encode(&d.prompt))
            .collect::<slam_core::Result<_>>()?,
        reference: to_docs(backend, &reference, par)?,
        baseline: to_docs(backend, &io::read_doc_dir(&a.world.join("baseline"))?, par)?,
    };
    let sampling = sampling_params(&a.sampling, cfg);
    let candidates = a
        .candidates
        .or(cfg.generation.candidates)
        .unwrap_or(GenerationParams::default().candidates);

    let filters: &[bool] = match a.quality_filter {
        QualityFilter::Off => &[false],
        QualityFilter::On => &[true],
        QualityFilter::Both => &[false, true],
    };
    let mut rows = Vec::new();
    for &k in &a.k {
        let mcfg = mining_config(cfg, Some(k), None, None, None);
        let (mined, _) = mine_bank(&pairs, &saes, &layers, &mcfg, &format!("sweep-k{k}"), par)?;
        for &qf in filters {
            let mut bank = mined.clone();
            if qf {
                apply_quality_weights(backend, &mut bank, &inputs.prompts, a.quality_alpha, &sampling, par)?;
            }
            let mut banks = vec![("mined", bank.clone())];
            if a.random_control {
                banks.push(("random", corpus::random_direction_bank(&bank, CONTROL_SEED + k as u64)?));
            }
            for (kind, bank) in &banks {
                for &features in &a.features {
                    let spec = SelectionSpec {
                        features_per_doc: features,
                        ..Default::default()
                    };
                    let nulls = fit_nulls(backend, &inputs.baseline, &key, bank, &spec, par)?;
                    for &alpha in &a.alpha {
                        let params = GenerationParams {
                            alpha,
                            candidates,
                            sampling,
                            ..Default::default()
                        };
                        let gens = corpus::watermarked(
                            backend,
                            &inputs.prompts,
                            "sweep",
                            &key,
                            bank,
                            &spec,
                            &nulls,
                            &params,
                            par,
                        )?;
                        let docs: Vec<Document> = gens.iter().map(|g| g.document.clone()).collect();
                        let n = gens.len() as f64;
                        let row = SweepRow {
                            k,
                            alpha,
                            features,
                            quality_filter: qf,
                            directions: kind.to_string(),
                            texts: gens.len(),
                            tpr: gens.iter().filter(|g| g.detection.decision).count() as f64 / n,
                            mean_z_hat: gens.iter().map(|g| g.detection.z_hat).sum::<f64>() / n,
                            mean_candidates: gens.iter().map(|g| g.candidates_tried as f64).sum::<f64>() / n,
                            distinct_n: metrics::mean_distinct_n(&continuations(&docs), DISTINCT_ORDER)?,
                            self_bleu: metrics::self_bleu(&continuations(&docs), par)?,
                            ppl_ratio: mean_ppl_ratio(backend, &docs, &inputs.reference, par)?,
                        };
                        log::info!(
                            "k={k} alpha={alpha} F={features} qf={qf} {kind}: tpr {:.3} mean z {:.3}",
                            row.tpr,
                            row.mean_z_hat
                        );
                        rows.push(row);
                    }
                }
            }
        }
    }
    io::emit(
        a.out.as_deref(),
        &SweepReport {
            schema: "slam.sweep".into(),
            version: 1,
            model_id: backend.model_id().to_string(),
            prompts: inputs.prompts.len(),
            baseline_texts: inputs.baseline.len(),
            rows,
        },
    )
}

fn continuations(docs: &[Document]) -> Vec<Vec<u32>> {
    docs.iter().map(|d| d.continuation().to_vec()).collect()
}

fn mean_ppl_ratio(backend: &dyn Backend, wm: &[Document], reference: &[Document], par: Parallelism) -> Result<f64> {
    let ratios = par.try_map_range(wm.len(), |i| {
        metrics::ppl_ratio(backend, wm[i].prompt(), wm[i].continuation(), reference[i].continuation())
    })?;
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

fn apply_quality_weights(
    backend: &dyn Backend,
    bank: &mut DirectionBank,
    prompts: &[Vec<u32>],
    alpha: f64,
    sampling: &SamplingParams,
    par: Parallelism,
) -> Result<()> {
    let probe = SamplingParams {
        max_new_tokens: QUALITY_PROBE_TOKENS.min(sampling.max_new_tokens),
        ..*sampling
    };
    let probes = &prompts[..prompts.len().min(QUALITY_PROBES)];
    let weights = metrics::quality_weights(backend, bank, probes, alpha, &probe, par)?;
    for (r, w) in bank.records.iter_mut().zip(weights) {
        r.quality_weight = w;
    }
    bank.validate()?;
    Ok(())
}
