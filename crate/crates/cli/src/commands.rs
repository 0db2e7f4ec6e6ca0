//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use slam_core::attacks::{self, AttackKind, Lexicon};
use slam_core::backend::{Backend, BackendSpec, BridgeBackend, SamplingParams, SyntheticWorld};
use slam_core::bank::{
    load_bank, load_nulls, load_saes, save_bank, save_nulls, save_saes, DirectionBank, Document,
    NullStats, WatermarkKey,
};
use slam_core::corpus;
use slam_core::detector::{self, fit_nulls};
use slam_core::generator::{generate_watermarked, Attempt, Generation, GenerationParams};
use slam_core::metrics;
use slam_core::mining::{mine_bank, MiningConfig};
use slam_core::par::Parallelism;
use slam_core::selection::{selection_for_text, SelectionSpec};

use crate::config::Config;
use crate::io::{self, TextDoc};
use crate::{
    AttackArgs, BackendArgs, BackendKind, CalibrateArgs, Cli, Command, DetectArgs, EvalArgs,
    GenerateArgs, MineArgs, Metric, SamplingArgs, SelectArgs, SelectionArgs, SynthWorldArgs,
};

/// Orders used for the distinct-n average.
pub const DISTINCT_ORDER: usize = 3;

const WORLD_SCHEMA: &str = "slam.world";
const SCORES_SCHEMA: &str = "slam.scores";

pub fn run(cli: Cli) -> Result<()> {
    let cfg = Config::load(cli.config.as_deref())?;
    if let Some(jobs) = cli.jobs.or(cfg.jobs).filter(|&j| j > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let par = Parallelism::default();
    match cli.command {
        Command::SynthWorld(a) => synth_world(a, &cfg, par),
        Command::Mine(a) => mine(a, &cfg, par),
        Command::Select(a) => select(a, &cfg),
        Command::Calibrate(a) => calibrate(a, &cfg, par),
        Command::Generate(a) => generate(a, &cfg, par),
        Command::Detect(a) => detect(a, &cfg, par),
        Command::Attack(a) => attack(a, par),
        Command::Eval(a) => eval(a, &cfg, par),
        Command::Sweep(a) => crate::sweep::run(a, &cfg, par),
    }
}

// ---------------------------------------------------------------------------
// Shared resolution helpers
// ---------------------------------------------------------------------------

/// An opened backend. The synthetic world is kept whole so callers can reach
/// its prompts, pairs and lexicon.
pub enum Opened {
    Synthetic(Box<SyntheticWorld>),
    Bridge(BridgeBackend),
}

impl Opened {
    pub fn backend(&self) -> &dyn Backend {
        match self {
            Opened::Synthetic(w) => &w.backend,
            Opened::Bridge(b) => b,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldFile {
    schema: String,
    version: u32,
    spec: BackendSpec,
}

pub fn load_world(dir: &Path) -> Result<SyntheticWorld> {
    let path = dir.join("world.json");
    let f: WorldFile = io::read_json(&path)?;
    if f.schema != WORLD_SCHEMA || f.version != 1 {
        bail!("{}: expected {WORLD_SCHEMA} v1, got {} v{}", path.display(), f.schema, f.version);
    }
    Ok(SyntheticWorld::new(f.spec)?)
}

pub fn open_backend(args: &BackendArgs, cfg: &Config) -> Result<Opened> {
    let world = args.world.as_ref().or(cfg.backend.world.as_ref());
    let program = args.bridge_program.as_ref().or(cfg.backend.bridge_program.as_ref());
    let kind = match (args.backend, cfg.backend.kind.as_deref()) {
        (Some(k), _) => k,
        (None, Some("synthetic")) => BackendKind::Synthetic,
        (None, Some("bridge")) => BackendKind::Bridge,
        (None, Some(other)) => bail!("unknown backend kind {other:?} in config"),
        (None, None) if world.is_some() => BackendKind::Synthetic,
        (None, None) if program.is_some() => BackendKind::Bridge,
        (None, None) => bail!("no backend given; pass --world DIR or --backend bridge --bridge-program P --model M"),
    };
    match kind {
        BackendKind::Synthetic => {
            let dir = world.context("the synthetic backend needs --world DIR")?;
            Ok(Opened::Synthetic(Box::new(load_world(dir)?)))
        }
        BackendKind::Bridge => {
            let program = program.context("the bridge backend needs --bridge-program")?;
            let model = args
                .model
                .as_ref()
                .or(cfg.backend.model.as_ref())
                .context("the bridge backend needs --model")?;
            Ok(Opened::Bridge(BridgeBackend::new(program, model.clone())?))
        }
    }
}

pub fn selection_spec(args: &SelectionArgs, cfg: &Config) -> Result<SelectionSpec> {
    let d = SelectionSpec::default();
    let s = &cfg.selection;
    let spec = SelectionSpec {
        features_per_doc: args.features.or(s.features_per_doc).unwrap_or(d.features_per_doc),
        pool_size: args.pool_size.or(s.pool_size).unwrap_or(d.pool_size),
        anchor_size: args.anchor_size.or(s.anchor_size).unwrap_or(d.anchor_size),
        temperature: args.selection_temperature.or(s.temperature).unwrap_or(d.temperature),
        sentence_level: args.sentence_level || s.sentence_level.unwrap_or(d.sentence_level),
    };
    spec.validate()?;
    Ok(spec)
}

pub fn sampling_params(args: &SamplingArgs, cfg: &Config) -> SamplingParams {
    let d = SamplingParams::default();
    let g = &cfg.generation;
    SamplingParams {
        temperature: args.temperature.or(g.temperature).unwrap_or(d.temperature),
        top_p: args.top_p.or(g.top_p).unwrap_or(d.top_p),
        max_new_tokens: args.max_new_tokens.or(g.max_new_tokens).unwrap_or(d.max_new_tokens),
    }
}

fn key_for(path: Option<&Path>, cfg: &Config) -> Result<WatermarkKey> {
    io::load_key(path.or(cfg.key_file.as_deref()))
}

fn documents(backend: &dyn Backend, docs: &[TextDoc], par: Parallelism) -> Result<Vec<Document>> {
    par.try_map(docs, |d| d.to_document(backend).with_context(|| format!("tokenizing {}", d.doc_id)))
}

fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

// ---------------------------------------------------------------------------
// synth-world
// ---------------------------------------------------------------------------

fn synth_world(a: SynthWorldArgs, cfg: &Config, par: Parallelism) -> Result<()> {
    let spec = BackendSpec {
        seed: a.seed,
        ..Default::default()
    };
    let world = SyntheticWorld::new(spec.clone())?;
    let out = &a.out;
    io::write_json(
        &out.join("world.json"),
        &WorldFile {
            schema: WORLD_SCHEMA.into(),
            version: 1,
            spec,
        },
    )?;
    save_saes(&world.saes, out.join("saes.json"))?;

    let layers = world.mining_layers();
    let pairs = world
        .pairs(a.pairs_per_domain, a.seed)?
        .into_iter()
        .map(|mut p| {
            p.pos = p.pos.restrict_layers(&layers)?;
            p.neg = p.neg.restrict_layers(&layers)?;
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    io::write_pairs(&out.join("pairs"), &pairs)?;
    io::write_text(&out.join("lexicon.tsv"), &attacks::format_lexicon(&world.lexicon()))?;

    let backend = &world.backend;
    let prompts = world.prompts(a.prompts, a.prompt_len, a.seed.wrapping_add(1))?;
    let prompt_docs = prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(TextDoc {
                doc_id: format!("prompt-{i:04}"),
                prompt: backend.decode(p)?,
                text: String::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    io::write_doc_dir(&out.join("prompts"), &prompt_docs)?;

    // Unsteered continuations of the same prompts, the reference side of
    // perplexity ratios.
    let sampling = sampling_params(&a.sampling, cfg);
    let reference = corpus::unwatermarked(backend, &prompts, &sampling, "ref", a.seed.wrapping_add(3), par)?;
    let ref_docs = reference
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let mut t = TextDoc::from_document(backend, d)?;
            t.doc_id = format!("ref-{i:04}");
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    io::write_doc_dir(&out.join("reference"), &ref_docs)?;

    let base_prompts = world.prompts(a.baseline, a.prompt_len, a.seed.wrapping_add(2))?;
    let baseline = corpus::unwatermarked(backend, &base_prompts, &sampling, "base", a.seed, par)?;
    let base_docs = baseline
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let mut t = TextDoc::from_document(backend, d)?;
            t.doc_id = format!("base-{i:04}");
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    io::write_doc_dir(&out.join("baseline"), &base_docs)?;
    log::info!(
        "world seed {} written to {}: {} pairs, {} prompts, {} baseline texts",
        a.seed,
        out.display(),
        pairs.len(),
        prompt_docs.len(),
        base_docs.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// mine / select / calibrate
// ---------------------------------------------------------------------------

pub fn mining_config(cfg: &Config, k: Option<usize>, bidirectional: Option<bool>, cap: Option<usize>, seed: Option<u64>) -> MiningConfig {
    let d = MiningConfig::default();
    let m = &cfg.mining;
    MiningConfig {
        k: k.or(m.k).unwrap_or(d.k),
        bidirectional: bidirectional.or(m.bidirectional).unwrap_or(d.bidirectional),
        cap: cap.or(m.cap).unwrap_or(d.cap),
        seed: seed.or(m.seed).unwrap_or(d.seed),
        gap_min: m.gap_min.unwrap_or(d.gap_min),
        composite_min: m.composite_min.unwrap_or(d.composite_min),
        max_records_per_phenomenon: None,
    }
}

#[derive(Serialize)]
struct MineSummary<'a> {
    bank_id: &'a str,
    model_id: &'a str,
    records: usize,
    layers: Vec<usize>,
    per_phenomenon: BTreeMap<&'a str, usize>,
    created_with: &'a str,
}

fn mine(a: MineArgs, cfg: &Config, par: Parallelism) -> Result<()> {
    let pairs = io::read_pairs(&a.pairs)?;
    let saes = load_saes(&a.sae).with_context(|| format!("loading SAEs from {}", a.sae.display()))?;
    let first = pairs.first().context("pair directory holds no pairs")?;
    let layers = a
        .layers
        .clone()
        .or_else(|| cfg.mining.layers.clone())
        .unwrap_or_else(|| first.pos.layer_ids().to_vec());
    let bidirectional = if a.no_bidirectional {
        Some(false)
    } else if a.bidirectional {
        Some(true)
    } else {
        None
    };
    let mcfg = mining_config(cfg, a.k, bidirectional, a.cap, a.seed);
    let (bank, reports) = mine_bank(&pairs, &saes, &layers, &mcfg, &a.bank_id, par)?;
    save_bank(&bank, &a.out)?;
    if let Some(path) = &a.report {
        io::write_json(path, &reports)?;
    }
    let mut per_phenomenon = BTreeMap::new();
    for r in &bank.records {
        *per_phenomenon.entry(r.phenomenon.as_str()).or_insert(0) += 1;
    }
    io::emit(
        None,
        &MineSummary {
            bank_id: &bank.bank_id,
            model_id: &bank.model_id,
            records: bank.records.len(),
            layers: bank.layers().into_iter().collect(),
            per_phenomenon,
            created_with: &bank.created_with,
        },
    )
}

#[derive(Serialize)]
struct PickOut<'a> {
    feature_id: &'a str,
    phenomenon: &'a str,
    layer: usize,
    polarity: &'a str,
    pool_rank: usize,
    anchor: bool,
}

#[derive(Serialize)]
struct SentenceOut<'a> {
    sentence: usize,
    features: Vec<PickOut<'a>>,
    warnings: &'a [String],
}

#[derive(Serialize)]
struct SelectOut<'a> {
    doc_id: &'a str,
    bank_id: &'a str,
    key_id: &'a str,
    key_digest: String,
    selection: &'a SelectionSpec,
    sentences: Vec<SentenceOut<'a>>,
}

fn select(a: SelectArgs, cfg: &Config) -> Result<()> {
    let bank = load_bank(&a.bank)?;
    let key = key_for(a.key.key_file.as_deref(), cfg)?;
    let spec = selection_spec(&a.selection, cfg)?;
    let sels = selection_for_text(&key, &a.doc_id, &spec, &bank, a.sentences)?;
    let sentences = sels
        .iter()
        .map(|(&i, s)| SentenceOut {
            sentence: i,
            features: s
                .picks
                .iter()
                .map(|p| PickOut {
                    feature_id: &p.record.feature_id,
                    phenomenon: &p.record.phenomenon,
                    layer: p.record.layer,
                    polarity: p.record.polarity.as_str(),
                    pool_rank: p.pool_rank,
                    anchor: p.anchor,
                })
                .collect(),
            warnings: &s.warnings,
        })
        .collect();
    io::emit(
        a.out.as_deref(),
        &SelectOut {
            doc_id: &a.doc_id,
            bank_id: &bank.bank_id,
            key_id: key.key_id(),
            key_digest: key.digest(),
            selection: &spec,
            sentences,
        },
    )
}

fn calibrate(a: CalibrateArgs, cfg: &Config, par: Parallelism) -> Result<()> {
    let bank = load_bank(&a.bank)?;
    let key = key_for(a.key.key_file.as_deref(), cfg)?;
    let spec = selection_spec(&a.selection, cfg)?;
    let opened = open_backend(&a.backend, cfg)?;
    let backend = opened.backend();
    let docs = documents(backend, &io::read_doc_dir(&a.baseline_dir)?, par)?;
    let nulls = fit_nulls(backend, &docs, &key, &bank, &spec, par)?;
    save_nulls(&nulls, &a.out)?;
    log::info!(
        "fitted nulls on {} texts: mu_raw {:.4}, sigma_raw {:.4}",
        nulls.fitted_on,
        nulls.bank_level.mu_raw,
        nulls.bank_level.sigma_raw
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// generate / detect
// ---------------------------------------------------------------------------

/// What `generate` records about one document.
#[derive(Debug, Serialize)]
pub struct GenerationRecord {
    pub doc_id: String,
    pub prompt: String,
    pub text: String,
    pub z_hat: f64,
    pub z_raw: f64,
    pub decision: bool,
    pub threshold: f64,
    pub candidates_tried: usize,
    pub chosen: usize,
    pub attempts: Vec<Attempt>,
}

impl GenerationRecord {
    fn new(backend: &dyn Backend, g: &Generation) -> Result<Self> {
        let doc = TextDoc::from_document(backend, &g.document)?;
        Ok(Self {
            doc_id: doc.doc_id,
            prompt: doc.prompt,
            text: doc.text,
            z_hat: g.detection.z_hat,
            z_raw: g.detection.z_raw,
            decision: g.detection.decision,
            threshold: g.detection.threshold,
            candidates_tried: g.candidates_tried,
            chosen: g.chosen,
            attempts: g.attempts.clone(),
        })
    }
}

fn load_pair(bank: &Path, nulls: &Path) -> Result<(DirectionBank, NullStats)> {
    let bank = load_bank(bank).with_context(|| format!("loading bank {}", bank.display()))?;
    let nulls = load_nulls(nulls).with_context(|| format!("loading nulls {}", nulls.display()))?;
    Ok((bank, nulls))
}

fn generate(a: GenerateArgs, cfg: &Config, par: Parallelism) -> Result<()> {
    let (bank, nulls) = load_pair(&a.bank, &a.nulls)?;
    let key = key_for(a.key.key_file.as_deref(), cfg)?;
    let opened = open_backend(&a.backend, cfg)?;
    let backend = opened.backend();
    let g = &cfg.generation;
    let d = GenerationParams::default();
    let mut params = GenerationParams {
        alpha: a.alpha.or(g.alpha).unwrap_or(d.alpha),
        candidates: a.candidates.or(g.candidates).unwrap_or(d.candidates),
        threshold: a.threshold.or(cfg.detection.threshold).unwrap_or(d.threshold),
        sampling: sampling_params(&a.sampling, cfg),
        degeneracy: d.degeneracy,
    };
    if let Some(m) = a.min_tokens.or(g.min_tokens) {
        params.degeneracy.min_tokens = m;
    }
    let spec = nulls.selection.clone();

    if let Some(prompt_file) = &a.prompt_file {
        let doc_id = a.doc_id.as_deref().context("--prompt-file needs --doc-id")?;
        let text = std::fs::read_to_string(prompt_file)
            .with_context(|| format!("reading prompt {}", prompt_file.display()))?;
        let prompt = backend.encode(text.trim())?;
        let gen = generate_watermarked(backend, &prompt, &key, doc_id, &bank, &spec, &nulls, &params)?;
        return io::write_json(&a.out, &GenerationRecord::new(backend, &gen)?);
    }

    let dir = a.prompts_dir.as_deref().context("pass --prompt-file or --prompts-dir")?;
    let prompts = io::read_doc_dir(dir)?;
    let records = par.try_map(&prompts, |p| -> Result<GenerationRecord> {
        let prompt = backend.encode(&p.prompt)?;
        let gen = generate_watermarked(backend, &prompt, &key, &p.doc_id, &bank, &spec, &nulls, &params)
            .with_context(|| format!("generating {}", p.doc_id))?;
        GenerationRecord::new(backend, &gen)
    })?;
    let docs: Vec<TextDoc> = records
        .iter()
        .map(|r| TextDoc {
            doc_id: r.doc_id.clone(),
            prompt: r.prompt.clone(),
            text: r.text.clone(),
        })
        .collect();
    io::write_doc_dir(&a.out, &docs)?;
    if let Some(path) = &a.report {
        io::write_json(path, &records)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub doc_id: String,
    pub z_hat: f64,
    pub z_raw: f64,
    pub decision: bool,
    pub num_tokens_scored: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_feature_z: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_set: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFile {
    pub schema: String,
    pub version: u32,
    pub bank_id: String,
    pub key_digest: String,
    pub sentence_level: bool,
    pub threshold: f64,
    pub results: Vec<ScoreEntry>,
}

fn detect(a: DetectArgs, cfg: &Config, par: Parallelism) -> Result<()> {
    let (bank, nulls) = load_pair(&a.bank, &a.nulls)?;
    let key = key_for(a.key.key_file.as_deref(), cfg)?;
    let opened = open_backend(&a.backend, cfg)?;
    let backend = opened.backend();
    let threshold = a
        .threshold
        .or(cfg.detection.threshold)
        .unwrap_or(detector::DEFAULT_THRESHOLD);
    let docs = if let Some(path) = &a.doc {
        vec![io::read_doc(path)?]
    } else if let Some(path) = &a.text_file {
        let read = |p: &Path| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
        vec![TextDoc {
            doc_id: a.doc_id.clone().context("--text-file needs --doc-id")?,
            prompt: a.prompt_file.as_deref().map(read).transpose()?.unwrap_or_default(),
            text: read(path)?,
        }]
    } else {
        io::read_doc_dir(a.in_dir.as_deref().context("pass --doc, --text-file or --in-dir")?)?
    };
    let docs = documents(backend, &docs, par)?;
    let spec = nulls.selection.clone();
    let results = detector::detect_batch(backend, &docs, &key, &bank, &spec, &nulls, threshold, par)?;
    let results = docs
        .iter()
        .zip(results)
        .map(|(d, r)| ScoreEntry {
            doc_id: d.doc_id.clone(),
            z_hat: r.z_hat,
            z_raw: r.z_raw,
            decision: r.decision,
            num_tokens_scored: r.num_tokens_scored,
            per_feature_z: a.json.then(|| r.per_feature_z.clone()),
            active_set: a.json.then(|| r.active_set.iter().cloned().collect()),
        })
        .collect();
    io::emit(
        a.out.as_deref(),
        &ScoreFile {
            schema: SCORES_SCHEMA.into(),
            version: 1,
            bank_id: bank.bank_id.clone(),
            key_digest: key.digest(),
            sentence_level: spec.sentence_level,
            threshold,
            results,
        },
    )
}

// ---------------------------------------------------------------------------
// attack / eval
// ---------------------------------------------------------------------------

fn attack(a: AttackArgs, par: Parallelism) -> Result<()> {
    let rate = a.rate.unwrap_or_else(|| a.kind.default_rate());
    let docs = io::read_doc_dir(&a.input)?;
    let lexicon = match (&a.lexicon, a.kind) {
        (Some(p), _) => attacks::load_lexicon(p).with_context(|| format!("loading lexicon {}", p.display()))?,
        (None, AttackKind::Synonym) => bail!("--kind synonym needs --lexicon FILE"),
        (None, _) => Lexicon::new(),
    };
    let vocab = if a.kind == AttackKind::Wordsub {
        attacks::substitution_vocab(docs.iter().map(|d| d.text.as_str()))
    } else {
        Default::default()
    };
    let out = par.try_map_range(docs.len(), |i| -> Result<TextDoc> {
        let d = &docs[i];
        let text = attacks::apply(a.kind, &d.text, rate, a.seed.wrapping_add(i as u64), &lexicon, &vocab)?;
        Ok(TextDoc { text, ..d.clone() })
    })?;
    io::write_doc_dir(&a.out, &out)
}

#[derive(Debug, Serialize)]
struct CorpusQuality {
    docs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    distinct_n: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    self_bleu: Option<f64>,
}

#[derive(Debug, Serialize)]
struct PplSummary {
    pairs: usize,
    unpaired: usize,
    mean: f64,
    median: f64,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    schema: &'static str,
    version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    wm: Option<CorpusQuality>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bl: Option<CorpusQuality>,
    #[serde(skip_serializing_if = "Option::is_none")]
    detection: Option<metrics::Rates>,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ppl_ratio: Option<PplSummary>,
}

fn corpus_quality(docs: &[TextDoc], want: &[Metric], par: Parallelism) -> Result<CorpusQuality> {
    let texts: Vec<Vec<&str>> = docs.iter().map(|d| words(&d.text)).collect();
    let distinct_n = if want.contains(&Metric::Distinct) {
        Some(metrics::mean_distinct_n(&texts, DISTINCT_ORDER)?)
    } else {
        None
    };
    let self_bleu = if want.contains(&Metric::Selfbleu) {
        Some(metrics::self_bleu(&texts, par)?)
    } else {
        None
    };
    Ok(CorpusQuality {
        docs: docs.len(),
        distinct_n,
        self_bleu,
    })
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn eval(a: EvalArgs, cfg: &Config, par: Parallelism) -> Result<()> {
    let want = a.metrics.clone();
    let wm = a.wm.as_deref().map(io::read_doc_dir).transpose()?;
    let bl = a.bl.as_deref().map(io::read_doc_dir).transpose()?;
    let quality = want.iter().any(|m| matches!(m, Metric::Distinct | Metric::Selfbleu));
    if quality && wm.is_none() && bl.is_none() {
        bail!("distinct and selfbleu need --wm and/or --bl");
    }
    let mut report = EvalReport {
        schema: "slam.eval",
        version: 1,
        wm: None,
        bl: None,
        detection: None,
        threshold: None,
        ppl_ratio: None,
    };
    if quality {
        report.wm = wm.as_deref().map(|d| corpus_quality(d, &want, par)).transpose()?;
        report.bl = bl.as_deref().map(|d| corpus_quality(d, &want, par)).transpose()?;
    }

    if want.contains(&Metric::Tpr) {
        if a.scores.is_empty() {
            bail!("--metrics tpr needs at least one --scores file");
        }
        let (Some(wm), Some(bl)) = (&wm, &bl) else {
            bail!("--metrics tpr needs --wm and --bl to label the scores");
        };
        let label: BTreeMap<&str, bool> = wm
            .iter()
            .map(|d| (d.doc_id.as_str(), true))
            .chain(bl.iter().map(|d| (d.doc_id.as_str(), false)))
            .collect();
        let mut labelled = Vec::new();
        let mut file_threshold = None;
        for path in &a.scores {
            let f: ScoreFile = io::read_json(path)?;
            file_threshold.get_or_insert(f.threshold);
            for r in f.results {
                match label.get(r.doc_id.as_str()) {
                    Some(&pos) => labelled.push((r.z_hat, pos)),
                    None => log::warn!("{}: {} is in neither --wm nor --bl", path.display(), r.doc_id),
                }
            }
        }
        let threshold = a
            .threshold
            .or(file_threshold)
            .unwrap_or(detector::DEFAULT_THRESHOLD);
        report.detection = Some(metrics::tpr_fpr(&labelled, threshold));
        report.threshold = Some(threshold);
    }

    if want.contains(&Metric::Ppl) {
        let reference = match &a.reference {
            Some(dir) => Some(io::read_doc_dir(dir)?),
            None => bl.clone(),
        };
        let (Some(wm), Some(reference)) = (&wm, &reference) else {
            bail!("--metrics ppl needs --wm and --reference (or --bl)");
        };
        let opened = open_backend(&a.backend, cfg)?;
        let backend = opened.backend();
        let mut by_prompt: BTreeMap<&str, &TextDoc> = BTreeMap::new();
        for d in reference {
            by_prompt.entry(d.prompt.as_str()).or_insert(d);
        }
        let matched: Vec<(&TextDoc, &TextDoc)> = wm
            .iter()
            .filter_map(|w| by_prompt.get(w.prompt.as_str()).map(|b| (w, *b)))
            .collect();
        if matched.is_empty() {
            bail!("no watermarked document shares a prompt with a reference document");
        }
        let mut ratios = par.try_map(&matched, |(w, b)| -> Result<f64> {
            let prompt = backend.encode(&w.prompt)?;
            Ok(metrics::ppl_ratio(
                backend,
                &prompt,
                &backend.encode(&w.text)?,
                &backend.encode(&b.text)?,
            )?)
        })?;
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        report.ppl_ratio = Some(PplSummary {
            pairs: ratios.len(),
            unpaired: wm.len() - ratios.len(),
            mean,
            median: median(&mut ratios),
        });
    }
    io::emit(a.out.as_deref(), &report)
}
