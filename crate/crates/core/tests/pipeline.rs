//! End-to-end behaviour on the synthetic world: mining, calibration,
//! generation and detection wired together.

use std::sync::OnceLock;

use slam_core::backend::{Backend, BackendSpec, SamplingParams, SyntheticWorld};
use slam_core::bank::{DirectionBank, Document, NullStats, WatermarkKey};
use slam_core::corpus;
use slam_core::detector::{detect, detect_batch, fit_nulls, raw_score};
use slam_core::generator::{generate_watermarked, Attempt, GenerationParams};
use slam_core::mining::{mine_bank, MiningConfig};
use slam_core::par::Parallelism;
use slam_core::selection::SelectionSpec;
use slam_core::Error;

struct Fixture {
    world: SyntheticWorld,
    bank: DirectionBank,
    key: WatermarkKey,
    baseline: Vec<Document>,
    nulls: NullStats,
}

const NEW_TOKENS: usize = 96;

fn sampling() -> SamplingParams {
    SamplingParams {
        max_new_tokens: NEW_TOKENS,
        ..Default::default()
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let world = SyntheticWorld::new(BackendSpec {
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let pairs = world.pairs(24, 1).unwrap();
        let (bank, _) = mine_bank(
            &pairs,
            &world.saes,
            &world.mining_layers(),
            &MiningConfig::default(),
            "pipeline",
            Parallelism::Rayon,
        )
        .unwrap();
        let key = WatermarkKey::new(vec![0x5a; 32], "test").unwrap();
        let prompts = world.prompts(60, 16, 10).unwrap();
        let baseline =
            corpus::unwatermarked(&world.backend, &prompts, &sampling(), "base", 1, Parallelism::Rayon)
                .unwrap();
        let nulls = fit_nulls(
            &world.backend,
            &baseline,
            &key,
            &bank,
            &SelectionSpec::default(),
            Parallelism::Rayon,
        )
        .unwrap();
        Fixture {
            world,
            bank,
            key,
            baseline,
            nulls,
        }
    })
}

fn gen_params(alpha: f64) -> GenerationParams {
    GenerationParams {
        alpha,
        sampling: sampling(),
        ..Default::default()
    }
}

#[test]
fn baseline_scores_are_self_standardized() {
    let f = fixture();
    let spec = SelectionSpec::default();
    let z: Vec<f64> = detect_batch(
        &f.world.backend,
        &f.baseline,
        &f.key,
        &f.bank,
        &spec,
        &f.nulls,
        2.0,
        Parallelism::Rayon,
    )
    .unwrap()
    .iter()
    .map(|r| r.z_hat)
    .collect();
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 1e-9, "mean {mean}");
    assert!((var - 1.0).abs() < 1e-9, "var {var}");
}

#[test]
fn watermarked_text_is_detected_and_matches_standalone_detect() {
    let f = fixture();
    let spec = SelectionSpec::default();
    let prompts = f.world.prompts(8, 16, 20).unwrap();
    let gens = corpus::watermarked(
        &f.world.backend,
        &prompts,
        "wm",
        &f.key,
        &f.bank,
        &spec,
        &f.nulls,
        &gen_params(2.0),
        Parallelism::Rayon,
    )
    .unwrap();
    for g in &gens {
        assert!(g.detection.decision, "z_hat {}", g.detection.z_hat);
        assert!(g.candidates_tried <= 4);
        let again = detect(&f.world.backend, &g.document, &f.key, &f.bank, &spec, &f.nulls, 2.0).unwrap();
        assert_eq!(again, g.detection);
        assert!(g.detection.active_set.iter().all(|k| g.detection.per_feature_z.contains_key(k)));
    }
    // A different key does not see the watermark any more than chance.
    let other = WatermarkKey::new(vec![0x11; 32], "other").unwrap();
    let wrong: Vec<f64> = gens
        .iter()
        .map(|g| {
            detect(&f.world.backend, &g.document, &other, &f.bank, &spec, &f.nulls, 2.0)
                .unwrap()
                .z_hat
        })
        .collect();
    let right: f64 = gens.iter().map(|g| g.detection.z_hat).sum::<f64>() / gens.len() as f64;
    assert!(wrong.iter().sum::<f64>() / wrong.len() as f64 <= right);
}

#[test]
fn generation_is_byte_identical_across_runs() {
    let f = fixture();
    let spec = SelectionSpec::default();
    let prompt = f.world.prompts(1, 16, 30).unwrap().remove(0);
    let run = || {
        generate_watermarked(
            &f.world.backend,
            &prompt,
            &f.key,
            "doc-det",
            &f.bank,
            &spec,
            &f.nulls,
            &gen_params(2.0),
        )
        .unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.document, b.document);
    assert_eq!(a.detection, b.detection);
}

#[test]
fn early_stop_and_fallback() {
    let f = fixture();
    let spec = SelectionSpec::default();
    let prompt = f.world.prompts(1, 16, 31).unwrap().remove(0);
    let mut p = gen_params(1.0);
    p.threshold = f64::NEG_INFINITY;
    let g = generate_watermarked(&f.world.backend, &prompt, &f.key, "d", &f.bank, &spec, &f.nulls, &p).unwrap();
    assert_eq!(g.candidates_tried, 1);
    assert_eq!(g.chosen, 0);

    p.threshold = f64::INFINITY;
    let g = generate_watermarked(&f.world.backend, &prompt, &f.key, "d", &f.bank, &spec, &f.nulls, &p).unwrap();
    assert_eq!(g.candidates_tried, 4);
    let scores: Vec<f64> = g
        .attempts
        .iter()
        .map(|a| match a {
            Attempt::Scored { z_hat } => *z_hat,
            Attempt::Rejected { .. } => f64::NEG_INFINITY,
        })
        .collect();
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let first_best = scores.iter().position(|&z| z == best).unwrap();
    assert_eq!(g.chosen, first_best);
    assert_eq!(g.detection.z_hat, best);
    assert!(!g.detection.decision);
}

#[test]
fn all_degenerate_candidates_is_an_error() {
    let f = fixture();
    let spec = SelectionSpec::default();
    let prompt = f.world.prompts(1, 16, 32).unwrap().remove(0);
    let mut p = gen_params(2.0);
    p.degeneracy.min_tokens = NEW_TOKENS + 1;
    match generate_watermarked(&f.world.backend, &prompt, &f.key, "d", &f.bank, &spec, &f.nulls, &p) {
        Err(Error::Generation(msg)) => assert!(msg.contains("degenerate"), "{msg}"),
        other => panic!("expected generation error, got {other:?}"),
    }
    let mut p = gen_params(2.0);
    p.degeneracy.min_tokens = NEW_TOKENS + 1;
    p.candidates = 2;
    let err = generate_watermarked(&f.world.backend, &prompt, &f.key, "d", &f.bank, &spec, &f.nulls, &p)
        .unwrap_err()
        .to_string();
    assert!(err.contains("all 2 candidates"), "{err}");
}

#[test]
fn one_forward_per_detect() {
    // A private backend so concurrent tests cannot touch the counter.
    let f = fixture();
    let world = SyntheticWorld::new(BackendSpec {
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let spec = SelectionSpec::default();
    let docs = &f.baseline[..20];
    let start = world.backend.forward_calls();
    for i in 0..100 {
        detect(&world.backend, &docs[i % docs.len()], &f.key, &f.bank, &spec, &f.nulls, 2.0).unwrap();
        assert_eq!(world.backend.forward_calls(), start + i as u64 + 1);
    }
}

#[test]
fn detection_regime_mismatches_are_rejected() {
    let f = fixture();
    let doc = &f.baseline[0];
    let sentence = SelectionSpec {
        sentence_level: true,
        ..Default::default()
    };
    let err = detect(&f.world.backend, doc, &f.key, &f.bank, &sentence, &f.nulls, 2.0).unwrap_err();
    assert!(matches!(err, Error::InvalidNulls(_)), "{err}");

    let mut partial = f.nulls.clone();
    let victim = f.bank.records[0].feature_id.clone();
    partial.per_feature.remove(&victim);
    // Find a document whose selection includes the missing feature.
    let spec = SelectionSpec::default();
    let hit = f.baseline.iter().find_map(|d| {
        match detect(&f.world.backend, d, &f.key, &f.bank, &spec, &partial, 2.0) {
            Err(Error::MissingNull(id)) => Some(id),
            _ => None,
        }
    });
    assert_eq!(hit.as_deref(), Some(victim.as_str()));
}

#[test]
fn too_few_baseline_texts_is_an_error() {
    let f = fixture();
    let err = fit_nulls(
        &f.world.backend,
        &f.baseline[..29],
        &f.key,
        &f.bank,
        &SelectionSpec::default(),
        Parallelism::Sequential,
    )
    .unwrap_err();
    assert!(err.to_string().contains("at least 30"), "{err}");
}

#[test]
fn sequential_and_parallel_nulls_agree() {
    let f = fixture();
    let spec = SelectionSpec::default();
    let seq = fit_nulls(&f.world.backend, &f.baseline, &f.key, &f.bank, &spec, Parallelism::Sequential).unwrap();
    assert_eq!(seq, f.nulls);
}

#[test]
fn sentence_level_pipeline() {
    let f = fixture();
    let spec = SelectionSpec {
        sentence_level: true,
        ..Default::default()
    };
    let nulls = fit_nulls(&f.world.backend, &f.baseline, &f.key, &f.bank, &spec, Parallelism::Rayon).unwrap();
    assert!(nulls.selection.sentence_level);
    let prompts = f.world.prompts(6, 16, 40).unwrap();
    let gens = corpus::watermarked(
        &f.world.backend,
        &prompts,
        "s",
        &f.key,
        &f.bank,
        &spec,
        &nulls,
        &gen_params(2.0),
        Parallelism::Rayon,
    )
    .unwrap();
    let detected = gens.iter().filter(|g| g.detection.decision).count();
    assert!(detected >= 5, "{detected}/6");
    // Per-feature keys carry the sentence index.
    let g = &gens[0];
    assert!(g.detection.per_feature_z.keys().all(|k| k.contains('/')));
    let raw = raw_score(
        &detect_trace_input(&f.world, &g.document),
        &f.key,
        &g.document.doc_id,
        &f.bank,
        &spec,
        &nulls.per_feature,
        |t| f.world.backend.ends_sentence(t),
    )
    .unwrap();
    assert_eq!(raw.z_raw, g.detection.z_raw);
}

fn detect_trace_input(world: &SyntheticWorld, doc: &Document) -> slam_core::bank::ActivationTrace {
    world.backend.forward(&doc.tokens, doc.prompt_len, None).unwrap().trace
}
