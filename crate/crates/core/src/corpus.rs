//! Corpus-level helpers shared by the CLI, the bench and the acceptance
//! suite: unwatermarked baselines, batch generation, attacks over documents
//! and the random-direction control bank.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::attacks::{self, AttackKind, Lexicon};
use crate::backend::{Backend, SamplingParams};
use crate::bank::{DirectionBank, Document, NullStats, WatermarkKey};
use crate::error::{Error, Result};
use crate::generator::{generate_watermarked, Generation, GenerationParams};
use crate::par::Parallelism;
use crate::selection::SelectionSpec;

/// Sampling seed for text `i` of a corpus drawn with `seed`.
pub fn text_seed(seed: u64, i: usize) -> [u8; 32] {
    Sha256::new()
        .chain_update(b"slam-corpus")
        .chain_update(seed.to_le_bytes())
        .chain_update((i as u64).to_le_bytes())
        .finalize()
        .into()
}

/// Unsteered continuations of `prompts`, with doc ids `"{tag}-{i}"`.
pub fn unwatermarked(
    backend: &dyn Backend,
    prompts: &[Vec<u32>],
    params: &SamplingParams,
    tag: &str,
    seed: u64,
    par: Parallelism,
) -> Result<Vec<Document>> {
    par.try_map_range(prompts.len(), |i| {
        let p = &prompts[i];
        let cont = backend.generate(p, None, params, text_seed(seed, i))?;
        let mut tokens = p.clone();
        tokens.extend(cont);
        Document::new(format!("{tag}-{i}"), tokens, p.len())
    })
}

/// Watermarked generations for `prompts`, doc ids `"{tag}-{i}"`.
#[allow(clippy::too_many_arguments)]
pub fn watermarked(
    backend: &dyn Backend,
    prompts: &[Vec<u32>],
    tag: &str,
    key: &WatermarkKey,
    bank: &DirectionBank,
    spec: &SelectionSpec,
    nulls: &NullStats,
    params: &GenerationParams,
    par: Parallelism,
) -> Result<Vec<Generation>> {
    par.try_map_range(prompts.len(), |i| {
        generate_watermarked(
            backend,
            &prompts[i],
            key,
            &format!("{tag}-{i}"),
            bank,
            spec,
            nulls,
            params,
        )
    })
}

/// Attacks each document's continuation as text; the prompt is kept.
///
/// Document `i` uses attack seed `seed + i`. Word substitution draws from the
/// vocabulary of the whole attacked corpus.
pub fn attack_documents(
    backend: &dyn Backend,
    docs: &[Document],
    kind: AttackKind,
    rate: f64,
    seed: u64,
    lexicon: &Lexicon,
    par: Parallelism,
) -> Result<Vec<Document>> {
    let texts = par.try_map(docs, |d| backend.decode(d.continuation()))?;
    let vocab: BTreeSet<String> = if kind == AttackKind::Wordsub {
        attacks::substitution_vocab(texts.iter().map(String::as_str))
    } else {
        BTreeSet::new()
    };
    par.try_map_range(docs.len(), |i| {
        let attacked = attacks::apply(kind, &texts[i], rate, seed.wrapping_add(i as u64), lexicon, &vocab)?;
        Ok(docs[i].with_continuation(&backend.encode(&attacked)?))
    })
}

/// The bank with every direction replaced by an independent random unit
/// vector. Statistics and ids are kept so selection behaves identically.
pub fn random_direction_bank(bank: &DirectionBank, seed: u64) -> Result<DirectionBank> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = bank.clone();
    for r in &mut out.records {
        let v: Vec<f64> = (0..bank.d_model).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-12 {
            return Err(Error::DegenerateDirection { norm: n });
        }
        r.direction = v.iter().map(|x| (x / n) as f32).collect();
    }
    out.bank_id = format!("{}-random{seed}", bank.bank_id);
    out.created_with = format!("{}+random-directions:{seed}", bank.created_with);
    out.validate()?;
    Ok(out)
}
