//! On-disk formats owned by the CLI: text documents, pair directories, key
//! files and deterministic JSON output.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use slam_core::backend::Backend;
use slam_core::bank::{load_trace, save_trace, Document, WatermarkKey};
use slam_core::mining::ContrastivePair;

pub const KEY_ENV: &str = "SLAM_KEY_FILE";

/// A prompt and its continuation as plain text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextDoc {
    pub doc_id: String,
    pub prompt: String,
    pub text: String,
}

impl TextDoc {
    pub fn from_document(backend: &dyn Backend, doc: &Document) -> Result<Self> {
        Ok(Self {
            doc_id: doc.doc_id.clone(),
            prompt: backend.decode(doc.prompt())?,
            text: backend.decode(doc.continuation())?,
        })
    }

    pub fn to_document(&self, backend: &dyn Backend) -> Result<Document> {
        let mut tokens = backend.encode(&self.prompt)?;
        let prompt_len = tokens.len();
        tokens.extend(backend.encode(&self.text)?);
        Ok(Document::new(self.doc_id.clone(), tokens, prompt_len)?)
    }
}

fn doc_file_name(doc_id: &str) -> Result<String> {
    if doc_id.is_empty()
        || !doc_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        || doc_id.starts_with('.')
    {
        bail!("doc_id {doc_id:?} is not usable as a file name (allowed: A-Z a-z 0-9 - _ .)");
    }
    Ok(format!("{doc_id}.json"))
}

pub fn read_doc(path: &Path) -> Result<TextDoc> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing document {}", path.display()))
}

/// Every `*.json` document in `dir`, sorted by file name.
pub fn read_doc_dir(dir: &Path) -> Result<Vec<TextDoc>> {
    let entries = fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))?;
    let mut paths: Vec<PathBuf> = entries
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .with_context(|| format!("listing {}", dir.display()))?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    let docs = paths.iter().map(|p| read_doc(p)).collect::<Result<Vec<_>>>()?;
    let mut ids: Vec<&str> = docs.iter().map(|d| d.doc_id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        bail!("duplicate doc_id {:?} in {}", w[0], dir.display());
    }
    Ok(docs)
}

pub fn write_doc_dir(dir: &Path, docs: &[TextDoc]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for d in docs {
        write_json(&dir.join(doc_file_name(&d.doc_id)?), d)?;
    }
    Ok(())
}

/// Pretty JSON with a trailing newline. Maps are `BTreeMap`s throughout, so
/// the bytes depend only on the value.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json(value)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes to `path`, or to stdout when no path is given.
pub fn emit<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    match path {
        Some(p) => write_json(p, value),
        None => {
            print!("{}", to_json(value)?);
            Ok(())
        }
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

// ---------------------------------------------------------------------------
// Keys
// ---------------------------------------------------------------------------

/// Key file: hex secret on the first non-comment line, optional `key_id`
/// on the second. Falls back to `$SLAM_KEY_FILE`.
pub fn load_key(path: Option<&Path>) -> Result<WatermarkKey> {
    let path = match path {
        Some(p) => p.to_path_buf(),
        None => match std::env::var_os(KEY_ENV) {
            Some(p) => PathBuf::from(p),
            None => bail!("no key file given; pass --key-file or set {KEY_ENV}"),
        },
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading key file {}", path.display()))?;
    parse_key(&text).with_context(|| format!("parsing key file {}", path.display()))
}

pub fn parse_key(text: &str) -> Result<WatermarkKey> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let secret_hex = lines.next().context("key file is empty")?;
    let secret = hex::decode(secret_hex).context("secret is not valid hex")?;
    let key_id = lines.next().unwrap_or("default");
    Ok(WatermarkKey::new(secret, key_id)?)
}

// ---------------------------------------------------------------------------
// Contrastive pair directories
// ---------------------------------------------------------------------------

const PAIRS_SCHEMA: &str = "slam.pairs";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairEntry {
    pair_id: String,
    phenomenon: String,
    domain: String,
    pos: String,
    neg: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairManifest {
    schema: String,
    version: u32,
    pairs: Vec<PairEntry>,
}

/// `manifest.json` plus one `.slamtrace` per side.
pub fn write_pairs(dir: &Path, pairs: &[ContrastivePair]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let pos = format!("{i:06}.pos.slamtrace");
        let neg = format!("{i:06}.neg.slamtrace");
        save_trace(&p.pos, dir.join(&pos))?;
        save_trace(&p.neg, dir.join(&neg))?;
        entries.push(PairEntry {
            pair_id: p.pair_id.clone(),
            phenomenon: p.phenomenon.clone(),
            domain: p.domain.clone(),
            pos,
            neg,
        });
    }
    write_json(
        &dir.join("manifest.json"),
        &PairManifest {
            schema: PAIRS_SCHEMA.into(),
            version: 1,
            pairs: entries,
        },
    )
}

pub fn read_pairs(dir: &Path) -> Result<Vec<ContrastivePair>> {
    let m: PairManifest = read_json(&dir.join("manifest.json"))?;
    if m.schema != PAIRS_SCHEMA || m.version != 1 {
        bail!("{}: expected {PAIRS_SCHEMA} v1, got {} v{}", dir.display(), m.schema, m.version);
    }
    m.pairs
        .into_iter()
        .map(|e| {
            let load = |f: &str| {
                let p = dir.join(f);
                load_trace(&p).with_context(|| format!("loading trace {}", p.display()))
            };
            Ok(ContrastivePair {
                pos: load(&e.pos)?,
                neg: load(&e.neg)?,
                pair_id: e.pair_id,
                phenomenon: e.phenomenon,
                domain: e.domain,
            })
        })
        .collect()
}
