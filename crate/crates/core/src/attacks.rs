//! Seeded word-level attacks: deletion, synonym substitution, random word
//! substitution and sentence reordering.
//!
//! Words are whitespace-separated and every attack re-joins with single
//! spaces. A word closes a sentence when it ends in `.`, `?` or `!`, which
//! also covers the synthetic separator word `"."`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DELETE_RATE: f64 = 0.3;
pub const DEFAULT_SYNONYM_RATE: f64 = 0.3;
pub const DEFAULT_WORDSUB_RATE: f64 = 0.15;

/// Word → synonyms.
pub type Lexicon = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Delete,
    Synonym,
    Wordsub,
    Reorder,
}

impl AttackKind {
    pub fn default_rate(self) -> f64 {
        match self {
            AttackKind::Delete => DEFAULT_DELETE_RATE,
            AttackKind::Synonym => DEFAULT_SYNONYM_RATE,
            AttackKind::Wordsub => DEFAULT_WORDSUB_RATE,
            AttackKind::Reorder => 0.0,
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delete" => Ok(AttackKind::Delete),
            "synonym" => Ok(AttackKind::Synonym),
            "wordsub" => Ok(AttackKind::Wordsub),
            "reorder" => Ok(AttackKind::Reorder),
            other => Err(Error::InvalidInput(format!("unknown attack kind {other:?}"))),
        }
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidInput(format!("attack rate {rate} outside [0, 1]")));
    }
    Ok(())
}

fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

pub fn word_delete(text: &str, p: f64, seed: u64) -> Result<String> {
    check_rate(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kept: Vec<&str> = words(text)
        .into_iter()
        .filter(|_| !rng.gen_bool(p))
        .collect();
    Ok(kept.join(" "))
}

/// Replaces each word with probability `rate` by a uniform pick from its
/// synonym list; words without synonyms are kept.
pub fn synonym_substitute(text: &str, rate: f64, lexicon: &Lexicon, seed: u64) -> Result<String> {
    check_rate(rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out: Vec<&str> = words(text)
        .into_iter()
        .map(|w| {
            if !rng.gen_bool(rate) {
                return w;
            }
            match lexicon.get(w) {
                Some(syns) if !syns.is_empty() => syns.choose(&mut rng).expect("non-empty").as_str(),
                _ => w,
            }
        })
        .collect();
    Ok(out.join(" "))
}

/// Alphabetic words longer than three characters, across a corpus.
pub fn substitution_vocab<'a, I>(corpus: I) -> BTreeSet<String>
where
    I: IntoIterator<Item = &'a str>,
{
    corpus
        .into_iter()
        .flat_map(str::split_whitespace)
        .filter(|w| w.chars().count() > 3 && w.chars().all(char::is_alphabetic))
        .map(str::to_string)
        .collect()
}

/// Replaces each word with probability `rate` by a uniform pick among
/// vocabulary entries within ±2 characters of its length.
pub fn word_substitute(text: &str, rate: f64, vocab: &BTreeSet<String>, seed: u64) -> Result<String> {
    check_rate(rate)?;
    let mut by_len: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for v in vocab {
        by_len.entry(v.chars().count()).or_default().push(v);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out: Vec<&str> = words(text)
        .into_iter()
        .map(|w| {
            if !rng.gen_bool(rate) {
                return w;
            }
            let n = w.chars().count();
            let pool: Vec<&str> = by_len
                .range(n.saturating_sub(2)..=n + 2)
                .flat_map(|(_, v)| v.iter().copied())
                .collect();
            pool.choose(&mut rng).copied().unwrap_or(w)
        })
        .collect();
    Ok(out.join(" "))
}

pub fn ends_sentence(word: &str) -> bool {
    word.ends_with(['.', '?', '!'])
}

/// Sentences as word lists; a trailing unterminated fragment is its own
/// sentence.
pub fn split_sentences(text: &str) -> Vec<Vec<&str>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for w in words(text) {
        cur.push(w);
        if ends_sentence(w) {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Seeded Fisher–Yates shuffle of the complete sentences of `text`. An
/// unterminated trailing fragment stays last, so re-splitting the output
/// yields the same sentences.
pub fn shuffled_sentences(text: &str, seed: u64) -> Vec<Vec<&str>> {
    let mut sentences = split_sentences(text);
    let complete = match sentences.last() {
        Some(last) if !last.last().is_some_and(|w| ends_sentence(w)) => sentences.len() - 1,
        _ => sentences.len(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sentences[..complete].shuffle(&mut rng);
    sentences
}

pub fn sentence_reorder(text: &str, seed: u64) -> String {
    shuffled_sentences(text, seed).concat().join(" ")
}

/// Applies one attack. `vocab` is only consulted by word substitution and
/// `lexicon` only by synonym substitution.
pub fn apply(
    kind: AttackKind,
    text: &str,
    rate: f64,
    seed: u64,
    lexicon: &Lexicon,
    vocab: &BTreeSet<String>,
) -> Result<String> {
    match kind {
        AttackKind::Delete => word_delete(text, rate, seed),
        AttackKind::Synonym => synonym_substitute(text, rate, lexicon, seed),
        AttackKind::Wordsub => word_substitute(text, rate, vocab, seed),
        AttackKind::Reorder => Ok(sentence_reorder(text, seed)),
    }
}

// ---------------------------------------------------------------------------
// Lexicon files
// ---------------------------------------------------------------------------

/// Parses `word<TAB>syn<TAB>syn...` lines. Blank lines and `#` comments are
/// skipped.
pub fn parse_lexicon(src: &str) -> Result<Lexicon> {
    let mut lex = Lexicon::new();
    let mut offset = 0;
    for line in src.lines() {
        let start = offset;
        offset += line.len() + 1;
        let t = line.trim_end_matches('\r');
        if t.trim().is_empty() || t.starts_with('#') {
            continue;
        }
        let mut fields = t.split('\t');
        let word = fields.next().unwrap_or_default().trim();
        if word.is_empty() || word.contains(char::is_whitespace) {
            return Err(Error::Parse {
                offset: start,
                message: format!("bad lexicon headword {word:?}"),
            });
        }
        let syns: Vec<String> = fields
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        lex.entry(word.to_string()).or_default().extend(syns);
    }
    Ok(lex)
}

pub fn load_lexicon(path: &Path) -> Result<Lexicon> {
    let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_lexicon(&src)
}

pub fn format_lexicon(lex: &Lexicon) -> String {
    let mut out = String::new();
    for (w, syns) in lex {
        out.push_str(w);
        for s in syns {
            out.push('\t');
            out.push_str(s);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn delete_extremes() {
        let t = "a  b\tc d";
        assert_eq!(word_delete(t, 0.0, 1).unwrap(), "a b c d");
        assert_eq!(word_delete(t, 1.0, 1).unwrap(), "");
        assert!(word_delete(t, 1.5, 1).is_err());
    }

    #[test]
    fn delete_rate_is_binomial() {
        let t = corpus(10_000);
        let kept = word_delete(&t, 0.3, 42).unwrap().split_whitespace().count();
        let rate = 1.0 - kept as f64 / 10_000.0;
        // 95% binomial half-width is about 0.009.
        assert!((rate - 0.3).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn synonym_examples() {
        let empty = Lexicon::new();
        assert_eq!(synonym_substitute("the cat sat", 1.0, &empty, 3).unwrap(), "the cat sat");
        let mut lex = Lexicon::new();
        lex.insert("cat".into(), vec!["feline".into()]);
        assert_eq!(
            synonym_substitute("cat and cat", 1.0, &lex, 3).unwrap(),
            "feline and feline"
        );
    }

    #[test]
    fn synonym_effective_rate_below_nominal_with_partial_coverage() {
        let t = corpus(5000);
        let lex: Lexicon = (0..5000)
            .filter(|i| i % 2 == 0)
            .map(|i| (format!("w{i}"), vec![format!("s{i}")]))
            .collect();
        let out = synonym_substitute(&t, 0.3, &lex, 9).unwrap();
        let changed = t
            .split_whitespace()
            .zip(out.split_whitespace())
            .filter(|(a, b)| a != b)
            .count();
        let eff = changed as f64 / 5000.0;
        assert!(eff < 0.3 && eff > 0.1, "effective {eff}");
    }

    #[test]
    fn wordsub_examples() {
        let t = "alpha beta gamma";
        assert_eq!(word_substitute(t, 1.0, &BTreeSet::new(), 1).unwrap(), t);
        let wrong: BTreeSet<String> = ["extraordinarily".to_string()].into();
        assert_eq!(word_substitute(t, 1.0, &wrong, 1).unwrap(), t);
        let v: BTreeSet<String> = ["zeta".to_string()].into();
        assert_eq!(word_substitute("ab cdefghij", 1.0, &v, 1).unwrap(), "zeta cdefghij");
    }

    #[test]
    fn wordsub_vocab_filter() {
        let v = substitution_vocab(["the quick brown fox, jumps 1234 over", "lazy dogs"]);
        let want: BTreeSet<String> = ["brown", "jumps", "lazy", "over", "quick", "dogs"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(v, want);
    }

    #[test]
    fn reorder_examples() {
        assert_eq!(sentence_reorder("just one sentence here", 5), "just one sentence here");
        let t = "first one . second one .";
        let outs: BTreeSet<String> = (0..20).map(|s| sentence_reorder(t, s)).collect();
        assert!(outs.contains("second one . first one ."));
        assert!(outs.contains(t));
        // The unterminated tail never moves.
        for s in 0..20 {
            assert!(sentence_reorder("a b . c d . tail end", s).ends_with(". tail end"));
        }
        assert_eq!(
            split_sentences("Hi there! How are you? Fine"),
            vec![vec!["Hi", "there!"], vec!["How", "are", "you?"], vec!["Fine"]]
        );
    }

    #[test]
    fn lexicon_roundtrip_and_errors() {
        let src = "# comment\ncat\tfeline\tkitty\n\ndog\thound\nlone\n";
        let lex = parse_lexicon(src).unwrap();
        assert_eq!(lex["cat"], vec!["feline", "kitty"]);
        assert!(lex["lone"].is_empty());
        assert_eq!(parse_lexicon(&format_lexicon(&lex)).unwrap(), lex);
        assert!(parse_lexicon("two words\tx\n").is_err());
        assert!(load_lexicon(Path::new("/nonexistent/lexicon.tsv")).is_err());
    }

    fn text_strategy() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(vec!["a", "bb", "ccc.", "dd?", "e!", "ffff"]), 0..60)
            .prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn reorder_preserves_sentence_multiset(t in text_strategy(), seed in any::<u64>()) {
            let out = sentence_reorder(&t, seed);
            let mut a = split_sentences(&t);
            let mut b = shuffled_sentences(&t, seed);
            prop_assert_eq!(b.concat().join(" "), out.clone());
            let mut c = split_sentences(&out);
            a.sort();
            b.sort();
            c.sort();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(&a, &c);
            let mut wa: Vec<&str> = t.split_whitespace().collect();
            let mut wb: Vec<&str> = out.split_whitespace().collect();
            wa.sort();
            wb.sort();
            prop_assert_eq!(wa, wb);
        }

        #[test]
        fn deletion_never_adds_and_substitution_keeps_count(t in text_strategy(), seed in any::<u64>(), p in 0.0f64..=1.0) {
            let d = word_delete(&t, p, seed).unwrap();
            prop_assert!(d.split_whitespace().count() <= t.split_whitespace().count());
            let vocab = substitution_vocab([t.as_str()]);
            let s = word_substitute(&t, p, &vocab, seed).unwrap();
            prop_assert_eq!(s.split_whitespace().count(), t.split_whitespace().count());
            prop_assert_eq!(word_delete(&t, p, seed).unwrap(), d);
        }
    }
}
