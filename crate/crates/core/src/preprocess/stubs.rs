//! Offline providers: identity, TSV-lexicon lookup, a rule-based
//! paraphraser and a numbered-variant paraphraser for tests.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{
    ParaphraseProvider, PreprocessError, ProviderError, TranslationProvider, TransliterationProvider,
};

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityTransliterator;

impl TransliterationProvider for IdentityTransliterator {
    fn name(&self) -> &str {
        "identity"
    }
    fn max_parallelism(&self) -> usize {
        usize::MAX
    }
    fn transliterate(&self, text: &str) -> Result<String, ProviderError> {
        Ok(text.to_string())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityTranslator;

impl TranslationProvider for IdentityTranslator {
    fn name(&self) -> &str {
        "identity"
    }
    fn max_parallelism(&self) -> usize {
        usize::MAX
    }
    fn translate(&self, text: &str) -> Result<String, ProviderError> {
        Ok(text.to_string())
    }
}

/// `source → target` table. Lookup tries the whole text first, then maps
/// each whitespace-separated token (exact, then lowercased), leaving
/// unknown tokens as they are.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    map: HashMap<String, String>,
    digest: String,
}

impl Lexicon {
    pub fn from_pairs<S: Into<String>, T: Into<String>>(pairs: impl IntoIterator<Item = (S, T)>) -> Self {
        let mut rows: Vec<(String, String)> = pairs.into_iter().map(|(s, t)| (s.into(), t.into())).collect();
        rows.sort();
        let mut h = Sha256::new();
        for (s, t) in &rows {
            h.update(s.as_bytes());
            h.update([0]);
            h.update(t.as_bytes());
            h.update([0]);
        }
        let digest = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            map: rows.into_iter().collect(),
            digest,
        }
    }

    /// Tab-separated `source\ttarget` lines; blank lines and `#` comments
    /// are skipped.
    pub fn load(path: &Path) -> Result<Self, PreprocessError> {
        let text = fs::read_to_string(path).map_err(|source| PreprocessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (s, t) = line.split_once('\t').ok_or_else(|| PreprocessError::Lexicon {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected source<TAB>target".into(),
            })?;
            pairs.push((s.trim().to_string(), t.trim().to_string()));
        }
        Ok(Self::from_pairs(pairs))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn apply(&self, text: &str) -> String {
        if let Some(t) = self.map.get(text) {
            return t.clone();
        }
        text.split_whitespace()
            .map(|tok| {
                self.map
                    .get(tok)
                    .or_else(|| self.map.get(&tok.to_lowercase()))
                    .map_or(tok, String::as_str)
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug)]
pub struct LexiconTransliterator {
    lexicon: Lexicon,
}

impl LexiconTransliterator {
    pub fn new(lexicon: Lexicon) -> Self {
        Self { lexicon }
    }
}

impl TransliterationProvider for LexiconTransliterator {
    fn name(&self) -> &str {
        "lexicon"
    }
    fn config_hash(&self) -> String {
        self.lexicon.digest().to_string()
    }
    fn max_parallelism(&self) -> usize {
        usize::MAX
    }
    fn transliterate(&self, text: &str) -> Result<String, ProviderError> {
        Ok(self.lexicon.apply(text))
    }
}

#[derive(Clone, Debug)]
pub struct LexiconTranslator {
    lexicon: Lexicon,
}

impl LexiconTranslator {
    pub fn new(lexicon: Lexicon) -> Self {
        Self { lexicon }
    }
}

impl TranslationProvider for LexiconTranslator {
    fn name(&self) -> &str {
        "lexicon"
    }
    fn config_hash(&self) -> String {
        self.lexicon.digest().to_string()
    }
    fn max_parallelism(&self) -> usize {
        usize::MAX
    }
    fn translate(&self, text: &str) -> Result<String, ProviderError> {
        Ok(self.lexicon.apply(text))
    }
}

const SYNONYMS: &[(&str, &[&str])] = &[
    ("good", &["nice", "fine", "great"]),
    ("bad", &["awful", "terrible", "poor"]),
    ("happy", &["glad", "cheerful", "pleased"]),
    ("sad", &["unhappy", "down", "gloomy"]),
    ("angry", &["mad", "furious", "annoyed"]),
    ("very", &["really", "so", "quite"]),
    ("think", &["believe", "feel", "guess"]),
    ("said", &["told", "mentioned", "stated"]),
    ("yes", &["yeah", "sure", "right"]),
    ("no", &["nope", "nah", "not at all"]),
    ("scared", &["afraid", "frightened", "nervous"]),
    ("wow", &["whoa", "oh wow", "amazing"]),
    ("okay", &["alright", "fine", "ok"]),
    ("what", &["which", "what exactly", "what now"]),
];

const FRAMES: &[(&str, &str)] = &[
    ("well, ", ""),
    ("", ", you know"),
    ("so ", ""),
    ("honestly, ", ""),
    ("", ", right"),
    ("i mean, ", ""),
];

/// Synonym substitution, clause swapping and discourse-marker framing.
/// Deterministic; variants come out in a fixed order.
#[derive(Clone, Copy, Debug, Default)]
pub struct RuleParaphraser;

impl RuleParaphraser {
    fn variants(text: &str) -> Vec<String> {
        let base = text.trim();
        let mut out: Vec<String> = Vec::new();
        let words: Vec<&str> = base.split_whitespace().collect();
        for (i, w) in words.iter().enumerate() {
            let bare = w.trim_matches(|c: char| c.is_ascii_punctuation());
            let Some((_, subs)) = SYNONYMS.iter().find(|(k, _)| k.eq_ignore_ascii_case(bare)) else {
                continue;
            };
            for s in *subs {
                let mut v = words.clone();
                let replaced = w.replacen(bare, s, 1);
                v[i] = &replaced;
                out.push(v.join(" "));
            }
        }
        for sep in [", ", " and ", " but "] {
            if let Some((a, b)) = base.split_once(sep) {
                if !a.is_empty() && !b.is_empty() {
                    out.push(format!("{}{sep}{}", b.trim_end_matches(['.', '!', '?']), a));
                }
            }
        }
        let core = base.trim_end_matches(['.', '!', '?']);
        for (pre, post) in FRAMES {
            out.push(format!("{pre}{core}{post}"));
        }
        out
    }
}

impl ParaphraseProvider for RuleParaphraser {
    fn name(&self) -> &str {
        "rules"
    }
    fn paraphrases(&self, text: &str, k: usize) -> Result<Vec<String>, ProviderError> {
        let mut seen = vec![text.to_string()];
        let mut out = Vec::new();
        for v in Self::variants(text) {
            if out.len() == k {
                break;
            }
            if !seen.contains(&v) {
                seen.push(v.clone());
                out.push(v);
            }
        }
        Ok(out)
    }
}

/// Returns `count` numbered variants `"<text> [variant i]"`.
#[derive(Clone, Copy, Debug)]
pub struct EnumeratingParaphraser {
    pub count: usize,
}

impl ParaphraseProvider for EnumeratingParaphraser {
    fn name(&self) -> &str {
        "enumerate"
    }
    fn config_hash(&self) -> String {
        self.count.to_string()
    }
    fn paraphrases(&self, text: &str, k: usize) -> Result<Vec<String>, ProviderError> {
        Ok((0..self.count.min(k))
            .map(|i| format!("{text} [variant {i}]"))
            .collect())
    }
}

fn lexicon_arg(spec: &str) -> Option<PathBuf> {
    spec.strip_prefix("lexicon:").map(PathBuf::from)
}

/// `identity` or `lexicon:<path>`.
pub fn build_transliterator(spec: &str) -> Result<Box<dyn TransliterationProvider>, PreprocessError> {
    match (spec, lexicon_arg(spec)) {
        ("identity", _) => Ok(Box::new(IdentityTransliterator)),
        (_, Some(p)) => Ok(Box::new(LexiconTransliterator::new(Lexicon::load(&p)?))),
        _ => Err(PreprocessError::UnknownProvider(spec.to_string())),
    }
}

/// `identity` or `lexicon:<path>`.
pub fn build_translator(spec: &str) -> Result<Box<dyn TranslationProvider>, PreprocessError> {
    match (spec, lexicon_arg(spec)) {
        ("identity", _) => Ok(Box::new(IdentityTranslator)),
        (_, Some(p)) => Ok(Box::new(LexiconTranslator::new(Lexicon::load(&p)?))),
        _ => Err(PreprocessError::UnknownProvider(spec.to_string())),
    }
}

/// `rules` or `enumerate:<n>`.
pub fn build_paraphraser(spec: &str) -> Result<Box<dyn ParaphraseProvider>, PreprocessError> {
    if spec == "rules" {
        return Ok(Box::new(RuleParaphraser));
    }
    if let Some(n) = spec.strip_prefix("enumerate:").and_then(|n| n.parse().ok()) {
        return Ok(Box::new(EnumeratingParaphraser { count: n }));
    }
    Err(PreprocessError::UnknownProvider(spec.to_string()))
}
