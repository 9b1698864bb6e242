//! Two-stage translation (romanised Hindi → Devanagari → English) and
//! paraphrase augmentation behind pluggable providers.

mod augment;
mod cache;
mod pipeline;
pub mod stubs;

use std::path::PathBuf;

use thiserror::Error;

pub use augment::{augment_corpus, sample_paraphrases, AugmentStats, PARAPHRASE_POOL, PARAPHRASES_PER_UTTERANCE};
pub use cache::{CacheKey, ProviderCache};
pub use pipeline::{translate_corpus, translate_pipeline, TranslateOptions, TranslateStats};
pub use stubs::{
    build_paraphraser, build_translator, build_transliterator, EnumeratingParaphraser, IdentityTranslator,
    IdentityTransliterator, Lexicon, LexiconTranslator, LexiconTransliterator, RuleParaphraser,
};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("{stage} ({provider}): {msg}")]
    Provider {
        stage: Stage,
        provider: String,
        msg: String,
    },
    #[error("{path}:{line}: {msg}")]
    Lexicon { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("unknown provider {0:?}")]
    UnknownProvider(String),
    #[error("utterance {cid}:{index} has empty text")]
    EmptyText { cid: String, index: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Transliteration,
    Translation,
    Paraphrase,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Transliteration => "transliteration",
            Stage::Translation => "translation",
            Stage::Paraphrase => "paraphrase",
        })
    }
}

/// Failure reported by a provider; the pipeline attaches the stage.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct ProviderError(pub String);

pub trait TransliterationProvider: Send + Sync {
    fn name(&self) -> &str;
    /// Identifies the provider's configuration (lexicon contents, model
    /// version) for cache keys.
    fn config_hash(&self) -> String {
        String::new()
    }
    /// How many concurrent calls the provider tolerates.
    fn max_parallelism(&self) -> usize {
        1
    }
    fn transliterate(&self, text_roman: &str) -> Result<String, ProviderError>;
}

pub trait TranslationProvider: Send + Sync {
    fn name(&self) -> &str;
    fn config_hash(&self) -> String {
        String::new()
    }
    fn max_parallelism(&self) -> usize {
        1
    }
    fn translate(&self, text_hi: &str) -> Result<String, ProviderError>;
}

pub trait ParaphraseProvider: Send + Sync {
    fn name(&self) -> &str;
    fn config_hash(&self) -> String {
        String::new()
    }
    /// Up to `k` paraphrases, none equal to `text`.
    fn paraphrases(&self, text: &str, k: usize) -> Result<Vec<String>, ProviderError>;
}
