use std::thread;

use serde::Serialize;

use super::{
    CacheKey, PreprocessError, ProviderCache, ProviderError, Stage, TranslationProvider, TransliterationProvider,
};
use crate::corpus::{Conversation, Utterance};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TranslateOptions {
    /// Re-translate utterances that already carry `text_en`.
    pub force: bool,
    /// Upper bound on worker threads; providers may lower it.
    pub jobs: usize,
}

impl Default for TranslateOptions {
    fn default() -> Self {
        Self { force: false, jobs: 1 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TranslateStats {
    pub translated: usize,
    pub unchanged: usize,
    /// Utterances whose translation failed and kept the raw text.
    pub fallbacks: usize,
}

pub(crate) fn cached(
    cache: &ProviderCache,
    stage: Stage,
    provider: &str,
    config: &str,
    text: &str,
    call: impl FnOnce(&str) -> Result<String, ProviderError>,
) -> Result<String, PreprocessError> {
    let key = CacheKey::new(&stage.to_string(), provider, config, text);
    if let Some(hit) = cache.get(&key) {
        return Ok(hit);
    }
    let out = call(text).map_err(|e| PreprocessError::Provider {
        stage,
        provider: provider.to_string(),
        msg: e.0,
    })?;
    cache.put(key, &out)?;
    Ok(out)
}

/// `text_en = translate(transliterate(text_raw))`. An utterance that
/// already has `text_en` is returned unchanged unless `force`.
pub fn translate_pipeline(
    u: &Utterance,
    tl: &dyn TransliterationProvider,
    tr: &dyn TranslationProvider,
    cache: &ProviderCache,
    force: bool,
) -> Result<Utterance, PreprocessError> {
    if u.text_en.is_some() && !force {
        return Ok(u.clone());
    }
    if u.text_raw.is_empty() {
        return Err(PreprocessError::EmptyText {
            cid: u.conversation_id.clone(),
            index: u.index,
        });
    }
    let deva = cached(
        cache,
        Stage::Transliteration,
        tl.name(),
        &tl.config_hash(),
        &u.text_raw,
        |t| tl.transliterate(t),
    )?;
    let en = cached(cache, Stage::Translation, tr.name(), &tr.config_hash(), &deva, |t| {
        tr.translate(t)
    })?;
    Ok(Utterance {
        text_en: Some(en),
        ..u.clone()
    })
}

enum Outcome {
    Done(Utterance),
    Unchanged(Utterance),
    Fallback(Utterance),
}

fn run_one(
    u: &Utterance,
    tl: &dyn TransliterationProvider,
    tr: &dyn TranslationProvider,
    cache: &ProviderCache,
    force: bool,
) -> Outcome {
    if u.text_en.is_some() && !force {
        return Outcome::Unchanged(u.clone());
    }
    match translate_pipeline(u, tl, tr, cache, force) {
        Ok(t) => Outcome::Done(t),
        Err(e) => {
            log::warn!(
                "{}:{}: {e}; keeping the untranslated text",
                u.conversation_id,
                u.index
            );
            Outcome::Fallback(Utterance {
                text_en: Some(u.text_raw.clone()),
                ..u.clone()
            })
        }
    }
}

/// Translates every utterance. A failing utterance falls back to its raw
/// text with a warning instead of aborting the corpus. Output order and
/// content do not depend on `jobs`.
pub fn translate_corpus(
    convs: &[Conversation],
    tl: &dyn TransliterationProvider,
    tr: &dyn TranslationProvider,
    cache: &ProviderCache,
    opts: TranslateOptions,
) -> (Vec<Conversation>, TranslateStats) {
    let flat: Vec<&Utterance> = convs.iter().flat_map(|c| &c.utterances).collect();
    let jobs = opts
        .jobs
        .min(tl.max_parallelism())
        .min(tr.max_parallelism())
        .clamp(1, flat.len().max(1));
    let outcomes: Vec<Outcome> = if jobs == 1 {
        flat.iter().map(|u| run_one(u, tl, tr, cache, opts.force)).collect()
    } else {
        let chunk = flat.len().div_ceil(jobs);
        thread::scope(|s| {
            let handles: Vec<_> = flat
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|u| run_one(u, tl, tr, cache, opts.force))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("translation worker panicked"))
                .collect()
        })
    };

    let mut stats = TranslateStats::default();
    let mut it = outcomes.into_iter();
    let out = convs
        .iter()
        .map(|c| Conversation {
            id: c.id.clone(),
            utterances: c
                .utterances
                .iter()
                .map(|_| match it.next().expect("one outcome per utterance") {
                    Outcome::Done(u) => {
                        stats.translated += 1;
                        u
                    }
                    Outcome::Unchanged(u) => {
                        stats.unchanged += 1;
                        u
                    }
                    Outcome::Fallback(u) => {
                        stats.fallbacks += 1;
                        u
                    }
                })
                .collect(),
        })
        .collect();
    (out, stats)
}
