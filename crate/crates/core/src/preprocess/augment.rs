use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::pipeline::cached;
use super::{ParaphraseProvider, PreprocessError, ProviderCache, ProviderError, Stage};
use crate::corpus::Conversation;
use crate::seed::{derive_seed, AUGMENT};

/// Paraphrases requested per utterance; sampling never looks past these.
pub const PARAPHRASE_POOL: usize = 10;
pub const PARAPHRASES_PER_UTTERANCE: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AugmentStats {
    pub utterances: usize,
    pub synthetic: usize,
    /// Utterances with no usable paraphrase.
    pub skipped: usize,
    pub failed: usize,
}

/// Indices into `pool` of up to three distinct paraphrases drawn uniformly
/// without replacement from the first ten, ignoring copies of `text` and
/// repeats. Indices are ascending.
pub fn sample_paraphrases<R: Rng>(pool: &[String], text: &str, rng: &mut R) -> Vec<usize> {
    let mut usable: Vec<usize> = Vec::new();
    for (i, p) in pool.iter().take(PARAPHRASE_POOL).enumerate() {
        if p != text && !usable.iter().any(|&j| &pool[j] == p) {
            usable.push(i);
        }
    }
    let m = PARAPHRASES_PER_UTTERANCE.min(usable.len());
    let mut picked: Vec<usize> = sample(rng, usable.len(), m).into_iter().map(|k| usable[k]).collect();
    picked.sort_unstable();
    picked
}

fn request(
    p: &dyn ParaphraseProvider,
    cache: &ProviderCache,
    text: &str,
) -> Result<Vec<String>, PreprocessError> {
    let json = cached(cache, Stage::Paraphrase, p.name(), &p.config_hash(), text, |t| {
        let list = p.paraphrases(t, PARAPHRASE_POOL)?;
        serde_json::to_string(&list).map_err(|e| ProviderError(e.to_string()))
    })?;
    serde_json::from_str(&json).map_err(|e| PreprocessError::Provider {
        stage: Stage::Paraphrase,
        provider: p.name().to_string(),
        msg: format!("corrupt cache entry: {e}"),
    })
}

/// Replaces every utterance's synthetic variants with up to three sampled
/// paraphrases of its (English) text. Each utterance draws from its own
/// stream derived from `seed` and its position, so results do not depend
/// on processing order. Originals, golds and structure are untouched.
pub fn augment_corpus(
    convs: &[Conversation],
    p: &dyn ParaphraseProvider,
    seed: u64,
    cache: &ProviderCache,
) -> (Vec<Conversation>, AugmentStats) {
    let mut stats = AugmentStats::default();
    let mut out = convs.to_vec();
    for conv in &mut out {
        for u in &mut conv.utterances {
            stats.utterances += 1;
            u.paraphrases.clear();
            let text = u.text().to_string();
            let pool = match request(p, cache, &text) {
                Ok(pool) => pool,
                Err(e) => {
                    log::warn!("{}:{}: {e}; not augmented", u.conversation_id, u.index);
                    stats.failed += 1;
                    continue;
                }
            };
            let stream = format!("{AUGMENT}/{}/{}", u.conversation_id, u.index);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &stream));
            let picked = sample_paraphrases(&pool, &text, &mut rng);
            if picked.is_empty() {
                stats.skipped += 1;
            }
            stats.synthetic += picked.len();
            u.paraphrases = picked.into_iter().map(|i| pool[i].clone()).collect();
        }
    }
    (out, stats)
}
