//! Generated corpora where half the labels need conversational context.
//!
//! Cue utterances contain a keyword that fixes their label (`cue_sun`,
//! `cue_storm`). Echo utterances contain only filler words; their label
//! (`echo_sun`, `echo_storm`) is set by the keyword of the preceding cue.
//! Every conversation runs cue, echo, cue, echo, cue, with the first two
//! cues opposite so both echo labels occur once per conversation.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Conversation, EmotionLabelSet, Utterance};

pub const SYNTH_LABELS: [&str; 4] = ["cue_sun", "cue_storm", "echo_sun", "echo_storm"];
pub const UTTERANCES_PER_CONVERSATION: usize = 5;

const KEYWORDS: [&str; 2] = ["sunshine", "thunder"];
const FILLER: [&str; 16] = [
    "the", "we", "then", "maybe", "later", "again", "people", "said", "walked", "table", "road", "window", "coffee",
    "quietly", "there", "around",
];

pub fn synth_labels() -> EmotionLabelSet {
    EmotionLabelSet::new(SYNTH_LABELS).expect("valid labels")
}

fn filler<R: Rng>(rng: &mut R, n: usize) -> Vec<&'static str> {
    (0..n).map(|_| *FILLER.choose(rng).expect("non-empty")).collect()
}

/// `n` conversations named `<prefix><k>`, fully determined by `seed`.
pub fn generate(n: usize, seed: u64, prefix: &str) -> Vec<Conversation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let id = format!("{prefix}{k}");
            let first = k % 2;
            let last = rng.random_range(0..2);
            let cues = [first, 1 - first, last];
            let mut utterances = Vec::with_capacity(UTTERANCES_PER_CONVERSATION);
            for i in 0..UTTERANCES_PER_CONVERSATION {
                let (text, gold) = if i % 2 == 0 {
                    let cue = cues[i / 2];
                    let mut words = filler(&mut rng, 3);
                    let at = rng.random_range(0..=words.len());
                    words.insert(at, KEYWORDS[cue]);
                    (words.join(" "), cue)
                } else {
                    (filler(&mut rng, 4).join(" "), 2 + cues[i / 2])
                };
                utterances.push(Utterance {
                    conversation_id: id.clone(),
                    index: i,
                    speaker: Some(if i % 2 == 0 { "x" } else { "y" }.into()),
                    text_raw: text,
                    text_en: None,
                    gold: Some(gold),
                    paraphrases: vec![],
                });
            }
            Conversation { id, utterances }
        })
        .collect()
}
