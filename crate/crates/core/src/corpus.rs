//! Conversational corpus: label vocabulary, JSONL loading and context windows.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved previous-emotion marker for the first utterance of a conversation.
pub const START_SENTINEL: &str = "«START»";

pub const DEFAULT_LABELS: [&str; 8] = [
    "anger", "contempt", "disgust", "fear", "joy", "neutral", "sadness", "surprise",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: unknown gold label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: duplicate utterance ({cid}, {index})")]
    Duplicate { line: usize, cid: String, index: usize },
    #[error("conversation {cid}: utterance indices are not contiguous from 0 (missing {missing})")]
    NonContiguous { cid: String, missing: usize },
    #[error("line {line}: synthetic record has no original utterance ({cid}, {index})")]
    OrphanSynthetic { line: usize, cid: String, index: usize },
    #[error("invalid label set: {0}")]
    InvalidLabelSet(String),
}

/// Ordered closed label vocabulary. Class index = position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct EmotionLabelSet {
    labels: Vec<String>,
}

impl EmotionLabelSet {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self, CorpusError> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(CorpusError::InvalidLabelSet("no labels".into()));
        }
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() {
                return Err(CorpusError::InvalidLabelSet("empty label".into()));
            }
            if l == START_SENTINEL {
                return Err(CorpusError::InvalidLabelSet(format!(
                    "{START_SENTINEL} is reserved"
                )));
            }
            if labels[..i].contains(l) {
                return Err(CorpusError::InvalidLabelSet(format!("duplicate label {l:?}")));
            }
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.labels[index]
    }

    /// Row of the start sentinel in emotion-embedding tables.
    pub fn sentinel_row(&self) -> usize {
        self.labels.len()
    }
}

impl Default for EmotionLabelSet {
    fn default() -> Self {
        Self::new(DEFAULT_LABELS).expect("default labels are valid")
    }
}

impl TryFrom<Vec<String>> for EmotionLabelSet {
    type Error = CorpusError;
    fn try_from(v: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<EmotionLabelSet> for Vec<String> {
    fn from(s: EmotionLabelSet) -> Self {
        s.labels
    }
}

/// Emotion carried into a window from the preceding utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EmotionRef {
    Start,
    Label(usize),
}

impl EmotionRef {
    pub fn row(self, labels: &EmotionLabelSet) -> usize {
        match self {
            EmotionRef::Start => labels.sentinel_row(),
            EmotionRef::Label(i) => i,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub conversation_id: String,
    pub index: usize,
    pub speaker: Option<String>,
    pub text_raw: String,
    pub text_en: Option<String>,
    pub gold: Option<usize>,
    /// Synthetic paraphrases of this utterance (training-only variants).
    pub paraphrases: Vec<String>,
}

impl Utterance {
    /// Text the models consume: the English translation when present.
    pub fn text(&self) -> &str {
        self.text_en.as_deref().unwrap_or(&self.text_raw)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn synthetic_count(&self) -> usize {
        self.utterances.iter().map(|u| u.paraphrases.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextWindow {
    pub conversation_id: String,
    pub index: usize,
    /// Most recent last.
    pub previous: Vec<String>,
    pub current: String,
    pub next: Option<String>,
    pub previous_emotion: EmotionRef,
    pub gold: Option<usize>,
    pub synthetic: bool,
}

/// One window per utterance. `w_prev` bounds the previous-text list
/// (`usize::MAX` keeps the full history). `previous_emotion` is the gold
/// label of the preceding utterance when known, otherwise the start
/// sentinel as a placeholder for inference-time substitution.
pub fn make_windows(conv: &Conversation, w_prev: usize, use_next: bool) -> Vec<ContextWindow> {
    let u = &conv.utterances;
    (0..u.len())
        .map(|i| {
            let start = i.saturating_sub(w_prev);
            ContextWindow {
                conversation_id: conv.id.clone(),
                index: i,
                previous: u[start..i].iter().map(|p| p.text().to_string()).collect(),
                current: u[i].text().to_string(),
                next: if use_next {
                    u.get(i + 1).map(|n| n.text().to_string())
                } else {
                    None
                },
                previous_emotion: match i {
                    0 => EmotionRef::Start,
                    _ => u[i - 1].gold.map_or(EmotionRef::Start, EmotionRef::Label),
                },
                gold: u[i].gold,
                synthetic: false,
            }
        })
        .collect()
}

/// Windows for training: the originals plus one window per synthetic
/// paraphrase, which copies the original's context and gold label.
pub fn make_training_windows(
    conv: &Conversation,
    w_prev: usize,
    use_next: bool,
) -> Vec<ContextWindow> {
    let mut out = Vec::with_capacity(conv.len() + conv.synthetic_count());
    for (w, u) in make_windows(conv, w_prev, use_next)
        .into_iter()
        .zip(&conv.utterances)
    {
        let variants: Vec<ContextWindow> = u
            .paraphrases
            .iter()
            .map(|p| ContextWindow {
                current: p.clone(),
                synthetic: true,
                ..w.clone()
            })
            .collect();
        out.push(w);
        out.extend(variants);
    }
    out
}

/// One line of the corpus JSONL format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub cid: String,
    pub index: usize,
    #[serde(default)]
    pub speaker: Option<String>,
    pub text_raw: String,
    #[serde(default)]
    pub text_en: Option<String>,
    #[serde(default)]
    pub gold: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub synthetic: bool,
}

const RECORD_KEYS: [&str; 7] = [
    "cid", "index", "speaker", "text_raw", "text_en", "gold", "synthetic",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Ignore unknown keys instead of rejecting them.
    pub lenient: bool,
}

/// Optional first line of a corpus file declaring its label set.
#[derive(Debug, Serialize, Deserialize)]
struct LabelHeader {
    labels: EmotionLabelSet,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Label set declared by a `{"labels": [...]}` header line, if any.
pub fn read_label_header(path: &Path) -> Result<Option<EmotionLabelSet>, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        return match parse_header(&line) {
            Some(Ok(h)) => Ok(Some(h.labels)),
            Some(Err(e)) => Err(CorpusError::Malformed {
                line: i + 1,
                msg: e.to_string(),
            }),
            None => Ok(None),
        };
    }
    Ok(None)
}

fn parse_header(line: &str) -> Option<Result<LabelHeader, serde_json::Error>> {
    let value: serde_json::Value = serde_json::from_str(line).ok()?;
    let obj = value.as_object()?;
    if obj.contains_key("labels") && !obj.contains_key("cid") {
        Some(serde_json::from_value(value))
    } else {
        None
    }
}

pub fn load_corpus(
    path: &Path,
    labels: &EmotionLabelSet,
    opts: LoadOptions,
) -> Result<Vec<Conversation>, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    let mut seen_content = false;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if !seen_content {
            seen_content = true;
            if let Some(header) = parse_header(&line) {
                header.map_err(|e| CorpusError::Malformed {
                    line: line_no,
                    msg: e.to_string(),
                })?;
                continue;
            }
        }
        records.push((line_no, parse_record(&line, line_no, opts)?));
    }
    assemble(records, labels)
}

pub fn parse_record(line: &str, line_no: usize, opts: LoadOptions) -> Result<CorpusRecord, CorpusError> {
    let malformed = |msg: String| CorpusError::Malformed { line: line_no, msg };
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("expected a JSON object".into()))?;
    if !opts.lenient {
        if let Some(k) = obj.keys().find(|k| !RECORD_KEYS.contains(&k.as_str())) {
            return Err(malformed(format!("unknown key {k:?}")));
        }
    }
    serde_json::from_value(value).map_err(|e| malformed(e.to_string()))
}

/// Groups records into conversations (in order of first appearance) and
/// checks every corpus invariant.
pub fn assemble(
    records: Vec<(usize, CorpusRecord)>,
    labels: &EmotionLabelSet,
) -> Result<Vec<Conversation>, CorpusError> {
    let mut order: Vec<String> = Vec::new();
    let mut by_cid: HashMap<String, Vec<Utterance>> = HashMap::new();
    let mut seen: HashMap<(String, usize), ()> = HashMap::new();
    let mut synthetic = Vec::new();

    for (line, rec) in records {
        let gold = match &rec.gold {
            Some(g) => Some(labels.index_of(g).ok_or_else(|| CorpusError::UnknownLabel {
                line,
                label: g.clone(),
            })?),
            None => None,
        };
        if rec.synthetic {
            synthetic.push((line, rec, gold));
            continue;
        }
        if seen.insert((rec.cid.clone(), rec.index), ()).is_some() {
            return Err(CorpusError::Duplicate {
                line,
                cid: rec.cid,
                index: rec.index,
            });
        }
        if !by_cid.contains_key(&rec.cid) {
            order.push(rec.cid.clone());
        }
        by_cid.entry(rec.cid.clone()).or_default().push(Utterance {
            conversation_id: rec.cid,
            index: rec.index,
            speaker: rec.speaker,
            text_raw: rec.text_raw,
            text_en: rec.text_en,
            gold,
            paraphrases: Vec::new(),
        });
    }

    let mut convs = Vec::with_capacity(order.len());
    for cid in order {
        let mut utterances = by_cid.remove(&cid).expect("grouped");
        utterances.sort_by_key(|u| u.index);
        if let Some(missing) = utterances.iter().enumerate().find(|(i, u)| u.index != *i) {
            return Err(CorpusError::NonContiguous {
                cid,
                missing: missing.0,
            });
        }
        convs.push(Conversation { id: cid, utterances });
    }

    let position: HashMap<String, usize> = convs
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id.clone(), i))
        .collect();
    for (line, rec, gold) in synthetic {
        let orphan = || CorpusError::OrphanSynthetic {
            line,
            cid: rec.cid.clone(),
            index: rec.index,
        };
        let conv = position.get(&rec.cid).ok_or_else(orphan)?;
        let utt = convs[*conv]
            .utterances
            .get_mut(rec.index)
            .ok_or_else(orphan)?;
        if gold != utt.gold {
            return Err(CorpusError::Malformed {
                line,
                msg: "synthetic record's gold label differs from its original".into(),
            });
        }
        let text = rec.text_en.clone().unwrap_or_else(|| rec.text_raw.clone());
        utt.paraphrases.push(text);
    }
    Ok(convs)
}

/// Flattens conversations back into records; each utterance is followed by
/// its synthetic variants.
pub fn to_records(convs: &[Conversation], labels: &EmotionLabelSet) -> Vec<CorpusRecord> {
    let mut out = Vec::new();
    for c in convs {
        for u in &c.utterances {
            let base = CorpusRecord {
                cid: c.id.clone(),
                index: u.index,
                speaker: u.speaker.clone(),
                text_raw: u.text_raw.clone(),
                text_en: u.text_en.clone(),
                gold: u.gold.map(|g| labels.name(g).to_string()),
                synthetic: false,
            };
            let variants: Vec<CorpusRecord> = u
                .paraphrases
                .iter()
                .map(|p| CorpusRecord {
                    text_en: Some(p.clone()),
                    synthetic: true,
                    ..base.clone()
                })
                .collect();
            out.push(base);
            out.extend(variants);
        }
    }
    out
}

pub fn write_corpus<W: Write>(
    mut w: W,
    convs: &[Conversation],
    labels: &EmotionLabelSet,
    header: bool,
) -> std::io::Result<()> {
    if header {
        let h = LabelHeader {
            labels: labels.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&h)?)?;
    }
    for rec in to_records(convs, labels) {
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}

pub fn save_corpus(
    path: &Path,
    convs: &[Conversation],
    labels: &EmotionLabelSet,
    header: bool,
) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    write_corpus(&mut w, convs, labels, header).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub conversations: usize,
    pub utterances: usize,
    pub labelled: usize,
    pub synthetic: usize,
}

pub fn stats(convs: &[Conversation]) -> CorpusStats {
    CorpusStats {
        conversations: convs.len(),
        utterances: convs.iter().map(Conversation::len).sum(),
        labelled: convs
            .iter()
            .flat_map(|c| &c.utterances)
            .filter(|u| u.gold.is_some())
            .count(),
        synthetic: convs.iter().map(Conversation::synthetic_count).sum(),
    }
}
