use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, Prediction};
use crate::corpus::EmotionLabelSet;

/// One line of a predictions file. `votes` maps member kind to its label
/// and is `null` for single models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub cid: String,
    pub index: usize,
    pub label: String,
    pub probs: Vec<f64>,
    pub votes: Option<BTreeMap<String, String>>,
}

impl PredictionRecord {
    pub fn new(cid: &str, index: usize, p: &Prediction, labels: &EmotionLabelSet) -> Self {
        Self {
            cid: cid.to_string(),
            index,
            label: labels.name(p.label).to_string(),
            probs: p.probs.clone(),
            votes: p.votes.as_ref().map(|v| {
                v.iter()
                    .map(|(k, l)| (k.as_str().to_string(), labels.name(*l).to_string()))
                    .collect()
            }),
        }
    }
}

pub fn write_predictions<W: Write>(mut w: W, records: &[PredictionRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, ModelError> {
    let io = |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| ModelError::Manifest {
            path: path.to_path_buf(),
            source,
        })?);
    }
    Ok(out)
}
