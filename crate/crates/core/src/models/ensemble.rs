use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelBundle, ModelError, ModelKind, Prediction};
use crate::corpus::{Conversation, EmotionLabelSet};

/// Tie-break order, strongest base model first.
pub const DEFAULT_PRIORITY: [ModelKind; 4] = [
    ModelKind::ContextGru,
    ModelKind::SimpleHistory,
    ModelKind::FullHistory,
    ModelKind::SimpleHistoryAug,
];

pub const ENSEMBLE_SIZE: usize = 4;

/// Majority vote over four member predictions. Ties go to the label with
/// the highest mean probability across all members, then to the label
/// backed by the member that ranks highest in `priority`. The output
/// distribution is the renormalised mean of the members' distributions, so
/// its argmax need not be the voted label.
pub fn ensemble_vote(
    members: &[(ModelKind, &Prediction)],
    priority: &[ModelKind],
) -> Result<Prediction, ModelError> {
    if members.len() != ENSEMBLE_SIZE {
        return Err(ModelError::Ensemble(format!(
            "expected {ENSEMBLE_SIZE} member predictions, got {}",
            members.len()
        )));
    }
    let k = members[0].1.probs.len();
    for (kind, p) in members {
        if p.probs.len() != k || p.label >= k {
            return Err(ModelError::Ensemble(format!(
                "member {kind} disagrees on the label set ({} probabilities, label {})",
                p.probs.len(),
                p.label
            )));
        }
    }

    let mut counts = vec![0usize; k];
    let mut mean = vec![0.0; k];
    for (_, p) in members {
        counts[p.label] += 1;
        for (m, x) in mean.iter_mut().zip(&p.probs) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= members.len() as f64;
    }
    let rank = |label: usize| {
        members
            .iter()
            .enumerate()
            .filter(|(_, (_, p))| p.label == label)
            .map(|(i, (kind, _))| {
                priority
                    .iter()
                    .position(|q| q == kind)
                    .unwrap_or(priority.len() + i)
            })
            .min()
            .unwrap_or(usize::MAX)
    };

    let top = *counts.iter().max().expect("non-empty");
    let mut tied: Vec<usize> = (0..k).filter(|&c| counts[c] == top).collect();
    if tied.len() > 1 {
        let best = tied.iter().map(|&c| mean[c]).fold(f64::NEG_INFINITY, f64::max);
        tied.retain(|&c| mean[c] == best);
    }
    let label = tied
        .into_iter()
        .min_by_key(|&c| (rank(c), c))
        .expect("at least one label has the top count");

    let total: f64 = mean.iter().sum();
    let probs = if total > 0.0 {
        mean.iter().map(|m| m / total).collect()
    } else {
        mean
    };
    Ok(Prediction {
        label,
        probs,
        votes: Some(members.iter().map(|(kind, p)| (*kind, p.label)).collect()),
    })
}

/// On-disk description of an ensemble; member paths are relative to the
/// manifest's directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub members: Vec<PathBuf>,
    #[serde(default = "default_priority")]
    pub priority: Vec<ModelKind>,
}

fn default_priority() -> Vec<ModelKind> {
    DEFAULT_PRIORITY.to_vec()
}

#[derive(Clone, Debug)]
pub struct Ensemble {
    pub members: Vec<ModelBundle>,
    pub priority: Vec<ModelKind>,
}

impl Ensemble {
    pub fn new(members: Vec<ModelBundle>, priority: Vec<ModelKind>) -> Result<Self, ModelError> {
        if members.len() != ENSEMBLE_SIZE {
            return Err(ModelError::Ensemble(format!(
                "an ensemble has {ENSEMBLE_SIZE} members, got {}",
                members.len()
            )));
        }
        let labels = members[0].labels();
        if let Some(m) = members.iter().find(|m| m.labels() != labels) {
            return Err(ModelError::Ensemble(format!(
                "member {} uses a different label set",
                m.kind()
            )));
        }
        Ok(Self { members, priority })
    }

    pub fn labels(&self) -> &EmotionLabelSet {
        self.members[0].labels()
    }

    pub fn load(manifest_path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(manifest_path).map_err(|source| ModelError::Io {
            path: manifest_path.to_path_buf(),
            source,
        })?;
        let manifest: EnsembleManifest = serde_json::from_str(&text).map_err(|source| ModelError::Manifest {
            path: manifest_path.to_path_buf(),
            source,
        })?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let members = manifest
            .members
            .iter()
            .map(|p| ModelBundle::load(&base.join(p)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(members, manifest.priority)
    }

    /// Each member predicts the conversation on its own (with its own
    /// emotion chaining); the vote is taken per utterance.
    pub fn predict_conversation(&self, conv: &Conversation) -> Result<Vec<Prediction>, ModelError> {
        let per_member = self
            .members
            .iter()
            .map(|m| m.predict_conversation(conv))
            .collect::<Result<Vec<_>, _>>()?;
        (0..conv.len())
            .map(|i| {
                let votes: Vec<(ModelKind, &Prediction)> = self
                    .members
                    .iter()
                    .zip(&per_member)
                    .map(|(m, preds)| (m.kind(), &preds[i]))
                    .collect();
                ensemble_vote(&votes, &self.priority)
            })
            .collect()
    }
}
