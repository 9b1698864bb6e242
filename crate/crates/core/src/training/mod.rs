//! AdamW training with two learning-rate groups, plateau scheduling and
//! early stopping on validation weighted F1.

mod optim;
mod schedule;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use optim::{clip_grad_norm, AdamW, AdamWConfig, LR_ENCODER, LR_MAIN};
pub use schedule::{EarlyStopping, ReduceOnPlateau, StopDecision};

use crate::corpus::{ContextWindow, Conversation};
use crate::evalmetrics::{evaluate_partial, MetricsError};
use crate::models::{ModelBundle, ModelError, ModelKind};
use crate::neuralcore::{Graph, Mode, ParamGroup};
use crate::seed::{derive_seed, DROPOUT, SHUFFLE};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training diverged at epoch {epoch}, batch {batch}: {source}")]
    Diverged {
        epoch: usize,
        batch: usize,
        source: ModelError,
    },
    #[error("non-finite gradient in {param}")]
    NonFiniteGradient { param: String },
    #[error("no labelled training windows")]
    EmptyTrain,
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl TrainError {
    pub fn is_numerical(&self) -> bool {
        match self {
            TrainError::Diverged { .. } | TrainError::NonFiniteGradient { .. } => true,
            TrainError::Model(e) => e.is_numerical(),
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// `None` resolves per model kind.
    pub batch_size: Option<usize>,
    pub patience: usize,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub seed: u64,
    /// `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
    pub optimizer: AdamWConfig,
    /// Stop as soon as chained-inference accuracy on the training data
    /// reaches this value.
    pub target_train_accuracy: Option<f64>,
    /// Record chained-inference training accuracy each epoch.
    pub track_train_accuracy: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            batch_size: None,
            patience: 5,
            scheduler_factor: 0.5,
            scheduler_patience: 2,
            seed: 0,
            grad_clip_norm: Some(5.0),
            optimizer: AdamWConfig::default(),
            target_train_accuracy: None,
            track_train_accuracy: false,
        }
    }
}

impl TrainConfig {
    pub fn batch_size_for(&self, kind: ModelKind) -> usize {
        self.batch_size.unwrap_or_else(|| kind.default_batch_size())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == Some(0) {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::Config("patience must be at least 1".into()));
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor <= 1.0) {
            return Err(TrainError::Config("scheduler_factor must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
    pub val_weighted_f1: Option<f64>,
    pub lr_encoder: f64,
    pub lr_main: f64,
    pub best: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.epochs {
            writeln!(w, "{}", serde_json::to_string(e)?)?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let Some(last) = self.epochs.last() else {
            return "no epochs run".into();
        };
        let best = self
            .best_epoch
            .and_then(|b| self.epochs.iter().find(|e| e.epoch == b));
        match best {
            Some(b) => format!(
                "{} epochs; best epoch {} (val weighted F1 {}, train loss {:.4})",
                self.epochs.len(),
                b.epoch,
                b.val_weighted_f1.map_or("n/a".into(), |f| format!("{f:.4}")),
                b.train_loss
            ),
            None => format!("{} epochs; final train loss {:.4}", self.epochs.len(), last.train_loss),
        }
    }
}

/// Shuffled batches for one epoch. Models reading the previous emotion
/// shuffle individual windows; the GRU model shuffles conversations and
/// keeps each conversation's windows in order. A trailing single-window
/// batch is merged into its predecessor so batch statistics stay defined.
fn epoch_batches<R: Rng>(
    kind: ModelKind,
    per_conv: &[Vec<ContextWindow>],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<ContextWindow>> {
    let mut flat: Vec<ContextWindow> = if kind == ModelKind::ContextGru {
        let mut order: Vec<usize> = (0..per_conv.len()).collect();
        order.shuffle(rng);
        order.into_iter().flat_map(|i| per_conv[i].iter().cloned()).collect()
    } else {
        let mut all: Vec<ContextWindow> = per_conv.iter().flatten().cloned().collect();
        all.shuffle(rng);
        all
    };
    let mut batches = Vec::new();
    while !flat.is_empty() {
        let rest = flat.split_off(batch_size.min(flat.len()));
        batches.push(std::mem::replace(&mut flat, rest));
    }
    if batch_size > 1 && batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

/// Weighted F1 of chained predictions against the available gold labels.
pub fn conversation_f1(bundle: &ModelBundle, convs: &[Conversation]) -> Result<(f64, f64), TrainError> {
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    for c in convs {
        for (p, u) in bundle.predict_conversation(c)?.into_iter().zip(&c.utterances) {
            preds.push(p.label);
            golds.push(u.gold);
        }
    }
    let r = evaluate_partial(&preds, &golds, bundle.labels())?;
    Ok((r.weighted_f1, r.accuracy))
}

/// Trains a copy of `init`. With a non-empty validation set the returned
/// bundle is the epoch with the highest validation weighted F1 and
/// scheduling and early stopping follow that metric; without one, all
/// `max_epochs` run (or until the training-accuracy target) and the final
/// parameters are returned.
pub fn train_model(
    init: &ModelBundle,
    train: &[Conversation],
    val: &[Conversation],
    cfg: &TrainConfig,
) -> Result<(ModelBundle, TrainLog), TrainError> {
    cfg.validate()?;
    let kind = init.kind();
    let per_conv: Vec<Vec<ContextWindow>> = train
        .iter()
        .map(|c| {
            init.training_windows(c)
                .into_iter()
                .filter(|w| w.gold.is_some())
                .collect::<Vec<_>>()
        })
        .filter(|ws| !ws.is_empty())
        .collect();
    if per_conv.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let has_val = val.iter().any(|c| c.utterances.iter().any(|u| u.gold.is_some()));
    let batch_size = cfg.batch_size_for(kind);

    let mut bundle = init.clone();
    let mut opt = AdamW::new(bundle.store(), cfg.optimizer.clone());
    let mut plateau = ReduceOnPlateau::new(cfg.scheduler_factor, cfg.scheduler_patience);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, DROPOUT));
    let mut log = TrainLog::default();
    let mut best_store = None;

    for epoch in 1..=cfg.max_epochs {
        let batches = epoch_batches(kind, &per_conv, batch_size, &mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, batch) in batches.iter().enumerate() {
            let diverged = |source| TrainError::Diverged {
                epoch,
                batch: b,
                source,
            };
            bundle.store_mut().zero_grad();
            let mut g = Graph::with_seed(Mode::Train, dropout_rng.random());
            let loss = bundle.loss(&mut g, batch).map_err(|e| {
                if e.is_numerical() {
                    diverged(e)
                } else {
                    TrainError::Model(e)
                }
            })?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(diverged(ModelError::Window("loss is not finite".into())));
            }
            g.backward(loss, bundle.store_mut())
                .map_err(|e| diverged(ModelError::Nn(e)))?;
            for upd in g.take_stat_updates() {
                upd.apply(bundle.store_mut());
            }
            if let Some(max) = cfg.grad_clip_norm {
                clip_grad_norm(bundle.store_mut(), max);
            }
            opt.step(bundle.store_mut())?;
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
        }

        let train_accuracy = if cfg.track_train_accuracy || cfg.target_train_accuracy.is_some() {
            Some(conversation_f1(&bundle, train)?.1)
        } else {
            None
        };
        let mut record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_accuracy,
            val_weighted_f1: None,
            lr_encoder: opt.lr(ParamGroup::Encoder),
            lr_main: opt.lr(ParamGroup::Main),
            best: false,
        };
        let mut stop = false;
        if has_val {
            let (f1, _) = conversation_f1(&bundle, val)?;
            record.val_weighted_f1 = Some(f1);
            let d = stopper.observe(epoch, f1);
            if d.improved {
                log.best_epoch = Some(epoch);
                best_store = Some(bundle.store().clone());
            }
            stop = d.stop;
            if let Some(factor) = plateau.observe(f1) {
                opt.scale_lr(factor);
                log::info!("epoch {epoch}: learning rates scaled by {factor}");
            }
        } else {
            log.best_epoch = Some(epoch);
        }
        log::info!(
            "{kind} epoch {epoch}: loss {:.5}{}{}",
            record.train_loss,
            record.train_accuracy.map_or(String::new(), |a| format!(", train acc {a:.4}")),
            record.val_weighted_f1.map_or(String::new(), |f| format!(", val wF1 {f:.4}"))
        );
        if let (Some(target), Some(acc)) = (cfg.target_train_accuracy, record.train_accuracy) {
            stop |= acc >= target;
        }
        log.epochs.push(record);
        if stop {
            break;
        }
    }
    for e in log.epochs.iter_mut() {
        e.best = Some(e.epoch) == log.best_epoch;
    }
    if let Some(store) = best_store {
        *bundle.store_mut() = store;
    }
    Ok((bundle, log))
}

/// Final-submission protocol: a standard run on `train` with `val`
/// selects the best epoch count, then a fresh copy of `init` trains on
/// both splits for exactly that many epochs.
pub fn train_on_all(
    init: &ModelBundle,
    train: &[Conversation],
    val: &[Conversation],
    cfg: &TrainConfig,
) -> Result<(ModelBundle, TrainLog, TrainLog), TrainError> {
    let (_, first) = train_model(init, train, val, cfg)?;
    let epochs = first.best_epoch.unwrap_or(cfg.max_epochs);
    let all: Vec<Conversation> = train.iter().chain(val).cloned().collect();
    let fixed = TrainConfig {
        max_epochs: epochs,
        target_train_accuracy: None,
        ..cfg.clone()
    };
    let (bundle, second) = train_model(init, &all, &[], &fixed)?;
    Ok((bundle, first, second))
}
