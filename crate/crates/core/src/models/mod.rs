//! The four base models, bundled with their encoder and parameters, and the
//! majority-vote ensemble.

mod ensemble;
pub mod nets;
mod records;

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ensemble::{ensemble_vote, Ensemble, EnsembleManifest, DEFAULT_PRIORITY};
pub use records::{read_predictions, write_predictions, PredictionRecord};
pub use nets::{ContextGruNet, Ctx, FullHistoryNet, HistoryBranch, SimpleHistoryNet};

use crate::corpus::{make_training_windows, make_windows, ContextWindow, Conversation, EmotionLabelSet, EmotionRef};
use crate::encoder::{Encoder, EncoderConfig, EncoderError, SentenceEncoder, DEFAULT_VOCAB_HASH_DIM};
use crate::neuralcore::{
    compare_gradients, grad_check, softmax_in_place, GradCheckOptions, GradCheckReport, Graph, Mode, NnError,
    ParamStore, Tensor, Var,
};
use crate::seed::{derive_seed, ENCODER, INIT};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const MANIFEST_FORMAT: u32 = 1;
/// Gradients at or below this everywhere count as structurally zero.
const DEAD_GRAD: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("invalid window: {0}")]
    Window(String),
    #[error("ensemble: {0}")]
    Ensemble(String),
    #[error("config: {0}")]
    Config(String),
    #[error("window {cid}:{index} has no gold label")]
    MissingGold { cid: String, index: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Manifest {
        path: PathBuf,
        source: serde_json::Error,
    },
}

impl ModelError {
    pub fn is_numerical(&self) -> bool {
        match self {
            ModelError::Nn(e) | ModelError::Encoder(EncoderError::Nn(e)) => e.is_numerical(),
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SimpleHistory,
    SimpleHistoryAug,
    FullHistory,
    ContextGru,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::SimpleHistory,
        ModelKind::SimpleHistoryAug,
        ModelKind::FullHistory,
        ModelKind::ContextGru,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::SimpleHistory => "simple_history",
            ModelKind::SimpleHistoryAug => "simple_history_aug",
            ModelKind::FullHistory => "full_history",
            ModelKind::ContextGru => "context_gru",
        }
    }

    /// Whether windows carry the preceding utterance's emotion.
    pub fn uses_previous_emotion(self) -> bool {
        self != ModelKind::ContextGru
    }

    pub fn default_batch_size(self) -> usize {
        match self {
            ModelKind::ContextGru => 1,
            _ => 4,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown model kind {s:?}")))
    }
}

/// Layer widths shared by the architectures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_enc: usize,
    pub vocab_hash_dim: usize,
    pub emotion_dim: usize,
    pub heads: usize,
    pub simple_hidden: usize,
    pub full_ffn_hidden: usize,
    pub full_ffn_out: usize,
    pub full_cls_hidden1: usize,
    pub full_cls_hidden2: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub gru_window: usize,
    pub proj_dim: usize,
    pub gru_cls_hidden: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl ModelDims {
    pub fn full() -> Self {
        Self {
            d_enc: 768,
            vocab_hash_dim: DEFAULT_VOCAB_HASH_DIM,
            emotion_dim: 50,
            heads: 8,
            simple_hidden: 256,
            full_ffn_hidden: 256,
            full_ffn_out: 128,
            full_cls_hidden1: 512,
            full_cls_hidden2: 128,
            gru_hidden: 256,
            gru_layers: 2,
            gru_window: 3,
            proj_dim: 256,
            gru_cls_hidden: 256,
            dropout: 0.25,
            leaky_slope: 0.01,
        }
    }

    /// Small widths for tests and laptop runs: encoder 32, hidden sizes a
    /// quarter of the full ones.
    pub fn desk() -> Self {
        Self {
            d_enc: 32,
            emotion_dim: 12,
            simple_hidden: 64,
            full_ffn_hidden: 64,
            full_ffn_out: 32,
            full_cls_hidden1: 128,
            full_cls_hidden2: 32,
            gru_hidden: 64,
            proj_dim: 64,
            gru_cls_hidden: 64,
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn full_concat_dim(&self) -> usize {
        self.full_ffn_out + self.d_enc + self.emotion_dim
    }

    pub fn gru_concat_dim(&self) -> usize {
        self.gru_hidden + self.gru_layers * self.gru_hidden + 2 * self.proj_dim
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.heads == 0 || !self.d_enc.is_multiple_of(self.heads) || !self.gru_hidden.is_multiple_of(self.heads) {
            return bad("d_enc and gru_hidden must be multiples of heads");
        }
        if self.gru_layers == 0 {
            return bad("gru_layers must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Everything needed to rebuild a bundle's architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub dims: ModelDims,
    pub labels: EmotionLabelSet,
    pub encoder: EncoderConfig,
    pub seed: u64,
    #[serde(default)]
    pub no_context: bool,
    #[serde(default = "default_true")]
    pub gru_includes_next: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// Hashed encoder sized to `dims.d_enc`.
    pub fn new(kind: ModelKind, dims: ModelDims, labels: EmotionLabelSet, seed: u64) -> Self {
        let encoder = EncoderConfig::Hashed {
            dim: dims.d_enc,
            vocab_hash_dim: dims.vocab_hash_dim,
            seed: derive_seed(seed, ENCODER),
        };
        Self {
            kind,
            dims,
            labels,
            encoder,
            seed,
            no_context: false,
            gru_includes_next: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub probs: Vec<f64>,
    /// Member votes, set by the ensemble only.
    pub votes: Option<Vec<(ModelKind, usize)>>,
}

impl Prediction {
    pub fn from_probs(probs: Vec<f64>) -> Self {
        Self {
            label: argmax(&probs),
            probs,
            votes: None,
        }
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub enum Network {
    Simple(SimpleHistoryNet),
    Full(FullHistoryNet),
    Gru(ContextGruNet),
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    #[serde(flatten)]
    config: ModelConfig,
}

/// A model with its encoder and one parameter store holding both.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    config: ModelConfig,
    encoder: Encoder,
    store: ParamStore,
    net: Network,
}

impl ModelBundle {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.dims.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::build(&mut store, &config.encoder)?;
        if encoder.dim() != config.dims.d_enc {
            return Err(ModelError::Config(format!(
                "encoder produces {} features but dims.d_enc is {}",
                encoder.dim(),
                config.dims.d_enc
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, INIT));
        let (dims, labels) = (&config.dims, &config.labels);
        let net = match config.kind {
            ModelKind::SimpleHistory | ModelKind::SimpleHistoryAug => {
                Network::Simple(SimpleHistoryNet::new(&mut store, dims, labels, &mut rng)?)
            }
            ModelKind::FullHistory => Network::Full(FullHistoryNet::new(&mut store, dims, labels, &mut rng)?),
            ModelKind::ContextGru => Network::Gru(ContextGruNet::new(
                &mut store,
                dims,
                labels,
                config.gru_includes_next,
                &mut rng,
            )?),
        };
        Ok(Self {
            config,
            encoder,
            store,
            net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn labels(&self) -> &EmotionLabelSet {
        &self.config.labels
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn set_no_context(&mut self, on: bool) {
        self.config.no_context = on;
    }

    /// Previous-sentence bound and whether the next sentence is included.
    pub fn window_shape(&self) -> (usize, bool) {
        match self.kind() {
            ModelKind::SimpleHistory | ModelKind::SimpleHistoryAug => (1, false),
            ModelKind::FullHistory => (usize::MAX, false),
            ModelKind::ContextGru => (self.config.dims.gru_window, true),
        }
    }

    pub fn windows(&self, conv: &Conversation) -> Vec<ContextWindow> {
        let (w_prev, next) = self.window_shape();
        make_windows(conv, w_prev, next)
    }

    /// Training windows; paraphrase windows only for the augmented kind.
    pub fn training_windows(&self, conv: &Conversation) -> Vec<ContextWindow> {
        let (w_prev, next) = self.window_shape();
        if self.kind() == ModelKind::SimpleHistoryAug {
            make_training_windows(conv, w_prev, next)
        } else {
            make_windows(conv, w_prev, next)
        }
    }

    fn ctx<'a>(&'a self, store: &'a ParamStore) -> Ctx<'a> {
        Ctx {
            store,
            encoder: &self.encoder,
            labels: &self.config.labels,
            dims: &self.config.dims,
            no_context: self.config.no_context,
        }
    }

    /// `[windows, labels]` pre-softmax scores.
    pub fn logits(&self, g: &mut Graph, windows: &[ContextWindow]) -> Result<Var, ModelError> {
        self.logits_with(&self.store, g, windows)
    }

    /// As [`Self::logits`] with parameter values taken from `store`, which
    /// must share this bundle's layout.
    pub fn logits_with(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        windows: &[ContextWindow],
    ) -> Result<Var, ModelError> {
        if windows.is_empty() {
            return Err(ModelError::Window("empty batch".into()));
        }
        let ctx = self.ctx(store);
        match &self.net {
            Network::Simple(n) => n.logits(g, &ctx, windows),
            Network::Full(n) => n.logits(g, &ctx, windows),
            Network::Gru(n) => n.logits(g, &ctx, windows),
        }
    }

    /// Mean cross-entropy against the windows' gold labels.
    pub fn loss(&self, g: &mut Graph, windows: &[ContextWindow]) -> Result<Var, ModelError> {
        self.loss_with(&self.store, g, windows)
    }

    pub fn loss_with(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        windows: &[ContextWindow],
    ) -> Result<Var, ModelError> {
        let targets = windows
            .iter()
            .map(|w| {
                w.gold.ok_or_else(|| ModelError::MissingGold {
                    cid: w.conversation_id.clone(),
                    index: w.index,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let logits = self.logits_with(store, g, windows)?;
        Ok(g.cross_entropy_logits(logits, &targets)?)
    }

    /// Eval-mode predictions for independent windows, as given.
    pub fn predict_windows(&self, windows: &[ContextWindow]) -> Result<Vec<Prediction>, ModelError> {
        let mut g = Graph::new(Mode::Eval);
        let logits = self.logits(&mut g, windows)?;
        let t = g.value(logits);
        Ok((0..t.rows())
            .map(|r| {
                let mut row = t.row_slice(r).to_vec();
                softmax_in_place(&mut row);
                Prediction::from_probs(row)
            })
            .collect())
    }

    /// Utterances in order; models that read the previous emotion receive
    /// the label predicted for the preceding utterance.
    pub fn predict_conversation(&self, conv: &Conversation) -> Result<Vec<Prediction>, ModelError> {
        let mut windows = self.windows(conv);
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        if !self.kind().uses_previous_emotion() {
            return self.predict_windows(&windows);
        }
        let mut out: Vec<Prediction> = Vec::with_capacity(windows.len());
        for w in windows.iter_mut() {
            w.previous_emotion = out.last().map_or(EmotionRef::Start, |p| EmotionRef::Label(p.label));
            let p = self.predict_windows(std::slice::from_ref(w))?.remove(0);
            out.push(p);
        }
        Ok(out)
    }

    /// Finite-difference check of the loss on `windows`. In train mode the
    /// dropout masks are fixed by `dropout_seed`, and parameters whose
    /// entire gradient vanishes are skipped: a bias feeding a batch-statistics
    /// BatchNorm is cancelled by the mean subtraction, so its true gradient
    /// is zero and central differences only measure rounding noise. Eval
    /// mode covers those parameters.
    pub fn grad_check(
        &self,
        windows: &[ContextWindow],
        opts: &GradCheckOptions,
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<GradCheckReport, ModelError> {
        let mut store = self.store.clone();
        let loss_fn = |s: &ParamStore| {
            let mut g = Graph::with_seed(mode, dropout_seed);
            let loss = self.loss_with(s, &mut g, windows)?;
            Ok::<_, ModelError>((g, loss))
        };
        if mode == Mode::Eval {
            return grad_check(&mut store, opts, loss_fn);
        }
        store.zero_grad();
        let (g, loss) = loss_fn(&store)?;
        g.backward(loss, &mut store)?;
        let analytic: Vec<Tensor> = store.iter().map(|(_, p)| p.grad.clone()).collect();
        let mut only = Vec::new();
        let mut skipped = Vec::new();
        for (id, p) in store.iter() {
            let allowed = opts.only.as_ref().is_none_or(|o| o.contains(&id));
            if !allowed {
                continue;
            }
            if p.grad.data().iter().any(|x| x.abs() > DEAD_GRAD) {
                only.push(id);
            } else {
                skipped.push(p.name.clone());
            }
        }
        let opts = GradCheckOptions {
            only: Some(only),
            ..opts.clone()
        };
        let mut report = compare_gradients(&mut store, &analytic, &opts, loss_fn)?;
        report.skipped = skipped;
        Ok(report)
    }

    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ModelError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let mpath = dir.join(MANIFEST_FILE);
        let manifest = Manifest {
            format: MANIFEST_FORMAT,
            config: self.config.clone(),
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|source| ModelError::Manifest {
            path: mpath.clone(),
            source,
        })?;
        text.push('\n');
        fs::write(&mpath, text).map_err(io(&mpath))?;
        let ppath = dir.join(PARAMS_FILE);
        let f = File::create(&ppath).map_err(io(&ppath))?;
        let mut w = BufWriter::new(f);
        self.store.write_checkpoint(&mut w)?;
        std::io::Write::flush(&mut w).map_err(io(&ppath))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|source| ModelError::Io {
            path: mpath.clone(),
            source,
        })?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|source| ModelError::Manifest {
            path: mpath.clone(),
            source,
        })?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(ModelError::Config(format!(
                "{}: unsupported manifest format {}",
                mpath.display(),
                manifest.format
            )));
        }
        let mut bundle = Self::new(manifest.config)?;
        let ppath = dir.join(PARAMS_FILE);
        let f = File::open(&ppath).map_err(|source| ModelError::Io {
            path: ppath.clone(),
            source,
        })?;
        bundle.store.read_checkpoint(BufReader::new(f))?;
        Ok(bundle)
    }
}
