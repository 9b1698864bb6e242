//! The three base architectures. Each `logits` call takes a batch of
//! windows and returns `[batch, labels]` pre-softmax scores.

use rand::Rng;

use super::{ModelDims, ModelError};
use crate::corpus::{ContextWindow, EmotionLabelSet, EmotionRef};
use crate::encoder::{Encoder, SentenceEncoder};
use crate::neuralcore::layers::{BatchNorm1d, Embedding, GruStack, Linear, MultiHeadAttention};
use crate::neuralcore::{Graph, ParamGroup, ParamStore, Var};

/// Shared inputs for one forward pass.
pub struct Ctx<'a> {
    pub store: &'a ParamStore,
    pub encoder: &'a Encoder,
    pub labels: &'a EmotionLabelSet,
    pub dims: &'a ModelDims,
    /// Sentence-only mode: previous sentence and emotion replaced by sentinels.
    pub no_context: bool,
}

fn lin<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    i: usize,
    o: usize,
    rng: &mut R,
) -> Result<Linear, ModelError> {
    Ok(Linear::new(store, name, i, o, true, ParamGroup::Main, rng)?)
}

/// Attention (K from the previous sentence, Q and V from the current one)
/// plus the previous-emotion embedding; shared by both history models.
#[derive(Clone, Debug)]
pub struct HistoryBranch {
    pub attention: MultiHeadAttention,
    pub emotion: Embedding,
}

impl HistoryBranch {
    fn new<R: Rng>(
        store: &mut ParamStore,
        dims: &ModelDims,
        labels: &EmotionLabelSet,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, "history.attention", dims.d_enc, dims.heads, rng)?,
            emotion: Embedding::new(store, "history.emotion", labels.len() + 1, dims.emotion_dim, rng)?,
        })
    }

    /// `[n, d_enc + emotion_dim]`: attention output then emotion embedding.
    fn forward(&self, g: &mut Graph, ctx: &Ctx, windows: &[ContextWindow]) -> Result<Var, ModelError> {
        let mut attended = Vec::with_capacity(windows.len());
        let mut rows = Vec::with_capacity(windows.len());
        for w in windows {
            let prev_text = match (ctx.no_context, w.previous.last()) {
                (false, Some(p)) => p.as_str(),
                _ => "",
            };
            let current = ctx.encoder.encode_var(g, ctx.store, &w.current)?;
            let previous = ctx.encoder.encode_var(g, ctx.store, prev_text)?;
            let out = self.attention.forward(g, ctx.store, current, previous, current)?;
            attended.push(out.output);
            let emotion = if ctx.no_context {
                EmotionRef::Start
            } else {
                w.previous_emotion
            };
            rows.push(emotion.row(ctx.labels));
        }
        let a = g.concat_rows(&attended)?;
        let e = self.emotion.forward(g, ctx.store, &rows)?;
        Ok(g.concat_cols(&[a, e])?)
    }
}

#[derive(Clone, Debug)]
pub struct SimpleHistoryNet {
    pub history: HistoryBranch,
    pub hidden: Linear,
    pub out: Linear,
}

impl SimpleHistoryNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        dims: &ModelDims,
        labels: &EmotionLabelSet,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let history = HistoryBranch::new(store, dims, labels, rng)?;
        let z = dims.d_enc + dims.emotion_dim;
        Ok(Self {
            history,
            hidden: lin(store, "classifier.fc1", z, dims.simple_hidden, rng)?,
            out: lin(store, "classifier.fc2", dims.simple_hidden, labels.len(), rng)?,
        })
    }

    pub fn logits(&self, g: &mut Graph, ctx: &Ctx, windows: &[ContextWindow]) -> Result<Var, ModelError> {
        if let Some(w) = windows.iter().find(|w| w.previous.len() > 1) {
            return Err(ModelError::Window(format!(
                "simple history model takes at most 1 previous sentence, window {}:{} has {}",
                w.conversation_id,
                w.index,
                w.previous.len()
            )));
        }
        let z = self.history.forward(g, ctx, windows)?;
        let h = self.hidden.forward(g, ctx.store, z)?;
        let h = g.leaky_relu(h, ctx.dims.leaky_slope)?;
        Ok(self.out.forward(g, ctx.store, h)?)
    }
}

#[derive(Clone, Debug)]
pub struct FullHistoryNet {
    pub history: HistoryBranch,
    pub ffn_in: Linear,
    pub ffn_norm: BatchNorm1d,
    pub ffn_out: Linear,
    pub cls1: Linear,
    pub cls_norm: BatchNorm1d,
    pub cls2: Linear,
    pub cls3: Linear,
}

impl FullHistoryNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        dims: &ModelDims,
        labels: &EmotionLabelSet,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let history = HistoryBranch::new(store, dims, labels, rng)?;
        let ffn_in = lin(store, "history_ffn.fc1", dims.d_enc, dims.full_ffn_hidden, rng)?;
        let ffn_norm = BatchNorm1d::new(store, "history_ffn.bn", dims.full_ffn_hidden)?;
        let ffn_out = lin(store, "history_ffn.fc2", dims.full_ffn_hidden, dims.full_ffn_out, rng)?;
        let cls1 = lin(store, "classifier.fc1", dims.full_concat_dim(), dims.full_cls_hidden1, rng)?;
        let cls_norm = BatchNorm1d::new(store, "classifier.bn", dims.full_cls_hidden1)?;
        let cls2 = lin(store, "classifier.fc2", dims.full_cls_hidden1, dims.full_cls_hidden2, rng)?;
        let cls3 = lin(store, "classifier.fc3", dims.full_cls_hidden2, labels.len(), rng)?;
        Ok(Self {
            history,
            ffn_in,
            ffn_norm,
            ffn_out,
            cls1,
            cls_norm,
            cls2,
            cls3,
        })
    }

    /// `[n, ffn_out + d_enc + emotion_dim]` classifier input.
    pub fn features(&self, g: &mut Graph, ctx: &Ctx, windows: &[ContextWindow]) -> Result<Var, ModelError> {
        let store = ctx.store;
        let p = ctx.dims.dropout;
        let mut hist = Vec::with_capacity(windows.len());
        for w in windows {
            let text = if ctx.no_context {
                String::new()
            } else {
                w.previous.join(" ")
            };
            hist.push(ctx.encoder.encode_var(g, store, &text)?);
        }
        let h = g.concat_rows(&hist)?;
        let h = self.ffn_in.forward(g, store, h)?;
        let h = self.ffn_norm.forward(g, store, h)?;
        let h = g.leaky_relu(h, ctx.dims.leaky_slope)?;
        let h = g.dropout(h, p)?;
        let h = self.ffn_out.forward(g, store, h)?;
        let branch = self.history.forward(g, ctx, windows)?;
        Ok(g.concat_cols(&[h, branch])?)
    }

    pub fn logits(&self, g: &mut Graph, ctx: &Ctx, windows: &[ContextWindow]) -> Result<Var, ModelError> {
        let store = ctx.store;
        let p = ctx.dims.dropout;
        let z = self.features(g, ctx, windows)?;
        let h = self.cls1.forward(g, store, z)?;
        let h = self.cls_norm.forward(g, store, h)?;
        let h = g.leaky_relu(h, ctx.dims.leaky_slope)?;
        let h = g.dropout(h, p)?;
        let h = self.cls2.forward(g, store, h)?;
        let h = g.relu(h)?;
        let h = g.dropout(h, p)?;
        Ok(self.cls3.forward(g, store, h)?)
    }
}

#[derive(Clone, Debug)]
pub struct ContextGruNet {
    pub gru: GruStack,
    pub projection: Linear,
    pub attention: MultiHeadAttention,
    pub cls1: Linear,
    pub cls2: Linear,
    pub includes_next: bool,
}

impl ContextGruNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        dims: &ModelDims,
        labels: &EmotionLabelSet,
        includes_next: bool,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            gru: GruStack::new(store, "gru", dims.d_enc, dims.gru_hidden, dims.gru_layers, dims.dropout, rng)?,
            projection: lin(store, "projection", dims.d_enc, dims.proj_dim, rng)?,
            attention: MultiHeadAttention::new(store, "gru_attention", dims.gru_hidden, dims.heads, rng)?,
            cls1: lin(store, "classifier.fc1", dims.gru_concat_dim(), dims.gru_cls_hidden, rng)?,
            cls2: lin(store, "classifier.fc2", dims.gru_cls_hidden, labels.len(), rng)?,
            includes_next,
        })
    }

    /// Texts fed to the GRU, in order: previous…, current, then next (the
    /// empty sentinel at conversation end) unless disabled.
    pub fn sequence_texts<'w>(&self, w: &'w ContextWindow, max_prev: usize) -> Vec<&'w str> {
        let start = w.previous.len().saturating_sub(max_prev);
        let mut seq: Vec<&str> = w.previous[start..].iter().map(String::as_str).collect();
        seq.push(&w.current);
        if self.includes_next {
            seq.push(w.next.as_deref().unwrap_or(""));
        }
        seq
    }

    fn single(&self, g: &mut Graph, ctx: &Ctx, w: &ContextWindow) -> Result<Var, ModelError> {
        let store = ctx.store;
        let p = ctx.dims.dropout;
        let texts = self.sequence_texts(w, ctx.dims.gru_window);
        let mut steps = Vec::with_capacity(texts.len());
        for t in &texts {
            steps.push(ctx.encoder.encode_var(g, store, t)?);
        }
        let seq = g.concat_rows(&steps)?;
        let out = self.gru.forward(g, store, seq)?;
        let layers = ctx.dims.gru_layers;
        let last = g.slice_rows(out.finals, layers - 1, 1)?;
        let attended = self.attention.forward(g, store, out.finals, out.finals, out.finals)?;
        let mut att_rows = Vec::with_capacity(layers);
        for l in 0..layers {
            att_rows.push(g.slice_rows(attended.output, l, 1)?);
        }
        let att = g.concat_cols(&att_rows)?;

        let current = ctx.encoder.encode_var(g, store, &w.current)?;
        let next = ctx.encoder.encode_var(g, store, w.next.as_deref().unwrap_or(""))?;
        let pc = self.projection.forward(g, store, current)?;
        let pc = g.dropout(pc, p)?;
        let pn = self.projection.forward(g, store, next)?;
        let pn = g.dropout(pn, p)?;
        Ok(g.concat_cols(&[last, att, pc, pn])?)
    }

    pub fn logits(&self, g: &mut Graph, ctx: &Ctx, windows: &[ContextWindow]) -> Result<Var, ModelError> {
        if let Some(w) = windows.iter().find(|w| w.previous.len() > ctx.dims.gru_window) {
            return Err(ModelError::Window(format!(
                "GRU model takes at most {} previous sentences, window {}:{} has {}",
                ctx.dims.gru_window,
                w.conversation_id,
                w.index,
                w.previous.len()
            )));
        }
        let mut rows = Vec::with_capacity(windows.len());
        for w in windows {
            rows.push(self.single(g, ctx, w)?);
        }
        let z = g.concat_rows(&rows)?;
        let h = self.cls1.forward(g, ctx.store, z)?;
        let h = g.dropout(h, ctx.dims.dropout)?;
        let h = g.leaky_relu(h, ctx.dims.leaky_slope)?;
        Ok(self.cls2.forward(g, ctx.store, h)?)
    }
}
