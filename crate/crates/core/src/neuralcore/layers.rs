use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::graph::StatUpdate;
use super::{BufferId, Graph, Mode, NnError, ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Default LeakyReLU negative slope.
pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Shape configuration for each layer kind the models use.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerConfig {
    Linear { in_dim: usize, out_dim: usize, bias: bool },
    Embedding { num: usize, dim: usize },
    MultiHeadAttention { model_dim: usize, heads: usize },
    GruStack { input_dim: usize, hidden: usize, layers: usize, dropout_p: f64 },
    BatchNorm1d { dim: usize, eps: f64, momentum: f64 },
    Dropout { p: f64 },
    LeakyRelu { slope: f64 },
    Relu,
    Softmax,
}

impl LayerConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let positive = |what: &'static str, v: usize| {
            if v == 0 {
                Err(NnError::invalid(what, "dimensions must be positive"))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerConfig::Linear { in_dim, out_dim, .. } => {
                positive("linear", in_dim)?;
                positive("linear", out_dim)
            }
            LayerConfig::Embedding { num, dim } => {
                positive("embedding", num)?;
                positive("embedding", dim)
            }
            LayerConfig::MultiHeadAttention { model_dim, heads } => {
                positive("multi_head_attention", model_dim)?;
                positive("multi_head_attention", heads)?;
                if model_dim % heads != 0 {
                    return Err(NnError::invalid(
                        "multi_head_attention",
                        format!("model_dim {model_dim} not divisible by {heads} heads"),
                    ));
                }
                Ok(())
            }
            LayerConfig::GruStack { input_dim, hidden, layers, dropout_p } => {
                positive("gru", input_dim)?;
                positive("gru", hidden)?;
                positive("gru", layers)?;
                LayerConfig::Dropout { p: dropout_p }.validate()
            }
            LayerConfig::BatchNorm1d { dim, eps, momentum } => {
                positive("batch_norm", dim)?;
                if eps <= 0.0 || !(0.0..=1.0).contains(&momentum) {
                    return Err(NnError::invalid("batch_norm", "bad eps or momentum"));
                }
                Ok(())
            }
            LayerConfig::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(NnError::invalid("dropout", format!("p must be in [0, 1), got {p}")));
                }
                Ok(())
            }
            LayerConfig::LeakyRelu { .. } | LayerConfig::Relu | LayerConfig::Softmax => Ok(()),
        }
    }
}

fn uniform_tensor<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weight `[out, in]` drawn from `U(-1/√in, 1/√in)`; bias zero.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        LayerConfig::Linear { in_dim, out_dim, bias }.validate()?;
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.register(
            format!("{name}.weight"),
            group,
            uniform_tensor(rng, &[out_dim, in_dim], bound),
        )?;
        let bias = if bias {
            Some(store.register(format!("{name}.bias"), group, Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let w = g.param(store, self.weight)?;
        let b = match self.bias {
            Some(b) => Some(g.param(store, b)?),
            None => None,
        };
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub num: usize,
    pub dim: usize,
}

impl Embedding {
    /// Rows drawn from `N(0, 0.02)`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        num: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        LayerConfig::Embedding { num, dim }.validate()?;
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let data = (0..num * dim).map(|_| normal.sample(rng)).collect();
        let table = store.register(
            format!("{name}.table"),
            ParamGroup::Main,
            Tensor::matrix(num, dim, data)?,
        )?;
        Ok(Self { table, num, dim })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        idx: &[usize],
    ) -> Result<Var, NnError> {
        let t = g.param(store, self.table)?;
        g.gather_rows(t, idx)
    }
}

/// Scaled dot-product attention split over `heads`, followed by an output
/// projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub model_dim: usize,
    pub heads: usize,
}

pub struct AttentionOutput {
    /// `[Lq, model_dim]`.
    pub output: Var,
    /// One `[Lq, Lk]` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        model_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        LayerConfig::MultiHeadAttention { model_dim, heads }.validate()?;
        // No key bias: it shifts every score in a row equally, so softmax
        // cancels it and its gradient is identically zero.
        let mut proj = |role: &str, bias: bool, rng: &mut R| {
            Linear::new(
                store,
                &format!("{name}.{role}"),
                model_dim,
                model_dim,
                bias,
                ParamGroup::Main,
                rng,
            )
        };
        Ok(Self {
            query: proj("query", true, rng)?,
            key: proj("key", false, rng)?,
            value: proj("value", true, rng)?,
            output: proj("output", true, rng)?,
            model_dim,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q_seq: Var,
        k_seq: Var,
        v_seq: Var,
    ) -> Result<AttentionOutput, NnError> {
        for s in [q_seq, k_seq, v_seq] {
            if g.value(s).cols() != self.model_dim {
                return Err(NnError::shape(
                    "multi_head_attention",
                    format!("expected {} features, got {}", self.model_dim, g.value(s).cols()),
                ));
            }
        }
        if g.value(k_seq).rows() != g.value(v_seq).rows() {
            return Err(NnError::shape(
                "multi_head_attention",
                "key and value sequences differ in length",
            ));
        }
        let q = self.query.forward(g, store, q_seq)?;
        let k = self.key.forward(g, store, k_seq)?;
        let v = self.value.forward(g, store, v_seq)?;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax(scores)?;
            heads.push(g.matmul(attn, vh)?);
            weights.push(attn);
        }
        let joined = g.concat_cols(&heads)?;
        let output = self.output.forward(g, store, joined)?;
        Ok(AttentionOutput { output, weights })
    }
}

#[derive(Clone, Debug)]
pub struct GruLayer {
    pub w_update: Linear,
    pub w_reset: Linear,
    pub w_candidate: Linear,
    pub u_update: Linear,
    pub u_reset: Linear,
    pub u_candidate: Linear,
    pub hidden: usize,
}

impl GruLayer {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let mut lin = |role: &str, i: usize, bias: bool, rng: &mut R| {
            Linear::new(store, &format!("{name}.{role}"), i, hidden, bias, ParamGroup::Main, rng)
        };
        Ok(Self {
            w_update: lin("w_update", input_dim, true, rng)?,
            w_reset: lin("w_reset", input_dim, true, rng)?,
            w_candidate: lin("w_candidate", input_dim, true, rng)?,
            u_update: lin("u_update", hidden, false, rng)?,
            u_reset: lin("u_reset", hidden, false, rng)?,
            u_candidate: lin("u_candidate", hidden, false, rng)?,
            hidden,
        })
    }

    /// Runs the recurrence over `seq` `[T, in]` from `h0` `[1, hidden]`;
    /// returns the `[T, hidden]` output sequence.
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seq: Var,
        h0: Var,
    ) -> Result<Var, NnError> {
        let steps = g.value(seq).rows();
        // Input projections for every timestep at once.
        let xz = self.w_update.forward(g, store, seq)?;
        let xr = self.w_reset.forward(g, store, seq)?;
        let xh = self.w_candidate.forward(g, store, seq)?;
        let mut h = h0;
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xz_t = g.slice_rows(xz, t, 1)?;
            let xr_t = g.slice_rows(xr, t, 1)?;
            let xh_t = g.slice_rows(xh, t, 1)?;
            let hz = self.u_update.forward(g, store, h)?;
            let z_pre = g.add(xz_t, hz)?;
            let z = g.sigmoid(z_pre)?;
            let hr = self.u_reset.forward(g, store, h)?;
            let r_pre = g.add(xr_t, hr)?;
            let r = g.sigmoid(r_pre)?;
            let rh = g.mul(r, h)?;
            let hc = self.u_candidate.forward(g, store, rh)?;
            let c_pre = g.add(xh_t, hc)?;
            let cand = g.tanh(c_pre)?;
            // h_t = (1 − z)·h + z·ĥ  =  h + z·(ĥ − h)
            let diff = g.sub(cand, h)?;
            let step = g.mul(z, diff)?;
            h = g.add(h, step)?;
            outputs.push(h);
        }
        g.concat_rows(&outputs)
    }
}

#[derive(Clone, Debug)]
pub struct GruStack {
    pub layers: Vec<GruLayer>,
    pub input_dim: usize,
    pub hidden: usize,
    pub dropout_p: f64,
}

pub struct GruOutput {
    /// Last layer, every timestep: `[T, hidden]`.
    pub outputs: Var,
    /// Final-timestep state of each layer: `[layers, hidden]`.
    pub finals: Var,
}

impl GruStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        layers: usize,
        dropout_p: f64,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        LayerConfig::GruStack { input_dim, hidden, layers, dropout_p }.validate()?;
        let mut stack = Vec::with_capacity(layers);
        for l in 0..layers {
            let in_dim = if l == 0 { input_dim } else { hidden };
            stack.push(GruLayer::new(store, &format!("{name}.l{l}"), in_dim, hidden, rng)?);
        }
        Ok(Self {
            layers: stack,
            input_dim,
            hidden,
            dropout_p,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seq: Var) -> Result<GruOutput, NnError> {
        let zeros = (0..self.layers.len())
            .map(|_| g.constant(Tensor::zeros(&[1, self.hidden])))
            .collect::<Result<Vec<_>, _>>()?;
        self.forward_with_h0(g, store, seq, &zeros)
    }

    /// Same as [`GruStack::forward`] with explicit initial states, one per layer.
    pub fn forward_with_h0(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seq: Var,
        h0: &[Var],
    ) -> Result<GruOutput, NnError> {
        let (steps, in_dim) = g
            .value(seq)
            .dims2()
            .ok_or_else(|| NnError::shape("gru", "sequence must be a matrix"))?;
        if steps == 0 {
            return Err(NnError::invalid("gru", "empty sequence"));
        }
        if in_dim != self.input_dim {
            return Err(NnError::shape("gru", format!("expected {} features, got {in_dim}", self.input_dim)));
        }
        if h0.len() != self.layers.len() {
            return Err(NnError::shape("gru", "one initial state per layer required"));
        }
        let mut input = seq;
        let mut finals = Vec::with_capacity(self.layers.len());
        for (l, (layer, &h)) in self.layers.iter().zip(h0).enumerate() {
            if l > 0 {
                input = g.dropout(input, self.dropout_p)?;
            }
            let out = layer.forward(g, store, input, h)?;
            finals.push(g.slice_rows(out, steps - 1, 1)?);
            input = out;
        }
        let finals = g.concat_rows(&finals)?;
        Ok(GruOutput {
            outputs: input,
            finals,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub tracked: BufferId,
    pub dim: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self, NnError> {
        LayerConfig::BatchNorm1d { dim, eps: BN_EPS, momentum: BN_MOMENTUM }.validate()?;
        Ok(Self {
            gamma: store.register(format!("{name}.gamma"), ParamGroup::Main, Tensor::full(&[dim], 1.0))?,
            beta: store.register(format!("{name}.beta"), ParamGroup::Main, Tensor::zeros(&[dim]))?,
            running_mean: store.register_buffer(format!("{name}.running_mean"), Tensor::zeros(&[dim]))?,
            running_var: store.register_buffer(format!("{name}.running_var"), Tensor::full(&[dim], 1.0))?,
            tracked: store.register_buffer(format!("{name}.batches_tracked"), Tensor::zeros(&[1]))?,
            dim,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    pub fn running_stats_initialized(&self, store: &ParamStore) -> bool {
        store.buffer(self.tracked).data()[0] > 0.0
    }

    /// Train mode with ≥ 2 rows uses batch statistics and queues a running
    /// stat update on the graph. A single train-mode row falls back to the
    /// running statistics once they have been updated at least once.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        let rows = g.value(x).rows();
        let use_batch = g.mode() == Mode::Train && rows >= 2;
        if g.mode() == Mode::Train && rows < 2 && !self.running_stats_initialized(store) {
            return Err(NnError::invalid(
                "batch_norm",
                "batch of 1 in train mode before running statistics exist",
            ));
        }
        if use_batch {
            let (y, stats) = g.batch_norm(x, gamma, beta, self.eps, None)?;
            let (batch_mean, batch_var) = stats.expect("batch statistics");
            g.record_stat_update(StatUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                tracked: self.tracked,
                momentum: self.momentum,
                batch_mean,
                batch_var,
            });
            Ok(y)
        } else {
            let mean = store.buffer(self.running_mean).data();
            let var = store.buffer(self.running_var).data();
            let (y, _) = g.batch_norm(x, gamma, beta, self.eps, Some((mean, var)))?;
            Ok(y)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_divisibility_checked() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MultiHeadAttention::new(&mut store, "a", 10, 3, &mut rng).is_err());
    }

    #[test]
    fn single_key_attention_weight_is_one() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let mut g = Graph::new(Mode::Eval);
        let q = g.constant(Tensor::row(vec![0.3; 8])).unwrap();
        let k = g.constant(Tensor::row(vec![-1.5; 8])).unwrap();
        let out = mha.forward(&mut g, &store, q, k, q).unwrap();
        for w in &out.weights {
            assert_eq!(g.value(*w).data(), &[1.0]);
        }
        // output = W_O·(W_V·v + b_V) + b_O
        let mut g2 = Graph::new(Mode::Eval);
        let v = g2.constant(Tensor::row(vec![0.3; 8])).unwrap();
        let pv = mha.value.forward(&mut g2, &store, v).unwrap();
        let expected = mha.output.forward(&mut g2, &store, pv).unwrap();
        for (a, b) in g.value(out.output).data().iter().zip(g2.value(expected).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_projections_return_value() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 1, &mut rng).unwrap();
        for lin in [&mha.query, &mha.key, &mha.value, &mha.output] {
            let w = store.get_mut(lin.weight);
            w.value.fill(0.0);
            for i in 0..4 {
                w.value.data_mut()[i * 4 + i] = 1.0;
            }
        }
        let mut g = Graph::new(Mode::Eval);
        let v = g.constant(Tensor::row(vec![1.0, -2.0, 0.5, 3.0])).unwrap();
        let k = g.constant(Tensor::row(vec![9.0, 9.0, 9.0, 9.0])).unwrap();
        let out = mha.forward(&mut g, &store, v, k, v).unwrap();
        assert_eq!(g.value(out.output).data(), &[1.0, -2.0, 0.5, 3.0]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 4, &mut rng).unwrap();
        let mut g = Graph::new(Mode::Eval);
        let data: Vec<f64> = (0..40).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.7).collect();
        let s = g.constant(Tensor::matrix(5, 8, data).unwrap()).unwrap();
        let q = g.slice_rows(s, 0, 3).unwrap();
        let out = mha.forward(&mut g, &store, q, s, s).unwrap();
        assert_eq!(g.value(out.output).shape(), &[3, 8]);
        for w in out.weights {
            let t = g.value(w);
            assert_eq!(t.shape(), &[3, 5]);
            for r in 0..3 {
                assert!((t.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    fn zeroed_gru(layers: usize, input: usize, hidden: usize) -> (ParamStore, GruStack) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gru = GruStack::new(&mut store, "gru", input, hidden, layers, 0.25, &mut rng).unwrap();
        for p in store.iter_mut() {
            p.value.fill(0.0);
        }
        (store, gru)
    }

    #[test]
    fn zero_gru_stays_at_zero() {
        let (store, gru) = zeroed_gru(2, 3, 4);
        let mut g = Graph::new(Mode::Eval);
        let seq = g.constant(Tensor::matrix(3, 3, vec![1.0; 9]).unwrap()).unwrap();
        let out = gru.forward(&mut g, &store, seq).unwrap();
        assert!(g.value(out.outputs).data().iter().all(|v| *v == 0.0));
        assert_eq!(g.value(out.finals).shape(), &[2, 4]);
    }

    #[test]
    fn zero_gru_halves_initial_state() {
        let (store, gru) = zeroed_gru(1, 3, 4);
        let mut g = Graph::new(Mode::Eval);
        let seq = g.constant(Tensor::matrix(2, 3, vec![0.7; 6]).unwrap()).unwrap();
        let v = vec![2.0, -4.0, 1.0, 8.0];
        let h0 = g.constant(Tensor::row(v.clone())).unwrap();
        let out = gru.forward_with_h0(&mut g, &store, seq, &[h0]).unwrap();
        let o = g.value(out.outputs);
        let half: Vec<f64> = v.iter().map(|x| 0.5 * x).collect();
        let quarter: Vec<f64> = v.iter().map(|x| 0.25 * x).collect();
        assert_eq!(o.row_slice(0), half.as_slice());
        assert_eq!(o.row_slice(1), quarter.as_slice());
    }

    #[test]
    fn gru_rejects_empty_and_misshaped_input() {
        let (store, gru) = zeroed_gru(2, 3, 4);
        let mut g = Graph::new(Mode::Eval);
        let seq = g.constant(Tensor::matrix(2, 5, vec![0.0; 10]).unwrap()).unwrap();
        assert!(gru.forward(&mut g, &store, seq).is_err());
    }

    #[test]
    fn batch_norm_single_row_policy() {
        let mut store = ParamStore::new();
        let bn = BatchNorm1d::new(&mut store, "bn", 2).unwrap();
        let mut g = Graph::new(Mode::Train);
        let one = g.constant(Tensor::row(vec![1.0, 2.0])).unwrap();
        assert!(bn.forward(&mut g, &store, one).is_err());

        let two = g
            .constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap())
            .unwrap();
        bn.forward(&mut g, &store, two).unwrap();
        for u in g.take_stat_updates() {
            u.apply(&mut store);
        }
        assert!(bn.running_stats_initialized(&store));
        // mean (2, 4), unbiased var (2, 8), momentum 0.1
        let m = store.buffer(bn.running_mean).data();
        let v = store.buffer(bn.running_var).data();
        assert!((m[0] - 0.2).abs() < 1e-12 && (m[1] - 0.4).abs() < 1e-12);
        assert!((v[0] - (0.9 + 0.2)).abs() < 1e-12 && (v[1] - (0.9 + 0.8)).abs() < 1e-12);

        let mut g = Graph::new(Mode::Train);
        let one = g.constant(Tensor::row(vec![1.0, 2.0])).unwrap();
        assert!(bn.forward(&mut g, &store, one).is_ok());
        assert!(g.take_stat_updates().is_empty());
    }
}
