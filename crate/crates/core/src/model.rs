//! Session-restricted encoder/decoder behavior model and its CTR head.
//!
//! History events are split into sessions at long gaps. Each session is
//! position-encoded and run through multi-head self-attention that never
//! looks across session boundaries, followed by one ReLU layer. The decoder
//! then aggregates all sessions for the current query with one of the
//! attention kernels, per head, and the CTR head scores the candidate item
//! against the aggregated interest.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::LOGIT_CLAMP;
use crate::autodiff::{Adam, Grads, ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// One click: the query it was issued under and the clicked item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub timestamp: u64,
    pub query: usize,
    pub item: usize,
}

/// A user's clicks in time order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BehaviorLog {
    pub events: Vec<Event>,
}

impl BehaviorLog {
    pub fn new(events: Vec<Event>) -> Result<Self> {
        if events.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
            return Err(Error::Format("behavior timestamps must be non-decreasing".into()));
        }
        Ok(BehaviorLog { events })
    }
}

/// A maximal run of events with gaps below the threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub events: Vec<Event>,
    pub start: u64,
    pub end: u64,
}

impl Session {
    fn from_events(events: Vec<Event>) -> Self {
        Session {
            start: events.first().map_or(0, |e| e.timestamp),
            end: events.last().map_or(0, |e| e.timestamp),
            events,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Splits at gaps `>= gap`, keeps the most recent `max_sessions` sessions and
/// the most recent `max_per_session` events of each.
pub fn segment_sessions(events: &[Event], gap: u64, max_sessions: usize, max_per_session: usize) -> Vec<Session> {
    let mut sessions: Vec<Vec<Event>> = Vec::new();
    for (i, e) in events.iter().enumerate() {
        if i == 0 || e.timestamp - events[i - 1].timestamp >= gap {
            sessions.push(Vec::new());
        }
        sessions.last_mut().expect("pushed above").push(*e);
    }
    let skip = sessions.len().saturating_sub(max_sessions);
    sessions
        .into_iter()
        .skip(skip)
        .map(|mut s| {
            let cut = s.len().saturating_sub(max_per_session);
            s.drain(..cut);
            Session::from_events(s)
        })
        .collect()
}

/// Aggregation used by the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeKernel {
    Vanilla,
    KfattBase,
    KfattFreq,
    /// Per-click fusion with the prior precision pinned to 1.
    KfattBs,
    /// Grouped fusion with the random error dropped.
    KfattFs,
}

/// Model family selectable from configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    /// No encoder; softmax attention over raw history.
    Vanilla,
    /// Encoder plus a softmax-attention decoder.
    Transformer,
    KfattBase,
    KfattFreq,
    KfattBs,
    KfattFs,
}

impl KernelMode {
    pub const ALL: [KernelMode; 6] = [
        KernelMode::Vanilla,
        KernelMode::Transformer,
        KernelMode::KfattBase,
        KernelMode::KfattFreq,
        KernelMode::KfattBs,
        KernelMode::KfattFs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelMode::Vanilla => "vanilla",
            KernelMode::Transformer => "transformer",
            KernelMode::KfattBase => "kfatt_base",
            KernelMode::KfattFreq => "kfatt_freq",
            KernelMode::KfattBs => "kfatt_bs",
            KernelMode::KfattFs => "kfatt_fs",
        }
    }

    pub fn uses_encoder(self) -> bool {
        self != KernelMode::Vanilla
    }

    pub fn decode_kernel(self) -> DecodeKernel {
        match self {
            KernelMode::Vanilla | KernelMode::Transformer => DecodeKernel::Vanilla,
            KernelMode::KfattBase => DecodeKernel::KfattBase,
            KernelMode::KfattFreq => DecodeKernel::KfattFreq,
            KernelMode::KfattBs => DecodeKernel::KfattBs,
            KernelMode::KfattFs => DecodeKernel::KfattFs,
        }
    }
}

impl fmt::Display for KernelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelMode::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(vec![format!("model.kernel: unknown kernel mode `{s}`")]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kernel: KernelMode,
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub mlp_hidden: usize,
    /// Hidden width of the prior and noise networks.
    pub head_hidden: usize,
    /// Treat the whole (capped) history as one session.
    pub single_session: bool,
    /// Divide decoder logits by `√d_k` before the softmax or the precision exponent.
    pub scale_logits: bool,
    pub session_gap_minutes: u64,
    pub max_sessions: usize,
    pub max_per_session: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kernel: KernelMode::KfattFreq,
            d_model: 32,
            heads: 2,
            d_k: 16,
            d_v: 16,
            mlp_hidden: 64,
            head_hidden: 16,
            single_session: false,
            scale_logits: true,
            session_gap_minutes: 30,
            max_sessions: 10,
            max_per_session: 25,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("mlp_hidden", self.mlp_hidden),
            ("head_hidden", self.head_hidden),
            ("max_sessions", self.max_sessions),
            ("max_per_session", self.max_per_session),
        ] {
            if v == 0 {
                errs.push(format!("model.{name} must be positive"));
            }
        }
        errs
    }

    /// Events kept after caps.
    pub fn history_cap(&self) -> usize {
        self.max_sessions * self.max_per_session
    }

    pub fn position_table_size(&self) -> usize {
        if self.single_session {
            self.history_cap()
        } else {
            self.max_per_session
        }
    }

    /// Sessions the model actually sees for a history.
    pub fn sessions(&self, history: &[Event]) -> Vec<Session> {
        if self.single_session {
            let cut = history.len().saturating_sub(self.history_cap());
            if history.len() == cut {
                return vec![];
            }
            vec![Session::from_events(history[cut..].to_vec())]
        } else {
            segment_sessions(history, self.session_gap_minutes, self.max_sessions, self.max_per_session)
        }
    }
}

/// Named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn count_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Copy, Debug)]
struct MlpIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ProjIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct DecoderHeadIds {
    proj: ProjIds,
    prior_mean: MlpIds,
    prior_prec: MlpIds,
    noise: MlpIds,
}

#[derive(Clone, Debug)]
struct Layout {
    query_emb: ParamId,
    item_emb: ParamId,
    position: ParamId,
    enc_heads: Vec<ProjIds>,
    enc_out: ParamId,
    fc_w: ParamId,
    fc_b: ParamId,
    dec_heads: Vec<DecoderHeadIds>,
    dec_out: ParamId,
    ctr: MlpIds,
}

/// Vocabulary sizes; id 0 of each vocabulary is the out-of-vocabulary bucket.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub queries: usize,
    pub items: usize,
}

/// One labelled example: a query, a candidate item and the user's history.
#[derive(Clone, Debug, PartialEq)]
pub struct CtrInstance {
    pub user: usize,
    pub timestamp: u64,
    pub query: usize,
    pub item: usize,
    pub label: f64,
    pub history: Arc<Vec<Event>>,
    pub tags: SubsetTags,
}

/// Evaluation slices an instance belongs to, besides `All`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetTags {
    pub new: bool,
    pub infreq: bool,
}

/// Overrides used for ablations and the degeneration checks.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DecodeOverrides {
    pub prior_precision: Option<f64>,
    pub random_sigma: Option<f64>,
}

struct Ctx<'m> {
    tape: Tape,
    params: &'m ParamStore,
    leaves: HashMap<ParamId, Var>,
}

impl<'m> Ctx<'m> {
    fn new(params: &'m ParamStore) -> Self {
        Ctx {
            tape: Tape::new(),
            params,
            leaves: HashMap::new(),
        }
    }

    fn p(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let v = self.tape.param(id, self.params.get(id));
        self.leaves.insert(id, v);
        v
    }

    fn mlp(&mut self, x: Var, ids: MlpIds) -> Result<Var> {
        let (w1, b1, w2, b2) = (self.p(ids.w1), self.p(ids.b1), self.p(ids.w2), self.p(ids.b2));
        let h = self.tape.matmul(x, w1)?;
        let h = self.tape.add_row(h, b1)?;
        let h = self.tape.relu(h);
        let o = self.tape.matmul(h, w2)?;
        self.tape.add_row(o, b2)
    }
}

/// Nodes of interest from one forward pass.
pub struct ForwardTrace {
    pub tape: Tape,
    pub logit: Var,
    pub interest: Var,
    /// Session encodings `H_s`, one per session (empty without an encoder).
    pub encodings: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    params: ParamStore,
    layout: Layout,
}

impl Model {
    /// Fresh model with scaled-normal initialization.
    pub fn new(config: ModelConfig, vocab: Vocab, rng: &mut Rng) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let c = &config;
        let mut ps = ParamStore::default();
        let dense = |ps: &mut ParamStore, name: String, rows: usize, cols: usize, rng: &mut Rng| {
            ps.add(name, rng.normal_tensor(&[rows, cols], 1.0 / (rows as f64).sqrt()))
        };
        let query_emb = ps.add("query_emb", rng.normal_tensor(&[vocab.queries, c.d_model], 0.1));
        let item_emb = ps.add("item_emb", rng.normal_tensor(&[vocab.items, c.d_model], 0.1));
        let position = ps.add("position", rng.normal_tensor(&[c.position_table_size(), c.d_model], 0.01));
        let mut enc_heads = Vec::new();
        for h in 0..c.heads {
            enc_heads.push(ProjIds {
                wq: dense(&mut ps, format!("enc.{h}.wq"), c.d_model, c.d_k, rng),
                wk: dense(&mut ps, format!("enc.{h}.wk"), c.d_model, c.d_k, rng),
                wv: dense(&mut ps, format!("enc.{h}.wv"), c.d_model, c.d_v, rng),
            });
        }
        let enc_out = dense(&mut ps, "enc.wo".into(), c.heads * c.d_v, c.d_model, rng);
        let fc_w = dense(&mut ps, "enc.fc.w".into(), c.d_model, c.d_model, rng);
        let fc_b = ps.add("enc.fc.b", Tensor::zeros(&[1, c.d_model]));

        let mlp = |ps: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize, bias: f64, rng: &mut Rng| MlpIds {
            w1: ps.add(format!("{name}.w1"), rng.normal_tensor(&[d_in, hidden], 1.0 / (d_in as f64).sqrt())),
            b1: ps.add(format!("{name}.b1"), Tensor::zeros(&[1, hidden])),
            w2: ps.add(format!("{name}.w2"), rng.normal_tensor(&[hidden, d_out], 1.0 / (hidden as f64).sqrt())),
            b2: ps.add(format!("{name}.b2"), Tensor::full(&[1, d_out], bias)),
        };
        let mut dec_heads = Vec::new();
        for h in 0..c.heads {
            let proj = ProjIds {
                wq: dense(&mut ps, format!("dec.{h}.wq"), c.d_model, c.d_k, rng),
                wk: dense(&mut ps, format!("dec.{h}.wk"), c.d_model, c.d_k, rng),
                wv: dense(&mut ps, format!("dec.{h}.wv"), c.d_model, c.d_v, rng),
            };
            dec_heads.push(DecoderHeadIds {
                proj,
                prior_mean: mlp(&mut ps, &format!("dec.{h}.prior_mean"), c.d_k, c.head_hidden, c.d_v, 0.0, rng),
                prior_prec: mlp(&mut ps, &format!("dec.{h}.prior_prec"), c.d_k, c.head_hidden, 1, 0.0, rng),
                noise: mlp(&mut ps, &format!("dec.{h}.noise"), c.d_k, c.head_hidden, 1, 0.0, rng),
            });
        }
        let dec_out = dense(&mut ps, "dec.wo".into(), c.heads * c.d_v, c.d_model, rng);
        let ctr = mlp(&mut ps, "ctr", 4 * c.d_model, c.mlp_hidden, 1, 0.0, rng);
        Ok(Model {
            config,
            vocab,
            params: ps,
            layout: Layout {
                query_emb,
                item_emb,
                position,
                enc_heads,
                enc_out,
                fc_w,
                fc_b,
                dec_heads,
                dec_out,
                ctr,
            },
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn position_table_id(&self) -> ParamId {
        self.layout.position
    }

    /// Replaces parameter values, checking names and shapes.
    pub fn load_params(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Format(format!("{} tensors for {} parameters", named.len(), self.params.len())));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if self.params.names[i] != name || self.params.values[i].shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {i}: expected {} {:?}, found {name} {:?}",
                    self.params.names[i],
                    self.params.values[i].shape(),
                    t.shape()
                )));
            }
            self.params.values[i] = t;
        }
        Ok(())
    }

    fn check_id(&self, vocab: &'static str, id: usize) -> Result<()> {
        let size = if vocab == "query" { self.vocab.queries } else { self.vocab.items };
        if id == 0 || id >= size {
            return Err(Error::UnknownId { vocab, id, size });
        }
        Ok(())
    }

    fn embed_session(&self, ctx: &mut Ctx, session: &Session, positions: bool) -> Result<(Var, Var)> {
        let qids: Vec<usize> = session.events.iter().map(|e| e.query).collect();
        let iids: Vec<usize> = session.events.iter().map(|e| e.item).collect();
        for (&q, &i) in qids.iter().zip(&iids) {
            self.check_id("query", q)?;
            self.check_id("item", i)?;
        }
        ctx.tape.set_mac_scope("embed");
        let k = ctx.tape.gather_param(self.layout.query_emb, self.params.get(self.layout.query_emb), &qids)?;
        let v = ctx.tape.gather_param(self.layout.item_emb, self.params.get(self.layout.item_emb), &iids)?;
        if !positions {
            return Ok((k, v));
        }
        self.position_encode(ctx, k, v, session.len())
    }

    /// Adds row `i` of the learned position table to row `i` of both `K_s` and `V_s`.
    fn position_encode(&self, ctx: &mut Ctx, k: Var, v: Var, len: usize) -> Result<(Var, Var)> {
        let size = self.config.position_table_size();
        if len > size {
            return Err(Error::PositionOutOfRange { position: len - 1, size });
        }
        let rows: Vec<usize> = (0..len).collect();
        let pos = ctx.tape.gather_param(self.layout.position, self.params.get(self.layout.position), &rows)?;
        let k = ctx.tape.add(k, pos)?;
        let v = ctx.tape.add(v, pos)?;
        Ok((k, v))
    }

    /// Multi-head self-attention within one session, then `ReLU(· W_fc + b_fc)`.
    fn encode_session(&self, ctx: &mut Ctx, k: Var, v: Var) -> Result<Var> {
        let c = &self.config;
        let scale = 1.0 / (c.d_k as f64).sqrt();
        let mut heads = Vec::with_capacity(c.heads);
        for ids in &self.layout.enc_heads {
            let (wq, wk, wv) = (ctx.p(ids.wq), ctx.p(ids.wk), ctx.p(ids.wv));
            ctx.tape.set_mac_scope("encoder.proj");
            let qh = ctx.tape.matmul(k, wq)?;
            let kh = ctx.tape.matmul(k, wk)?;
            let vh = ctx.tape.matmul(v, wv)?;
            ctx.tape.set_mac_scope("encoder.attn");
            let scores = ctx.tape.matmul_bt(qh, kh)?;
            let scores = ctx.tape.scale(scores, scale);
            let attn = ctx.tape.softmax_rows(scores)?;
            heads.push(ctx.tape.matmul(attn, vh)?);
        }
        ctx.tape.set_mac_scope("encoder.proj");
        let cat = ctx.tape.concat_cols(&heads)?;
        let wo = ctx.p(self.layout.enc_out);
        let o = ctx.tape.matmul(cat, wo)?;
        ctx.tape.set_mac_scope("encoder.ffn");
        let (fw, fb) = (ctx.p(self.layout.fc_w), ctx.p(self.layout.fc_b));
        let h = ctx.tape.matmul(o, fw)?;
        let h = ctx.tape.add_row(h, fb)?;
        Ok(ctx.tape.relu(h))
    }

    /// Per-head fusion of `(q W^Q, K W^K, H W^V)` followed by `W^O`.
    #[allow(clippy::too_many_arguments)]
    fn decode_interest(
        &self,
        ctx: &mut Ctx,
        q: Var,
        keys: Option<Var>,
        values: Option<Var>,
        history_queries: &[usize],
        kernel: DecodeKernel,
        overrides: DecodeOverrides,
    ) -> Result<Var> {
        let c = &self.config;
        let t = history_queries.len();
        if t == 0 && kernel == DecodeKernel::Vanilla {
            return Err(Error::EmptyHistory);
        }
        ctx.tape.set_mac_scope("decoder");
        let logit_scale = if c.scale_logits { 1.0 / (c.d_k as f64).sqrt() } else { 1.0 };

        // Dedup groups by exact query id, in order of first appearance.
        let grouped = matches!(kernel, DecodeKernel::KfattFreq | DecodeKernel::KfattFs);
        let mut group_of: HashMap<usize, usize> = HashMap::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        for (pos, &qid) in history_queries.iter().enumerate() {
            let g = *group_of.entry(qid).or_insert_with(|| {
                members.push(Vec::new());
                members.len() - 1
            });
            members[g].push(pos);
        }
        let averaging = if grouped && t > 0 {
            let mut a = Tensor::zeros(&[members.len(), t]);
            for (g, ms) in members.iter().enumerate() {
                for &pos in ms {
                    a.data_mut()[g * t + pos] = 1.0 / ms.len() as f64;
                }
            }
            Some(ctx.tape.constant(a))
        } else {
            None
        };
        let counts: Vec<f64> = members.iter().map(|m| m.len() as f64).collect();

        let mut heads = Vec::with_capacity(c.heads);
        for ids in &self.layout.dec_heads {
            let (wq, wk, wv) = (ctx.p(ids.proj.wq), ctx.p(ids.proj.wk), ctx.p(ids.proj.wv));
            let qh = ctx.tape.matmul(q, wq)?;
            let (kh, vh) = match (keys, values) {
                (Some(k), Some(v)) => (ctx.tape.matmul(k, wk)?, ctx.tape.matmul(v, wv)?),
                _ => (
                    ctx.tape.constant(Tensor::zeros(&[0, c.d_k])),
                    ctx.tape.constant(Tensor::zeros(&[0, c.d_v])),
                ),
            };
            let head = if kernel == DecodeKernel::Vanilla {
                let logits = ctx.tape.matmul_bt(qh, kh)?;
                let logits = ctx.tape.scale(logits, logit_scale);
                let alpha = ctx.tape.softmax_rows(logits)?;
                ctx.tape.matmul(alpha, vh)?
            } else {
                let mean = ctx.mlp(qh, ids.prior_mean)?;
                let prior_prec = match (overrides.prior_precision, kernel) {
                    (Some(p), _) => ctx.tape.constant(Tensor::scalar(p)),
                    (None, DecodeKernel::KfattBs) => ctx.tape.constant(Tensor::scalar(1.0)),
                    _ => {
                        let raw = ctx.mlp(qh, ids.prior_prec)?;
                        ctx.tape.softplus(raw)
                    }
                };
                let (fused_values, weights) = if let Some(a) = averaging {
                    let kbar = ctx.tape.matmul(a, kh)?;
                    let vbar = ctx.tape.matmul(a, vh)?;
                    let logits = ctx.tape.matmul_bt(qh, kbar)?;
                    let logits = ctx.tape.scale(logits, logit_scale);
                    let logits = ctx.tape.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP);
                    let sys_prec = ctx.tape.exp(logits);
                    let sigma = match (overrides.random_sigma, kernel) {
                        (Some(s), _) => ctx.tape.constant(Tensor::full(&[1, members.len()], s)),
                        (None, DecodeKernel::KfattFs) => ctx.tape.constant(Tensor::zeros(&[1, members.len()])),
                        _ => {
                            let raw = ctx.mlp(kbar, ids.noise)?;
                            let s = ctx.tape.softplus(raw);
                            ctx.tape.transpose(s)
                        }
                    };
                    (vbar, ctx.tape.freq_weights(sys_prec, sigma, &counts)?)
                } else {
                    let logits = ctx.tape.matmul_bt(qh, kh)?;
                    let logits = ctx.tape.scale(logits, logit_scale);
                    let logits = ctx.tape.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP);
                    (vh, ctx.tape.exp(logits))
                };
                ctx.tape.kf_fusion(mean, prior_prec, fused_values, weights)?
            };
            heads.push(head);
        }
        let cat = ctx.tape.concat_cols(&heads)?;
        let wo = ctx.p(self.layout.dec_out);
        ctx.tape.matmul(cat, wo)
    }

    fn run(&self, inst: &CtrInstance, kernel: DecodeKernel, overrides: DecodeOverrides) -> Result<ForwardTrace> {
        self.check_id("query", inst.query)?;
        self.check_id("item", inst.item)?;
        let mut ctx = Ctx::new(&self.params);
        let encoder = self.config.kernel.uses_encoder();
        ctx.tape.set_mac_scope("embed");
        let q = ctx
            .tape
            .gather_param(self.layout.query_emb, self.params.get(self.layout.query_emb), &[inst.query])?;
        let item = ctx
            .tape
            .gather_param(self.layout.item_emb, self.params.get(self.layout.item_emb), &[inst.item])?;

        let sessions = self.config.sessions(&inst.history);
        let mut ks = Vec::new();
        let mut hs = Vec::new();
        let mut encodings = Vec::new();
        let mut history_queries = Vec::new();
        for s in &sessions {
            let (k, v) = self.embed_session(&mut ctx, s, encoder)?;
            let h = if encoder {
                let h = self.encode_session(&mut ctx, k, v)?;
                encodings.push(h);
                h
            } else {
                v
            };
            ks.push(k);
            hs.push(h);
            history_queries.extend(s.events.iter().map(|e| e.query));
        }
        let (keys, values) = if ks.is_empty() {
            (None, None)
        } else {
            (Some(ctx.tape.concat_rows(&ks)?), Some(ctx.tape.concat_rows(&hs)?))
        };
        let interest = self.decode_interest(&mut ctx, q, keys, values, &history_queries, kernel, overrides)?;

        ctx.tape.set_mac_scope("ctr");
        let cross = ctx.tape.mul(interest, item)?;
        let x = ctx.tape.concat_cols(&[q, item, interest, cross])?;
        let logit = ctx.mlp(x, self.layout.ctr)?;
        Ok(ForwardTrace {
            tape: ctx.tape,
            logit,
            interest,
            encodings,
        })
    }

    /// Full forward pass with the configured kernel.
    pub fn trace(&self, inst: &CtrInstance) -> Result<ForwardTrace> {
        self.run(inst, self.config.kernel.decode_kernel(), DecodeOverrides::default())
    }

    /// Forward pass with an explicit decoder kernel and overrides.
    pub fn trace_with(&self, inst: &CtrInstance, kernel: DecodeKernel, overrides: DecodeOverrides) -> Result<ForwardTrace> {
        self.run(inst, kernel, overrides)
    }

    /// Click probability.
    pub fn ctr_forward(&self, inst: &CtrInstance) -> Result<f64> {
        let tr = self.trace(inst)?;
        Ok(crate::numerics::sigmoid(tr.tape.value(tr.logit).data()[0]))
    }

    /// Raw logit; monotone in the probability and free of saturation ties.
    pub fn score(&self, inst: &CtrInstance) -> Result<f64> {
        let tr = self.trace(inst)?;
        Ok(tr.tape.value(tr.logit).data()[0])
    }

    /// Binary cross-entropy of one instance.
    pub fn loss(&self, inst: &CtrInstance) -> Result<f64> {
        let mut tr = self.trace(inst)?;
        let loss = tr.tape.bce_logits(tr.logit, inst.label)?;
        Ok(tr.tape.value(loss).data()[0])
    }

    /// Loss and parameter gradients of one instance, accumulated into `grads`.
    pub fn accumulate_grads(&self, inst: &CtrInstance, grads: &mut Grads) -> Result<f64> {
        let mut tr = self.trace(inst)?;
        let loss = tr.tape.bce_logits(tr.logit, inst.label)?;
        let value = tr.tape.value(loss).data()[0];
        tr.tape.backward_into(loss, grads)?;
        Ok(value)
    }

    /// Position-encoded `(K_s, V_s)` of one session.
    pub fn session_inputs(&self, session: &Session) -> Result<(Tensor, Tensor)> {
        let mut ctx = Ctx::new(&self.params);
        let (k, v) = self.embed_session(&mut ctx, session, true)?;
        Ok((ctx.tape.value(k).clone(), ctx.tape.value(v).clone()))
    }

    /// Encoder output `H_s` for given session inputs.
    pub fn encode_inputs(&self, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        if k.shape() != v.shape() || k.cols() != self.config.d_model {
            return Err(Error::Shape(format!("session inputs {:?} and {:?}", k.shape(), v.shape())));
        }
        let mut ctx = Ctx::new(&self.params);
        let (k, v) = (ctx.tape.constant(k.clone()), ctx.tape.constant(v.clone()));
        let h = self.encode_session(&mut ctx, k, v)?;
        Ok(ctx.tape.value(h).clone())
    }

    /// Encoder output `H_s` of one session.
    pub fn encode(&self, session: &Session) -> Result<Tensor> {
        let (k, v) = self.session_inputs(session)?;
        self.encode_inputs(&k, &v)
    }

    /// Aggregated interest `v̂_q` for an instance.
    pub fn interest(&self, inst: &CtrInstance, kernel: DecodeKernel, overrides: DecodeOverrides) -> Result<Tensor> {
        let tr = self.run(inst, kernel, overrides)?;
        Ok(tr.tape.value(tr.interest).clone())
    }

    /// Multiply-accumulate counts per scope for the encoder over sessions of
    /// the given lengths (dummy ids, positions included).
    pub fn encoder_macs(&self, session_lengths: &[usize]) -> Result<std::collections::BTreeMap<&'static str, u64>> {
        let mut ctx = Ctx::new(&self.params);
        let mut t = 0u64;
        for &len in session_lengths {
            let events: Vec<Event> = (0..len)
                .map(|i| {
                    t += 1;
                    Event {
                        timestamp: t,
                        query: 1 + i % (self.vocab.queries - 1),
                        item: 1 + i % (self.vocab.items - 1),
                    }
                })
                .collect();
            let s = Session::from_events(events);
            let (k, v) = self.embed_session(&mut ctx, &s, true)?;
            self.encode_session(&mut ctx, k, v)?;
        }
        Ok(ctx.tape.macs().clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.003,
            epochs: 4,
            batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0) {
            errs.push("train.lr must be positive".into());
        }
        if self.epochs == 0 {
            errs.push("train.epochs must be positive".into());
        }
        if self.batch_size == 0 {
            errs.push("train.batch_size must be positive".into());
        }
        errs
    }
}

/// Fixed chunk width for gradient accumulation. Chunk sums are merged in
/// order, so results do not depend on the number of worker threads.
const GRAD_CHUNK: usize = 16;

/// Mean loss and mean gradient over a batch.
pub fn batch_gradient(model: &Model, batch: &[&CtrInstance]) -> Result<(f64, Grads)> {
    let parts: Vec<Result<(f64, Grads)>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = Grads::new(model.params.len());
            let mut loss = 0.0;
            for inst in chunk {
                loss += model.accumulate_grads(inst, &mut g)?;
            }
            Ok((loss, g))
        })
        .collect();
    let mut total = Grads::new(model.params.len());
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.merge(&g)?;
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

/// Trains with Adam on shuffled mini-batches; returns the mean loss per epoch.
pub fn train(
    model: &mut Model,
    data: &[CtrInstance],
    cfg: &TrainConfig,
    rng: &mut Rng,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut adam = Adam::new(cfg.lr)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&CtrInstance> = idx.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = batch_gradient(model, &batch)?;
            sum += loss * batch.len() as f64;
            adam.step(model.params.values_mut(), &grads)?;
        }
        let mean = sum / data.len().max(1) as f64;
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(history)
}

/// Scores every instance; order matches the input.
pub fn predict_all(model: &Model, data: &[CtrInstance]) -> Result<Vec<f64>> {
    data.par_iter().map(|inst| model.score(inst)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: u64) -> Event {
        Event {
            timestamp: t,
            query: 1,
            item: 1,
        }
    }

    fn stamps(s: &[Session]) -> Vec<Vec<u64>> {
        s.iter().map(|s| s.events.iter().map(|e| e.timestamp).collect()).collect()
    }

    #[test]
    fn segmentation_examples() {
        let log: Vec<Event> = [0, 5, 40, 42].into_iter().map(ev).collect();
        assert_eq!(stamps(&segment_sessions(&log, 30, 10, 25)), vec![vec![0, 5], vec![40, 42]]);

        let log: Vec<Event> = (0..20).map(|i| ev(i * 10)).collect();
        assert_eq!(segment_sessions(&log, 30, 10, 25).len(), 1);
        let capped = segment_sessions(&log, 30, 10, 5);
        assert_eq!(stamps(&capped), vec![vec![150, 160, 170, 180, 190]]);

        let log: Vec<Event> = (0..12).flat_map(|s| [ev(s * 100), ev(s * 100 + 1)]).collect();
        let s = segment_sessions(&log, 30, 10, 25);
        assert_eq!(s.len(), 10);
        assert_eq!(s[0].start, 200);
        assert_eq!(s[9].end, 1101);

        assert!(segment_sessions(&[], 30, 10, 25).is_empty());
        // A gap of exactly the threshold splits.
        let log: Vec<Event> = [0, 30].into_iter().map(ev).collect();
        assert_eq!(segment_sessions(&log, 30, 10, 25).len(), 2);
    }

    #[test]
    fn timestamps_must_be_sorted() {
        assert!(BehaviorLog::new(vec![ev(5), ev(3)]).is_err());
        assert!(BehaviorLog::new(vec![ev(3), ev(3), ev(5)]).is_ok());
    }

    #[test]
    fn kernel_mode_parses() {
        for k in KernelMode::ALL {
            assert_eq!(k.name().parse::<KernelMode>().unwrap(), k);
        }
        assert!(matches!("din".parse::<KernelMode>(), Err(Error::Config(_))));
    }
}
