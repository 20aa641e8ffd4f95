//! Transformer generator over production sequences and the feature-prefixed
//! discriminator, plus masked sampling and the checkpoint container.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoding::{DecodeError, Episode};
use crate::derivation::{DerivationError, DEFAULT_MAX_DERIVATION_STEPS};
use crate::grammar::ProductionId;
use crate::nn::tape::{gelu_in_place, layer_norm_row};
use crate::nn::tensor::{dot, softmax_in_place};
use crate::nn::{NllRow, ParamId, ParamStore, Tape, Tensor, Var};
use crate::semantics::{RuleSet, SemanticContext};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of length {len} exceeds the model context of {max}")]
    ContextLength { len: usize, max: usize },
    #[error("all productions are masked")]
    EmptyMask,
    #[error("mask length {found} does not match {expected} productions")]
    MaskLength { expected: usize, found: usize },
    #[error("production {0} is out of range")]
    UnknownProduction(usize),
    #[error("expected {expected} features, got {found}")]
    FeatureCount { expected: usize, found: usize },
    #[error("derivation exceeded {0} steps")]
    StepCap(usize),
    #[error(transparent)]
    Decode(DecodeError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint grammar digest {found} does not match {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<DecodeError> for ModelError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::Derivation(DerivationError::StepCap(n)) => ModelError::StepCap(n),
            e => ModelError::Decode(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig { layers: 6, heads: 4, d_model: 128, d_ff: 512, max_len: DEFAULT_MAX_DERIVATION_STEPS }
    }

    pub fn desk() -> Self {
        ModelConfig { layers: 2, heads: 2, d_model: 32, d_ff: 64, max_len: DEFAULT_MAX_DERIVATION_STEPS }
    }

    /// One layer, width 8; small enough for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig { layers: 1, heads: 2, d_model: 8, d_ff: 16, max_len: 64 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(ModelError::Config("all sizes must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Paper,
    Desk,
    /// Smoke tests only.
    Tiny,
}

impl Profile {
    pub fn parse(s: &str) -> Option<Profile> {
        match s.to_ascii_lowercase().as_str() {
            "paper" => Some(Profile::Paper),
            "desk" => Some(Profile::Desk),
            "tiny" => Some(Profile::Tiny),
            _ => None,
        }
    }

    pub fn config(self) -> ModelConfig {
        match self {
            Profile::Paper => ModelConfig::paper(),
            Profile::Desk => ModelConfig::desk(),
            Profile::Tiny => ModelConfig::tiny(),
        }
    }
}

/// Draw from the fixed prior `N(0, I_d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSample {
    pub z: Vec<f64>,
}

impl PriorSample {
    pub fn draw<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        PriorSample { z: Tensor::randn(1, d, 1.0, rng).data }
    }

    pub fn zeros(d: usize) -> Self {
        PriorSample { z: vec![0.0; d] }
    }

    fn tensor(&self) -> Tensor {
        Tensor::from_vec(1, self.z.len(), self.z.clone())
    }
}

/// Dropout source for a training-mode forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct EncoderLayer {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct DecoderLayer {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    cross: Attention,
    ln3: Norm,
    ff1: Linear,
    ff2: Linear,
}

struct Init<'a, R: Rng + ?Sized> {
    store: ParamStore,
    rng: &'a mut R,
}

impl<R: Rng + ?Sized> Init<'_, R> {
    fn randn(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let t = Tensor::randn(rows, cols, std, self.rng);
        self.store.add(name, t)
    }

    fn filled(&mut self, name: String, rows: usize, cols: usize, v: f64) -> ParamId {
        self.store.add(name, Tensor::filled(rows, cols, v))
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> Linear {
        Linear { w: self.randn(format!("{name}.w"), i, o, (1.0 / i as f64).sqrt()), b: self.filled(format!("{name}.b"), 1, o, 0.0) }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm { g: self.filled(format!("{name}.g"), 1, d, 1.0), b: self.filled(format!("{name}.b"), 1, d, 0.0) }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn encoder_layer(&mut self, name: &str, c: &ModelConfig) -> EncoderLayer {
        EncoderLayer {
            ln1: self.norm(&format!("{name}.ln1"), c.d_model),
            attn: self.attention(&format!("{name}.attn"), c.d_model),
            ln2: self.norm(&format!("{name}.ln2"), c.d_model),
            ff1: self.linear(&format!("{name}.ff1"), c.d_model, c.d_ff),
            ff2: self.linear(&format!("{name}.ff2"), c.d_ff, c.d_model),
        }
    }

    fn decoder_layer(&mut self, name: &str, c: &ModelConfig) -> DecoderLayer {
        DecoderLayer {
            ln1: self.norm(&format!("{name}.ln1"), c.d_model),
            attn: self.attention(&format!("{name}.attn"), c.d_model),
            ln2: self.norm(&format!("{name}.ln2"), c.d_model),
            cross: self.attention(&format!("{name}.cross"), c.d_model),
            ln3: self.norm(&format!("{name}.ln3"), c.d_model),
            ff1: self.linear(&format!("{name}.ff1"), c.d_model, c.d_ff),
            ff2: self.linear(&format!("{name}.ff2"), c.d_ff, c.d_model),
        }
    }
}

/// Forward-pass builder shared by both networks.
struct Cx<'s, 'r> {
    tape: Tape,
    store: &'s ParamStore,
    heads: usize,
    dropout: Option<Dropout<'r>>,
}

impl<'s, 'r> Cx<'s, 'r> {
    fn new(store: &'s ParamStore, heads: usize, dropout: Option<Dropout<'r>>) -> Self {
        Cx { tape: Tape::new(), store, heads, dropout }
    }

    fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    fn linear(&mut self, x: Var, l: Linear) -> Var {
        let w = self.p(l.w);
        let b = self.p(l.b);
        let h = self.tape.matmul(x, w);
        self.tape.add_bias(h, b)
    }

    fn norm(&mut self, x: Var, n: Norm) -> Var {
        let g = self.p(n.g);
        let b = self.p(n.b);
        self.tape.layer_norm(x, g, b)
    }

    fn drop(&mut self, x: Var) -> Var {
        let Some(d) = self.dropout.as_mut() else { return x };
        if d.rate <= 0.0 {
            return x;
        }
        let (rows, cols) = self.tape.value(x).shape();
        let keep = 1.0 - d.rate;
        let data = (0..rows * cols).map(|_| if d.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let m = self.tape.input(Tensor::from_vec(rows, cols, data));
        self.tape.mul(x, m)
    }

    fn attention(&mut self, xq: Var, xkv: Var, a: Attention, causal: bool) -> Var {
        let q = self.linear(xq, a.q);
        let k = self.linear(xkv, a.k);
        let v = self.linear(xkv, a.v);
        let d = self.tape.value(q).cols;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (self.tape.slice_cols(q, h * dh, dh), self.tape.slice_cols(k, h * dh, dh), self.tape.slice_cols(v, h * dh, dh))
            };
            let s = self.tape.matmul_bt(qh, kh);
            let p = self.tape.softmax(s, scale, causal);
            outs.push(self.tape.matmul(p, vh));
        }
        let o = if outs.len() == 1 { outs[0] } else { self.tape.concat_cols(&outs) };
        self.linear(o, a.o)
    }

    fn ffn(&mut self, x: Var, ff1: Linear, ff2: Linear) -> Var {
        let h = self.linear(x, ff1);
        let h = self.tape.gelu(h);
        self.linear(h, ff2)
    }

    fn residual(&mut self, x: Var, y: Var) -> Var {
        let y = self.drop(y);
        self.tape.add(x, y)
    }

    fn encoder(&mut self, mut x: Var, layers: &[EncoderLayer]) -> Var {
        for l in layers {
            let h = self.norm(x, l.ln1);
            let a = self.attention(h, h, l.attn, false);
            x = self.residual(x, a);
            let h = self.norm(x, l.ln2);
            let f = self.ffn(h, l.ff1, l.ff2);
            x = self.residual(x, f);
        }
        x
    }
}

fn range(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Probabilities over all productions from raw logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut v = logits.to_vec();
    softmax_in_place(&mut v);
    v
}

/// Zeroes masked entries and renormalizes the survivors.
pub fn masked_probabilities(v: &[f64], syntax_mask: &[bool], sem_mask: &[bool]) -> Result<Vec<f64>, ModelError> {
    for m in [syntax_mask, sem_mask] {
        if m.len() != v.len() {
            return Err(ModelError::MaskLength { expected: v.len(), found: m.len() });
        }
    }
    let mut out: Vec<f64> = v.iter().zip(syntax_mask.iter().zip(sem_mask)).map(|(&p, (&a, &b))| if a && b { p } else { 0.0 }).collect();
    let total: f64 = out.iter().sum();
    if !syntax_mask.iter().zip(sem_mask).any(|(a, b)| *a && *b) {
        return Err(ModelError::EmptyMask);
    }
    if total > 0.0 {
        out.iter_mut().for_each(|p| *p /= total);
    } else {
        // all surviving entries underflowed: spread uniformly over them
        let n = syntax_mask.iter().zip(sem_mask).filter(|(a, b)| **a && **b).count() as f64;
        for (i, p) in out.iter_mut().enumerate() {
            *p = if syntax_mask[i] && sem_mask[i] { 1.0 / n } else { 0.0 };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GeneratorIds {
    embed: ParamId,
    pos: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    final_norm: Norm,
    out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    pub config: ModelConfig,
    pub num_productions: usize,
    pub params: ParamStore,
    ids: GeneratorIds,
}

impl GeneratorModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, num_productions: usize, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let mut init = Init { store: ParamStore::default(), rng };
        let embed = init.randn("embed".into(), num_productions + 1, d, 0.1);
        let pos = init.randn("pos".into(), config.max_len, d, 0.1);
        let encoder = (0..config.layers).map(|i| init.encoder_layer(&format!("enc.{i}"), &config)).collect();
        let enc_norm = init.norm("enc.norm", d);
        let decoder = (0..config.layers).map(|i| init.decoder_layer(&format!("dec.{i}"), &config)).collect();
        let final_norm = init.norm("dec.norm", d);
        let out = init.linear("out", d, num_productions);
        let ids = GeneratorIds { embed, pos, encoder, enc_norm, decoder, final_norm, out };
        Ok(GeneratorModel { config, num_productions, params: init.store, ids })
    }

    /// Index of the begin-of-sequence embedding row.
    pub fn bos(&self) -> usize {
        self.num_productions
    }

    pub fn zero_output_projection(&mut self) {
        self.params.tensors[self.ids.out.w].scale(0.0);
        self.params.tensors[self.ids.out.b].scale(0.0);
    }

    fn forward(&self, cx: &mut Cx, z: &PriorSample, inputs: &[usize]) -> Var {
        let zin = cx.tape.input(z.tensor());
        let mem = cx.encoder(zin, &self.ids.encoder);
        let mem = cx.norm(mem, self.ids.enc_norm);
        let embed = cx.p(self.ids.embed);
        let pos = cx.p(self.ids.pos);
        let e = cx.tape.gather(embed, inputs);
        let p = cx.tape.gather(pos, &range(inputs.len()));
        let x = cx.tape.add(e, p);
        let mut x = cx.drop(x);
        for l in &self.ids.decoder {
            let h = cx.norm(x, l.ln1);
            let a = cx.attention(h, h, l.attn, true);
            x = cx.residual(x, a);
            let h = cx.norm(x, l.ln2);
            let c = cx.attention(h, mem, l.cross, false);
            x = cx.residual(x, c);
            let h = cx.norm(x, l.ln3);
            let f = cx.ffn(h, l.ff1, l.ff2);
            x = cx.residual(x, f);
        }
        let x = cx.norm(x, self.ids.final_norm);
        cx.linear(x, self.ids.out)
    }

    fn decoder_inputs(&self, seq: &[ProductionId]) -> Result<Vec<usize>, ModelError> {
        if seq.len() > self.config.max_len {
            return Err(ModelError::ContextLength { len: seq.len(), max: self.config.max_len });
        }
        if let Some(&p) = seq.iter().find(|&&p| p >= self.num_productions) {
            return Err(ModelError::UnknownProduction(p));
        }
        let mut inputs = Vec::with_capacity(seq.len());
        inputs.push(self.bos());
        inputs.extend(seq.iter().take(seq.len().saturating_sub(1)));
        Ok(inputs)
    }

    /// Next-production distribution `V^t` after `prefix`, before masking.
    pub fn generator_logits(&self, z: &PriorSample, prefix: &[ProductionId]) -> Result<Vec<f64>, ModelError> {
        if prefix.len() >= self.config.max_len {
            return Err(ModelError::ContextLength { len: prefix.len() + 1, max: self.config.max_len });
        }
        let mut inputs = vec![self.bos()];
        inputs.extend_from_slice(prefix);
        if let Some(&p) = prefix.iter().find(|&&p| p >= self.num_productions) {
            return Err(ModelError::UnknownProduction(p));
        }
        let mut cx = Cx::new(&self.params, self.config.heads, None);
        let out = self.forward(&mut cx, z, &inputs);
        let logits = cx.tape.value(out);
        Ok(softmax(logits.row(logits.rows - 1)))
    }

    /// Teacher-forced loss `sum_t w_t * -log p(s_t | s_<t) / norm` over the
    /// masked candidate sets in `rows` (one per position of `seq`). Adds
    /// parameter gradients into `grads` when given and returns the loss.
    pub fn sequence_loss(
        &self,
        z: &PriorSample,
        seq: &[ProductionId],
        rows: Vec<NllRow>,
        norm: f64,
        dropout: Option<Dropout>,
        grads: Option<&mut [Tensor]>,
    ) -> Result<f64, ModelError> {
        assert_eq!(rows.len(), seq.len(), "one loss row per position");
        let inputs = self.decoder_inputs(seq)?;
        let mut cx = Cx::new(&self.params, self.config.heads, dropout);
        let logits = self.forward(&mut cx, z, &inputs);
        let loss = cx.tape.masked_nll(logits, rows, norm);
        let value = cx.tape.value(loss).item();
        if let Some(g) = grads {
            cx.tape.backward(loss);
            cx.tape.accumulate_param_grads(g, 1.0);
        }
        Ok(value)
    }

    /// Fresh incremental decoding state for prior sample `z`.
    pub fn session(&self, z: &PriorSample) -> GenSession {
        let mut cx = Cx::new(&self.params, self.config.heads, None);
        let zin = cx.tape.input(z.tensor());
        let mem = cx.encoder(zin, &self.ids.encoder);
        let mem = cx.norm(mem, self.ids.enc_norm);
        let mem = cx.tape.value(mem).clone();
        let p = &self.params.tensors;
        let cross = self
            .ids
            .decoder
            .iter()
            .map(|l| (linear_rows(&mem, &p[l.cross.k.w], &p[l.cross.k.b]), linear_rows(&mem, &p[l.cross.v.w], &p[l.cross.v.b])))
            .collect();
        let cache = vec![(Vec::new(), Vec::new()); self.ids.decoder.len()];
        GenSession { cross, cache, len: 0 }
    }

    /// Feeds one input token and returns the final hidden state at its position.
    pub fn step(&self, s: &mut GenSession, token: usize) -> Result<Vec<f64>, ModelError> {
        if s.len >= self.config.max_len {
            return Err(ModelError::ContextLength { len: s.len + 1, max: self.config.max_len });
        }
        let p = &self.params.tensors;
        let d = self.config.d_model;
        let mut x: Vec<f64> = p[self.ids.embed].row(token).iter().zip(p[self.ids.pos].row(s.len)).map(|(a, b)| a + b).collect();
        let mut h = vec![0.0; d];
        for (i, l) in self.ids.decoder.iter().enumerate() {
            layer_norm_row(&x, &p[l.ln1.g].data, &p[l.ln1.b].data, &mut h);
            let q = linear_row(&h, &p[l.attn.q.w], &p[l.attn.q.b]);
            let (kc, vc) = &mut s.cache[i];
            kc.extend(linear_row(&h, &p[l.attn.k.w], &p[l.attn.k.b]));
            vc.extend(linear_row(&h, &p[l.attn.v.w], &p[l.attn.v.b]));
            let a = attend_row(&q, kc, vc, d, self.config.heads);
            add_into(&mut x, &linear_row(&a, &p[l.attn.o.w], &p[l.attn.o.b]));

            layer_norm_row(&x, &p[l.ln2.g].data, &p[l.ln2.b].data, &mut h);
            let q = linear_row(&h, &p[l.cross.q.w], &p[l.cross.q.b]);
            let (ck, cv) = &s.cross[i];
            let a = attend_row(&q, &ck.data, &cv.data, d, self.config.heads);
            add_into(&mut x, &linear_row(&a, &p[l.cross.o.w], &p[l.cross.o.b]));

            layer_norm_row(&x, &p[l.ln3.g].data, &p[l.ln3.b].data, &mut h);
            let mut f = linear_row(&h, &p[l.ff1.w], &p[l.ff1.b]);
            gelu_in_place(&mut f);
            add_into(&mut x, &linear_row(&f, &p[l.ff2.w], &p[l.ff2.b]));
        }
        layer_norm_row(&x, &p[self.ids.final_norm.g].data, &p[self.ids.final_norm.b].data, &mut h);
        s.len += 1;
        Ok(h)
    }

    /// Logits of `candidates` from a final hidden state.
    pub fn candidate_logits(&self, hidden: &[f64], candidates: &[ProductionId]) -> Vec<f64> {
        let w = &self.params.tensors[self.ids.out.w];
        let b = &self.params.tensors[self.ids.out.b];
        candidates.iter().map(|&c| b.data[c] + hidden.iter().enumerate().map(|(k, h)| h * w.data[k * w.cols + c]).sum::<f64>()).collect()
    }
}

fn linear_row(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut out = b.data.clone();
    for (k, &a) in x.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(w.row(k)) {
            *o += a * wv;
        }
    }
    out
}

fn linear_rows(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut out = x.matmul(w);
    for i in 0..out.rows {
        for (o, bv) in out.row_mut(i).iter_mut().zip(&b.data) {
            *o += bv;
        }
    }
    out
}

fn add_into(x: &mut [f64], y: &[f64]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

/// Multi-head attention of one query row over flat row-major keys and values.
fn attend_row(q: &[f64], keys: &[f64], values: &[f64], d: usize, heads: usize) -> Vec<f64> {
    let n = keys.len() / d;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; d];
    let mut s = vec![0.0; n];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        for (j, sj) in s.iter_mut().enumerate() {
            *sj = dot(&q[r.clone()], &keys[j * d + r.start..j * d + r.end]) * scale;
        }
        softmax_in_place(&mut s);
        for (j, &pj) in s.iter().enumerate() {
            for (o, &v) in out[r.clone()].iter_mut().zip(&values[j * d + r.start..j * d + r.end]) {
                *o += pj * v;
            }
        }
    }
    out
}

/// Key/value cache of an incremental generator pass.
#[derive(Debug, Clone)]
pub struct GenSession {
    cross: Vec<(Tensor, Tensor)>,
    cache: Vec<(Vec<f64>, Vec<f64>)>,
    len: usize,
}

impl GenSession {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    Sample,
    Greedy,
}

/// A generator episode: derivation and semantic state plus decoder cache.
/// Cloning it forks the episode, which is how rollouts continue a prefix.
#[derive(Debug, Clone)]
pub struct Decoder<'m> {
    model: &'m GeneratorModel,
    session: GenSession,
    episode: Episode,
    hidden: Vec<f64>,
    log_prob: f64,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m GeneratorModel, ctx: &Arc<SemanticContext>, rules: RuleSet, z: &PriorSample) -> Result<Self, ModelError> {
        let max_steps = model.config.max_len.min(DEFAULT_MAX_DERIVATION_STEPS);
        let mut session = model.session(z);
        let hidden = model.step(&mut session, model.bos())?;
        Ok(Decoder { model, session, episode: Episode::new(ctx, rules).with_max_steps(max_steps), hidden, log_prob: 0.0 })
    }

    pub fn episode(&self) -> &Episode {
        &self.episode
    }

    pub fn is_complete(&self) -> bool {
        self.episode.is_complete()
    }

    pub fn sequence(&self) -> &[ProductionId] {
        self.episode.sequence()
    }

    /// Sum of log-probabilities of the choices made so far under the masked distribution.
    pub fn log_prob(&self) -> f64 {
        self.log_prob
    }

    /// Surviving candidates and their renormalized probabilities.
    pub fn distribution(&self) -> Result<(Vec<ProductionId>, Vec<f64>), ModelError> {
        let c = self.episode.candidates();
        if c.is_empty() {
            return Err(ModelError::EmptyMask);
        }
        let mut p = self.model.candidate_logits(&self.hidden, &c);
        softmax_in_place(&mut p);
        Ok((c, p))
    }

    /// Applies `p` (must survive both masks) and advances the decoder.
    pub fn push(&mut self, p: ProductionId) -> Result<(), ModelError> {
        let (c, probs) = self.distribution()?;
        let Some(k) = c.iter().position(|&x| x == p) else {
            return Err(ModelError::Decode(DecodeError::Masked { step: self.sequence().len(), production: p }));
        };
        self.log_prob += probs[k].ln();
        self.advance(p)
    }

    fn advance(&mut self, p: ProductionId) -> Result<(), ModelError> {
        self.episode.apply(p)?;
        if !self.episode.is_complete() {
            if self.session.len() >= self.model.config.max_len {
                return Err(ModelError::StepCap(self.session.len()));
            }
            self.hidden = self.model.step(&mut self.session, p)?;
        }
        Ok(())
    }

    /// Chooses and applies one production; returns the candidate set and the
    /// index chosen from it.
    pub fn sample_step<R: Rng + ?Sized>(
        &mut self,
        mode: SamplingMode,
        rng: &mut R,
    ) -> Result<(Vec<ProductionId>, usize), ModelError> {
        let (c, probs) = self.distribution()?;
        let k = if c.len() == 1 {
            0
        } else {
            match mode {
                SamplingMode::Greedy => {
                    probs.iter().enumerate().fold(0, |best, (i, &p)| if p > probs[best] { i } else { best })
                }
                SamplingMode::Sample => {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut k = probs.len() - 1;
                    for (i, &p) in probs.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            k = i;
                            break;
                        }
                    }
                    k
                }
            }
        };
        self.log_prob += probs[k].ln();
        self.advance(c[k])?;
        Ok((c, k))
    }

    /// Samples until the derivation completes.
    pub fn finish<R: Rng + ?Sized>(mut self, mode: SamplingMode, rng: &mut R) -> Result<SampledSequence, ModelError> {
        while !self.is_complete() {
            self.sample_step(mode, rng)?;
        }
        Ok(SampledSequence { sequence: self.episode.sequence().to_vec(), text: self.episode.render(), log_prob: self.log_prob })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledSequence {
    pub sequence: Vec<ProductionId>,
    pub text: String,
    pub log_prob: f64,
}

/// One complete masked sample from the generator.
pub fn sample_sequence<R: Rng + ?Sized>(
    gen: &GeneratorModel,
    ctx: &Arc<SemanticContext>,
    rules: RuleSet,
    z: &PriorSample,
    mode: SamplingMode,
    rng: &mut R,
) -> Result<SampledSequence, ModelError> {
    Decoder::new(gen, ctx, rules, z)?.finish(mode, rng)
}

/// `n` samples, each with a fresh prior draw; step-cap failures are skipped
/// and counted. Gives up after `n` consecutive failures.
pub fn generate<R: Rng + ?Sized>(
    gen: &GeneratorModel,
    ctx: &Arc<SemanticContext>,
    rules: RuleSet,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<SampledSequence>, usize), ModelError> {
    let mut out = Vec::with_capacity(n);
    let mut capped = 0;
    let mut streak = 0;
    while out.len() < n {
        let z = PriorSample::draw(gen.config.d_model, rng);
        match sample_sequence(gen, ctx, rules, &z, SamplingMode::Sample, rng) {
            Ok(s) => {
                out.push(s);
                streak = 0;
            }
            Err(ModelError::StepCap(_)) | Err(ModelError::ContextLength { .. }) => {
                capped += 1;
                streak += 1;
                if streak > n.max(16) {
                    return Err(ModelError::StepCap(gen.config.max_len));
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok((out, capped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DiscriminatorIds {
    embed: ParamId,
    pos: ParamId,
    feat: Linear,
    encoder: Vec<EncoderLayer>,
    norm: Norm,
    head: Linear,
}

/// Sequence classifier over `[f_1..f_n, p_1..p_T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorModel {
    pub config: ModelConfig,
    pub num_productions: usize,
    pub num_features: usize,
    pub params: ParamStore,
    ids: DiscriminatorIds,
}

impl DiscriminatorModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, num_productions: usize, num_features: usize, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let mut init = Init { store: ParamStore::default(), rng };
        let embed = init.randn("embed".into(), num_productions, d, 0.1);
        let pos = init.randn("pos".into(), config.max_len + num_features, d, 0.1);
        let feat = init.linear("feat", 1, d);
        let encoder = (0..config.layers).map(|i| init.encoder_layer(&format!("enc.{i}"), &config)).collect();
        let norm = init.norm("norm", d);
        let head = init.linear("head", d, 1);
        let ids = DiscriminatorIds { embed, pos, feat, encoder, norm, head };
        Ok(DiscriminatorModel { config, num_productions, num_features, params: init.store, ids })
    }

    pub fn zero_head(&mut self) {
        self.params.tensors[self.ids.head.w].scale(0.0);
        self.params.tensors[self.ids.head.b].scale(0.0);
    }

    fn check(&self, seq: &[ProductionId], feats: &[f64]) -> Result<(), ModelError> {
        if feats.len() != self.num_features {
            return Err(ModelError::FeatureCount { expected: self.num_features, found: feats.len() });
        }
        if seq.len() > self.config.max_len {
            return Err(ModelError::ContextLength { len: seq.len(), max: self.config.max_len });
        }
        if let Some(&p) = seq.iter().find(|&&p| p >= self.num_productions) {
            return Err(ModelError::UnknownProduction(p));
        }
        Ok(())
    }

    /// Token embeddings of the input before positions are added.
    fn embed(&self, cx: &mut Cx, seq: &[ProductionId], feats: &[f64]) -> Var {
        let f = cx.tape.input(Tensor::from_vec(feats.len(), 1, feats.to_vec()));
        let f = cx.linear(f, self.ids.feat);
        if seq.is_empty() {
            return f;
        }
        let table = cx.p(self.ids.embed);
        let e = cx.tape.gather(table, seq);
        cx.tape.concat_rows(&[f, e])
    }

    /// Logit from token embeddings (`rows x d_model`).
    fn logit_from(&self, cx: &mut Cx, e: Var) -> Var {
        let n = cx.tape.value(e).rows;
        let pos = cx.p(self.ids.pos);
        let p = cx.tape.gather(pos, &range(n));
        let x = cx.tape.add(e, p);
        let x = cx.drop(x);
        let x = cx.encoder(x, &self.ids.encoder);
        let x = cx.norm(x, self.ids.norm);
        let pooled = cx.tape.mean_rows(x);
        cx.linear(pooled, self.ids.head)
    }

    /// Pooled encoder output; always `1 x d_model`.
    pub fn pooled(&self, seq: &[ProductionId], feats: &[f64]) -> Result<Tensor, ModelError> {
        self.check(seq, feats)?;
        let mut cx = Cx::new(&self.params, self.config.heads, None);
        let e = self.embed(&mut cx, seq, feats);
        let n = cx.tape.value(e).rows;
        let pos = cx.p(self.ids.pos);
        let p = cx.tape.gather(pos, &range(n));
        let x = cx.tape.add(e, p);
        let x = cx.encoder(x, &self.ids.encoder);
        let x = cx.norm(x, self.ids.norm);
        let pooled = cx.tape.mean_rows(x);
        Ok(cx.tape.value(pooled).clone())
    }

    pub fn logit(&self, seq: &[ProductionId], feats: &[f64]) -> Result<f64, ModelError> {
        self.check(seq, feats)?;
        let mut cx = Cx::new(&self.params, self.config.heads, None);
        let e = self.embed(&mut cx, seq, feats);
        let z = self.logit_from(&mut cx, e);
        Ok(cx.tape.value(z).item())
    }

    /// `ŷ = σ(logit)` for a production sequence with normalized features.
    pub fn score(&self, seq: &[ProductionId], feats: &[f64]) -> Result<f64, ModelError> {
        self.logit(seq, feats).map(crate::nn::sigmoid)
    }

    /// `weight * BCE(ŷ, label)`; adds parameter gradients into `grads`.
    /// Returns `(loss, logit)`.
    pub fn bce_loss(
        &self,
        seq: &[ProductionId],
        feats: &[f64],
        label: f64,
        weight: f64,
        dropout: Option<Dropout>,
        grads: Option<&mut [Tensor]>,
    ) -> Result<(f64, f64), ModelError> {
        self.check(seq, feats)?;
        let mut cx = Cx::new(&self.params, self.config.heads, dropout);
        let e = self.embed(&mut cx, seq, feats);
        let z = self.logit_from(&mut cx, e);
        let loss = cx.tape.bce_logit(z, label, weight);
        let out = (cx.tape.value(loss).item(), cx.tape.value(z).item());
        if let Some(g) = grads {
            cx.tape.backward(loss);
            cx.tape.accumulate_param_grads(g, 1.0);
        }
        Ok(out)
    }

    fn embedding_matrix(&self, seq: &[ProductionId], feats: &[f64], rows: usize) -> Tensor {
        let mut cx = Cx::new(&self.params, self.config.heads, None);
        let e = self.embed(&mut cx, seq, feats);
        let v = cx.tape.value(e);
        let mut out = Tensor::zeros(rows, v.cols);
        out.data[..v.len()].copy_from_slice(&v.data);
        out
    }

    /// Logit and its gradient with respect to an explicit embedding matrix.
    pub fn input_gradient(&self, e: &Tensor) -> (f64, Tensor) {
        let mut cx = Cx::new(&self.params, self.config.heads, None);
        let ev = cx.tape.input(e.clone());
        let z = self.logit_from(&mut cx, ev);
        cx.tape.backward(z);
        (cx.tape.value(z).item(), cx.tape.grad(ev).cloned().unwrap_or_else(|| Tensor::zeros(e.rows, e.cols)))
    }

    fn param_grad_at(&self, e: &Tensor, seed: f64, grads: &mut [Tensor]) {
        let mut cx = Cx::new(&self.params, self.config.heads, None);
        let ev = cx.tape.input(e.clone());
        let z = self.logit_from(&mut cx, ev);
        cx.tape.backward_with(z, seed);
        cx.tape.accumulate_param_grads(grads, 1.0);
    }

    /// Gradient penalty `coef * (‖∇_ê D(ê)‖ - 1)^2` at `ê = α e_real + (1-α) e_fake`,
    /// the shorter embedding matrix zero-padded to the longer. The parameter
    /// gradient is a central difference of `∇_θ D` along the unit input gradient.
    pub fn gradient_penalty(
        &self,
        real: (&[ProductionId], &[f64]),
        fake: (&[ProductionId], &[f64]),
        alpha: f64,
        coef: f64,
        grads: Option<&mut [Tensor]>,
    ) -> Result<f64, ModelError> {
        self.check(real.0, real.1)?;
        self.check(fake.0, fake.1)?;
        let rows = self.num_features + real.0.len().max(fake.0.len());
        let mut e = self.embedding_matrix(real.0, real.1, rows);
        e.scale(alpha);
        e.add_scaled(&self.embedding_matrix(fake.0, fake.1, rows), 1.0 - alpha);
        let (_, g) = self.input_gradient(&e);
        let norm = g.sq_norm().sqrt();
        let penalty = coef * (norm - 1.0).powi(2);
        if let Some(out) = grads {
            if norm > 0.0 {
                let eps = 1e-6;
                let factor = 2.0 * coef * (norm - 1.0) / (2.0 * eps);
                let mut plus = e.clone();
                plus.add_scaled(&g, eps / norm);
                let mut minus = e;
                minus.add_scaled(&g, -eps / norm);
                self.param_grad_at(&plus, factor, out);
                self.param_grad_at(&minus, -factor, out);
            }
        }
        Ok(penalty)
    }
}

/// log1p followed by min-max scaling, fitted per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

fn log1p_signed(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

impl FeatureNormalizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let n = rows.first().map_or(0, Vec::len);
        let mut min = vec![f64::INFINITY; n];
        let mut max = vec![f64::NEG_INFINITY; n];
        for r in rows {
            for (i, &x) in r.iter().enumerate() {
                let v = log1p_signed(x);
                min[i] = min[i].min(v);
                max[i] = max[i].max(v);
            }
        }
        FeatureNormalizer { min, max }
    }

    pub fn identity(n: usize) -> Self {
        FeatureNormalizer { min: vec![0.0; n], max: vec![1f64.ln_1p(); n] }
    }

    pub fn len(&self) -> usize {
        self.min.len()
    }

    pub fn is_empty(&self) -> bool {
        self.min.is_empty()
    }

    /// Training-range values map into `[0, 1]`; constant features map to 0.
    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(i, &x)| {
                let span = self.max[i] - self.min[i];
                if span > 0.0 && span.is_finite() {
                    (log1p_signed(x) - self.min[i]) / span
                } else {
                    0.0
                }
            })
            .collect()
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"QGENCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    grammar_digest: String,
    num_productions: usize,
    num_features: usize,
    generator: ModelConfig,
    discriminator: ModelConfig,
    normalizer: FeatureNormalizer,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorHeader>,
}

/// Both networks, the feature normalization and free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub grammar_digest: String,
    pub generator: GeneratorModel,
    pub discriminator: DiscriminatorModel,
    pub normalizer: FeatureNormalizer,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = [("gen", &self.generator.params), ("disc", &self.discriminator.params)]
            .iter()
            .flat_map(|(prefix, store)| {
                store.names.iter().zip(&store.tensors).map(move |(n, t)| TensorHeader { name: format!("{prefix}.{n}"), rows: t.rows, cols: t.cols })
            })
            .collect();
        let header = CheckpointHeader {
            grammar_digest: self.grammar_digest.clone(),
            num_productions: self.generator.num_productions,
            num_features: self.discriminator.num_features,
            generator: self.generator.config,
            discriminator: self.discriminator.config,
            normalizer: self.normalizer.clone(),
            metadata: self.metadata.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for store in [&self.generator.params, &self.discriminator.params] {
            for t in &store.tensors {
                for x in &t.data {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    /// Decodes a checkpoint; with `expected_digest`, refuses other grammars.
    pub fn from_bytes(bytes: &[u8], expected_digest: Option<&str>) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if let Some(expected) = expected_digest {
            if expected != header.grammar_digest {
                return Err(ModelError::DigestMismatch { expected: expected.to_string(), found: header.grammar_digest });
            }
        }
        // Structure comes from the configs; weights are then overwritten.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut generator = GeneratorModel::new(header.generator, header.num_productions, &mut rng)?;
        let mut discriminator = DiscriminatorModel::new(header.discriminator, header.num_productions, header.num_features, &mut rng)?;
        let mut data = &bytes[20 + hlen..];
        let mut th = header.tensors.iter();
        for (prefix, store) in [("gen", &mut generator.params), ("disc", &mut discriminator.params)] {
            for (name, t) in store.names.iter().zip(store.tensors.iter_mut()) {
                let h = th.next().ok_or_else(|| bad("missing tensors"))?;
                if h.name != format!("{prefix}.{name}") || h.rows != t.rows || h.cols != t.cols {
                    return Err(ModelError::Checkpoint(format!("tensor {} does not match {prefix}.{name}", h.name)));
                }
                let n = t.len() * 8;
                let chunk = data.get(..n).ok_or_else(|| bad("truncated tensor data"))?;
                for (x, b) in t.data.iter_mut().zip(chunk.chunks_exact(8)) {
                    *x = f64::from_le_bytes(b.try_into().unwrap());
                }
                data = &data[n..];
            }
        }
        if th.next().is_some() || !data.is_empty() {
            return Err(bad("trailing tensor data"));
        }
        Ok(Checkpoint {
            grammar_digest: header.grammar_digest,
            generator,
            discriminator,
            normalizer: header.normalizer,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, expected_digest: Option<&str>) -> Result<Self, ModelError> {
        Checkpoint::from_bytes(&std::fs::read(path)?, expected_digest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::teacher_forcing_candidates;
    use crate::fixtures::{synthetic_database, synthetic_workload, WorkloadShape};
    use crate::grammar::DEFAULT_SQL_GRAMMAR;
    use crate::preprocess::preprocess_workload;
    use crate::semantics::BoundGrammar;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bound() -> BoundGrammar {
        let db = synthetic_database(5, 1);
        let raw = synthetic_workload(&db, 40, WorkloadShape::Mixed, 1);
        let (_, map) = preprocess_workload(&raw, db.schema(), 4).unwrap();
        BoundGrammar::new(DEFAULT_SQL_GRAMMAR, db.schema(), Arc::new(map)).unwrap()
    }

    #[test]
    fn masked_probability_examples() {
        let u = vec![0.25; 4];
        let all = vec![true; 4];
        assert_eq!(masked_probabilities(&u, &[true, true, false, false], &all).unwrap(), vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(masked_probabilities(&u, &all, &all).unwrap(), u);
        assert_eq!(masked_probabilities(&[0.7, 0.3], &[false, true], &[true, true]).unwrap(), vec![0.0, 1.0]);
        assert!(matches!(masked_probabilities(&u, &[true, false, true, false], &[false, true, false, true]), Err(ModelError::EmptyMask)));
    }

    #[test]
    fn generator_distribution_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = GeneratorModel::new(ModelConfig::tiny(), 12, &mut rng).unwrap();
        let z = PriorSample::draw(8, &mut rng);
        let v = g.generator_logits(&z, &[3, 4, 5]).unwrap();
        assert_eq!(v.len(), 12);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(v, g.generator_logits(&z, &[3, 4, 5]).unwrap());
        assert!(matches!(g.generator_logits(&z, &vec![0; 64]), Err(ModelError::ContextLength { .. })));
        g.zero_output_projection();
        let v = g.generator_logits(&z, &[1]).unwrap();
        assert!(v.iter().all(|p| (p - 1.0 / 12.0).abs() < 1e-12));
    }

    #[test]
    fn incremental_path_matches_full_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ModelConfig { layers: 2, heads: 2, d_model: 16, d_ff: 24, max_len: 32 };
        let g = GeneratorModel::new(cfg, 9, &mut rng).unwrap();
        let z = PriorSample::draw(16, &mut rng);
        let prefix = [2usize, 7, 7, 0, 8];
        let mut s = g.session(&z);
        let mut h = g.step(&mut s, g.bos()).unwrap();
        for t in 0..=prefix.len() {
            let full = g.generator_logits(&z, &prefix[..t]).unwrap();
            let inc = softmax(&g.candidate_logits(&h, &range(9)));
            for (a, b) in full.iter().zip(&inc) {
                assert!((a - b).abs() < 1e-10, "position {t}");
            }
            if t < prefix.len() {
                h = g.step(&mut s, prefix[t]).unwrap();
            }
        }
    }

    #[test]
    fn mle_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = GeneratorModel::new(ModelConfig::tiny(), 7, &mut rng).unwrap();
        let z = PriorSample::draw(8, &mut rng);
        let seq = [1usize, 4, 2, 6, 0];
        let rows = || {
            vec![
                NllRow { candidates: vec![0, 1, 2], target: 1, weight: 1.0 },
                NllRow { candidates: vec![3, 4], target: 4, weight: 1.0 },
                NllRow { candidates: vec![2], target: 2, weight: 1.0 },
                NllRow { candidates: vec![0, 5, 6], target: 6, weight: 1.0 },
                NllRow { candidates: vec![0, 1, 2, 3, 4, 5, 6], target: 0, weight: 1.0 },
            ]
        };
        let mut grads = g.params.zeros_like();
        g.sequence_loss(&z, &seq, rows(), 5.0, None, Some(&mut grads)).unwrap();
        let h = 1e-5;
        for p in 0..g.params.len() {
            for i in 0..g.params.tensors[p].len() {
                let orig = g.params.tensors[p].data[i];
                g.params.tensors[p].data[i] = orig + h;
                let up = g.sequence_loss(&z, &seq, rows(), 5.0, None, None).unwrap();
                g.params.tensors[p].data[i] = orig - h;
                let down = g.sequence_loss(&z, &seq, rows(), 5.0, None, None).unwrap();
                g.params.tensors[p].data[i] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = grads[p].data[i];
                let rel = (num - ana).abs() / (num.abs() + ana.abs()).max(1e-6);
                assert!(rel < 1e-3 || (num - ana).abs() < 1e-8, "{}[{i}]: {ana} vs {num}", g.params.names[p]);
            }
        }
    }

    #[test]
    fn sampling_respects_masks_and_is_deterministic() {
        let bg = bound();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = GeneratorModel::new(ModelConfig::tiny(), bg.grammar.num_productions(), &mut rng).unwrap();
        for _ in 0..20 {
            let z = PriorSample::draw(8, &mut rng);
            match sample_sequence(&g, &bg.semantics, RuleSet::all(), &z, SamplingMode::Sample, &mut rng) {
                Ok(s) => {
                    let r = bg.validate(&s.text);
                    assert!(r.syntactic && r.semantic, "{} {r:?}", s.text);
                    assert!(s.log_prob <= 0.0);
                }
                Err(ModelError::StepCap(_)) | Err(ModelError::ContextLength { .. }) => {}
                Err(e) => panic!("{e}"),
            }
        }
        let z = PriorSample::zeros(8);
        let mut r1 = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let a = sample_sequence(&g, &bg.semantics, RuleSet::all(), &z, SamplingMode::Greedy, &mut r1);
        let b = sample_sequence(&g, &bg.semantics, RuleSet::all(), &z, SamplingMode::Greedy, &mut r2);
        match (a, b) {
            (Ok(a), Ok(b)) => assert_eq!(a, b),
            (Err(_), Err(_)) => {}
            _ => panic!("greedy decoding diverged"),
        }
    }

    #[test]
    fn teacher_forced_loss_uses_both_masks() {
        let bg = bound();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = GeneratorModel::new(ModelConfig::tiny(), bg.grammar.num_productions(), &mut rng).unwrap();
        let s = baseline_sequence(&bg);
        let cands = teacher_forcing_candidates(&bg.semantics, RuleSet::all(), &s).unwrap();
        let rows: Vec<NllRow> = cands.into_iter().zip(&s).map(|(c, &t)| NllRow { candidates: c, target: t, weight: 1.0 }).collect();
        let z = PriorSample::zeros(8);
        let loss = g.sequence_loss(&z, &s, rows.clone(), 1.0, None, None).unwrap();
        // the same total from the incremental decoder's log-probability
        let mut d = Decoder::new(&g, &bg.semantics, RuleSet::all(), &z).unwrap();
        for &p in &s {
            d.push(p).unwrap();
        }
        assert!((loss + d.log_prob()).abs() < 1e-9);
    }

    fn baseline_sequence(bg: &BoundGrammar) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        crate::baselines::random_generate(&bg.semantics, RuleSet::all(), 1, &mut rng).unwrap().remove(0).sequence
    }

    #[test]
    fn discriminator_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut d = DiscriminatorModel::new(ModelConfig::tiny(), 10, 3, &mut rng).unwrap();
        let f = [0.2, 0.9, 0.0];
        let y = d.score(&[1, 2, 3, 4], &f).unwrap();
        assert!(y > 0.0 && y < 1.0);
        assert_eq!(y, d.score(&[1, 2, 3, 4], &f).unwrap());
        assert_ne!(y, d.score(&[4, 3, 2, 1], &f).unwrap());
        assert_eq!(d.pooled(&[1], &f).unwrap().shape(), (1, 8));
        assert_eq!(d.pooled(&[1, 2, 3, 4, 5, 6], &f).unwrap().shape(), (1, 8));
        assert!(matches!(d.score(&[1], &[0.0]), Err(ModelError::FeatureCount { .. })));
        d.zero_head();
        assert_eq!(d.score(&[5, 5], &f).unwrap(), 0.5);
    }

    #[test]
    fn gradient_penalty_parameter_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut d = DiscriminatorModel::new(ModelConfig::tiny(), 10, 2, &mut rng).unwrap();
        let real = ([1usize, 2, 3], [0.1, 0.5]);
        let fake = ([4usize, 5], [0.9, 0.2]);
        let mut grads = d.params.zeros_like();
        let gp = d.gradient_penalty((&real.0, &real.1), (&fake.0, &fake.1), 0.3, 10.0, Some(&mut grads)).unwrap();
        assert!(gp >= 0.0);
        // Interpolation is held fixed, so the check perturbs parameters of the
        // critic only and keeps the embedding matrix at its base value.
        let rows = 2 + 3;
        let mut e = d.embedding_matrix(&real.0, &real.1, rows);
        e.scale(0.3);
        e.add_scaled(&d.embedding_matrix(&fake.0, &fake.1, rows), 0.7);
        let penalty_at = |d: &DiscriminatorModel| {
            let (_, g) = d.input_gradient(&e);
            10.0 * (g.sq_norm().sqrt() - 1.0).powi(2)
        };
        let h = 1e-5;
        let mut checked = 0;
        for p in 0..d.params.len() {
            if d.params.names[p] == "embed" || d.params.names[p].starts_with("feat") {
                continue;
            }
            for i in (0..d.params.tensors[p].len()).step_by(3) {
                let orig = d.params.tensors[p].data[i];
                d.params.tensors[p].data[i] = orig + h;
                let up = penalty_at(&d);
                d.params.tensors[p].data[i] = orig - h;
                let down = penalty_at(&d);
                d.params.tensors[p].data[i] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = grads[p].data[i];
                assert!((num - ana).abs() <= 1e-4 * (1.0 + num.abs()), "{}[{i}] {ana} vs {num}", d.params.names[p]);
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn normalizer() {
        let n = FeatureNormalizer::fit(&[vec![0.0, 5.0], vec![99.0, 5.0]]);
        assert_eq!(n.normalize(&[0.0, 5.0]), vec![0.0, 0.0]);
        assert!((n.normalize(&[99.0, 7.0])[0] - 1.0).abs() < 1e-12);
        assert!((n.normalize(&[9.0, 0.0])[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_and_digest_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ck = Checkpoint {
            grammar_digest: "abc".into(),
            generator: GeneratorModel::new(ModelConfig::tiny(), 6, &mut rng).unwrap(),
            discriminator: DiscriminatorModel::new(ModelConfig::tiny(), 6, 7, &mut rng).unwrap(),
            normalizer: FeatureNormalizer::identity(7),
            metadata: BTreeMap::from([("k".to_string(), "v".to_string())]),
        };
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes, Some("abc")).unwrap(), ck);
        assert!(matches!(Checkpoint::from_bytes(&bytes, Some("xyz")), Err(ModelError::DigestMismatch { .. })));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], None).is_err());
        assert!(Checkpoint::from_bytes(b"garbage", None).is_err());
    }
}
