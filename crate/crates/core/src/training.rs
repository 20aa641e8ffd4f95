//! Maximum-likelihood pretraining and adversarial training with Monte Carlo
//! rollouts, policy gradients and a gradient penalty on the discriminator.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decoding::{teacher_forcing_candidates, DecodeError};
use crate::grammar::ProductionId;
use crate::metrics::{validity_rates, ValidityRates};
use crate::model::{
    Checkpoint, Decoder, DiscriminatorModel, Dropout, FeatureNormalizer, GeneratorModel, ModelConfig, ModelError, PriorSample,
    SamplingMode,
};
use crate::nn::{clip_grad_norm, Adam, NllRow, Tensor};
use crate::oracle::{featurize_with, FeatureVector, OracleError, QueryOracle, NUM_SCALAR_FEATURES};
use crate::preprocess::{revert, BucketMap};
use crate::semantics::{BoundGrammar, RuleSet};
use crate::sql::parse_sql;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("non-finite {what} in epoch {epoch}")]
    NonFinite { what: &'static str, epoch: usize },
    #[error("query {index} cannot be used for training: {message}")]
    BadExample { index: usize, message: String },
    #[error("every rollout failed")]
    RolloutFailed,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub dropout: f64,
    pub l2_lambda: f64,
    pub gradient_penalty: f64,
    pub rollout_count: usize,
    pub pretrain_epochs: usize,
    pub discriminator_epochs: usize,
    pub adversarial_epochs: usize,
    pub batch_size: usize,
    /// Generated sequences per policy-gradient update.
    pub generator_batch: usize,
    pub seed: u64,
    pub holdout_fraction: f64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr_generator: 0.001,
            lr_discriminator: 0.0001,
            dropout: 0.3,
            l2_lambda: 0.1,
            gradient_penalty: 10.0,
            rollout_count: 8,
            pretrain_epochs: 50,
            discriminator_epochs: 3,
            adversarial_epochs: 10,
            batch_size: 32,
            generator_batch: 16,
            seed: 42,
            holdout_fraction: 0.1,
            checkpoint_every: 0,
            checkpoint_dir: None,
            max_grad_norm: 0.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: &str| Err(TrainingError::Config(m.to_string()));
        if !(self.lr_generator > 0.0 && self.lr_discriminator > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.l2_lambda < 0.0 || self.gradient_penalty < 0.0 || self.max_grad_norm < 0.0 {
            return bad("l2_lambda, gradient_penalty and max_grad_norm must be nonnegative");
        }
        if self.rollout_count == 0 {
            return bad("rollout_count must be at least 1");
        }
        if self.batch_size == 0 || self.generator_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must be in [0, 1)");
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainingError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, TrainingError> {
            v.parse().map_err(|_| TrainingError::Config(format!("bad value for {key}: {v}")))
        }
        match key {
            "lr_generator" | "lr_g" => self.lr_generator = num(key, value)?,
            "lr_discriminator" | "lr_d" => self.lr_discriminator = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "l2_lambda" | "l2" => self.l2_lambda = num(key, value)?,
            "gradient_penalty" | "gp" => self.gradient_penalty = num(key, value)?,
            "rollout_count" | "k" => self.rollout_count = num(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = num(key, value)?,
            "discriminator_epochs" => self.discriminator_epochs = num(key, value)?,
            "adversarial_epochs" => self.adversarial_epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "generator_batch" => self.generator_batch = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "holdout_fraction" => self.holdout_fraction = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "checkpoint_dir" => self.checkpoint_dir = Some(PathBuf::from(value)),
            "max_grad_norm" => self.max_grad_norm = num(key, value)?,
            _ => return Err(TrainingError::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, TrainingError> {
        let mut cfg = TrainingConfig::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| TrainingError::Config(format!("expected key=value: {line}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    DiscriminatorPretrain,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub fine_tune: bool,
    /// Mean per-step NLL over the epoch's training batches.
    pub generator_nll: Option<f64>,
    /// Per-step NLL on the held-out split (the training split when none).
    pub eval_nll: Option<f64>,
    pub discriminator_loss: Option<f64>,
    pub discriminator_accuracy: Option<f64>,
    pub reward: Option<f64>,
    pub validity: Option<ValidityRates>,
    /// Generated queries dropped because the oracle or a rollout failed.
    pub skipped: usize,
    pub wall_seconds: f64,
}

impl EpochRecord {
    fn new(epoch: usize, phase: Phase, fine_tune: bool) -> Self {
        EpochRecord {
            epoch,
            phase,
            fine_tune,
            generator_nll: None,
            eval_nll: None,
            discriminator_loss: None,
            discriminator_accuracy: None,
            reward: None,
            validity: None,
            skipped: 0,
            wall_seconds: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub fine_tune: bool,
    /// Held-out NLL before the first epoch of `fit`.
    #[serde(default)]
    pub initial_eval_nll: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub wall_seconds: f64,
}

impl TrainingReport {
    pub fn to_jsonl(&self) -> String {
        self.epochs.iter().map(|e| serde_json::to_string(e).expect("record serializes") + "\n").collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let epochs = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<Vec<EpochRecord>, _>>()?;
        let fine_tune = epochs.first().is_some_and(|e| e.fine_tune);
        let wall_seconds = epochs.last().map_or(0.0, |e| e.wall_seconds);
        Ok(TrainingReport { fine_tune, initial_eval_nll: None, epochs, checkpoints: Vec::new(), wall_seconds })
    }

    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &EpochRecord> {
        self.epochs.iter().filter(move |e| e.phase == phase)
    }
}

/// Per-query features through an oracle, cached by canonical text. Bucket keys
/// are resolved with an rng seeded from the text, so a query always gets the
/// same features.
pub struct FeatureSource<'a> {
    oracle: &'a dyn QueryOracle,
    map: &'a BucketMap,
    seed: u64,
    cache: Mutex<HashMap<String, Option<FeatureVector>>>,
}

impl<'a> FeatureSource<'a> {
    pub fn new(oracle: &'a dyn QueryOracle, map: &'a BucketMap, seed: u64) -> Self {
        FeatureSource { oracle, map, seed, cache: Mutex::new(HashMap::new()) }
    }

    fn compute(&self, canonical: &str) -> Result<FeatureVector, TrainingError> {
        let q = parse_sql(&revert(canonical).map_err(OracleError::from)?).map_err(OracleError::from)?;
        let h = Sha256::digest(canonical.as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ u64::from_le_bytes(h[..8].try_into().unwrap()));
        Ok(featurize_with(self.oracle, &q, self.map, &mut rng)?)
    }

    pub fn features(&self, canonical: &str) -> Result<FeatureVector, TrainingError> {
        if let Some(hit) = self.cache.lock().unwrap().get(canonical) {
            return hit.clone().ok_or(TrainingError::RolloutFailed);
        }
        let r = self.compute(canonical);
        self.cache.lock().unwrap().insert(canonical.to_string(), r.as_ref().ok().cloned());
        r
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().unwrap().len()
    }
}

/// A real query ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub text: String,
    pub sequence: Vec<ProductionId>,
    /// Masked candidate set at every step, target included.
    pub candidates: Vec<Vec<ProductionId>>,
    pub features: Option<FeatureVector>,
}

impl Example {
    pub fn nll_rows(&self, weight: f64) -> Vec<NllRow> {
        self.candidates
            .iter()
            .zip(&self.sequence)
            .map(|(c, &t)| NllRow { candidates: c.clone(), target: t, weight })
            .collect()
    }
}

/// Parses canonical queries into sequences and candidate sets; with a
/// feature source, also measures each query.
pub fn prepare_examples<S: AsRef<str>>(
    bound: &BoundGrammar,
    rules: RuleSet,
    canonical: &[S],
    features: Option<&FeatureSource>,
) -> Result<Vec<Example>, TrainingError> {
    canonical
        .iter()
        .enumerate()
        .map(|(index, q)| {
            let text = q.as_ref().to_string();
            let bad = |message: String| TrainingError::BadExample { index, message };
            let sequence = bound.parser.sequence_of(&text).map_err(|e| bad(e.to_string()))?.ids;
            let candidates = teacher_forcing_candidates(&bound.semantics, rules, &sequence).map_err(|e| bad(e.to_string()))?;
            let features = features.map(|f| f.features(&text)).transpose().map_err(|e| bad(e.to_string()))?;
            Ok(Example { text, sequence, candidates, features })
        })
        .collect()
}

/// Mean discriminator score over `k` completions of `prefix`; a complete
/// prefix is scored directly. Completions that hit the step cap or fail in the
/// oracle are skipped.
pub fn rollout_reward<R: Rng + ?Sized>(
    prefix: &Decoder,
    disc: &DiscriminatorModel,
    k: usize,
    features: &FeatureSource,
    normalizer: &FeatureNormalizer,
    rng: &mut R,
) -> Result<f64, TrainingError> {
    let score = |seq: &[ProductionId], text: &str| -> Option<f64> {
        let f = features.features(text).ok()?;
        disc.score(seq, &normalizer.normalize(&f.scalars())).ok()
    };
    if prefix.is_complete() {
        return score(prefix.sequence(), &prefix.episode().render()).ok_or(TrainingError::RolloutFailed);
    }
    let seeds: Vec<u64> = (0..k).map(|_| rng.random()).collect();
    let scores: Vec<f64> = seeds
        .par_iter()
        .filter_map(|&s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let done = prefix.clone().finish(SamplingMode::Sample, &mut r).ok()?;
            score(&done.sequence, &done.text)
        })
        .collect();
    if scores.is_empty() {
        return Err(TrainingError::RolloutFailed);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// A generated sequence with per-step candidate sets and rewards.
#[derive(Debug, Clone)]
struct Trajectory {
    sequence: Vec<ProductionId>,
    candidates: Vec<Vec<ProductionId>>,
    /// Reward per step; `None` where only one production was possible.
    rewards: Vec<Option<f64>>,
    text: String,
}

struct Fake {
    sequence: Vec<ProductionId>,
    text: String,
    features: Vec<f64>,
}

/// Training state for one generator/discriminator pair.
pub struct Trainer<'b> {
    bound: &'b BoundGrammar,
    pub rules: RuleSet,
    pub cfg: TrainingConfig,
    pub generator: GeneratorModel,
    pub discriminator: DiscriminatorModel,
    pub normalizer: FeatureNormalizer,
    pub report: TrainingReport,
    gen_opt: Adam,
    disc_opt: Adam,
    rng: ChaCha8Rng,
    baseline: Option<f64>,
    started: Instant,
}

const BASELINE_DECAY: f64 = 0.9;

impl<'b> Trainer<'b> {
    pub fn new(bound: &'b BoundGrammar, rules: RuleSet, cfg: TrainingConfig, model: ModelConfig) -> Result<Self, TrainingError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let p = bound.grammar.num_productions();
        let generator = GeneratorModel::new(model, p, &mut rng)?;
        let discriminator = DiscriminatorModel::new(model, p, NUM_SCALAR_FEATURES, &mut rng)?;
        Ok(Self::assemble(bound, rules, cfg, generator, discriminator, FeatureNormalizer::identity(NUM_SCALAR_FEATURES), false))
    }

    /// Resumes from a checkpoint of the same grammar.
    pub fn from_checkpoint(bound: &'b BoundGrammar, rules: RuleSet, cfg: TrainingConfig, ck: Checkpoint) -> Result<Self, TrainingError> {
        cfg.validate()?;
        let expected = bound.grammar.digest();
        if ck.grammar_digest != expected {
            return Err(ModelError::DigestMismatch { expected: expected.to_string(), found: ck.grammar_digest }.into());
        }
        Ok(Self::assemble(bound, rules, cfg, ck.generator, ck.discriminator, ck.normalizer, true))
    }

    fn assemble(
        bound: &'b BoundGrammar,
        rules: RuleSet,
        cfg: TrainingConfig,
        generator: GeneratorModel,
        discriminator: DiscriminatorModel,
        normalizer: FeatureNormalizer,
        fine_tune: bool,
    ) -> Self {
        Trainer {
            bound,
            rules,
            gen_opt: Adam::new(cfg.lr_generator, cfg.l2_lambda),
            disc_opt: Adam::new(cfg.lr_discriminator, cfg.l2_lambda),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
            cfg,
            generator,
            discriminator,
            normalizer,
            report: TrainingReport { fine_tune, ..TrainingReport::default() },
            baseline: None,
            started: Instant::now(),
        }
    }

    pub fn checkpoint(&self, metadata: BTreeMap<String, String>) -> Checkpoint {
        Checkpoint {
            grammar_digest: self.bound.grammar.digest().to_string(),
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            normalizer: self.normalizer.clone(),
            metadata,
        }
    }

    /// Fits the feature normalization on real examples with features.
    pub fn fit_normalizer(&mut self, examples: &[Example]) {
        let rows: Vec<Vec<f64>> = examples.iter().filter_map(|e| e.features.as_ref().map(FeatureVector::scalars)).collect();
        if !rows.is_empty() {
            self.normalizer = FeatureNormalizer::fit(&rows);
        }
    }

    /// Splits off the configured held-out fraction (at least one example kept for training).
    pub fn split_holdout(&mut self, examples: Vec<Example>) -> (Vec<Example>, Vec<Example>) {
        let mut ex = examples;
        ex.shuffle(&mut self.rng);
        let n_hold = ((ex.len() as f64) * self.cfg.holdout_fraction).floor() as usize;
        let n_hold = n_hold.min(ex.len().saturating_sub(1));
        let held = ex.split_off(ex.len() - n_hold);
        (ex, held)
    }

    fn next_epoch(&self) -> usize {
        self.report.epochs.last().map_or(0, |e| e.epoch + 1)
    }

    fn finish_epoch(&mut self, mut rec: EpochRecord) -> Result<(), TrainingError> {
        rec.wall_seconds = self.started.elapsed().as_secs_f64();
        self.report.wall_seconds = rec.wall_seconds;
        let epoch = rec.epoch;
        log::info!("{}", serde_json::to_string(&rec).unwrap_or_default());
        self.report.epochs.push(rec);
        if self.cfg.checkpoint_every > 0 && (epoch + 1).is_multiple_of(self.cfg.checkpoint_every) {
            if let Some(dir) = self.cfg.checkpoint_dir.clone() {
                std::fs::create_dir_all(&dir)?;
                let path = dir.join(format!("epoch-{epoch:04}.ckpt"));
                self.checkpoint(BTreeMap::new()).save(&path)?;
                self.report.checkpoints.push(path);
            }
        }
        Ok(())
    }

    fn step_generator(&mut self, mut grads: Vec<Tensor>) {
        if self.cfg.max_grad_norm > 0.0 {
            clip_grad_norm(&mut grads, self.cfg.max_grad_norm);
        }
        self.gen_opt.update(&mut self.generator.params, &grads);
    }

    fn step_discriminator(&mut self, mut grads: Vec<Tensor>) {
        if self.cfg.max_grad_norm > 0.0 {
            clip_grad_norm(&mut grads, self.cfg.max_grad_norm);
        }
        self.disc_opt.update(&mut self.discriminator.params, &grads);
    }

    /// Per-step NLL in evaluation mode, each example under a fixed prior draw.
    pub fn eval_nll(&self, examples: &[Example]) -> Result<f64, TrainingError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5eed);
        let steps: usize = examples.iter().map(|e| e.sequence.len()).sum();
        if steps == 0 {
            return Err(TrainingError::EmptyCorpus);
        }
        let mut total = 0.0;
        for e in examples {
            let z = PriorSample::draw(self.generator.config.d_model, &mut rng);
            total += self.generator.sequence_loss(&z, &e.sequence, e.nll_rows(1.0), 1.0, None, None)?;
        }
        Ok(total / steps as f64)
    }

    /// One pass of teacher-forced MLE over `train`.
    pub fn mle_epoch(&mut self, train: &[Example], heldout: &[Example]) -> Result<EpochRecord, TrainingError> {
        if train.is_empty() {
            return Err(TrainingError::EmptyCorpus);
        }
        let epoch = self.next_epoch();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let d = self.generator.config.d_model;
        let (mut total, mut steps) = (0.0, 0usize);
        for batch in order.chunks(self.cfg.batch_size) {
            let norm: usize = batch.iter().map(|&i| train[i].sequence.len()).sum();
            let mut grads = self.generator.params.zeros_like();
            for &i in batch {
                let e = &train[i];
                let z = PriorSample::draw(d, &mut self.rng);
                let drop = Dropout { rate: self.cfg.dropout, rng: &mut self.rng };
                let loss = self.generator.sequence_loss(&z, &e.sequence, e.nll_rows(1.0), norm as f64, Some(drop), Some(&mut grads))?;
                total += loss * norm as f64;
            }
            steps += norm;
            if !total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainingError::NonFinite { what: "generator loss", epoch });
            }
            self.step_generator(grads);
        }
        let mut rec = EpochRecord::new(epoch, Phase::Pretrain, self.report.fine_tune);
        rec.generator_nll = Some(total / steps as f64);
        rec.eval_nll = Some(self.eval_nll(if heldout.is_empty() { train } else { heldout })?);
        Ok(rec)
    }

    /// `cfg.pretrain_epochs` epochs of MLE.
    pub fn pretrain_mle(&mut self, train: &[Example], heldout: &[Example]) -> Result<(), TrainingError> {
        for _ in 0..self.cfg.pretrain_epochs {
            let rec = self.mle_epoch(train, heldout)?;
            self.finish_epoch(rec)?;
        }
        Ok(())
    }

    /// Samples `n` generator queries with oracle features; failures are counted.
    fn sample_fakes(&mut self, n: usize, features: &FeatureSource) -> Result<(Vec<Fake>, usize), TrainingError> {
        let mut out = Vec::with_capacity(n);
        let mut skipped = 0;
        let mut attempts = 0;
        while out.len() < n && attempts < 4 * n + 16 {
            attempts += 1;
            let z = PriorSample::draw(self.generator.config.d_model, &mut self.rng);
            let dec = Decoder::new(&self.generator, &self.bound.semantics, self.rules, &z)?;
            match dec.finish(SamplingMode::Sample, &mut self.rng) {
                Ok(s) => match features.features(&s.text) {
                    Ok(f) => out.push(Fake { features: self.normalizer.normalize(&f.scalars()), sequence: s.sequence, text: s.text }),
                    Err(_) => skipped += 1,
                },
                Err(ModelError::StepCap(_)) | Err(ModelError::ContextLength { .. }) => skipped += 1,
                Err(e) => return Err(e.into()),
            }
        }
        Ok((out, skipped))
    }

    fn real_features(&self, e: &Example) -> Option<Vec<f64>> {
        e.features.as_ref().map(|f| self.normalizer.normalize(&f.scalars()))
    }

    /// One discriminator update on real examples against fakes: mean BCE plus
    /// the mean gradient penalty over real/fake pairs. Returns (loss, accuracy).
    fn discriminator_update(&mut self, real: &[&Example], fakes: &[Fake]) -> Result<(f64, f64), TrainingError> {
        let reals: Vec<(&[ProductionId], Vec<f64>)> =
            real.iter().filter_map(|e| self.real_features(e).map(|f| (e.sequence.as_slice(), f))).collect();
        let n = reals.len() + fakes.len();
        if n == 0 {
            return Ok((0.0, 0.0));
        }
        let w = 1.0 / n as f64;
        let mut grads = self.discriminator.params.zeros_like();
        let (mut loss, mut correct) = (0.0, 0usize);
        for (label, seq, f) in reals.iter().map(|(s, f)| (1.0, *s, f)).chain(fakes.iter().map(|x| (0.0, x.sequence.as_slice(), &x.features))) {
            let drop = Dropout { rate: self.cfg.dropout, rng: &mut self.rng };
            let (l, logit) = self.discriminator.bce_loss(seq, f, label, w, Some(drop), Some(&mut grads))?;
            loss += l;
            if (logit > 0.0) == (label > 0.5) {
                correct += 1;
            }
        }
        let pairs = reals.len().min(fakes.len());
        if self.cfg.gradient_penalty > 0.0 && pairs > 0 {
            let coef = self.cfg.gradient_penalty / pairs as f64;
            for i in 0..pairs {
                let alpha: f64 = self.rng.random();
                let (rs, rf) = (&reals[i].0, &reals[i].1);
                let f = &fakes[i];
                loss += self.discriminator.gradient_penalty((rs, rf), (&f.sequence, &f.features), alpha, coef, Some(&mut grads))?;
            }
        }
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainingError::NonFinite { what: "discriminator loss", epoch: self.next_epoch() });
        }
        self.step_discriminator(grads);
        Ok((loss, correct as f64 / n as f64))
    }

    /// `cfg.discriminator_epochs` epochs of BCE on real examples against
    /// samples of the current generator.
    pub fn pretrain_discriminator(&mut self, real: &[Example], features: &FeatureSource) -> Result<(), TrainingError> {
        if real.is_empty() {
            return Err(TrainingError::EmptyCorpus);
        }
        for _ in 0..self.cfg.discriminator_epochs {
            let epoch = self.next_epoch();
            let mut order: Vec<usize> = (0..real.len()).collect();
            order.shuffle(&mut self.rng);
            let (mut loss, mut acc, mut batches, mut skipped) = (0.0, 0.0, 0usize, 0usize);
            for batch in order.chunks(self.cfg.batch_size) {
                let (fakes, s) = self.sample_fakes(batch.len(), features)?;
                skipped += s;
                let reals: Vec<&Example> = batch.iter().map(|&i| &real[i]).collect();
                let (l, a) = self.discriminator_update(&reals, &fakes)?;
                loss += l;
                acc += a;
                batches += 1;
            }
            let mut rec = EpochRecord::new(epoch, Phase::DiscriminatorPretrain, self.report.fine_tune);
            rec.discriminator_loss = Some(loss / batches as f64);
            rec.discriminator_accuracy = Some(acc / batches as f64);
            rec.skipped = skipped;
            self.finish_epoch(rec)?;
        }
        Ok(())
    }

    /// Samples one sequence and assigns each multi-choice step the rollout
    /// reward of the prefix ending in that choice.
    fn trajectory(&mut self, features: &FeatureSource) -> Result<Trajectory, TrainingError> {
        let z = PriorSample::draw(self.generator.config.d_model, &mut self.rng);
        let mut dec = Decoder::new(&self.generator, &self.bound.semantics, self.rules, &z)?;
        let (mut candidates, mut rewards) = (Vec::new(), Vec::new());
        while !dec.is_complete() {
            let (c, _) = dec.sample_step(SamplingMode::Sample, &mut self.rng)?;
            let r = if c.len() > 1 {
                Some(rollout_reward(&dec, &self.discriminator, self.cfg.rollout_count, features, &self.normalizer, &mut self.rng)?)
            } else {
                None
            };
            candidates.push(c);
            rewards.push(r);
        }
        Ok(Trajectory { sequence: dec.sequence().to_vec(), candidates, rewards, text: dec.episode().render() })
    }

    /// One policy-gradient update from `cfg.generator_batch` trajectories.
    /// Returns (mean reward, generated texts, skipped).
    fn generator_update(&mut self, features: &FeatureSource) -> Result<(f64, Vec<String>, usize), TrainingError> {
        let mut trajectories = Vec::new();
        let mut skipped = 0;
        let mut attempts = 0;
        while trajectories.len() < self.cfg.generator_batch && attempts < 4 * self.cfg.generator_batch + 16 {
            attempts += 1;
            match self.trajectory(features) {
                Ok(t) => trajectories.push(t),
                Err(TrainingError::RolloutFailed) | Err(TrainingError::Model(ModelError::StepCap(_))) => skipped += 1,
                Err(TrainingError::Model(ModelError::ContextLength { .. })) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        let all: Vec<f64> = trajectories.iter().flat_map(|t| t.rewards.iter().flatten().copied()).collect();
        if all.is_empty() {
            return Ok((0.0, trajectories.into_iter().map(|t| t.text).collect(), skipped));
        }
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let b = self.baseline.unwrap_or(mean);
        let norm = all.len() as f64;
        let mut grads = self.generator.params.zeros_like();
        for t in &trajectories {
            let rows = t
                .candidates
                .iter()
                .zip(&t.sequence)
                .zip(&t.rewards)
                .map(|((c, &p), r)| NllRow { candidates: c.clone(), target: p, weight: r.map_or(0.0, |r| r - b) })
                .collect();
            let z = PriorSample::draw(self.generator.config.d_model, &mut self.rng);
            let drop = Dropout { rate: self.cfg.dropout, rng: &mut self.rng };
            self.generator.sequence_loss(&z, &t.sequence, rows, norm, Some(drop), Some(&mut grads))?;
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainingError::NonFinite { what: "policy gradient", epoch: self.next_epoch() });
        }
        self.step_generator(grads);
        self.baseline = Some(match self.baseline {
            Some(old) => BASELINE_DECAY * old + (1.0 - BASELINE_DECAY) * mean,
            None => mean,
        });
        Ok((mean, trajectories.into_iter().map(|t| t.text).collect(), skipped))
    }

    /// One adversarial epoch: a generator policy-gradient update followed by
    /// a discriminator update on a fresh real batch and fresh samples.
    pub fn adversarial_epoch(&mut self, real: &[Example], features: &FeatureSource) -> Result<EpochRecord, TrainingError> {
        if real.is_empty() {
            return Err(TrainingError::EmptyCorpus);
        }
        let epoch = self.next_epoch();
        let (reward, texts, mut skipped) = self.generator_update(features)?;
        let n = self.cfg.batch_size.min(real.len());
        let batch: Vec<&Example> = real.choose_multiple(&mut self.rng, n).collect();
        let (fakes, s) = self.sample_fakes(n, features)?;
        skipped += s;
        let (loss, acc) = self.discriminator_update(&batch, &fakes)?;
        let mut rec = EpochRecord::new(epoch, Phase::Adversarial, self.report.fine_tune);
        rec.reward = Some(reward);
        rec.discriminator_loss = Some(loss);
        rec.discriminator_accuracy = Some(acc);
        let mut all_texts = texts;
        all_texts.extend(fakes.into_iter().map(|f| f.text));
        rec.validity = Some(validity_rates(&all_texts, self.bound));
        rec.skipped = skipped;
        Ok(rec)
    }

    /// `cfg.adversarial_epochs` adversarial epochs.
    pub fn train_adversarial(&mut self, real: &[Example], features: &FeatureSource) -> Result<(), TrainingError> {
        for _ in 0..self.cfg.adversarial_epochs {
            let rec = self.adversarial_epoch(real, features)?;
            self.finish_epoch(rec)?;
        }
        Ok(())
    }

    /// Full pipeline: holdout split, MLE, discriminator pretraining, then
    /// adversarial training when a feature source is given.
    pub fn fit(&mut self, examples: Vec<Example>, features: Option<&FeatureSource>) -> Result<(), TrainingError> {
        if examples.is_empty() {
            return Err(TrainingError::EmptyCorpus);
        }
        let (train, held) = self.split_holdout(examples);
        if !held.is_empty() {
            self.report.initial_eval_nll = Some(self.eval_nll(&held)?);
        }
        if features.is_some() {
            self.fit_normalizer(&train);
        }
        self.pretrain_mle(&train, &held)?;
        if let Some(f) = features {
            self.pretrain_discriminator(&train, f)?;
            self.train_adversarial(&train, f)?;
        }
        Ok(())
    }
}

/// Resumes training from `checkpoint` on a new corpus; the report is flagged
/// as a fine-tune run.
pub fn fine_tune<'b>(
    bound: &'b BoundGrammar,
    rules: RuleSet,
    checkpoint: Checkpoint,
    new_data: Vec<Example>,
    features: Option<&FeatureSource>,
    cfg: TrainingConfig,
) -> Result<Trainer<'b>, TrainingError> {
    let mut t = Trainer::from_checkpoint(bound, rules, cfg, checkpoint)?;
    t.fit(new_data, features)?;
    Ok(t)
}
