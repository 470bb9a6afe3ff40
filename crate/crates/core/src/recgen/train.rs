use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::beam::{constrained_beam_search, BeamHit};
use super::model::{Grads, ModelConfig, SeqModel};
use super::{encode_sequence, Vocab};
use crate::corpus::{LooSplit, Split, UserSplit};
use crate::error::{Error, Result};
use crate::indexstore::{IndexMap, IndexTrie, SemanticIndex};
use crate::metrics::{report, MetricsReport, RankedPrediction};
use crate::optim::{warmup_cosine, AdamW, AdamWConfig};
use crate::rqvae::max_relative_error;
use crate::util::{mix_seed, seeded_rng, ArtifactMeta};

/// One training or scoring sequence: `BOS history SEP target EOS`, placed so
/// that EOS sits at the last model position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    /// Index of the first target token.
    pub target_start: usize,
    /// Model position of `tokens[0]`.
    pub start: usize,
}

impl Example {
    pub fn new(
        vocab: &Vocab,
        history: &[&SemanticIndex],
        target: &SemanticIndex,
        max_history: usize,
        max_positions: usize,
    ) -> Result<Self> {
        let tokens = encode_sequence(vocab, history, Some(target), max_history, max_positions)?;
        let target_start = tokens.len() - vocab.levels - 1;
        let start = max_positions - tokens.len();
        Ok(Self {
            tokens,
            target_start,
            start,
        })
    }

    /// Positions whose logits predict a target token (EOS included).
    pub fn loss_positions(&self) -> Range<usize> {
        self.target_start - 1..self.tokens.len() - 1
    }
}

/// Mean over the batch of each example's summed target-side NLL.
pub fn nll_loss(model: &SeqModel, batch: &[Example]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let mut total = 0.0;
    for ex in batch {
        let pos: Vec<usize> = ex.loss_positions().collect();
        total += model.nll_positions(&ex.tokens, ex.start, &pos, None)?;
    }
    Ok(total / batch.len() as f64)
}

fn loss_and_grad(model: &SeqModel, batch: &[Example]) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let mut grads = model.zero_grads();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for ex in batch {
        let pos: Vec<usize> = ex.loss_positions().collect();
        total += model.nll_positions(&ex.tokens, ex.start, &pos, Some((&mut grads, scale)))?;
    }
    Ok((total * scale, grads))
}

/// Five-point central differences of [`nll_loss`] for every parameter.
pub fn numeric_gradients(model: &SeqModel, batch: &[Example], step: f64) -> Result<Vec<f64>> {
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(model.num_params());
    for i in 0..model.num_params() {
        let orig = probe.params()[i];
        let mut at = |delta: f64| -> Result<f64> {
            probe.params_mut()[i] = orig + delta;
            nll_loss(&probe, batch)
        };
        let (p1, m1, p2, m2) = (at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?);
        probe.params_mut()[i] = orig;
        out.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step));
    }
    Ok(out)
}

pub const GRAD_CHECK_STEP: f64 = 1e-3;

/// Largest relative gap between backpropagated and finite-difference gradients.
pub fn grad_check(model: &SeqModel, batch: &[Example]) -> Result<f64> {
    let (_, analytic) = loss_and_grad(model, batch)?;
    let numeric = numeric_gradients(model, batch, GRAD_CHECK_STEP)?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Share of all optimiser steps spent in linear warmup.
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Most recent items kept as history.
    pub max_history: usize,
    /// Random (history, next item) cuts drawn per user and epoch.
    pub samples_per_user: usize,
    pub seed: u64,
}

impl Default for RecTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 1e-3,
            warmup_ratio: 0.05,
            batch_size: 32,
            weight_decay: 0.01,
            max_history: 20,
            samples_per_user: 1,
            seed: 0,
        }
    }
}

impl RecTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_history == 0 || self.samples_per_user == 0 {
            return Err(Error::Config("batch_size, max_history and samples_per_user must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("warmup_ratio must lie in [0, 1] and weight_decay be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecEpoch {
    /// One-based.
    pub epoch: usize,
    pub train_nll: f64,
    pub valid_nll: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecReport {
    pub initial_valid_nll: f64,
    pub epochs: Vec<RecEpoch>,
}

fn lookup<'a>(map: &'a IndexMap, item: &str) -> Result<&'a SemanticIndex> {
    map.get(item)
        .ok_or_else(|| Error::Schema(format!("item `{item}` has no semantic index")))
}

fn check_vocab(model: &SeqModel, map: &IndexMap) -> Result<()> {
    let v = model.vocab();
    if v.levels != map.levels() || v.codes != map.codes_per_level() {
        return Err(Error::Schema(format!(
            "model vocabulary is {}x{}, index map {}x{}",
            v.levels,
            v.codes,
            map.levels(),
            map.codes_per_level()
        )));
    }
    Ok(())
}

fn split_example(model: &SeqModel, map: &IndexMap, user: &UserSplit, split: Split, max_history: usize) -> Result<Option<Example>> {
    let Some((history, target)) = user.history_and_target(split) else {
        return Ok(None);
    };
    let hist = history.iter().map(|i| lookup(map, i)).collect::<Result<Vec<_>>>()?;
    let ex = Example::new(model.vocab(), &hist, lookup(map, target)?, max_history, model.config().max_positions)?;
    Ok(Some(ex))
}

/// Validation examples: training items as history, validation item as target.
pub fn valid_examples(model: &SeqModel, loo: &LooSplit, map: &IndexMap, max_history: usize) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(loo.len());
    for u in &loo.users {
        out.extend(split_example(model, map, u, Split::Valid, max_history)?);
    }
    Ok(out)
}

/// Random prefixes of each user's training items: the target is a training
/// item and the history everything before it (non-empty when possible).
fn sample_train_examples(
    model: &SeqModel,
    loo: &LooSplit,
    map: &IndexMap,
    cfg: &RecTrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(loo.len() * cfg.samples_per_user);
    for u in &loo.users {
        let items = u
            .train_items
            .iter()
            .map(|i| lookup(map, i))
            .collect::<Result<Vec<_>>>()?;
        for _ in 0..cfg.samples_per_user {
            let cut = if items.len() > 1 { rng.random_range(1..items.len()) } else { 0 };
            out.push(Example::new(
                model.vocab(),
                &items[..cut],
                items[cut],
                cfg.max_history,
                model.config().max_positions,
            )?);
        }
    }
    Ok(out)
}

fn ensure_finite(what: &str, x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Numerical(format!("{what} became {x}")))
    }
}

/// Train on next-item prediction over the training part of `loo`, with
/// validation NLL measured after every epoch.
pub fn fit(model: &mut SeqModel, loo: &LooSplit, map: &IndexMap, cfg: &RecTrainConfig) -> Result<RecReport> {
    cfg.validate()?;
    check_vocab(model, map)?;
    if loo.is_empty() {
        return Err(Error::Domain("no users to train on".into()));
    }
    let valid = valid_examples(model, loo, map, cfg.max_history)?;
    let steps_per_epoch = (loo.len() * cfg.samples_per_user).div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = (cfg.warmup_ratio * total as f64).round() as usize;
    let mut opt = AdamW::new(
        model.num_params(),
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let initial_valid_nll = ensure_finite("validation NLL", nll_loss(model, &valid)?)?;
    info!("recgen: {} parameters, initial valid NLL {initial_valid_nll:.4}", model.num_params());
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = seeded_rng(mix_seed(cfg.seed, epoch as u64));
        let mut examples = sample_train_examples(model, loo, map, cfg, &mut rng)?;
        examples.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut lr = 0.0;
        for batch in examples.chunks(cfg.batch_size) {
            let (loss, grads) = loss_and_grad(model, batch)?;
            sum += ensure_finite("training NLL", loss)? * batch.len() as f64;
            lr = warmup_cosine(step, total, warmup, cfg.learning_rate);
            opt.step(model.params_mut(), &grads, lr);
            step += 1;
        }
        let valid_nll = ensure_finite("validation NLL", nll_loss(model, &valid)?)?;
        let rec = RecEpoch {
            epoch: epoch + 1,
            train_nll: sum / examples.len() as f64,
            valid_nll,
            learning_rate: lr,
        };
        info!(
            "recgen epoch {}: train NLL {:.4}, valid NLL {:.4}",
            rec.epoch, rec.train_nll, rec.valid_nll
        );
        epochs.push(rec);
    }
    Ok(RecReport {
        initial_valid_nll,
        epochs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserPrediction {
    pub user_id: String,
    pub ground_truth: String,
    /// Best first.
    pub hits: Vec<BeamHit>,
}

impl UserPrediction {
    pub fn ranked(&self) -> Result<RankedPrediction> {
        RankedPrediction::new(
            self.user_id.clone(),
            self.hits.iter().map(|h| h.item.clone()).collect(),
            self.ground_truth.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub beam: usize,
    pub ks: Vec<usize>,
    pub max_history: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam: 20,
            ks: vec![1, 5, 10],
            max_history: 20,
        }
    }
}

/// Rank items for every user of `split` by constrained beam search and score
/// the result. Fails if any generated index is not an item of `trie`.
pub fn evaluate(
    model: &SeqModel,
    loo: &LooSplit,
    map: &IndexMap,
    trie: &IndexTrie,
    split: Split,
    cfg: &EvalConfig,
) -> Result<(Vec<UserPrediction>, MetricsReport)> {
    check_vocab(model, map)?;
    if let Some(&k) = cfg.ks.iter().find(|&&k| k == 0 || k > cfg.beam) {
        return Err(Error::Config(format!("cutoff {k} must lie in 1..={}", cfg.beam)));
    }
    let mut preds = Vec::with_capacity(loo.len());
    for u in &loo.users {
        let Some((history, target)) = u.history_and_target(split) else {
            continue;
        };
        let hist = history.iter().map(|i| lookup(map, i)).collect::<Result<Vec<_>>>()?;
        let prefix = encode_sequence(
            model.vocab(),
            &hist,
            None,
            cfg.max_history,
            model.config().max_positions - model.vocab().levels - 1,
        )?;
        let hits = constrained_beam_search(model, &prefix, trie, cfg.beam)?;
        for h in &hits {
            if trie.lookup(h.index.codes()) != Some(h.item.as_str()) {
                return Err(Error::Generation(format!(
                    "user `{}`: generated {:?}, which is not a trie item",
                    u.user_id,
                    h.index.codes()
                )));
            }
        }
        preds.push(UserPrediction {
            user_id: u.user_id.clone(),
            ground_truth: target.to_string(),
            hits,
        });
    }
    let ranked = preds.iter().map(UserPrediction::ranked).collect::<Result<Vec<_>>>()?;
    Ok((preds, report(&ranked, &cfg.ks, None)))
}

pub const PREDICTIONS_HEADER: &str = "user_id\trank\titem_id\tlogprob";

pub fn write_predictions(preds: &[UserPrediction], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{PREDICTIONS_HEADER}")?;
    for p in preds {
        for (r, h) in p.hits.iter().enumerate() {
            writeln!(w, "{}\t{}\t{}\t{}", p.user_id, r + 1, h.item, h.logprob)?;
        }
    }
    Ok(())
}

pub fn save_predictions(preds: &[UserPrediction], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_predictions(preds, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecCheckpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub params: Vec<f64>,
    pub train_config: RecTrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<ArtifactMeta>,
}

impl RecCheckpoint {
    pub const FORMAT: &'static str = "lcrec-recgen";
    pub const VERSION: u32 = 1;

    pub fn new(model: &SeqModel, train_config: &RecTrainConfig, meta: Option<ArtifactMeta>) -> Self {
        Self {
            format: Self::FORMAT.into(),
            version: Self::VERSION,
            model: *model.config(),
            vocab: *model.vocab(),
            params: model.params().to_vec(),
            train_config: train_config.clone(),
            meta,
        }
    }

    pub fn model(&self) -> Result<SeqModel> {
        if self.format != Self::FORMAT || self.version != Self::VERSION {
            return Err(Error::Schema(format!(
                "expected {} v{}, found {} v{}",
                Self::FORMAT,
                Self::VERSION,
                self.format,
                self.version
            )));
        }
        SeqModel::from_params(self.model, self.vocab, self.params.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), self).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }
}
