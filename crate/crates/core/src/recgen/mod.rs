//! Decoder-only recommender over index tokens: sequence encoding, a small
//! pre-LN transformer trained on next-item NLL, an incremental decoding
//! cache, and trie-constrained beam search.

mod beam;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indexstore::SemanticIndex;

pub use beam::{constrained_beam_search, greedy_constrained, BeamHit};
pub use model::{DecodeCache, Grads, ModelConfig, SeqModel};
pub use train::{
    evaluate, fit, grad_check, nll_loss, numeric_gradients, save_predictions, valid_examples, write_predictions,
    EvalConfig, Example, RecCheckpoint, RecEpoch, RecReport, RecTrainConfig, UserPrediction, GRAD_CHECK_STEP,
    PREDICTIONS_HEADER,
};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const SPECIAL_TOKENS: u32 = 4;

/// Token ids: four specials, then one block of `codes` ids per level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub levels: usize,
    pub codes: usize,
}

impl Vocab {
    pub fn new(levels: usize, codes: usize) -> Result<Self> {
        if levels == 0 || codes == 0 {
            return Err(Error::Config("vocabulary needs at least one level and one code".into()));
        }
        Ok(Self { levels, codes })
    }

    pub fn size(&self) -> usize {
        self.levels * self.codes + SPECIAL_TOKENS as usize
    }

    pub fn token(&self, level: usize, code: u32) -> u32 {
        debug_assert!(level < self.levels && (code as usize) < self.codes);
        SPECIAL_TOKENS + (level * self.codes) as u32 + code
    }

    /// `(level, code)` of an index token, `None` for specials.
    pub fn decode(&self, token: u32) -> Option<(usize, u32)> {
        let t = token.checked_sub(SPECIAL_TOKENS)? as usize;
        (t < self.levels * self.codes).then(|| (t / self.codes, (t % self.codes) as u32))
    }

    /// Token ids of one level's block.
    pub fn level_range(&self, level: usize) -> std::ops::Range<u32> {
        self.token(level, 0)..self.token(level, 0) + self.codes as u32
    }
}

/// `BOS, history tokens..., SEP` and, with a target, `target tokens..., EOS`.
///
/// Only the most recent `max_history` items are kept, and further whole items
/// are dropped from the oldest end until the sequence fits `max_positions`.
pub fn encode_sequence(
    vocab: &Vocab,
    history: &[&SemanticIndex],
    target: Option<&SemanticIndex>,
    max_history: usize,
    max_positions: usize,
) -> Result<Vec<u32>> {
    let h = vocab.levels;
    let fixed = 2 + target.map_or(0, |_| h + 1);
    if fixed > max_positions {
        return Err(Error::Config(format!(
            "max_positions {max_positions} cannot hold even an empty history ({fixed} tokens)"
        )));
    }
    let fit = ((max_positions - fixed) / h).min(max_history);
    let kept = &history[history.len().saturating_sub(fit)..];
    let mut out = Vec::with_capacity(fixed + kept.len() * h);
    out.push(BOS);
    for ix in kept.iter().copied().chain(target) {
        if ix.levels() != h {
            return Err(Error::Schema(format!("index has {} levels, vocabulary {h}", ix.levels())));
        }
        if ix.codes().iter().any(|&c| c as usize >= vocab.codes) {
            return Err(Error::Range(format!("index {:?} exceeds {} codes", ix.codes(), vocab.codes)));
        }
    }
    for ix in kept {
        out.extend(ix.codes().iter().enumerate().map(|(l, &c)| vocab.token(l, c)));
    }
    out.push(SEP);
    if let Some(t) = target {
        out.extend(t.codes().iter().enumerate().map(|(l, &c)| vocab.token(l, c)));
        out.push(EOS);
    }
    Ok(out)
}
