use std::cmp::Ordering;

use super::model::{DecodeCache, SeqModel};
use crate::error::{Error, Result};
use crate::indexstore::{IndexTrie, NodeId, SemanticIndex};
use crate::linalg::log_sum_exp;

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHit {
    pub item: String,
    pub index: SemanticIndex,
    /// Sum of the per-level log-probabilities (masked, not renormalised).
    pub logprob: f64,
}

struct Hyp {
    codes: Vec<u32>,
    node: NodeId,
    score: f64,
    cache: DecodeCache,
    /// Log-softmax over the whole vocabulary for the next position.
    logp: Vec<f64>,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|x| x - lse).collect()
}

/// Higher score first, then lexicographically smaller codes (same order as
/// the token ids, since each level's tokens are contiguous and ascending).
fn rank_order(a: (f64, &[u32]), b: (f64, &[u32])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

fn check(model: &SeqModel, prefix: &[u32], trie: &IndexTrie, beam: usize) -> Result<()> {
    if beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let levels = model.vocab().levels;
    if trie.levels() != levels {
        return Err(Error::Schema(format!(
            "trie has {} levels, vocabulary {levels}",
            trie.levels()
        )));
    }
    start_position(model, prefix.len()).map(|_| ())
}

/// Sequences are right-aligned: a prefix plus `levels` index tokens and EOS
/// ends at the last position, so SEP and the target always occupy the same
/// positions in training and decoding.
pub(crate) fn start_position(model: &SeqModel, prefix_len: usize) -> Result<usize> {
    let full = prefix_len + model.vocab().levels + 1;
    model.config().max_positions.checked_sub(full).ok_or_else(|| {
        Error::Domain(format!(
            "prefix of {prefix_len} tokens leaves no room for the generated index"
        ))
    })
}

/// Beam search over exactly `levels` tokens after `prefix` (which normally
/// ends in SEP). At step `s` only level-`s` tokens whose code extends a trie
/// path are eligible; everything else has log-probability −∞. Returns at most
/// `beam` items, best first.
pub fn constrained_beam_search(model: &SeqModel, prefix: &[u32], trie: &IndexTrie, beam: usize) -> Result<Vec<BeamHit>> {
    check(model, prefix, trie, beam)?;
    let vocab = *model.vocab();
    let (cache, logits) = model.prefill(prefix, start_position(model, prefix.len())?)?;
    let mut hyps = vec![Hyp {
        codes: Vec::new(),
        node: IndexTrie::ROOT,
        score: 0.0,
        cache,
        logp: log_softmax(&logits),
    }];
    for level in 0..vocab.levels {
        let mut cands: Vec<(usize, u32, NodeId, f64)> = Vec::new();
        for (h, hyp) in hyps.iter().enumerate() {
            for (code, child) in trie.children(hyp.node) {
                let s = hyp.score + hyp.logp[vocab.token(level, code) as usize];
                cands.push((h, code, child, s));
            }
        }
        let key = |c: &(usize, u32, NodeId, f64)| {
            let mut k = hyps[c.0].codes.clone();
            k.push(c.1);
            k
        };
        cands.sort_by(|a, b| rank_order((a.3, &key(a)), (b.3, &key(b))));
        cands.truncate(beam);
        let last = level + 1 == vocab.levels;
        let mut next = Vec::with_capacity(cands.len());
        for (h, code, child, score) in cands {
            let mut codes = hyps[h].codes.clone();
            codes.push(code);
            let mut cache = hyps[h].cache.clone();
            let logp = if last {
                Vec::new()
            } else {
                log_softmax(&model.decode_step_cached(&mut cache, vocab.token(level, code))?)
            };
            next.push(Hyp {
                codes,
                node: child,
                score,
                cache,
                logp,
            });
        }
        hyps = next;
    }
    hyps.into_iter()
        .map(|h| {
            let item = trie.leaf_item(h.node).ok_or_else(|| {
                Error::Generation(format!("beam ended on {:?}, which is not an item", h.codes))
            })?;
            Ok(BeamHit {
                item: item.to_string(),
                index: SemanticIndex(h.codes),
                logprob: h.score,
            })
        })
        .collect()
}

/// Pick the most likely eligible code at every level (ties to the lowest).
pub fn greedy_constrained(model: &SeqModel, prefix: &[u32], trie: &IndexTrie) -> Result<Option<BeamHit>> {
    check(model, prefix, trie, 1)?;
    let vocab = *model.vocab();
    let (mut cache, logits) = model.prefill(prefix, start_position(model, prefix.len())?)?;
    let mut logp = log_softmax(&logits);
    let mut node = IndexTrie::ROOT;
    let mut codes = Vec::with_capacity(vocab.levels);
    let mut score = 0.0;
    for level in 0..vocab.levels {
        let mut best: Option<(u32, NodeId, f64)> = None;
        for (code, child) in trie.children(node) {
            let lp = logp[vocab.token(level, code) as usize];
            if best.is_none_or(|b| lp > b.2) {
                best = Some((code, child, lp));
            }
        }
        let Some((code, child, lp)) = best else {
            return Ok(None);
        };
        codes.push(code);
        node = child;
        score += lp;
        if level + 1 < vocab.levels {
            logp = log_softmax(&model.decode_step_cached(&mut cache, vocab.token(level, code))?);
        }
    }
    Ok(trie.leaf_item(node).map(|item| BeamHit {
        item: item.to_string(),
        index: SemanticIndex(codes),
        logprob: score,
    }))
}
