//! Interaction data: loading, 5-core filtering, chronological sequences,
//! leave-one-out splits, item texts, and a planted-structure synthetic corpus.

mod amazon;
mod synth;

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use amazon::{convert_amazon_meta, convert_amazon_reviews};
pub use synth::{synth_corpus, SynthConfig, SynthCorpus};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

impl Interaction {
    pub fn new(user_id: impl Into<String>, item_id: impl Into<String>, timestamp: i64) -> Self {
        Self {
            user_id: user_id.into(),
            item_id: item_id.into(),
            timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: String,
    /// Oldest first.
    pub items: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user_id: String,
    pub train_items: Vec<String>,
    pub valid_target: String,
    pub test_target: String,
}

impl UserSplit {
    /// History and target for one split: training predicts the last training
    /// item, validation sees the training items, test additionally sees the
    /// validation target.
    pub fn history_and_target(&self, split: Split) -> Option<(Vec<&str>, &str)> {
        let train: Vec<&str> = self.train_items.iter().map(String::as_str).collect();
        match split {
            Split::Train => {
                // the training datum needs at least one item of history
                let (target, history) = train.split_last()?;
                (!history.is_empty()).then(|| (history.to_vec(), *target))
            }
            Split::Valid => Some((train, &self.valid_target)),
            Split::Test => {
                let mut h = train;
                h.push(&self.valid_target);
                Some((h, &self.test_target))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Leave-one-out split, ordered by user id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LooSplit {
    pub users: Vec<UserSplit>,
}

impl LooSplit {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

pub const MIN_INTERACTIONS: usize = 5;
pub const DEFAULT_MAX_LEN: usize = 20;

/// Drop users and items with fewer than five interactions, repeatedly, until
/// nothing changes. Input order of the survivors is preserved.
pub fn five_core_filter(interactions: &[Interaction]) -> Vec<Interaction> {
    k_core_filter(interactions, MIN_INTERACTIONS)
}

pub fn k_core_filter(interactions: &[Interaction], k: usize) -> Vec<Interaction> {
    let mut keep = vec![true; interactions.len()];
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for (x, _) in interactions.iter().zip(&keep).filter(|(_, k)| **k) {
            *users.entry(&x.user_id).or_default() += 1;
            *items.entry(&x.item_id).or_default() += 1;
        }
        let mut changed = false;
        for (x, kept) in interactions.iter().zip(keep.iter_mut()) {
            if *kept && (users[x.user_id.as_str()] < k || items[x.item_id.as_str()] < k) {
                *kept = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let out: Vec<Interaction> = interactions
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(x, _)| x.clone())
        .collect();
    if out.is_empty() && !interactions.is_empty() {
        warn!("{k}-core filtering removed every interaction");
    }
    out
}

/// Per user, items ordered by `(timestamp, item_id)`, keeping the most recent
/// `max_len`. Users are returned in id order.
pub fn build_sequences(interactions: &[Interaction], max_len: usize) -> Vec<UserSequence> {
    let mut by_user: BTreeMap<&str, Vec<(i64, &str)>> = BTreeMap::new();
    for x in interactions {
        by_user
            .entry(&x.user_id)
            .or_default()
            .push((x.timestamp, &x.item_id));
    }
    by_user
        .into_iter()
        .map(|(user, mut events)| {
            events.sort_unstable();
            let start = events.len().saturating_sub(max_len);
            UserSequence {
                user_id: user.to_string(),
                items: events[start..].iter().map(|(_, i)| i.to_string()).collect(),
            }
        })
        .collect()
}

/// Last item is the test target, the one before it the validation target,
/// the rest training. Users with fewer than three items are left out.
pub fn leave_one_out(sequences: &[UserSequence]) -> LooSplit {
    let mut users: Vec<UserSplit> = sequences
        .iter()
        .filter(|s| s.items.len() >= 3)
        .map(|s| {
            let n = s.items.len();
            UserSplit {
                user_id: s.user_id.clone(),
                train_items: s.items[..n - 2].to_vec(),
                valid_target: s.items[n - 2].clone(),
                test_target: s.items[n - 1].clone(),
            }
        })
        .collect();
    users.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    LooSplit { users }
}

pub const INTERACTIONS_HEADER: &str = "user_id\titem_id\ttimestamp";

/// TSV `user_id \t item_id \t timestamp`; a leading header line is optional.
pub fn read_interactions(reader: impl BufRead) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.is_empty() || (line_no == 1 && line == INTERACTIONS_HEADER) {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let timestamp: i64 = fields[2].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("`{}` is not an integer timestamp", fields[2]),
        })?;
        if timestamp < 0 {
            return Err(Error::Range(format!("line {line_no}: negative timestamp {timestamp}")));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty user or item id".into(),
            });
        }
        out.push(Interaction::new(fields[0], fields[1], timestamp));
    }
    Ok(out)
}

pub fn load_interactions(path: impl AsRef<Path>) -> Result<Vec<Interaction>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_interactions(BufReader::new(file))
}

pub fn write_interactions(interactions: &[Interaction], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{INTERACTIONS_HEADER}")?;
    for x in interactions {
        writeln!(w, "{}\t{}\t{}", x.user_id, x.item_id, x.timestamp)?;
    }
    Ok(())
}

pub fn save_interactions(interactions: &[Interaction], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_interactions(interactions, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemText {
    pub item_id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub description: String,
}

/// Read any JSONL file of records, reporting the failing line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(reader: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn load_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file))
}

pub fn save_jsonl<T: Serialize>(records: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Schema(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Item texts keyed by id; a repeated id is an error.
pub fn index_texts(texts: Vec<ItemText>) -> Result<BTreeMap<String, ItemText>> {
    let mut out = BTreeMap::new();
    for t in texts {
        if out.contains_key(&t.item_id) {
            return Err(Error::DuplicateId(t.item_id));
        }
        out.insert(t.item_id.clone(), t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ix(u: &str, i: &str, t: i64) -> Interaction {
        Interaction::new(u, i, t)
    }

    /// Every user rates every item of a block: a complete bipartite core.
    fn block(users: &[&str], items: &[&str], t0: i64) -> Vec<Interaction> {
        let mut out = vec![];
        for (a, u) in users.iter().enumerate() {
            for (b, i) in items.iter().enumerate() {
                out.push(ix(u, i, t0 + (a * 10 + b) as i64));
            }
        }
        out
    }

    #[test]
    fn dense_core_is_unchanged() {
        let data = block(&["u1", "u2", "u3", "u4", "u5"], &["a", "b", "c", "d", "e"], 0);
        assert_eq!(five_core_filter(&data), data);
    }

    #[test]
    fn sparse_user_is_removed() {
        let mut data = block(&["u1", "u2", "u3", "u4", "u5", "u6"], &["a", "b", "c", "d", "e"], 0);
        data.extend(block(&["w"], &["a", "b", "c", "d"], 100));
        let out = five_core_filter(&data);
        assert!(out.iter().all(|x| x.user_id != "w"));
        assert_eq!(out.len(), 30);
    }

    /// Hand-computed fixed point on a 10-user toy.
    ///
    /// u1..u5 rate items a..e (a 5x5 core). u6, u7, u8 and w rate f and a..d,
    /// so f has 4 ratings from them plus one from u. User u rates only f, g, h,
    /// i (4 items) and goes in round one, taking g, h, i with it. f then has 4
    /// ratings and goes in round two; u6..u8 and w are left with 4 items each
    /// and go in round three. Only the core survives.
    #[test]
    fn cascade_reaches_hand_computed_fixed_point() {
        let core = block(&["u1", "u2", "u3", "u4", "u5"], &["a", "b", "c", "d", "e"], 0);
        let mut data = core.clone();
        data.extend(block(&["u"], &["f", "g", "h", "i"], 100));
        data.extend(block(&["u6", "u7", "u8", "w"], &["f", "a", "b", "c", "d"], 300));
        let out = five_core_filter(&data);
        assert_eq!(out, core);
        assert_eq!(five_core_filter(&out), out);
    }

    #[test]
    fn sequences_are_chronological_and_truncated() {
        let data = vec![ix("u", "c", 30), ix("u", "a", 10), ix("u", "b", 20)];
        assert_eq!(build_sequences(&data, 20)[0].items, vec!["a", "b", "c"]);

        let data: Vec<_> = (0..25).map(|t| ix("u", &format!("i{t:02}"), t)).collect();
        let seq = &build_sequences(&data, 20)[0].items;
        assert_eq!(seq.len(), 20);
        assert_eq!(seq[0], "i05");
        assert_eq!(seq[19], "i24");

        let data = vec![ix("u", "z", 5), ix("u", "m", 5), ix("u", "a", 1)];
        assert_eq!(build_sequences(&data, 20)[0].items, vec!["a", "m", "z"]);
    }

    #[test]
    fn leave_one_out_examples() {
        let seqs = vec![
            UserSequence {
                user_id: "u1".into(),
                items: vec!["a".into(), "b".into(), "c".into()],
            },
            UserSequence {
                user_id: "u2".into(),
                items: vec!["a".into(), "b".into()],
            },
        ];
        let split = leave_one_out(&seqs);
        assert_eq!(split.len(), 1);
        let u = &split.users[0];
        assert_eq!(u.train_items, vec!["a"]);
        assert_eq!((u.valid_target.as_str(), u.test_target.as_str()), ("b", "c"));
        assert_eq!(u.history_and_target(Split::Train), None);
        assert_eq!(u.history_and_target(Split::Valid), Some((vec!["a"], "b")));
        assert_eq!(u.history_and_target(Split::Test), Some((vec!["a", "b"], "c")));
    }

    #[test]
    fn synthetic_test_targets_are_last_by_direct_scan() {
        let cfg = SynthConfig {
            n_users: 100,
            n_items: 200,
            n_clusters: 4,
            ..Default::default()
        };
        let corpus = synth_corpus(&cfg).unwrap();
        let split = leave_one_out(&build_sequences(&corpus.interactions, 20));
        assert_eq!(split.len(), 100);
        for u in &split.users {
            // independent scan for the latest (timestamp, item) of this user
            let last = corpus
                .interactions
                .iter()
                .filter(|x| x.user_id == u.user_id)
                .max_by(|a, b| (a.timestamp, &a.item_id).cmp(&(b.timestamp, &b.item_id)))
                .unwrap();
            assert_eq!(u.test_target, last.item_id);
            assert!(!u.train_items.contains(&u.test_target));
        }
    }

    #[test]
    fn interactions_tsv_round_trip_and_errors() {
        let data = vec![ix("u1", "a", 3), ix("u2", "b", 0)];
        let mut buf = vec![];
        write_interactions(&data, &mut buf).unwrap();
        assert_eq!(read_interactions(&buf[..]).unwrap(), data);
        assert_eq!(read_interactions(&b"u\ti\t5\n"[..]).unwrap(), vec![ix("u", "i", 5)]);
        assert!(matches!(
            read_interactions(&b"u\ti\t5\nu\ti\n"[..]),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(read_interactions(&b"u\ti\tx\n"[..]), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(read_interactions(&b"u\ti\t-1\n"[..]), Err(Error::Range(_))));
    }

    fn arb_interactions() -> impl Strategy<Value = Vec<Interaction>> {
        proptest::collection::vec((0u8..12, 0u8..10, 0i64..50), 0..200).prop_map(|v| {
            v.into_iter()
                .map(|(u, i, t)| ix(&format!("u{u}"), &format!("i{i}"), t))
                .collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn filter_is_idempotent_and_reaches_core(data in arb_interactions()) {
            let once = five_core_filter(&data);
            prop_assert_eq!(&five_core_filter(&once), &once);
            let mut users: HashMap<&str, usize> = HashMap::new();
            let mut items: HashMap<&str, usize> = HashMap::new();
            for x in &once {
                *users.entry(&x.user_id).or_default() += 1;
                *items.entry(&x.item_id).or_default() += 1;
            }
            prop_assert!(users.values().chain(items.values()).all(|&c| c >= 5));
        }

        #[test]
        fn sequences_are_bounded_subsequences(data in arb_interactions(), max_len in 1usize..8) {
            for s in build_sequences(&data, max_len) {
                prop_assert!(s.items.len() <= max_len);
                let mine: Vec<&Interaction> = data.iter().filter(|x| x.user_id == s.user_id).collect();
                prop_assert_eq!(s.items.len(), mine.len().min(max_len));
                for item in &s.items {
                    prop_assert!(mine.iter().any(|x| &x.item_id == item));
                }
            }
        }
    }
}
