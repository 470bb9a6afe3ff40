//! Instruction data that aligns index tokens with item language and user
//! behaviour: sequential prediction, index/language translation, asymmetric
//! prediction, intention queries and preference inference.
//!
//! Generators produce template-free [`Datum`]s; [`epoch_sample`] pairs every
//! datum with one template per epoch and renders JSONL.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::Rng as _;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{ItemText, LooSplit, Split};
use crate::error::{Error, Result};
use crate::indexstore::{parse_token_form, IndexMap, IndexTrie};
use crate::util::{mix_seed, seeded_rng, stable_hash};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "SEQ")]
    Seq,
    #[serde(rename = "MUT_I2L")]
    MutI2l,
    #[serde(rename = "MUT_L2I")]
    MutL2i,
    #[serde(rename = "ASY_TITLE")]
    AsyTitle,
    #[serde(rename = "ASY_DESC")]
    AsyDesc,
    #[serde(rename = "ASY_TITLESEQ")]
    AsyTitleSeq,
    #[serde(rename = "ITE_QUERY")]
    IteQuery,
    #[serde(rename = "ITE_PERSONAL")]
    ItePersonal,
    #[serde(rename = "PER")]
    Per,
}

impl Task {
    pub const ALL: [Task; 9] = [
        Task::Seq,
        Task::MutI2l,
        Task::MutL2i,
        Task::AsyTitle,
        Task::AsyDesc,
        Task::AsyTitleSeq,
        Task::IteQuery,
        Task::ItePersonal,
        Task::Per,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Seq => "SEQ",
            Task::MutI2l => "MUT_I2L",
            Task::MutL2i => "MUT_L2I",
            Task::AsyTitle => "ASY_TITLE",
            Task::AsyDesc => "ASY_DESC",
            Task::AsyTitleSeq => "ASY_TITLESEQ",
            Task::IteQuery => "ITE_QUERY",
            Task::ItePersonal => "ITE_PERSONAL",
            Task::Per => "PER",
        }
    }

    /// Item-level tasks are emitted once, independent of the user split.
    pub fn is_item_level(self) -> bool {
        matches!(self, Task::MutI2l | Task::MutL2i)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slot {
    #[serde(rename = "HISTORY")]
    History,
    #[serde(rename = "TITLE")]
    Title,
    #[serde(rename = "DESC")]
    Desc,
    #[serde(rename = "INDEX")]
    Index,
    #[serde(rename = "QUERY")]
    Query,
}

impl Slot {
    pub const ALL: [Slot; 5] = [Slot::History, Slot::Title, Slot::Desc, Slot::Index, Slot::Query];

    pub fn placeholder(self) -> &'static str {
        match self {
            Slot::History => "{HISTORY}",
            Slot::Title => "{TITLE}",
            Slot::Desc => "{DESC}",
            Slot::Index => "{INDEX}",
            Slot::Query => "{QUERY}",
        }
    }
}

/// Which template list a datum draws from. Language-to-index has a
/// title-only variant for items without a description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateKey {
    Seq,
    MutI2l,
    MutL2i,
    MutL2iTitleOnly,
    AsyTitle,
    AsyDesc,
    AsyTitleSeq,
    IteQuery,
    ItePersonal,
    Per,
}

impl TemplateKey {
    pub const ALL: [TemplateKey; 10] = [
        TemplateKey::Seq,
        TemplateKey::MutI2l,
        TemplateKey::MutL2i,
        TemplateKey::MutL2iTitleOnly,
        TemplateKey::AsyTitle,
        TemplateKey::AsyDesc,
        TemplateKey::AsyTitleSeq,
        TemplateKey::IteQuery,
        TemplateKey::ItePersonal,
        TemplateKey::Per,
    ];

    pub fn task(self) -> Task {
        match self {
            TemplateKey::Seq => Task::Seq,
            TemplateKey::MutI2l => Task::MutI2l,
            TemplateKey::MutL2i | TemplateKey::MutL2iTitleOnly => Task::MutL2i,
            TemplateKey::AsyTitle => Task::AsyTitle,
            TemplateKey::AsyDesc => Task::AsyDesc,
            TemplateKey::AsyTitleSeq => Task::AsyTitleSeq,
            TemplateKey::IteQuery => Task::IteQuery,
            TemplateKey::ItePersonal => Task::ItePersonal,
            TemplateKey::Per => Task::Per,
        }
    }

    pub fn slots(self) -> &'static [Slot] {
        match self {
            TemplateKey::Seq | TemplateKey::AsyTitle | TemplateKey::AsyDesc => &[Slot::History],
            TemplateKey::AsyTitleSeq | TemplateKey::Per => &[Slot::History],
            TemplateKey::MutI2l => &[Slot::Index],
            TemplateKey::MutL2i => &[Slot::Title, Slot::Desc],
            TemplateKey::MutL2iTitleOnly => &[Slot::Title],
            TemplateKey::IteQuery => &[Slot::Query],
            TemplateKey::ItePersonal => &[Slot::History, Slot::Query],
        }
    }
}

/// Instruction templates per key. Every template must contain each of its
/// key's placeholders exactly once and no other placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateBank {
    pub templates: BTreeMap<TemplateKey, Vec<String>>,
}

pub const MIN_TEMPLATES: usize = 3;

impl TemplateBank {
    pub fn new(templates: BTreeMap<TemplateKey, Vec<String>>) -> Result<Self> {
        for key in TemplateKey::ALL {
            let list = templates
                .get(&key)
                .ok_or_else(|| Error::Config(format!("template bank has no templates for {key:?}")))?;
            if list.len() < MIN_TEMPLATES {
                return Err(Error::Config(format!(
                    "{key:?} needs at least {MIN_TEMPLATES} templates, has {}",
                    list.len()
                )));
            }
            for t in list {
                for slot in Slot::ALL {
                    let want = usize::from(key.slots().contains(&slot));
                    let have = t.matches(slot.placeholder()).count();
                    if have != want {
                        return Err(Error::Config(format!(
                            "{key:?} template {t:?} has {} {have} times, expected {want}",
                            slot.placeholder()
                        )));
                    }
                }
            }
        }
        Ok(Self { templates })
    }

    pub fn get(&self, key: TemplateKey) -> &[String] {
        &self.templates[&key]
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: BTreeMap<TemplateKey, Vec<String>> = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::new(raw)
    }
}

impl Default for TemplateBank {
    fn default() -> Self {
        let raw: [(TemplateKey, [&str; 3]); 10] = [
            (TemplateKey::Seq, [
                "The user has interacted with these items, oldest first: {HISTORY}. Recommend the item they are most likely to interact with next.",
                "Given the interaction history {HISTORY}, which item should this user see next?",
                "A user's past items in order are {HISTORY}. Predict their next item.",
            ]),
            (TemplateKey::MutI2l, [
                "Describe the item identified by {INDEX}: give its title and description.",
                "What is the item {INDEX}? Reply with its title and description.",
                "Recover the title and description of item {INDEX}.",
            ]),
            (TemplateKey::MutL2i, [
                "An item is titled \"{TITLE}\" and described as: {DESC} Which item index does it have?",
                "Give the index of the item with title \"{TITLE}\" and description \"{DESC}\".",
                "Title: {TITLE}\nDescription: {DESC}\nName the matching item index.",
            ]),
            (TemplateKey::MutL2iTitleOnly, [
                "Which item index belongs to the item titled \"{TITLE}\"?",
                "Give the index of the item called \"{TITLE}\".",
                "Title: {TITLE}\nName the matching item index.",
            ]),
            (TemplateKey::AsyTitle, [
                "The user has interacted with {HISTORY}, oldest first. Give the title of the item they will interact with next.",
                "From the history {HISTORY}, predict the title of the user's next item.",
                "Interaction history: {HISTORY}. What is the title of the next item for this user?",
            ]),
            (TemplateKey::AsyDesc, [
                "The user has interacted with {HISTORY}, oldest first. Describe the item they will interact with next.",
                "From the history {HISTORY}, write the description of the user's next item.",
                "Interaction history: {HISTORY}. What does the user's next item look like? Give its description.",
            ]),
            (TemplateKey::AsyTitleSeq, [
                "The user has bought items titled {HISTORY}, oldest first. Recommend the index of their next item.",
                "Titles of the user's past items: {HISTORY}. Which item index comes next?",
                "Given purchases {HISTORY}, predict the next item and answer with its index.",
            ]),
            (TemplateKey::IteQuery, [
                "Act as a product search engine. A user asks: \"{QUERY}\". Answer with the index of the best matching item.",
                "Find the item that fits this request: {QUERY}",
                "Search query: {QUERY}\nReturn the index of the most suitable item.",
            ]),
            (TemplateKey::ItePersonal, [
                "A user with history {HISTORY} says: \"{QUERY}\". Recommend an item index that fits both.",
                "Given past items {HISTORY} and the current need \"{QUERY}\", which item should we recommend?",
                "History: {HISTORY}\nRequest: {QUERY}\nAnswer with the index of the recommended item.",
            ]),
            (TemplateKey::Per, [
                "The user has interacted with {HISTORY}, oldest first. Estimate what this user likes.",
                "Infer the preferences of a user whose history is {HISTORY}.",
                "History: {HISTORY}\nSummarise the user's preferences.",
            ]),
        ];
        let templates = raw
            .into_iter()
            .map(|(k, ts)| (k, ts.iter().map(|t| t.to_string()).collect()))
            .collect();
        Self::new(templates).expect("built-in template bank is well formed")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Sidecar,
    Surrogate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Provenance {
    pub intention: Option<Source>,
    pub preference: Option<Source>,
}

/// One instruction datum before a template is chosen.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Datum {
    pub key: TemplateKey,
    pub user_id: Option<String>,
    pub item_id: Option<String>,
    pub slots: BTreeMap<Slot, String>,
    pub response: String,
    pub provenance: Provenance,
}

impl Datum {
    pub fn task(&self) -> Task {
        self.key.task()
    }

    fn sort_key(&self) -> (Task, Option<&str>, Option<&str>) {
        (self.task(), self.user_id.as_deref(), self.item_id.as_deref())
    }

    pub fn render(&self, template: &str) -> String {
        let mut out = template.to_string();
        for (slot, value) in &self.slots {
            out = out.replace(slot.placeholder(), value);
        }
        out
    }
}

/// A rendered JSONL record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub task: Task,
    pub instruction: String,
    pub response: String,
    pub user_id: Option<String>,
    pub item_id: Option<String>,
    pub provenance: Provenance,
}

/// Item-level intention sidecar record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentionRecord {
    pub item_id: String,
    pub intention: String,
}

/// User-level preference sidecar record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub user_id: String,
    pub preference: String,
}

pub const INTENTION_SURROGATE_CHARS: usize = 200;
pub const PREFERENCE_SURROGATE_ITEMS: usize = 3;

fn tokens(map: &IndexMap, item: &str) -> Result<String> {
    map.tokens(item)
        .ok_or_else(|| Error::Generation(format!("item `{item}` has no semantic index")))
}

fn history_tokens(map: &IndexMap, history: &[&str]) -> Result<String> {
    Ok(history
        .iter()
        .map(|i| tokens(map, i))
        .collect::<Result<Vec<_>>>()?
        .join(", "))
}

fn user_datum(key: TemplateKey, user: &str, item: &str, slots: Vec<(Slot, String)>, response: String) -> Datum {
    Datum {
        key,
        user_id: Some(user.to_string()),
        item_id: Some(item.to_string()),
        slots: slots.into_iter().collect(),
        response,
        provenance: Provenance::default(),
    }
}

/// Next-item prediction over index tokens.
pub fn gen_seq(split: Split, loo: &LooSplit, map: &IndexMap) -> Result<Vec<Datum>> {
    let mut out = Vec::with_capacity(loo.len());
    for u in &loo.users {
        let Some((history, target)) = u.history_and_target(split) else {
            continue;
        };
        out.push(user_datum(
            TemplateKey::Seq,
            &u.user_id,
            target,
            vec![(Slot::History, history_tokens(map, &history)?)],
            tokens(map, target)?,
        ));
    }
    Ok(out)
}

/// `Item Title: ...` / `Item Description: ...` block used as the index-to-language response.
pub fn item_language(text: &ItemText) -> String {
    if text.description.is_empty() {
        format!("Item Title: {}", text.title)
    } else {
        format!("Item Title: {}\nItem Description: {}", text.title, text.description)
    }
}

/// Both translation directions for every indexed item with a title.
pub fn gen_mutual(map: &IndexMap, texts: &BTreeMap<String, ItemText>) -> Result<Vec<Datum>> {
    let mut out = Vec::with_capacity(2 * map.len());
    let mut skipped = 0;
    for item in map.items() {
        let Some(text) = texts.get(item).filter(|t| !t.title.is_empty()) else {
            skipped += 1;
            continue;
        };
        let index = tokens(map, item)?;
        let datum = |key, slots: Vec<(Slot, String)>, response| Datum {
            key,
            user_id: None,
            item_id: Some(item.clone()),
            slots: slots.into_iter().collect(),
            response,
            provenance: Provenance::default(),
        };
        out.push(datum(TemplateKey::MutI2l, vec![(Slot::Index, index.clone())], item_language(text)));
        let l2i = if text.description.is_empty() {
            datum(TemplateKey::MutL2iTitleOnly, vec![(Slot::Title, text.title.clone())], index)
        } else {
            datum(
                TemplateKey::MutL2i,
                vec![(Slot::Title, text.title.clone()), (Slot::Desc, text.description.clone())],
                index,
            )
        };
        out.push(l2i);
    }
    if skipped > 0 {
        warn!("{skipped} items have no title and get no index/language data");
    }
    Ok(out)
}

/// Asymmetric prediction: index history to target title or description, and
/// title history to target index.
pub fn gen_asymmetric(
    split: Split,
    loo: &LooSplit,
    map: &IndexMap,
    texts: &BTreeMap<String, ItemText>,
) -> Result<Vec<Datum>> {
    let mut out = Vec::new();
    let title = |i: &str| texts.get(i).map(|t| t.title.as_str()).filter(|t| !t.is_empty());
    for u in &loo.users {
        let Some((history, target)) = u.history_and_target(split) else {
            continue;
        };
        let hist = history_tokens(map, &history)?;
        if let Some(t) = title(target) {
            out.push(user_datum(
                TemplateKey::AsyTitle,
                &u.user_id,
                target,
                vec![(Slot::History, hist.clone())],
                t.to_string(),
            ));
        }
        if let Some(d) = texts.get(target).map(|t| &t.description).filter(|d| !d.is_empty()) {
            out.push(user_datum(
                TemplateKey::AsyDesc,
                &u.user_id,
                target,
                vec![(Slot::History, hist)],
                d.clone(),
            ));
        }
        let titles: Option<Vec<String>> = history.iter().map(|i| title(i).map(|t| format!("\"{t}\""))).collect();
        if let Some(titles) = titles {
            out.push(user_datum(
                TemplateKey::AsyTitleSeq,
                &u.user_id,
                target,
                vec![(Slot::History, titles.join(", "))],
                tokens(map, target)?,
            ));
        }
    }
    Ok(out)
}

/// Character-bounded prefix of a description, used when no intention sidecar exists.
pub fn intention_surrogate(description: &str) -> Option<String> {
    let s: String = description.chars().take(INTENTION_SURROGATE_CHARS).collect();
    let s = s.trim().to_string();
    (!s.is_empty()).then_some(s)
}

/// Intention-based prediction, query only and query with history.
pub fn gen_intention(
    split: Split,
    loo: &LooSplit,
    map: &IndexMap,
    texts: &BTreeMap<String, ItemText>,
    intentions: &HashMap<String, String>,
) -> Result<Vec<Datum>> {
    let mut out = Vec::new();
    let mut skipped = BTreeSet::new();
    for u in &loo.users {
        let Some((history, target)) = u.history_and_target(split) else {
            continue;
        };
        let (query, source) = match intentions.get(target) {
            Some(q) => (q.clone(), Source::Sidecar),
            None => match texts.get(target).and_then(|t| intention_surrogate(&t.description)) {
                Some(q) => (q, Source::Surrogate),
                None => {
                    skipped.insert(target);
                    continue;
                }
            },
        };
        let provenance = Provenance {
            intention: Some(source),
            preference: None,
        };
        let response = tokens(map, target)?;
        let mut d = user_datum(
            TemplateKey::IteQuery,
            &u.user_id,
            target,
            vec![(Slot::Query, query.clone())],
            response.clone(),
        );
        d.provenance = provenance;
        out.push(d);
        let mut d = user_datum(
            TemplateKey::ItePersonal,
            &u.user_id,
            target,
            vec![(Slot::History, history_tokens(map, &history)?), (Slot::Query, query)],
            response,
        );
        d.provenance = provenance;
        out.push(d);
    }
    if !skipped.is_empty() {
        warn!(
            "{} target items have neither an intention nor a description; their users were skipped",
            skipped.len()
        );
    }
    Ok(out)
}

/// Titles of up to three history items under the user's most frequent
/// first-level code (most recent first; ties go to the lower code), joined by `; `.
pub fn preference_surrogate(history: &[&str], map: &IndexMap, texts: &BTreeMap<String, ItemText>) -> Option<String> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for i in history {
        if let Some(ix) = map.get(i) {
            *counts.entry(ix.codes()[0]).or_default() += 1;
        }
    }
    let best = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))?.0;
    let titles: Vec<&str> = history
        .iter()
        .rev()
        .filter(|i| map.get(i).is_some_and(|ix| ix.codes()[0] == *best))
        .filter_map(|i| texts.get(*i).map(|t| t.title.as_str()).filter(|t| !t.is_empty()))
        .take(PREFERENCE_SURROGATE_ITEMS)
        .collect();
    (!titles.is_empty()).then(|| titles.join("; "))
}

/// Preference inference from an index-token history.
pub fn gen_preference(
    split: Split,
    loo: &LooSplit,
    map: &IndexMap,
    texts: &BTreeMap<String, ItemText>,
    preferences: &HashMap<String, String>,
) -> Result<Vec<Datum>> {
    let mut out = Vec::new();
    for u in &loo.users {
        let Some((history, target)) = u.history_and_target(split) else {
            continue;
        };
        let (response, source) = match preferences.get(&u.user_id) {
            Some(p) => (p.clone(), Source::Sidecar),
            None => match preference_surrogate(&history, map, texts) {
                Some(p) => (p, Source::Surrogate),
                None => continue,
            },
        };
        let mut d = user_datum(
            TemplateKey::Per,
            &u.user_id,
            target,
            vec![(Slot::History, history_tokens(map, &history)?)],
            response,
        );
        d.provenance.preference = Some(source);
        out.push(d);
    }
    Ok(out)
}

/// Everything needed to generate user-level data.
pub struct Sources<'a> {
    pub loo: &'a LooSplit,
    pub map: &'a IndexMap,
    pub texts: &'a BTreeMap<String, ItemText>,
    pub intentions: &'a HashMap<String, String>,
    pub preferences: &'a HashMap<String, String>,
}

/// All user-level families for one split.
pub fn gen_split(split: Split, src: &Sources<'_>) -> Result<Vec<Datum>> {
    let mut out = gen_seq(split, src.loo, src.map)?;
    out.extend(gen_asymmetric(split, src.loo, src.map, src.texts)?);
    out.extend(gen_intention(split, src.loo, src.map, src.texts, src.intentions)?);
    out.extend(gen_preference(split, src.loo, src.map, src.texts, src.preferences)?);
    Ok(out)
}

/// Pair each datum with one template for `epoch` and return records grouped by
/// task, each group in canonical `(user_id, item_id)` order. Every datum
/// appears exactly once.
pub fn epoch_sample(data: &[Datum], bank: &TemplateBank, epoch: u64, seed: u64) -> BTreeMap<Task, Vec<InstructionExample>> {
    let mut sorted: Vec<&Datum> = data.iter().collect();
    sorted.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()).then_with(|| a.cmp(b)));
    let mut out: BTreeMap<Task, Vec<InstructionExample>> = BTreeMap::new();
    let mut rngs = HashMap::new();
    for d in sorted {
        let task = d.task();
        let rng = rngs
            .entry(task)
            .or_insert_with(|| seeded_rng(mix_seed(mix_seed(seed, epoch), stable_hash(task.name().as_bytes(), 0))));
        let templates = bank.get(d.key);
        let template = &templates[rng.random_range(0..templates.len())];
        out.entry(task).or_default().push(InstructionExample {
            task,
            instruction: d.render(template),
            response: d.response.clone(),
            user_id: d.user_id.clone(),
            item_id: d.item_id.clone(),
            provenance: d.provenance,
        });
    }
    out
}

pub fn to_jsonl(examples: &[InstructionExample]) -> String {
    let mut s = String::new();
    for e in examples {
        s.push_str(&serde_json::to_string(e).expect("examples serialize"));
        s.push('\n');
    }
    s
}

/// `root/epoch_<e>/<split>/<TASK>.jsonl`; item-level tasks go under `items/`.
pub fn output_path(root: &Path, epoch: u64, group: &str, task: Task) -> PathBuf {
    root.join(format!("epoch_{epoch}")).join(group).join(format!("{}.jsonl", task.name()))
}

/// Write one epoch of examples for one group (a split name or `items`).
pub fn write_epoch(root: &Path, epoch: u64, group: &str, examples: &BTreeMap<Task, Vec<InstructionExample>>) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (task, list) in examples {
        let path = output_path(root, epoch, group, *task);
        let dir = path.parent().expect("output path has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        fs::write(&path, to_jsonl(list)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Checks that every run of index tokens in instruction or response text is a
/// complete index of an item in the trie.
pub struct TokenValidator<'a> {
    trie: &'a IndexTrie,
    run: Regex,
}

impl<'a> TokenValidator<'a> {
    pub fn new(trie: &'a IndexTrie) -> Self {
        Self {
            trie,
            run: Regex::new(r"(?:<[a-z]_[0-9]+>)+").expect("static regex"),
        }
    }

    /// Number of index references found; an error names the first bad one.
    pub fn check_text(&self, text: &str) -> Result<usize> {
        let mut n = 0;
        for m in self.run.find_iter(text) {
            let index = parse_token_form(m.as_str()).map_err(|e| {
                Error::Generation(format!("malformed index tokens `{}`: {e}", m.as_str()))
            })?;
            if self.trie.lookup(index.codes()).is_none() {
                return Err(Error::Generation(format!("`{}` is not the index of any item", m.as_str())));
            }
            n += 1;
        }
        Ok(n)
    }

    pub fn check(&self, example: &InstructionExample) -> Result<usize> {
        Ok(self.check_text(&example.instruction)? + self.check_text(&example.response)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::UserSplit;
    use crate::indexstore::SemanticIndex;

    fn fixture() -> (LooSplit, IndexMap, BTreeMap<String, ItemText>) {
        let loo = LooSplit {
            users: vec![UserSplit {
                user_id: "u1".into(),
                train_items: vec!["i1".into(), "i2".into()],
                valid_target: "i3".into(),
                test_target: "i4".into(),
            }],
        };
        let map = IndexMap::new(
            4,
            256,
            vec![
                ("i1".into(), SemanticIndex(vec![124, 192, 41, 17])),
                ("i2".into(), SemanticIndex(vec![124, 3, 0, 0])),
                ("i3".into(), SemanticIndex(vec![66, 1, 2, 3])),
                ("i4".into(), SemanticIndex(vec![124, 9, 9, 9])),
            ],
        )
        .unwrap();
        let texts = [
            ("i1", "Guitar Capo", "Clamps on."),
            ("i2", "Guitar Strings", ""),
            ("i3", "Pokemon Moon - Nintendo 3DS", "A handheld adventure."),
            ("i4", "Tuner", "Clip-on tuner."),
        ]
        .iter()
        .map(|(i, t, d)| {
            (
                i.to_string(),
                ItemText {
                    item_id: i.to_string(),
                    title: t.to_string(),
                    description: d.to_string(),
                },
            )
        })
        .collect();
        (loo, map, texts)
    }

    #[test]
    fn default_bank_is_valid_and_rejects_bad_templates() {
        let bank = TemplateBank::default();
        let mut raw = bank.templates.clone();
        raw.get_mut(&TemplateKey::Seq).unwrap()[0] = "no placeholder".into();
        assert!(matches!(TemplateBank::new(raw), Err(Error::Config(_))));
        let mut raw = bank.templates.clone();
        raw.get_mut(&TemplateKey::IteQuery).unwrap()[1] = "{QUERY} {HISTORY}".into();
        assert!(TemplateBank::new(raw).is_err());
        let mut raw = bank.templates;
        raw.get_mut(&TemplateKey::Per).unwrap().pop();
        assert!(TemplateBank::new(raw).is_err());
    }

    #[test]
    fn seq_uses_token_forms() {
        let (loo, map, _) = fixture();
        let d = &gen_seq(Split::Valid, &loo, &map).unwrap()[0];
        assert_eq!(d.slots[&Slot::History], "<a_124><b_192><c_41><d_17>, <a_124><b_3><c_0><d_0>");
        assert_eq!(d.response, "<a_66><b_1><c_2><d_3>");
        let d = &gen_seq(Split::Train, &loo, &map).unwrap()[0];
        assert_eq!(d.slots[&Slot::History], "<a_124><b_192><c_41><d_17>");
        assert_eq!(d.item_id.as_deref(), Some("i2"));
    }

    #[test]
    fn missing_index_is_a_generation_error() {
        let (mut loo, map, _) = fixture();
        loo.users[0].test_target = "ghost".into();
        match gen_seq(Split::Test, &loo, &map) {
            Err(Error::Generation(m)) => assert!(m.contains("ghost")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mutual_pairs_and_title_only_variant() {
        let (_, map, texts) = fixture();
        let data = gen_mutual(&map, &texts).unwrap();
        assert_eq!(data.len(), 8);
        let l2i: Vec<_> = data.iter().filter(|d| d.task() == Task::MutL2i).collect();
        assert_eq!(l2i[1].key, TemplateKey::MutL2iTitleOnly);
        assert_eq!(parse_token_form(&l2i[2].response).unwrap(), map.get("i3").unwrap().clone());
        let i2l = data.iter().find(|d| d.task() == Task::MutI2l && d.item_id.as_deref() == Some("i3")).unwrap();
        assert_eq!(i2l.response, "Item Title: Pokemon Moon - Nintendo 3DS\nItem Description: A handheld adventure.");
    }

    #[test]
    fn asymmetric_variants() {
        let (loo, map, texts) = fixture();
        let data = gen_asymmetric(Split::Train, &loo, &map, &texts).unwrap();
        let by = |t| data.iter().find(|d| d.task() == t).unwrap();
        assert_eq!(by(Task::AsyTitle).response, "Guitar Strings");
        // i2 has no description
        assert!(data.iter().all(|d| d.task() != Task::AsyDesc));
        assert_eq!(by(Task::AsyTitleSeq).slots[&Slot::History], "\"Guitar Capo\"");
        assert_eq!(by(Task::AsyTitleSeq).response, "<a_124><b_3><c_0><d_0>");
    }

    #[test]
    fn intention_sidecar_wins_over_surrogate() {
        let (loo, map, texts) = fixture();
        let none = HashMap::new();
        let data = gen_intention(Split::Valid, &loo, &map, &texts, &none).unwrap();
        assert_eq!(data[0].slots[&Slot::Query], "A handheld adventure.");
        assert_eq!(data[0].provenance.intention, Some(Source::Surrogate));
        let side: HashMap<String, String> = [("i3".to_string(), "a fun 3DS game".to_string())].into();
        let data = gen_intention(Split::Valid, &loo, &map, &texts, &side).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data[1].slots[&Slot::Query], "a fun 3DS game");
        assert_eq!(data[1].provenance.intention, Some(Source::Sidecar));
        // i2 has no description and no sidecar
        assert!(gen_intention(Split::Train, &loo, &map, &texts, &none).unwrap().is_empty());
    }

    #[test]
    fn surrogate_is_bounded() {
        let long = "x".repeat(500);
        assert_eq!(intention_surrogate(&long).unwrap().len(), 200);
        assert_eq!(intention_surrogate("  "), None);
    }

    #[test]
    fn preference_surrogate_uses_dominant_first_code() {
        let (loo, map, texts) = fixture();
        let data = gen_preference(Split::Test, &loo, &map, &texts, &HashMap::new()).unwrap();
        // history i1, i2 (code 124) and i3 (code 66): most recent first
        assert_eq!(data[0].response, "Guitar Strings; Guitar Capo");
        assert_eq!(data[0].provenance.preference, Some(Source::Surrogate));
    }

    #[test]
    fn sampling_is_deterministic_and_complete() {
        let (loo, map, texts) = fixture();
        let src = Sources {
            loo: &loo,
            map: &map,
            texts: &texts,
            intentions: &HashMap::new(),
            preferences: &HashMap::new(),
        };
        let data = gen_split(Split::Test, &src).unwrap();
        let bank = TemplateBank::default();
        let a = epoch_sample(&data, &bank, 0, 7);
        assert_eq!(a, epoch_sample(&data, &bank, 0, 7));
        assert_eq!(a.values().map(Vec::len).sum::<usize>(), data.len());
        let trie = map.trie();
        let v = TokenValidator::new(&trie);
        for ex in a.values().flatten() {
            v.check(ex).unwrap();
        }
    }

    #[test]
    fn validator_rejects_unknown_and_malformed_runs() {
        let (_, map, _) = fixture();
        let trie = map.trie();
        let v = TokenValidator::new(&trie);
        assert_eq!(v.check_text("x <a_66><b_1><c_2><d_3>, <a_124><b_3><c_0><d_0>").unwrap(), 2);
        assert!(v.check_text("<a_66><b_1><c_2><d_4>").is_err());
        assert!(v.check_text("<a_66><b_1><c_2>").is_err());
        assert!(v.check_text("<b_1><c_2><d_4><e_1>").is_err());
    }
}
