//! End-to-end orchestration: one JSON config drives synth, index-train,
//! index-assign, instruct-gen, rec-train and rec-eval. Every stage stamps its
//! outputs with [`ArtifactMeta`] and records a fingerprint of its config slice
//! and input files, so rerunning an unchanged stage is a no-op.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{
    build_sequences, index_texts, synth_corpus, SynthConfig, k_core_filter, leave_one_out, load_interactions, load_jsonl, save_interactions,
    save_jsonl, ItemText, LooSplit, Split, DEFAULT_MAX_LEN, MIN_INTERACTIONS,
};
use crate::embed::{load_embeddings, save_embeddings};
use crate::error::{Error, Result};
use crate::indexstore::{assign_indices, IndexMap};
use crate::instruct::{
    epoch_sample, gen_mutual, gen_split, write_epoch, IntentionRecord, PreferenceRecord, Sources,
    TemplateBank, TokenValidator,
};
use crate::metrics::MetricsReport;
use crate::recgen::{evaluate, fit, save_predictions, EvalConfig, ModelConfig, RecCheckpoint, RecTrainConfig, SeqModel, Vocab};
use crate::rqvae::{self, RqVaeCheckpoint, RqVaeConfig, TrainConfig};
use crate::util::{mix_seed, sha256_hex, ArtifactMeta};

/// Input and output locations. Unset inputs default to the files `synth`
/// writes under `output_dir/corpus/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub output_dir: PathBuf,
    pub embeddings: Option<PathBuf>,
    pub interactions: Option<PathBuf>,
    pub texts: Option<PathBuf>,
    pub intentions: Option<PathBuf>,
    pub preferences: Option<PathBuf>,
    pub templates: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            embeddings: None,
            interactions: None,
            texts: None,
            intentions: None,
            preferences: None,
            templates: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Users and items below this many interactions are filtered iteratively.
    pub min_interactions: usize,
    /// Most recent items kept per user before the leave-one-out split.
    pub max_seq_len: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            min_interactions: MIN_INTERACTIONS,
            max_seq_len: DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstructConfig {
    pub epochs: u64,
}

impl Default for InstructConfig {
    fn default() -> Self {
        Self { epochs: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Overrides every module seed.
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub corpus: CorpusConfig,
    pub rqvae: RqVaeConfig,
    pub index_train: TrainConfig,
    pub instruct: InstructConfig,
    pub recgen: ModelConfig,
    pub rec_train: RecTrainConfig,
    pub eval: EvalConfig,
    pub eval_split: Split,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            corpus: CorpusConfig::default(),
            rqvae: RqVaeConfig::default(),
            index_train: TrainConfig::default(),
            instruct: InstructConfig::default(),
            recgen: ModelConfig::default(),
            rec_train: RecTrainConfig::default(),
            eval: EvalConfig::default(),
            eval_split: Split::Test,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Set the global seed and propagate it to every module.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.index_train.seed = seed;
        self.rec_train.seed = seed;
        self
    }

    /// Apply a `dotted.key=value` override. The value is parsed as JSON and
    /// falls back to a plain string.
    pub fn set(self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = value;
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("`{key}`: {e}")))?;
        let seed = cfg.seed;
        Ok(if key == "seed" { cfg.with_seed(seed) } else { cfg })
    }

    pub fn validate(&self) -> Result<()> {
        self.index_train.validate()?;
        self.recgen.validate()?;
        self.rec_train.validate()?;
        if self.eval.beam == 0 || self.eval.ks.is_empty() {
            return Err(Error::Config("eval needs a beam of at least 1 and at least one cutoff".into()));
        }
        if self.corpus.max_seq_len < 3 {
            return Err(Error::Config("max_seq_len must be at least 3 for a leave-one-out split".into()));
        }
        Ok(())
    }

    /// Hash of everything except `paths.output_dir`, so the same run in
    /// another directory yields byte-identical artifacts.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.output_dir = PathBuf::new();
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    pub fn meta(&self) -> ArtifactMeta {
        ArtifactMeta::new(self.seed, self.hash())
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.paths.output_dir.join(rel)
    }

    pub fn embeddings_path(&self) -> PathBuf {
        self.paths.embeddings.clone().unwrap_or_else(|| self.out("corpus/embeddings.tsv"))
    }

    pub fn interactions_path(&self) -> PathBuf {
        self.paths.interactions.clone().unwrap_or_else(|| self.out("corpus/interactions.tsv"))
    }

    pub fn texts_path(&self) -> PathBuf {
        self.paths.texts.clone().unwrap_or_else(|| self.out("corpus/items.jsonl"))
    }

    pub fn rqvae_path(&self) -> PathBuf {
        self.out("index/rqvae.json")
    }

    pub fn index_path(&self) -> PathBuf {
        self.out("index/items.index.tsv")
    }

    pub fn instruct_dir(&self) -> PathBuf {
        self.out("instruct")
    }

    pub fn model_path(&self) -> PathBuf {
        self.out("rec/model.json")
    }

    pub fn predictions_path(&self) -> PathBuf {
        self.out("rec/predictions.tsv")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out("rec/metrics.json")
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.out(&format!("stamps/{}.json", stage.name()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    IndexTrain,
    IndexAssign,
    InstructGen,
    RecTrain,
    RecEval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Synth,
        Stage::IndexTrain,
        Stage::IndexAssign,
        Stage::InstructGen,
        Stage::RecTrain,
        Stage::RecEval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::IndexTrain => "index-train",
            Stage::IndexAssign => "index-assign",
            Stage::InstructGen => "instruct-gen",
            Stage::RecTrain => "rec-train",
            Stage::RecEval => "rec-eval",
        }
    }

    fn inputs(self, cfg: &PipelineConfig) -> Vec<PathBuf> {
        let mut v = match self {
            Stage::Synth => vec![],
            Stage::IndexTrain => vec![cfg.embeddings_path()],
            Stage::IndexAssign => vec![cfg.embeddings_path(), cfg.rqvae_path()],
            Stage::InstructGen => vec![cfg.interactions_path(), cfg.texts_path(), cfg.index_path()],
            Stage::RecTrain => vec![cfg.interactions_path(), cfg.index_path()],
            Stage::RecEval => vec![cfg.interactions_path(), cfg.index_path(), cfg.model_path()],
        };
        if self == Stage::InstructGen {
            v.extend(
                [&cfg.paths.intentions, &cfg.paths.preferences, &cfg.paths.templates]
                    .into_iter()
                    .flatten()
                    .cloned(),
            );
        }
        v
    }

    /// The part of the config this stage depends on.
    fn config_slice(self, cfg: &PipelineConfig) -> Value {
        let v = match self {
            Stage::Synth => serde_json::json!({ "synth": cfg.synth }),
            Stage::IndexTrain => serde_json::json!({ "rqvae": cfg.rqvae, "train": cfg.index_train }),
            Stage::IndexAssign => Value::Null,
            Stage::InstructGen => serde_json::json!({ "corpus": cfg.corpus, "instruct": cfg.instruct, "seed": cfg.seed }),
            Stage::RecTrain => serde_json::json!({
                "corpus": cfg.corpus, "model": cfg.recgen, "train": cfg.rec_train, "seed": cfg.seed
            }),
            Stage::RecEval => serde_json::json!({ "corpus": cfg.corpus, "eval": cfg.eval, "split": cfg.eval_split }),
        };
        serde_json::json!({ "stage": self.name(), "config": v, "version": env!("CARGO_PKG_VERSION") })
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Stamp {
    fingerprint: String,
    /// Output path and its sha256.
    outputs: Vec<(PathBuf, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    /// True when the stamp matched and nothing was recomputed.
    pub skipped: bool,
    pub outputs: Vec<PathBuf>,
    /// Human-readable lines for the console.
    pub summary: Vec<String>,
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn fingerprint(cfg: &PipelineConfig, stage: Stage) -> Result<String> {
    let mut inputs = Vec::new();
    for p in stage.inputs(cfg) {
        if !p.is_file() {
            return Err(Error::Config(format!(
                "{}: input {} does not exist",
                stage.name(),
                p.display()
            )));
        }
        inputs.push((p.display().to_string(), file_hash(&p)?));
    }
    let doc = serde_json::json!({ "slice": stage.config_slice(cfg), "inputs": inputs });
    Ok(sha256_hex(doc.to_string().as_bytes()))
}

fn stamp_is_current(cfg: &PipelineConfig, stage: Stage, fp: &str) -> Option<Vec<PathBuf>> {
    let text = fs::read_to_string(cfg.stamp_path(stage)).ok()?;
    let stamp: Stamp = serde_json::from_str(&text).ok()?;
    if stamp.fingerprint != fp {
        return None;
    }
    for (p, h) in &stamp.outputs {
        if file_hash(p).ok()? != *h {
            return None;
        }
    }
    Some(stamp.outputs.into_iter().map(|(p, _)| p).collect())
}

fn write_stamp(cfg: &PipelineConfig, stage: Stage, fp: String, outputs: &[PathBuf]) -> Result<()> {
    let stamp = Stamp {
        fingerprint: fp,
        outputs: outputs
            .iter()
            .map(|p| Ok((p.clone(), file_hash(p)?)))
            .collect::<Result<_>>()?,
    };
    write_json(&cfg.stamp_path(stage), &stamp)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Schema(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Metadata for artifacts whose own format has no room for it.
pub fn meta_sidecar(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

fn write_with_sidecar(path: &Path, meta: &ArtifactMeta, outputs: &mut Vec<PathBuf>) -> Result<()> {
    let side = meta_sidecar(path);
    write_json(&side, meta)?;
    outputs.push(path.to_path_buf());
    outputs.push(side);
    Ok(())
}

/// Interactions filtered, truncated and split as configured.
pub fn load_split(cfg: &PipelineConfig) -> Result<LooSplit> {
    let raw = load_interactions(cfg.interactions_path())?;
    let filtered = k_core_filter(&raw, cfg.corpus.min_interactions);
    let seqs = build_sequences(&filtered, cfg.corpus.max_seq_len);
    let loo = leave_one_out(&seqs);
    if loo.is_empty() {
        return Err(Error::Domain(format!(
            "no users left after {}-core filtering and the leave-one-out split",
            cfg.corpus.min_interactions
        )));
    }
    info!("{} interactions, {} after filtering, {} users", raw.len(), filtered.len(), loo.len());
    Ok(loo)
}

/// Run one stage unless its stamp shows the outputs are current.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage, force: bool) -> Result<StageOutcome> {
    cfg.validate()?;
    let fp = fingerprint(cfg, stage)?;
    if !force {
        if let Some(outputs) = stamp_is_current(cfg, stage, &fp) {
            info!("{}: outputs are current, skipped", stage.name());
            return Ok(StageOutcome {
                stage,
                skipped: true,
                outputs,
                summary: vec![format!("{}: up to date", stage.name())],
            });
        }
    }
    let (outputs, summary) = match stage {
        Stage::Synth => run_synth(cfg)?,
        Stage::IndexTrain => run_index_train(cfg)?,
        Stage::IndexAssign => run_index_assign(cfg)?,
        Stage::InstructGen => run_instruct_gen(cfg)?,
        Stage::RecTrain => run_rec_train(cfg)?,
        Stage::RecEval => run_rec_eval(cfg)?,
    };
    write_stamp(cfg, stage, fp, &outputs)?;
    Ok(StageOutcome {
        stage,
        skipped: false,
        outputs,
        summary,
    })
}

type StageResult = Result<(Vec<PathBuf>, Vec<String>)>;

fn run_synth(cfg: &PipelineConfig) -> StageResult {
    let corpus = synth_corpus(&cfg.synth)?;
    let meta = cfg.meta();
    let mut outputs = Vec::new();
    let (ip, tp, ep) = (cfg.interactions_path(), cfg.texts_path(), cfg.embeddings_path());
    for p in [&ip, &tp, &ep] {
        ensure_parent(p)?;
    }
    save_interactions(&corpus.interactions, &ip)?;
    write_with_sidecar(&ip, &meta, &mut outputs)?;
    save_jsonl(&corpus.texts, &tp)?;
    write_with_sidecar(&tp, &meta, &mut outputs)?;
    save_embeddings(&corpus.embeddings, &ep)?;
    write_with_sidecar(&ep, &meta, &mut outputs)?;
    let clusters = cfg.out("corpus/clusters.json");
    let planted: BTreeMap<&str, usize> = corpus
        .embeddings
        .items()
        .iter()
        .map(String::as_str)
        .zip(corpus.clusters.iter().copied())
        .collect();
    write_json(
        &clusters,
        &serde_json::json!({ "clusters": planted, "duplicates": corpus.duplicates, "meta": meta }),
    )?;
    outputs.push(clusters);
    Ok((
        outputs,
        vec![format!(
            "synth: {} items, {} interactions, {} duplicate pairs",
            corpus.embeddings.len(),
            corpus.interactions.len(),
            corpus.duplicates.len()
        )],
    ))
}

fn run_index_train(cfg: &PipelineConfig) -> StageResult {
    let matrix = load_embeddings(cfg.embeddings_path())?;
    let (model, report) = rqvae::train(&matrix, &cfg.rqvae, &cfg.index_train)?;
    let meta = cfg.meta();
    let ck = cfg.rqvae_path();
    ensure_parent(&ck)?;
    RqVaeCheckpoint::new(&model, &cfg.index_train, Some(meta.clone())).save(&ck)?;
    let rp = cfg.out("index/train_report.json");
    write_json(&rp, &serde_json::json!({ "report": report, "meta": meta }))?;
    Ok((
        vec![ck, rp],
        vec![format!(
            "index-train: {} items, loss {:.4} -> {:.4} over {} epochs",
            matrix.len(),
            report.initial.total,
            report.final_loss.total,
            report.epochs.len()
        )],
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictStats {
    pub items: usize,
    pub unique_before: usize,
    pub groups: usize,
    pub colliding_items: usize,
    pub reassigned: usize,
    /// `(group size, count)` ascending.
    pub size_histogram: Vec<(usize, usize)>,
    pub meta: ArtifactMeta,
}

fn run_index_assign(cfg: &PipelineConfig) -> StageResult {
    let matrix = load_embeddings(cfg.embeddings_path())?;
    let model = RqVaeCheckpoint::load(cfg.rqvae_path())?.model()?;
    let assignment = assign_indices(&model, &matrix)?;
    let meta = cfg.meta();
    let ip = cfg.index_path();
    ensure_parent(&ip)?;
    assignment.map.save(&ip, Some(meta.clone()))?;
    let c = &assignment.conflicts;
    let stats = ConflictStats {
        items: assignment.map.len(),
        unique_before: assignment.unique_before,
        groups: c.groups.len(),
        colliding_items: c.colliding_items(),
        reassigned: c.reassigned,
        size_histogram: c.size_histogram(),
        meta,
    };
    let sp = cfg.out("index/conflicts.json");
    write_json(&sp, &stats)?;
    let sizes = stats
        .size_histogram
        .iter()
        .map(|(s, n)| format!("{n}x{s}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((
        vec![ip.clone(), crate::indexstore::sidecar_path(&ip), sp],
        vec![
            format!(
                "index-assign: {} items, {} unique before resolution",
                stats.items, stats.unique_before
            ),
            format!(
                "conflict groups: {} ({} items; sizes {}), {} reassigned",
                stats.groups,
                stats.colliding_items,
                if sizes.is_empty() { "none".into() } else { sizes },
                stats.reassigned
            ),
        ],
    ))
}

fn load_sidecar<T: for<'de> Deserialize<'de>>(path: Option<&PathBuf>, pair: impl Fn(T) -> (String, String)) -> Result<HashMap<String, String>> {
    match path {
        Some(p) => Ok(load_jsonl::<T>(p)?.into_iter().map(pair).collect()),
        None => Ok(HashMap::new()),
    }
}

fn run_instruct_gen(cfg: &PipelineConfig) -> StageResult {
    let loo = load_split(cfg)?;
    let (map, _) = IndexMap::load(cfg.index_path())?;
    let texts = index_texts(load_jsonl::<ItemText>(cfg.texts_path())?)?;
    let intentions = load_sidecar(cfg.paths.intentions.as_ref(), |r: IntentionRecord| (r.item_id, r.intention))?;
    let preferences = load_sidecar(cfg.paths.preferences.as_ref(), |r: PreferenceRecord| (r.user_id, r.preference))?;
    let bank = match &cfg.paths.templates {
        Some(p) => TemplateBank::load(p)?,
        None => TemplateBank::default(),
    };
    let src = Sources {
        loo: &loo,
        map: &map,
        texts: &texts,
        intentions: &intentions,
        preferences: &preferences,
    };
    let mut groups: Vec<(&str, Vec<_>)> = Vec::new();
    for split in Split::ALL {
        groups.push((split.name(), gen_split(split, &src)?));
    }
    groups.push(("items", gen_mutual(&map, &texts)?));

    let root = cfg.instruct_dir();
    let trie = map.trie();
    let validator = TokenValidator::new(&trie);
    let mut outputs = Vec::new();
    let mut summary = Vec::new();
    for epoch in 0..cfg.instruct.epochs {
        for (group, data) in &groups {
            let sampled = epoch_sample(data, &bank, epoch, cfg.seed);
            for list in sampled.values() {
                for ex in list {
                    validator.check(ex)?;
                }
            }
            outputs.extend(write_epoch(&root, epoch, group, &sampled)?);
            if epoch == 0 {
                let counts = sampled
                    .iter()
                    .map(|(t, l)| format!("{t} {}", l.len()))
                    .collect::<Vec<_>>()
                    .join(", ");
                summary.push(format!("instruct-gen {group}: {counts}"));
            }
        }
    }
    let mp = root.join("meta.json");
    write_json(&mp, &cfg.meta())?;
    outputs.push(mp);
    summary.push(format!("instruct-gen: {} files over {} epochs", outputs.len() - 1, cfg.instruct.epochs));
    Ok((outputs, summary))
}

fn run_rec_train(cfg: &PipelineConfig) -> StageResult {
    let loo = load_split(cfg)?;
    let (map, _) = IndexMap::load(cfg.index_path())?;
    let vocab = Vocab::new(map.levels(), map.codes_per_level())?;
    let mut model = SeqModel::new(cfg.recgen, vocab, mix_seed(cfg.seed, 0x7265_6367))?;
    let report = fit(&mut model, &loo, &map, &cfg.rec_train)?;
    let meta = cfg.meta();
    let mp = cfg.model_path();
    ensure_parent(&mp)?;
    RecCheckpoint::new(&model, &cfg.rec_train, Some(meta.clone())).save(&mp)?;
    let rp = cfg.out("rec/train_report.json");
    write_json(&rp, &serde_json::json!({ "report": report, "meta": meta }))?;
    let last = report.epochs.last().map_or(report.initial_valid_nll, |e| e.valid_nll);
    Ok((
        vec![mp, rp],
        vec![format!(
            "rec-train: {} users, {} parameters, valid NLL {:.4} -> {:.4}",
            loo.len(),
            model.num_params(),
            report.initial_valid_nll,
            last
        )],
    ))
}

fn run_rec_eval(cfg: &PipelineConfig) -> StageResult {
    let loo = load_split(cfg)?;
    let (map, _) = IndexMap::load(cfg.index_path())?;
    let model = RecCheckpoint::load(cfg.model_path())?.model()?;
    let trie = map.trie();
    let (preds, mut report) = evaluate(&model, &loo, &map, &trie, cfg.eval_split, &cfg.eval)?;
    let meta = cfg.meta();
    report.meta = Some(meta.clone());
    let pp = cfg.predictions_path();
    ensure_parent(&pp)?;
    save_predictions(&preds, &pp)?;
    let mut outputs = Vec::new();
    write_with_sidecar(&pp, &meta, &mut outputs)?;
    let mp = cfg.metrics_path();
    write_json(&mp, &report)?;
    outputs.push(mp);
    let metrics = report
        .metrics
        .iter()
        .map(|(k, v)| format!("{k} {v:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((
        outputs,
        vec![format!(
            "rec-eval ({} split, beam {}): {} users, {metrics}",
            cfg.eval_split.name(),
            cfg.eval.beam,
            report.users
        )],
    ))
}

pub fn load_metrics(path: impl AsRef<Path>) -> Result<MetricsReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}
