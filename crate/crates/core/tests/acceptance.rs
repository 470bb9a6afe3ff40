//! Acceptance criteria 1-11, each at its stated tolerance. Run with
//! `cargo test -p lcrec-core --test acceptance -- --nocapture` to see one
//! PASS/FAIL line per criterion.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use lcrec::corpus::Split;
use lcrec::indexstore::{IndexMap, IndexTrie, SemanticIndex};
use lcrec::instruct::{gen_mutual, gen_split, Datum, InstructionExample, Sources, TemplateBank};
use lcrec::linalg::log_sum_exp;
use lcrec::metrics::{hr_at_k, ndcg_at_k, RankedPrediction};
use lcrec::pipeline::{load_split, run_stage, PipelineConfig, Stage};
use lcrec::recgen::{constrained_beam_search, grad_check as rec_grad_check, Example, ModelConfig, SeqModel, Vocab, BOS, SEP};
use lcrec::rqvae::{grad_check, Codebook, RqVae, RqVaeConfig};
use lcrec::usm::sinkhorn;
use lcrec::util::seeded_rng;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use regex::Regex;
use serde_json::Value;

type Check = Result<String, String>;

fn ensure(cond: bool, detail: String) -> Check {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// The default synthetic pipeline (1,000 items, 5 clusters, ~50k
/// interactions), timed stage by stage.
struct Pipeline {
    cfg: PipelineConfig,
    seconds: BTreeMap<&'static str, f64>,
    _dir: tempfile::TempDir,
}

fn run_pipeline() -> Pipeline {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::default().with_seed(7);
    cfg.paths.output_dir = dir.path().to_path_buf();
    cfg.instruct.epochs = 2;
    let mut seconds = BTreeMap::new();
    for stage in [Stage::Synth, Stage::IndexTrain, Stage::IndexAssign, Stage::RecTrain, Stage::RecEval] {
        let t = Instant::now();
        let out = run_stage(&cfg, stage, false).unwrap();
        seconds.insert(stage.name(), t.elapsed().as_secs_f64());
        for line in out.summary {
            println!("    {line}");
        }
    }
    Pipeline {
        cfg,
        seconds,
        _dir: dir,
    }
}

fn crit1_conflict_free() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::default().with_seed(11);
    cfg.paths.output_dir = dir.path().to_path_buf();
    cfg.synth.n_items = 10_000;
    cfg.synth.n_users = 200;
    cfg.synth.duplicate_pairs = 100;
    cfg.index_train.epochs = 20;
    run_stage(&cfg, Stage::Synth, false).unwrap();
    run_stage(&cfg, Stage::IndexTrain, false).unwrap();
    let t = Instant::now();
    run_stage(&cfg, Stage::IndexAssign, false).unwrap();
    let secs = t.elapsed().as_secs_f64();

    // read the TSV directly rather than through the validating loader
    let text = fs::read_to_string(cfg.index_path()).unwrap();
    let mut seen = HashSet::new();
    let mut rows = 0;
    for line in text.lines().filter(|l| !l.starts_with("item_id") && !l.is_empty()) {
        let codes: Vec<&str> = line.split('\t').skip(1).collect();
        assert_eq!(codes.len(), 4, "expected one column per level");
        let codes = codes.join(",");
        seen.insert(codes);
        rows += 1;
    }
    let stats = read_json(&dir.path().join("index/conflicts.json"));
    let groups = stats["groups"].as_u64().unwrap();
    ensure(
        rows == 10_000 && seen.len() == 10_000 && groups > 0 && secs < 600.0,
        format!("{rows} items, {} distinct indices, {groups} conflict groups resolved, index-assign {secs:.1}s", seen.len()),
    )
}

fn crit2_sinkhorn() -> Check {
    let mut rng = seeded_rng(2);
    let mut worst_row: f64 = 0.0;
    let mut worst_col: f64 = 0.0;
    for trial in 0..50 {
        let b = [64, 256][trial % 2];
        let k = [16, 256][(trial / 2) % 2];
        let cost: Vec<f64> = (0..b * k).map(|_| rng.random::<f64>()).collect();
        let plan = sinkhorn(&cost, b, k, 0.05, 200).unwrap();
        let target = b as f64 / k as f64;
        worst_row = plan.row_sums().iter().fold(worst_row, |m, r| m.max((r - 1.0).abs()));
        worst_col = plan.col_sums().iter().fold(worst_col, |m, c| m.max((c - target).abs()));
    }
    ensure(
        worst_row <= 1e-6 && worst_col <= 1e-4,
        format!("50 plans, max |row-1| {worst_row:.2e}, max |col-|B|/K| {worst_col:.2e}"),
    )
}

/// Per-level argmin over every code with an explicit distance loop.
fn exhaustive_codes(cb: &Codebook, z: &[f64]) -> Vec<u32> {
    let mut r = z.to_vec();
    let mut out = Vec::new();
    for level in 0..cb.levels() {
        let mut best = (f64::INFINITY, 0usize);
        for k in 0..cb.codes() {
            let v = cb.vector(level, k);
            let d: f64 = r.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, k);
            }
        }
        let v = cb.vector(level, best.1);
        r.iter_mut().zip(v).for_each(|(a, b)| *a -= b);
        out.push(best.1 as u32);
    }
    out
}

fn crit3_quantization_oracle() -> Check {
    let mut rng = seeded_rng(3);
    let mut mismatches = 0;
    let mut total = 0;
    for (levels, codes) in [(1, 32), (2, 16), (3, 32), (3, 2)] {
        let cfg = RqVaeConfig {
            hidden: vec![12],
            d_code: 6,
            levels,
            codes,
        };
        let mut model = RqVae::new(8, &cfg, levels as u64).unwrap();
        let data: Vec<f64> = (0..levels * codes * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        model.codebook = Codebook::from_data(levels, codes, 6, data).unwrap();
        let items: Vec<String> = (0..250).map(|i| format!("v{i}")).collect();
        let emb: Vec<f64> = (0..250 * 8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let matrix = lcrec::embed::EmbeddingMatrix::from_flat(items, 8, emb).unwrap();
        let z = model.encode_all(&matrix).unwrap();
        let batch = model.quantize_all(&matrix).unwrap();
        for i in 0..250 {
            let zi = &z[i * 6..(i + 1) * 6];
            let oracle = exhaustive_codes(&model.codebook, zi);
            total += 1;
            if batch.item_codes(i) != oracle.as_slice() || model.codebook.quantize(zi).codes != oracle {
                mismatches += 1;
            }
        }
    }
    ensure(
        mismatches == 0 && total == 1000,
        format!("{total} vectors, {mismatches} mismatches against exhaustive search"),
    )
}

fn crit4_gradients() -> Check {
    let cfg = RqVaeConfig {
        hidden: vec![12],
        d_code: 4,
        levels: 2,
        codes: 4,
    };
    let mut rq = RqVae::new(6, &cfg, 4).unwrap();
    let mut rng = seeded_rng(4);
    let items: Vec<String> = (0..6).map(|i| format!("v{i}")).collect();
    let emb: Vec<f64> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();
    let matrix = lcrec::embed::EmbeddingMatrix::from_flat(items, 6, emb).unwrap();
    rq.init_codebook(&matrix, 3, 5).unwrap();
    let rq_params = rq.num_params();
    let rq_err = grad_check(&rq, matrix.data(), 6, 0.25).unwrap();

    let mcfg = ModelConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        max_positions: 20,
        ffn_mult: 4,
        init_std: 0.3,
    };
    let vocab = Vocab::new(3, 4).unwrap();
    let model = SeqModel::new(mcfg, vocab, 6).unwrap();
    let ix = |c: [u32; 3]| SemanticIndex(c.to_vec());
    let batch = vec![
        Example::new(&vocab, &[&ix([0, 1, 2]), &ix([3, 3, 0])], &ix([1, 2, 3]), 20, 20).unwrap(),
        Example::new(&vocab, &[&ix([2, 0, 1])], &ix([0, 0, 1]), 20, 20).unwrap(),
    ];
    let rec_err = rec_grad_check(&model, &batch).unwrap();
    ensure(
        rq_params <= 1000 && rq_err < 1e-4 && rec_err < 1e-4,
        format!(
            "RQ-VAE ({rq_params} params) max rel err {rq_err:.2e}; SeqModel (L=2, d=8, {} params) {rec_err:.2e}",
            model.num_params()
        ),
    )
}

fn crit5_training(p: &Pipeline) -> Check {
    let rq = read_json(&p.cfg.paths.output_dir.join("index/train_report.json"));
    let initial = rq["report"]["initial"]["total"].as_f64().unwrap();
    let fin = rq["report"]["final_loss"]["total"].as_f64().unwrap();
    let epochs = rq["report"]["epochs"].as_array().unwrap().len();
    let rec = read_json(&p.cfg.paths.output_dir.join("rec/train_report.json"));
    let nll = |e: usize| rec["report"]["epochs"][e - 1]["valid_nll"].as_f64().unwrap();
    let (e1, e10) = (nll(1), nll(10));
    ensure(
        epochs == 200 && fin < 0.5 * initial && e10 < e1,
        format!(
            "RQ-VAE loss {initial:.4} -> {fin:.4} after {epochs} epochs (ratio {:.3}); valid NLL epoch 1 {e1:.4}, epoch 10 {e10:.4}",
            fin / initial
        ),
    )
}

fn crit6_coherence(p: &Pipeline) -> Check {
    let clusters = read_json(&p.cfg.paths.output_dir.join("corpus/clusters.json"));
    let clusters: BTreeMap<String, u64> = clusters["clusters"]
        .as_object()
        .unwrap()
        .iter()
        .map(|(k, v)| (k.clone(), v.as_u64().unwrap()))
        .collect();
    let (map, _) = IndexMap::load(p.cfg.index_path()).unwrap();
    let items: Vec<&String> = clusters.keys().collect();
    let mut rng = seeded_rng(6);
    let (mut same, mut same_shared, mut cross, mut cross_shared) = (0u64, 0u64, 0u64, 0u64);
    for _ in 0..10_000 {
        let pair: Vec<&&String> = items.choose_multiple(&mut rng, 2).collect();
        let (a, b) = (pair[0].as_str(), pair[1].as_str());
        let shared = map.get(a).unwrap().codes()[0] == map.get(b).unwrap().codes()[0];
        if clusters[a] == clusters[b] {
            same += 1;
            same_shared += shared as u64;
        } else {
            cross += 1;
            cross_shared += shared as u64;
        }
    }
    let rs = same_shared as f64 / same as f64;
    let rc = cross_shared as f64 / cross as f64;
    ensure(
        same > 0 && cross > 0 && rs > 0.0 && rs >= 2.0 * rc,
        format!("same-cluster shared first code {rs:.3} ({same} pairs), cross-cluster {rc:.3} ({cross} pairs)"),
    )
}

/// Full-sequence log-prob of every trie item, best first (ties by codes).
fn exhaustive_ranking(m: &SeqModel, prefix: &[u32], trie: &IndexTrie) -> Vec<(Vec<u32>, f64)> {
    let vocab = *m.vocab();
    let v = vocab.size();
    let start = m.config().max_positions - (prefix.len() + vocab.levels + 1);
    let mut out: Vec<(Vec<u32>, f64)> = trie
        .enumerate()
        .into_iter()
        .map(|(_, ix)| {
            let mut ids = prefix.to_vec();
            ids.extend(ix.codes().iter().enumerate().map(|(l, &c)| vocab.token(l, c)));
            let logits = m.logits_all(&ids[..ids.len() - 1], start).unwrap();
            let score: f64 = ix
                .codes()
                .iter()
                .enumerate()
                .map(|(l, &c)| {
                    let row = &logits[(prefix.len() - 1 + l) * v..(prefix.len() + l) * v];
                    row[vocab.token(l, c) as usize] - log_sum_exp(row)
                })
                .sum();
            (ix.0, score)
        })
        .collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    out
}

fn crit7_constrained_decoding(p: &Pipeline) -> Check {
    // every prediction of the full test split resolves to an indexed item
    let (map, _) = IndexMap::load(p.cfg.index_path()).unwrap();
    let text = fs::read_to_string(p.cfg.predictions_path()).unwrap();
    let mut per_user: BTreeMap<&str, usize> = BTreeMap::new();
    let mut invalid = 0;
    let mut outputs = 0;
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        outputs += 1;
        *per_user.entry(f[0]).or_default() += 1;
        if map.get(f[2]).is_none() {
            invalid += 1;
        }
    }
    let users = load_split(&p.cfg).unwrap().len();

    // beam 20 against exhaustive scoring on small tries where nothing is pruned
    let mut rng = seeded_rng(7);
    let all: Vec<Vec<u32>> = (0..64u32).map(|i| vec![i / 16, (i / 4) % 4, i % 4]).collect();
    let mut worst: f64 = 0.0;
    let mut order_ok = true;
    for trial in 0..20u64 {
        let mut pool = all.clone();
        pool.shuffle(&mut rng);
        let n = rng.random_range(1..=64);
        let trie = IndexTrie::from_entries(
            3,
            pool[..n].iter().enumerate().map(|(i, c)| (format!("i{i}"), SemanticIndex(c.clone()))),
        )
        .unwrap();
        let cfg = ModelConfig {
            layers: 2,
            d_model: 16,
            heads: 2,
            max_positions: 32,
            ffn_mult: 4,
            init_std: 0.5,
        };
        let m = SeqModel::new(cfg, Vocab::new(3, 4).unwrap(), 100 + trial).unwrap();
        let mut prefix = vec![BOS];
        for _ in 0..rng.random_range(0..6) {
            for l in 0..3 {
                prefix.push(m.vocab().token(l, rng.random_range(0..4)));
            }
        }
        prefix.push(SEP);
        let hits = constrained_beam_search(&m, &prefix, &trie, 20).unwrap();
        let oracle = exhaustive_ranking(&m, &prefix, &trie);
        order_ok &= hits.len() == n.min(20);
        for (h, (codes, s)) in hits.iter().zip(&oracle) {
            order_ok &= h.index.0 == *codes;
            worst = worst.max((h.logprob - s).abs());
        }
    }
    ensure(
        invalid == 0 && outputs > 0 && per_user.len() == users && order_ok && worst < 1e-6,
        format!(
            "{outputs} test-split outputs for {users} users, {invalid} invalid; 20 small tries: order {}, max score gap {worst:.1e}",
            if order_ok { "exact" } else { "DIFFERS" }
        ),
    )
}

fn crit8_kv_cache() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let vocab = Vocab::new(4, 256).unwrap();
        let m = SeqModel::new(ModelConfig::default(), vocab, seed).unwrap();
        let mut rng = seeded_rng(1000 + seed);
        let v = vocab.size() as u32;
        let mut ids: Vec<u32> = (0..rng.random_range(1..40)).map(|_| rng.random_range(0..v)).collect();
        let (mut cache, _) = m.prefill(&ids, 0).unwrap();
        for _ in 0..10 {
            let tok = rng.random_range(0..v);
            ids.push(tok);
            let cached = m.decode_step_cached(&mut cache, tok).unwrap();
            let full = m.logits_all(&ids, 0).unwrap();
            let last = &full[(ids.len() - 1) * v as usize..];
            worst = cached.iter().zip(last).fold(worst, |w, (a, b)| w.max((a - b).abs()));
        }
    }
    ensure(worst < 1e-5, format!("20 seeds x 10 steps, max |cached - uncached| {worst:.2e}"))
}

fn crit9_end_to_end(p: &Pipeline) -> Check {
    let report = read_json(&p.cfg.metrics_path());
    let hr10 = report["metrics"]["HR@10"].as_f64().unwrap();
    let interactions = fs::read_to_string(p.cfg.interactions_path()).unwrap().lines().count() - 1;
    let total: f64 = p.seconds.values().sum();
    let stages = p
        .seconds
        .iter()
        .map(|(s, t)| format!("{s} {t:.0}s"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(
        hr10 >= 0.05 && total < 1800.0,
        format!("HR@10 {hr10:.4} (random 0.01) on {interactions} interactions; pipeline {total:.0}s ({stages})"),
    )
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn crit10_instruction_contract(p: &Pipeline) -> Check {
    run_stage(&p.cfg, Stage::InstructGen, false).unwrap();
    let first = files_under(&p.cfg.instruct_dir());
    run_stage(&p.cfg, Stage::InstructGen, true).unwrap();
    let second = files_under(&p.cfg.instruct_dir());
    let identical = first == second;

    // expected data, regenerated from the library
    let loo = load_split(&p.cfg).unwrap();
    let (map, _) = IndexMap::load(p.cfg.index_path()).unwrap();
    let texts_list: Vec<lcrec::corpus::ItemText> = lcrec::corpus::load_jsonl(p.cfg.texts_path()).unwrap();
    let texts = lcrec::corpus::index_texts(texts_list).unwrap();
    let empty = std::collections::HashMap::new();
    let src = Sources {
        loo: &loo,
        map: &map,
        texts: &texts,
        intentions: &empty,
        preferences: &empty,
    };
    let mut groups: Vec<(&str, Vec<Datum>)> = Split::ALL.iter().map(|s| (s.name(), gen_split(*s, &src).unwrap())).collect();
    groups.push(("items", gen_mutual(&map, &texts).unwrap()));
    let bank = TemplateBank::default();

    let token_run = Regex::new(r"(?:<[a-z]_[0-9]+>)+").unwrap();
    let token = Regex::new(r"<([a-z])_([0-9]+)>").unwrap();
    let trie = map.trie();
    let (mut multiset_ok, mut template_ok) = (true, true);
    let (mut lines, mut token_runs, mut bad_tokens) = (0usize, 0usize, 0usize);
    for epoch in 0..p.cfg.instruct.epochs {
        for (group, data) in &groups {
            // multiset of (task, user, item, response) from data vs files
            let mut expected: Vec<(String, Option<String>, Option<String>, String)> = data
                .iter()
                .map(|d| (d.task().name().to_string(), d.user_id.clone(), d.item_id.clone(), d.response.clone()))
                .collect();
            expected.sort();
            let mut emitted = Vec::new();
            let mut by_key: BTreeMap<(String, Option<String>, Option<String>, String), Vec<String>> = BTreeMap::new();
            let dir = p.cfg.instruct_dir().join(format!("epoch_{epoch}")).join(group);
            for entry in fs::read_dir(&dir).unwrap() {
                let text = fs::read_to_string(entry.unwrap().path()).unwrap();
                for line in text.lines() {
                    lines += 1;
                    let ex: InstructionExample = serde_json::from_str(line).unwrap();
                    for m in token_run.find_iter(&ex.instruction).chain(token_run.find_iter(&ex.response)) {
                        token_runs += 1;
                        let codes: Vec<(char, u32)> = token
                            .captures_iter(m.as_str())
                            .map(|c| (c[1].chars().next().unwrap(), c[2].parse().unwrap()))
                            .collect();
                        let in_order = codes.iter().enumerate().all(|(l, (ch, _))| *ch == (b'a' + l as u8) as char);
                        let ix: Vec<u32> = codes.iter().map(|(_, c)| *c).collect();
                        if !in_order || trie.lookup(&ix).is_none() {
                            bad_tokens += 1;
                        }
                    }
                    let key = (ex.task.name().to_string(), ex.user_id.clone(), ex.item_id.clone(), ex.response.clone());
                    by_key.entry(key.clone()).or_default().push(ex.instruction);
                    emitted.push(key);
                }
            }
            emitted.sort();
            multiset_ok &= emitted == expected;
            // each datum rendered with exactly one of its templates
            for d in data {
                let key = (d.task().name().to_string(), d.user_id.clone(), d.item_id.clone(), d.response.clone());
                let renders: BTreeSet<String> = bank.get(d.key).iter().map(|t| d.render(t)).collect();
                match by_key.get_mut(&key).and_then(|v| v.pop()) {
                    Some(instr) => template_ok &= renders.contains(&instr),
                    None => template_ok = false,
                }
            }
        }
    }
    ensure(
        identical && multiset_ok && template_ok && bad_tokens == 0 && lines > 0,
        format!(
            "{lines} lines over {} epochs: multiset {}, one template each {}, {token_runs} token runs / {bad_tokens} unresolved, rerun byte-identical {identical}",
            p.cfg.instruct.epochs, multiset_ok, template_ok
        ),
    )
}

fn crit11_metrics() -> Check {
    let p = RankedPrediction::new("u", vec!["x".into(), "t".into(), "y".into()], "t").unwrap();
    let ndcg = ndcg_at_k(std::slice::from_ref(&p), 5);
    let exact = 1.0 / 3f64.log2();
    let mut rng = seeded_rng(11);
    let mut monotone = true;
    for _ in 0..100 {
        let users = rng.random_range(1..40);
        let preds: Vec<RankedPrediction> = (0..users)
            .map(|u| {
                let len = rng.random_range(0..25);
                let ranked: Vec<String> = (0..len).map(|i| format!("i{i}")).collect();
                let truth = format!("i{}", rng.random_range(0..30));
                RankedPrediction::new(format!("u{u}"), ranked, truth).unwrap()
            })
            .collect();
        let mut prev = (0.0, 0.0);
        for k in 1..=30 {
            let (h, n) = (hr_at_k(&preds, k), ndcg_at_k(&preds, k));
            monotone &= h >= prev.0 && n >= prev.1 && n <= h + 1e-15 && h <= 1.0;
            prev = (h, n);
        }
    }
    ensure(
        (ndcg - exact).abs() < 1e-9 && monotone,
        format!("NDCG@5 at rank 2 = {ndcg:.12} (1/log2 3 = {exact:.12}); 100 random sets monotone: {monotone}"),
    )
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => Err(format!(
            "panicked: {}",
            e.downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    }
}

#[test]
fn acceptance_criteria() {
    let pipeline = catch_unwind(run_pipeline).ok();
    let with_pipeline = |f: fn(&Pipeline) -> Check| -> Check {
        match &pipeline {
            Some(p) => guarded(|| f(p)),
            None => Err("synthetic pipeline failed to run".into()),
        }
    };
    let results: Vec<(u32, &str, Check)> = vec![
        (1, "conflict-free indices", guarded(crit1_conflict_free)),
        (2, "Sinkhorn marginals", guarded(crit2_sinkhorn)),
        (3, "quantization oracle", guarded(crit3_quantization_oracle)),
        (4, "gradient correctness", guarded(crit4_gradients)),
        (5, "training efficacy", with_pipeline(crit5_training)),
        (6, "semantic coherence", with_pipeline(crit6_coherence)),
        (7, "constrained decoding", with_pipeline(crit7_constrained_decoding)),
        (8, "KV-cache equivalence", guarded(crit8_kv_cache)),
        (9, "end-to-end lift", with_pipeline(crit9_end_to_end)),
        (10, "instruction-data contract", with_pipeline(crit10_instruction_contract)),
        (11, "metric correctness", guarded(crit11_metrics)),
    ];
    let mut failed = Vec::new();
    for (id, name, r) in &results {
        match r {
            Ok(d) => println!("criterion {id:>2} PASS  {name}: {d}"),
            Err(d) => {
                println!("criterion {id:>2} FAIL  {name}: {d}");
                failed.push(*id);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
