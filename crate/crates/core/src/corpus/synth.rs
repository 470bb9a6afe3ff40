use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Interaction, ItemText};
use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::util::{mix_seed, seeded_rng, Rng};

/// Planted-structure corpus: items fall into clusters with nearby embeddings,
/// and users draw most of their interactions from one home cluster with
/// Zipf-skewed popularity inside each cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub d_emb: usize,
    /// Per-component standard deviation of item noise around its centroid.
    pub sigma: f64,
    /// Probability that an interaction comes from the user's home cluster.
    pub home_affinity: f64,
    pub min_seq_len: usize,
    pub max_seq_len: usize,
    /// Zipf exponent of item popularity within a cluster (0 = uniform).
    pub popularity_exponent: f64,
    /// Disjoint item pairs whose embeddings are made identical.
    pub duplicate_pairs: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 2500,
            n_items: 1000,
            n_clusters: 5,
            d_emb: 64,
            sigma: 0.1,
            home_affinity: 0.8,
            min_seq_len: 15,
            max_seq_len: 25,
            popularity_exponent: 1.0,
            duplicate_pairs: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub interactions: Vec<Interaction>,
    pub texts: Vec<ItemText>,
    pub embeddings: EmbeddingMatrix,
    /// Planted cluster of every item, in embedding row order.
    pub clusters: Vec<usize>,
    pub duplicates: Vec<(usize, usize)>,
}

pub fn item_id(j: usize) -> String {
    format!("item{j:05}")
}

pub fn user_id(u: usize) -> String {
    format!("user{u:05}")
}

pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    validate(cfg)?;
    let (n, c, d) = (cfg.n_items, cfg.n_clusters, cfg.d_emb);
    let clusters: Vec<usize> = (0..n).map(|j| j * c / n).collect();
    let members: Vec<Vec<usize>> = (0..c)
        .map(|k| (0..n).filter(|&j| clusters[j] == k).collect())
        .collect();

    let mut rng = seeded_rng(mix_seed(cfg.seed, 1));
    let centroids = orthonormal(c, d, &mut rng);
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let mut data = Vec::with_capacity(n * d);
    for &k in &clusters {
        for x in &centroids[k * d..(k + 1) * d] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(x * scale + cfg.sigma * noise);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let duplicates: Vec<(usize, usize)> = order
        .chunks_exact(2)
        .take(cfg.duplicate_pairs)
        .map(|p| (p[0].min(p[1]), p[0].max(p[1])))
        .collect();
    for &(a, b) in &duplicates {
        let src = data[a * d..(a + 1) * d].to_vec();
        data[b * d..(b + 1) * d].copy_from_slice(&src);
    }
    let items: Vec<String> = (0..n).map(item_id).collect();
    let embeddings = EmbeddingMatrix::from_flat(items, d, data)?;

    let mut rng = seeded_rng(mix_seed(cfg.seed, 2));
    let popularity: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| {
            let mut ranks: Vec<usize> = (0..m.len()).collect();
            ranks.shuffle(&mut rng);
            let w: Vec<f64> = ranks
                .iter()
                .map(|&r| ((r + 1) as f64).powf(-cfg.popularity_exponent))
                .collect();
            WeightedIndex::new(w).expect("cluster has positive weights")
        })
        .collect();

    let mut interactions = Vec::new();
    for u in 0..cfg.n_users {
        let home = rng.random_range(0..c);
        let len = rng.random_range(cfg.min_seq_len..=cfg.max_seq_len);
        let mut t: i64 = 1_400_000_000 + rng.random_range(0..10_000_000);
        let mut seen = Vec::with_capacity(len);
        for _ in 0..len {
            let k = if c == 1 || rng.random::<f64>() < cfg.home_affinity {
                home
            } else {
                let other = rng.random_range(0..c - 1);
                other + usize::from(other >= home)
            };
            let item = draw_unseen(&members[k], &popularity[k], &seen, n, &mut rng);
            seen.push(item);
            t += rng.random_range(1..=86_400);
            interactions.push(Interaction::new(user_id(u), item_id(item), t));
        }
    }

    let texts = (0..n).map(|j| item_text(j, clusters[j], &mut rng)).collect();
    Ok(SynthCorpus {
        interactions,
        texts,
        embeddings,
        clusters,
        duplicates,
    })
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    let fail = |m: String| Err(Error::Config(m));
    if cfg.n_items == 0 || cfg.n_users == 0 || cfg.n_clusters == 0 || cfg.d_emb == 0 {
        return fail("synthetic corpus needs users, items, clusters and a dimension".into());
    }
    if cfg.n_clusters > cfg.n_items {
        return fail(format!("{} clusters for {} items", cfg.n_clusters, cfg.n_items));
    }
    if cfg.n_clusters > cfg.d_emb {
        return fail(format!(
            "orthogonal centroids need n_clusters <= d_emb ({} > {})",
            cfg.n_clusters, cfg.d_emb
        ));
    }
    if cfg.min_seq_len == 0 || cfg.min_seq_len > cfg.max_seq_len || cfg.max_seq_len > cfg.n_items {
        return fail(format!(
            "sequence lengths {}..={} must be positive, ordered and at most n_items",
            cfg.min_seq_len, cfg.max_seq_len
        ));
    }
    if 2 * cfg.duplicate_pairs > cfg.n_items {
        return fail(format!("{} duplicate pairs need more items", cfg.duplicate_pairs));
    }
    if !(0.0..=1.0).contains(&cfg.home_affinity) || !(cfg.sigma >= 0.0) {
        return fail("home_affinity must be in [0, 1] and sigma non-negative".into());
    }
    Ok(())
}

/// Popularity draw from a cluster, avoiding items the user already has. Falls
/// back to the first unseen item of the cluster, then of the whole catalogue.
fn draw_unseen(members: &[usize], pop: &WeightedIndex<f64>, seen: &[usize], n: usize, rng: &mut Rng) -> usize {
    for _ in 0..64 {
        let item = members[pop.sample(rng)];
        if !seen.contains(&item) {
            return item;
        }
    }
    members
        .iter()
        .copied()
        .chain(0..n)
        .find(|i| !seen.contains(i))
        .expect("sequence length is at most n_items")
}

/// `c` orthonormal rows of length `d` by Gram-Schmidt on Gaussian draws.
fn orthonormal(c: usize, d: usize, rng: &mut Rng) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(c * d);
    while out.len() < c * d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for q in out.chunks_exact(d) {
            let p = crate::linalg::dot(&v, q);
            v.iter_mut().zip(q).for_each(|(x, y)| *x -= p * y);
        }
        let norm = crate::linalg::dot(&v, &v).sqrt();
        if norm > 1e-6 {
            out.extend(v.iter().map(|x| x / norm));
        }
    }
    out
}

const THEMES: [(&str, &[&str], &str); 5] = [
    ("guitar", &["Acoustic Guitar", "Guitar Strings", "Capo", "Pick Set", "Tuner Pedal"], "players who practise every day"),
    ("kitchen", &["Chef Knife", "Cutting Board", "Saucepan", "Spice Rack", "Blender"], "cooks who want a tidy kitchen"),
    ("camping", &["Tent", "Sleeping Bag", "Headlamp", "Camp Stove", "Water Filter"], "weekend trips into the backcountry"),
    ("gaming", &["Controller", "Headset", "Racing Wheel", "Arcade Stick", "Charging Dock"], "long sessions on the couch"),
    ("garden", &["Pruning Shears", "Hose Nozzle", "Seed Tray", "Trowel", "Compost Bin"], "growing vegetables at home"),
];

const ADJECTIVES: [&str; 8] = ["Classic", "Compact", "Deluxe", "Portable", "Pro", "Essential", "Rugged", "Lightweight"];

fn item_text(j: usize, cluster: usize, rng: &mut Rng) -> ItemText {
    let (theme, nouns, purpose) = THEMES[cluster % THEMES.len()];
    let series = cluster / THEMES.len();
    let noun = nouns[rng.random_range(0..nouns.len())];
    let adj = ADJECTIVES[rng.random_range(0..ADJECTIVES.len())];
    let series = if series > 0 { format!(" Series {}", series + 1) } else { String::new() };
    ItemText {
        item_id: item_id(j),
        title: format!("{adj} {noun}{series} {}", 100 + j),
        description: format!(
            "A {} {} from our {theme} range, made for {purpose}. Model {} ships with a one-year warranty.",
            adj.to_lowercase(),
            noun.to_lowercase(),
            100 + j
        ),
    }
}
