//! Full-ranking HR@K and NDCG@K with one held-out item per user.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::ArtifactMeta;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub user_id: String,
    /// Best first. Items past the end of a short list count as misses.
    pub ranked: Vec<String>,
    pub ground_truth: String,
}

impl RankedPrediction {
    pub fn new(user_id: impl Into<String>, ranked: Vec<String>, ground_truth: impl Into<String>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(ranked.len());
        if let Some(dup) = ranked.iter().find(|i| !seen.insert(i.as_str())) {
            return Err(Error::DuplicateId(dup.clone()));
        }
        Ok(Self {
            user_id: user_id.into(),
            ranked,
            ground_truth: ground_truth.into(),
        })
    }

    /// One-based rank of the ground truth, if present.
    pub fn rank(&self) -> Option<usize> {
        self.ranked.iter().position(|i| *i == self.ground_truth).map(|p| p + 1)
    }
}

/// Fraction of users whose held-out item is in the top `k`. Empty input gives 0.
pub fn hr_at_k(preds: &[RankedPrediction], k: usize) -> f64 {
    mean(preds, |rank| if rank <= k { 1.0 } else { 0.0 })
}

/// Mean of `1 / log2(rank + 1)` over users with the held-out item in the top
/// `k`, zero otherwise. The ideal DCG with a single relevant item is 1.
pub fn ndcg_at_k(preds: &[RankedPrediction], k: usize) -> f64 {
    mean(preds, |rank| if rank <= k { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 })
}

fn mean(preds: &[RankedPrediction], gain: impl Fn(usize) -> f64) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().filter_map(|p| p.rank()).map(gain).sum::<f64>() / preds.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub users: usize,
    /// Keys like `HR@10`, `NDCG@5`.
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<ArtifactMeta>,
}

pub fn report(preds: &[RankedPrediction], ks: &[usize], meta: Option<ArtifactMeta>) -> MetricsReport {
    let mut metrics = BTreeMap::new();
    for &k in ks {
        metrics.insert(format!("HR@{k}"), hr_at_k(preds, k));
        metrics.insert(format!("NDCG@{k}"), ndcg_at_k(preds, k));
    }
    MetricsReport {
        users: preds.len(),
        metrics,
        meta,
    }
}

/// Average metrics of several reports key by key (e.g. one per prediction dump).
pub fn average_reports(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Domain("no reports to average".into()))?;
    let mut metrics = BTreeMap::new();
    for key in first.metrics.keys() {
        let mut sum = 0.0;
        for r in reports {
            sum += r.metrics.get(key).ok_or_else(|| {
                Error::Schema(format!("report is missing `{key}`"))
            })?;
        }
        metrics.insert(key.clone(), sum / reports.len() as f64);
    }
    Ok(MetricsReport {
        users: first.users,
        metrics,
        meta: first.meta.clone(),
    })
}

/// Read a prediction dump (`user_id, rank, item_id, logprob` TSV with header)
/// and join it with ground truth. Users without predictions get an empty list.
pub fn read_predictions(reader: impl BufRead, truth: &BTreeMap<String, String>) -> Result<Vec<RankedPrediction>> {
    let mut ranked: BTreeMap<&str, Vec<(usize, String)>> = truth.keys().map(|u| (u.as_str(), Vec::new())).collect();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line_no == 1 && line.starts_with("user_id\t") {
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 fields, found {}", f.len()),
            });
        }
        let rank: usize = f[1].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad rank `{}`", f[1]),
        })?;
        let Some(list) = ranked.get_mut(f[0]) else {
            return Err(Error::Schema(format!("line {line_no}: user `{}` has no ground truth", f[0])));
        };
        list.push((rank, f[2].to_string()));
    }
    ranked
        .into_iter()
        .map(|(user, mut list)| {
            list.sort_by_key(|(r, _)| *r);
            RankedPrediction::new(user, list.into_iter().map(|(_, i)| i).collect(), truth[user].clone())
        })
        .collect()
}

pub fn load_predictions(path: impl AsRef<Path>, truth: &BTreeMap<String, String>) -> Result<Vec<RankedPrediction>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_predictions(BufReader::new(file), truth)
}
