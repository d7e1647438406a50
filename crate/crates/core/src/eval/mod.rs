//! Ranking metrics, run-level reports and attention aggregation.

mod attention;
pub mod metrics;

pub use attention::{export_attention, AttentionAggregate, Grouping, HeadSelect};
pub use metrics::{map_at_k, map_at_k_variant, precision_at_k, MapVariant};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, RerankRecord};
use crate::error::{PrmError, Result};
use crate::pretrain::PvTable;
use crate::prm::{rank_order, PrmConfig, PrmModel, ScoredList};
use crate::scalar::Scalar;

/// Something that orders the items of an initial list.
pub trait Reranker {
    fn rerank(&self, record: &RerankRecord) -> Result<ScoredList>;
}

/// Keeps the initial order; every item gets score `1/n`.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityReranker;

impl Reranker for IdentityReranker {
    fn rerank(&self, record: &RerankRecord) -> Result<ScoredList> {
        let n = record.items.len();
        Ok(ScoredList {
            request_id: record.request_id.clone(),
            scores: vec![1.0 / n as f64; n],
            order: (0..n).collect(),
        })
    }
}

/// Sorts by the true click label, the best achievable order.
#[derive(Clone, Copy, Debug, Default)]
pub struct LabelOracle;

impl Reranker for LabelOracle {
    fn rerank(&self, record: &RerankRecord) -> Result<ScoredList> {
        let scores: Vec<f64> = record.items.iter().map(|i| f64::from(i.label)).collect();
        Ok(ScoredList {
            request_id: record.request_id.clone(),
            order: rank_order(&scores),
            scores,
        })
    }
}

/// A trained model with the personalized vectors it was trained with.
pub struct PrmReranker<'a, T> {
    pub model: &'a PrmModel<T>,
    pub pv: Option<&'a PvTable>,
}

impl<T: Scalar> Reranker for PrmReranker<'_, T> {
    fn rerank(&self, record: &RerankRecord) -> Result<ScoredList> {
        Ok(self.model.score_record(record, self.pv)?.list)
    }
}

/// Click labels of `record` read in `order`.
pub fn reranked_labels(record: &RerankRecord, order: &[usize]) -> Vec<u8> {
    order.iter().map(|&i| record.items[i].label).collect()
}

/// `{"precision": {"5": .., "10": ..}, "map": {"5": .., "10": .., "<n_max>": ..}, "num_requests": n}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub precision: BTreeMap<String, f64>,
    pub map: BTreeMap<String, f64>,
    pub num_requests: usize,
}

impl RankingMetrics {
    pub fn from_lists<L: AsRef<[u8]>>(lists: &[L], n_max: usize, variant: MapVariant) -> Result<Self> {
        let mut precision = BTreeMap::new();
        let mut map = BTreeMap::new();
        for k in [5, 10] {
            precision.insert(k.to_string(), precision_at_k::<f64, _>(lists, k)?);
        }
        for k in [5, 10, n_max] {
            map.insert(k.to_string(), map_at_k_variant::<f64, _>(lists, k, variant)?);
        }
        Ok(Self {
            precision,
            map,
            num_requests: lists.len(),
        })
    }

    pub fn map_at(&self, k: usize) -> f64 {
        self.map.get(&k.to_string()).copied().unwrap_or(f64::NAN)
    }

    pub fn precision_at(&self, k: usize) -> f64 {
        self.precision.get(&k.to_string()).copied().unwrap_or(f64::NAN)
    }

    pub fn to_json(&self) -> Result<String> {
        crate::data::to_canonical_json(self)
    }
}

/// Re-ranked list of one request as written to score dumps and serve
/// replies: item ids in ranked order with their scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestDump {
    pub request_id: String,
    pub order: Vec<String>,
    pub scores: Vec<f64>,
}

impl RequestDump {
    pub fn new(record: &RerankRecord, list: &ScoredList) -> Self {
        Self {
            request_id: list.request_id.clone(),
            order: list.order.iter().map(|&i| record.items[i].item_id.clone()).collect(),
            scores: list.ordered_scores(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub metrics: RankingMetrics,
    pub dumps: Vec<RequestDump>,
}

impl RunReport {
    pub fn dumps_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for d in &self.dumps {
            s.push_str(&crate::data::to_canonical_json(d)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Re-ranks every request in input order and scores the result.
pub fn evaluate_run(
    records: &[RerankRecord],
    reranker: &dyn Reranker,
    n_max: usize,
    variant: MapVariant,
) -> Result<RunReport> {
    let mut lists = Vec::with_capacity(records.len());
    let mut dumps = Vec::with_capacity(records.len());
    for r in records {
        let s = reranker.rerank(r)?;
        lists.push(reranked_labels(r, &s.order));
        dumps.push(RequestDump::new(r, &s));
    }
    Ok(RunReport {
        metrics: RankingMetrics::from_lists(&lists, n_max, variant)?,
        dumps,
    })
}

/// Checks that a model config can read a dataset.
pub fn check_compatible(cfg: &PrmConfig, manifest: &DatasetManifest) -> Result<()> {
    if manifest.num_records == 0 {
        return Ok(());
    }
    if manifest.d_feature != cfg.d_feature {
        return Err(PrmError::Config(format!(
            "dataset has {} features, checkpoint expects {}",
            manifest.d_feature, cfg.d_feature
        )));
    }
    if manifest.n_max > cfg.n_max {
        return Err(PrmError::Config(format!(
            "dataset lists hold up to {} items, checkpoint accepts {}",
            manifest.n_max, cfg.n_max
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ItemEntry, UserProfile};

    fn record(labels: &[u8]) -> RerankRecord {
        RerankRecord {
            request_id: "r".into(),
            user: UserProfile::anonymous("u"),
            history: vec![],
            items: labels
                .iter()
                .enumerate()
                .map(|(k, &l)| ItemEntry {
                    item_id: format!("i{k}"),
                    category: 0,
                    price_level: 1,
                    features: vec![0.0],
                    label: l,
                })
                .collect(),
        }
    }

    #[test]
    fn identity_reproduces_initial_metrics() {
        let recs = vec![record(&[0, 1, 0, 1]), record(&[1, 0, 0, 0])];
        let rep = evaluate_run(&recs, &IdentityReranker, 4, MapVariant::Cutoff).unwrap();
        let lists: Vec<Vec<u8>> = recs.iter().map(RerankRecord::labels).collect();
        assert_eq!(rep.metrics.map_at(4), map_at_k::<f64, _>(&lists, 4).unwrap());
        assert_eq!(rep.dumps[0].order, vec!["i0", "i1", "i2", "i3"]);
    }

    #[test]
    fn oracle_is_an_upper_bound() {
        let recs = vec![record(&[0, 1, 0, 1]), record(&[0, 0, 0, 1]), record(&[1, 1, 0, 0])];
        let id = evaluate_run(&recs, &IdentityReranker, 4, MapVariant::Cutoff).unwrap();
        let or = evaluate_run(&recs, &LabelOracle, 4, MapVariant::Cutoff).unwrap();
        for k in [5, 10, 4] {
            assert!(or.metrics.map_at(k) >= id.metrics.map_at(k));
        }
        assert_eq!(or.dumps[0].order, vec!["i1", "i3", "i0", "i2"]);
    }

    #[test]
    fn metrics_json_layout() {
        let m = RankingMetrics::from_lists(&[vec![1u8, 0, 1]], 30, MapVariant::Cutoff).unwrap();
        let j = m.to_json().unwrap();
        assert!(j.starts_with(r#"{"map":{"10":"#), "{j}");
        assert!(j.contains(r#""30":"#) && j.contains(r#""num_requests":1"#));
    }
}
