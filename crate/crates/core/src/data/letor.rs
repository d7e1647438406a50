//! Conversion of graded relevance judgements into click-style lists.
//!
//! Expert ratings `0..=4` are binarized with a threshold and each item is
//! "viewed" with probability `1 / pos^eta`, where `pos` is its 1-based rank in
//! the initial list. Unviewed items stay in the list with label 0 so list
//! lengths are unchanged.

use std::io::BufRead;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{ItemEntry, RerankRecord, UserProfile};
use crate::error::{PrmError, Result};
use crate::rng;

pub const DEFAULT_THRESHOLD: f64 = 1.5;
pub const DEFAULT_ETA: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradedDoc {
    pub doc_id: String,
    pub rating: u8,
    pub features: Vec<f64>,
}

/// A query with documents in initial-list order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradedRecord {
    pub query_id: String,
    pub docs: Vec<GradedDoc>,
}

/// Probability that the item at 1-based position `pos` is seen.
pub fn view_probability(pos: usize, eta: f64) -> f64 {
    1.0 / (pos as f64).powf(eta)
}

/// Binarizes ratings and simulates impressions. Every record gets its own
/// seeded stream, so the result does not depend on record order.
pub fn convert_letor(
    records: &[GradedRecord],
    threshold: f64,
    eta: f64,
    seed: u64,
) -> Result<Vec<RerankRecord>> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(PrmError::Parameter(format!("decay eta must be >= 0, got {eta}")));
    }
    if !(0.0..=4.0).contains(&threshold) {
        return Err(PrmError::Parameter(format!(
            "rating threshold must lie in [0, 4], got {threshold}"
        )));
    }
    records
        .iter()
        .enumerate()
        .map(|(r, rec)| {
            let mut rng = rng::stream(seed, "letor-view", &[r as u64]);
            let items = rec
                .docs
                .iter()
                .enumerate()
                .map(|(k, doc)| {
                    if doc.rating > 4 {
                        return Err(PrmError::Parse {
                            line: r + 1,
                            field: "rating".into(),
                            message: format!("rating {} outside 0..=4", doc.rating),
                        });
                    }
                    let u: f64 = rng.random();
                    let viewed = u < view_probability(k + 1, eta);
                    let relevant = f64::from(doc.rating) > threshold;
                    Ok(ItemEntry {
                        item_id: doc.doc_id.clone(),
                        category: 0,
                        price_level: 1,
                        features: doc.features.clone(),
                        label: u8::from(relevant && viewed),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(RerankRecord {
                request_id: rec.query_id.clone(),
                user: UserProfile::anonymous(rec.query_id.clone()),
                history: vec![],
                items,
            })
        })
        .collect()
}

type LetorRow = (String, u8, Vec<(usize, f64)>);

/// Minimal reader for SVMlight-style graded text:
/// `<rating> qid:<id> <index>:<value> ... [# comment]`.
///
/// Feature indices are 1-based; missing indices are zero. Lines sharing a
/// `qid` form one query, in file order, and queries keep first-seen order.
pub fn parse_letor_text(reader: impl BufRead) -> Result<Vec<GradedRecord>> {
    let mut rows: Vec<LetorRow> = Vec::new();
    let mut width = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let perr = |field: &str, message: String| PrmError::Parse {
            line: line_no,
            field: field.into(),
            message,
        };
        let mut tokens = body.split_whitespace();
        let rating: u8 = tokens
            .next()
            .and_then(|t| t.parse::<f64>().ok())
            .filter(|r| (0.0..=4.0).contains(r) && r.fract() == 0.0)
            .map(|r| r as u8)
            .ok_or_else(|| perr("rating", "expected an integer rating in 0..=4".into()))?;
        let qid = tokens
            .next()
            .and_then(|t| t.strip_prefix("qid:"))
            .ok_or_else(|| perr("qid", "expected `qid:<id>`".into()))?
            .to_string();
        let mut feats = Vec::new();
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| perr("features", format!("malformed pair `{tok}`")))?;
            let idx: usize = idx
                .parse()
                .ok()
                .filter(|&k| k >= 1)
                .ok_or_else(|| perr("features", format!("bad index in `{tok}`")))?;
            let val: f64 = val
                .parse()
                .map_err(|_| perr("features", format!("bad value in `{tok}`")))?;
            width = width.max(idx);
            feats.push((idx - 1, val));
        }
        rows.push((qid, rating, feats));
    }

    let mut out: Vec<GradedRecord> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for (qid, rating, feats) in rows {
        let mut dense = vec![0.0; width];
        for (k, v) in feats {
            dense[k] = v;
        }
        let slot = *index.entry(qid.clone()).or_insert_with(|| {
            out.push(GradedRecord {
                query_id: qid.clone(),
                docs: vec![],
            });
            out.len() - 1
        });
        let rec = &mut out[slot];
        let doc_id = format!("{qid}-{}", rec.docs.len());
        rec.docs.push(GradedDoc {
            doc_id,
            rating,
            features: dense,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graded(n: usize, rating: u8) -> GradedRecord {
        GradedRecord {
            query_id: "q".into(),
            docs: (0..n)
                .map(|k| GradedDoc {
                    doc_id: format!("d{k}"),
                    rating,
                    features: vec![k as f64],
                })
                .collect(),
        }
    }

    #[test]
    fn view_probability_values() {
        assert_eq!(view_probability(7, 0.0), 1.0);
        assert_eq!(view_probability(1, 0.2), 1.0);
        let p32 = view_probability(32, 0.2);
        assert!((p32 - 0.5).abs() < 1e-12, "{p32}");
    }

    #[test]
    fn eta_zero_keeps_every_relevant_item() {
        let recs = vec![graded(40, 3), graded(5, 1)];
        let out = convert_letor(&recs, 1.5, 0.0, 9).unwrap();
        assert!(out[0].items.iter().all(|i| i.label == 1));
        assert!(out[1].items.iter().all(|i| i.label == 0));
        assert_eq!(out[0].items.len(), 40);
    }

    #[test]
    fn negative_eta_and_bad_threshold_are_rejected() {
        assert!(matches!(convert_letor(&[], 1.5, -0.1, 0), Err(PrmError::Parameter(_))));
        assert!(matches!(convert_letor(&[], 4.5, 0.2, 0), Err(PrmError::Parameter(_))));
    }

    #[test]
    fn empirical_view_rate_tracks_decay() {
        // 100k draws at position 10 of one list each.
        let eta = 0.5;
        let rec = graded(10, 4);
        let recs = vec![rec; 100_000];
        let out = convert_letor(&recs, 1.5, eta, 17).unwrap();
        for pos in [1usize, 4, 10] {
            let rate = out.iter().filter(|r| r.items[pos - 1].label == 1).count() as f64 / 100_000.0;
            assert!((rate - view_probability(pos, eta)).abs() <= 0.01, "pos {pos}: {rate}");
        }
    }

    #[test]
    fn conversion_is_seeded() {
        let recs = vec![graded(30, 4); 20];
        let a = convert_letor(&recs, 1.5, 0.2, 3).unwrap();
        assert_eq!(a, convert_letor(&recs, 1.5, 0.2, 3).unwrap());
        assert_ne!(a, convert_letor(&recs, 1.5, 0.2, 4).unwrap());
    }

    #[test]
    fn svmlight_text_groups_by_query() {
        let text = "2 qid:10 1:0.5 3:1.0 # doc a\n0 qid:10 2:0.25\n4 qid:11 1:1\n";
        let recs = parse_letor_text(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].docs.len(), 2);
        assert_eq!(recs[0].docs[0].features, vec![0.5, 0.0, 1.0]);
        assert_eq!(recs[0].docs[1].rating, 0);
        assert_eq!(recs[1].docs[0].features, vec![1.0, 0.0, 0.0]);
        let err = parse_letor_text("x qid:1 1:0".as_bytes()).unwrap_err();
        assert!(matches!(err, PrmError::Parse { line: 1, .. }));
    }
}
