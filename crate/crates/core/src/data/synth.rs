//! Seeded synthetic re-ranking data with planted list interactions.
//!
//! A fixed item catalog (dense features plus a one-hot category block) and a
//! pool of users are drawn first. Each request samples a candidate pool,
//! orders it into an initial list and samples clicks from the ground-truth
//! model
//!
//! ```text
//! logit(i) = bias + w·x_i + u_type·x_i + Σ_{j≠i, j viewed} g(c_i, c_j) − position_scale·ln(pos_i)
//! ```
//!
//! where `g` is a sparse category-affinity matrix, `u_type` a preference
//! vector selected by the user's gender and purchase level, and item `j` is
//! viewed with probability `pos_j^−view_eta`. The ground truth is returned so
//! tests can score oracle rankers against it.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::data::{
    manifest_for, manifest_path, to_canonical_json, write_records, DatasetManifest, ItemEntry,
    PretrainRecord, Record, RecordKind, RerankRecord, UserProfile, PRICE_LEVELS,
};
use crate::error::{PrmError, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub requests: usize,
    pub pretrain_records: usize,
    /// Length of every emitted initial list (the manifest `n_max`).
    pub list_len: usize,
    /// Candidate pool size per request; at least `list_len`.
    pub candidates: usize,
    pub catalog_size: usize,
    pub users: usize,
    pub num_categories: usize,
    /// Continuous features per item; `d_feature = d_dense + num_categories`.
    pub d_dense: usize,
    pub history_len: usize,
    pub genders: usize,
    pub age_buckets: usize,
    pub purchase_levels: usize,
    pub bias: f64,
    /// Scale of the global relevance vector `w`.
    pub base_scale: f64,
    /// Value of `g` on planted category pairs.
    pub interaction_scale: f64,
    /// Number of planted (unordered, off-diagonal) category pairs.
    pub affinity_pairs: usize,
    /// Value of `g` on the diagonal.
    pub self_affinity: f64,
    pub personalization_scale: f64,
    pub position_scale: f64,
    /// Std-dev of Gaussian noise added to `w·x` when ordering lists.
    pub rank_noise: f64,
    pub view_eta: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            requests: 1000,
            pretrain_records: 5000,
            list_len: 10,
            candidates: 20,
            catalog_size: 400,
            users: 200,
            num_categories: 6,
            d_dense: 4,
            history_len: 5,
            genders: 2,
            age_buckets: 4,
            purchase_levels: 3,
            bias: -1.5,
            base_scale: 0.6,
            interaction_scale: 1.0,
            affinity_pairs: 3,
            self_affinity: 0.0,
            personalization_scale: 0.0,
            position_scale: 0.0,
            rank_noise: 0.5,
            view_eta: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn d_feature(&self) -> usize {
        self.d_dense + self.num_categories
    }

    pub fn num_user_types(&self) -> usize {
        self.genders * self.purchase_levels
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("list_len", self.list_len),
            ("catalog_size", self.catalog_size),
            ("users", self.users),
            ("num_categories", self.num_categories),
            ("genders", self.genders),
            ("age_buckets", self.age_buckets),
            ("purchase_levels", self.purchase_levels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(PrmError::Config(format!("synth spec `{name}` must be positive")));
            }
        }
        if self.d_feature() < 2 {
            return Err(PrmError::Config("synth spec needs d_feature >= 2".into()));
        }
        if self.candidates < self.list_len {
            return Err(PrmError::Config(format!(
                "candidates ({}) must be at least list_len ({})",
                self.candidates, self.list_len
            )));
        }
        if self.candidates > self.catalog_size {
            return Err(PrmError::Config("candidates exceed catalog_size".into()));
        }
        if self.view_eta < 0.0 {
            return Err(PrmError::Parameter("view_eta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Parameters of the click model used to generate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub d_dense: usize,
    pub num_categories: usize,
    pub bias: f64,
    pub w: Vec<f64>,
    /// `num_categories × num_categories`.
    pub affinity: Vec<Vec<f64>>,
    /// Indexed by user type.
    pub user_prefs: Vec<Vec<f64>>,
    pub purchase_levels: usize,
    pub position_scale: f64,
    pub view_eta: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl GroundTruth {
    pub fn user_type(&self, u: &UserProfile) -> usize {
        (u.gender as usize * self.purchase_levels + u.purchase_level as usize) % self.user_prefs.len()
    }

    /// `w·x`, the signal available to a pointwise ranker.
    pub fn pointwise_logit(&self, x: &[f64]) -> f64 {
        dot(&self.w, x)
    }

    pub fn affinity(&self, a: u32, b: u32) -> f64 {
        self.affinity[a as usize][b as usize]
    }

    /// Click logit of `record.items[i]` at its current position, given which
    /// items are viewed.
    pub fn click_logit(&self, record: &RerankRecord, i: usize, viewed: &[bool]) -> f64 {
        let it = &record.items[i];
        let u = &self.user_prefs[self.user_type(&record.user)];
        let inter: f64 = record
            .items
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i && viewed[j])
            .map(|(_, o)| self.affinity(it.category, o.category))
            .sum();
        self.bias + dot(&self.w, &it.features) + dot(u, &it.features) + inter
            - self.position_scale * ((i + 1) as f64).ln()
    }

    /// Click logit with every other item weighted by its view probability.
    pub fn expected_click_logit(&self, record: &RerankRecord, i: usize) -> f64 {
        let it = &record.items[i];
        let u = &self.user_prefs[self.user_type(&record.user)];
        let inter: f64 = record
            .items
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, o)| self.affinity(it.category, o.category) * view_prob(j + 1, self.view_eta))
            .sum();
        self.bias + dot(&self.w, &it.features) + dot(u, &it.features) + inter
            - self.position_scale * ((i + 1) as f64).ln()
    }

    /// Pointwise click probability of a single displayed item.
    pub fn impression_probability(&self, user: &UserProfile, x: &[f64]) -> f64 {
        let u = &self.user_prefs[self.user_type(user)];
        sigmoid(self.bias + dot(&self.w, x) + dot(u, x))
    }

    /// Category pairs `(a, b)` with positive planted affinity, off-diagonal.
    pub fn high_affinity_pairs(&self) -> Vec<(usize, usize)> {
        let c = self.num_categories;
        (0..c)
            .flat_map(|a| (0..c).map(move |b| (a, b)))
            .filter(|&(a, b)| a != b && self.affinity[a][b] > 0.0)
            .collect()
    }

    pub fn zero_affinity_pairs(&self) -> Vec<(usize, usize)> {
        let c = self.num_categories;
        (0..c)
            .flat_map(|a| (0..c).map(move |b| (a, b)))
            .filter(|&(a, b)| a != b && self.affinity[a][b] == 0.0)
            .collect()
    }
}

fn view_prob(pos: usize, eta: f64) -> f64 {
    super::letor::view_probability(pos, eta)
}

/// Replaces the labels of every record with fresh draws from `truth`.
pub fn simulate_clicks(records: &mut [RerankRecord], truth: &GroundTruth, seed: u64) {
    for (r, rec) in records.iter_mut().enumerate() {
        let mut rng = rng::stream(seed, "clicks", &[r as u64]);
        let viewed: Vec<bool> = (0..rec.items.len())
            .map(|j| rng.random::<f64>() < view_prob(j + 1, truth.view_eta))
            .collect();
        let probs: Vec<f64> = (0..rec.items.len())
            .map(|i| sigmoid(truth.click_logit(rec, i, &viewed)))
            .collect();
        for (it, p) in rec.items.iter_mut().zip(probs) {
            it.label = u8::from(rng.random::<f64>() < p);
        }
    }
}

#[derive(Clone, Debug)]
struct CatalogItem {
    id: String,
    category: u32,
    price_level: u32,
    features: Vec<f64>,
}

impl CatalogItem {
    fn entry(&self) -> ItemEntry {
        ItemEntry {
            item_id: self.id.clone(),
            category: self.category,
            price_level: self.price_level,
            features: self.features.clone(),
            label: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct SynthUser {
    profile: UserProfile,
    history: Vec<String>,
}

/// Everything [`generate_synthetic`] produces.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub truth: GroundTruth,
    /// Initial lists ordered by `w·x + noise`, labelled by the click model.
    pub rerank: Vec<RerankRecord>,
    pub rerank_manifest: DatasetManifest,
    /// The unordered pools the lists were cut from (labels are zero).
    pub candidates: Vec<RerankRecord>,
    pub candidates_manifest: DatasetManifest,
    pub pretrain: Vec<PretrainRecord>,
    pub pretrain_manifest: DatasetManifest,
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Generates a dataset. The same `(spec, seed)` always gives identical output.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<SynthDataset> {
    spec.validate()?;
    let d = spec.d_feature();
    let c = spec.num_categories;

    let mut rng = rng::stream(seed, "truth", &[]);
    let mut w: Vec<f64> = (0..d).map(|_| spec.base_scale * normal(&mut rng)).collect();
    // Category intercepts are folded into w; keep them modest.
    for x in &mut w[spec.d_dense..] {
        *x *= 0.5;
    }
    let mut affinity = vec![vec![0.0; c]; c];
    for (a, row) in affinity.iter_mut().enumerate() {
        row[a] = spec.self_affinity;
    }
    let mut pairs: Vec<(usize, usize)> = (0..c).flat_map(|a| (a + 1..c).map(move |b| (a, b))).collect();
    pairs.shuffle(&mut rng);
    for &(a, b) in pairs.iter().take(spec.affinity_pairs) {
        affinity[a][b] = spec.interaction_scale;
        affinity[b][a] = spec.interaction_scale;
    }
    let user_prefs: Vec<Vec<f64>> = (0..spec.num_user_types())
        .map(|_| (0..d).map(|_| spec.personalization_scale * normal(&mut rng)).collect())
        .collect();
    let truth = GroundTruth {
        d_dense: spec.d_dense,
        num_categories: c,
        bias: spec.bias,
        w,
        affinity,
        user_prefs,
        purchase_levels: spec.purchase_levels,
        position_scale: spec.position_scale,
        view_eta: spec.view_eta,
    };

    let catalog: Vec<CatalogItem> = (0..spec.catalog_size)
        .map(|k| {
            let mut rng = rng::stream(seed, "catalog", &[k as u64]);
            let category = rng.random_range(0..c) as u32;
            let mut features: Vec<f64> = (0..spec.d_dense).map(|_| normal(&mut rng)).collect();
            features.extend((0..c).map(|j| if j == category as usize { 1.0 } else { 0.0 }));
            let price_src = features.first().copied().unwrap_or(0.0);
            let price_level = (((price_src + 2.5) / 5.0 * PRICE_LEVELS as f64).floor() as i64)
                .clamp(0, PRICE_LEVELS as i64 - 1) as u32
                + 1;
            CatalogItem {
                id: format!("i{k}"),
                category,
                price_level,
                features,
            }
        })
        .collect();

    let users: Vec<SynthUser> = (0..spec.users)
        .map(|k| {
            let mut rng = rng::stream(seed, "user", &[k as u64]);
            let profile = UserProfile {
                user_id: format!("u{k}"),
                gender: rng.random_range(0..spec.genders) as u32,
                age_bucket: rng.random_range(0..spec.age_buckets) as u32,
                purchase_level: rng.random_range(0..spec.purchase_levels) as u32,
            };
            let history = (0..spec.history_len)
                .map(|_| catalog[rng.random_range(0..catalog.len())].id.clone())
                .collect();
            SynthUser { profile, history }
        })
        .collect();

    let mut candidates = Vec::with_capacity(spec.requests);
    let mut rerank = Vec::with_capacity(spec.requests);
    for r in 0..spec.requests {
        let mut rng = rng::stream(seed, "request", &[r as u64]);
        let user = &users[rng.random_range(0..users.len())];
        let picks = rand::seq::index::sample(&mut rng, catalog.len(), spec.candidates);
        let pool: Vec<ItemEntry> = picks.iter().map(|k| catalog[k].entry()).collect();
        let mut scored: Vec<(f64, usize)> = pool
            .iter()
            .enumerate()
            .map(|(k, it)| (truth.pointwise_logit(&it.features) + spec.rank_noise * normal(&mut rng), k))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let request_id = format!("r{r}");
        let items = scored
            .iter()
            .take(spec.list_len)
            .map(|&(_, k)| pool[k].clone())
            .collect();
        rerank.push(RerankRecord {
            request_id: request_id.clone(),
            user: user.profile.clone(),
            history: user.history.clone(),
            items,
        });
        candidates.push(RerankRecord {
            request_id,
            user: user.profile.clone(),
            history: user.history.clone(),
            items: pool,
        });
    }
    simulate_clicks(&mut rerank, &truth, seed);

    let pretrain: Vec<PretrainRecord> = (0..spec.pretrain_records)
        .map(|k| {
            let mut rng = rng::stream(seed, "impression", &[k as u64]);
            let user = &users[rng.random_range(0..users.len())];
            let mut item = catalog[rng.random_range(0..catalog.len())].entry();
            let p = truth.impression_probability(&user.profile, &item.features);
            item.label = u8::from(rng.random::<f64>() < p);
            PretrainRecord {
                user: user.profile.clone(),
                history: user.history.clone(),
                item,
            }
        })
        .collect();

    let full_vocab = |mut m: DatasetManifest| {
        if m.num_records > 0 {
            m.vocab.category = c;
            m.vocab.gender = spec.genders;
            m.vocab.age_bucket = spec.age_buckets;
            m.vocab.purchase_level = spec.purchase_levels;
            m.vocab.item_id = spec.catalog_size;
        }
        m
    };
    let rerank_manifest = full_vocab(manifest_for(&rerank, RecordKind::Rerank, spec.list_len)?);
    let candidates_manifest =
        full_vocab(manifest_for(&candidates, RecordKind::Candidates, spec.candidates)?);
    let pretrain_manifest = full_vocab(manifest_for(&pretrain, RecordKind::Pretrain, 1)?);
    Ok(SynthDataset {
        spec: spec.clone(),
        truth,
        rerank,
        rerank_manifest,
        candidates,
        candidates_manifest,
        pretrain,
        pretrain_manifest,
    })
}

/// File names written by [`write_synthetic`].
pub mod files {
    pub const RERANK_TRAIN: &str = "rerank_train.jsonl";
    pub const RERANK_TEST: &str = "rerank_test.jsonl";
    pub const CANDIDATES_TRAIN: &str = "candidates_train.jsonl";
    pub const CANDIDATES_TEST: &str = "candidates_test.jsonl";
    pub const PRETRAIN: &str = "pretrain.jsonl";
    pub const TRUTH: &str = "truth.json";
    pub const SPEC: &str = "spec.json";
}

fn split_manifest<R: Record>(template: &DatasetManifest, records: &[R]) -> DatasetManifest {
    if records.is_empty() {
        return DatasetManifest::empty(template.kind);
    }
    DatasetManifest {
        num_records: records.len(),
        num_items: records.iter().map(|r| r.list_len()).sum(),
        ..template.clone()
    }
}

/// Writes the dataset into `dir`, with the last `test_requests` requests held
/// out as the test split. Returns the paths written.
pub fn write_synthetic(ds: &SynthDataset, dir: &Path, test_requests: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let cut = ds.rerank.len().saturating_sub(test_requests);
    let mut written = Vec::new();
    let mut rerank = |name: &str, recs: &[RerankRecord], template: &DatasetManifest| -> Result<()> {
        let p = dir.join(name);
        let m = split_manifest(template, recs);
        write_records(&p, recs, Some(&m))?;
        written.push(p.clone());
        written.push(manifest_path(&p));
        Ok(())
    };
    rerank(files::RERANK_TRAIN, &ds.rerank[..cut], &ds.rerank_manifest)?;
    rerank(files::RERANK_TEST, &ds.rerank[cut..], &ds.rerank_manifest)?;
    rerank(files::CANDIDATES_TRAIN, &ds.candidates[..cut], &ds.candidates_manifest)?;
    rerank(files::CANDIDATES_TEST, &ds.candidates[cut..], &ds.candidates_manifest)?;
    let p = dir.join(files::PRETRAIN);
    write_records(&p, &ds.pretrain, Some(&ds.pretrain_manifest))?;
    written.push(p.clone());
    written.push(manifest_path(&p));
    for (name, text) in [
        (files::TRUTH, to_canonical_json(&ds.truth)?),
        (files::SPEC, to_canonical_json(&ds.spec)?),
    ] {
        let p = dir.join(name);
        fs::write(&p, text + "\n")?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::to_canonical_json;
    use crate::eval::metrics::map_at_k;

    fn small() -> SynthSpec {
        SynthSpec {
            requests: 50,
            pretrain_records: 40,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_synthetic(&small(), 5).unwrap();
        let b = generate_synthetic(&small(), 5).unwrap();
        let c = generate_synthetic(&small(), 6).unwrap();
        let bytes = |d: &SynthDataset| {
            to_canonical_json(&(&d.rerank, &d.pretrain, &d.candidates, &d.truth)).unwrap()
        };
        assert_eq!(bytes(&a), bytes(&b));
        assert_ne!(bytes(&a), bytes(&c));
    }

    #[test]
    fn shapes_and_manifests() {
        let s = small();
        let d = generate_synthetic(&s, 1).unwrap();
        assert_eq!(d.rerank.len(), 50);
        assert!(d.rerank.iter().all(|r| r.items.len() == s.list_len));
        assert!(d.candidates.iter().all(|r| r.items.len() == s.candidates));
        assert_eq!(d.rerank_manifest.d_feature, s.d_feature());
        assert_eq!(d.rerank_manifest.n_max, s.list_len);
        assert_eq!(d.rerank_manifest.vocab.category, s.num_categories);
        assert_eq!(d.pretrain_manifest.num_records, 40);
        assert_eq!(d.truth.high_affinity_pairs().len(), 2 * s.affinity_pairs);
        for r in &d.rerank {
            for it in &r.items {
                let onehot: f64 = it.features[s.d_dense..].iter().sum();
                assert_eq!(onehot, 1.0);
                assert_eq!(it.features[s.d_dense + it.category as usize], 1.0);
            }
        }
    }

    #[test]
    fn empty_request_set_is_valid() {
        let s = SynthSpec {
            requests: 0,
            pretrain_records: 0,
            ..SynthSpec::default()
        };
        let d = generate_synthetic(&s, 1).unwrap();
        assert!(d.rerank.is_empty());
        assert_eq!(d.rerank_manifest.num_records, 0);
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let s = SynthSpec {
            d_dense: 1,
            num_categories: 0,
            ..SynthSpec::default()
        };
        assert!(generate_synthetic(&s, 1).is_err());
        let s = SynthSpec {
            candidates: 3,
            list_len: 5,
            ..SynthSpec::default()
        };
        assert!(matches!(generate_synthetic(&s, 1), Err(PrmError::Config(_))));
    }

    #[test]
    fn no_interaction_control_has_pointwise_oracle_optimal() {
        let s = SynthSpec {
            requests: 200,
            interaction_scale: 0.0,
            personalization_scale: 0.0,
            ..SynthSpec::default()
        };
        let d = generate_synthetic(&s, 3).unwrap();
        for r in &d.rerank {
            for i in 0..r.items.len() {
                let full = d.truth.expected_click_logit(r, i);
                let pw = d.truth.bias + d.truth.pointwise_logit(&r.items[i].features);
                assert!((full - pw).abs() < 1e-12);
            }
        }
    }

    fn ranked_labels(records: &[RerankRecord], score: impl Fn(&RerankRecord, usize) -> f64) -> Vec<Vec<u8>> {
        records
            .iter()
            .map(|r| {
                let mut idx: Vec<usize> = (0..r.items.len()).collect();
                let s: Vec<f64> = idx.iter().map(|&i| score(r, i)).collect();
                idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
                idx.iter().map(|&i| r.items[i].label).collect()
            })
            .collect()
    }

    #[test]
    fn interaction_aware_oracle_beats_pointwise_oracle() {
        let s = SynthSpec {
            requests: 10_000,
            pretrain_records: 0,
            interaction_scale: 1.0,
            ..SynthSpec::default()
        };
        let d = generate_synthetic(&s, 21).unwrap();
        let k = s.list_len;
        let full = ranked_labels(&d.rerank, |r, i| d.truth.expected_click_logit(r, i));
        let pointwise = ranked_labels(&d.rerank, |r, i| d.truth.pointwise_logit(&r.items[i].features));
        let m_full: f64 = map_at_k(&full, k).unwrap();
        let m_pw: f64 = map_at_k(&pointwise, k).unwrap();
        assert!(m_full > m_pw, "oracle {m_full} vs pointwise {m_pw}");
    }
}
