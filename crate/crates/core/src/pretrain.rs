//! Pointwise click model whose last hidden layer provides the personalized
//! vector (PV) of each (request, item) pair.
//!
//! Input row of one impression:
//! `[mean(history emb) ; gender emb ; age emb ; purchase emb ; item emb ; features]`,
//! followed by relu layers and a sigmoid logit.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{check_layout, Checkpoint};
use crate::data::{to_canonical_json, ItemEntry, PretrainRecord, Record, RerankRecord, UserProfile, VocabSizes};
use crate::error::{PrmError, Result};
use crate::params::{glorot, normal_init, Bound, ParamStore};
use crate::rng::DropoutKey;
use crate::scalar::Scalar;
use crate::tensor::Tensor2;
use crate::train::Objective;

/// Sorted item-id vocabulary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemVocab {
    ids: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ItemVocab {
    pub fn new(ids: impl IntoIterator<Item = String>) -> Self {
        let mut ids: Vec<String> = ids.into_iter().collect();
        ids.sort();
        ids.dedup();
        let mut v = Self { ids, index: HashMap::new() };
        v.reindex();
        v
    }

    /// Every item id that appears in `records`, as a list entry or in a
    /// history.
    pub fn from_records<R: Record>(records: &[R]) -> Self {
        Self::new(records.iter().flat_map(|r| {
            r.history()
                .iter()
                .cloned()
                .chain(r.entries().iter().map(|i| i.item_id.clone()))
        }))
    }

    pub fn extend<R: Record>(&mut self, records: &[R]) {
        let merged = Self::new(
            self.ids
                .drain(..)
                .chain(Self::from_records(records).ids),
        );
        *self = merged;
    }

    fn reindex(&mut self) {
        self.index = self.ids.iter().enumerate().map(|(k, s)| (s.clone(), k)).collect();
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| PrmError::Vocabulary(format!("unknown item id `{id}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub d_emb: usize,
    /// Hidden widths; the last one is `d_pv`.
    pub hidden: Vec<usize>,
    pub d_feature: usize,
    pub gender: usize,
    pub age_bucket: usize,
    pub purchase_level: usize,
    pub items: ItemVocab,
}

impl PretrainConfig {
    pub const DEFAULT_D_EMB: usize = 16;
    pub const DEFAULT_HIDDEN: [usize; 2] = [64, 32];

    pub fn new(d_feature: usize, vocab: &VocabSizes, items: ItemVocab) -> Self {
        Self {
            d_emb: Self::DEFAULT_D_EMB,
            hidden: Self::DEFAULT_HIDDEN.to_vec(),
            d_feature,
            gender: vocab.gender.max(1),
            age_bucket: vocab.age_bucket.max(1),
            purchase_level: vocab.purchase_level.max(1),
            items,
        }
    }

    pub fn d_pv(&self) -> usize {
        self.hidden.last().copied().unwrap_or(0)
    }

    pub fn d_user(&self) -> usize {
        4 * self.d_emb
    }

    pub fn d_input(&self) -> usize {
        self.d_user() + self.d_emb + self.d_feature
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(PrmError::Config(
                "pretrain needs d_emb >= 1 and at least one non-empty hidden layer".into(),
            ));
        }
        if self.items.is_empty() {
            return Err(PrmError::Config("pretrain item vocabulary is empty".into()));
        }
        Ok(())
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut p = ParamStore::new();
        let e = self.d_emb;
        for (name, rows) in [
            ("emb.item", self.items.len()),
            ("emb.gender", self.gender),
            ("emb.age", self.age_bucket),
            ("emb.purchase", self.purchase_level),
        ] {
            p.insert(name, normal_init(seed, name, rows, e, 0.1));
        }
        let mut fan_in = self.d_input();
        for (k, &w) in self.hidden.iter().enumerate() {
            let name = format!("mlp.l{k}.w");
            p.insert(name.clone(), glorot(seed, &name, fan_in, w));
            p.insert(format!("mlp.l{k}.b"), Tensor2::zeros(1, w));
            fan_in = w;
        }
        p.insert("out.w", glorot(seed, "out.w", fan_in, 1));
        p.insert("out.b", Tensor2::zeros(1, 1));
        Ok(p)
    }
}

/// Impression to be scored: a user context and one displayed item.
#[derive(Clone, Copy, Debug)]
pub struct Impression<'a> {
    pub user: &'a UserProfile,
    pub history: &'a [String],
    pub item: &'a ItemEntry,
}

impl<'a> From<&'a PretrainRecord> for Impression<'a> {
    fn from(r: &'a PretrainRecord) -> Self {
        Self {
            user: &r.user,
            history: &r.history,
            item: &r.item,
        }
    }
}

fn categorical(name: &str, id: u32, size: usize) -> Result<usize> {
    if (id as usize) < size {
        Ok(id as usize)
    } else {
        Err(PrmError::Vocabulary(format!("{name} id {id} outside vocabulary of size {size}")))
    }
}

/// Records the user representation of a batch of contexts:
/// `[mean history emb ; gender ; age ; purchase]`, one row per context.
/// Empty histories contribute a zero block.
pub fn user_representation<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &PretrainConfig,
    users: &[(&UserProfile, &[String])],
) -> Result<Var> {
    let b = users.len();
    let mut hist_ids = Vec::new();
    let mut spans = Vec::with_capacity(b);
    for (_, h) in users {
        let start = hist_ids.len();
        for id in h.iter() {
            hist_ids.push(cfg.items.get(id)?);
        }
        spans.push((start, h.len()));
    }
    let hist = if hist_ids.is_empty() {
        tape.constant(Tensor2::zeros(b, cfg.d_emb))
    } else {
        let mut avg = Tensor2::zeros(b, hist_ids.len());
        for (r, &(start, len)) in spans.iter().enumerate() {
            for k in start..start + len {
                avg[(r, k)] = T::one() / T::of_usize(len);
            }
        }
        let g = tape.gather_rows(bound.get("emb.item")?, &hist_ids)?;
        let a = tape.constant(avg);
        tape.matmul(a, g)?
    };
    let idx = |name: &str, f: &dyn Fn(&UserProfile) -> u32, size: usize| -> Result<Vec<usize>> {
        users.iter().map(|(u, _)| categorical(name, f(u), size)).collect()
    };
    let g = idx("gender", &|u| u.gender, cfg.gender)?;
    let a = idx("age_bucket", &|u| u.age_bucket, cfg.age_bucket)?;
    let p = idx("purchase_level", &|u| u.purchase_level, cfg.purchase_level)?;
    let g = tape.gather_rows(bound.get("emb.gender")?, &g)?;
    let a = tape.gather_rows(bound.get("emb.age")?, &a)?;
    let p = tape.gather_rows(bound.get("emb.purchase")?, &p)?;
    tape.concat_cols(&[hist, g, a, p])
}

/// Click probabilities (`b × 1`) and personalized vectors (`b × d_pv`).
#[derive(Clone, Copy, Debug)]
pub struct PretrainOutput {
    pub p_click: Var,
    pub pv: Var,
}

/// Records the network on a batch of impressions.
pub fn pretrain_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &PretrainConfig,
    batch: &[Impression<'_>],
) -> Result<PretrainOutput> {
    let users: Vec<(&UserProfile, &[String])> = batch.iter().map(|i| (i.user, i.history)).collect();
    let user = user_representation(tape, bound, cfg, &users)?;
    let item_ids = batch
        .iter()
        .map(|i| cfg.items.get(&i.item.item_id))
        .collect::<Result<Vec<_>>>()?;
    let item = tape.gather_rows(bound.get("emb.item")?, &item_ids)?;
    let mut feats = Tensor2::zeros(batch.len(), cfg.d_feature);
    for (r, imp) in batch.iter().enumerate() {
        if imp.item.features.len() != cfg.d_feature {
            return Err(PrmError::Config(format!(
                "item `{}` has {} features, pretrain model expects {}",
                imp.item.item_id,
                imp.item.features.len(),
                cfg.d_feature
            )));
        }
        for (d, &s) in feats.row_mut(r).iter_mut().zip(&imp.item.features) {
            *d = T::of(s);
        }
    }
    let feats = tape.constant(feats);
    let mut h = tape.concat_cols(&[user, item, feats])?;
    for k in 0..cfg.hidden.len() {
        let z = tape.matmul(h, bound.get(&format!("mlp.l{k}.w"))?)?;
        let z = tape.add_row(z, bound.get(&format!("mlp.l{k}.b"))?)?;
        h = tape.relu(z);
    }
    let logit = tape.matmul(h, bound.get("out.w")?)?;
    let logit = tape.add_row(logit, bound.get("out.b")?)?;
    let p_click = tape.sigmoid(logit);
    Ok(PretrainOutput { p_click, pv: h })
}

/// Summed binary cross entropy, with probabilities clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn pretrain_loss<T: Scalar>(tape: &mut Tape<T>, p_click: Var, labels: &[T]) -> Result<Var> {
    tape.binary_cross_entropy(p_click, labels)
}

/// Trained personalization network.
#[derive(Clone, Debug)]
pub struct PretrainModel<T> {
    pub config: PretrainConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> PretrainModel<T> {
    pub fn new(config: PretrainConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: PretrainConfig, params: ParamStore<T>) -> Result<Self> {
        check_layout(&params, &config.init_params::<T>(0)?)?;
        Ok(Self { config, params })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut config: PretrainConfig = ck.config()?;
        config.items.reindex();
        Self::from_params(config, ck.params()?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(&self.config, &self.params)
    }

    /// User representation of one context as plain values.
    pub fn user_representation(&self, user: &UserProfile, history: &[String]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let v = user_representation(&mut tape, &bound, &self.config, &[(user, history)])?;
        Ok(tape.value(v).data().to_vec())
    }

    /// `(p_click, pv)` for every impression.
    pub fn predict(&self, batch: &[Impression<'_>]) -> Result<(Vec<T>, Tensor2<T>)> {
        if batch.is_empty() {
            return Ok((vec![], Tensor2::zeros(0, self.config.d_pv())));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let out = pretrain_forward(&mut tape, &bound, &self.config, batch)?;
        Ok((tape.value(out.p_click).data().to_vec(), tape.value(out.pv).clone()))
    }

    /// One PV row per (request, item) of `records`, computed without
    /// stochasticity.
    pub fn extract_pv_table(&self, records: &[RerankRecord]) -> Result<PvTable> {
        let mut table = PvTable::default();
        for r in records {
            let batch: Vec<Impression> = r
                .items
                .iter()
                .map(|item| Impression {
                    user: &r.user,
                    history: &r.history,
                    item,
                })
                .collect();
            let (_, pv) = self.predict(&batch)?;
            for (k, it) in r.items.iter().enumerate() {
                table.push(PvRow {
                    request_id: r.request_id.clone(),
                    item_id: it.item_id.clone(),
                    pv: pv.row(k).iter().map(|x| x.to_f64_lossy()).collect(),
                });
            }
        }
        Ok(table)
    }
}

/// Training objective over pointwise impressions.
pub struct PretrainObjective<'a> {
    pub config: &'a PretrainConfig,
    pub records: &'a [PretrainRecord],
}

impl<T: Scalar> Objective<T> for PretrainObjective<'_> {
    fn num_examples(&self) -> usize {
        self.records.len()
    }

    fn batch_loss(&self, tape: &mut Tape<T>, bound: &Bound, indices: &[usize], _key: DropoutKey) -> Result<Var> {
        let batch: Vec<Impression> = indices.iter().map(|&i| (&self.records[i]).into()).collect();
        let labels: Vec<T> = indices.iter().map(|&i| T::of(f64::from(self.records[i].item.label))).collect();
        let out = pretrain_forward(tape, bound, self.config, &batch)?;
        pretrain_loss(tape, out.p_click, &labels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PvRow {
    pub request_id: String,
    pub item_id: String,
    pub pv: Vec<f64>,
}

/// Personalized vectors keyed by `(request_id, item_id)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PvTable {
    rows: Vec<PvRow>,
    index: HashMap<(String, String), usize>,
}

impl PvTable {
    pub fn push(&mut self, row: PvRow) {
        let key = (row.request_id.clone(), row.item_id.clone());
        self.index.entry(key).or_insert(self.rows.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[PvRow] {
        &self.rows
    }

    pub fn lookup(&self, request_id: &str, item_id: &str) -> Result<&[f64]> {
        self.index
            .get(&(request_id.to_string(), item_id.to_string()))
            .map(|&k| self.rows[k].pv.as_slice())
            .ok_or_else(|| {
                PrmError::Vocabulary(format!("no pv for item `{item_id}` of request `{request_id}`"))
            })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for row in &self.rows {
            writeln!(w, "{}", to_canonical_json(row)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(reader: impl BufRead) -> Result<Self> {
        let mut table = Self::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: PvRow = serde_json::from_str(&line).map_err(|e| PrmError::Parse {
                line: i + 1,
                field: "pv".into(),
                message: e.to_string(),
            })?;
            table.push(row);
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn user(g: u32) -> UserProfile {
        UserProfile {
            user_id: format!("u{g}"),
            gender: g,
            age_bucket: 1,
            purchase_level: 0,
        }
    }

    fn item(id: &str, f: [f64; 2], label: u8) -> ItemEntry {
        ItemEntry {
            item_id: id.into(),
            category: 0,
            price_level: 1,
            features: f.to_vec(),
            label,
        }
    }

    fn config() -> PretrainConfig {
        let vocab = VocabSizes {
            item_id: 3,
            category: 1,
            price_level: 7,
            gender: 2,
            age_bucket: 2,
            purchase_level: 2,
        };
        let mut c = PretrainConfig::new(2, &vocab, ItemVocab::new(["a", "b", "c"].map(String::from)));
        c.d_emb = 3;
        c.hidden = vec![5, 4];
        c
    }

    #[test]
    fn empty_history_slot_is_zero_and_mean_is_idempotent() {
        let m = PretrainModel::<f64>::new(config(), 1).unwrap();
        let u = user(0);
        let rep = m.user_representation(&u, &[]).unwrap();
        assert_eq!(rep.len(), 12);
        assert!(rep[..3].iter().all(|&x| x == 0.0));
        let one = m.user_representation(&u, &["a".into()]).unwrap();
        let two = m.user_representation(&u, &["a".into(), "a".into()]).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn history_mean_matches_direct_average() {
        let m = PretrainModel::<f64>::new(config(), 2).unwrap();
        let rep = m.user_representation(&user(1), &["a".into(), "c".into()]).unwrap();
        let e = m.params.get("emb.item").unwrap();
        for j in 0..3 {
            let want = (e[(0, j)] + e[(2, j)]) / 2.0;
            assert!((rep[j] - want).abs() < 1e-15);
        }
        let ba = m.user_representation(&user(1), &["c".into(), "a".into()]).unwrap();
        assert_eq!(rep, ba);
    }

    #[test]
    fn unknown_ids_are_vocabulary_errors() {
        let m = PretrainModel::<f64>::new(config(), 3).unwrap();
        assert!(matches!(m.user_representation(&user(0), &["zz".into()]), Err(PrmError::Vocabulary(_))));
        assert!(matches!(m.user_representation(&user(5), &[]), Err(PrmError::Vocabulary(_))));
    }

    #[test]
    fn zero_output_layer_gives_one_half() {
        let mut m = PretrainModel::<f64>::new(config(), 4).unwrap();
        *m.params.get_mut("out.w").unwrap() = Tensor2::zeros(4, 1);
        let u = user(1);
        let hist = vec!["b".to_string()];
        let it = item("c", [0.3, -2.0], 1);
        let (p, pv) = m.predict(&[Impression { user: &u, history: &hist, item: &it }]).unwrap();
        assert_eq!(p, vec![0.5]);
        assert_eq!(pv.shape(), (1, 4));
    }

    #[test]
    fn forward_matches_scalar_reimplementation() {
        let m = PretrainModel::<f64>::new(config(), 5).unwrap();
        let u = user(1);
        let hist = vec!["a".to_string(), "b".to_string()];
        let it = item("c", [0.7, -0.4], 0);
        let (p, _) = m.predict(&[Impression { user: &u, history: &hist, item: &it }]).unwrap();

        let get = |n: &str| m.params.get(n).unwrap();
        let emb = get("emb.item");
        let mut x = Vec::new();
        for j in 0..3 {
            x.push((emb[(0, j)] + emb[(1, j)]) * 0.5);
        }
        x.extend_from_slice(get("emb.gender").row(1));
        x.extend_from_slice(get("emb.age").row(1));
        x.extend_from_slice(get("emb.purchase").row(0));
        x.extend_from_slice(emb.row(2));
        x.extend_from_slice(&[0.7, -0.4]);
        for k in 0..2 {
            let w = get(&format!("mlp.l{k}.w"));
            let b = get(&format!("mlp.l{k}.b"));
            x = (0..w.cols())
                .map(|c| {
                    let s: f64 = (0..w.rows()).map(|r| x[r] * w[(r, c)]).sum::<f64>() + b[(0, c)];
                    s.max(0.0)
                })
                .collect();
        }
        let w = get("out.w");
        let z: f64 = x.iter().enumerate().map(|(r, v)| v * w[(r, 0)]).sum::<f64>() + get("out.b")[(0, 0)];
        let want = 1.0 / (1.0 + (-z).exp());
        assert!((p[0] - want).abs() < 1e-14, "{} vs {want}", p[0]);
    }

    #[test]
    fn loss_values() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor2::from_vec(1, 1, vec![0.5]).unwrap());
        let l = pretrain_loss(&mut tape, p, &[1.0]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let p = tape.constant(Tensor2::from_vec(1, 1, vec![1.0]).unwrap());
        let l = pretrain_loss(&mut tape, p, &[1.0]).unwrap();
        assert!(tape.value(l).item() < 1e-11);
        let ps = [0.2, 0.9, 0.6];
        let ys = [0.0, 1.0, 1.0];
        let p = tape.constant(Tensor2::from_vec(3, 1, ps.to_vec()).unwrap());
        let l = pretrain_loss(&mut tape, p, &ys).unwrap();
        let want: f64 = ps
            .iter()
            .zip(ys)
            .map(|(p, y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum();
        assert!((tape.value(l).item() - want).abs() < 1e-14);
    }

    #[test]
    fn pv_table_round_trip_and_lookup() {
        let mut t = PvTable::default();
        t.push(PvRow { request_id: "r".into(), item_id: "a".into(), pv: vec![0.1, 1.0 / 3.0] });
        t.push(PvRow { request_id: "r".into(), item_id: "b".into(), pv: vec![2.0, -0.0] });
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = PvTable::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.lookup("r", "a").unwrap(), &[0.1, 1.0 / 3.0]);
        assert!(matches!(back.lookup("x", "a"), Err(PrmError::Vocabulary(_))));
    }
}
