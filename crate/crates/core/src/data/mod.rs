//! Record schemas, JSON-lines I/O and dataset manifests.
//!
//! Every data file is JSON lines with one record per line. A manifest named
//! `<stem>.manifest.json` sits beside it and pins the feature width, the list
//! capacity and the categorical vocabulary sizes. Records are written with
//! sorted keys so a write/parse/write cycle is byte-stable.

mod batch;
pub mod letor;
pub mod synth;

pub use batch::{batch_iter, Batch, BatchIter};

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{PrmError, Result};

/// Default capacity of an initial list.
pub const DEFAULT_N_MAX: usize = 30;
/// Price levels are categorical ids `1..=PRICE_LEVELS`.
pub const PRICE_LEVELS: u32 = 7;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserProfile {
    pub user_id: String,
    pub gender: u32,
    pub age_bucket: u32,
    pub purchase_level: u32,
}

impl UserProfile {
    pub fn anonymous(user_id: impl Into<String>) -> Self {
        Self {
            user_id: user_id.into(),
            gender: 0,
            age_bucket: 0,
            purchase_level: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemEntry {
    pub item_id: String,
    pub category: u32,
    pub price_level: u32,
    pub features: Vec<f64>,
    pub label: u8,
}

/// One request: a user and the initial ranked list shown to them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerankRecord {
    pub request_id: String,
    pub user: UserProfile,
    pub history: Vec<String>,
    pub items: Vec<ItemEntry>,
}

impl RerankRecord {
    pub fn labels(&self) -> Vec<u8> {
        self.items.iter().map(|i| i.label).collect()
    }

    pub fn num_clicks(&self) -> usize {
        self.items.iter().filter(|i| i.label == 1).count()
    }
}

/// One displayed item with its click label, used to fit the personalization
/// network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainRecord {
    pub user: UserProfile,
    pub history: Vec<String>,
    pub item: ItemEntry,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    /// Ordered initial lists.
    Rerank,
    /// Single displayed items.
    Pretrain,
    /// Unordered candidate sets, same schema as rerank records.
    Candidates,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSizes {
    pub item_id: usize,
    pub category: usize,
    pub price_level: usize,
    pub gender: usize,
    pub age_bucket: usize,
    pub purchase_level: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub kind: RecordKind,
    pub d_feature: usize,
    pub n_max: usize,
    pub vocab: VocabSizes,
    pub num_records: usize,
    pub num_items: usize,
}

impl DatasetManifest {
    pub fn empty(kind: RecordKind) -> Self {
        Self {
            kind,
            d_feature: 0,
            n_max: DEFAULT_N_MAX,
            vocab: VocabSizes::default(),
            num_records: 0,
            num_items: 0,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| PrmError::Manifest(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, to_canonical_json(self)? + "\n")?;
        Ok(())
    }

    fn check_positive(&self) -> Result<()> {
        if self.num_records == 0 {
            return Ok(());
        }
        let v = &self.vocab;
        let fields = [
            ("d_feature", self.d_feature),
            ("n_max", self.n_max),
            ("vocab.item_id", v.item_id),
            ("vocab.category", v.category),
            ("vocab.price_level", v.price_level),
            ("vocab.gender", v.gender),
            ("vocab.age_bucket", v.age_bucket),
            ("vocab.purchase_level", v.purchase_level),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(PrmError::Manifest(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// `data/train.jsonl` → `data/train.manifest.json`.
pub fn manifest_path(data_path: &Path) -> PathBuf {
    let stem = data_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    data_path.with_file_name(format!("{stem}.manifest.json"))
}

/// Serializes through `serde_json::Value`, whose map type keeps keys sorted.
pub fn to_canonical_json<S: Serialize>(value: &S) -> Result<String> {
    Ok(serde_json::to_string(&serde_json::to_value(value)?)?)
}

/// Accumulates vocabulary sizes and bounds while records stream past.
#[derive(Debug, Default)]
struct ManifestBuilder {
    d_feature: Option<usize>,
    n_max: usize,
    items: BTreeSet<String>,
    category: usize,
    price_level: usize,
    gender: usize,
    age_bucket: usize,
    purchase_level: usize,
    num_records: usize,
    num_items: usize,
}

impl ManifestBuilder {
    fn user(&mut self, u: &UserProfile, history: &[String]) {
        self.gender = self.gender.max(u.gender as usize + 1);
        self.age_bucket = self.age_bucket.max(u.age_bucket as usize + 1);
        self.purchase_level = self.purchase_level.max(u.purchase_level as usize + 1);
        self.items.extend(history.iter().cloned());
    }

    fn item(&mut self, line: usize, it: &ItemEntry) -> Result<()> {
        match self.d_feature {
            None => self.d_feature = Some(it.features.len()),
            Some(d) if d != it.features.len() => {
                return Err(PrmError::Manifest(format!(
                    "line {line}: item `{}` has {} features, earlier records have {d}",
                    it.item_id,
                    it.features.len()
                )))
            }
            Some(_) => {}
        }
        self.category = self.category.max(it.category as usize + 1);
        self.price_level = PRICE_LEVELS as usize;
        self.items.insert(it.item_id.clone());
        self.num_items += 1;
        Ok(())
    }

    fn finish(self, kind: RecordKind) -> DatasetManifest {
        if self.num_records == 0 {
            return DatasetManifest::empty(kind);
        }
        DatasetManifest {
            kind,
            d_feature: self.d_feature.unwrap_or(0),
            n_max: self.n_max.max(1),
            vocab: VocabSizes {
                item_id: self.items.len(),
                category: self.category.max(1),
                price_level: self.price_level.max(PRICE_LEVELS as usize),
                gender: self.gender.max(1),
                age_bucket: self.age_bucket.max(1),
                purchase_level: self.purchase_level.max(1),
            },
            num_records: self.num_records,
            num_items: self.num_items,
        }
    }
}

/// Behaviour shared by the record kinds stored as JSON lines.
pub trait Record: Serialize + DeserializeOwned + Clone {
    const KIND: RecordKind;

    fn user(&self) -> &UserProfile;
    fn history(&self) -> &[String];
    fn entries(&self) -> &[ItemEntry];

    fn list_len(&self) -> usize {
        self.entries().len()
    }
}

impl Record for RerankRecord {
    const KIND: RecordKind = RecordKind::Rerank;
    fn user(&self) -> &UserProfile {
        &self.user
    }
    fn history(&self) -> &[String] {
        &self.history
    }
    fn entries(&self) -> &[ItemEntry] {
        &self.items
    }
}

impl Record for PretrainRecord {
    const KIND: RecordKind = RecordKind::Pretrain;
    fn user(&self) -> &UserProfile {
        &self.user
    }
    fn history(&self) -> &[String] {
        &self.history
    }
    fn entries(&self) -> &[ItemEntry] {
        std::slice::from_ref(&self.item)
    }
}

fn validate_record<R: Record>(line: usize, rec: &R, m: &DatasetManifest) -> Result<()> {
    let items = rec.entries();
    if items.is_empty() {
        return Err(PrmError::Parse {
            line,
            field: "items".into(),
            message: "list must contain at least one item".into(),
        });
    }
    if m.kind != RecordKind::Pretrain && items.len() > m.n_max {
        return Err(PrmError::Manifest(format!(
            "line {line}: list has {} items but n_max is {}",
            items.len(),
            m.n_max
        )));
    }
    let u = rec.user();
    let v = &m.vocab;
    let cats = [
        ("user.gender", u.gender as usize, v.gender),
        ("user.age_bucket", u.age_bucket as usize, v.age_bucket),
        ("user.purchase_level", u.purchase_level as usize, v.purchase_level),
    ];
    for (field, id, size) in cats {
        if id >= size {
            return Err(PrmError::Parse {
                line,
                field: field.into(),
                message: format!("id {id} outside vocabulary of size {size}"),
            });
        }
    }
    for it in items {
        if it.features.len() != m.d_feature {
            return Err(PrmError::Manifest(format!(
                "line {line}: item `{}` has {} features, manifest declares {}",
                it.item_id,
                it.features.len(),
                m.d_feature
            )));
        }
        if it.label > 1 {
            return Err(PrmError::Parse {
                line,
                field: "label".into(),
                message: format!("label must be 0 or 1, got {}", it.label),
            });
        }
        if it.category as usize >= v.category {
            return Err(PrmError::Parse {
                line,
                field: "category".into(),
                message: format!("id {} outside vocabulary of size {}", it.category, v.category),
            });
        }
        if it.price_level < 1 || it.price_level > PRICE_LEVELS {
            return Err(PrmError::Parse {
                line,
                field: "price_level".into(),
                message: format!("price level {} outside 1..={PRICE_LEVELS}", it.price_level),
            });
        }
        if it.features.iter().any(|x| !x.is_finite()) {
            return Err(PrmError::Parse {
                line,
                field: "features".into(),
                message: "non-finite feature value".into(),
            });
        }
    }
    Ok(())
}

fn parse_line<R: Record>(line_no: usize, line: &str) -> Result<R> {
    let de = &mut serde_json::Deserializer::from_str(line);
    serde_path_to_error::deserialize(de).map_err(|e| PrmError::Parse {
        line: line_no,
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// Parses JSON-lines records from a reader, inferring a manifest.
pub fn parse_reader<R: Record>(reader: impl BufRead) -> Result<(Vec<R>, DatasetManifest)> {
    let mut out = Vec::new();
    let mut b = ManifestBuilder::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: R = parse_line(line_no, &line)?;
        b.user(rec.user(), rec.history());
        for it in rec.entries() {
            b.item(line_no, it)?;
        }
        b.n_max = b.n_max.max(rec.list_len());
        b.num_records += 1;
        out.push(rec);
    }
    Ok((out, b.finish(R::KIND)))
}

/// Reads records from `path`. When a manifest exists beside the file every
/// record is validated against it; otherwise the manifest is inferred from the
/// data, with rerank lists capped at [`DEFAULT_N_MAX`] items.
pub fn read_records<R: Record>(path: &Path) -> Result<(Vec<R>, DatasetManifest)> {
    read_records_as(path, R::KIND)
}

fn read_records_as<R: Record>(path: &Path, kind: RecordKind) -> Result<(Vec<R>, DatasetManifest)> {
    let file = fs::File::open(path)?;
    let (records, inferred) = parse_reader::<R>(BufReader::new(file))?;
    let mpath = manifest_path(path);
    let manifest = if mpath.exists() {
        let m = DatasetManifest::load(&mpath)?;
        if m.num_records != records.len() {
            return Err(PrmError::Manifest(format!(
                "{} declares {} records, file has {}",
                mpath.display(),
                m.num_records,
                records.len()
            )));
        }
        m
    } else {
        let mut m = inferred;
        m.kind = kind;
        if kind == RecordKind::Rerank {
            m.n_max = DEFAULT_N_MAX;
        }
        m
    };
    manifest.check_positive()?;
    for (i, r) in records.iter().enumerate() {
        validate_record(i + 1, r, &manifest)?;
    }
    Ok((records, manifest))
}

/// Records of either kind, as returned by [`parse_records`].
#[derive(Clone, Debug)]
pub enum Records {
    Rerank(Vec<RerankRecord>),
    Pretrain(Vec<PretrainRecord>),
}

impl Records {
    pub fn len(&self) -> usize {
        match self {
            Records::Rerank(r) => r.len(),
            Records::Pretrain(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn parse_records(path: &Path, kind: RecordKind) -> Result<(Records, DatasetManifest)> {
    match kind {
        RecordKind::Rerank | RecordKind::Candidates => {
            let (r, m) = read_records_as::<RerankRecord>(path, kind)?;
            Ok((Records::Rerank(r), m))
        }
        RecordKind::Pretrain => {
            let (r, m) = read_records::<PretrainRecord>(path)?;
            Ok((Records::Pretrain(r), m))
        }
    }
}

/// Writes records as canonical JSON lines.
pub fn write_records_to<R: Record>(mut w: impl Write, records: &[R]) -> Result<()> {
    for r in records {
        w.write_all(to_canonical_json(r)?.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the data file and, when given, its manifest beside it.
pub fn write_records<R: Record>(path: &Path, records: &[R], manifest: Option<&DatasetManifest>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_records_to(BufWriter::new(fs::File::create(path)?), records)?;
    if let Some(m) = manifest {
        m.save(&manifest_path(path))?;
    }
    Ok(())
}

/// Manifest describing `records` with an explicit list capacity.
pub fn manifest_for<R: Record>(records: &[R], kind: RecordKind, n_max: usize) -> Result<DatasetManifest> {
    let mut b = ManifestBuilder::default();
    for (i, r) in records.iter().enumerate() {
        b.user(r.user(), r.history());
        for it in r.entries() {
            b.item(i + 1, it)?;
        }
        b.n_max = b.n_max.max(r.list_len());
        b.num_records += 1;
    }
    if b.n_max > n_max && kind != RecordKind::Pretrain {
        return Err(PrmError::Manifest(format!(
            "a list has {} items but n_max is {n_max}",
            b.n_max
        )));
    }
    let mut m = b.finish(kind);
    m.n_max = n_max;
    Ok(m)
}
