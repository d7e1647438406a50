//! The staged offline workflow, with one provenance record per stage.
//!
//! Every path is relative to the run directory. Stages and their artifacts:
//!
//! | stage | reads | writes |
//! |-------|-------|--------|
//! | `convert-letor` | `letor_train`, `letor_test` | `train_file`, `test_file` |
//! | `train-baseline` | `data/pretrain.jsonl` | `models/baseline.json` |
//! | `build-lists` | baseline, `data/candidates_{train,test}.jsonl`, optional `data/truth.json` | `train_file`, `test_file` |
//! | `pretrain` | `data/pretrain.jsonl`, lists | `models/pretrain.json` |
//! | `extract-pv` | pretrain model, lists | `pv/{train,test}.jsonl` |
//! | `train-prm` | lists, PV tables | `models/prm.json` |
//! | `eval` | PRM model, test list | `reports/metrics.json`, `reports/metrics_initial.json`, `reports/scores.jsonl` |
//! | `export-attention` | PRM model, test list | `reports/attention_<grouping>.csv` |
//!
//! Training stages also write `logs/<stage>.jsonl`, and each stage writes
//! `provenance/<stage>.json` with the resolved configuration, the stage seed
//! and SHA-256 digests of its inputs and outputs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{BaselineConfig, BaselineModel, BaselineObjective};
use crate::checkpoint::Checkpoint;
use crate::data::letor::{self, convert_letor, parse_letor_text};
use crate::data::synth::{files, generate_synthetic, simulate_clicks, write_synthetic, GroundTruth, SynthSpec};
use crate::data::{
    manifest_for, manifest_path, read_records, to_canonical_json, write_records, DatasetManifest, PretrainRecord,
    RecordKind, RerankRecord, DEFAULT_N_MAX,
};
use crate::error::{PrmError, Result};
use crate::eval::{check_compatible, evaluate_run, export_attention, Grouping, HeadSelect, IdentityReranker, MapVariant, PrmReranker};
use crate::params::ParamStore;
use crate::pretrain::{ItemVocab, PretrainConfig, PretrainModel, PretrainObjective, PvTable};
use crate::prm::{PrmConfig, PrmModel};
use crate::rng;
use crate::train::{fit, LogLine, PrmObjective, TrainConfig, TrainObserver};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    ConvertLetor,
    TrainBaseline,
    BuildLists,
    Pretrain,
    ExtractPv,
    TrainPrm,
    Eval,
    ExportAttention,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::ConvertLetor,
        Stage::TrainBaseline,
        Stage::BuildLists,
        Stage::Pretrain,
        Stage::ExtractPv,
        Stage::TrainPrm,
        Stage::Eval,
        Stage::ExportAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::ConvertLetor => "convert-letor",
            Stage::TrainBaseline => "train-baseline",
            Stage::BuildLists => "build-lists",
            Stage::Pretrain => "pretrain",
            Stage::ExtractPv => "extract-pv",
            Stage::TrainPrm => "train-prm",
            Stage::Eval => "eval",
            Stage::ExportAttention => "export-attention",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PrmError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PrmError::Config(format!("unknown stage `{s}`")))
    }
}

/// Parses a comma-separated stage list; `all` selects every stage except
/// `convert-letor`.
pub fn parse_stages(s: &str) -> Result<Vec<Stage>> {
    if s.trim() == "all" {
        return Ok(Stage::ALL[1..].to_vec());
    }
    let mut v = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<Vec<Stage>>>()?;
    v.sort();
    v.dedup();
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineStage {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for BaselineStage {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32],
            train: TrainConfig {
                batch_size: 256,
                epochs: 5,
                max_steps: 2000,
                constant_lr: Some(1e-3),
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainStage {
    pub d_emb: usize,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for PretrainStage {
    fn default() -> Self {
        Self {
            d_emb: PretrainConfig::DEFAULT_D_EMB,
            hidden: PretrainConfig::DEFAULT_HIDDEN.to_vec(),
            train: TrainConfig {
                batch_size: 256,
                epochs: 5,
                max_steps: 2000,
                constant_lr: Some(1e-3),
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrmStage {
    /// `d_feature`, `d_pv` and `n_max` are taken from the data.
    pub model: PrmConfig,
    pub train: TrainConfig,
    /// Trailing fraction of the training lists held out for early stopping.
    pub valid_fraction: f64,
}

impl Default for PrmStage {
    fn default() -> Self {
        Self {
            model: PrmConfig::default(),
            train: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            valid_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalStage {
    pub map_variant: MapVariant,
    pub groupings: Vec<Grouping>,
    /// Defaults to the last block.
    pub block: Option<usize>,
    pub head: HeadSelect,
}

impl Default for EvalStage {
    fn default() -> Self {
        Self {
            map_variant: MapVariant::Cutoff,
            groupings: vec![Grouping::Category, Grouping::PriceLevel, Grouping::Position],
            block: None,
            head: HeadSelect::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synth: SynthSpec,
    /// Requests of the synthetic set held out as the test split.
    pub test_requests: usize,
    pub n_max: usize,
    pub data_dir: String,
    pub train_file: String,
    pub test_file: String,
    pub letor_train: String,
    pub letor_test: String,
    pub letor_threshold: f64,
    pub letor_eta: f64,
    pub baseline: BaselineStage,
    pub pretrain: PretrainStage,
    pub prm: PrmStage,
    pub eval: EvalStage,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthSpec::default(),
            test_requests: 200,
            n_max: DEFAULT_N_MAX,
            data_dir: "data".into(),
            train_file: "lists/train.jsonl".into(),
            test_file: "lists/test.jsonl".into(),
            letor_train: "data/letor_train.txt".into(),
            letor_test: "data/letor_test.txt".into(),
            letor_threshold: letor::DEFAULT_THRESHOLD,
            letor_eta: letor::DEFAULT_ETA,
            baseline: BaselineStage::default(),
            pretrain: PretrainStage::default(),
            prm: PrmStage::default(),
            eval: EvalStage::default(),
        }
    }
}

type Lists = (Vec<RerankRecord>, DatasetManifest);
type LoadedPrm = (PrmModel<f64>, Vec<RerankRecord>, DatasetManifest, Option<PvTable>);

pub const BASELINE_MODEL: &str = "models/baseline.json";
pub const PRETRAIN_MODEL: &str = "models/pretrain.json";
pub const PRM_MODEL: &str = "models/prm.json";
pub const PV_TRAIN: &str = "pv/train.jsonl";
pub const PV_TEST: &str = "pv/test.jsonl";
pub const METRICS: &str = "reports/metrics.json";
pub const METRICS_INITIAL: &str = "reports/metrics_initial.json";
pub const SCORES: &str = "reports/scores.jsonl";

pub fn attention_file(g: Grouping) -> String {
    format!("reports/attention_{}.csv", g.name())
}

/// Hex SHA-256 of a file.
pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub version: String,
}

struct FileLog {
    w: BufWriter<fs::File>,
}

impl<T> TrainObserver<T> for FileLog {
    fn on_log(&mut self, line: &LogLine) -> Result<()> {
        let s = line.to_json()?;
        log::debug!("{s}");
        writeln!(self.w, "{s}")?;
        Ok(())
    }
}

/// A run directory plus its resolved configuration.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub root: PathBuf,
    pub config: PipelineConfig,
}

struct StageIo {
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl StageIo {
    fn new() -> Self {
        Self {
            inputs: vec![],
            outputs: vec![],
        }
    }
}

impl Pipeline {
    pub fn new(root: impl Into<PathBuf>, config: PipelineConfig) -> Self {
        Self {
            root: root.into(),
            config,
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn data(&self, name: &str) -> String {
        format!("{}/{name}", self.config.data_dir)
    }

    /// Seed of a stage, derived from the global seed.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        rng::mix(&[self.config.seed, stage as u64])
    }

    fn require(&self, io: &mut StageIo, rel: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(PrmError::Dependency {
                artifact: rel.into(),
                stage: producer.into(),
            });
        }
        io.inputs.push(rel.into());
        let m = manifest_path(&p);
        if rel.ends_with(".jsonl") && m.exists() {
            io.inputs.push(format!("{}", Path::new(rel).with_file_name(m.file_name().unwrap_or_default()).display()));
        }
        Ok(p)
    }

    fn output(&self, io: &mut StageIo, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        io.outputs.push(rel.into());
        Ok(p)
    }

    fn write_lists(&self, io: &mut StageIo, rel: &str, records: &[RerankRecord], m: &DatasetManifest) -> Result<()> {
        let p = self.output(io, rel)?;
        write_records(&p, records, Some(m))?;
        io.outputs.push(format!(
            "{}",
            Path::new(rel).with_file_name(manifest_path(&p).file_name().unwrap_or_default()).display()
        ));
        Ok(())
    }

    pub fn run(&self, stages: &[Stage]) -> Result<()> {
        for &s in stages {
            self.run_stage(s)?;
        }
        Ok(())
    }

    /// Generates the synthetic dataset into `data_dir`.
    pub fn synthesize(&self) -> Result<()> {
        let c = &self.config;
        let ds = generate_synthetic(&c.synth, c.seed)?;
        let dir = self.path(&c.data_dir);
        let written = write_synthetic(&ds, &dir, c.test_requests)?;
        let mut io = StageIo::new();
        for p in written {
            let rel = p.strip_prefix(&self.root).unwrap_or(&p);
            io.outputs.push(rel.display().to_string());
        }
        self.write_provenance("synth", c.seed, &io)
    }

    fn write_provenance(&self, stage: &str, seed: u64, io: &StageIo) -> Result<()> {
        let hashes = |v: &[String]| -> Result<BTreeMap<String, String>> {
            v.iter().map(|r| Ok((r.clone(), sha256_file(&self.path(r))?))).collect()
        };
        let prov = Provenance {
            stage: stage.into(),
            seed,
            config: self.config.clone(),
            inputs: hashes(&io.inputs)?,
            outputs: hashes(&io.outputs)?,
            version: env!("CARGO_PKG_VERSION").into(),
        };
        let p = self.path(&format!("provenance/{stage}.json"));
        fs::create_dir_all(p.parent().unwrap_or(Path::new(".")))?;
        fs::write(&p, to_canonical_json(&prov)? + "\n")?;
        log::info!("stage {stage}: wrote {}", io.outputs.join(", "));
        Ok(())
    }

    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        log::info!("stage {stage}: start");
        let mut io = StageIo::new();
        let seed = self.stage_seed(stage);
        match stage {
            Stage::ConvertLetor => self.convert_letor(&mut io, seed)?,
            Stage::TrainBaseline => self.train_baseline(&mut io, seed)?,
            Stage::BuildLists => self.build_lists(&mut io, seed)?,
            Stage::Pretrain => self.pretrain(&mut io, seed)?,
            Stage::ExtractPv => self.extract_pv(&mut io)?,
            Stage::TrainPrm => self.train_prm(&mut io, seed)?,
            Stage::Eval => self.eval(&mut io)?,
            Stage::ExportAttention => self.export_attention(&mut io)?,
        }
        self.write_provenance(stage.name(), seed, &io)
    }

    fn convert_letor(&self, io: &mut StageIo, seed: u64) -> Result<()> {
        let c = &self.config;
        for (src, dst, salt) in [(&c.letor_train, &c.train_file, 0u64), (&c.letor_test, &c.test_file, 1)] {
            let p = self.path(src);
            if !p.exists() {
                return Err(PrmError::Config(format!("letor input `{src}` not found")));
            }
            io.inputs.push(src.clone());
            let graded = parse_letor_text(BufReader::new(fs::File::open(&p)?))?;
            let mut recs = convert_letor(&graded, c.letor_threshold, c.letor_eta, rng::mix(&[seed, salt]))?;
            for r in &mut recs {
                r.items.truncate(c.n_max);
            }
            let m = manifest_for(&recs, RecordKind::Rerank, c.n_max)?;
            self.write_lists(io, dst, &recs, &m)?;
        }
        Ok(())
    }

    fn train_baseline(&self, io: &mut StageIo, seed: u64) -> Result<()> {
        let p = self.require(io, &self.data(files::PRETRAIN), "synth")?;
        let (recs, m) = read_records::<PretrainRecord>(&p)?;
        let st = &self.config.baseline;
        let cfg = BaselineConfig {
            d_feature: m.d_feature,
            hidden: st.hidden.clone(),
        };
        let init = BaselineModel::<f64>::new(cfg.clone(), seed)?;
        let obj = BaselineObjective {
            config: &cfg,
            items: recs.iter().map(|r| &r.item).collect(),
        };
        let params = self.fit_logged(io, "logs/train-baseline.jsonl", init.params, &obj, &st.train, seed, 1)?;
        let model = BaselineModel { config: cfg, params };
        model.to_checkpoint()?.save(&self.output(io, BASELINE_MODEL)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn fit_logged<O: crate::train::Objective<f64>>(
        &self,
        io: &mut StageIo,
        log_rel: &str,
        params: ParamStore<f64>,
        obj: &O,
        train: &TrainConfig,
        seed: u64,
        d_model: usize,
    ) -> Result<ParamStore<f64>> {
        let cfg = TrainConfig {
            seed,
            ..train.clone()
        };
        let mut log = FileLog {
            w: BufWriter::new(fs::File::create(self.output(io, log_rel)?)?),
        };
        let r = fit(params, obj, &cfg, cfg.schedule(d_model), &mut log)?;
        log.w.flush()?;
        log::info!("trained {} steps over {} epochs", r.steps, r.epochs);
        Ok(r.params)
    }

    fn build_lists(&self, io: &mut StageIo, seed: u64) -> Result<()> {
        let c = &self.config;
        let ck = self.require(io, BASELINE_MODEL, "train-baseline")?;
        let model = BaselineModel::<f64>::from_checkpoint(&Checkpoint::load(&ck)?)?;
        let truth_rel = self.data(files::TRUTH);
        let truth: Option<GroundTruth> = if self.path(&truth_rel).exists() {
            io.inputs.push(truth_rel.clone());
            Some(serde_json::from_str(&fs::read_to_string(self.path(&truth_rel))?)?)
        } else {
            None
        };
        for (src, dst, salt) in [
            (files::CANDIDATES_TRAIN, &c.train_file, 0u64),
            (files::CANDIDATES_TEST, &c.test_file, 1),
        ] {
            let p = self.require(io, &self.data(src), "synth")?;
            let (cands, cm) = crate::data::parse_records(&p, RecordKind::Candidates)?;
            let crate::data::Records::Rerank(cands) = cands else {
                unreachable!("candidates parse as rerank records")
            };
            let (mut lists, _) = model.build_initial_lists(&cands, c.n_max)?;
            if let Some(t) = &truth {
                simulate_clicks(&mut lists, t, rng::mix(&[seed, salt]));
            }
            let mut m = manifest_for(&lists, RecordKind::Rerank, c.n_max)?;
            if m.num_records > 0 {
                m.vocab = cm.vocab.clone();
            }
            self.write_lists(io, dst, &lists, &m)?;
        }
        Ok(())
    }

    fn lists(&self, io: &mut StageIo) -> Result<(Lists, Lists)> {
        let producer = "build-lists";
        let tr = self.require(io, &self.config.train_file, producer)?;
        let te = self.require(io, &self.config.test_file, producer)?;
        Ok((read_records(&tr)?, read_records(&te)?))
    }

    fn pretrain(&self, io: &mut StageIo, seed: u64) -> Result<()> {
        let p = self.require(io, &self.data(files::PRETRAIN), "synth")?;
        let (recs, m) = read_records::<PretrainRecord>(&p)?;
        let ((train, tm), (test, sm)) = self.lists(io)?;
        let mut items = ItemVocab::from_records(&recs);
        items.extend(&train);
        items.extend(&test);
        let mut vocab = m.vocab.clone();
        for other in [&tm.vocab, &sm.vocab] {
            vocab.gender = vocab.gender.max(other.gender);
            vocab.age_bucket = vocab.age_bucket.max(other.age_bucket);
            vocab.purchase_level = vocab.purchase_level.max(other.purchase_level);
        }
        let st = &self.config.pretrain;
        let cfg = PretrainConfig {
            d_emb: st.d_emb,
            hidden: st.hidden.clone(),
            ..PretrainConfig::new(m.d_feature, &vocab, items)
        };
        let init = PretrainModel::<f64>::new(cfg.clone(), seed)?;
        let obj = PretrainObjective {
            config: &cfg,
            records: &recs,
        };
        let params = self.fit_logged(io, "logs/pretrain.jsonl", init.params, &obj, &st.train, seed, 1)?;
        PretrainModel { config: cfg, params }
            .to_checkpoint()?
            .save(&self.output(io, PRETRAIN_MODEL)?)
    }

    fn extract_pv(&self, io: &mut StageIo) -> Result<()> {
        let ck = self.require(io, PRETRAIN_MODEL, "pretrain")?;
        let model = PretrainModel::<f64>::from_checkpoint(&Checkpoint::load(&ck)?)?;
        let ((train, _), (test, _)) = self.lists(io)?;
        model.extract_pv_table(&train)?.save(&self.output(io, PV_TRAIN)?)?;
        model.extract_pv_table(&test)?.save(&self.output(io, PV_TEST)?)
    }

    fn load_pv(&self, io: &mut StageIo, rel: &str) -> Result<Option<PvTable>> {
        if !self.config.prm.model.use_pv {
            return Ok(None);
        }
        Ok(Some(PvTable::load(&self.require(io, rel, "extract-pv")?)?))
    }

    /// Model config with the data-dependent widths filled in.
    pub fn prm_config(&self, manifest: &DatasetManifest, pv: Option<&PvTable>) -> PrmConfig {
        PrmConfig {
            d_feature: manifest.d_feature,
            d_pv: pv
                .and_then(|t| t.rows().first().map(|r| r.pv.len()))
                .unwrap_or(self.config.prm.model.d_pv),
            n_max: manifest.n_max,
            ..self.config.prm.model.clone()
        }
    }

    fn train_prm(&self, io: &mut StageIo, seed: u64) -> Result<()> {
        let ((train, tm), _) = self.lists(io)?;
        let pv = self.load_pv(io, PV_TRAIN)?;
        let cfg = self.prm_config(&tm, pv.as_ref());
        let st = &self.config.prm;
        if !(0.0..1.0).contains(&st.valid_fraction) {
            return Err(PrmError::Config("prm.valid_fraction must lie in [0, 1)".into()));
        }
        let n_valid = (train.len() as f64 * st.valid_fraction).round() as usize;
        let (fit_set, valid) = train.split_at(train.len() - n_valid);
        let obj = PrmObjective::new(&cfg, fit_set, pv.as_ref(), Some((valid, pv.as_ref())))?;
        let init = PrmModel::<f64>::new(cfg.clone(), seed)?;
        let params = self.fit_logged(io, "logs/train-prm.jsonl", init.params.clone(), &obj, &st.train, seed, cfg.d_model)?;
        PrmModel::from_params(cfg, params)?
            .to_checkpoint()?
            .save(&self.output(io, PRM_MODEL)?)
    }

    fn load_prm(&self, io: &mut StageIo) -> Result<LoadedPrm> {
        let ck = self.require(io, PRM_MODEL, "train-prm")?;
        let model = PrmModel::<f64>::from_checkpoint(&Checkpoint::load(&ck)?)?;
        let te = self.require(io, &self.config.test_file, "build-lists")?;
        let (test, m) = read_records::<RerankRecord>(&te)?;
        check_compatible(&model.config, &m)?;
        let pv = if model.config.use_pv {
            Some(PvTable::load(&self.require(io, PV_TEST, "extract-pv")?)?)
        } else {
            None
        };
        Ok((model, test, m, pv))
    }

    fn eval(&self, io: &mut StageIo) -> Result<()> {
        let (model, test, m, pv) = self.load_prm(io)?;
        let variant = self.config.eval.map_variant;
        let run = evaluate_run(&test, &PrmReranker { model: &model, pv: pv.as_ref() }, m.n_max, variant)?;
        let initial = evaluate_run(&test, &IdentityReranker, m.n_max, variant)?;
        fs::write(self.output(io, METRICS)?, run.metrics.to_json()? + "\n")?;
        fs::write(self.output(io, METRICS_INITIAL)?, initial.metrics.to_json()? + "\n")?;
        fs::write(self.output(io, SCORES)?, run.dumps_jsonl()?)?;
        log::info!(
            "MAP@{}: re-ranked {:.4}, initial {:.4}",
            m.n_max,
            run.metrics.map_at(m.n_max),
            initial.metrics.map_at(m.n_max)
        );
        Ok(())
    }

    fn export_attention(&self, io: &mut StageIo) -> Result<()> {
        let (model, test, m, pv) = self.load_prm(io)?;
        let e = &self.config.eval;
        for &g in &e.groupings {
            let agg = export_attention(&model, &test, pv.as_ref(), g, e.block, e.head, m.vocab.category.max(1))?;
            fs::write(self.output(io, &attention_file(g))?, agg.to_csv())?;
        }
        Ok(())
    }
}
