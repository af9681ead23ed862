//! Stage functions chaining data, pretraining, neighbor identification,
//! decentralized training and evaluation, plus the on-disk artifacts that
//! connect them.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::collab::{self, DeviceState, RoundRecord, TrainingLog};
use crate::config::ExperimentConfig;
use crate::data::{self, Dataset, Split, UserId};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport};
use crate::neighbors::{self, NeighborMap};
use crate::pretrain::{self, PretrainReport};
use crate::recommender::CoreParams;
use crate::seed::derive_rng;

pub fn synthesize(cfg: &ExperimentConfig) -> Result<Dataset> {
    data::generate_synthetic(&cfg.synth, cfg.synth.seed)
}

/// Sparse-user/POI filtering followed by the leave-one-out split.
pub fn prepare_split(d: &Dataset, cfg: &ExperimentConfig) -> Result<Split> {
    let filtered = data::filter_sparse(d, cfg.min_user_checkins.max(2), cfg.min_poi_visits)?;
    data::split_leave_one_out(&filtered, cfg.seq_cap)
}

pub fn stage_pretrain(split: &Split, cfg: &ExperimentConfig) -> Result<(CoreParams, PretrainReport)> {
    let mut rng = derive_rng(cfg.seed, "pretrain", 0);
    pretrain::pretrain(&split.train.catalog, &cfg.pretrain(), &mut rng)
}

pub fn stage_neighbors(split: &Split, cfg: &ExperimentConfig) -> Result<NeighborMap> {
    neighbors::identify_neighbors(&split.train.trajectories, &split.train.catalog, &cfg.neighbors(), cfg.seed)
}

pub fn stage_train(
    split: &Split,
    init: &CoreParams,
    nb: &NeighborMap,
    cfg: &ExperimentConfig,
    parallel: bool,
) -> Result<(Vec<DeviceState>, TrainingLog)> {
    let ccfg = collab::CollabConfig { parallel, ..cfg.collab() };
    let mut devices = collab::init_devices(&split.train.trajectories, &split.train.catalog, init, &ccfg, cfg.seed)?;
    let log = collab::run_training(&mut devices, nb, &split.train.catalog, &ccfg)?;
    Ok((devices, log))
}

pub fn stage_eval(split: &Split, models: &[&CoreParams], cfg: &ExperimentConfig) -> Result<MetricsReport> {
    eval::evaluate(&split.train.trajectories, &split.test, models, &split.train.catalog, cfg.n_cand)
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub pretrain: PretrainReport,
    pub init: CoreParams,
    pub neighbors: NeighborMap,
    pub log: TrainingLog,
    pub models: Vec<(UserId, CoreParams)>,
    pub report: MetricsReport,
}

/// Every stage in memory, starting from an already split dataset.
pub fn run_split(split: &Split, cfg: &ExperimentConfig, parallel: bool) -> Result<PipelineResult> {
    cfg.validate()?;
    let (init, pre) = stage_pretrain(split, cfg)?;
    let nb = stage_neighbors(split, cfg)?;
    let (devices, log) = stage_train(split, &init, &nb, cfg, parallel)?;
    let models: Vec<&CoreParams> = devices.iter().map(|d| &d.params).collect();
    let report = stage_eval(split, &models, cfg)?;
    Ok(PipelineResult {
        pretrain: pre,
        init,
        neighbors: nb,
        log,
        models: devices.into_iter().map(|d| (d.user, d.params)).collect(),
        report,
    })
}

pub fn run_pipeline(d: &Dataset, cfg: &ExperimentConfig, parallel: bool) -> Result<PipelineResult> {
    run_split(&prepare_split(d, cfg)?, cfg, parallel)
}

/// Provenance stamped on every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Meta {
    pub fn new(stage: &str, cfg: &ExperimentConfig) -> Self {
        Meta {
            stage: stage.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
        }
    }

    /// Refuses an artifact produced under a different configuration.
    pub fn check(&self, path: &Path, cfg: &ExperimentConfig, force: bool) -> Result<()> {
        let expected = cfg.hash();
        if force || (self.config_hash == expected && self.seed == cfg.seed) {
            return Ok(());
        }
        Err(Error::ChainMismatch {
            path: path.to_path_buf(),
            expected: format!("{expected} (seed {})", cfg.seed),
            found: format!("{} (seed {})", self.config_hash, self.seed),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub meta: Meta,
    pub checkins: String,
    pub pois: String,
    pub n_users: usize,
    pub n_pois: usize,
    pub n_checkins: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainArtifact {
    pub meta: Meta,
    pub report: PretrainReport,
    pub params: CoreParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborsArtifact {
    pub meta: Meta,
    pub users: NeighborMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceModel {
    pub user: UserId,
    pub params: CoreParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelsArtifact {
    pub meta: Meta,
    pub mean_local_loss: Vec<f64>,
    pub converged: bool,
    pub devices: Vec<DeviceModel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsArtifact {
    pub meta: Meta,
    pub report: MetricsReport,
}

/// Fixed file names inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn checkins(&self) -> PathBuf {
        self.root.join("checkins.csv")
    }
    pub fn pois(&self) -> PathBuf {
        self.root.join("pois.csv")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.json")
    }
    pub fn pretrained(&self) -> PathBuf {
        self.root.join("pretrained.json")
    }
    pub fn neighbors(&self) -> PathBuf {
        self.root.join("neighbors.json")
    }
    pub fn models(&self) -> PathBuf {
        self.root.join("models.json")
    }
    pub fn rounds(&self) -> PathBuf {
        self.root.join("rounds.jsonl")
    }
    pub fn metrics_json(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut w, value)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_round_log(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(dir: &RunDir, d: &Dataset, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&dir.root)?;
    data::write_dataset(d, &dir.checkins(), &dir.pois())?;
    let manifest = DatasetManifest {
        meta: Meta::new("dataset", cfg),
        checkins: "checkins.csv".into(),
        pois: "pois.csv".into(),
        n_users: d.n_users(),
        n_pois: d.n_pois(),
        n_checkins: d.n_checkins(),
    };
    write_json(&dir.dataset(), &manifest)
}

/// Reads the run directory's dataset; a CSV pair without a manifest is
/// accepted as external input.
pub fn load_dataset(dir: &RunDir, cfg: &ExperimentConfig, force: bool) -> Result<Dataset> {
    for p in [dir.checkins(), dir.pois()] {
        if !p.exists() {
            return Err(Error::MissingArtifact(p));
        }
    }
    if dir.dataset().exists() {
        let m: DatasetManifest = read_json(&dir.dataset())?;
        m.meta.check(&dir.dataset(), cfg, force)?;
    }
    data::load_checkins(&dir.checkins(), &dir.pois())
}

pub fn load_checked<T: DeserializeOwned>(path: &Path, cfg: &ExperimentConfig, force: bool, meta: impl Fn(&T) -> &Meta) -> Result<T> {
    let v: T = read_json(path)?;
    meta(&v).check(path, cfg, force)?;
    Ok(v)
}
