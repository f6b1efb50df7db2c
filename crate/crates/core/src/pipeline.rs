//! End-to-end experiment wiring: load, split, build the library, construct
//! proxies, train and evaluate.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use log::info;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, GateConfig, LinearBackbone, DEFAULT_KERNEL};
use crate::continuation::{
    construct_all, train_pbcc_predictor, ConstructionContext, ContinuationConfig, ContinuationPredictor, Variant,
};
use crate::dataset::{extract_chains, load_csv, split, RawSeries, Split, SplitSpec, Standardizer, WindowSet};
use crate::error::{Error, Result};
use crate::fusion::GateMode;
use crate::library::{build_library, Descriptor, RetrievalLibrary, DEFAULT_EPSILON};
use crate::search::RetrievalConfig;
use crate::training::{evaluate_set, train, Optimizer, SampleSet, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: PathBuf,
    /// Display name used in tables; defaults to the file stem.
    pub name: Option<String>,
    /// `"6:2:2"`-style ratios, `"ett-h"` or `"ett-m"`.
    pub split: String,
    /// Treat the first CSV column as a timestamp and skip it.
    pub drop_first_column: bool,
    /// Keep only the first rows of the file.
    pub max_rows: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::new(),
            name: None,
            split: "6:2:2".into(),
            drop_first_column: true,
            max_rows: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LibraryParams {
    pub epsilon: f64,
    pub stride: usize,
    /// Follows the continuation variant when unset.
    pub descriptor: Option<Descriptor>,
}

impl Default for LibraryParams {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            stride: 1,
            descriptor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalParams {
    pub k: usize,
    pub tau: f64,
    pub exclude_self: bool,
    /// Defaults to `seq_len + pred_len`.
    pub exclusion_radius: Option<usize>,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            k: 5,
            tau: 0.1,
            exclude_self: true,
            exclusion_radius: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinuationParams {
    pub variant: Variant,
    pub clip: bool,
    pub clip_quantile: f64,
    pub epsilon_s: f64,
    pub align_epsilon: f64,
}

impl Default for ContinuationParams {
    fn default() -> Self {
        let d = ContinuationConfig::default();
        Self {
            variant: d.variant,
            clip: d.clip,
            clip_quantile: d.clip_quantile,
            epsilon_s: d.epsilon_s,
            align_epsilon: d.align_epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    /// Gated residual fusion after decomposition.
    Gated,
    /// Input and proxy stacked along time into a `2L` input.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionParams {
    pub kind: FusionKind,
    pub gate: GateMode,
    pub alpha: f64,
    pub per_stream: bool,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            kind: FusionKind::Gated,
            gate: GateMode::Static,
            alpha: 0.75,
            per_stream: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneParams {
    pub kernel: usize,
    pub individual: bool,
}

impl Default for BackboneParams {
    fn default() -> Self {
        Self {
            kernel: DEFAULT_KERNEL,
            individual: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub optimizer: String,
    pub seeds: Vec<u64>,
    /// Use only the first training windows, for quick runs.
    pub max_train_windows: Option<usize>,
}

impl Default for TrainingParams {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            epochs: d.max_epochs,
            patience: d.patience,
            optimizer: "adam".into(),
            seeds: vec![1, 2, 3],
            max_train_windows: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub seq_len: usize,
    pub pred_len: usize,
    pub library: LibraryParams,
    pub retrieval: RetrievalParams,
    pub continuation: ContinuationParams,
    pub fusion: FusionParams,
    pub backbone: BackboneParams,
    pub training: TrainingParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            seq_len: 336,
            pred_len: 96,
            library: LibraryParams::default(),
            retrieval: RetrievalParams::default(),
            continuation: ContinuationParams::default(),
            fusion: FusionParams::default(),
            backbone: BackboneParams::default(),
            training: TrainingParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.pred_len == 0 {
            return Err(Error::config("seq_len and pred_len must be positive"));
        }
        SplitSpec::parse(&self.data.split)?;
        if !(self.library.epsilon > 0.0) || self.library.stride == 0 {
            return Err(Error::config("library epsilon and stride must be positive"));
        }
        if let Some(d) = self.library.descriptor {
            if d != self.descriptor() {
                return Err(Error::config(format!(
                    "descriptor {d:?} conflicts with continuation variant {}",
                    self.continuation.variant
                )));
            }
        }
        self.retrieval_config().validate()?;
        self.continuation_config().validate()?;
        if !(0.0..=1.0).contains(&self.fusion.alpha) {
            return Err(Error::config(format!(
                "alpha must lie in [0, 1], got {}",
                self.fusion.alpha
            )));
        }
        if self.training.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        self.train_config(self.training.seeds[0])?.validate()?;
        self.backbone_config(1, false).validate()
    }

    pub fn descriptor(&self) -> Descriptor {
        match self.continuation.variant {
            Variant::Ratio => Descriptor::Ratio,
            Variant::Residual => Descriptor::Residual,
            _ => self.library.descriptor.unwrap_or(Descriptor::Ratio),
        }
    }

    pub fn retrieval_config(&self) -> RetrievalConfig {
        let mut cfg = RetrievalConfig::new(self.retrieval.k, self.seq_len, self.pred_len);
        cfg.exclude_self_window = self.retrieval.exclude_self;
        if let Some(r) = self.retrieval.exclusion_radius {
            cfg.exclusion_radius = r;
        }
        cfg
    }

    pub fn continuation_config(&self) -> ContinuationConfig {
        ContinuationConfig {
            tau: self.retrieval.tau,
            clip_quantile: self.continuation.clip_quantile,
            clip: self.continuation.clip,
            epsilon_s: self.continuation.epsilon_s,
            align_epsilon: self.continuation.align_epsilon,
            variant: self.continuation.variant,
        }
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            learning_rate: self.training.learning_rate,
            batch_size: self.training.batch_size,
            max_epochs: self.training.epochs,
            patience: self.training.patience,
            optimizer: self.training.optimizer.parse::<Optimizer>()?,
            seed,
        })
    }

    /// Backbone shape for the baseline (`augmented = false`) or the fused model.
    pub fn backbone_config(&self, channels: usize, augmented: bool) -> BackboneConfig {
        let concat = augmented && self.fusion.kind == FusionKind::Concat;
        BackboneConfig {
            input_len: if concat { 2 * self.seq_len } else { self.seq_len },
            output_len: self.pred_len,
            channels,
            kernel: self.backbone.kernel,
            individual: self.backbone.individual,
            gate: (augmented && !concat).then_some(GateConfig {
                mode: self.fusion.gate,
                alpha: self.fusion.alpha,
                per_stream: self.fusion.per_stream,
            }),
        }
    }

    /// Short hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn dataset_name(&self) -> String {
        self.data.name.clone().unwrap_or_else(|| {
            self.data
                .path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        })
    }
}

/// Standardized partitions and their windows.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub split: Split,
    pub standardizer: Standardizer,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

impl PreparedData {
    pub fn channels(&self) -> usize {
        self.split.train.channels()
    }
}

/// Standardizes with training statistics and cuts windows.
pub fn prepare_series(series: &RawSeries, cfg: &ExperimentConfig) -> Result<PreparedData> {
    let spec = SplitSpec::parse(&cfg.data.split)?;
    let [train_rows, _, _] = spec.borders(series.len(), cfg.seq_len)?;
    let standardizer = Standardizer::fit(series.values.slice(ndarray::s![train_rows, ..]));
    let scaled = crate::dataset::standardize(series, &standardizer)?;
    let split = split(&scaled, &spec, cfg.seq_len, cfg.pred_len)?;
    let mut train = WindowSet::new(split.train.clone(), cfg.seq_len, cfg.pred_len)?;
    if let Some(n) = cfg.training.max_train_windows {
        train = train.truncated(n);
    }
    let val = WindowSet::new(split.val.clone(), cfg.seq_len, cfg.pred_len)?;
    let test = WindowSet::new(split.test.clone(), cfg.seq_len, cfg.pred_len)?;
    Ok(PreparedData {
        split,
        standardizer,
        train,
        val,
        test,
    })
}

pub fn load_series(cfg: &DataConfig) -> Result<RawSeries> {
    let mut series = load_csv(&cfg.path, cfg.drop_first_column)?;
    if let Some(n) = cfg.max_rows {
        if n < series.len() {
            series = RawSeries::new(
                series.values.slice(ndarray::s![..n, ..]).to_owned(),
                series.column_names.clone(),
            )?;
        }
    }
    Ok(series)
}

/// Library over the training partition.
pub fn build_train_library(data: &PreparedData, cfg: &ExperimentConfig) -> Result<RetrievalLibrary> {
    let chains = extract_chains(&data.split.train, cfg.seq_len, cfg.pred_len, cfg.library.stride)?;
    info!("building library from {} chains", chains.len());
    build_library(&chains, cfg.library.epsilon, cfg.descriptor())
}

/// Proxy windows for the three splits.
#[derive(Debug, Clone)]
pub struct AuxSets {
    pub train: Arc<Vec<Array2<f64>>>,
    pub val: Arc<Vec<Array2<f64>>>,
    pub test: Arc<Vec<Array2<f64>>>,
    pub predictor: Option<Arc<ContinuationPredictor>>,
}

/// Results of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub report: TrainReport,
    pub test_mse: f64,
    pub test_mae: f64,
}

/// Shared state for running several configurations over one dataset.
///
/// The data, library and baseline runs depend only on a subset of the
/// configuration and are cached across calls.
pub struct Experiment {
    base: ExperimentConfig,
    data: Arc<PreparedData>,
    libraries: HashMap<String, Arc<RetrievalLibrary>>,
    aux: HashMap<String, AuxSets>,
    baselines: HashMap<String, SeedRun>,
    keep_models: bool,
    models: HashMap<String, LinearBackbone>,
}

fn key<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("serializable key")
}

impl Experiment {
    pub fn open(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let series = load_series(&cfg.data)?;
        Self::from_series(&series, cfg)
    }

    pub fn from_series(series: &RawSeries, cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let data = prepare_series(series, cfg)?;
        Ok(Self {
            base: cfg.clone(),
            data: Arc::new(data),
            libraries: HashMap::new(),
            aux: HashMap::new(),
            baselines: HashMap::new(),
            keep_models: false,
            models: HashMap::new(),
        })
    }

    /// Keep trained models so they can be retrieved with [`Experiment::model`].
    pub fn keep_models(&mut self, keep: bool) {
        self.keep_models = keep;
    }

    pub fn data(&self) -> &PreparedData {
        &self.data
    }

    pub fn base_config(&self) -> &ExperimentConfig {
        &self.base
    }

    fn check_same_data(&self, cfg: &ExperimentConfig) -> Result<()> {
        if cfg.data != self.base.data
            || cfg.seq_len != self.base.seq_len
            || cfg.pred_len != self.base.pred_len
            || cfg.training.max_train_windows != self.base.training.max_train_windows
        {
            return Err(Error::config(
                "configuration refers to different data than the experiment",
            ));
        }
        cfg.validate()
    }

    fn library_key(cfg: &ExperimentConfig) -> String {
        key(&(cfg.library.epsilon, cfg.library.stride, cfg.descriptor()))
    }

    /// The training library for `cfg`, built on first use.
    pub fn library(&mut self, cfg: &ExperimentConfig) -> Result<Arc<RetrievalLibrary>> {
        self.check_same_data(cfg)?;
        let k = Self::library_key(cfg);
        if let Some(lib) = self.libraries.get(&k) {
            return Ok(lib.clone());
        }
        let lib = Arc::new(build_train_library(&self.data, cfg)?);
        self.libraries.insert(k, lib.clone());
        Ok(lib)
    }

    /// Installs a library loaded from disk, checked against a fresh fingerprint.
    pub fn insert_library(&mut self, cfg: &ExperimentConfig, library: RetrievalLibrary) {
        self.libraries.insert(Self::library_key(cfg), Arc::new(library));
    }

    fn aux_key(cfg: &ExperimentConfig) -> String {
        let pbcc = (cfg.continuation.variant == Variant::Pbcc).then(|| {
            (
                cfg.backbone.clone(),
                cfg.training.learning_rate,
                cfg.training.batch_size,
                cfg.training.epochs,
                cfg.training.patience,
                cfg.training.optimizer.clone(),
                cfg.training.seeds[0],
            )
        });
        key(&(
            Self::library_key(cfg),
            cfg.retrieval.clone(),
            cfg.continuation.clone(),
            cfg.training.seeds[0],
            pbcc,
        ))
    }

    /// Proxies for every window of the three splits.
    pub fn aux_sets(&mut self, cfg: &ExperimentConfig) -> Result<AuxSets> {
        let k = Self::aux_key(cfg);
        if let Some(a) = self.aux.get(&k) {
            return Ok(a.clone());
        }
        let library = self.library(cfg)?;
        let data = self.data.clone();
        let predictor = Self::predictor(&data, cfg)?;
        let build = |ws: &WindowSet, training| Self::proxies(&data, &library, predictor.as_deref(), cfg, ws, training);
        let sets = AuxSets {
            train: Arc::new(build(&data.train, true)?),
            val: Arc::new(build(&data.val, false)?),
            test: Arc::new(build(&data.test, false)?),
            predictor,
        };
        self.aux.insert(k, sets.clone());
        Ok(sets)
    }

    fn predictor(data: &PreparedData, cfg: &ExperimentConfig) -> Result<Option<Arc<ContinuationPredictor>>> {
        if cfg.continuation.variant != Variant::Pbcc {
            return Ok(None);
        }
        let train_chains = extract_chains(&data.split.train, cfg.seq_len, cfg.pred_len, cfg.library.stride)?;
        let val_chains = extract_chains(&data.split.val, cfg.seq_len, cfg.pred_len, 1).unwrap_or_default();
        let backbone = cfg.backbone_config(data.channels(), false);
        Ok(Some(Arc::new(train_pbcc_predictor(
            &train_chains,
            &val_chains,
            &backbone,
            &cfg.train_config(cfg.training.seeds[0])?,
        )?)))
    }

    fn proxies(
        data: &PreparedData,
        library: &RetrievalLibrary,
        predictor: Option<&ContinuationPredictor>,
        cfg: &ExperimentConfig,
        windows: &WindowSet,
        training: bool,
    ) -> Result<Vec<Array2<f64>>> {
        let ctx = ConstructionContext {
            train_series: Some(&data.split.train),
            pred_len: cfg.pred_len,
            predictor,
            seed: cfg.training.seeds[0],
            candidates: None,
        };
        let cont = cfg.continuation_config();
        info!("constructing {} proxies ({})", windows.len(), cont.variant);
        construct_all(windows, training, library, &cfg.retrieval_config(), &cont, &ctx)
    }

    fn baseline_key(cfg: &ExperimentConfig, seed: u64) -> String {
        key(&(cfg.backbone_config(1, false), &cfg.training, seed))
    }

    fn sets(&self, aux: Option<&AuxSets>, concat: bool) -> Result<[SampleSet; 3]> {
        let d = &self.data;
        let mk = |ws: &WindowSet, z: Option<&Arc<Vec<Array2<f64>>>>| -> Result<SampleSet> {
            let set = SampleSet::from_windows(ws.clone())?;
            match z {
                None => Ok(set),
                Some(z) => {
                    let set = set.with_aux(z.as_ref().clone())?;
                    if concat {
                        set.concatenated()
                    } else {
                        Ok(set)
                    }
                }
            }
        };
        Ok([
            mk(&d.train, aux.map(|a| &a.train))?,
            mk(&d.val, aux.map(|a| &a.val))?,
            mk(&d.test, aux.map(|a| &a.test))?,
        ])
    }

    fn fit(&mut self, cfg: &ExperimentConfig, seed: u64, aux: Option<&AuxSets>, tag: &str) -> Result<SeedRun> {
        let concat = cfg.fusion.kind == FusionKind::Concat;
        let [train_set, val_set, test_set] = self.sets(aux, concat)?;
        let model = LinearBackbone::new(cfg.backbone_config(self.data.channels(), aux.is_some()), seed)?;
        let (model, report) = train(model, &train_set, &val_set, &cfg.train_config(seed)?)?;
        let (test_mse, test_mae) = evaluate_set(&model, &test_set)?;
        info!("{tag} seed {seed}: test mse {test_mse:.6} mae {test_mae:.6}");
        if self.keep_models {
            self.models.insert(format!("{tag}/{seed}"), model);
        }
        Ok(SeedRun {
            seed,
            report,
            test_mse,
            test_mae,
        })
    }

    /// Baseline backbone for one seed; cached.
    pub fn run_baseline(&mut self, cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
        self.check_same_data(cfg)?;
        let k = Self::baseline_key(cfg, seed);
        if let Some(r) = self.baselines.get(&k) {
            return Ok(r.clone());
        }
        let run = self.fit(cfg, seed, None, "baseline")?;
        self.baselines.insert(k, run.clone());
        Ok(run)
    }

    /// Augmented backbone for one seed.
    pub fn run_augmented(&mut self, cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
        let aux = self.aux_sets(cfg)?;
        self.fit(cfg, seed, Some(&aux), "augmented")
    }

    /// Trained model kept by the last run with `tag` (`"baseline"` or `"augmented"`).
    pub fn model(&self, tag: &str, seed: u64) -> Option<&LinearBackbone> {
        self.models.get(&format!("{tag}/{seed}"))
    }

    /// Test samples as the baseline (`augmented = false`) or the fused model sees them.
    pub fn test_set(&mut self, cfg: &ExperimentConfig, augmented: bool) -> Result<SampleSet> {
        self.check_same_data(cfg)?;
        let data = self.data.clone();
        let set = SampleSet::from_windows(data.test.clone())?;
        if !augmented {
            return Ok(set);
        }
        let z = match self.aux.get(&Self::aux_key(cfg)) {
            Some(aux) => aux.test.as_ref().clone(),
            None => {
                let library = self.library(cfg)?;
                let predictor = Self::predictor(&data, cfg)?;
                Self::proxies(&data, &library, predictor.as_deref(), cfg, &data.test, false)?
            }
        };
        let set = set.with_aux(z)?;
        match cfg.fusion.kind {
            FusionKind::Concat => set.concatenated(),
            FusionKind::Gated => Ok(set),
        }
    }

    /// Test windows that have a known continuation, with their proxies.
    pub fn quality_pairs(&mut self, cfg: &ExperimentConfig) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
        let data = self.data.clone();
        let test = &data.test;
        let eligible: Vec<usize> = (0..test.len()).filter(|&i| test.f_true(i).is_some()).collect();
        let proxies = match self.aux.get(&Self::aux_key(cfg)) {
            Some(aux) => eligible.iter().map(|&i| aux.test[i].clone()).collect(),
            None if eligible.is_empty() => Vec::new(),
            None => {
                let library = self.library(cfg)?;
                let predictor = Self::predictor(&data, cfg)?;
                let subset = test.select(&eligible);
                Self::proxies(&data, &library, predictor.as_deref(), cfg, &subset, false)?
            }
        };
        let pairs: Vec<_> = eligible
            .iter()
            .zip(proxies)
            .map(|(&i, z)| (z, test.f_true(i).expect("eligible").to_owned()))
            .collect();
        if pairs.is_empty() {
            return Err(Error::NoEligibleQueries(format!(
                "no test window of length {} has a following {}-step continuation inside the test partition",
                cfg.seq_len + cfg.pred_len,
                cfg.seq_len
            )));
        }
        Ok(pairs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::RawSeries;

    pub(crate) fn toy_series(rows: usize, channels: usize) -> RawSeries {
        let values = Array2::from_shape_fn((rows, channels), |(t, c)| {
            let t = t as f64;
            (t * 0.26 + c as f64).sin() * (1.0 + 0.3 * c as f64) + 0.4 * (t * 0.05).cos() + 0.01 * t
        });
        RawSeries::from_values(values).unwrap()
    }

    pub(crate) fn toy_config() -> ExperimentConfig {
        ExperimentConfig {
            seq_len: 24,
            pred_len: 8,
            retrieval: RetrievalParams {
                k: 3,
                ..Default::default()
            },
            backbone: BackboneParams {
                kernel: 5,
                individual: false,
            },
            training: TrainingParams {
                epochs: 3,
                seeds: vec![1, 2],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = toy_config();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.fusion.alpha = 0.5;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = toy_config();
        c.fusion.alpha = 1.2;
        assert!(c.validate().unwrap_err().is_config());
        let mut c = toy_config();
        c.library.descriptor = Some(Descriptor::Residual);
        assert!(c.validate().unwrap_err().is_config());
        let mut c = toy_config();
        c.training.optimizer = "lbfgs".into();
        assert!(c.validate().unwrap_err().is_config());
        let mut c = toy_config();
        c.data.split = "1:1".into();
        assert!(c.validate().unwrap_err().is_config());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"seq_len": 4, "bogus": 1}"#);
        assert!(err.is_err());
        let ok = serde_json::from_str::<ExperimentConfig>(r#"{"seq_len": 4, "fusion": {"alpha": 0.3}}"#).unwrap();
        assert_eq!(ok.fusion.alpha, 0.3);
        assert_eq!(ok.fusion.gate, GateMode::Static);
    }

    #[test]
    fn runs_are_reproducible_and_cached() {
        let cfg = toy_config();
        let series = toy_series(400, 2);
        let mut exp = Experiment::from_series(&series, &cfg).unwrap();
        let a = exp.run_augmented(&cfg, 1).unwrap();
        let mut fresh = Experiment::from_series(&series, &cfg).unwrap();
        let b = fresh.run_augmented(&cfg, 1).unwrap();
        assert_eq!(a.test_mse.to_bits(), b.test_mse.to_bits());
        assert_eq!(a.report.epochs, b.report.epochs);
        let base1 = exp.run_baseline(&cfg, 1).unwrap();
        let base2 = exp.run_baseline(&cfg, 1).unwrap();
        assert_eq!(base1, base2);
    }

    #[test]
    fn other_data_is_rejected() {
        let cfg = toy_config();
        let mut exp = Experiment::from_series(&toy_series(400, 2), &cfg).unwrap();
        let mut other = cfg.clone();
        other.seq_len = 12;
        assert!(exp.run_baseline(&other, 1).unwrap_err().is_config());
    }

    #[test]
    fn every_variant_runs() {
        let base = toy_config();
        let series = toy_series(400, 2);
        let mut exp = Experiment::from_series(&series, &base).unwrap();
        for variant in [
            Variant::Ratio,
            Variant::Residual,
            Variant::DirectContinuation,
            Variant::Target,
            Variant::RandomRetrieval,
            Variant::Pbcc,
        ] {
            let mut cfg = base.clone();
            cfg.continuation.variant = variant;
            cfg.training.epochs = 1;
            let run = exp.run_augmented(&cfg, 1).unwrap();
            assert!(run.test_mse.is_finite(), "{variant}");
        }
        let mut cfg = base.clone();
        cfg.fusion.kind = FusionKind::Concat;
        cfg.training.epochs = 1;
        assert!(exp.run_augmented(&cfg, 1).unwrap().test_mse.is_finite());
    }
}
