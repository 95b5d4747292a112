//! Config-driven experiment runner.
//!
//! An experiment is a TOML file naming a kind (device or time transfer, the
//! two 3D floor scenarios, or a plain 2D baseline), a data source, model and
//! federation settings, and a list of seeds. [`run_experiment`] executes every
//! seed × method × ratio run and writes `results.csv`, `summary.csv` and the
//! fully resolved `config.resolved` snapshot that reproduces it.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{
    self, build_device_scenario, build_time_scenario, corpus_paths, load_csv, partition_by_floor, partition_by_phone,
    partition_uniform, suggest_split_time, FingerprintSet, Provenance, ScenarioOptions,
};
use crate::error::{Error, Result};
use crate::fedavg::{ClientHandle, EvalSet, Federation, FederationConfig, Metric, TrainingTrace};
use crate::floor3d::{self, FloorStage, ThreeDModel};
use crate::model::{self, init_params, Activation, Batch, MlpArchitecture, OutputHead, TrainingHyperparams};
use crate::seed::{self, stream};
use crate::synth::{self, SynthConfig};
use crate::transfer::{self, PreparedScenario, StageTrace, TransferConfig};

/// Environment variable naming the directory holding the UJIIndoorLoc CSVs.
pub const DATA_ROOT_ENV: &str = "FEDLOC_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentKind {
    #[serde(rename = "transfer_device")]
    TransferDevice,
    #[serde(rename = "transfer_time")]
    TransferTime,
    #[serde(rename = "floor3d_a")]
    Floor3dA,
    #[serde(rename = "floor3d_b")]
    Floor3dB,
    #[serde(rename = "baseline_2d")]
    Baseline2d,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::TransferDevice => "transfer_device",
            ExperimentKind::TransferTime => "transfer_time",
            ExperimentKind::Floor3dA => "floor3d_a",
            ExperimentKind::Floor3dB => "floor3d_b",
            ExperimentKind::Baseline2d => "baseline_2d",
        }
    }

    fn is_transfer(self) -> bool {
        matches!(self, ExperimentKind::TransferDevice | ExperimentKind::TransferTime)
    }

    fn is_floor3d(self) -> bool {
        matches!(self, ExperimentKind::Floor3dA | ExperimentKind::Floor3dB)
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// `trainingData.csv` and `validationData.csv` under `root`.
    Uji,
    /// The seeded generator in [`crate::synth`].
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(default = "default_synthetic_seed")]
    pub synthetic_seed: u64,
}

fn default_synthetic_seed() -> u64 {
    SynthConfig::default().seed
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            root: None,
            synthetic_seed: default_synthetic_seed(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientsConfig {
    /// Phone clients in the 2D experiments.
    pub n_clients: usize,
    /// Scenario B: clients per floor.
    pub clients_per_floor: usize,
    /// Scenario A: uniformly partitioned clients.
    pub uniform_clients: usize,
}

impl Default for ClientsConfig {
    fn default() -> Self {
        ClientsConfig {
            n_clients: 8,
            clients_per_floor: 4,
            uniform_clients: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![128, 64],
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub positive_class_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let hp = TrainingHyperparams::default();
        TrainConfig {
            learning_rate: hp.learning_rate,
            batch_size: hp.batch_size,
            local_epochs: hp.local_epochs,
            positive_class_weight: hp.positive_class_weight,
        }
    }
}

impl TrainConfig {
    fn hyperparams(&self, seed: u64) -> TrainingHyperparams {
        TrainingHyperparams {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            local_epochs: self.local_epochs,
            seed,
            positive_class_weight: self.positive_class_weight,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSettings {
    pub rounds: usize,
    pub participation_fraction: f64,
    pub eval_every: usize,
}

impl Default for FederationSettings {
    fn default() -> Self {
        let d = FederationConfig::default();
        FederationSettings {
            rounds: d.rounds,
            participation_fraction: d.participation_fraction,
            eval_every: d.eval_every,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSettings {
    pub transfer_round: usize,
    pub freeze_prefix: usize,
}

impl Default for TransferSettings {
    fn default() -> Self {
        TransferSettings {
            transfer_round: 200,
            freeze_prefix: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSettings {
    /// Device scenario target phones; empty means the selected phone with the
    /// fewest records (resolved at run time).
    pub target_phones: Vec<u32>,
    /// Time scenario split; absent means the widest timestamp gap.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_time: Option<i64>,
    pub holdout_fraction: f64,
    /// Target ratios; empty means `[1.0]` (device) or `[0.25, 0.5, 1.0]` (time).
    pub rho: Vec<f64>,
    /// Device scenario: append the target phones' validation-file rows to the
    /// holdout. 3D and baseline kinds: evaluate on the validation-file rows of
    /// the scope instead of a held-out split of the training rows.
    pub validation_in_holdout: bool,
    /// 3D kinds: also train per-floor 2D regressors and report 3D MAE.
    pub evaluate_3d: bool,
}

impl Default for ScenarioSettings {
    fn default() -> Self {
        ScenarioSettings {
            target_phones: Vec::new(),
            split_time: None,
            holdout_fraction: 0.3,
            rho: Vec::new(),
            validation_in_holdout: true,
            evaluate_3d: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment_id: String,
    pub kind: ExperimentKind,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_building")]
    pub building: u8,
    /// Floor for the 2D kinds; the 3D kinds use the whole building.
    #[serde(default = "default_floor")]
    pub floor: u8,
    #[serde(default)]
    pub clients: ClientsConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Sub-global stage hyperparameters; absent means the same as `train`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subglobal_train: Option<TrainConfig>,
    #[serde(default)]
    pub federation: FederationSettings,
    #[serde(default)]
    pub transfer: TransferSettings,
    #[serde(default)]
    pub scenario: ScenarioSettings,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_building() -> u8 {
    1
}

fn default_floor() -> u8 {
    1
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

fn field_error(field: &str, message: impl fmt::Display) -> Error {
    Error::Config(format!("{field}: {message}"))
}

/// Parse, range-check and default a TOML experiment description.
///
/// Unknown keys are rejected. The returned config has every static default
/// filled in; data-dependent defaults (target phone, split time) are filled
/// in by [`run_experiment`] and land in `config.resolved`.
pub fn validate_config(raw: &str) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = toml::from_str(raw).map_err(|e| Error::Config(e.message().to_string()))?;
    fill_defaults(&mut cfg);
    check_config(&cfg)?;
    Ok(cfg)
}

fn fill_defaults(cfg: &mut ExperimentConfig) {
    if cfg.experiment_id.is_empty() {
        cfg.experiment_id = cfg.kind.name().to_string();
    }
    if cfg.scenario.rho.is_empty() {
        cfg.scenario.rho = match cfg.kind {
            ExperimentKind::TransferTime => vec![0.25, 0.5, 1.0],
            _ => vec![1.0],
        };
    }
    if cfg.kind.is_transfer() && cfg.subglobal_train.is_none() {
        cfg.subglobal_train = Some(cfg.train);
    }
}

/// Range checks shared by [`validate_config`] and the override path.
pub fn check_config(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.experiment_id.contains([',', '\n', '"']) {
        return Err(field_error(
            "experiment_id",
            "must not contain commas, quotes or newlines",
        ));
    }
    match cfg.data.source {
        DataSource::Uji => {
            let root = cfg.data.root.as_ref().ok_or_else(|| {
                field_error(
                    "data.root",
                    format!("required for source \"uji\" (or set {DATA_ROOT_ENV})"),
                )
            })?;
            let (train, val) = corpus_paths(root);
            for p in [train, val] {
                if !p.is_file() {
                    return Err(field_error("data.root", format!("{} does not exist", p.display())));
                }
            }
        }
        DataSource::Synthetic => {
            if cfg.data.root.is_some() {
                return Err(field_error("data.root", "only meaningful for source \"uji\""));
            }
        }
    }
    if cfg.building > dataset::MAX_BUILDING {
        return Err(field_error(
            "building",
            format!("{} outside 0..={}", cfg.building, dataset::MAX_BUILDING),
        ));
    }
    if cfg.floor > dataset::MAX_FLOOR {
        return Err(field_error(
            "floor",
            format!("{} outside 0..={}", cfg.floor, dataset::MAX_FLOOR),
        ));
    }
    let c = &cfg.clients;
    for (name, v) in [
        ("clients.n_clients", c.n_clients),
        ("clients.clients_per_floor", c.clients_per_floor),
        ("clients.uniform_clients", c.uniform_clients),
    ] {
        if v == 0 {
            return Err(field_error(name, "must be at least 1"));
        }
    }
    if cfg.model.hidden.contains(&0) {
        return Err(field_error("model.hidden", "layer widths must be positive"));
    }
    check_train("train", &cfg.train)?;
    if let Some(t) = &cfg.subglobal_train {
        check_train("subglobal_train", t)?;
    }
    let f = &cfg.federation;
    if f.rounds == 0 {
        return Err(field_error("federation.rounds", "must be at least 1"));
    }
    if !(f.participation_fraction > 0.0 && f.participation_fraction <= 1.0) {
        return Err(field_error(
            "federation.participation_fraction",
            format!("{} outside (0, 1]", f.participation_fraction),
        ));
    }
    if f.eval_every == 0 {
        return Err(field_error("federation.eval_every", "must be at least 1"));
    }
    if cfg.kind.is_transfer() {
        let t = &cfg.transfer;
        if t.transfer_round == 0 || t.transfer_round > f.rounds {
            return Err(field_error(
                "transfer.transfer_round",
                format!("{} outside 1..={}", t.transfer_round, f.rounds),
            ));
        }
        let layers = cfg.model.hidden.len() + 1;
        if t.freeze_prefix >= layers {
            return Err(field_error(
                "transfer.freeze_prefix",
                format!("{} must be below the layer count {layers}", t.freeze_prefix),
            ));
        }
    }
    let s = &cfg.scenario;
    if !(0.0..1.0).contains(&s.holdout_fraction) || (s.holdout_fraction == 0.0 && !cfg.kind.is_transfer()) {
        return Err(field_error(
            "scenario.holdout_fraction",
            format!("{} outside (0, 1)", s.holdout_fraction),
        ));
    }
    if s.rho.is_empty() {
        return Err(field_error("scenario.rho", "must not be empty"));
    }
    for &r in &s.rho {
        if !(r > 0.0 && r <= 1.0) {
            return Err(field_error("scenario.rho", format!("{r} outside (0, 1]")));
        }
    }
    if s.rho.windows(2).any(|w| w[0] >= w[1]) {
        return Err(field_error("scenario.rho", "must be strictly increasing"));
    }
    if !cfg.kind.is_transfer() && s.rho != [1.0] {
        return Err(field_error(
            "scenario.rho",
            format!("only used by transfer experiments, not {}", cfg.kind),
        ));
    }
    if cfg.seeds.is_empty() {
        return Err(field_error("seeds", "must not be empty"));
    }
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    if seeds.windows(2).any(|w| w[0] == w[1]) {
        return Err(field_error("seeds", "must be distinct"));
    }
    Ok(())
}

fn check_train(section: &str, t: &TrainConfig) -> Result<()> {
    if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
        return Err(field_error(
            &format!("{section}.learning_rate"),
            format!("{} must be positive", t.learning_rate),
        ));
    }
    if t.batch_size == 0 {
        return Err(field_error(&format!("{section}.batch_size"), "must be at least 1"));
    }
    if t.local_epochs == 0 {
        return Err(field_error(&format!("{section}.local_epochs"), "must be at least 1"));
    }
    if !(t.positive_class_weight.is_finite() && t.positive_class_weight > 0.0) {
        return Err(field_error(
            &format!("{section}.positive_class_weight"),
            "must be positive",
        ));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    /// Replace the seed list with a single seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.seeds = vec![seed];
    }

    /// Change the round budget; the transfer round keeps its relative position.
    pub fn override_rounds(&mut self, rounds: usize) -> Result<()> {
        if rounds == 0 {
            return Err(field_error("rounds override", "must be at least 1"));
        }
        let old = self.federation.rounds;
        let t = (self.transfer.transfer_round as f64 * rounds as f64 / old as f64).round() as usize;
        self.transfer.transfer_round = t.clamp(1, rounds);
        self.federation.rounds = rounds;
        check_config(self)
    }

    fn architecture(&self, output_width: usize, head: OutputHead) -> Result<MlpArchitecture> {
        let mut widths = vec![dataset::WAP_COUNT];
        widths.extend(&self.model.hidden);
        widths.push(output_width);
        MlpArchitecture::new(widths, self.model.activation, head)
    }

    fn federation_config(&self, train: &TrainConfig, seed: u64) -> FederationConfig {
        FederationConfig {
            rounds: self.federation.rounds,
            participation_fraction: self.federation.participation_fraction,
            hp: train.hyperparams(seed),
            eval_every: self.federation.eval_every,
            seed,
        }
    }

    fn transfer_config(&self, seed: u64) -> TransferConfig {
        TransferConfig {
            transfer_round: self.transfer.transfer_round,
            total_rounds: self.federation.rounds,
            freeze_prefix: self.transfer.freeze_prefix,
            global: self.federation_config(&self.train, seed),
            subglobal: self.federation_config(self.subglobal_train.as_ref().unwrap_or(&self.train), seed),
        }
    }
}

/// Load the configured corpus: `(training, validation)`.
pub fn load_corpus(data: &DataConfig) -> Result<(FingerprintSet, FingerprintSet)> {
    match data.source {
        DataSource::Uji => {
            let root = data.root.as_ref().ok_or_else(|| field_error("data.root", "missing"))?;
            let (train, val) = corpus_paths(root);
            Ok((
                load_csv(train, Provenance::Training)?,
                load_csv(val, Provenance::Validation)?,
            ))
        }
        DataSource::Synthetic => Ok(synth::generate(&SynthConfig {
            seed: data.synthetic_seed,
            ..SynthConfig::default()
        })),
    }
}

/// One row of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub experiment_id: String,
    pub method: String,
    pub seed: u64,
    /// Target ratio for transfer experiments.
    pub rho: Option<f64>,
    pub round: usize,
    pub metric: String,
    pub value: f64,
    pub units: String,
}

pub const RESULTS_HEADER: &str = "experiment_id,method,seed,rho,round,metric,value,units";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:?}")).unwrap_or_default()
}

pub fn write_results(rows: &[MetricRow], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{RESULTS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{:?},{}",
            r.experiment_id,
            r.method,
            r.seed,
            fmt_opt(r.rho),
            r.round,
            r.metric,
            r.value,
            r.units
        )?;
    }
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<MetricRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let headers = reader.headers().map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>().join(",") != RESULTS_HEADER {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            message: format!("expected header {RESULTS_HEADER}"),
        });
    }
    reader
        .deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::MalformedRow {
                path: path.to_path_buf(),
                line: i as u64 + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

/// One line of `summary.csv`: either a method's final-round statistics
/// (`baseline` empty) or a comparison of `method` against `baseline`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub experiment_id: String,
    pub rho: Option<f64>,
    pub metric: String,
    pub units: String,
    pub method: String,
    pub baseline: Option<String>,
    pub seeds: usize,
    pub mean: f64,
    pub std: f64,
    /// `(B − A)/B` for error metrics, `(A − B)/B` for accuracies, so that
    /// positive means `method` beats `baseline`.
    pub relative_improvement: Option<f64>,
    /// `A − B` of the means.
    pub difference: Option<f64>,
}

pub const SUMMARY_HEADER: &str =
    "experiment_id,rho,metric,units,method,baseline,seeds,mean,std,relative_improvement,difference";

/// Method pairs compared in the summary: (method, baseline).
pub const COMPARISONS: [(&str, &str); 5] = [
    ("H-FedTLoc", "N-FedLoc"),
    ("H-FedTLoc", "FedLoc"),
    ("FedOVA", "FL-multiclass"),
    ("FL-multiclass", "Centralized"),
    ("FedLoc", "Centralized"),
];

fn rho_key(rho: Option<f64>) -> Option<u64> {
    rho.map(f64::to_bits)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn relative_improvement(a: f64, b: f64, is_error: bool) -> f64 {
    if is_error {
        (b - a) / b
    } else {
        (a - b) / b
    }
}

/// Final-round statistics per (rho, metric, method) and the standard
/// pairwise comparisons.
///
/// A run's final value is its row with the largest round; runs are keyed by
/// (experiment, method, seed, rho, metric).
pub fn summarize(rows: &[MetricRow]) -> Vec<SummaryRow> {
    type RunKey = (String, Option<u64>, String, String, u64);
    let mut finals: BTreeMap<RunKey, (usize, f64, &MetricRow)> = BTreeMap::new();
    for r in rows {
        let key = (
            r.experiment_id.clone(),
            rho_key(r.rho),
            r.metric.clone(),
            r.method.clone(),
            r.seed,
        );
        let e = finals.entry(key).or_insert((r.round, r.value, r));
        if r.round >= e.0 {
            *e = (r.round, r.value, r);
        }
    }
    type GroupKey = (String, Option<u64>, String, String);
    let mut groups: BTreeMap<GroupKey, (Vec<f64>, &MetricRow)> = BTreeMap::new();
    for ((id, rho, metric, method, _), (_, v, row)) in &finals {
        groups
            .entry((id.clone(), *rho, metric.clone(), method.clone()))
            .or_insert((Vec::new(), row))
            .0
            .push(*v);
    }
    let mut out = Vec::new();
    let mut stats: BTreeMap<GroupKey, (f64, f64, usize)> = BTreeMap::new();
    for (key, (values, row)) in &groups {
        let (mean, std) = mean_std(values);
        stats.insert(key.clone(), (mean, std, values.len()));
        out.push(SummaryRow {
            experiment_id: key.0.clone(),
            rho: row.rho,
            metric: key.2.clone(),
            units: row.units.clone(),
            method: key.3.clone(),
            baseline: None,
            seeds: values.len(),
            mean,
            std,
            relative_improvement: None,
            difference: None,
        });
    }
    let plain: Vec<SummaryRow> = out.clone();
    for s in &plain {
        for (a, b) in COMPARISONS {
            if s.method != a {
                continue;
            }
            let bkey = (s.experiment_id.clone(), rho_key(s.rho), s.metric.clone(), b.to_string());
            if let Some(&(bmean, _, _)) = stats.get(&bkey) {
                let is_error = s.units == Metric::MaeMeters.units();
                out.push(SummaryRow {
                    baseline: Some(b.to_string()),
                    relative_improvement: Some(relative_improvement(s.mean, bmean, is_error)),
                    difference: Some(s.mean - bmean),
                    ..s.clone()
                });
            }
        }
    }
    out
}

pub fn write_summary(rows: &[SummaryRow], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{SUMMARY_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{:?},{:?},{},{}",
            r.experiment_id,
            fmt_opt(r.rho),
            r.metric,
            r.units,
            r.method,
            r.baseline.as_deref().unwrap_or(""),
            r.seeds,
            r.mean,
            r.std,
            fmt_opt(r.relative_improvement),
            fmt_opt(r.difference)
        )?;
    }
    Ok(())
}

/// A run that stopped early or could not start.
#[derive(Clone, Debug, PartialEq)]
pub struct RunFailure {
    pub method: String,
    pub seed: u64,
    pub rho: Option<f64>,
    pub message: String,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} seed={}", self.method, self.seed)?;
        if let Some(r) = self.rho {
            write!(f, " rho={r}")?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub rows: Vec<MetricRow>,
    pub summary: Vec<SummaryRow>,
    /// The config with every default resolved; rerunning it reproduces `rows`.
    pub resolved: ExperimentConfig,
    pub checkpoints: Vec<PathBuf>,
    pub traces: Vec<PathBuf>,
    pub failures: Vec<RunFailure>,
    pub output: PathBuf,
}

impl RunArtifacts {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

struct Sink<'a> {
    cfg: &'a ExperimentConfig,
    rows: Vec<MetricRow>,
    checkpoints: Vec<PathBuf>,
    traces: Vec<PathBuf>,
    failures: Vec<RunFailure>,
}

fn run_name(method: &str, seed: u64, rho: Option<f64>) -> String {
    match rho {
        Some(r) => format!("{method}_seed{seed}_rho{r}"),
        None => format!("{method}_seed{seed}"),
    }
}

impl Sink<'_> {
    fn out(&self) -> &Path {
        &self.cfg.output
    }

    fn push(&mut self, method: &str, seed: u64, rho: Option<f64>, metric: Metric, evals: &[(usize, f64)]) {
        for &(round, value) in evals {
            self.rows.push(MetricRow {
                experiment_id: self.cfg.experiment_id.clone(),
                method: method.to_string(),
                seed,
                rho,
                round,
                metric: metric.name().to_string(),
                value,
                units: metric.units().to_string(),
            });
        }
    }

    fn fail(&mut self, method: &str, seed: u64, rho: Option<f64>, message: impl fmt::Display) {
        self.failures.push(RunFailure {
            method: method.to_string(),
            seed,
            rho,
            message: message.to_string(),
        });
    }

    fn stage_trace(&mut self, seed: u64, trace: &StageTrace, rho: Option<f64>, checkpoint: bool) -> Result<()> {
        let method = trace.method.tag();
        let evals: Vec<(usize, f64)> = trace.evaluations().into_iter().map(|(r, _, v)| (r, v)).collect();
        self.push(method, seed, rho, Metric::MaeMeters, &evals);
        let name = run_name(method, seed, rho);
        let path = self.out().join("traces").join(format!("{name}.csv"));
        trace.export(&path)?;
        self.traces.push(path);
        if let Some(f) = trace.failure() {
            self.fail(method, seed, rho, f);
        } else if checkpoint {
            let path = self.out().join("checkpoints").join(format!("{name}.params"));
            let arch = self.cfg.architecture(2, OutputHead::Linear)?;
            model::write_params(&path, trace.final_params(), &arch)?;
            self.checkpoints.push(path);
        }
        Ok(())
    }

    fn training_trace(&mut self, method: &str, seed: u64, trace: &TrainingTrace, arch: &MlpArchitecture) -> Result<()> {
        self.push(method, seed, None, trace.metric, &trace.evaluations());
        let name = run_name(method, seed, None);
        let path = self.out().join("traces").join(format!("{name}.csv"));
        trace.export(&path)?;
        self.traces.push(path);
        if let Some(f) = &trace.failure {
            self.fail(method, seed, None, f);
        } else {
            let path = self.out().join("checkpoints").join(format!("{name}.params"));
            model::write_params(&path, &trace.final_params, arch)?;
            self.checkpoints.push(path);
        }
        Ok(())
    }
}

fn floor_scope(cfg: &ExperimentConfig, set: &FingerprintSet) -> FingerprintSet {
    let floor = (!cfg.kind.is_floor3d()).then_some(cfg.floor);
    dataset::filter(set, Some(cfg.building), floor)
}

/// Resolve data-dependent defaults against the corpus.
fn resolve(cfg: &mut ExperimentConfig, train: &FingerprintSet) -> Result<()> {
    match cfg.kind {
        ExperimentKind::TransferDevice if cfg.scenario.target_phones.is_empty() => {
            let scope = floor_scope(cfg, train);
            let clients = partition_by_phone(&scope, cfg.clients.n_clients)?;
            let phone = clients
                .groups
                .iter()
                .map(|(client, phone)| (clients.clients[client].len(), *phone))
                .min()
                .map(|(_, phone)| phone)
                .ok_or_else(|| Error::invalid("no phones in the selected floor"))?;
            cfg.scenario.target_phones = vec![phone];
        }
        ExperimentKind::TransferDevice => {
            let scope = floor_scope(cfg, train);
            let clients = partition_by_phone(&scope, cfg.clients.n_clients)?;
            if let Some(p) = cfg
                .scenario
                .target_phones
                .iter()
                .find(|p| !clients.groups.values().any(|g| g == *p))
            {
                return Err(field_error(
                    "scenario.target_phones",
                    format!("phone {p} is not among the {} source phones", clients.len()),
                ));
            }
        }
        ExperimentKind::TransferTime if cfg.scenario.split_time.is_none() => {
            let scope = floor_scope(cfg, train);
            cfg.scenario.split_time =
                Some(suggest_split_time(&scope).ok_or_else(|| Error::invalid("too few timestamps to split"))?);
        }
        _ => {}
    }
    Ok(())
}

/// Execute every run of the experiment and write its artifacts under
/// `cfg.output`.
///
/// Per-run failures (divergence, empty federations) are recorded in
/// [`RunArtifacts::failures`] and in `failures.txt`; the other runs proceed.
/// Only setup errors (unreadable corpus, unwritable output) abort.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    check_config(cfg)?;
    let (train, validation) = load_corpus(&cfg.data)?;
    let mut resolved = cfg.clone();
    resolve(&mut resolved, &train)?;
    let out = resolved.output.clone();
    for sub in ["traces", "checkpoints"] {
        let dir = out.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let resolved_path = out.join("config.resolved");
    std::fs::write(&resolved_path, resolved.to_toml()).map_err(|e| Error::io(&resolved_path, e))?;

    let mut sink = Sink {
        cfg: &resolved,
        rows: Vec::new(),
        checkpoints: Vec::new(),
        traces: Vec::new(),
        failures: Vec::new(),
    };
    let scope = floor_scope(&resolved, &train);
    if scope.is_empty() {
        return Err(Error::invalid(format!(
            "no training records for building {} floor {}",
            resolved.building, resolved.floor
        )));
    }
    for &seed in &resolved.seeds {
        match resolved.kind {
            ExperimentKind::TransferDevice | ExperimentKind::TransferTime => {
                let val_scope = floor_scope(&resolved, &validation);
                run_transfer(&mut sink, &scope, &val_scope, seed)?
            }
            ExperimentKind::Floor3dA | ExperimentKind::Floor3dB => {
                let split = within_domain_split(&resolved, &scope, &validation, seed);
                run_floor3d(&mut sink, split, seed)?
            }
            ExperimentKind::Baseline2d => {
                let split = within_domain_split(&resolved, &scope, &validation, seed);
                run_baseline(&mut sink, split, seed)?
            }
        }
    }

    let Sink {
        rows,
        checkpoints,
        traces,
        failures,
        ..
    } = sink;
    let summary = summarize(&rows);
    let path = out.join("results.csv");
    let mut buf = Vec::new();
    write_results(&rows, &mut buf).map_err(|e| Error::io(&path, e))?;
    std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    let path = out.join("summary.csv");
    let mut buf = Vec::new();
    write_summary(&summary, &mut buf).map_err(|e| Error::io(&path, e))?;
    std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    let path = out.join("failures.txt");
    if failures.is_empty() {
        if path.exists() {
            std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    } else {
        let text: String = failures.iter().map(|f| format!("{f}\n")).collect();
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(RunArtifacts {
        rows,
        summary,
        resolved,
        checkpoints,
        traces,
        failures,
        output: out,
    })
}

fn run_transfer(sink: &mut Sink, scope: &FingerprintSet, val_scope: &FingerprintSet, seed: u64) -> Result<()> {
    let cfg = sink.cfg;
    let arch = cfg.architecture(2, OutputHead::Linear)?;
    let opts = ScenarioOptions {
        holdout_fraction: cfg.scenario.holdout_fraction,
        seed,
    };
    let build = |rho: f64| match cfg.kind {
        ExperimentKind::TransferDevice => build_device_scenario(
            scope,
            &cfg.scenario.target_phones,
            cfg.clients.n_clients,
            rho,
            &opts,
            cfg.scenario.validation_in_holdout.then_some(val_scope),
        ),
        _ => build_time_scenario(
            scope,
            cfg.scenario.split_time.expect("resolved split time"),
            cfg.clients.n_clients,
            rho,
            &opts,
        ),
    };
    let tc = cfg.transfer_config(seed);
    let global_cfg = tc.global;

    // The source federation and holdout do not depend on rho, so FedLoc runs
    // once per seed and H-FedTLoc branches off it at the transfer round.
    let first = match build(cfg.scenario.rho[0]).and_then(|s| PreparedScenario::new(&s, &arch)) {
        Ok(p) => p,
        Err(e) => {
            for m in transfer::Method::ALL {
                for &rho in &cfg.scenario.rho {
                    sink.fail(m.tag(), seed, Some(rho), &e);
                }
            }
            return Ok(());
        }
    };
    let fedloc = transfer::run_fedloc_with_capture(&first, &global_cfg, Some(tc.transfer_round));
    let (fedloc, captured) = match fedloc {
        Ok(x) => x,
        Err(e) => {
            for &rho in &cfg.scenario.rho {
                sink.fail("FedLoc", seed, Some(rho), &e);
                sink.fail("H-FedTLoc", seed, Some(rho), &e);
            }
            (
                StageTrace {
                    method: transfer::Method::FedLoc,
                    global: None,
                    subglobal: None,
                    transfer_round: None,
                    rho: 0.0,
                },
                None,
            )
        }
    };
    for (i, &rho) in cfg.scenario.rho.iter().enumerate() {
        let prep = if i == 0 {
            Ok(first.clone())
        } else {
            build(rho).and_then(|s| PreparedScenario::new(&s, &arch))
        };
        let prep = match prep {
            Ok(p) => p,
            Err(e) => {
                for m in transfer::Method::ALL {
                    sink.fail(m.tag(), seed, Some(rho), &e);
                }
                continue;
            }
        };
        if let Some(global) = &fedloc.global {
            let trace = StageTrace { rho, ..fedloc.clone() };
            sink.stage_trace(seed, &trace, Some(rho), i == 0)?;

            let mut prefix = global.clone();
            let reached = prefix.rounds.last().map(|r| r.round).unwrap_or(0);
            if reached >= tc.transfer_round {
                prefix.failure = None;
                prefix.final_params = captured.clone().expect("captured at the transfer round");
            }
            match transfer::continue_h_fedtloc(&prep, &tc, prefix) {
                Ok(t) => sink.stage_trace(seed, &t, Some(rho), true)?,
                Err(e) => sink.fail("H-FedTLoc", seed, Some(rho), e),
            }
        }
        match transfer::run_n_fedloc(&prep, &global_cfg) {
            Ok(t) => sink.stage_trace(seed, &t, Some(rho), true)?,
            Err(e) => sink.fail("N-FedLoc", seed, Some(rho), e),
        }
    }
    Ok(())
}

/// Training data and holdout for the within-domain kinds: the whole scope
/// against the validation file's rows of the same scope, or a seeded split
/// of the scope when validation rows are excluded or absent.
fn within_domain_split(
    cfg: &ExperimentConfig,
    scope: &FingerprintSet,
    validation: &FingerprintSet,
    seed: u64,
) -> (FingerprintSet, FingerprintSet) {
    let val_scope = floor_scope(cfg, validation);
    if cfg.scenario.validation_in_holdout && !val_scope.is_empty() {
        (scope.clone(), val_scope)
    } else {
        split_holdout(scope, cfg.scenario.holdout_fraction, seed)
    }
}

/// Seeded holdout split of a whole scope for the within-domain kinds.
fn split_holdout(scope: &FingerprintSet, fraction: f64, seed: u64) -> (FingerprintSet, FingerprintSet) {
    use rand::seq::SliceRandom;
    let mut records = scope.records().to_vec();
    records.shuffle(&mut seed::rng(seed, &[stream::HOLDOUT]));
    let n_hold = ((fraction * records.len() as f64).round() as usize).clamp(1, records.len() - 1);
    let (hold, rest) = records.split_at(n_hold);
    let mut hold = hold.to_vec();
    let mut rest = rest.to_vec();
    hold.sort_by_key(|r| r.id);
    rest.sort_by_key(|r| r.id);
    let desc = |part: &str| format!("{} | {part} fraction={fraction} seed={seed}", scope.description);
    (
        FingerprintSet::new(Provenance::Derived, desc("train"), rest),
        FingerprintSet::new(Provenance::Derived, desc("holdout"), hold),
    )
}

fn run_floor3d(sink: &mut Sink, (train, holdout): (FingerprintSet, FingerprintSet), seed: u64) -> Result<()> {
    let cfg = sink.cfg;
    let floors = train.iter().map(|r| r.floor as usize).max().unwrap_or(0) + 1;
    let assignment = match cfg.kind {
        ExperimentKind::Floor3dA => partition_uniform(&train, cfg.clients.uniform_clients, seed),
        _ => partition_by_floor(&train, cfg.clients.clients_per_floor, seed),
    };
    let assignment = match assignment {
        Ok(a) => a,
        Err(e) => {
            sink.fail(cfg.kind.name(), seed, None, e);
            return Ok(());
        }
    };
    let clients = floor3d::floor_clients(&assignment, floors)?;
    let eval = EvalSet::floors(&holdout, &dataset::NormalizationSpec::default());
    let fed_cfg = cfg.federation_config(&cfg.train, seed);
    let base = cfg.architecture(2, OutputHead::Linear)?;
    let desc = format!("{} seed={seed}", cfg.kind);

    let mut stage_for_3d = None;
    match floor3d::train_fl_multiclass(&clients, floors, &base, &fed_cfg, Some(&eval), &desc) {
        Ok((arch, trace)) => {
            sink.training_trace("FL-multiclass", seed, &trace, &arch)?;
            if trace.is_complete() && cfg.kind == ExperimentKind::Floor3dA {
                stage_for_3d = Some(FloorStage::Softmax {
                    arch,
                    params: trace.final_params,
                });
            }
        }
        Err(e) => sink.fail("FL-multiclass", seed, None, e),
    }
    match cfg.kind {
        ExperimentKind::Floor3dA => {
            let pooled = [floor3d::pool_clients(&clients)];
            match floor3d::train_fl_multiclass(&pooled, floors, &base, &fed_cfg, Some(&eval), &desc) {
                Ok((arch, trace)) => sink.training_trace("Centralized", seed, &trace, &arch)?,
                Err(e) => sink.fail("Centralized", seed, None, e),
            }
        }
        _ => match floor3d::train_fedova(&clients, floors, &base, &fed_cfg, Some(&eval), &desc) {
            Ok(run) => {
                sink.push("FedOVA", seed, None, Metric::Accuracy, &run.trace.evaluations());
                let name = run_name("FedOVA", seed, None);
                let path = sink.out().join("traces").join(format!("{name}.csv"));
                run.trace.export(&path)?;
                sink.traces.push(path);
                for (f, t) in run.member_traces.iter().enumerate() {
                    let path = sink.out().join("traces").join(format!("{name}_member{f}.csv"));
                    t.export(&path)?;
                    sink.traces.push(path);
                }
                if let Some(f) = &run.trace.failure {
                    sink.fail("FedOVA", seed, None, f);
                } else {
                    let dir = sink.out().join("checkpoints").join(&name);
                    floor3d::save_ensemble(&dir, &run.ensemble)?;
                    sink.checkpoints.push(dir);
                    stage_for_3d = Some(FloorStage::Ova(run.ensemble));
                }
            }
            Err(e) => sink.fail("FedOVA", seed, None, e),
        },
    }

    if cfg.scenario.evaluate_3d {
        let method = if cfg.kind == ExperimentKind::Floor3dA {
            "FL-multiclass-3D"
        } else {
            "FedOVA-3D"
        };
        let Some(stage) = stage_for_3d else {
            sink.fail(method, seed, None, "floor stage did not complete");
            return Ok(());
        };
        let per_floor = match floor3d::train_per_floor_2d(&assignment, floors, &base, &fed_cfg) {
            Ok(m) => m,
            Err(e) => {
                sink.fail(method, seed, None, e);
                return Ok(());
            }
        };
        let model3d = ThreeDModel::new(stage, base.clone(), per_floor)?;
        let report = floor3d::evaluate_3d(&model3d, &holdout)?;
        let last = cfg.federation.rounds;
        sink.push(method, seed, None, Metric::Accuracy, &[(last, report.floor_accuracy)]);
        sink.push(method, seed, None, Metric::MaeMeters, &[(last, report.mae_meters)]);
    }
    Ok(())
}

fn run_baseline(sink: &mut Sink, (train, holdout): (FingerprintSet, FingerprintSet), seed: u64) -> Result<()> {
    let cfg = sink.cfg;
    let arch = cfg.architecture(2, OutputHead::Linear)?;
    let assignment = match partition_by_phone(&train, cfg.clients.n_clients) {
        Ok(a) => a,
        Err(e) => {
            sink.fail("FedLoc", seed, None, e);
            return Ok(());
        }
    };
    let union = assignment.union();
    let norm = dataset::fit_target_normalization(&union);
    let eval = EvalSet::positions(&holdout, &norm);
    let fed_cfg = cfg.federation_config(&cfg.train, seed);
    let encode = |id: u32, set: &FingerprintSet| -> Result<ClientHandle> {
        let batch = Batch::new(
            norm.encode_features(set),
            norm.encode_targets(set),
            dataset::WAP_COUNT,
            2,
        )?;
        Ok(ClientHandle::new(id, batch))
    };
    let clients = assignment
        .clients
        .iter()
        .map(|(&id, s)| encode(id, s))
        .collect::<Result<Vec<_>>>()?;
    let pooled = vec![encode(0, &union)?];
    let init = init_params(&arch, seed);
    let desc = format!("{} seed={seed}", cfg.kind);
    for (method, clients) in [("FedLoc", &clients), ("Centralized", &pooled)] {
        match Federation::new(&arch, clients, &fed_cfg).run_training(&init, Some(&eval), &desc) {
            Ok(trace) => sink.training_trace(method, seed, &trace, &arch)?,
            Err(e) => sink.fail(method, seed, None, e),
        }
    }
    Ok(())
}
