//! Synchronous FedAvg over an in-process client population.
//!
//! Each round the server broadcasts the global vector, every selected client
//! runs local SGD from it, and the server replaces the global vector with the
//! sample-count-weighted mean of the returned vectors. Client trainings are
//! independent and run on the rayon pool; aggregation always sums in
//! ascending client-id order, so results do not depend on scheduling.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{FingerprintSet, NormalizationSpec};
use crate::error::{Error, Result};
use crate::model::{self, Batch, FrozenMask, MlpArchitecture, OutputHead, ParameterVector, TrainingHyperparams};
use crate::seed::{self, stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub rounds: usize,
    pub participation_fraction: f64,
    pub hp: TrainingHyperparams,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            rounds: 400,
            participation_fraction: 1.0,
            hp: TrainingHyperparams::default(),
            eval_every: 10,
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("rounds must be at least 1"));
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "participation fraction {} outside (0, 1]",
                self.participation_fraction
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be positive"));
        }
        self.hp.validate()
    }

    /// Evaluation happens every `eval_every` rounds and at `last`.
    pub fn evaluates(&self, round: usize, last: usize) -> bool {
        round.is_multiple_of(self.eval_every) || round == last
    }
}

/// A client's encoded local database and its shuffle seed.
#[derive(Clone, Debug)]
pub struct ClientHandle {
    pub client_id: u32,
    pub data: Arc<Batch>,
    pub seed: u64,
}

impl ClientHandle {
    /// Shuffle seed derived from the client id.
    pub fn new(client_id: u32, data: Batch) -> Self {
        ClientHandle {
            client_id,
            data: Arc::new(data),
            seed: seed::derive(client_id as u64, &[stream::CLIENT]),
        }
    }

    pub fn sample_count(&self) -> usize {
        self.data.rows()
    }
}

/// One client's contribution to an aggregation.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub params: ParameterVector,
    pub weight: f64,
}

/// Weighted mean of parameter vectors.
///
/// Weights are normalized to sum to one before summation; vectors are
/// accumulated in the given order. Each coordinate is finally clamped into
/// `[min_k, max_k]` of the inputs so rounding can never leave the convex
/// hull, which also makes identical submissions aggregate to themselves
/// exactly.
pub fn weighted_average(vectors: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::invalid("aggregation needs at least one client"))?;
    if vectors.len() != weights.len() {
        return Err(Error::invalid("one weight per client vector required"));
    }
    if let Some(v) = vectors.iter().find(|v| v.len() != first.len()) {
        return Err(Error::LengthMismatch {
            expected: first.len(),
            actual: v.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::invalid("aggregation weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::invalid("aggregation weights sum to zero"));
    }
    let normalized: Vec<f64> = weights.iter().map(|w| w / total).collect();

    let mut out = vec![0.0; first.len()];
    for (v, &w) in vectors.iter().zip(&normalized) {
        if w == 0.0 {
            continue;
        }
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
    for (i, o) in out.iter_mut().enumerate() {
        let (lo, hi) = vectors
            .iter()
            .zip(&normalized)
            .filter(|(_, &w)| w > 0.0)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (v, _)| {
                (lo.min(v[i]), hi.max(v[i]))
            });
        if lo <= hi {
            *o = o.clamp(lo, hi);
        }
    }
    Ok(out)
}

/// FedAvg aggregation, summing in ascending client-id order whatever the
/// order of `updates`.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<ParameterVector> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    if sorted.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::invalid("duplicate client id in aggregation"));
    }
    let vectors: Vec<&[f64]> = sorted.iter().map(|u| u.params.as_slice()).collect();
    let weights: Vec<f64> = sorted.iter().map(|u| u.weight).collect();
    weighted_average(&vectors, &weights).map(ParameterVector::new)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MaeMeters,
    Accuracy,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::MaeMeters => "mae_meters",
            Metric::Accuracy => "accuracy",
        }
    }

    pub fn units(self) -> &'static str {
        match self {
            Metric::MaeMeters => "meters",
            Metric::Accuracy => "fraction",
        }
    }

    /// Whether smaller values are better.
    pub fn is_error(self) -> bool {
        matches!(self, Metric::MaeMeters)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ground truth of an evaluation set.
#[derive(Clone, Debug)]
pub enum Truth {
    /// True positions in meters, with the normalization the model's outputs
    /// are expressed in.
    Positions {
        coords: Vec<[f64; 2]>,
        norm: NormalizationSpec,
    },
    /// Class indices (floors) or, for a single sigmoid output, 0/1 labels.
    Classes(Vec<usize>),
}

/// Encoded holdout features plus truth.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub features: Vec<f64>,
    pub truth: Truth,
}

impl EvalSet {
    pub fn positions(set: &FingerprintSet, norm: &NormalizationSpec) -> Self {
        EvalSet {
            features: norm.encode_features(set),
            truth: Truth::Positions {
                coords: set.iter().map(|r| r.position()).collect(),
                norm: *norm,
            },
        }
    }

    pub fn floors(set: &FingerprintSet, norm: &NormalizationSpec) -> Self {
        EvalSet {
            features: norm.encode_features(set),
            truth: Truth::Classes(set.iter().map(|r| r.floor as usize).collect()),
        }
    }

    pub fn metric(&self) -> Metric {
        match self.truth {
            Truth::Positions { .. } => Metric::MaeMeters,
            Truth::Classes(_) => Metric::Accuracy,
        }
    }

    pub fn len(&self) -> usize {
        match &self.truth {
            Truth::Positions { coords, .. } => coords.len(),
            Truth::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean Euclidean error in meters between denormalized predictions and truth.
pub fn mae_meters(predicted_normalized: &[f64], coords: &[[f64; 2]], norm: &NormalizationSpec) -> f64 {
    let total: f64 = predicted_normalized
        .chunks(2)
        .zip(coords)
        .map(|(q, t)| {
            let p = norm.denormalize_target([q[0], q[1]]);
            ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt()
        })
        .sum();
    total / coords.len() as f64
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

/// Class predictions from post-head outputs: argmax for multi-output
/// heads, threshold at 0.5 for a single sigmoid.
pub fn predict_classes(outputs: &[f64], width: usize, head: OutputHead) -> Vec<usize> {
    if width == 1 && head == OutputHead::Sigmoid {
        outputs.iter().map(|&p| usize::from(p >= 0.5)).collect()
    } else {
        outputs.chunks(width).map(model::argmax).collect()
    }
}

/// Evaluate a model on a holdout: MAE in meters or classification accuracy.
pub fn evaluate(params: &ParameterVector, arch: &MlpArchitecture, holdout: &EvalSet) -> Result<f64> {
    if holdout.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let out = model::forward(params, arch, &holdout.features)?;
    Ok(match &holdout.truth {
        Truth::Positions { coords, norm } => mae_meters(&out, coords, norm),
        Truth::Classes(truth) => accuracy(&predict_classes(&out, arch.output_width(), arch.head()), truth),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub round: usize,
    pub participants: Vec<u32>,
    pub metric_value: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub scenario: String,
    pub config: FederationConfig,
    pub seed: u64,
    pub architecture: String,
}

/// Per-round history of a federated run. Only the final parameters are kept.
#[derive(Clone, Debug)]
pub struct TrainingTrace {
    pub metric: Metric,
    pub rounds: Vec<RoundResult>,
    pub final_params: ParameterVector,
    pub metadata: TraceMetadata,
    /// Set when the run stopped early; the trace holds the rounds before it.
    pub failure: Option<String>,
}

impl TrainingTrace {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }

    /// `(round, value)` for evaluated rounds.
    pub fn evaluations(&self) -> Vec<(usize, f64)> {
        self.rounds
            .iter()
            .filter_map(|r| r.metric_value.map(|v| (r.round, v)))
            .collect()
    }

    pub fn final_metric(&self) -> Option<f64> {
        self.rounds.last().and_then(|r| r.metric_value)
    }

    pub fn metric_at(&self, round: usize) -> Option<f64> {
        self.rounds
            .iter()
            .find(|r| r.round == round)
            .and_then(|r| r.metric_value)
    }

    /// Comma-separated export: `round,metric_name,metric_value,participating_clients,wall_seconds`.
    /// Participants are `;`-joined; unevaluated rounds have an empty value.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "round,metric_name,metric_value,participating_clients,wall_seconds")?;
        for r in &self.rounds {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.round,
                self.metric.name(),
                r.metric_value.map(|v| format!("{v:?}")).unwrap_or_default(),
                join_ids(&r.participants),
                r.wall_seconds
            )?;
        }
        Ok(())
    }

    /// Write `<path>` (CSV) and `<path>.meta.json` (metadata sidecar).
    pub fn export(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(&mut f).map_err(|e| Error::io(path, e))?;
        let meta_path = path.with_extension("meta.json");
        let meta = serde_json::json!({
            "metadata": self.metadata,
            "metric": self.metric,
            "complete": self.is_complete(),
            "failure": self.failure,
        });
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap()).map_err(|e| Error::io(&meta_path, e))
    }
}

pub(crate) fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";")
}

/// A client population bound to an architecture and config.
pub struct Federation<'a> {
    pub arch: &'a MlpArchitecture,
    pub clients: &'a [ClientHandle],
    pub cfg: &'a FederationConfig,
    pub frozen: Option<&'a FrozenMask>,
}

impl<'a> Federation<'a> {
    pub fn new(arch: &'a MlpArchitecture, clients: &'a [ClientHandle], cfg: &'a FederationConfig) -> Self {
        Federation {
            arch,
            clients,
            cfg,
            frozen: None,
        }
    }

    pub fn with_frozen(mut self, frozen: Option<&'a FrozenMask>) -> Self {
        self.frozen = frozen.filter(|m| !m.is_empty());
        self
    }

    /// Participants of `round`: all clients, or a seeded sample of
    /// `⌈fraction · K⌉`, sorted by id.
    pub fn select(&self, round: usize) -> Vec<&'a ClientHandle> {
        let k = self.clients.len();
        let mut chosen: Vec<&ClientHandle> = if self.cfg.participation_fraction >= 1.0 {
            self.clients.iter().collect()
        } else {
            let m = ((self.cfg.participation_fraction * k as f64).ceil() as usize).clamp(1, k);
            let mut rng = seed::rng(self.cfg.seed, &[stream::SELECT, round as u64]);
            index::sample(&mut rng, k, m)
                .into_iter()
                .map(|i| &self.clients[i])
                .collect()
        };
        chosen.sort_by_key(|c| c.client_id);
        chosen
    }

    /// Local training of one client for `round` (epochs `(round-1)·E .. round·E`).
    pub fn train_client(
        &self,
        global: &ParameterVector,
        client: &ClientHandle,
        round: usize,
    ) -> Result<ParameterVector> {
        let e = self.cfg.hp.local_epochs as u64;
        let hp = TrainingHyperparams {
            seed: seed::derive(self.cfg.seed, &[client.seed]),
            ..self.cfg.hp
        };
        let r = round as u64;
        model::train_epochs(global, self.arch, &client.data, &hp, (r - 1) * e..r * e, self.frozen).map_err(|source| {
            Error::Client {
                client: client.client_id,
                source: Box::new(source),
            }
        })
    }

    /// One broadcast / train / aggregate round. Returns the new global vector
    /// and the participating client ids.
    pub fn run_round(&self, global: &ParameterVector, round: usize) -> Result<(ParameterVector, Vec<u32>)> {
        if self.clients.is_empty() {
            return Err(Error::invalid("federation has no clients"));
        }
        if round == 0 {
            return Err(Error::invalid("rounds are numbered from 1"));
        }
        let participants = self.select(round);
        let updates = participants
            .par_iter()
            .map(|c| {
                self.train_client(global, c, round).map(|params| ClientUpdate {
                    client_id: c.client_id,
                    params,
                    weight: c.sample_count() as f64,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ids = participants.iter().map(|c| c.client_id).collect();
        Ok((aggregate(&updates)?, ids))
    }

    /// Rounds `first ..= last` starting from `init`, evaluating on `eval`.
    ///
    /// `observer` sees every round's result and new global vector. A client
    /// divergence stops the run; the partial trace is returned with
    /// `failure` set.
    pub fn run_rounds(
        &self,
        init: &ParameterVector,
        first: usize,
        last: usize,
        eval: Option<&EvalSet>,
        scenario: &str,
        observer: &mut dyn FnMut(&RoundResult, &ParameterVector),
    ) -> Result<TrainingTrace> {
        self.cfg.validate()?;
        init.check_len(self.arch)?;
        if first == 0 || last < first {
            return Err(Error::invalid(format!("invalid round range {first}..={last}")));
        }
        let metric = eval.map(EvalSet::metric).unwrap_or(Metric::MaeMeters);
        let mut trace = TrainingTrace {
            metric,
            rounds: Vec::with_capacity(last - first + 1),
            final_params: init.clone(),
            metadata: TraceMetadata {
                scenario: scenario.to_string(),
                config: *self.cfg,
                seed: self.cfg.seed,
                architecture: self.arch.fingerprint(),
            },
            failure: None,
        };
        let mut global = init.clone();
        for round in first..=last {
            let started = Instant::now();
            let (next, participants) = match self.run_round(&global, round) {
                Ok(r) => r,
                Err(e) if e.is_divergence() => {
                    trace.failure = Some(format!("round {round}: {e}"));
                    break;
                }
                Err(e) => return Err(e),
            };
            global = next;
            let metric_value = match eval {
                Some(set) if self.cfg.evaluates(round, last) => match evaluate(&global, self.arch, set) {
                    Ok(v) => Some(v),
                    Err(e) if e.is_divergence() => {
                        trace.failure = Some(format!("round {round}: evaluation: {e}"));
                        break;
                    }
                    Err(e) => return Err(e),
                },
                _ => None,
            };
            let result = RoundResult {
                round,
                participants,
                metric_value,
                wall_seconds: started.elapsed().as_secs_f64(),
            };
            observer(&result, &global);
            trace.rounds.push(result);
        }
        trace.final_params = global;
        Ok(trace)
    }

    /// `cfg.rounds` rounds from round 1.
    pub fn run_training(
        &self,
        init: &ParameterVector,
        eval: Option<&EvalSet>,
        scenario: &str,
    ) -> Result<TrainingTrace> {
        self.run_rounds(init, 1, self.cfg.rounds, eval, scenario, &mut |_, _| {})
    }
}
