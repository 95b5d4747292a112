//! Two-step 3D localization: a federated floor classifier, then a 2D
//! regressor for the predicted floor.
//!
//! Floor classification comes in two flavours. Plain FedAvg trains one
//! softmax model over floor labels. FedOVA trains `L` independent binary
//! sigmoid models, member `f` answering "is this floor `f`?"; every client
//! trains every member on its relabeled data each round, the server averages
//! each member separately, and prediction takes the member with the highest
//! probability.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{self, fit_target_normalization, ClientAssignment, FingerprintSet, NormalizationSpec, WAP_COUNT};
use crate::error::{Error, Result};
use crate::fedavg::{
    self, ClientHandle, EvalSet, Federation, FederationConfig, Metric, RoundResult, TraceMetadata, TrainingTrace, Truth,
};
use crate::model::{self, argmax, init_params, Batch, MlpArchitecture, OutputHead, ParameterVector};

/// Binary labels for one-vs-all member `target`.
pub fn relabel_ova(floors: &[usize], target: usize) -> Vec<f64> {
    floors.iter().map(|&f| if f == target { 1.0 } else { 0.0 }).collect()
}

fn one_hot(floors: &[usize], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; floors.len() * classes];
    for (r, &f) in floors.iter().enumerate() {
        out[r * classes + f] = 1.0;
    }
    out
}

/// Shannon entropy (nats) of the floor labels of a set; 0 for single-floor sets.
pub fn floor_label_entropy(set: &FingerprintSet) -> f64 {
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for r in set.iter() {
        *counts.entry(r.floor).or_insert(0) += 1;
    }
    let n = set.len() as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            if p < 1.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum()
}

/// A client's encoded fingerprints and floor labels.
#[derive(Clone, Debug)]
pub struct FloorClient {
    pub client_id: u32,
    pub features: Vec<f64>,
    pub floors: Vec<usize>,
}

/// Encode client shards for floor classification (RSS features only).
pub fn floor_clients(assignment: &ClientAssignment, floors: usize) -> Result<Vec<FloorClient>> {
    let norm = NormalizationSpec::default();
    assignment
        .clients
        .iter()
        .filter(|(_, s)| !s.is_empty())
        .map(|(&id, set)| {
            let labels: Vec<usize> = set.iter().map(|r| r.floor as usize).collect();
            if let Some(&f) = labels.iter().find(|&&f| f >= floors) {
                return Err(Error::invalid(format!("client {id} has floor {f} outside 0..{floors}")));
            }
            Ok(FloorClient {
                client_id: id,
                features: norm.encode_features(set),
                floors: labels,
            })
        })
        .collect()
}

/// `L` sigmoid members sharing one architecture, indexed by floor.
#[derive(Clone, Debug, PartialEq)]
pub struct FloorClassifierEnsemble {
    pub arch: MlpArchitecture,
    pub members: Vec<ParameterVector>,
}

impl FloorClassifierEnsemble {
    pub fn floors(&self) -> usize {
        self.members.len()
    }

    /// Row-major `rows × L` member probabilities.
    pub fn member_outputs(&self, features: &[f64]) -> Result<Vec<f64>> {
        let l = self.floors();
        let per_member = self
            .members
            .iter()
            .map(|p| model::forward(p, &self.arch, features))
            .collect::<Result<Vec<_>>>()?;
        let rows = features.len() / self.arch.input_width();
        let mut out = vec![0.0; rows * l];
        for (m, col) in per_member.iter().enumerate() {
            for r in 0..rows {
                out[r * l + m] = col[r];
            }
        }
        Ok(out)
    }

    pub fn predict(&self, features: &[f64]) -> Result<Vec<usize>> {
        Ok(self
            .member_outputs(features)?
            .chunks(self.floors())
            .map(predict_floor)
            .collect())
    }
}

/// Floor with the highest member probability; ties go to the lowest floor.
pub fn predict_floor(member_outputs: &[f64]) -> usize {
    argmax(member_outputs)
}

fn sigmoid_arch(base: &MlpArchitecture) -> Result<MlpArchitecture> {
    base.with_head(1, OutputHead::Sigmoid)
}

pub struct FedOvaRun {
    pub ensemble: FloorClassifierEnsemble,
    /// One trace per member; metric is that member's binary accuracy.
    pub member_traces: Vec<TrainingTrace>,
    /// Argmax floor accuracy of the whole ensemble.
    pub trace: TrainingTrace,
}

fn class_eval(eval: &EvalSet) -> Result<&[usize]> {
    match &eval.truth {
        Truth::Classes(c) => Ok(c),
        Truth::Positions { .. } => Err(Error::invalid(
            "floor classification needs a class-labelled evaluation set",
        )),
    }
}

fn empty_trace(
    metric: Metric,
    init: ParameterVector,
    cfg: &FederationConfig,
    arch: &MlpArchitecture,
    scenario: &str,
) -> TrainingTrace {
    TrainingTrace {
        metric,
        rounds: Vec::new(),
        final_params: init,
        metadata: TraceMetadata {
            scenario: scenario.to_string(),
            config: *cfg,
            seed: cfg.seed,
            architecture: arch.fingerprint(),
        },
        failure: None,
    }
}

/// Federated one-vs-all training of `floors` binary members.
///
/// Rounds are interleaved across members so the ensemble can be evaluated
/// every `eval_every` rounds; members share no state, so the result equals
/// training each member on its own.
pub fn train_fedova(
    clients: &[FloorClient],
    floors: usize,
    base: &MlpArchitecture,
    cfg: &FederationConfig,
    eval: Option<&EvalSet>,
    scenario: &str,
) -> Result<FedOvaRun> {
    if floors < 2 {
        return Err(Error::invalid("FedOVA needs at least two floors"));
    }
    if clients.is_empty() {
        return Err(Error::invalid("FedOVA needs at least one client"));
    }
    cfg.validate()?;
    let arch = sigmoid_arch(base)?;
    let truth = eval.map(class_eval).transpose()?;
    let member_clients: Vec<Vec<ClientHandle>> = (0..floors)
        .map(|f| {
            clients
                .iter()
                .map(|c| {
                    let batch = Batch::new(c.features.clone(), relabel_ova(&c.floors, f), WAP_COUNT, 1)?;
                    Ok(ClientHandle::new(c.client_id, batch))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let member_eval: Vec<Option<EvalSet>> = (0..floors)
        .map(|f| {
            eval.zip(truth).map(|(e, t)| EvalSet {
                features: e.features.clone(),
                truth: Truth::Classes(relabel_ova(t, f).iter().map(|&v| v as usize).collect()),
            })
        })
        .collect();

    // Members start from a common initialization, like a broadcast of L
    // copies of one global model.
    let init = init_params(&arch, cfg.seed);
    let mut members: Vec<ParameterVector> = vec![init.clone(); floors];
    let mut member_traces: Vec<TrainingTrace> = (0..floors)
        .map(|_| empty_trace(Metric::Accuracy, init.clone(), cfg, &arch, scenario))
        .collect();
    let mut trace = empty_trace(Metric::Accuracy, init.clone(), cfg, &arch, scenario);

    'rounds: for round in 1..=cfg.rounds {
        let started = Instant::now();
        let mut participants = Vec::new();
        for f in 0..floors {
            let fed = Federation::new(&arch, &member_clients[f], cfg);
            let member_started = Instant::now();
            match fed.run_round(&members[f], round) {
                Ok((next, ids)) => {
                    members[f] = next;
                    participants = ids;
                }
                Err(e) if e.is_divergence() => {
                    let msg = format!(
                        "round {round}: {}",
                        Error::Floor {
                            floor: f as u8,
                            source: Box::new(e)
                        }
                    );
                    member_traces[f].failure = Some(msg.clone());
                    trace.failure = Some(msg);
                    break 'rounds;
                }
                Err(e) => {
                    return Err(Error::Floor {
                        floor: f as u8,
                        source: Box::new(e),
                    })
                }
            }
            let metric_value = match &member_eval[f] {
                Some(me) if cfg.evaluates(round, cfg.rounds) => Some(fedavg::evaluate(&members[f], &arch, me)?),
                _ => None,
            };
            member_traces[f].rounds.push(RoundResult {
                round,
                participants: participants.clone(),
                metric_value,
                wall_seconds: member_started.elapsed().as_secs_f64(),
            });
        }
        let metric_value = match (eval, truth) {
            (Some(e), Some(t)) if cfg.evaluates(round, cfg.rounds) => {
                let ens = FloorClassifierEnsemble {
                    arch: arch.clone(),
                    members: members.clone(),
                };
                Some(fedavg::accuracy(&ens.predict(&e.features)?, t))
            }
            _ => None,
        };
        trace.rounds.push(RoundResult {
            round,
            participants,
            metric_value,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    for (t, p) in member_traces.iter_mut().zip(&members) {
        t.final_params = p.clone();
    }
    Ok(FedOvaRun {
        ensemble: FloorClassifierEnsemble { arch, members },
        member_traces,
        trace,
    })
}

/// One softmax model over `floors` classes, trained by plain FedAvg.
pub fn train_fl_multiclass(
    clients: &[FloorClient],
    floors: usize,
    base: &MlpArchitecture,
    cfg: &FederationConfig,
    eval: Option<&EvalSet>,
    scenario: &str,
) -> Result<(MlpArchitecture, TrainingTrace)> {
    if floors < 2 {
        return Err(Error::invalid("floor classification needs at least two floors"));
    }
    let arch = base.with_head(floors, OutputHead::Softmax)?;
    if let Some(e) = eval {
        class_eval(e)?;
    }
    let handles = clients
        .iter()
        .map(|c| {
            let batch = Batch::new(c.features.clone(), one_hot(&c.floors, floors), WAP_COUNT, floors)?;
            Ok(ClientHandle::new(c.client_id, batch))
        })
        .collect::<Result<Vec<_>>>()?;
    let init = init_params(&arch, cfg.seed);
    let trace = Federation::new(&arch, &handles, cfg).run_training(&init, eval, scenario)?;
    Ok((arch, trace))
}

/// Pool every client's data into a single client: centralized mini-batch SGD
/// with one epoch per round.
pub fn pool_clients(clients: &[FloorClient]) -> FloorClient {
    let mut sorted: Vec<&FloorClient> = clients.iter().collect();
    sorted.sort_by_key(|c| c.client_id);
    FloorClient {
        client_id: 0,
        features: sorted.iter().flat_map(|c| c.features.iter().copied()).collect(),
        floors: sorted.iter().flat_map(|c| c.floors.iter().copied()).collect(),
    }
}

/// A per-floor 2D regressor and the target normalization it was trained in.
#[derive(Clone, Debug, PartialEq)]
pub struct FloorRegressor {
    pub params: ParameterVector,
    pub norm: NormalizationSpec,
}

/// One FedAvg regression per floor in `0..floors`, federated over the clients
/// holding records on that floor, each with its own target normalization.
pub fn train_per_floor_2d(
    assignment: &ClientAssignment,
    floors: usize,
    arch: &MlpArchitecture,
    cfg: &FederationConfig,
) -> Result<BTreeMap<u8, FloorRegressor>> {
    if arch.output_width() != 2 || arch.head() != OutputHead::Linear {
        return Err(Error::invalid("per-floor regressors need a linear 2-output head"));
    }
    let mut out = BTreeMap::new();
    for floor in 0..floors as u8 {
        let shards: Vec<(u32, FingerprintSet)> = assignment
            .clients
            .iter()
            .map(|(&id, s)| (id, dataset::filter(s, None, Some(floor))))
            .filter(|(_, s)| !s.is_empty())
            .collect();
        if shards.is_empty() {
            return Err(Error::Floor {
                floor,
                source: Box::new(Error::invalid("no training records on this floor")),
            });
        }
        let pooled = shards
            .iter()
            .skip(1)
            .fold(shards[0].1.clone(), |acc, (_, s)| acc.concat(s));
        let norm = fit_target_normalization(&pooled);
        let handles = shards
            .iter()
            .map(|(id, s)| {
                let batch = Batch::new(norm.encode_features(s), norm.encode_targets(s), WAP_COUNT, 2)?;
                Ok(ClientHandle::new(*id, batch))
            })
            .collect::<Result<Vec<_>>>()?;
        let trace = Federation::new(arch, &handles, cfg)
            .run_training(&init_params(arch, cfg.seed), None, &format!("floor {floor} 2D"))
            .map_err(|e| Error::Floor {
                floor,
                source: Box::new(e),
            })?;
        if let Some(f) = trace.failure {
            return Err(Error::Floor {
                floor,
                source: Box::new(Error::Divergence(f)),
            });
        }
        out.insert(
            floor,
            FloorRegressor {
                params: trace.final_params,
                norm,
            },
        );
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub enum FloorStage {
    Ova(FloorClassifierEnsemble),
    Softmax {
        arch: MlpArchitecture,
        params: ParameterVector,
    },
}

impl FloorStage {
    pub fn floors(&self) -> usize {
        match self {
            FloorStage::Ova(e) => e.floors(),
            FloorStage::Softmax { arch, .. } => arch.output_width(),
        }
    }

    pub fn predict(&self, features: &[f64]) -> Result<Vec<usize>> {
        match self {
            FloorStage::Ova(e) => e.predict(features),
            FloorStage::Softmax { arch, params } => {
                let out = model::forward(params, arch, features)?;
                Ok(out.chunks(arch.output_width()).map(argmax).collect())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ThreeDModel {
    pub floor_stage: FloorStage,
    pub regressor_arch: MlpArchitecture,
    pub per_floor_2d: BTreeMap<u8, FloorRegressor>,
}

impl ThreeDModel {
    pub fn new(
        floor_stage: FloorStage,
        regressor_arch: MlpArchitecture,
        per_floor_2d: BTreeMap<u8, FloorRegressor>,
    ) -> Result<Self> {
        for f in 0..floor_stage.floors() as u8 {
            if !per_floor_2d.contains_key(&f) {
                return Err(Error::invalid(format!("no 2D model for floor {f}")));
            }
        }
        Ok(ThreeDModel {
            floor_stage,
            regressor_arch,
            per_floor_2d,
        })
    }
}

/// `(floor, longitude m, latitude m)` per feature row: the floor stage picks
/// the floor and that floor's regressor places the point, right floor or not.
pub fn predict_3d(model: &ThreeDModel, features: &[f64]) -> Result<Vec<(usize, f64, f64)>> {
    let floors = model.floor_stage.predict(features)?;
    let w = model.regressor_arch.input_width();
    floors
        .iter()
        .enumerate()
        .map(|(r, &f)| {
            let reg = &model.per_floor_2d[&(f as u8)];
            let q = model::forward(&reg.params, &model.regressor_arch, &features[r * w..(r + 1) * w])?;
            let p = reg.norm.denormalize_target([q[0], q[1]]);
            Ok((f, p[0], p[1]))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThreeDReport {
    pub floor_accuracy: f64,
    /// Mean 2D error over all records, wrong floors included.
    pub mae_meters: f64,
    /// Mean 2D error over records whose floor was predicted correctly.
    pub mae_meters_correct_floor: Option<f64>,
}

pub fn evaluate_3d(model: &ThreeDModel, holdout: &FingerprintSet) -> Result<ThreeDReport> {
    if holdout.is_empty() {
        return Err(Error::invalid("empty holdout"));
    }
    let features = NormalizationSpec::default().encode_features(holdout);
    let preds = predict_3d(model, &features)?;
    let mut hits = 0usize;
    let mut err_all = 0.0;
    let mut err_hit = 0.0;
    for ((f, lon, lat), r) in preds.iter().zip(holdout.iter()) {
        let e = ((lon - r.longitude).powi(2) + (lat - r.latitude).powi(2)).sqrt();
        err_all += e;
        if *f == r.floor as usize {
            hits += 1;
            err_hit += e;
        }
    }
    let n = holdout.len() as f64;
    Ok(ThreeDReport {
        floor_accuracy: hits as f64 / n,
        mae_meters: err_all / n,
        mae_meters_correct_floor: (hits > 0).then(|| err_hit / hits as f64),
    })
}

#[derive(Serialize, Deserialize)]
struct EnsembleManifest {
    version: u32,
    floors: usize,
    architecture: String,
    members: BTreeMap<usize, String>,
}

/// One parameter file per member plus `manifest.json`.
pub fn save_ensemble(dir: &Path, ensemble: &FloorClassifierEnsemble) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut members = BTreeMap::new();
    for (f, p) in ensemble.members.iter().enumerate() {
        let name = format!("member_{f}.params");
        model::write_params(&dir.join(&name), p, &ensemble.arch)?;
        members.insert(f, name);
    }
    let manifest = EnsembleManifest {
        version: 1,
        floors: ensemble.floors(),
        architecture: ensemble.arch.fingerprint(),
        members,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).map_err(|e| Error::io(&path, e))
}

pub fn load_ensemble(dir: &Path) -> Result<FloorClassifierEnsemble> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |message: String| Error::Checkpoint {
        path: path.clone(),
        message,
    };
    let manifest: EnsembleManifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let arch = MlpArchitecture::from_fingerprint(&manifest.architecture)?;
    let mut members = Vec::with_capacity(manifest.floors);
    for f in 0..manifest.floors {
        let name = manifest
            .members
            .get(&f)
            .ok_or_else(|| bad(format!("no member for floor {f}")))?;
        let (p, a) = model::read_params(&dir.join(name))?;
        if a != arch {
            return Err(bad(format!("member {f} has architecture {a}, manifest says {arch}")));
        }
        members.push(p);
    }
    Ok(FloorClassifierEnsemble { arch, members })
}
