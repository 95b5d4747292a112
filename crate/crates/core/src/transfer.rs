//! FedLoc, N-FedLoc and H-FedTLoc on a source/target domain scenario.
//!
//! - FedLoc: FedAvg over the source federation, applied to the target domain.
//! - N-FedLoc: FedAvg from scratch over the target federation only.
//! - H-FedTLoc: FedAvg over the source federation up to `transfer_round`,
//!   then the global model is copied into a sub-global model that the target
//!   federation keeps training until `total_rounds`.
//!
//! All three are evaluated on the target-domain holdout, in meters.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{fit_target_normalization, ClientAssignment, DomainScenario, NormalizationSpec, ScenarioKind};
use crate::error::{Error, Result};
use crate::fedavg::{evaluate, join_ids, ClientHandle, EvalSet, Federation, FederationConfig, TrainingTrace};
use crate::model::{init_params, Batch, FrozenMask, MlpArchitecture, ParameterVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "FedLoc")]
    FedLoc,
    #[serde(rename = "N-FedLoc")]
    NFedLoc,
    #[serde(rename = "H-FedTLoc")]
    HFedTLoc,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::FedLoc, Method::NFedLoc, Method::HFedTLoc];

    pub fn tag(self) -> &'static str {
        match self {
            Method::FedLoc => "FedLoc",
            Method::NFedLoc => "N-FedLoc",
            Method::HFedTLoc => "H-FedTLoc",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Global,
    Subglobal,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Global => "global",
            Stage::Subglobal => "subglobal",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub transfer_round: usize,
    pub total_rounds: usize,
    /// Leading dense layers frozen during sub-global training.
    pub freeze_prefix: usize,
    pub global: FederationConfig,
    pub subglobal: FederationConfig,
}

impl TransferConfig {
    /// Requires `0 < transfer_round <= total_rounds`; equality leaves no
    /// sub-global rounds.
    pub fn validate(&self, arch: &MlpArchitecture) -> Result<()> {
        if self.transfer_round == 0 || self.transfer_round > self.total_rounds {
            return Err(Error::invalid(format!(
                "transfer round {} outside 1..={}",
                self.transfer_round, self.total_rounds
            )));
        }
        if self.freeze_prefix >= arch.layer_count() {
            return Err(Error::invalid(format!(
                "freeze_prefix {} must be below the layer count {}",
                self.freeze_prefix,
                arch.layer_count()
            )));
        }
        self.global.validate()?;
        self.subglobal.validate()
    }
}

/// A scenario encoded for one architecture: client batches, holdout and the
/// target normalization (fitted on the source federation's records).
#[derive(Clone, Debug)]
pub struct PreparedScenario {
    pub arch: MlpArchitecture,
    pub norm: NormalizationSpec,
    pub source_clients: Vec<ClientHandle>,
    pub target_clients: Vec<ClientHandle>,
    pub holdout: EvalSet,
    pub kind: ScenarioKind,
    pub target_ratio: f64,
    pub description: String,
}

fn encode_clients(a: &ClientAssignment, norm: &NormalizationSpec) -> Result<Vec<ClientHandle>> {
    a.clients
        .iter()
        .filter(|(_, set)| !set.is_empty())
        .map(|(&id, set)| {
            let batch = Batch::new(
                norm.encode_features(set),
                norm.encode_targets(set),
                crate::dataset::WAP_COUNT,
                2,
            )?;
            Ok(ClientHandle::new(id, batch))
        })
        .collect()
}

impl PreparedScenario {
    pub fn new(scenario: &DomainScenario, arch: &MlpArchitecture) -> Result<Self> {
        if arch.output_width() != 2 || arch.input_width() != crate::dataset::WAP_COUNT {
            return Err(Error::invalid(format!("{arch} is not a 520→2 regression architecture")));
        }
        if scenario.holdout.is_empty() {
            return Err(Error::invalid("scenario holdout is empty"));
        }
        let norm = fit_target_normalization(&scenario.source.union());
        Ok(PreparedScenario {
            arch: arch.clone(),
            norm,
            source_clients: encode_clients(&scenario.source, &norm)?,
            target_clients: encode_clients(&scenario.target, &norm)?,
            holdout: EvalSet::positions(&scenario.holdout, &norm),
            kind: scenario.kind,
            target_ratio: scenario.target_ratio,
            description: scenario.description.clone(),
        })
    }
}

/// Evaluation traces of one method on one scenario.
#[derive(Clone, Debug)]
pub struct StageTrace {
    pub method: Method,
    pub global: Option<TrainingTrace>,
    pub subglobal: Option<TrainingTrace>,
    pub transfer_round: Option<usize>,
    pub rho: f64,
}

impl StageTrace {
    pub fn stages(&self) -> impl Iterator<Item = (Stage, &TrainingTrace)> {
        self.global
            .iter()
            .map(|t| (Stage::Global, t))
            .chain(self.subglobal.iter().map(|t| (Stage::Subglobal, t)))
    }

    /// `(round, stage, value)` of every evaluated round, in round order.
    pub fn evaluations(&self) -> Vec<(usize, Stage, f64)> {
        self.stages()
            .flat_map(|(s, t)| t.evaluations().into_iter().map(move |(r, v)| (r, s, v)))
            .collect()
    }

    pub fn final_metric(&self) -> Option<f64> {
        self.evaluations().last().map(|e| e.2)
    }

    pub fn metric_at(&self, round: usize) -> Option<f64> {
        self.evaluations().into_iter().find(|e| e.0 == round).map(|e| e.2)
    }

    pub fn final_params(&self) -> &ParameterVector {
        let last = self
            .subglobal
            .as_ref()
            .or(self.global.as_ref())
            .expect("stage trace without stages");
        &last.final_params
    }

    pub fn round_indices(&self) -> Vec<usize> {
        self.stages()
            .flat_map(|(_, t)| t.rounds.iter().map(|r| r.round))
            .collect()
    }

    pub fn failure(&self) -> Option<&str> {
        self.stages().find_map(|(_, t)| t.failure.as_deref())
    }

    /// The fedavg trace columns plus `method_tag,stage,transfer_round,rho`.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "round,metric_name,metric_value,participating_clients,wall_seconds,method_tag,stage,transfer_round,rho"
        )?;
        let transfer = self.transfer_round.map(|t| t.to_string()).unwrap_or_default();
        for (stage, t) in self.stages() {
            for r in &t.rounds {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{}",
                    r.round,
                    t.metric.name(),
                    r.metric_value.map(|v| format!("{v:?}")).unwrap_or_default(),
                    join_ids(&r.participants),
                    r.wall_seconds,
                    self.method,
                    stage.name(),
                    transfer,
                    self.rho
                )?;
            }
        }
        Ok(())
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(&mut f).map_err(|e| Error::io(path, e))
    }
}

fn check_clients(clients: &[ClientHandle], what: &str) -> Result<()> {
    if clients.is_empty() {
        return Err(Error::invalid(format!("{what} federation has no trainable data")));
    }
    Ok(())
}

/// FedAvg over the source federation for `cfg.rounds` rounds.
pub fn run_fedloc(prep: &PreparedScenario, cfg: &FederationConfig) -> Result<StageTrace> {
    run_fedloc_with_capture(prep, cfg, None).map(|(t, _)| t)
}

/// As [`run_fedloc`], additionally returning the global vector after round
/// `capture` (the H-FedTLoc transfer point).
pub fn run_fedloc_with_capture(
    prep: &PreparedScenario,
    cfg: &FederationConfig,
    capture: Option<usize>,
) -> Result<(StageTrace, Option<ParameterVector>)> {
    check_clients(&prep.source_clients, "source")?;
    let init = init_params(&prep.arch, cfg.seed);
    let fed = Federation::new(&prep.arch, &prep.source_clients, cfg);
    let mut captured = None;
    let trace = fed.run_rounds(
        &init,
        1,
        cfg.rounds,
        Some(&prep.holdout),
        &prep.description,
        &mut |r, p| {
            if Some(r.round) == capture {
                captured = Some(p.clone());
            }
        },
    )?;
    Ok((
        StageTrace {
            method: Method::FedLoc,
            global: Some(trace),
            subglobal: None,
            transfer_round: None,
            rho: prep.target_ratio,
        },
        captured,
    ))
}

/// FedAvg from a fresh initialization over the target federation only.
pub fn run_n_fedloc(prep: &PreparedScenario, cfg: &FederationConfig) -> Result<StageTrace> {
    check_clients(&prep.target_clients, "target")?;
    let init = init_params(&prep.arch, cfg.seed);
    let trace = Federation::new(&prep.arch, &prep.target_clients, cfg).run_training(
        &init,
        Some(&prep.holdout),
        &prep.description,
    )?;
    Ok(StageTrace {
        method: Method::NFedLoc,
        global: None,
        subglobal: Some(trace),
        transfer_round: None,
        rho: prep.target_ratio,
    })
}

/// Copy the global model into the sub-global model, with the mask of the
/// `freeze_prefix` leading layers.
pub fn transfer_model(
    global: &ParameterVector,
    arch: &MlpArchitecture,
    freeze_prefix: usize,
) -> Result<(ParameterVector, FrozenMask)> {
    if !global.is_finite() {
        return Err(Error::invalid("cannot transfer a non-finite global model"));
    }
    global.check_len(arch)?;
    Ok((global.clone(), FrozenMask::leading_layers(arch, freeze_prefix)?))
}

/// Global FL, model transfer, sub-global FL.
pub fn run_h_fedtloc(prep: &PreparedScenario, tc: &TransferConfig) -> Result<StageTrace> {
    tc.validate(&prep.arch)?;
    check_clients(&prep.source_clients, "source")?;
    let init = init_params(&prep.arch, tc.global.seed);
    let global_cfg = FederationConfig {
        rounds: tc.transfer_round,
        ..tc.global
    };
    let global = Federation::new(&prep.arch, &prep.source_clients, &global_cfg).run_rounds(
        &init,
        1,
        tc.transfer_round,
        Some(&prep.holdout),
        &prep.description,
        &mut |_, _| {},
    )?;
    continue_h_fedtloc(prep, tc, global)
}

/// Sub-global stage of H-FedTLoc from an existing global-stage trace whose
/// `final_params` are the global vector at `tc.transfer_round`.
///
/// The experiment runner uses this to branch off a FedLoc run instead of
/// repeating the shared global stage. If the prefix has no evaluation at the
/// transfer round, one is added.
pub fn continue_h_fedtloc(
    prep: &PreparedScenario,
    tc: &TransferConfig,
    mut global: TrainingTrace,
) -> Result<StageTrace> {
    tc.validate(&prep.arch)?;
    global.rounds.retain(|r| r.round <= tc.transfer_round);
    if global.rounds.last().map(|r| r.round) != Some(tc.transfer_round) {
        return Err(Error::invalid("global stage does not end at the transfer round"));
    }
    let mut stage = StageTrace {
        method: Method::HFedTLoc,
        global: None,
        subglobal: None,
        transfer_round: Some(tc.transfer_round),
        rho: prep.target_ratio,
    };
    if global.failure.is_some() {
        stage.global = Some(global);
        return Ok(stage);
    }
    if global.rounds.last().unwrap().metric_value.is_none() {
        let v = evaluate(&global.final_params, &prep.arch, &prep.holdout)?;
        global.rounds.last_mut().unwrap().metric_value = Some(v);
    }
    let (sub_init, mask) = transfer_model(&global.final_params, &prep.arch, tc.freeze_prefix)?;
    stage.global = Some(global);
    if tc.transfer_round == tc.total_rounds {
        return Ok(stage);
    }
    check_clients(&prep.target_clients, "target")?;
    let sub_cfg = FederationConfig {
        rounds: tc.total_rounds,
        ..tc.subglobal
    };
    let sub = Federation::new(&prep.arch, &prep.target_clients, &sub_cfg)
        .with_frozen(Some(&mask))
        .run_rounds(
            &sub_init,
            tc.transfer_round + 1,
            tc.total_rounds,
            Some(&prep.holdout),
            &prep.description,
            &mut |_, _| {},
        )?;
    stage.subglobal = Some(sub);
    Ok(stage)
}
