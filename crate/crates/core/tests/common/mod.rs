#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use fedloc::dataset::{self, corpus_paths, load_csv, FingerprintSet, NormalizationSpec, Provenance, WAP_COUNT};
use fedloc::experiment::DATA_ROOT_ENV;
use fedloc::model::{
    batch_loss, gradient, weighted_gradient, Batch, MlpArchitecture, ParameterVector, TrainingHyperparams,
};
use fedloc::seed::{self, stream};
use fedloc::synth::{self, SynthConfig};
use rand::seq::SliceRandom;

pub struct Corpus {
    pub train: FingerprintSet,
    pub validation: FingerprintSet,
    /// `"UJIIndoorLoc (<root>)"` or `"synthetic (seed N)"`.
    pub label: String,
    pub root: Option<PathBuf>,
}

impl Corpus {
    pub fn is_real(&self) -> bool {
        self.root.is_some()
    }

    pub fn building(&self, b: u8) -> FingerprintSet {
        dataset::filter(&self.train, Some(b), None)
    }

    pub fn floor(&self, b: u8, f: u8) -> FingerprintSet {
        dataset::filter(&self.train, Some(b), Some(f))
    }
}

/// The real corpus when `FEDLOC_DATA_ROOT` is set, the synthetic one otherwise.
pub fn corpus() -> &'static Corpus {
    static CORPUS: OnceLock<Corpus> = OnceLock::new();
    CORPUS.get_or_init(|| match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) => {
            let root = PathBuf::from(root);
            let (t, v) = corpus_paths(&root);
            Corpus {
                train: load_csv(t, Provenance::Training).expect("training CSV"),
                validation: load_csv(v, Provenance::Validation).expect("validation CSV"),
                label: format!("UJIIndoorLoc ({})", root.display()),
                root: Some(root),
            }
        }
        None => {
            let cfg = SynthConfig::default();
            let (train, validation) = synth::generate(&cfg);
            Corpus {
                train,
                validation,
                label: format!("synthetic (seed {})", cfg.seed),
                root: None,
            }
        }
    })
}

/// Below this magnitude gradient entries are compared on absolute error:
/// central differences at h = 1e-6 carry about 1e-10 of round-off, which
/// would swamp a relative error on near-zero entries.
pub const FD_DENOMINATOR_FLOOR: f64 = 1e-4;

/// Max over coordinates of `|analytic − numeric| / max(|analytic|, |numeric|, floor)`
/// with central differences of step `h`.
pub fn fd_max_relative_error(
    params: &ParameterVector,
    arch: &MlpArchitecture,
    batch: &Batch,
    positive_weight: f64,
    h: f64,
) -> f64 {
    let analytic = weighted_gradient(params, arch, batch, positive_weight).unwrap();
    let mut p = params.clone();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = p.as_slice()[i];
        let (hi, lo) = (orig + h, orig - h);
        p.as_mut_slice()[i] = hi;
        let up = batch_loss(&p, arch, batch, positive_weight).unwrap();
        p.as_mut_slice()[i] = lo;
        let down = batch_loss(&p, arch, batch, positive_weight).unwrap();
        p.as_mut_slice()[i] = orig;
        // Divide by the representable step, not 2h, to avoid rounding bias.
        let numeric = (up - down) / (hi - lo);
        let a = analytic.as_slice()[i];
        let denom = a.abs().max(numeric.abs()).max(FD_DENOMINATOR_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

/// Position-regression batch for `set`.
pub fn encode(set: &FingerprintSet, norm: &NormalizationSpec) -> Batch {
    Batch::new(norm.encode_features(set), norm.encode_targets(set), WAP_COUNT, 2).unwrap()
}

/// Plain mini-batch SGD written against `gradient` alone: each epoch
/// shuffles row indices with the epoch's seeded stream, and each chunk of
/// rows (in ascending order) becomes its own batch.
pub fn sgd_oracle(
    init: &ParameterVector,
    arch: &MlpArchitecture,
    data: &Batch,
    hp: &TrainingHyperparams,
    epochs: u64,
) -> ParameterVector {
    let mut theta = init.as_slice().to_vec();
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..data.rows()).collect();
        order.shuffle(&mut seed::rng(hp.seed, &[stream::SHUFFLE, epoch]));
        for rows in order.chunks(hp.batch_size) {
            let mut rows = rows.to_vec();
            rows.sort_unstable();
            let features = rows.iter().flat_map(|&r| data.feature_row(r).to_vec()).collect();
            let targets = rows.iter().flat_map(|&r| data.target_row(r).to_vec()).collect();
            let chunk = Batch::new(features, targets, data.feature_width, data.target_width).unwrap();
            let g = gradient(&ParameterVector::new(theta.clone()), arch, &chunk).unwrap();
            for (t, g) in theta.iter_mut().zip(g.as_slice()) {
                *t -= hp.learning_rate * g;
            }
        }
    }
    ParameterVector::new(theta)
}

/// Largest coordinate-wise `|a − b| / max(|a|, |b|, 1e-12)`.
pub fn max_relative_diff(a: &ParameterVector, b: &ParameterVector) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}
