mod common;

use std::collections::BTreeMap;

use fedloc::dataset::*;
use fedloc::fedavg::{ClientHandle, EvalSet, Federation, FederationConfig};
use fedloc::floor3d::*;
use fedloc::model::*;
use fedloc::seed;
use fedloc::Error;
use proptest::prelude::*;

fn base() -> MlpArchitecture {
    MlpArchitecture::new(vec![520, 16, 2], Activation::Relu, OutputHead::Linear).unwrap()
}

fn cfg(rounds: usize) -> FederationConfig {
    FederationConfig {
        rounds,
        eval_every: 5,
        seed: 6,
        ..Default::default()
    }
}

#[test]
fn members_train_as_if_alone() {
    let b1 = common::corpus().building(1);
    let assignment = partition_by_floor(&b1, 2, 1).unwrap();
    let clients = floor_clients(&assignment, 4).unwrap();
    let c = cfg(4);
    let run = train_fedova(&clients, 4, &base(), &c, None, "independence").unwrap();
    assert_eq!(run.ensemble.floors(), 4);
    let arch = &run.ensemble.arch;
    assert_eq!(arch.output_width(), 1);
    for f in (0..4).rev() {
        let handles: Vec<ClientHandle> = clients
            .iter()
            .map(|c| {
                ClientHandle::new(
                    c.client_id,
                    Batch::new(c.features.clone(), relabel_ova(&c.floors, f), WAP_COUNT, 1).unwrap(),
                )
            })
            .collect();
        let alone = Federation::new(arch, &handles, &c)
            .run_training(&init_params(arch, c.seed), None, "alone")
            .unwrap();
        assert!(alone.final_params.bit_eq(&run.ensemble.members[f]), "member {f}");
        assert!(run.member_traces[f].final_params.bit_eq(&run.ensemble.members[f]));
    }
}

#[test]
fn single_client_member_is_centralized_binary_training() {
    let b1 = common::corpus().building(1);
    let assignment = partition_uniform(&b1, 3, 2).unwrap();
    let pooled = pool_clients(&floor_clients(&assignment, 4).unwrap());
    assert_eq!(pooled.floors.len(), b1.len());
    let c = cfg(3);
    let run = train_fedova(std::slice::from_ref(&pooled), 4, &base(), &c, None, "pooled").unwrap();
    let arch = &run.ensemble.arch;
    let handle_seed = seed::derive(pooled.client_id as u64, &[seed::stream::CLIENT]);
    let hp = TrainingHyperparams {
        seed: seed::derive(c.seed, &[handle_seed]),
        ..c.hp
    };
    for f in 0..4 {
        let data = Batch::new(pooled.features.clone(), relabel_ova(&pooled.floors, f), WAP_COUNT, 1).unwrap();
        let oracle = common::sgd_oracle(&init_params(arch, c.seed), arch, &data, &hp, 3);
        let diff = common::max_relative_diff(&oracle, &run.ensemble.members[f]);
        assert!(diff < 1e-9, "member {f}: {diff}");
    }
}

#[test]
fn scenario_b_clients_have_zero_floor_entropy() {
    let b1 = common::corpus().building(1);
    let a = partition_by_floor(&b1, 4, 3).unwrap();
    for set in a.clients.values() {
        assert_eq!(floor_label_entropy(set), 0.0);
    }
    let u = partition_uniform(&b1, 16, 3).unwrap();
    assert!(u.clients.values().all(|s| floor_label_entropy(s) > 1.0));
}

#[test]
fn missing_floor_names_the_floor() {
    let b1 = common::corpus().building(1);
    let without_two = b1.select("no floor 2".into(), |r| r.floor != 2);
    let a = partition_uniform(&without_two, 4, 1).unwrap();
    match train_per_floor_2d(&a, 4, &base(), &cfg(1)) {
        Err(Error::Floor { floor, .. }) => assert_eq!(floor, 2),
        other => panic!("expected a floor error, got {other:?}"),
    }
}

#[test]
fn per_floor_regressors_cover_every_floor() {
    let b1 = common::corpus().building(1);
    let a = partition_by_floor(&b1, 1, 1).unwrap();
    let models = train_per_floor_2d(&a, 4, &base(), &cfg(2)).unwrap();
    assert_eq!(models.keys().copied().collect::<Vec<u8>>(), vec![0, 1, 2, 3]);
    let floor2 = filter(&b1, None, Some(2));
    assert_eq!(models[&2].norm, fit_target_normalization(&floor2));
}

/// Zero weights; the output is the bias alone.
fn constant_params(arch: &MlpArchitecture, out_bias: &[f64]) -> ParameterVector {
    let mut p = ParameterVector::zeros(arch.param_count());
    let (_, b) = arch.layer_ranges(arch.layer_count() - 1);
    p.as_mut_slice()[b].copy_from_slice(out_bias);
    p
}

#[test]
fn perfect_regressor_on_the_right_floor_gives_zero_error() {
    let b1 = common::corpus().building(1);
    let reg_arch = MlpArchitecture::new(vec![520, 4, 2], Activation::Relu, OutputHead::Linear).unwrap();
    let stage_arch = MlpArchitecture::new(vec![520, 4, 4], Activation::Relu, OutputHead::Softmax).unwrap();
    let mut per_floor = BTreeMap::new();
    let mut anchors = Vec::new();
    for f in 0..4u8 {
        let one = filter(&b1, None, Some(f));
        let anchor = one.select("anchor".into(), {
            let id = one.records()[0].id;
            move |r| r.id == id
        });
        per_floor.insert(
            f,
            FloorRegressor {
                params: constant_params(&reg_arch, &[0.0, 0.0]),
                norm: fit_target_normalization(&anchor),
            },
        );
        anchors.push(anchor);
    }
    let pick = |floor: usize| {
        let mut bias = vec![0.0; 4];
        bias[floor] = 5.0;
        FloorStage::Softmax {
            arch: stage_arch.clone(),
            params: constant_params(&stage_arch, &bias),
        }
    };
    let right = ThreeDModel::new(pick(2), reg_arch.clone(), per_floor.clone()).unwrap();
    let report = evaluate_3d(&right, &anchors[2]).unwrap();
    assert_eq!(report.floor_accuracy, 1.0);
    assert_eq!(report.mae_meters, 0.0);
    assert_eq!(report.mae_meters_correct_floor, Some(0.0));

    let wrong = ThreeDModel::new(pick(1), reg_arch.clone(), per_floor.clone()).unwrap();
    let report = evaluate_3d(&wrong, &anchors[2]).unwrap();
    let (p, q) = (anchors[1].records()[0].position(), anchors[2].records()[0].position());
    let expected = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
    assert_eq!(report.floor_accuracy, 0.0);
    assert!((report.mae_meters - expected).abs() < 1e-6);
    assert_eq!(report.mae_meters_correct_floor, None);

    per_floor.remove(&3);
    assert!(ThreeDModel::new(pick(0), reg_arch, per_floor).is_err());
}

#[test]
fn two_floor_ova_agrees_with_softmax_where_both_are_confident() {
    let b1 = common::corpus()
        .building(1)
        .select("floors 0-1".into(), |r| r.floor < 2);
    let a = partition_uniform(&b1, 16, 5).unwrap();
    let clients = floor_clients(&a, 2).unwrap();
    let holdout = filter(&common::corpus().validation, Some(1), None).select("floors 0-1".into(), |r| r.floor < 2);
    let holdout = if holdout.is_empty() { b1.clone() } else { holdout };
    let eval = EvalSet::floors(&holdout, &NormalizationSpec::default());
    let arch = MlpArchitecture::new(vec![520, 32, 2], Activation::Relu, OutputHead::Linear).unwrap();
    let c = cfg(20);
    let ova = train_fedova(&clients, 2, &arch, &c, Some(&eval), "A").unwrap();
    let (soft_arch, soft) = train_fl_multiclass(&clients, 2, &arch, &c, Some(&eval), "A").unwrap();
    let ova_out = ova.ensemble.member_outputs(&eval.features).unwrap();
    let soft_out = forward(&soft.final_params, &soft_arch, &eval.features).unwrap();
    let (mut both, mut agree) = (0usize, 0usize);
    for (o, s) in ova_out.chunks(2).zip(soft_out.chunks(2)) {
        let (io, is) = (argmax(o), argmax(s));
        if o[io] > 0.9 && o[1 - io] < 0.1 && s[is] > 0.9 {
            both += 1;
            agree += (io == is) as usize;
        }
    }
    assert!(both > eval.len() / 2, "only {both} of {} confident", eval.len());
    let rate = agree as f64 / both as f64;
    assert!(rate > 0.95, "agreement {rate}");
}

#[test]
fn ensemble_checkpoint_rejects_missing_members() {
    let arch = MlpArchitecture::new(vec![520, 3, 1], Activation::Relu, OutputHead::Sigmoid).unwrap();
    let ens = FloorClassifierEnsemble {
        members: (0..4).map(|s| init_params(&arch, s)).collect(),
        arch,
    };
    let dir = tempfile::tempdir().unwrap();
    save_ensemble(dir.path(), &ens).unwrap();
    assert_eq!(load_ensemble(dir.path()).unwrap(), ens);
    std::fs::remove_file(dir.path().join("member_3.params")).unwrap();
    assert!(load_ensemble(dir.path()).is_err());
    assert!(load_ensemble(&dir.path().join("nowhere")).is_err());
}

proptest! {
    #[test]
    fn every_record_is_positive_for_exactly_one_member(floors in prop::collection::vec(0usize..5, 1..60)) {
        let labelings: Vec<Vec<f64>> = (0..5).map(|t| relabel_ova(&floors, t)).collect();
        for r in 0..floors.len() {
            let positives: f64 = labelings.iter().map(|l| l[r]).sum();
            prop_assert_eq!(positives, 1.0);
            prop_assert_eq!(labelings[floors[r]][r], 1.0);
        }
    }

    #[test]
    fn floor_prediction_survives_increasing_maps(outputs in prop::collection::vec(0.0f64..1.0, 4), k in 0.1f64..10.0) {
        let f = predict_floor(&outputs);
        let logit: Vec<f64> = outputs.iter().map(|p| (p / (1.0 - p + 1e-300)).ln() * k).collect();
        let sq: Vec<f64> = outputs.iter().map(|p| p * p).collect();
        prop_assert_eq!(predict_floor(&logit), f);
        prop_assert_eq!(predict_floor(&sq), f);
    }
}
