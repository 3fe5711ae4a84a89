//! End-to-end integration checks on small planted-signal datasets: epoch
//! mechanics, run determinism, best-checkpoint fidelity and the
//! hyperparameter-search contract.

use mitoclass::dataset::{generate_synthetic, Dataset, SyntheticConfig};
use mitoclass::hpo::{run_search, run_trial, HpSample, SearchSpace, TrialStatus};
use mitoclass::netcore::{load_checkpoint, ArchConfig, HardnessHeadMode, Model};
use mitoclass::pixelpipe::AugPolicy;
use mitoclass::pixelpipe::InputMode;
use mitoclass::splits::{fold_slices, stratified_kfold, FoldAssignment};
use mitoclass::trainer::{
    four_class_alpha, run_epoch, train, validation_balanced_accuracy, OptState, TrainConfig,
};

fn small_dataset(n: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticConfig {
        n_patches: n,
        amf_rate: 0.25,
        hard_rate: 0.2,
        n_domains: 3,
        seed,
    })
    .unwrap()
}

fn desk_config(max_epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs,
        seed,
        focal: mitoclass::losses::FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        },
        ..TrainConfig::default()
    }
}

fn ids_of(dataset: &Dataset) -> Vec<String> {
    dataset.iter().map(|r| r.patch_id.clone()).collect()
}

#[test]
fn one_batch_per_epoch_when_dataset_equals_batch_size() {
    let ds = small_dataset(8, 1);
    let arch = ArchConfig::desk(3, HardnessHeadMode::Binary);
    let model = Model::new(arch).unwrap();
    let mut params = model.init_params(5);
    let mut state = OptState::new(&params.tensors);
    let cfg = desk_config(1, 2);
    let policy = AugPolicy::desk();
    let ids = ids_of(&ds);
    let records: Vec<_> = ds.iter().collect();
    let alpha4 = four_class_alpha(&records);

    run_epoch(
        &model, &mut params, &mut state, &ds, &ids, &policy, InputMode::Rgb, None, &cfg, &alpha4,
        0,
    )
    .unwrap();
    assert_eq!(state.step, 1);

    // 9 records with batch size 8 keep the partial batch: two steps
    let ds9 = small_dataset(9, 1);
    let ids9 = ids_of(&ds9);
    let mut params9 = model.init_params(5);
    let mut state9 = OptState::new(&params9.tensors);
    run_epoch(
        &model, &mut params9, &mut state9, &ds9, &ids9, &policy, InputMode::Rgb, None, &cfg,
        &alpha4, 0,
    )
    .unwrap();
    assert_eq!(state9.step, 2);
}

#[test]
fn epoch_is_bitwise_deterministic() {
    let ds = small_dataset(16, 3);
    let arch = ArchConfig {
        dropout: 0.3,
        ..ArchConfig::desk(3, HardnessHeadMode::Binary)
    };
    let model = Model::new(arch).unwrap();
    let cfg = desk_config(1, 11);
    let policy = AugPolicy::desk();
    let ids = ids_of(&ds);
    let records: Vec<_> = ds.iter().collect();
    let alpha4 = four_class_alpha(&records);

    let run = || {
        let mut params = model.init_params(21);
        let mut state = OptState::new(&params.tensors);
        let loss = run_epoch(
            &model, &mut params, &mut state, &ds, &ids, &policy, InputMode::Rgb, None, &cfg,
            &alpha4, 0,
        )
        .unwrap();
        (params, loss)
    };
    let (p1, l1) = run();
    let (p2, l2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    for ((n1, t1), (n2, t2)) in p1.tensors.iter().zip(p2.tensors.iter()) {
        assert_eq!(n1, n2);
        for (a, b) in t1.data().iter().zip(t2.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "tensor {n1}");
        }
    }
}

#[test]
fn training_loss_trends_downward_over_thirty_epochs() {
    let ds = small_dataset(48, 9);
    let assignment = stratified_kfold(&ds, 4, 5).unwrap();
    let arch = ArchConfig::desk(3, HardnessHeadMode::Binary);
    let cfg = TrainConfig {
        max_epochs: 30,
        seed: 13,
        focal: mitoclass::losses::FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        },
        ..TrainConfig::default()
    };
    let result = train(
        &ds,
        &assignment,
        0,
        &arch,
        &cfg,
        &AugPolicy::desk(),
        InputMode::Rgb,
        None,
        None,
    )
    .unwrap();
    assert_eq!(result.epochs_run, 30, "no early stop on 30 epochs with patience 20 and an improving metric");
    let losses: Vec<f64> = result.history.iter().map(|h| h.train_loss).collect();
    let first: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let last: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(
        last < first,
        "mean of last 5 epochs ({last:.5}) should undercut the first 5 ({first:.5})"
    );
    // definitional invariants of the result
    let max_ba = result
        .history
        .iter()
        .map(|h| h.val_balanced_accuracy)
        .fold(f64::MIN, f64::max);
    assert_eq!(result.best_val_balanced_accuracy, max_ba);
    assert!(result.epochs_run <= result.best_epoch + cfg.patience + 1);
}

#[test]
fn best_checkpoint_reproduces_best_validation_accuracy_exactly() {
    let ds = small_dataset(40, 17);
    let assignment = stratified_kfold(&ds, 4, 7).unwrap();
    let arch = ArchConfig::desk(3, HardnessHeadMode::Binary);
    let cfg = desk_config(6, 23);
    let policy = AugPolicy::desk();
    let dir = tempfile::tempdir().unwrap();

    let result = train(
        &ds,
        &assignment,
        1,
        &arch,
        &cfg,
        &policy,
        InputMode::Rgb,
        None,
        Some(dir.path()),
    )
    .unwrap();

    let ckpt = result.best_checkpoint_path.clone().unwrap();
    let (params, meta) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(meta["epoch"].as_u64().unwrap() as usize, result.best_epoch);
    let model = Model::new(params.arch.clone()).unwrap();
    let (_, val_ids) = fold_slices(&assignment, 1).unwrap();
    let ba = validation_balanced_accuracy(
        &model,
        &params,
        &ds,
        &val_ids,
        &policy,
        InputMode::Rgb,
        None,
    )
    .unwrap();
    assert_eq!(
        ba.to_bits(),
        result.best_val_balanced_accuracy.to_bits(),
        "re-evaluating the best checkpoint must reproduce the tracked metric exactly"
    );

    // run-directory artifacts
    assert!(dir.path().join("config.json").exists());
    let history = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_balanced_accuracy,lr\n"));
    assert_eq!(history.lines().count(), result.epochs_run + 1);
}

#[test]
fn four_class_mode_trains_and_checkpoints() {
    let ds = small_dataset(32, 29);
    let assignment = stratified_kfold(&ds, 4, 3).unwrap();
    let arch = ArchConfig::desk(3, HardnessHeadMode::FourClass);
    let cfg = desk_config(2, 31);
    let dir = tempfile::tempdir().unwrap();
    let result = train(
        &ds,
        &assignment,
        0,
        &arch,
        &cfg,
        &AugPolicy::desk(),
        InputMode::Rgb,
        None,
        Some(dir.path()),
    )
    .unwrap();
    assert_eq!(result.epochs_run, 2);
    let (params, _) = load_checkpoint(&result.best_checkpoint_path.unwrap()).unwrap();
    assert_eq!(params.arch.hardness_head_mode, HardnessHeadMode::FourClass);
}

#[test]
fn hed_input_modes_train() {
    let ds = small_dataset(24, 37);
    let assignment = stratified_kfold(&ds, 3, 3).unwrap();
    let hed = mitoclass::pixelpipe::compute_hed_stats(&ds);
    for mode in [InputMode::RgbHed, InputMode::CropRgbHed] {
        let arch = ArchConfig::desk(6, HardnessHeadMode::Binary);
        let cfg = desk_config(1, 41);
        let result = train(
            &ds,
            &assignment,
            0,
            &arch,
            &cfg,
            &AugPolicy::desk(),
            mode,
            Some(&hed),
            None,
        )
        .unwrap();
        assert_eq!(result.epochs_run, 1);
    }
}

// -- hyperparameter search ---------------------------------------------------

#[test]
fn zero_learning_rate_loses_to_a_real_one() {
    // planted-signal set, deliberately separable; a frozen model cannot beat
    // a trained one
    let ds = generate_synthetic(&SyntheticConfig {
        n_patches: 240,
        amf_rate: 0.3,
        hard_rate: 0.1,
        n_domains: 2,
        seed: 43,
    })
    .unwrap();
    let folds = stratified_kfold(&ds, 2, 9).unwrap();
    let arch = ArchConfig::desk(3, HardnessHeadMode::Binary);
    let base = TrainConfig {
        max_epochs: 12,
        seed: 47,
        ..TrainConfig::default()
    };
    let policy = AugPolicy::desk();

    let frozen = HpSample {
        alpha: 0.15,
        gamma: 2.0,
        lr: 0.0,
        dropout: 0.0,
    };
    let trained = HpSample {
        lr: 1e-3,
        ..frozen
    };
    let obj = |hp: &HpSample| -> f64 {
        let bas = run_trial(&ds, &folds, &arch, &base, &policy, InputMode::Rgb, None, hp).unwrap();
        bas.iter().sum::<f64>() / bas.len() as f64
    };
    let frozen_obj = obj(&frozen);
    let trained_obj = obj(&trained);
    assert!(
        trained_obj > frozen_obj,
        "lr=1e-3 ({trained_obj:.4}) must beat lr=0 ({frozen_obj:.4}) on planted data"
    );
}

#[test]
fn search_is_reproducible_and_best_dominates() {
    let ds = small_dataset(36, 53);
    let folds = stratified_kfold(&ds, 2, 5).unwrap();
    let arch = ArchConfig::desk(3, HardnessHeadMode::Binary);
    let base = desk_config(1, 59);
    let policy = AugPolicy::desk();
    let space = SearchSpace::default();

    let run = || {
        run_search(
            &ds,
            &folds,
            &arch,
            &base,
            &policy,
            InputMode::Rgb,
            None,
            &space,
            3,
            61,
        )
        .unwrap()
    };
    let (best_a, trials_a) = run();
    let (best_b, trials_b) = run();
    assert_eq!(best_a, best_b);
    assert_eq!(trials_a.len(), 3);
    for (a, b) in trials_a.iter().zip(&trials_b) {
        assert_eq!(a.trial_id, b.trial_id);
        assert_eq!(a.config, b.config);
        assert_eq!(a.objective, b.objective);
    }
    let best_obj = trials_a[best_a.unwrap()].objective.unwrap();
    for t in &trials_a {
        if let Some(o) = t.objective {
            assert!(best_obj >= o);
        }
    }
}

#[test]
fn failed_trials_leave_others_untouched() {
    let ds = small_dataset(24, 67);
    let folds = stratified_kfold(&ds, 2, 5).unwrap();
    let arch = ArchConfig::desk(3, HardnessHeadMode::Binary);
    let base = desk_config(1, 71);
    let policy = AugPolicy::desk();
    // gammas below zero are invalid focal parameters and fail their trial at
    // config validation; the rest of the range trains normally
    let space = SearchSpace {
        gamma: (-4.0, 4.0),
        ..SearchSpace::default()
    };
    let (best, trials) = run_search(
        &ds,
        &folds,
        &arch,
        &base,
        &policy,
        InputMode::Rgb,
        None,
        &space,
        6,
        73,
    )
    .unwrap();
    let failed: Vec<_> = trials.iter().filter(|t| t.status == TrialStatus::Failed).collect();
    let complete: Vec<_> = trials
        .iter()
        .filter(|t| t.status == TrialStatus::Complete)
        .collect();
    assert!(!failed.is_empty(), "expected at least one invalid gamma draw");
    assert!(!complete.is_empty(), "expected at least one valid gamma draw");
    for t in &failed {
        assert!(t.error.is_some());
        assert!(t.objective.is_none());
    }
    for t in &complete {
        assert!(t.error.is_none());
        assert_eq!(t.fold_balanced_accuracies.len(), folds.k());
    }
    let expected_best = complete
        .iter()
        .max_by(|a, b| a.objective.partial_cmp(&b.objective).unwrap())
        .map(|t| t.trial_id);
    assert_eq!(best, expected_best);
}

#[test]
fn fold_file_round_trip_preserves_assignment() {
    let ds = small_dataset(30, 79);
    let assignment = stratified_kfold(&ds, 3, 83).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("folds.csv");
    assignment.write(&path).unwrap();
    let loaded = FoldAssignment::load(&path).unwrap();
    assert_eq!(loaded, assignment);
    for r in ds.iter() {
        assert_eq!(loaded.fold_of(&r.patch_id), assignment.fold_of(&r.patch_id));
    }
}
