use std::collections::BTreeSet;

use obsr_core::baselines::*;
use obsr_core::hexgrid::{cell_of, CellId};
use obsr_core::metrics::{DTW_DIST, H_DIST, SEQ_ACC};
use obsr_core::regionize::RegionRow;
use obsr_core::splitter::{
    segment_xy, split_regions, split_trajectories, SplitConfig, StratSource, DEFAULT_TARGET_FRACTION,
};
use obsr_core::synthdata::{coordinate_embeddings, embedding_task, generate, Link, SynthKind, SynthSpec};
use obsr_core::trajprep::{is_contiguous, prepare, GapConfig};
use obsr_nn::{Checkpoint, TrainConfig};

fn region_instance(link: Link, n: usize, sigma: f64, seed: u64) -> RegionTaskInstance {
    let task = embedding_task(n, 5, sigma, link, 9, seed).unwrap();
    let manifest = split_regions(&task.targets, &SplitConfig::new(9, StratSource::Target)).unwrap();
    RegionTaskInstance::new(task.embeddings, task.targets, manifest).unwrap()
}

fn walk_instance(kind: SynthKind, n: usize, lens: (usize, usize), task: SeqTask, seed: u64) -> SequenceTaskInstance {
    let mut spec = SynthSpec::new(kind, n, seed);
    spec.params.min_walk_length = Some(lens.0);
    spec.params.walk_length = lens.1;
    spec.params.cadence_s = 30.0;
    if kind == SynthKind::ConstantDirectionWalks {
        spec.params.direction = Some(2);
    }
    let walks = generate(&spec).unwrap().trajectories().unwrap();
    let (hex, _) = prepare(&walks, 9, GapConfig::default()).unwrap();
    let segs = hex
        .iter()
        .map(|h| segment_xy(h, DEFAULT_TARGET_FRACTION).unwrap())
        .collect();
    let manifest = split_trajectories(&hex, &SplitConfig::new(9, StratSource::Length)).unwrap();
    let cells = cell_of(spec.center, 9).unwrap().disk(50);
    SequenceTaskInstance::new(segs, coordinate_embeddings(&cells, spec.center), manifest, task).unwrap()
}

fn small_seq(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lstm_hidden: 16,
        attention_heads: 2,
        ..TrainConfig::hmp()
    }
}

#[test]
fn regression_report_has_table_metrics() {
    let inst = region_instance(Link::Identity, 100, 0.01, 11);
    let (model, report) = train_region_regressor(&inst, &TrainConfig::regression()).unwrap();
    for k in ["mse", "rmse", "mae", "mape", "smape"] {
        assert!(report.get(k).is_some(), "missing {k}");
    }
    assert_eq!(model.epoch_losses.len(), 50);
    assert!(model.epoch_losses[49] < model.epoch_losses[0]);
}

#[test]
fn constant_targets_fit_constant() {
    let mut inst = region_instance(Link::Identity, 60, 0.0, 3);
    for row in inst.targets.rows.values_mut() {
        row.target = 4.25;
    }
    let (_, report) = train_region_regressor(&inst, &TrainConfig::regression()).unwrap();
    assert!(report.get("mae").unwrap() < 1e-3, "{report:?}");
}

#[test]
fn standardizer_sees_train_cells_only() {
    let inst = region_instance(Link::Identity, 80, 0.0, 4);
    let test: BTreeSet<CellId> = inst.test_cells().iter().copied().collect();
    assert!(!test.is_empty());
    assert!(inst.fit_cells.is_disjoint(&test));

    // Corrupting test embeddings must not move the fitted statistics.
    let mut emb = inst.embeddings.clone();
    for c in &test {
        emb.vectors.insert(*c, vec![1e6; 5]);
    }
    let again = RegionTaskInstance::new(emb, inst.targets.clone(), inst.manifest.clone()).unwrap();
    assert_eq!(again.standardizer, inst.standardizer);
}

#[test]
fn missing_embeddings_fall_back_to_zero() {
    let inst = region_instance(Link::Identity, 40, 0.0, 5);
    let mut emb = inst.embeddings.clone();
    let gone = inst.test_cells()[0];
    emb.vectors.remove(&gone);
    let inst = RegionTaskInstance::new(emb, inst.targets.clone(), inst.manifest.clone()).unwrap();
    assert_eq!(inst.missing_embeddings, 1);
    assert_eq!(inst.raw_features(gone), vec![0.0; 5]);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::regression()
    };
    let (_, report) = train_region_regressor(&inst, &cfg).unwrap();
    assert_eq!(report.counts["zero_embeddings"], 1);
}

#[test]
fn dimension_mismatch_rejected() {
    let inst = region_instance(Link::Identity, 20, 0.0, 6);
    let mut emb = inst.embeddings.clone();
    let c = *emb.vectors.keys().next().unwrap();
    emb.vectors.insert(c, vec![0.0; 3]);
    assert!(matches!(
        RegionTaskInstance::new(emb, inst.targets.clone(), inst.manifest.clone()),
        Err(BaselineError::DimensionMismatch { .. })
    ));
}

#[test]
fn intensity_outputs_bounded_and_fit() {
    let inst = region_instance(Link::Sigmoid, 300, 0.0, 12);
    let (model, report) = train_intensity_model(&inst, &TrainConfig::intensity()).unwrap();
    let preds = model.predict_cells(&inst, inst.test_cells()).unwrap();
    assert!(preds.iter().all(|&p| p > 0.0 && p < 1.0));
    assert!(report.get("mape").is_none() && report.get("smape").is_none());
    assert!(report.get("r2").unwrap() > 0.8, "{report:?}");
}

#[test]
fn intensity_rejects_out_of_range_and_wrong_kind() {
    let mut inst = region_instance(Link::Sigmoid, 30, 0.0, 13);
    let c = inst.train_cells()[0];
    inst.targets.rows.insert(c, RegionRow { target: 1.5, support: 1 });
    assert!(matches!(
        train_intensity_model(&inst, &TrainConfig::intensity()),
        Err(BaselineError::TargetOutOfRange { .. })
    ));
    let price = region_instance(Link::Identity, 30, 0.0, 13);
    assert!(matches!(
        train_intensity_model(&price, &TrainConfig::intensity()),
        Err(BaselineError::WrongTargetKind { .. })
    ));
}

#[test]
fn training_is_deterministic_and_eval_reproducible() {
    let inst = region_instance(Link::Identity, 60, 0.01, 14);
    let cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::regression()
    };
    let (a, ra) = train_region_regressor(&inst, &cfg).unwrap();
    let (b, rb) = train_region_regressor(&inst, &cfg).unwrap();
    assert_eq!(a.epoch_losses, b.epoch_losses);
    assert_eq!(ra, rb);
    assert_eq!(a.evaluate(&inst).unwrap(), ra);
    let restored = RegionModel::from_checkpoint(&Checkpoint::from_json(&a.checkpoint().to_json()).unwrap()).unwrap();
    assert_eq!(restored.evaluate(&inst).unwrap(), ra);
}

#[test]
fn tte_single_trajectory_overfits() {
    let mut inst = walk_instance(SynthKind::RandomWalks, 12, (8, 12), SeqTask::Tte, 7);
    let keep = inst.manifest.train[0].clone();
    inst.manifest.train = vec![keep];
    let inst = SequenceTaskInstance::new(inst.trajectories, inst.embeddings, inst.manifest, SeqTask::Tte).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        lstm_hidden: 16,
        ..TrainConfig::tte()
    };
    let (model, report) = train_tte(&inst, &cfg).unwrap();
    let l = &model.epoch_losses;
    assert!(l.windows(2).all(|w| w[1] < w[0]), "{l:?}");
    assert!(report.get("mse").is_some() && report.get("mape").is_some());
}

#[test]
fn tte_predictions_non_negative_and_checkpointable() {
    let inst = walk_instance(SynthKind::RandomWalks, 30, (5, 12), SeqTask::Tte, 8);
    let cfg = TrainConfig {
        epochs: 3,
        lstm_hidden: 16,
        ..TrainConfig::tte()
    };
    let (model, report) = train_tte(&inst, &cfg).unwrap();
    let test: Vec<_> = inst.test_set().collect();
    let preds = model.predict(&inst, &test).unwrap();
    assert!(preds.iter().all(|p| p.is_finite() && *p >= 0.0));
    let restored = TteModel::from_checkpoint(&model.checkpoint()).unwrap();
    assert_eq!(restored.evaluate(&inst).unwrap(), report);
}

#[test]
fn tte_rejects_hmp_instance_and_bad_durations() {
    let inst = walk_instance(SynthKind::RandomWalks, 10, (5, 8), SeqTask::Hmp, 9);
    assert!(matches!(
        train_tte(&inst, &TrainConfig::tte()),
        Err(BaselineError::WrongTask { .. })
    ));
    let mut trajs = inst.trajectories.clone();
    trajs[0].x.duration_s = 0.0;
    assert!(matches!(
        SequenceTaskInstance::new(trajs, inst.embeddings, inst.manifest, SeqTask::Tte),
        Err(BaselineError::NonPositiveDuration(_))
    ));
}

#[test]
fn hmp_rollouts_contiguous_and_k1_metrics_agree() {
    let inst = walk_instance(SynthKind::RandomWalks, 40, (14, 24), SeqTask::Hmp, 10);
    let (model, reports) = train_hmp(&inst, &small_seq(2)).unwrap();
    assert_eq!(reports.len(), 5);
    assert_eq!(reports[0].k, Some(1));
    assert_eq!(reports[0].get(H_DIST), reports[0].get(DTW_DIST));
    for r in model.rollouts(&inst).unwrap() {
        assert_eq!(r.predicted.len(), r.gold.len());
        let start = segment_last(&inst, &r.id);
        let mut path = vec![start];
        path.extend(&r.predicted);
        assert!(is_contiguous(&path));
    }
    let again = HmpModel::from_checkpoint(&model.checkpoint()).unwrap();
    assert_eq!(again.evaluate(&inst, &[1, 3, 5, 7, 10]).unwrap(), reports);
}

fn segment_last(inst: &SequenceTaskInstance, id: &str) -> CellId {
    *inst
        .trajectories
        .iter()
        .find(|t| t.id == id)
        .unwrap()
        .x
        .cells
        .last()
        .unwrap()
}

#[test]
fn hmp_losses_deterministic() {
    let inst = walk_instance(SynthKind::RandomWalks, 20, (10, 16), SeqTask::Hmp, 11);
    let a = train_hmp_model(&inst, &small_seq(2)).unwrap();
    let b = train_hmp_model(&inst, &small_seq(2)).unwrap();
    assert_eq!(a.epoch_losses, b.epoch_losses);
}

#[test]
fn hmp_learns_constant_direction_small() {
    let inst = walk_instance(SynthKind::ConstantDirectionWalks, 60, (14, 24), SeqTask::Hmp, 12);
    let (_, reports) = train_hmp(&inst, &small_seq(30)).unwrap();
    assert!(reports[0].get(SEQ_ACC).unwrap() >= 95.0, "{reports:?}");
}
