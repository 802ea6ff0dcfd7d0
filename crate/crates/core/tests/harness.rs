use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use selectfusion::harness::{
    evaluate, fit, load_checkpoint, parse_masks_csv, parse_metrics_csv, run_evaluation, run_training, save_checkpoint,
    score, DataPaths, EpisodePrediction, ExperimentConfig, FusionChoice, HarnessError, RunPaths, Task,
};
use selectfusion::simulator::{
    generate_split, write_episodes, DatasetConfig, DatasetHeader, Episode, MotionProfile, NoiseConfig, SimConfig, Split,
};

fn small_dataset(seed: u64, frames: usize) -> DatasetConfig {
    DatasetConfig {
        sim: SimConfig {
            frames,
            obs_dim: 8,
            window: 4,
            ..Default::default()
        },
        train_episodes: 4,
        val_episodes: 2,
        test_episodes: 2,
        seed,
    }
}

fn small_config(fusion: FusionChoice, task: Task) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        fusion,
        task,
        seed: 3,
        ..Default::default()
    };
    cfg.model.d = 4;
    cfg.model.obs_dim = 8;
    cfg.model.encoder_a_hidden = vec![8];
    cfg.model.encoder_b_hidden = 4;
    cfg.model.temporal_hidden = 6;
    cfg.train.epochs = 3;
    cfg.train.batch_size = 2;
    cfg.train.lr = 1e-3;
    cfg.train.eval_seeds = 2;
    cfg
}

fn write_split(path: &Path, ds: &DatasetConfig, split: Split, episodes: &[Episode]) {
    let mut w = BufWriter::new(File::create(path).unwrap());
    write_episodes(&mut w, &DatasetHeader::new(split, ds.clone()), episodes).unwrap();
}

fn write_dataset(dir: &Path, ds: &DatasetConfig) -> DataPaths {
    for split in [Split::Train, Split::Val, Split::Test] {
        write_split(&dir.join(split.file_name()), ds, split, &generate_split(ds, split).unwrap());
    }
    DataPaths::in_dir(dir)
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let ds = small_dataset(1, 12);
    let train = generate_split(&ds, Split::Train).unwrap();
    for fusion in FusionChoice::ALL {
        let mut cfg = small_config(fusion, Task::RelativeOdometry);
        cfg.train.lr = 0.0;
        let before = selectfusion::harness::Model::build(&cfg).unwrap().store.flat_values();
        let out = fit(&cfg, &train, &[], &mut |_| {}).unwrap();
        assert_eq!(out.model.store.flat_values(), before, "{fusion:?}");
    }
}

#[test]
fn training_is_deterministic() {
    let ds = small_dataset(2, 12);
    let train = generate_split(&ds, Split::Train).unwrap();
    let val = generate_split(&ds, Split::Val).unwrap();
    let cfg = small_config(FusionChoice::Hard, Task::RelativeOdometry);
    let a = fit(&cfg, &train, &val, &mut |_| {}).unwrap();
    let b = fit(&cfg, &train, &val, &mut |_| {}).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.store.flat_values(), b.model.store.flat_values());
    assert_eq!(a.best_epoch, b.best_epoch);
}

#[test]
fn checkpoint_round_trip_reproduces_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(4, 12);
    let train = generate_split(&ds, Split::Train).unwrap();
    let test = generate_split(&ds, Split::Test).unwrap();
    for task in [Task::RelativeOdometry, Task::GlobalRelocalization] {
        let cfg = small_config(FusionChoice::Hard, task);
        let out = fit(&cfg, &train, &[], &mut |_| {}).unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &out.model.store, &cfg, 2).unwrap();
        let (loaded, epoch) = load_checkpoint(&path).unwrap();
        assert_eq!(epoch, 2);
        assert_eq!(loaded.config, cfg);
        assert_eq!(evaluate(&loaded, &test).unwrap(), evaluate(&out.model, &test).unwrap());
    }
}

fn constant_velocity_episodes() -> Vec<Episode> {
    let ds = DatasetConfig {
        sim: SimConfig {
            frames: 30,
            obs_dim: 8,
            window: 4,
            profile: MotionProfile::ConstantVelocity {
                velocity: [0.6, 0.8, 0.0],
                yaw_rate: 0.0,
            },
            noise: NoiseConfig::noiseless(),
            ..Default::default()
        },
        ..small_dataset(5, 30)
    };
    generate_split(&ds, Split::Test).unwrap()
}

#[test]
fn zero_prediction_error_equals_step_length() {
    let eps = constant_velocity_episodes();
    let preds: Vec<EpisodePrediction> = eps
        .iter()
        .map(|e| EpisodePrediction {
            episode: e.id,
            rows: vec![vec![0.0; 6]; e.len() - 1],
        })
        .collect();
    let s = score(Task::RelativeOdometry, &eps, &preds).unwrap();
    assert!((s.t_rmse - 1.0).abs() < 1e-12, "{}", s.t_rmse);
    assert!(s.r_rmse.abs() < 1e-12);
    // standing still loses the whole segment: 100 % translation drift
    let drift = s.drift.unwrap();
    assert!((drift.t_rel - 100.0).abs() < 1e-9, "{}", drift.t_rel);
}

#[test]
fn ground_truth_predictions_score_zero() {
    let eps = constant_velocity_episodes();
    let rel: Vec<EpisodePrediction> = eps
        .iter()
        .map(|e| EpisodePrediction {
            episode: e.id,
            rows: e.gt_relative.iter().map(|r| r.to_array().to_vec()).collect(),
        })
        .collect();
    let s = score(Task::RelativeOdometry, &eps, &rel).unwrap();
    assert!(s.t_rmse < 1e-12 && s.r_rmse < 1e-12);
    assert!(s.drift.unwrap().t_rel < 1e-9);

    let glob: Vec<EpisodePrediction> = eps
        .iter()
        .map(|e| EpisodePrediction {
            episode: e.id,
            rows: e.gt_global[1..].iter().map(|g| g.to_array().to_vec()).collect(),
        })
        .collect();
    let s = score(Task::GlobalRelocalization, &eps, &glob).unwrap();
    assert!(s.t_rmse < 1e-12 && s.r_rmse < 1e-6);
}

fn brute_rmse(eps: &[Episode], preds: &[EpisodePrediction]) -> (f64, f64) {
    let (mut t, mut r, mut n) = (0.0, 0.0, 0.0);
    for (e, p) in eps.iter().zip(preds) {
        for (row, gt) in p.rows.iter().zip(&e.gt_relative) {
            let g = gt.to_array();
            t += (0..3).map(|i| (row[i] - g[i]).powi(2)).sum::<f64>();
            r += (3..6).map(|i| (row[i] - g[i]).powi(2)).sum::<f64>();
            n += 1.0;
        }
    }
    ((t / n).sqrt(), (r / n).sqrt() * 180.0 / std::f64::consts::PI)
}

#[test]
fn evaluation_agrees_with_its_own_predictions() {
    let ds = small_dataset(6, 15);
    let train = generate_split(&ds, Split::Train).unwrap();
    let test = generate_split(&ds, Split::Test).unwrap();
    let cfg = small_config(FusionChoice::Soft, Task::RelativeOdometry);
    let out = fit(&cfg, &train, &[], &mut |_| {}).unwrap();
    let ev = evaluate(&out.model, &test).unwrap();
    assert_eq!(ev.passes.len(), 1);
    let (t, r) = brute_rmse(&test, &ev.predictions);
    assert!((ev.scores.t_rmse - t).abs() < 1e-9);
    assert!((ev.scores.r_rmse - r).abs() < 1e-9);
    assert_eq!(ev.masks.len(), test.iter().map(|e| e.len() - 1).sum::<usize>());
}

#[test]
fn hard_evaluation_reports_spread_over_passes() {
    let ds = small_dataset(7, 12);
    let train = generate_split(&ds, Split::Train).unwrap();
    let test = generate_split(&ds, Split::Test).unwrap();
    let cfg = small_config(FusionChoice::Hard, Task::RelativeOdometry);
    let out = fit(&cfg, &train, &[], &mut |_| {}).unwrap();
    let ev = evaluate(&out.model, &test).unwrap();
    assert_eq!(ev.passes.len(), 2);
    let mean = ev.passes.iter().map(|p| p.t_rmse).sum::<f64>() / 2.0;
    assert!((ev.scores.t_rmse - mean).abs() < 1e-12);
    let (t, _) = brute_rmse(&test, &ev.predictions);
    assert!((ev.passes[0].t_rmse - t).abs() < 1e-9);
}

#[test]
fn run_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(8, 12);
    let mut cfg = small_config(FusionChoice::Hard, Task::RelativeOdometry);
    cfg.data = write_dataset(dir.path(), &ds);
    let run = dir.path().join("run");
    let out = run_training(&cfg, &run, &mut |_| {}).unwrap();
    let paths = RunPaths::new(&run);
    assert!(paths.config().exists() && paths.final_checkpoint().exists() && paths.best_checkpoint().exists());
    let ev = run_evaluation(&paths.best_checkpoint(), &cfg.data.test, &run).unwrap();

    let rows = parse_metrics_csv(&std::fs::read_to_string(paths.metrics()).unwrap()).unwrap();
    let train_rows = rows.iter().filter(|r| r.section == "train" && r.metric == "loss").count();
    assert_eq!(train_rows, out.history.len());
    let t = rows.iter().find(|r| r.section == "test" && r.metric == "t_rmse").unwrap();
    assert_eq!(t.value, ev.scores.t_rmse);

    let masks = parse_masks_csv(&std::fs::read_to_string(paths.masks()).unwrap()).unwrap();
    assert_eq!(masks, ev.masks);
    assert!(paths.predictions().exists() && paths.mask_report().exists());

    // evaluating again replaces the test rows instead of appending
    run_evaluation(&paths.best_checkpoint(), &cfg.data.test, &run).unwrap();
    let again = parse_metrics_csv(&std::fs::read_to_string(paths.metrics()).unwrap()).unwrap();
    assert_eq!(again, rows);
}

#[test]
fn overlapping_splits_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(9, 10);
    let mut cfg = small_config(FusionChoice::Direct, Task::RelativeOdometry);
    cfg.data = write_dataset(dir.path(), &ds);
    let train = generate_split(&ds, Split::Train).unwrap();
    write_split(&cfg.data.val, &ds, Split::Val, &train[..1]);
    let err = run_training(&cfg, &dir.path().join("run"), &mut |_| {}).unwrap_err();
    assert!(matches!(err, HarnessError::SplitOverlap { id: 0, .. }), "{err}");
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(FusionChoice::Direct, Task::RelativeOdometry);
    cfg.data = DataPaths::in_dir(dir.path().join("nowhere"));
    let err = run_training(&cfg, &dir.path().join("run"), &mut |_| {}).unwrap_err();
    assert!(matches!(err, HarnessError::DatasetMissing(_)), "{err}");
}

#[test]
fn exploding_loss_stops_training() {
    let ds = small_dataset(10, 10);
    let train = generate_split(&ds, Split::Train).unwrap();
    let mut cfg = small_config(FusionChoice::Direct, Task::RelativeOdometry);
    cfg.loss.lambda_relative = 1e308;
    cfg.loss.norm = selectfusion::geometry::PoseNorm::Squared;
    let err = fit(&cfg, &train, &[], &mut |_| {}).unwrap_err();
    assert!(matches!(err, HarnessError::DivergedLoss { epoch: 0, .. }), "{err}");
}

#[test]
fn config_toml_round_trip() {
    let cfg = small_config(FusionChoice::Soft, Task::GlobalRelocalization);
    let text = cfg.to_toml().unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    assert!(ExperimentConfig::from_toml(&format!("{text}\nbogus = 1\n")).is_err());
}

