//! Cross-module integration at small scale: dataset -> training ->
//! checkpoint -> sampling -> metrics, plus file-level resume equality and
//! the qualitative shape of the loss curve.

use dpbridge::bridge::BridgeCoefficients;
use dpbridge::codec::LinearCodec;
use dpbridge::dataset::{self, ScenarioConfig, Split, Task};
use dpbridge::evaluator::{depth_metrics, evaluate_set};
use dpbridge::sampler::{GMode, SamplerConfig};
use dpbridge::schedule::ScheduleParams;
use dpbridge::trainer::{Trainer, TrainConfig};
use dpbridge::Checkpoint;

fn small_scenario() -> ScenarioConfig {
    ScenarioConfig {
        height: 16,
        width: 16,
        n_train: 128,
        n_val: 16,
        n_test: 16,
        master_seed: 5,
        ..ScenarioConfig::default()
    }
}

fn small_train_config(iters: usize) -> TrainConfig {
    TrainConfig {
        seed: 5,
        total_iters: iters,
        hidden: 96,
        blocks: 2,
        time_embed: 16,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

fn small_schedule() -> ScheduleParams {
    ScheduleParams {
        t_max: 250,
        ..ScheduleParams::default()
    }
}

#[test]
fn end_to_end_files_training_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let scen = small_scenario();
    dataset::write_dataset(&scen, Task::Depth, &data_dir).unwrap();
    let entries = dataset::read_manifest(&data_dir).unwrap();
    let train_pairs = dataset::load_split(&data_dir, &entries, Split::Train).unwrap();
    let test_pairs = dataset::load_split(&data_dir, &entries, Split::Test).unwrap();

    let codec = LinearCodec::calibrated_default(16, 16, 1, 2).unwrap();
    let mut trainer = Trainer::new(
        small_schedule(),
        codec,
        Task::Depth,
        small_train_config(600),
    )
    .unwrap();
    let mut log = Vec::new();
    let ckpt_path = dir.path().join("model.dpbk");
    trainer.train(&train_pairs, Some(&ckpt_path), &mut log).unwrap();
    assert_eq!(log.len(), 600);

    // Reload from disk and run inference through the loaded model.
    let ckpt = Checkpoint::load(&ckpt_path).unwrap();
    assert_eq!(ckpt.iteration, 600);
    let schedule = ckpt.build_schedule().unwrap();
    let bridge = BridgeCoefficients::from_schedule(&schedule).unwrap();
    let codec = ckpt.build_codec().unwrap();
    let denoiser = ckpt.build_denoiser().unwrap();
    let cfg = SamplerConfig {
        n_steps: 10,
        g_mode: GMode::Deterministic,
        seed: 1,
        dan_enabled: ckpt.dan_enabled,
    };
    let row = evaluate_set(
        &denoiser,
        &bridge,
        &codec,
        &test_pairs,
        Task::Depth,
        &cfg,
        None,
        1,
    )
    .unwrap();
    assert!(row.absrel.is_finite() && row.absrel > 0.0);
    assert!(row.delta1 >= 0.0 && row.delta1 <= 1.0);

    // The trained model must beat an untrained one on the same protocol.
    let fresh = Trainer::new(
        small_schedule(),
        ckpt.build_codec().unwrap(),
        Task::Depth,
        small_train_config(1),
    )
    .unwrap();
    let untrained_row = evaluate_set(
        &fresh.denoiser,
        &bridge,
        &codec,
        &test_pairs,
        Task::Depth,
        &cfg,
        None,
        1,
    )
    .unwrap();
    assert!(
        row.absrel < untrained_row.absrel,
        "trained {} vs untrained {}",
        row.absrel,
        untrained_row.absrel
    );
}

#[test]
fn resume_from_checkpoint_file_matches_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let scen = small_scenario();
    let pairs: Vec<_> = (0..64)
        .map(|i| dataset::gen_pair(&scen, Task::Depth, scen.split_seed(Split::Train, i)).unwrap())
        .collect();

    let codec = LinearCodec::calibrated_default(16, 16, 1, 2).unwrap();
    let mut straight = Trainer::new(
        small_schedule(),
        codec.clone(),
        Task::Depth,
        small_train_config(40),
    )
    .unwrap();
    let mut log = Vec::new();
    straight.train(&pairs, None, &mut log).unwrap();

    let mut first_half = Trainer::new(
        small_schedule(),
        codec,
        Task::Depth,
        small_train_config(20),
    )
    .unwrap();
    let mut log2 = Vec::new();
    first_half.train(&pairs, None, &mut log2).unwrap();
    let path = dir.path().join("half.dpbk");
    first_half.checkpoint().save(&path).unwrap();

    let loaded = Checkpoint::load(&path).unwrap();
    let mut resumed = Trainer::from_checkpoint(&loaded, small_train_config(40)).unwrap();
    let mut log3 = Vec::new();
    resumed.train(&pairs, None, &mut log3).unwrap();

    for (a, b) in straight.denoiser.theta().iter().zip(resumed.denoiser.theta()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn loss_curve_decreases_under_moving_average() {
    let scen = small_scenario();
    let pairs: Vec<_> = (0..scen.n_train)
        .map(|i| dataset::gen_pair(&scen, Task::Depth, scen.split_seed(Split::Train, i)).unwrap())
        .collect();
    let codec = LinearCodec::calibrated_default(16, 16, 1, 2).unwrap();
    let mut trainer = Trainer::new(
        small_schedule(),
        codec,
        Task::Depth,
        small_train_config(600),
    )
    .unwrap();
    let mut log = Vec::new();
    trainer.train(&pairs, None, &mut log).unwrap();

    let window = 100;
    let means: Vec<f64> = log
        .chunks(window)
        .map(|c| c.iter().map(|r| r.elbo_loss).sum::<f64>() / c.len() as f64)
        .collect();
    for w in means.windows(2) {
        assert!(
            w[1] < w[0] + 0.02,
            "moving average increased: {:?}",
            means
        );
    }
    assert!(
        *means.last().unwrap() < means[0],
        "no overall decrease: {means:?}"
    );
}

#[test]
fn normal_task_end_to_end() {
    let scen = ScenarioConfig {
        height: 16,
        width: 16,
        n_train: 96,
        n_test: 8,
        master_seed: 9,
        ..ScenarioConfig::default()
    };
    let pairs: Vec<_> = (0..scen.n_train)
        .map(|i| dataset::gen_pair(&scen, Task::Normal, scen.split_seed(Split::Train, i)).unwrap())
        .collect();
    let test: Vec<_> = (0..scen.n_test)
        .map(|i| dataset::gen_pair(&scen, Task::Normal, scen.split_seed(Split::Test, i)).unwrap())
        .collect();
    let codec = LinearCodec::calibrated_default(16, 16, 3, 2).unwrap();
    let mut cfg = small_train_config(400);
    cfg.seed = 9;
    let mut trainer = Trainer::new(small_schedule(), codec, Task::Normal, cfg).unwrap();
    let mut log = Vec::new();
    trainer.train(&pairs, None, &mut log).unwrap();
    assert!(log.last().unwrap().elbo_loss < log.first().unwrap().elbo_loss);

    let cfg = SamplerConfig {
        n_steps: 10,
        g_mode: GMode::Deterministic,
        seed: 2,
        dan_enabled: true,
    };
    let row = evaluate_set(
        &trainer.denoiser,
        &trainer.bridge,
        &trainer.codec,
        &test,
        Task::Normal,
        &cfg,
        None,
        2,
    )
    .unwrap();
    assert!(row.mean_angle.is_finite());
    assert!(row.mean_angle >= 0.0 && row.mean_angle <= 180.0);
    assert!(row.pct11_25 >= 0.0 && row.pct11_25 <= 1.0);
}

#[test]
fn depth_metrics_integrate_with_generated_scenes() {
    // Generator output plugs into the metric stack: perfect predictions give
    // zero error, the constant baseline does not.
    let scen = small_scenario();
    let pair = dataset::gen_pair(&scen, Task::Depth, 3).unwrap();
    let perfect = depth_metrics(&pair.y, &pair.y, None).unwrap();
    assert!(perfect.absrel < 1e-12);
    assert_eq!(perfect.delta1, 1.0);
}
