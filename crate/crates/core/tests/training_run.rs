use difftts_core::model::ModelConfig;
use difftts_core::training::{
    run_training, write_synthetic_corpus, LrSchedule, TrainConfig, TrainRun,
};

/// Mean residual over the last ten steps of the run below (0.0370 on the
/// first verified run), with headroom for floating-point differences across
/// platforms.
const RESIDUAL_FIXTURE: f64 = 0.045;

#[test]
fn toy_run_reaches_recorded_loss() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_synthetic_corpus(&dir.path().join("data"), 4, 8000, 800, 11).unwrap();
    let mut model = ModelConfig::toy(0);
    model.segment_length = 1024;
    let run = TrainRun {
        model,
        train: TrainConfig {
            steps: 150,
            batch_size: 4,
            learning_rate: 2e-3,
            lr_schedule: LrSchedule::InverseSqrt,
            warmup_steps: 20,
            checkpoint_every: 0,
            ..TrainConfig::default()
        },
        seed: 21,
    };
    let mut residuals = Vec::new();
    let outcome = run_training(&run, &manifest, &dir.path().join("ck"), false, |r| {
        residuals.push(r.residual)
    })
    .unwrap();
    assert_eq!(outcome.final_step, 150);
    assert_eq!(residuals.len(), 150);
    let head = residuals[..10].iter().sum::<f64>() / 10.0;
    let tail = residuals[140..].iter().sum::<f64>() / 10.0;
    println!("residual head {head:.6} tail {tail:.6}");
    assert!(
        tail < RESIDUAL_FIXTURE,
        "tail residual {tail} above fixture {RESIDUAL_FIXTURE}"
    );
    assert!(tail < head);
}
