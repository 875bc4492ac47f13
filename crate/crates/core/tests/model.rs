use locattn::bench::{evaluate, generation_budget};
use locattn::gmm::GmmVariant;
use locattn::model::{
    load_checkpoint, save_checkpoint, stream, train, Mechanism, ModelConfig, Seq2Seq, SyntheticTask, TaskConfig,
    TrainConfig, STREAM_INIT,
};
use locattn::numerics::Tape;
use locattn::Error;

fn one_symbol_task() -> SyntheticTask {
    SyntheticTask::new(TaskConfig {
        symbols: 1,
        min_frames: 1,
        max_frames: 1,
        noise_std: 0.0,
        min_len: 1,
        max_len: 1,
        ..TaskConfig::default()
    })
    .unwrap()
}

#[test]
fn every_mechanism_fits_a_single_frame() {
    let task = one_symbol_task();
    let config = TrainConfig {
        steps: 500,
        eval_interval: 0,
        ..TrainConfig::default()
    };
    for mech in Mechanism::ALL {
        let mut model = Seq2Seq::<f64>::new(ModelConfig::desk(mech, task.vocab()), &mut stream(3, STREAM_INIT)).unwrap();
        let report = train(&mut model, &task, &config, 3, |_, _| Ok(true)).unwrap();
        let last = *report.losses.last().unwrap();
        assert!(last < 1e-3, "{mech}: loss {last} after 500 steps");
    }
}

fn loss_curve(mech: Mechanism, seed: u64) -> Vec<f64> {
    let task = SyntheticTask::new(TaskConfig::default()).unwrap();
    let mut model = Seq2Seq::<f64>::new(ModelConfig::desk(mech, task.vocab()), &mut stream(seed, STREAM_INIT)).unwrap();
    let config = TrainConfig {
        steps: 15,
        eval_interval: 0,
        ..TrainConfig::default()
    };
    train(&mut model, &task, &config, seed, |_, _| Ok(true)).unwrap().losses
}

#[test]
fn loss_curves_are_bit_identical_across_runs() {
    for mech in [Mechanism::Lsa, Mechanism::Dca, Mechanism::Gmm(GmmVariant::V2B)] {
        let a = loss_curve(mech, 11);
        let b = loss_curve(mech, 11);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(a, loss_curve(mech, 12));
    }
}

#[test]
fn training_reduces_loss() {
    let curve = loss_curve(Mechanism::Dca, 4);
    let head: f64 = curve[..3].iter().sum::<f64>() / 3.0;
    let tail: f64 = curve[curve.len() - 3..].iter().sum::<f64>() / 3.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn hook_can_stop_training_early() {
    let task = SyntheticTask::new(TaskConfig::default()).unwrap();
    let mut model = Seq2Seq::<f32>::new(ModelConfig::desk(Mechanism::Cba, task.vocab()), &mut stream(1, STREAM_INIT)).unwrap();
    let config = TrainConfig {
        steps: 100,
        eval_interval: 0,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &task, &config, 1, |ev, _| Ok(ev.step < 4)).unwrap();
    assert!(!report.completed);
    assert_eq!(report.losses.len(), 4);
}

#[test]
fn runaway_learning_rate_is_reported_as_divergence() {
    let task = SyntheticTask::new(TaskConfig::default()).unwrap();
    let mut model = Seq2Seq::<f32>::new(ModelConfig::desk(Mechanism::Lsa, task.vocab()), &mut stream(1, STREAM_INIT)).unwrap();
    let config = TrainConfig {
        steps: 50,
        learning_rate: 1e30,
        final_learning_rate: 1e30,
        clip_norm: 1e30,
        eval_interval: 0,
        ..TrainConfig::default()
    };
    let err = train(&mut model, &task, &config, 1, |_, _| Ok(true)).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
}

#[test]
fn mismatched_task_is_rejected() {
    let task = SyntheticTask::new(TaskConfig::default()).unwrap();
    let mut config = ModelConfig::desk(Mechanism::Dca, task.vocab());
    config.feat_dim = 5;
    let mut model = Seq2Seq::<f64>::new(config, &mut stream(1, STREAM_INIT)).unwrap();
    assert!(train(&mut model, &task, &TrainConfig::default(), 1, |_, _| Ok(true)).is_err());
}

#[test]
fn generation_respects_budget_and_reports_trace() {
    let task = SyntheticTask::new(TaskConfig::default()).unwrap();
    let model = Seq2Seq::<f64>::new(ModelConfig::desk(Mechanism::Cba, task.vocab()), &mut stream(2, STREAM_INIT)).unwrap();
    let symbols = [1, 2, 3, 4, 5, 6];
    let budget = generation_budget(&model, &task, &symbols, 3.0);
    assert_eq!(budget, 3 * model.steps_for(task.nominal_frames(&symbols)));
    let gen = model.generate(&symbols, budget, 2).unwrap();
    assert!(gen.trace.steps() <= budget);
    assert_eq!(gen.frames.len(), gen.trace.steps() * model.config.frames_per_step);
    assert!(gen.trace.alignments.iter().all(|a| a.len() == symbols.len()));
    if !gen.trace.reached_end {
        assert_eq!(gen.trace.steps(), budget);
    }
    assert!(model.generate(&symbols, 0, 2).is_err());
    assert!(model.generate(&[], 5, 2).is_err());
}

#[test]
fn location_relative_models_walk_to_the_end_untrained() {
    // A fresh DCA or biased GMM model already advances monotonically.
    let task = SyntheticTask::new(TaskConfig::default()).unwrap();
    let holdout = task.holdout(4, 77);
    for mech in [Mechanism::Dca, Mechanism::Gmm(GmmVariant::V2B)] {
        let model = Seq2Seq::<f64>::new(ModelConfig::desk(mech, task.vocab()), &mut stream(5, STREAM_INIT)).unwrap();
        let e = evaluate(&model, &task, &holdout, 3.0, 2).unwrap();
        assert_eq!(e.max_violations, 0, "{mech}");
        assert!(e.min_coverage > 0.9, "{mech}: {e:?}");
    }
}

#[test]
fn checkpoint_file_roundtrip_preserves_behaviour() {
    let task = SyntheticTask::new(TaskConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for mech in [Mechanism::Lsa, Mechanism::Gmm(GmmVariant::V1B)] {
        let model = Seq2Seq::<f32>::new(ModelConfig::desk(mech, task.vocab()), &mut stream(8, STREAM_INIT)).unwrap();
        let path = dir.path().join(format!("{mech}.ckpt"));
        save_checkpoint(&model, &path).unwrap();
        let back: Seq2Seq<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, model.config);
        let symbols = [3, 1, 4, 1, 5];
        let a = model.generate(&symbols, 12, 2).unwrap();
        let b = back.generate(&symbols, 12, 2).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.trace.peaks, b.trace.peaks);
    }
}

#[test]
fn teacher_forced_alignments_cover_every_step() {
    let task = SyntheticTask::new(TaskConfig::default()).unwrap();
    let mut rng = stream(9, 1);
    let example = task.sample(&mut rng);
    for mech in Mechanism::ALL {
        let model = Seq2Seq::<f64>::new(ModelConfig::desk(mech, task.vocab()), &mut stream(9, STREAM_INIT)).unwrap();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape);
        let pass = model.forward_loss(&mut tape, &p, &example, None).unwrap();
        assert_eq!(pass.alphas.len(), model.steps_for(example.frames.len()));
        assert!(tape.scalar(pass.loss).is_finite());
    }
}
