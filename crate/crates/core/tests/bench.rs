use std::path::Path;
use std::sync::Mutex;

use locattn::bench::{
    coverage_by_length, export_table, failure_onset, median_success_step, parse_config_str, read_json_table,
    run_length_sweep, run_trials, BenchConfig, CsvAppender, Format, Metadata, RunSummary, SweepRow, SweepSpec,
    Table, TrialRow,
};
use locattn::gmm::GmmVariant;
use locattn::model::{Mechanism, SyntheticTask};

fn small_config(text: &str) -> BenchConfig {
    let mut c = BenchConfig::default();
    let base = "seeds = 2\nsteps = 6\neval_interval = 3\nholdout = 2\nmechanisms = DCA, CBA\n";
    c.apply(&parse_config_str(base, Path::new(".")).unwrap()).unwrap();
    c.apply(&parse_config_str(text, Path::new(".")).unwrap()).unwrap();
    c
}

fn strip_wall_time(rows: &[TrialRow]) -> Vec<TrialRow> {
    rows.iter()
        .cloned()
        .map(|mut r| {
            r.wall_time_s = 0.0;
            r
        })
        .collect()
}

#[test]
fn trials_emit_rows_at_every_evaluation() {
    let config = small_config("");
    let seen = Mutex::new(0usize);
    let sink = |_: &TrialRow| {
        *seen.lock().unwrap() += 1;
        Ok(())
    };
    let out = run_trials::<f32>(&config, Some(&sink)).unwrap();
    // Steps 0, 3, 6 for 2 mechanisms × 2 seeds.
    assert_eq!(out.rows.len(), 12);
    assert_eq!(*seen.lock().unwrap(), 12);
    assert_eq!(out.runs.len(), 4);
    assert_eq!(out.models.len(), 4);
    for run in &out.runs {
        assert_eq!(run.status, "ok");
        assert_eq!(run.steps_completed, 6);
        assert!(run.initial_mcd_dtw.is_some() && run.final_mcd_dtw.is_some());
    }
    let steps: Vec<usize> = out.rows.iter().filter(|r| r.mechanism == "DCA" && r.seed == 1).map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 3, 6]);
    assert!(out.rows.iter().filter(|r| r.step == 0).all(|r| r.train_loss.is_none()));
    assert!(out.rows.iter().filter(|r| r.step > 0).all(|r| r.train_loss.is_some()));
}

#[test]
fn trials_are_reproducible_regardless_of_parallelism() {
    let serial = run_trials::<f64>(&small_config("parallelism = 1"), None).unwrap();
    let parallel = run_trials::<f64>(&small_config("parallelism = 3"), None).unwrap();
    assert_eq!(strip_wall_time(&serial.rows), strip_wall_time(&parallel.rows));
}

#[test]
fn diverging_runs_are_recorded_without_aborting_the_batch() {
    let config = small_config("train.learning_rate = 1e30\ntrain.final_learning_rate = 1e30\ntrain.clip_norm = 1e30");
    let out = run_trials::<f32>(&config, None).unwrap();
    assert_eq!(out.runs.len(), 4);
    let failed: Vec<&RunSummary> = out.runs.iter().filter(|r| r.status == "failed").collect();
    assert!(!failed.is_empty());
    for run in &failed {
        assert!(run.error.as_deref().unwrap().starts_with("diverged"), "{:?}", run.error);
    }
    let failed_rows: Vec<&TrialRow> = out.rows.iter().filter(|r| r.status == "failed").collect();
    assert_eq!(failed_rows.len(), failed.len());
    for r in failed_rows {
        assert!(r.mcd_dtw.is_none() && r.coverage.is_none() && r.error.is_some());
    }
    assert_eq!(out.models.len(), out.runs.len() - failed.len());
}

#[test]
fn sweep_covers_every_model_length_and_sample() {
    let config = small_config("mechanisms = GMMv2b\nseeds = 1\nsweep.multipliers = 1, 2\nsweep.samples = 2");
    let out = run_trials::<f32>(&config, None).unwrap();
    let task = SyntheticTask::new(config.task.clone()).unwrap();
    let spec = SweepSpec {
        lengths: config.sweep_lengths(),
        samples: config.sweep_samples,
        sample_seed: config.sweep_seed,
        tail_steps: config.tail_steps,
        max_steps_factor: config.max_steps_factor,
        parallelism: 1,
    };
    assert_eq!(spec.lengths, vec![12, 24]);
    let rows = run_length_sweep(&out.models, &task, &spec).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r.train_max_len, 12);
        assert_eq!(r.beyond_train, r.length > 12);
        assert!(r.decoder_steps <= r.max_steps);
        assert!((0.0..=1.0).contains(&r.coverage));
    }
    let again = run_length_sweep(&out.models, &task, &spec).unwrap();
    assert_eq!(rows, again);
}

#[test]
fn sweep_rejects_untrained_models() {
    let config = small_config("mechanisms = DCA\nseeds = 1\nsteps = 0");
    let out = run_trials::<f32>(&config, None).unwrap();
    let task = SyntheticTask::new(config.task.clone()).unwrap();
    let spec = SweepSpec {
        lengths: vec![4],
        samples: 1,
        sample_seed: 1,
        tail_steps: 2,
        max_steps_factor: 3.0,
        parallelism: 1,
    };
    assert!(run_length_sweep(&out.models, &task, &spec).is_err());
}

fn sweep_row(mechanism: &str, length: usize, coverage: f64) -> SweepRow {
    SweepRow {
        mechanism: mechanism.into(),
        seed: 1,
        length,
        multiplier: length as f64 / 10.0,
        sample: 0,
        coverage,
        violations: 0,
        stalls: 0,
        reached_end: coverage >= 1.0,
        decoder_steps: 1,
        max_steps: 1,
        train_max_len: 10,
        beyond_train: length > 10,
    }
}

#[test]
fn onset_is_first_length_below_threshold() {
    let rows = vec![
        sweep_row("CBA", 10, 0.9),
        sweep_row("CBA", 20, 0.3),
        sweep_row("CBA", 20, 0.5),
        sweep_row("CBA", 30, 0.6),
        sweep_row("LSA", 10, 1.0),
        sweep_row("LSA", 20, 1.0),
    ];
    let table = coverage_by_length(&rows);
    assert!((table[&("CBA".to_string(), 20)] - 0.4).abs() < 1e-12);
    assert_eq!(failure_onset(&rows, "CBA", 0.5), Some(20));
    assert_eq!(failure_onset(&rows, "LSA", 0.5), None);
}

fn summary(mechanism: &str, success_step: Option<usize>) -> RunSummary {
    RunSummary {
        mechanism: mechanism.into(),
        seed: 0,
        status: "ok".into(),
        steps_completed: 100,
        success_step,
        initial_mcd_dtw: None,
        final_mcd_dtw: None,
        final_coverage: None,
        final_alignment_accuracy: None,
        wall_time_s: 0.0,
        error: None,
    }
}

#[test]
fn median_counts_unsuccessful_runs_as_slowest() {
    let runs = vec![
        summary("LSA", Some(100)),
        summary("LSA", None),
        summary("LSA", Some(50)),
        summary("DCA", None),
        summary("DCA", None),
        summary("DCA", Some(0)),
        summary("GMMv2b", Some(0)),
        summary("GMMv2b", Some(50)),
    ];
    assert_eq!(median_success_step(&runs, Mechanism::Lsa), Some(100.0));
    assert_eq!(median_success_step(&runs, Mechanism::Dca), None);
    assert_eq!(median_success_step(&runs, Mechanism::Gmm(GmmVariant::V2B)), Some(25.0));
    assert_eq!(median_success_step(&runs, Mechanism::Cba), None);
}

#[test]
fn exported_tables_roundtrip_with_stable_columns() {
    let config = small_config("mechanisms = LSA\nseeds = 1");
    let out = run_trials::<f32>(&config, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let meta = Metadata {
        config_text: "mechanisms = LSA\n".into(),
        settings: serde_json::to_value(&config).unwrap(),
        notes: vec!["note".into()],
    };
    let table = Table::new("trials", meta, out.rows.clone());
    let json = export_table(&table, dir.path(), Format::Json).unwrap();
    let csv_path = export_table(&table, dir.path(), Format::Csv).unwrap();
    let back: Table<TrialRow> = read_json_table(&json).unwrap();
    assert_eq!(back.rows, out.rows);
    assert_eq!(back.metadata.config_text, "mechanisms = LSA\n");

    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    let header = reader.headers().unwrap().clone();
    assert_eq!(&header[0], "schema_version");
    for rec in reader.records() {
        assert_eq!(rec.unwrap().len(), header.len());
    }
}

#[test]
fn appender_rows_survive_without_finishing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("partial.csv");
    let appender = CsvAppender::create(&path).unwrap();
    let config = small_config("mechanisms = DCA\nseeds = 1");
    let sink = |row: &TrialRow| appender.append(row);
    let out = run_trials::<f32>(&config, Some(&sink)).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), out.rows.len() + 1);
}
