use scroll::adapter::{AdaptConfig, AdaptMode};
use scroll::embed_store::{save_embeddings, synthesize, SyntheticSpec, TableFormat};
use scroll::harness::*;
use scroll::replay_buffer::BufferStrategy;
use scroll::schedule::{ScheduleKind, ScheduleSpec};
use scroll::ScrollError;

fn spec(seed: u64) -> SyntheticSpec {
    let mut s = SyntheticSpec::new(6, 16, 30, seed);
    s.cluster_spread = 0.2;
    s.shift_strength = 0.1;
    s
}

fn config(classifier: ClassifierConfig, capacity: usize, mode: AdaptMode) -> ExperimentConfig {
    ExperimentConfig {
        data: DataSource::Synthetic(spec(1)),
        schedule: ScheduleSpec::new(ScheduleKind::ClassSplit { classes_per_batch: 2 }, 5),
        classifier,
        buffer: BufferConfig {
            capacity,
            strategy: BufferStrategy::Exemplar,
            seed: 2,
        },
        adapt: AdaptConfig {
            mode,
            epochs: 5,
            ..AdaptConfig::default()
        },
        checkpoints: vec![],
        study: None,
        seed: 0,
    }
}

#[test]
fn separable_data_gives_high_ridge_accuracy() {
    let mut s = SyntheticSpec::new(10, 64, 100, 4);
    s.cluster_spread = 0.05;
    let mut cfg = config(ClassifierConfig::Ridge { lambda: 1.0 }, 0, AdaptMode::None);
    cfg.data = DataSource::Synthetic(s);
    cfg.schedule = ScheduleSpec::new(ScheduleKind::SingleBatch, 0);
    let report = run(&cfg).unwrap().report;
    assert!(report.f_t.accuracy >= 0.95, "{}", report.f_t.accuracy);
}

#[test]
fn memory_free_run_reports_equal_predictors() {
    for classifier in [ClassifierConfig::Ncc, ClassifierConfig::Ridge { lambda: 1.0 }] {
        let report = run(&config(classifier, 0, AdaptMode::None)).unwrap().report;
        assert_eq!(report.f_t, report.f_star);
        assert_eq!(report.buffer.size, 0);
    }
}

#[test]
fn split_sizes_do_not_change_stage_one_accuracy() {
    let mut a = config(ClassifierConfig::Ridge { lambda: 1.0 }, 0, AdaptMode::None);
    let mut b = a.clone();
    a.schedule = ScheduleSpec::new(ScheduleKind::ClassSplit { classes_per_batch: 2 }, 1);
    b.schedule = ScheduleSpec::new(ScheduleKind::ClassSplit { classes_per_batch: 3 }, 9);
    assert_eq!(run(&a).unwrap().report.f_t, run(&b).unwrap().report.f_t);
}

#[test]
fn reported_accuracy_matches_recount() {
    let cfg = config(ClassifierConfig::Ncc, 30, AdaptMode::Adapter);
    let out = run(&cfg).unwrap();
    let (_, test) = load_data(&cfg.data).unwrap();
    let mut correct = 0;
    let mut per_class = vec![(0usize, 0usize); test.class_count()];
    for i in 0..test.len() {
        let y = test.label(i);
        per_class[y].1 += 1;
        if out.adapted.predict(&test.row_f64(i)).unwrap() == y {
            correct += 1;
            per_class[y].0 += 1;
        }
    }
    assert_eq!(out.report.f_star.correct, correct);
    assert_eq!(out.report.f_star.accuracy, correct as f64 / test.len() as f64);
    for (acc, (hit, total)) in out.report.f_star.per_class.iter().zip(per_class) {
        assert_eq!(*acc, hit as f64 / total as f64);
    }
    assert!((0.0..=1.0).contains(&out.report.f_t.accuracy));
    assert_eq!(out.report.buffer.size, 30);
    assert_eq!(out.report.buffer.per_class_counts.values().sum::<usize>(), 30);
}

#[test]
fn run_is_deterministic_except_timings() {
    let cfg = config(ClassifierConfig::Ridge { lambda: 0.5 }, 24, AdaptMode::Adapter);
    let mut a = run(&cfg).unwrap().report;
    let mut b = run(&cfg).unwrap().report;
    a.timings = Timings::default();
    b.timings = Timings::default();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.config_hash, cfg.hash());
}

#[test]
fn intermediate_predictor_at_end_matches_run() {
    let mut cfg = config(ClassifierConfig::Ridge { lambda: 1.0 }, 24, AdaptMode::Adapter);
    cfg.checkpoints = vec![1, 3];
    let out = run(&cfg).unwrap();
    let last = out.report.batches;
    assert_eq!(intermediate_predictor(last, &cfg).unwrap(), out.adapted);
    assert!(matches!(intermediate_predictor(0, &cfg), Err(ScrollError::NoClass)));
    assert!(matches!(
        intermediate_predictor(last + 1, &cfg),
        Err(ScrollError::OutOfRange { .. })
    ));
    let positions: Vec<usize> = out.report.intermediate.iter().map(|r| r.position).collect();
    assert_eq!(positions, vec![1, 3]);
    assert_eq!(out.report.intermediate[0].classes_observed, 2);
}

#[test]
fn checkpoint_beyond_stream_is_rejected() {
    let mut cfg = config(ClassifierConfig::Ncc, 0, AdaptMode::None);
    cfg.checkpoints = vec![99];
    assert!(matches!(run(&cfg), Err(ScrollError::OutOfRange { .. })));
    cfg.checkpoints = vec![0];
    assert!(run(&cfg).unwrap_err().is_validation());
}

#[test]
fn adaptation_without_buffer_is_a_runtime_error() {
    let cfg = config(ClassifierConfig::Ncc, 0, AdaptMode::Adapter);
    assert!(matches!(run(&cfg), Err(ScrollError::Adapt(_))));
}

#[test]
fn file_data_source_matches_synthetic() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = synthesize(&spec(1)).unwrap();
    save_embeddings(&train, dir.path().join("train.scrl"), TableFormat::Binary).unwrap();
    save_embeddings(&test, dir.path().join("test.scrl"), TableFormat::Binary).unwrap();
    let synthetic = config(ClassifierConfig::Ncc, 12, AdaptMode::FullHead);
    let mut files = synthetic.clone();
    files.data = DataSource::Files {
        train: dir.path().join("train.scrl"),
        test: dir.path().join("test.scrl"),
        format: TableFormat::Binary,
    };
    let a = run(&synthetic).unwrap().report;
    let b = run(&files).unwrap().report;
    assert_eq!(a.f_t, b.f_t);
    assert_eq!(a.f_star, b.f_star);
}

#[test]
fn config_json_defaults() {
    let text = r#"{
        "data": {"synthetic": {"class_count": 3, "dim": 4, "samples_per_class": 5, "seed": 1}},
        "schedule": {"kind": "single_batch"},
        "classifier": {"kind": "ridge"}
    }"#;
    let cfg = ExperimentConfig::from_json(text).unwrap();
    assert_eq!(cfg.classifier, ClassifierConfig::Ridge { lambda: 1.0 });
    assert_eq!(cfg.buffer.capacity, 0);
    assert_eq!(cfg.adapt.mode, AdaptMode::None);
    let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert!(ExperimentConfig::from_json(r#"{"data": 1}"#).unwrap_err().is_validation());
    let bad = text.replace(r#""kind": "ridge""#, r#""kind": "ridge", "lambda": -1"#);
    assert!(ExperimentConfig::from_json(&bad).is_err());
}

#[test]
fn sweep_without_memory_is_schedule_robust() {
    let cfg = config(ClassifierConfig::Ncc, 0, AdaptMode::None);
    let kinds = parse_kinds("split,gaussian,random").unwrap();
    let report = robustness_sweep(&cfg, 6, &kinds).unwrap();
    assert_eq!(report.runs.len(), 6);
    assert_eq!(report.f_t_spread, 0.0);
    assert!(report.max_state_deviation < 1e-9);
    assert!(robustness_sweep(&cfg, 1, &kinds).is_err());
    assert!(parse_kinds("split,bogus").is_err());
}

#[test]
fn buffer_study_full_pool_has_zero_exemplar_distance() {
    let mut cfg = config(ClassifierConfig::Ncc, 0, AdaptMode::None);
    cfg.study = Some(StudyConfig {
        scenarios: vec![(30, 10), (5, 10)],
        strategies: vec![BufferStrategy::Exemplar, BufferStrategy::Reservoir],
        classes: Some(vec![0, 1]),
    });
    let result = buffer_study(&cfg, 3).unwrap();
    assert_eq!(result.rows.len(), 4);
    let full = &result.rows[0];
    assert_eq!((full.b1, full.strategy), (30, BufferStrategy::Exemplar));
    assert!(full.mean_distance < 1e-6);
    assert_eq!(result.raw[0].records.len(), 2 * 2 * 3);
    let mut out = Vec::new();
    write_study_csv(&mut out, &result.rows).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("b1,b2,strategy,mean_distance,var_distance,shuffles\n"));
    assert!(buffer_study(&cfg, 1).is_err());
}
