//! Experiment orchestration: configuration, single runs, schedule sweeps
//! and the buffer study.

mod config;
mod run;
mod study;
mod sweep;

pub use config::{load_data, BufferConfig, ClassifierConfig, DataSource, ExperimentConfig, StudyConfig};
pub use run::{
    evaluate, intermediate_predictor, intermediate_predictor_on, run, run_on, Accuracy, BufferStats, Intermediate,
    RunOutcome, RunReport, Timings,
};
pub use study::{buffer_study, class_distance, write_study_csv, StudyResult, StudyRow, StudyScenarioRecords};
pub use sweep::{
    parse_kinds, robustness_sweep, sweep_schedule, sweep_schedules, thread_count, RobustnessReport, SweepKind,
    SweepRun,
};
