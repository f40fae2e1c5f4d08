//! Experiment harness: configuration files, single runs, study matrices
//! and plot-ready data.

pub mod config;
pub mod plot;
pub mod run;
pub mod suite;
pub mod train;

pub use config::{
    CorpusSpec, ExperimentConfig, TeacherSpec, TrainSpec, CODE_VERSION, CONFIG_VERSION,
};
pub use plot::emit_plot_data;
pub use run::{
    build_corpus, ensure_teacher, evaluate_detector, load_teacher, run, run_with_teacher,
    train_teacher, RunOptions, RunResult, Teacher, TeacherSummary,
};
pub use suite::{builtin_matrix, run_suite, MatrixSpec, SuiteOptions, SuiteReport};
pub use train::{train, TrainLog};
