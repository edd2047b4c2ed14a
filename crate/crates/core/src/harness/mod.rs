//! Experiment orchestration: evaluation metrics, labeling, the shared
//! training loop and run directories.

pub mod labeling;
pub mod metrics;
pub mod run;
pub mod training;

pub use labeling::{GradeSubmission, HumanLabeler, Labeler, PendingEpisode, RunHandle, RunStatus, ScriptedSink, SubmitError};
pub use metrics::{
    count_valid_distinct, evaluate_policy, goals_covered, spearman, trajectory_mse, Answer, AnswerCriteria, Evaluation,
    MetricRow, Policy,
};
pub use run::{run_experiment, run_experiment_with, Algorithm, LabelerKind, RunConfig, RunOutcome};
pub use training::{Learner, Schedule, Transition};
