//! End-to-end run: schedule, per-session training, staged evaluation.

use serde::{Deserialize, Serialize};

use crate::corpus::{split_tasks, EmbeddingBundle, TaskSchedule};
use crate::engine::EngineState;
use crate::evaluator::{build_report, AccuracyMatrix, InferenceConfig, Mode, SessionReport};
use crate::trainer::{train_task, TrainerConfig, TrainingLog};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub trainer: TrainerConfig,
    /// Classes in the first session; 0 means the same as `increment`.
    pub base_size: usize,
    pub increment: usize,
    pub mode: Mode,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub state: EngineState,
    pub schedule: TaskSchedule,
    /// Logs of the sessions trained in this call.
    pub logs: Vec<TrainingLog>,
    pub report: SessionReport,
    pub matrix: AccuracyMatrix,
}

/// Trains every scheduled session not yet present in `resume` and evaluates
/// each stage.
///
/// `after_session` sees the state and log after each session; it is the hook
/// for checkpointing. When a session fails, earlier sessions have already
/// been handed to the hook, so the run can resume from there.
pub fn run(
    bundle: &EmbeddingBundle,
    opts: &RunOptions,
    resume: Option<EngineState>,
    mut after_session: impl FnMut(&EngineState, &TrainingLog) -> Result<()>,
) -> Result<RunResult> {
    let cfg = opts.mode.training_config(&opts.trainer);
    cfg.validate()?;
    let schedule = split_tasks(&bundle.class_ids(), opts.base_size, opts.increment, cfg.seed)?;
    let (train, test) = bundle.train_test_split(cfg.seed);
    let mut state = resume.unwrap_or_else(|| EngineState::new(bundle.dim()));
    if state.dim() != bundle.dim() {
        return Err(Error::DimensionMismatch {
            expected: state.dim(),
            actual: bundle.dim(),
        });
    }
    let done = state.sessions_trained();
    if done > schedule.len() || state.sessions() != &schedule.sessions[..done] {
        return Err(Error::InvalidArgument(
            "checkpoint sessions do not match the schedule".into(),
        ));
    }

    let mut logs = Vec::new();
    if opts.mode != Mode::ZeroShot {
        for classes in &schedule.sessions[done..] {
            let log = train_task(&mut state, bundle, &train, classes, &cfg)?;
            after_session(&state, &log)?;
            logs.push(log);
        }
    }
    let inference = InferenceConfig::from(&cfg);
    let (report, matrix) = build_report(&state, &schedule.sessions, bundle, &test, opts.mode, &inference)?;
    Ok(RunResult {
        state,
        schedule,
        logs,
        report,
        matrix,
    })
}
