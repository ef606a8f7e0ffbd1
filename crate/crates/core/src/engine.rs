use std::collections::BTreeMap;

use crate::projectors::{Branch, ProjectorStack};
use crate::replay::ClassStatistics;
use crate::{Error, Result};

/// Everything the engine learns across sessions: four projector stacks, the
/// classes introduced by each session, the attribute rows drawn for each
/// class, and per-class Gaussian statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineState {
    dim: usize,
    stacks: [ProjectorStack; 4],
    sessions: Vec<Vec<u32>>,
    attribute_choices: BTreeMap<u32, Vec<usize>>,
    statistics: BTreeMap<u32, ClassStatistics>,
}

impl EngineState {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            stacks: Branch::ALL.map(|b| ProjectorStack::new(b, dim)),
            sessions: Vec::new(),
            attribute_choices: BTreeMap::new(),
            statistics: BTreeMap::new(),
        }
    }

    pub(crate) fn from_parts(
        dim: usize,
        stacks: Vec<ProjectorStack>,
        sessions: Vec<Vec<u32>>,
        attribute_choices: BTreeMap<u32, Vec<usize>>,
        statistics: BTreeMap<u32, ClassStatistics>,
    ) -> Result<Self> {
        let stacks: [ProjectorStack; 4] = stacks
            .try_into()
            .map_err(|_| Error::InvalidArgument("expected four projector stacks".into()))?;
        for (stack, branch) in stacks.iter().zip(Branch::ALL) {
            if stack.branch() != branch {
                return Err(Error::InvalidArgument("projector stacks out of order".into()));
            }
            if stack.len() != sessions.len() {
                return Err(Error::InvalidArgument(format!(
                    "{:?} stack has {} projectors for {} sessions",
                    branch,
                    stack.len(),
                    sessions.len()
                )));
            }
        }
        Ok(Self {
            dim,
            stacks,
            sessions,
            attribute_choices,
            statistics,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stacks(&self) -> &[ProjectorStack; 4] {
        &self.stacks
    }

    pub fn stack(&self, branch: Branch) -> &ProjectorStack {
        &self.stacks[branch.code() as usize]
    }

    pub fn stack_mut(&mut self, branch: Branch) -> &mut ProjectorStack {
        &mut self.stacks[branch.code() as usize]
    }

    /// Classes introduced by each trained (or opened) session.
    pub fn sessions(&self) -> &[Vec<u32>] {
        &self.sessions
    }

    pub fn sessions_trained(&self) -> usize {
        self.sessions.len()
    }

    /// All classes seen so far, in session order.
    pub fn seen_classes(&self) -> Vec<u32> {
        self.sessions.iter().flatten().copied().collect()
    }

    pub fn attribute_choices(&self) -> &BTreeMap<u32, Vec<usize>> {
        &self.attribute_choices
    }

    pub fn attribute_choice(&self, class_id: u32) -> Option<&[usize]> {
        self.attribute_choices.get(&class_id).map(Vec::as_slice)
    }

    pub fn set_attribute_choice(&mut self, class_id: u32, rows: Vec<usize>) {
        self.attribute_choices.insert(class_id, rows);
    }

    pub fn statistics(&self) -> &BTreeMap<u32, ClassStatistics> {
        &self.statistics
    }

    /// Stores statistics for a class. Statistics are write-once: a class that
    /// already has them keeps its original record.
    pub fn insert_statistics(&mut self, stats: ClassStatistics) {
        self.statistics.entry(stats.class_id).or_insert(stats);
    }

    /// Freezes all projectors, opens one new projector per stack and records
    /// the session's classes.
    pub fn begin_session(&mut self, classes: Vec<u32>) {
        for s in &mut self.stacks {
            s.begin_task();
        }
        self.sessions.push(classes);
    }

    /// Freezes the current session's projectors.
    pub fn end_session(&mut self) {
        for s in &mut self.stacks {
            s.freeze_all();
        }
    }

    /// The state as it stood after session `sessions` (1-based count).
    ///
    /// Exact because projectors are never modified once their session ends.
    pub fn truncated(&self, sessions: usize) -> Self {
        let sessions = sessions.min(self.sessions.len());
        let kept = self.sessions[..sessions].to_vec();
        let keep = |c: &u32| kept.iter().flatten().any(|k| k == c);
        Self {
            dim: self.dim,
            stacks: self.stacks.clone().map(|s| s.truncated(sessions)),
            attribute_choices: self
                .attribute_choices
                .iter()
                .filter(|(c, _)| keep(c))
                .map(|(c, v)| (*c, v.clone()))
                .collect(),
            statistics: self
                .statistics
                .iter()
                .filter(|(c, _)| keep(c))
                .map(|(c, v)| (*c, v.clone()))
                .collect(),
            sessions: kept,
        }
    }
}
