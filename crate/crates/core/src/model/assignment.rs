use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::topology::ChipTopology;
use super::workload::Workload;

/// What a macro holds. `Empty` is a real value so swaps treat it like any
/// other slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Option<usize>", into = "Option<usize>")]
pub enum Slot {
    Empty,
    Task(usize),
}

impl From<Option<usize>> for Slot {
    fn from(o: Option<usize>) -> Self {
        o.map_or(Slot::Empty, Slot::Task)
    }
}

impl From<Slot> for Option<usize> {
    fn from(s: Slot) -> Self {
        match s {
            Slot::Empty => None,
            Slot::Task(t) => Some(t),
        }
    }
}

impl Slot {
    pub fn task(self) -> Option<usize> {
        self.into()
    }

    pub fn is_empty(self) -> bool {
        self == Slot::Empty
    }
}

/// Macro-granular placement of tasks, plus the logical Sets (one per
/// operator) it induces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskMapping {
    assignment: Vec<Slot>,
    task_op: Vec<usize>,
    sets: Vec<Vec<usize>>,
}

impl TaskMapping {
    pub fn new(assignment: Vec<Slot>, workload: &Workload, topo: &ChipTopology) -> Result<Self> {
        if assignment.len() != topo.total_macros() {
            return Err(Error::Length {
                expected: topo.total_macros(),
                actual: assignment.len(),
            });
        }
        let task_op: Vec<usize> = workload.tasks().iter().map(|t| t.op).collect();
        let m = Self::from_parts(assignment, task_op, workload.operators.len());
        m.validate()?;
        Ok(m)
    }

    fn from_parts(assignment: Vec<Slot>, task_op: Vec<usize>, n_ops: usize) -> Self {
        let mut m = Self {
            assignment,
            task_op,
            sets: vec![Vec::new(); n_ops],
        };
        m.rebuild_sets();
        m
    }

    fn rebuild_sets(&mut self) {
        for s in &mut self.sets {
            s.clear();
        }
        for (macro_id, slot) in self.assignment.iter().enumerate() {
            if let Slot::Task(t) = slot {
                if let Some(&op) = self.task_op.get(*t) {
                    self.sets[op].push(macro_id);
                }
            }
        }
    }

    /// One pass over the macros: every task id exists and appears at most once.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.task_op.len()];
        for (m, slot) in self.assignment.iter().enumerate() {
            if let Slot::Task(t) = *slot {
                match seen.get_mut(t) {
                    None => return Err(Error::validation(format!("macro {m} holds unknown task {t}"))),
                    Some(true) => return Err(Error::validation(format!("task {t} assigned to more than one macro"))),
                    Some(s) => *s = true,
                }
            }
        }
        Ok(())
    }

    /// Fails unless every task is placed.
    pub fn require_complete(&self) -> Result<()> {
        let placed = self.assignment.iter().filter(|s| !s.is_empty()).count();
        if placed != self.task_op.len() {
            return Err(Error::validation(format!(
                "{} of {} tasks mapped",
                placed,
                self.task_op.len()
            )));
        }
        Ok(())
    }

    pub fn assignment(&self) -> &[Slot] {
        &self.assignment
    }

    pub fn slot(&self, macro_id: usize) -> Slot {
        self.assignment[macro_id]
    }

    /// Macros of the Set computing operator `op`, ascending.
    pub fn set(&self, op: usize) -> &[usize] {
        &self.sets[op]
    }

    pub fn sets(&self) -> &[Vec<usize>] {
        &self.sets
    }

    pub fn n_tasks(&self) -> usize {
        self.task_op.len()
    }

    pub fn operator_of_task(&self, task: usize) -> usize {
        self.task_op[task]
    }

    /// Operator running on a macro, if any.
    pub fn operator_at(&self, macro_id: usize) -> Option<usize> {
        self.assignment[macro_id].task().map(|t| self.task_op[t])
    }

    /// Exchanges the contents of two macros.
    pub fn swapped(&self, a: usize, b: usize) -> Self {
        let mut m = self.clone();
        m.assignment.swap(a, b);
        m.rebuild_sets();
        m
    }
}
