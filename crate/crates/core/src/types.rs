use serde::{Deserialize, Serialize};

use crate::autograd::Var;

/// Which of the two segmentation tasks a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Semantic,
    Instance,
}

impl Task {
    pub fn other(self) -> Task {
        match self {
            Task::Semantic => Task::Instance,
            Task::Instance => Task::Semantic,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Semantic => "semantic",
            Task::Instance => "instance",
        }
    }
}

/// Shared encoder output `h`.
#[derive(Clone, Copy, Debug)]
pub struct ImageEmbedding<'g> {
    /// `[B, N, C]`, row-major over the patch grid.
    pub tokens: Var<'g>,
    /// `(rows, cols)` of the patch grid.
    pub grid: (usize, usize),
    /// First-stage tokens `[B, 4N, C/2]` on the 2x finer grid, used as a
    /// skip connection by the pixel decoder.
    pub high_res: Option<Var<'g>>,
}

/// Prompt-encoder output added to `h` to steer the other task's head.
#[derive(Clone, Copy, Debug)]
pub struct PriorConstraint<'g> {
    /// `[B, N, C]`
    pub c: Var<'g>,
    pub task: Task,
}
