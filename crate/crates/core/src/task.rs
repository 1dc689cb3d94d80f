use std::fmt;

use serde::{Deserialize, Serialize};

/// A dense prediction task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Semseg,
    Depth,
    Normal,
    Edge,
    Saliency,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::Semseg,
        Task::Depth,
        Task::Normal,
        Task::Edge,
        Task::Saliency,
    ];

    /// The four-task indoor setup (segmentation, depth, normals, boundaries).
    pub const NYUD: [Task; 4] = [Task::Semseg, Task::Depth, Task::Normal, Task::Edge];

    pub fn name(self) -> &'static str {
        match self {
            Task::Semseg => "semseg",
            Task::Depth => "depth",
            Task::Normal => "normal",
            Task::Edge => "edge",
            Task::Saliency => "saliency",
        }
    }

    pub fn from_name(s: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.name() == s)
    }

    /// Channels of the prediction head.
    pub fn out_channels(self, num_classes: usize) -> usize {
        match self {
            Task::Semseg => num_classes,
            Task::Normal => 3,
            Task::Depth | Task::Edge | Task::Saliency => 1,
        }
    }

    /// Name of the evaluation metric reported for this task.
    pub fn metric_name(self) -> &'static str {
        match self {
            Task::Semseg => "miou",
            Task::Depth => "rmse",
            Task::Normal => "merr",
            Task::Edge => "odsf",
            Task::Saliency => "maxf",
        }
    }

    /// Whether a larger metric value is better.
    pub fn higher_is_better(self) -> bool {
        matches!(self, Task::Semseg | Task::Edge | Task::Saliency)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
