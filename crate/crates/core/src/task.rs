//! The three graded scoring tasks and their label spaces.

use serde::{Deserialize, Serialize};

/// One of the three histological scoring tasks.
///
/// Label ranges follow the standard grading scheme: steatosis 0-3,
/// ballooning 0-2, inflammation 0-3. Task order is fixed and used
/// everywhere an ordering matters (subspace collection, loss vectors,
/// report columns).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Steatosis,
    Ballooning,
    Inflammation,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Steatosis, Task::Ballooning, Task::Inflammation];

    /// Number of label classes for this task.
    pub fn class_count(self) -> usize {
        match self {
            Task::Steatosis => 4,
            Task::Ballooning => 3,
            Task::Inflammation => 4,
        }
    }

    /// Stable position in [`Task::ALL`].
    pub fn index(self) -> usize {
        match self {
            Task::Steatosis => 0,
            Task::Ballooning => 1,
            Task::Inflammation => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Steatosis => "steatosis",
            Task::Ballooning => "ballooning",
            Task::Inflammation => "inflammation",
        }
    }

    pub fn from_name(name: &str) -> Option<Task> {
        match name {
            "steatosis" => Some(Task::Steatosis),
            "ballooning" => Some(Task::Ballooning),
            "inflammation" => Some(Task::Inflammation),
            _ => None,
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_counts_match_grading_scheme() {
        assert_eq!(Task::Steatosis.class_count(), 4);
        assert_eq!(Task::Ballooning.class_count(), 3);
        assert_eq!(Task::Inflammation.class_count(), 4);
    }

    #[test]
    fn order_is_stable() {
        assert_eq!(Task::ALL[0], Task::Steatosis);
        assert_eq!(Task::ALL[1], Task::Ballooning);
        assert_eq!(Task::ALL[2], Task::Inflammation);
        for (i, t) in Task::ALL.iter().enumerate() {
            assert_eq!(t.index(), i);
        }
    }

    #[test]
    fn name_round_trip() {
        for t in Task::ALL {
            assert_eq!(Task::from_name(t.name()), Some(t));
        }
        assert_eq!(Task::from_name("fibrosis"), None);
    }
}
