use chickface::geometry::{BoundingBox, KeypointSet};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Unlabeled,
    Predicted,
    Revised,
    Accepted,
    RejectedQuality,
}

impl TaskStatus {
    pub const ALL: [TaskStatus; 5] = [
        TaskStatus::Unlabeled,
        TaskStatus::Predicted,
        TaskStatus::Revised,
        TaskStatus::Accepted,
        TaskStatus::RejectedQuality,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskStatus::Unlabeled => "unlabeled",
            TaskStatus::Predicted => "predicted",
            TaskStatus::Revised => "revised",
            TaskStatus::Accepted => "accepted",
            TaskStatus::RejectedQuality => "rejected_quality",
        }
    }

    pub fn parse(s: &str) -> Option<TaskStatus> {
        TaskStatus::ALL.into_iter().find(|t| t.as_str() == s)
    }

    /// Statuses whose revised geometry counts as ground truth.
    pub fn is_ground_truth(self) -> bool {
        matches!(self, TaskStatus::Revised | TaskStatus::Accepted)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskEvent {
    /// Manual annotation of a seed frame.
    Seed,
    /// Model draft (or re-draft with newer models).
    Propose,
    /// Human correction that changes the geometry.
    Revise,
    /// Human confirmation of the geometry as shown.
    Accept,
    /// Frame unusable (blurry, off-angle).
    Reject,
}

impl TaskEvent {
    pub const ALL: [TaskEvent; 5] = [TaskEvent::Seed, TaskEvent::Propose, TaskEvent::Revise, TaskEvent::Accept, TaskEvent::Reject];
}

/// The task state machine. Accepted and rejected tasks are final.
pub fn transition(from: TaskStatus, event: TaskEvent) -> Result<TaskStatus, ServiceError> {
    use TaskEvent as E;
    use TaskStatus as S;
    let to = match (from, event) {
        (S::Unlabeled, E::Seed) => S::Accepted,
        (S::Unlabeled | S::Predicted, E::Propose) => S::Predicted,
        (S::Predicted | S::Revised, E::Revise) => S::Revised,
        (S::Predicted | S::Revised, E::Accept) => S::Accepted,
        (S::Predicted | S::Revised, E::Reject) => S::RejectedQuality,
        _ => return Err(ServiceError::IllegalTransition { from, event }),
    };
    Ok(to)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOrigin {
    Seed,
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub frame_id: String,
    pub status: TaskStatus,
    /// Round the task was seeded or drafted in.
    pub round: i64,
    pub origin: TaskOrigin,
    pub draft_box: Option<BoundingBox>,
    pub draft_keypoints: Option<KeypointSet>,
    pub revised_box: Option<BoundingBox>,
    pub revised_keypoints: Option<KeypointSet>,
    pub editor: Option<String>,
    /// Bumped on every write; submissions must echo it.
    pub version: i64,
    /// Unix milliseconds.
    pub created_at: i64,
    pub updated_at: i64,
}

impl AnnotationTask {
    pub fn task_id_for(frame_id: &str) -> String {
        format!("task-{frame_id}")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVersions {
    pub detector: String,
    pub keypoints: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundCounts {
    pub seeded: u64,
    pub predicted: u64,
    pub revised: u64,
    pub accepted: u64,
    pub rejected: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRound {
    pub round: i64,
    pub model_versions: ModelVersions,
    pub counts: RoundCounts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubmitQuality {
    Ok,
    Rejected,
}

/// A human revision as posted by the UI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub revised_box: Option<BoundingBox>,
    pub revised_keypoints: Option<KeypointSet>,
    pub quality: SubmitQuality,
    pub version: i64,
    #[serde(default)]
    pub editor: Option<String>,
    #[serde(default)]
    pub gender_confirmation: Option<chickface::dataset::Gender>,
}

/// One manual seed label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManualAnnotation {
    pub frame_id: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub keypoints: KeypointSet,
}
