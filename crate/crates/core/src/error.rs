use thiserror::Error;

use crate::constellation::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which accuracy/overhead constraint made an offloading subproblem infeasible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// Large-model accuracy on offloaded frames.
    LargeModelAccuracy,
    /// Small-model accuracy after the model update.
    SmallModelAccuracy,
    /// Model-update packet size bounds.
    ModelPacketBounds,
}

impl std::fmt::Display for Constraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Constraint::LargeModelAccuracy => write!(f, "large-model mAP >= mAP_min"),
            Constraint::SmallModelAccuracy => write!(f, "small-model mAP >= mAP_min"),
            Constraint::ModelPacketBounds => write!(f, "D_min <= D_m <= D_max"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("infeasible: constraint `{constraint}` cannot be met ({detail})")]
    Infeasible { constraint: Constraint, detail: String },

    #[error("value {value} outside domain [{lo}, {hi}]")]
    Domain { value: f64, lo: f64, hi: f64 },

    #[error("link ({0}, {1}) is unusable (zero rate)")]
    UnusableLink(NodeId, NodeId),

    #[error("invalid route: {0}")]
    InvalidRoute(String),

    #[error("no route from {source_node} to any of {targets:?}")]
    NoRoute { source_node: NodeId, targets: Vec<NodeId> },

    #[error("route for task {task} is incomplete ({class})")]
    PartialRoute { task: usize, class: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("optimizer failure: {0}")]
    Optimizer(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
