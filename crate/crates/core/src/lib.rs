//! Multi-session pose-graph localization and mapping.
//!
//! A prior pose graph is used for localization until the spectral
//! connectivity of the joint (active + reference) graph signals that the robot
//! has left the mapped area; the engine then extends the reference model with
//! the new keyframes, closes loops, and returns to localization once the
//! connection to the prior model is re-established.

pub mod ate;
pub mod decision;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod optimizer;
pub mod pipeline;
pub mod simulator;
pub mod spectral;

pub use geometry::{Pose, Twist};
pub use graph::{Edge, EdgeId, EdgeKind, GraphError, PoseGraph, Role, Vertex, VertexId};
