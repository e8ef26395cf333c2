//! Deterministic environments and offline data generation.

mod behavior;
mod dataset;
mod maze;
mod tabular;

pub use behavior::{action_stats, generate_offline_data, scripted_episode, BehaviorConfig};
pub use dataset::{ChunkedWindow, Dataset, DatasetMeta, Episode};
pub use maze::{MazeSpec, Point, Rect, StepOutcome};
pub use tabular::TabularMdp;
