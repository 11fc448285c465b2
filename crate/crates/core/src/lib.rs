pub mod attractor;
pub mod contraction;
pub mod design;
pub mod error;
pub mod numeric;
pub mod par;
pub mod patches;
pub mod regime;
pub mod schedule;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
pub use schedule::{Schedule, ScheduleKind, Spacing, StepGeometry, ThresholdStats};
