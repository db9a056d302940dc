//! Detection, matching and metrics on generated scenes, plus the dense
//! oracles used to check the ROI operations.

pub mod detect;
pub mod matching;
pub mod metrics;
pub mod oracle;

pub use detect::{detect, iou, Detection};
pub use matching::{hungarian_match, MatchResult};
