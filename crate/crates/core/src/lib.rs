//! Part-based object detection with CP-decomposed filters.
//!
//! Filters are `n × m × l` tensors correlated against a HOG-like feature
//! pyramid. Replacing each filter by a rank-`R` CP model turns one 3-D
//! correlation into `R` chains of three 1-D correlations, and ordering the
//! terms by weight allows early rejection of positions whose partial score
//! falls below a calibrated threshold.

pub mod cp;
pub mod detector;
pub mod dpm;
pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod sepconv;
pub mod tensor;

pub use cp::{cp_als, select_rank, AlsOptions, CPModel};
pub use error::{Error, Result};
pub use sepconv::{correlate3_cp, correlate3_full, FeatureMap, ScoreMap};
pub use tensor::{Matrix, Tensor3};
