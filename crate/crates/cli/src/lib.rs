//! Pipeline around `pole-core`: configuration, datasets, training,
//! evaluation, and reporting. The `pole` binary wires these modules to the
//! command line.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod evalcams;
pub mod report;
pub mod toy;
pub mod trainer;
