//! Files and data: the `.ptc` named-tensor container, pose datasets, the
//! synthetic skeleton generator and input normalization.

pub mod container;
pub mod dataset;
pub mod normalize;
pub mod synth;
