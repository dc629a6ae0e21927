pub mod acquisition;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod motion;
pub mod phantom;
pub mod priors;
pub mod solver;
pub mod transforms;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{CoilSet, ComplexVolume, KSpaceSet, RealVolume, Shape3};
