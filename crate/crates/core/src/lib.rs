pub mod error;
pub mod forms;
pub mod masks;
pub mod numerics;
pub mod oracle;
pub mod projections;

pub use error::{LionError, Result};
pub use forms::{Form, MemoryCounter};
pub use masks::BidirectionalMask;
pub use numerics::{Matrix, ScalingMode, Vector};
pub use projections::{DecaySpec, MixerInputs, ZooConfig, ZooModel};
