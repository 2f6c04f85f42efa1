mod conv;
mod dropout;
mod elementwise;
mod linalg;
mod norm;
mod pool;
mod reduce;
mod shape;

pub use conv::ConvSpec;
pub use elementwise::Activation;
pub use norm::{RunningStats, BN_EPSILON, BN_MOMENTUM};

pub(crate) use elementwise::sigmoid_scalar;
