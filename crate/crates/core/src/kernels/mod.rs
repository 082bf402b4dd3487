//! Forward/backward kernels operating on raw slices. The tape dispatches here.

pub mod conv;
pub mod norm;
pub mod pool;
