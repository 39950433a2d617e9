pub mod anneal;
pub mod autodiff;
pub mod dais;
pub mod error;
pub mod matrix;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod surrogate;
pub mod train;
pub mod vardist;
