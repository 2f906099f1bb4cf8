pub mod asc_sim;
pub mod autodiff;
pub mod cotrain;
pub mod dataset;
pub mod divide;
pub mod features;
pub mod harness;
pub mod rng;
pub mod ssl;
