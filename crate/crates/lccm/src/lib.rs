pub mod config;
pub mod data;
pub mod error;
pub mod estimation;
pub mod likelihood;
pub mod mnl;
pub mod synth;
