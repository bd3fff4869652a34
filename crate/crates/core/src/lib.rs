pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod digest;
pub mod estimators;
pub mod harness;
pub mod models;
