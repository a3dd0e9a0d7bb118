pub mod analysis;
pub mod boosting;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod model;
pub mod optim;
pub mod plot;
pub mod run;
pub mod supervision;
pub mod tensor;
pub mod train;
