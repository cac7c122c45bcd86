pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod pretrain;
pub mod report;
pub mod synthetic;
