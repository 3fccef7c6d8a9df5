pub mod config;
pub mod depth;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod scenegen;
pub mod finetune;
pub mod gradcheck;
pub mod svg;
pub mod cli;
