pub mod tensor;
pub mod model;
pub mod style;
pub mod data;
pub mod meta;
pub mod domains;
pub mod eval;
pub mod config;
pub mod checkpoint;
pub mod train;
pub mod verify;
pub mod cli;
