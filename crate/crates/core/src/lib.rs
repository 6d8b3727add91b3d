pub mod network;
pub mod data;
pub mod selection;
pub mod engine;
pub mod analysis;
pub mod experiment;
