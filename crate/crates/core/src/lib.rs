pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diff;
pub mod evaluation;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod par;
pub mod training;
