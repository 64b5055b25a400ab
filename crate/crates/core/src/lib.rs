//! Table-filling joint entity and relation extraction with a WNet over
//! word-pair tables and a GNN over high-order cell graphs.

pub mod check;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod encoder;
pub mod eval;
pub mod graph;
pub mod heads;
pub mod model;
pub mod nn;
pub mod table;
pub mod trainer;
pub mod wnet;
