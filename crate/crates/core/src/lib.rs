//! Language-based 3D scene retrieval over semantic scene graphs.

pub mod cli;
pub mod dataset;
pub mod extract;
pub mod graph;
pub mod nn;
pub mod retrieval;
pub mod synth;
pub mod train;
pub mod vectors;
