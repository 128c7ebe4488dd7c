pub mod numerics;
pub mod tree_attention;
pub mod midi_io;
pub mod losses;
pub mod eval_metrics;
pub mod config;
pub mod framing;
pub mod model;
pub mod trainer;
pub mod corpus;
pub mod theory_analysis;
