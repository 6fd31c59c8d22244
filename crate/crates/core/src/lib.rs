pub mod cop;
pub mod eval;
pub mod geometry;
pub mod kitti_io;
pub mod matching;
pub mod micronet;
pub mod synth;
pub mod trainer;
