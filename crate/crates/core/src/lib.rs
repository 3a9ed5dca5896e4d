pub mod geometry;
pub mod scenario;
pub mod seed;
pub mod sensing;
pub mod assignment;
pub mod evaluation;
pub mod fusion;
pub mod tracker;
pub mod harness;
