//! Distributed volumetric mapping simulator.
//!
//! Simulated robot frontends generate dense keyframes from synthetic RGB-D
//! data, stream them through a modeled shared uplink to a centralized backend
//! that performs loop closure and global pose-graph optimization, assembles
//! per-robot volumetric maps, and runs an independent radar pipeline for
//! detecting occluded metallic objects.

pub mod geometry;
pub mod backend;
pub mod eval;
pub mod frontend;
pub mod netsim;
pub mod radar;
pub mod runner;
pub mod simworld;
pub mod volmap;
