//! Discrete-time survival analysis over multi-visit patient records with a
//! transformer encoder and cause-specific hazard heads.

pub mod cli;
pub mod container;
pub mod dataset;
pub mod encoder;
pub mod fixtures;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod par;
pub mod survival_head;
pub mod synth;
pub mod timegrid;
pub mod trainer;
