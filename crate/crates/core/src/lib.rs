pub mod conditioning;
pub mod control;
pub mod corpus;
pub mod ddpm;
pub mod features;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod pano;
pub mod pipeline;
pub mod scene;
pub mod seeds;
pub mod seg;
pub mod taxonomy;
