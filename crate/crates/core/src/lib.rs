pub mod advprior;
pub mod flowgen;
pub mod geometry;
pub mod kinematics;
pub mod metrics;
pub mod nnet;
pub mod pipeline;
pub mod stabsim;
pub mod strategy;
pub mod synthdata;
