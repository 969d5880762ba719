pub mod cli;
pub mod configuration;
pub mod dualsolver;
pub mod error;
pub mod geometry;
pub mod gibbs;
pub mod lda;
pub mod numerics;
pub mod potentials;
pub mod ruelle;
pub mod thermo;
