//! Retrieval-augmented multimodal classification of fake news videos.

pub mod numerics;
pub mod corpus;
pub mod config;
pub mod nn;
pub mod cspr;
pub mod dgmp;
pub mod alignment;
pub mod mvdff;
pub mod training;
