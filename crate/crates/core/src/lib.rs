pub mod corpus;
pub mod encoder;
pub mod evalmetrics;
pub mod models;
pub mod neuralcore;
pub mod preprocess;
pub mod seed;
pub mod synth;
pub mod training;
