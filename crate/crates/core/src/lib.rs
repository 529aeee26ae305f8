pub mod baselines;
pub mod calibration;
pub mod datagen;
pub mod finetune;
pub mod frames;
pub mod model;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod schema;
pub mod tokenizer;
