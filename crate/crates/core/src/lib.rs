pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod eval;
pub mod gradcheck;
pub mod infer;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod tensor;
pub mod train;
