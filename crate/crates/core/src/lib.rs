pub mod error;
pub mod exec;
pub mod rng;
pub mod sigsim;

pub use error::{FipError, Result};
pub mod modalities;
pub mod tensor_ad;
pub mod model;
pub mod fip_train;
pub mod storage;
pub mod finetune_eval;
pub mod pipeline;
