//! Scene-text recognition with a patch transformer encoder and a two-stream
//! character decoder driven by permutation attention masks, including a
//! small learned-ordering head that picks the decoding order per run.

pub mod charset;
pub mod ckpt;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod ipn;
pub mod mask;
pub mod model;
pub mod optim;
pub mod plot;
pub mod real;
pub mod tensor;
pub mod train;

pub use cli::run_cli;
