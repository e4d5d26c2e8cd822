//! TreeCoder: decoder-only transformers whose blocks form a complete k-ary
//! tree. Every sequence is routed from the root to one leaf by learned top-1
//! selectors, so only the nodes on its path run.
//!
//! The crate is self-contained: a dense reverse-mode autodiff substrate
//! ([`autodiff`]), transformer blocks ([`nn`]), selectors, the tree model,
//! a byte-level BPE tokenizer, data packing and a training loop.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod generate;
pub mod model;
pub mod nn;
pub mod params;
pub mod selector;
pub mod tokenizer;
pub mod train;
pub mod tree;

pub use analysis::{ParamReport, RouteStats};
pub use autodiff::{Scalar, Tape, Tensor, Var};
pub use data::{Batch, PackedDataset};
pub use error::{Error, Result};
pub use model::{ForwardOutput, RouteRecord, RoutingMode, TreeCoderModel, TreeConfig};
pub use params::{Param, ParamId, ParamSet, Session};
pub use tokenizer::{train_bpe, Vocab};
