//! Tree-based retrieval with collaborative and multi-modal sequence search.
//!
//! Pipeline: [`corpus`] generates items and behaviour logs, [`mmembed`]
//! trains frozen content embeddings, [`tree`] clusters them into a complete
//! binary index, [`estimator`] scores (user, node) pairs, [`training`] fits
//! the estimator level by level, [`retrieval`] runs beam search and
//! [`eval`] measures the result.

pub mod corpus;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod ids;
pub mod linalg;
pub mod mmembed;
pub mod optim;
pub mod retrieval;
pub mod seed;
pub mod training;
pub mod tree;

mod binfmt;

pub use error::{Error, Result};
pub use ids::{ItemId, NodeId};
