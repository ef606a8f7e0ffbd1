//! Exemplar-free class-incremental learning over precomputed vision-language
//! token embeddings.
//!
//! The engine consumes an [`EmbeddingBundle`](corpus::EmbeddingBundle) (one
//! `[CLS]` row plus `M` patch rows per image, one `[EOS]` row plus attribute
//! rows per class) and learns a sequence of task-specific affine projectors.
//! Prediction fuses a global `[CLS]`/`[EOS]` cosine classifier with a local
//! score obtained by selecting the patches most related to a class's
//! attribute texts and aligning them to those attributes with entropic
//! optimal transport.
//!
//! Module map:
//!
//! | module | contents |
//! |---|---|
//! | [`corpus`] | data model, on-disk bundle format, synthetic corpora, task schedules |
//! | [`semantics`] | class prototypes, representative/diverse samples, attribute requests |
//! | [`projectors`] | cumulative projector stacks with freeze semantics |
//! | [`alignment`] | patch selection, Sinkhorn transport, local logits |
//! | [`replay`] | per-class Gaussian statistics and pseudo-feature sampling |
//! | [`trainer`] | losses, closed-form gradients, cosine-annealed SGD |
//! | [`evaluator`] | prediction modes and incremental-learning metrics |
//! | [`pipeline`] | end-to-end session loop with per-session evaluation |
//! | [`checkpoint`] | binary engine checkpoints |

pub mod alignment;
pub mod checkpoint;
pub mod corpus;
pub mod engine;
mod error;
pub mod evaluator;
pub mod linalg;
pub mod pipeline;
pub mod projectors;
pub mod replay;
pub mod rng;
pub mod semantics;
pub mod trainer;

pub use engine::EngineState;
pub use error::{Error, Result};

/// Maps `f` over `items`, in parallel when the `parallel` feature is on.
/// Results keep input order.
#[cfg(feature = "parallel")]
pub(crate) fn ordered_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn ordered_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.iter().map(f).collect()
}

/// Caps the worker pool at `threads`. Must run before any parallel work.
#[cfg(feature = "parallel")]
pub fn limit_threads(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}
