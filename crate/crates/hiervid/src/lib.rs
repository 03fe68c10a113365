//! Hierarchical video representation learning toolkit: synthetic corpus
//! generation, a video/shot/frame/object data model, a gradient-checked
//! encoder, contrastive and triplet losses, training, and evaluation.

pub mod encoder;
pub mod error;
pub mod hierarchy;
pub mod pooling;
pub mod report;
pub mod seeding;
pub mod suites;
pub mod synth;

pub mod evalsuite;
pub mod losses;
pub mod trainer;

pub use error::{HvError, Result};

// Training allocates and frees many multi-megabyte activation buffers per
// step; the system allocator services those with mmap/munmap, which dominates
// wall time with page-fault overhead. mimalloc pools them instead.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;
