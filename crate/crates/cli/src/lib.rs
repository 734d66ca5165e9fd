//! Experiment runner behind the `karma` binary.

pub mod commands;
pub mod config;

pub use config::{CliError, ExperimentConfig, OUTPUT_ROOT_ENV};

// Training allocates and frees multi-megabyte tape buffers every step; the
// system allocator hands those back to the kernel each time.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;
