//! File formats, run directories and the command-line pipeline around
//! `neurodecode-core`.

pub mod archive;
pub mod brainvision;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod tables;
pub mod trainer;

pub use error::{Error, Result};

/// Caps the rayon pool at `NEURODECODE_THREADS` workers when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("NEURODECODE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("NEURODECODE_THREADS={v:?} is not a positive integer")))?;
    // a second initialisation in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
