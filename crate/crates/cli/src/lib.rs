//! Command implementations behind the `matchdiff` binary.

pub mod commands;
pub mod manifest;

use std::fs;
use std::path::Path;

use matchdiff::Result;

/// Write through a temporary sibling and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Size the global worker pool from `MATCHDIFF_THREADS` when set.
pub fn init_threads() {
    if let Some(n) = std::env::var("MATCHDIFF_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}
