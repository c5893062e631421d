//! File formats and command-line front end for `sitegp-core`.

pub mod cli;
pub mod formats;

pub use sitegp_core as core;

/// Runs `f` and returns its result with the elapsed wall-clock seconds.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = std::time::Instant::now();
    let r = f();
    (r, t.elapsed().as_secs_f64())
}
