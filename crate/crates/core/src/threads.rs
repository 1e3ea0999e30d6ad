//! Worker-pool sizing. `DEMOIRE_THREADS` caps parallelism; kernels remain
//! bit-deterministic at any thread count because all reductions run in a
//! fixed order.

/// Configure the global pool from `DEMOIRE_THREADS` (no-op if unset,
/// unparsable, or already configured).
pub fn configure_from_env() {
    if let Ok(v) = std::env::var("DEMOIRE_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .ok();
            }
        }
    }
}

/// Run a closure on a dedicated single-thread pool (used by the timed
/// single-core verification runs).
pub fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("pool construction")
        .install(f)
}
