use std::sync::OnceLock;

/// Environment variable capping the renderer's worker threads.
pub const THREADS_ENV: &str = "MAPPER_THREADS";

/// Shared worker pool for the renderer, sized from `MAPPER_THREADS` on first
/// use (unset or `0` means one thread per core).
pub fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .thread_name(|i| format!("splat-render-{i}"))
            .build()
            .expect("failed to build renderer thread pool")
    })
}
