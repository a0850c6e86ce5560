//! Process-wide switches read from the environment.

use std::sync::Once;

/// Environment variable that requests deterministic execution.
pub const DETERMINISTIC_ENV: &str = "DINOISER_DETERMINISTIC";
/// Environment variable naming the directory for downloaded weights.
pub const CACHE_DIR_ENV: &str = "DINOISER_CACHE_DIR";

pub fn deterministic_requested() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1" || v.eq_ignore_ascii_case("true"))
}

static INIT: Once = Once::new();

/// Pin the global worker pool to one thread. Results are already
/// independent of thread count; this also fixes scheduling order. Has no
/// effect if the pool was built before the first call.
pub fn enable_deterministic() {
    INIT.call_once(|| {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    });
}

/// Apply the environment switch, returning whether deterministic mode is on.
pub fn init_from_env() -> bool {
    let on = deterministic_requested();
    if on {
        enable_deterministic();
    }
    on
}

pub fn cache_dir() -> Option<std::path::PathBuf> {
    std::env::var_os(CACHE_DIR_ENV).map(Into::into)
}
