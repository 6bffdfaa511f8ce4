//! Dataset persistence, evaluation tables, overlays and probe batches.

mod annotations;
mod dataset;
mod eval;
mod manifest;
mod overlay;

pub use annotations::{
    read_annotations, run_probe_annotations, write_annotations, ProbeAnnotation, ProbeCircle, ProbeRunOptions,
    ANNOTATION_FORMAT, ANNOTATION_VERSION,
};
pub use dataset::{generate_dataset, image_name, split_for, DatasetConfig};
pub use eval::{
    evaluate, format_table, pan_quadrant, sample_errors, stratify, tilt_level, Aggregate, EvalReport, PanQuadrant,
    SampleErrors, Scheme, StratifiedTable, Stratum,
};
pub use manifest::{
    load_manifest, read_manifest, save_manifest, verify_record, write_manifest, ManifestRecord, ManifestWriter,
    ProbeSource, Split, MANIFEST_FILE, MANIFEST_FORMAT, MANIFEST_VERSION,
};
pub use overlay::{pole_shadow_tip, render_overlay, sphere_patch, OverlayLayout};

use crate::error::{LumenError, Result};

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "LUMEN_THREADS";

/// Worker count from `explicit`, else from [`THREADS_ENV`]. `None` means
/// the global pool.
pub fn worker_threads(explicit: Option<usize>) -> Result<Option<usize>> {
    let n = match explicit {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(s) => Some(
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| LumenError::InvalidArgument(format!("{THREADS_ENV}={s:?} is not a worker count")))?,
            ),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(LumenError::InvalidArgument("worker count must be at least 1".into()));
    }
    Ok(n)
}

/// Runs `f` on a pool sized by [`worker_threads`].
pub fn with_workers<R: Send>(explicit: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match worker_threads(explicit)? {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| LumenError::InvalidArgument(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}
