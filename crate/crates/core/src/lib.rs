//! Model selection for domain generalization.
//!
//! Training checkpoints are scored by a convex combination of validation
//! cross-entropy and a multi-bandwidth Gaussian MMD between seen domains,
//! after a per-run percentile filter on cross-entropy. The [`tradeoff`]
//! module computes the minimal discrepancy achievable under a risk budget on
//! finite problems and checks that it is non-increasing and convex.
//!
//! Module map:
//!
//! * [`metrics`]: distances, kernels, MMD, cross-entropy, accuracy.
//! * [`selection`]: validation loss, percentile filter, both selectors.
//! * [`tradeoff`]: finite-alphabet trade-off curves, brute force and solver.
//! * [`synth`]: synthetic spurious-correlation domains and a small trainer.
//! * [`ingest`]: checkpoint JSONL and metrics CSV formats.
//! * [`cli`]: the `dgselect` command line.

pub mod cli;
pub mod ingest;
pub mod metrics;
pub mod plot;
pub mod selection;
pub mod synth;
pub mod tradeoff;

/// Formats a float with 17 significant digits (`d.dddddddddddddddde±x`);
/// infinities as `inf`/`-inf`. Parsing the output with `str::parse` is exact.
pub fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:.16e}")
    }
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/tradeoff.md")]
    mod tradeoff {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
