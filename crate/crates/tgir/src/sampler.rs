//! Placeholder.

/// One row of the per-step loss trace.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub l_pho: f64,
    pub l_tv: f64,
    pub l_neg: f64,
}
