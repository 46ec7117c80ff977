//! Closed-form attention cost counts.

/// Attention pattern being costed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMode {
    /// Every position attends to every position.
    Dense,
    /// Two-stage atrous attention over the whole map.
    Global,
    /// Two-stage atrous attention inside slices of `(rows, cols)` extent.
    Local { slice_rows: usize, slice_cols: usize },
}

/// Key/value positions one query reads, summed over heads and stages.
pub fn kv_positions(h: usize, w: usize, density: usize, heads: usize, mode: AttnMode) -> u64 {
    let bands = (2 * density + 1) as u64;
    let heads = heads as u64;
    match mode {
        AttnMode::Dense => heads * (h * w) as u64,
        AttnMode::Global => heads * bands * (h + w) as u64,
        AttnMode::Local { slice_rows, slice_cols } => heads * bands * (slice_rows + slice_cols) as u64,
    }
}

/// Query·key dot products for one pass over an `H × W` map.
pub fn dot_count(h: usize, w: usize, density: usize, mode: AttnMode) -> u64 {
    let n = (h * w) as u64;
    n * kv_positions(h, w, density, 1, mode)
}
