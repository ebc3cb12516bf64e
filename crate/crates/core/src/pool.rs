//! Non-overlapping block tiling with symmetric padding.

/// Tiling of one axis of length `n` into blocks of `k`, padded on both sides
/// (the extra pixel, if any, goes after).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AxisTiling {
    pub blocks: usize,
    pub pad_before: usize,
}

impl AxisTiling {
    pub fn new(n: usize, k: usize) -> Self {
        let blocks = n.div_ceil(k);
        let pad = blocks * k - n;
        Self {
            blocks,
            pad_before: pad / 2,
        }
    }

    /// Block index of original coordinate `i`.
    #[inline]
    pub fn block_of(&self, i: usize, k: usize) -> usize {
        (i + self.pad_before) / k
    }

    /// Original coordinate backing padded coordinate `j` under edge replication.
    #[inline]
    pub fn source_of(&self, j: usize, n: usize) -> usize {
        j.saturating_sub(self.pad_before).min(n - 1)
    }
}
