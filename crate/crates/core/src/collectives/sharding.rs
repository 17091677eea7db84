//! Contiguous parameter sharding across ranks.

use std::ops::Range;

use crate::error::CoreError;

/// One rank's slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamShard {
    pub owner_rank: usize,
    pub coordinate_range: Range<usize>,
}

/// A partition of `0..dim` into one contiguous range per rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardLayout {
    dim: usize,
    ranges: Vec<Range<usize>>,
}

impl ShardLayout {
    /// Builds a layout from explicit ranges; they must be disjoint,
    /// contiguous, and cover `0..dim`.
    pub fn new(dim: usize, ranges: Vec<Range<usize>>) -> Result<Self, CoreError> {
        let mut cursor = 0usize;
        for (i, r) in ranges.iter().enumerate() {
            if r.start != cursor || r.end < r.start {
                return Err(CoreError::invalid(format!(
                    "shard ranges must partition 0..{dim}: shard {i} is {r:?}, expected start {cursor}"
                )));
            }
            cursor = r.end;
        }
        if cursor != dim {
            return Err(CoreError::invalid(format!(
                "shard ranges cover 0..{cursor}, expected 0..{dim}"
            )));
        }
        Ok(Self { dim, ranges })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shard_count(&self) -> usize {
        self.ranges.len()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn shard(&self, rank: usize) -> ParamShard {
        ParamShard {
            owner_rank: rank,
            coordinate_range: self.ranges[rank].clone(),
        }
    }
}

/// Contiguous ranges of size ceil(d/J) or floor(d/J) partitioning `0..d`.
pub fn make_even_shards(d: usize, workers: usize) -> Result<ShardLayout, CoreError> {
    if workers == 0 || d < workers {
        return Err(CoreError::invalid(format!(
            "cannot shard {d} coordinates across {workers} workers"
        )));
    }
    let big = d.div_ceil(workers);
    let small = d / workers;
    // The first `d mod J` shards take the ceiling size.
    let n_big = d - small * workers;
    let mut ranges = Vec::with_capacity(workers);
    let mut start = 0;
    for j in 0..workers {
        let len = if j < n_big || big == small { big } else { small };
        ranges.push(start..start + len);
        start += len;
    }
    ShardLayout::new(d, ranges)
}
