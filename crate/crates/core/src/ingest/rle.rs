//! Column-major run-length encoding of binary masks.
//!
//! Pixel `(row, col)` lives at linear index `col * height + row`. Counts
//! alternate background/foreground starting with background, so a mask that
//! begins with foreground has a leading zero count.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RleError {
    #[error("RLE counts sum to {sum}, expected {height}x{width} = {expected}")]
    CountMismatch {
        sum: u64,
        height: u32,
        width: u32,
        expected: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub height: u32,
    pub width: u32,
    pub counts: Vec<u32>,
}

/// One mask per prompt box, as returned by the segmentation backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    #[serde(flatten)]
    pub mask: Rle,
    /// Mask-quality score reported by the segmenter.
    pub score: f64,
}

/// Dense column-major boolean mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: u32,
    pub width: u32,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: u32, width: u32) -> Self {
        Self {
            height,
            width,
            data: vec![false; height as usize * width as usize],
        }
    }

    /// Build from column-major data; `data.len()` must equal `height * width`.
    pub fn from_column_major(height: u32, width: u32, data: Vec<bool>) -> Option<Self> {
        (data.len() == height as usize * width as usize).then_some(Self {
            height,
            width,
            data,
        })
    }

    fn index(&self, row: u32, col: u32) -> usize {
        col as usize * self.height as usize + row as usize
    }

    pub fn get(&self, row: u32, col: u32) -> bool {
        self.data[self.index(row, col)]
    }

    pub fn set(&mut self, row: u32, col: u32, value: bool) {
        let i = self.index(row, col);
        self.data[i] = value;
    }

    pub fn as_column_major(&self) -> &[bool] {
        &self.data
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

impl Rle {
    pub fn pixel_count(&self) -> u64 {
        self.height as u64 * self.width as u64
    }

    pub fn validate(&self) -> Result<(), RleError> {
        let sum: u64 = self.counts.iter().map(|&c| c as u64).sum();
        let expected = self.pixel_count();
        if sum != expected {
            return Err(RleError::CountMismatch {
                sum,
                height: self.height,
                width: self.width,
                expected,
            });
        }
        Ok(())
    }

    /// Foreground runs as half-open linear index ranges.
    fn foreground_runs(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut pos = 0u64;
        self.counts.iter().enumerate().filter_map(move |(i, &c)| {
            let start = pos;
            pos += c as u64;
            (i % 2 == 1 && c > 0).then_some((start, pos))
        })
    }

    /// Inclusive pixel extents `(min_row, max_row, min_col, max_col)` of the
    /// foreground, or `None` for an empty mask. Works on runs directly: a run
    /// spanning several columns touches every row.
    pub fn foreground_extent(&self) -> Result<Option<(u32, u32, u32, u32)>, RleError> {
        self.validate()?;
        let h = self.height as u64;
        let mut ext: Option<(u64, u64, u64, u64)> = None;
        for (start, end) in self.foreground_runs() {
            let last = end - 1;
            let (c0, c1) = (start / h, last / h);
            let (r0, r1) = if c0 == c1 {
                (start % h, last % h)
            } else {
                (0, h - 1)
            };
            ext = Some(match ext {
                None => (r0, r1, c0, c1),
                Some((a, b, c, d)) => (a.min(r0), b.max(r1), c.min(c0), d.max(c1)),
            });
        }
        Ok(ext.map(|(a, b, c, d)| (a as u32, b as u32, c as u32, d as u32)))
    }
}

pub fn decode_rle(rle: &Rle) -> Result<BinaryMask, RleError> {
    rle.validate()?;
    let mut data = Vec::with_capacity(rle.pixel_count() as usize);
    for (i, &c) in rle.counts.iter().enumerate() {
        data.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
    }
    Ok(BinaryMask {
        height: rle.height,
        width: rle.width,
        data,
    })
}

pub fn encode_rle(mask: &BinaryMask) -> Rle {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &v in &mask.data {
        if v != current {
            counts.push(run);
            run = 0;
            current = v;
        }
        run += 1;
    }
    counts.push(run);
    Rle {
        height: mask.height,
        width: mask.width,
        counts,
    }
}
