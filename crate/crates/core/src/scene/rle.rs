//! Run-length-encoded binary masks with COCO-compatible counts ordering:
//! the mask is scanned column-major (column by column, top to bottom) and
//! `counts` alternates run lengths starting with a run of zeros (which may
//! be empty).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u32>,
}

impl RleMask {
    /// Encode a mask given as a pixel predicate.
    pub fn encode(width: u32, height: u32, covered: impl Fn(u32, u32) -> bool) -> Self {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for x in 0..width {
            for y in 0..height {
                let bit = covered(x, y);
                if bit == current {
                    run += 1;
                } else {
                    counts.push(run);
                    current = bit;
                    run = 1;
                }
            }
        }
        counts.push(run);
        Self {
            width,
            height,
            counts,
        }
    }

    /// Encode from a row-major bitmap.
    pub fn from_bitmap(width: u32, height: u32, bits: &[bool]) -> Self {
        assert_eq!(bits.len(), (width * height) as usize);
        Self::encode(width, height, |x, y| bits[(y * width + x) as usize])
    }

    /// Expand back to a row-major bitmap.
    pub fn to_bitmap(&self) -> Vec<bool> {
        let mut bits = vec![false; (self.width * self.height) as usize];
        let mut pos = 0u32;
        for (i, &run) in self.counts.iter().enumerate() {
            if i % 2 == 1 {
                for p in pos..pos + run {
                    let (x, y) = (p / self.height, p % self.height);
                    bits[(y * self.width + x) as usize] = true;
                }
            }
            pos += run;
        }
        debug_assert_eq!(pos, self.width * self.height);
        bits
    }

    /// Number of set pixels.
    pub fn area(&self) -> u64 {
        self.counts
            .iter()
            .skip(1)
            .step_by(2)
            .map(|&c| u64::from(c))
            .sum()
    }

    /// Tight pixel bounds of the set pixels as `(xmin, ymin, xmax, ymax)`
    /// (inclusive), or None for an empty mask.
    pub fn tight_bbox(&self) -> Option<(u32, u32, u32, u32)> {
        let (mut xmin, mut ymin) = (u32::MAX, u32::MAX);
        let (mut xmax, mut ymax) = (0, 0);
        let mut pos = 0u32;
        let mut any = false;
        for (i, &run) in self.counts.iter().enumerate() {
            if i % 2 == 1 && run > 0 {
                any = true;
                // A run spans whole columns plus partial ends; its pixels'
                // columns are contiguous.
                let (first, last) = (pos, pos + run - 1);
                xmin = xmin.min(first / self.height);
                xmax = xmax.max(last / self.height);
                if run >= self.height {
                    ymin = 0;
                    ymax = self.height - 1;
                } else {
                    for p in first..=last {
                        ymin = ymin.min(p % self.height);
                        ymax = ymax.max(p % self.height);
                    }
                }
            }
            pos += run;
        }
        any.then_some((xmin, ymin, xmax, ymax))
    }
}
