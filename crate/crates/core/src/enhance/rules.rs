//! Connectivity and width rules of a harmonic dense block.

use crate::error::{Error, Result};

/// Largest `m` with `2^m | l`.
pub fn two_adic(l: usize) -> u32 {
    l.trailing_zeros()
}

/// Nearest even integer, ties rounded up.
pub fn round_even(raw: f64) -> usize {
    let half = raw / 2.0;
    let r = (half + 0.5).floor();
    (2.0 * r).max(0.0) as usize
}

/// Output width of layer `l` for growth `k`: `k · 1.6^n` with `n` the
/// number of times 2 divides `l`, rounded to the nearest even integer.
pub fn channel_width(k: usize, l: usize) -> Result<usize> {
    if l < 1 {
        return Err(Error::InvalidIndex(l));
    }
    if k < 1 {
        return Err(Error::InvalidParameter("growth width must be at least 1".into()));
    }
    Ok(round_even(k as f64 * 1.6f64.powi(two_adic(l) as i32)))
}

/// Source layers of layer `l`: `{ l - 2^j : 2^j | l }`, descending. Index 0
/// is the block input.
pub fn harmonic_inputs(l: usize) -> Vec<usize> {
    if l == 0 {
        return Vec::new();
    }
    (0..=two_adic(l)).map(|j| l - (1 << j)).collect()
}

/// Width of the 1×1 bottleneck placed in front of every fourth layer: the
/// geometric mean of the surrounding widths, rounded to an even integer, at least 2.
pub fn bottleneck_channels(c_in: usize, c_out: usize) -> usize {
    round_even(((c_in * c_out) as f64).sqrt()).max(2)
}

pub fn is_bottlenecked(l: usize) -> bool {
    l > 0 && l.is_multiple_of(4)
}
