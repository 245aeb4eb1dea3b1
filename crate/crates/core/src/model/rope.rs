//! Rotary position embedding on interleaved dimension pairs.

use num_traits::Float;

use crate::error::{Error, Result};

pub const ROPE_BASE: f64 = 10_000.0;

/// Rotation frequency of pair `i` for a head of width `head_dim`.
pub fn rope_frequency(i: usize, head_dim: usize) -> f64 {
    ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64)
}

/// Rotates every head vector of `x` (concatenated, `head_dim` wide) by its
/// position: pair `(2i, 2i + 1)` turns by `position * base^(-2i / head_dim)`.
///
/// Angles are evaluated in double precision and then cast to `T`.
pub fn rope_rotate<T: Float>(x: &[T], head_dim: usize, positions: &[usize]) -> Result<Vec<T>> {
    if head_dim == 0 || head_dim % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "rotary head dimension must be even, got {head_dim}"
        )));
    }
    if x.len() != head_dim * positions.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} values for {} positions of width {head_dim}",
            x.len(),
            positions.len()
        )));
    }
    let mut out = x.to_vec();
    for (vec, &pos) in out.chunks_exact_mut(head_dim).zip(positions) {
        for i in 0..head_dim / 2 {
            let angle = pos as f64 * rope_frequency(i, head_dim);
            let (sin, cos) = angle.sin_cos();
            let (c, s) = (T::from(cos).unwrap(), T::from(sin).unwrap());
            let (a, b) = (vec[2 * i], vec[2 * i + 1]);
            vec[2 * i] = a * c - b * s;
            vec[2 * i + 1] = a * s + b * c;
        }
    }
    Ok(out)
}

/// Precomputed cos/sin for positions `0..len`.
#[derive(Debug, Clone)]
pub(crate) struct RopeTable {
    head_dim: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub(crate) fn new(len: usize, head_dim: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for pos in 0..len {
            for i in 0..half {
                let (s, c) = (pos as f64 * rope_frequency(i, head_dim)).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        Self { head_dim, cos, sin }
    }

    /// Rotates `row` (one head vector) at `pos`; `inverse` turns the other way.
    #[inline]
    pub(crate) fn apply(&self, row: &mut [f64], pos: usize, inverse: bool) {
        let half = self.head_dim / 2;
        let base = pos * half;
        for i in 0..half {
            let c = self.cos[base + i];
            let s = if inverse { -self.sin[base + i] } else { self.sin[base + i] };
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * c - b * s;
            row[2 * i + 1] = a * s + b * c;
        }
    }
}
