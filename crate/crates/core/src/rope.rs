//! Rotary positional transformation and its inverse.
//!
//! Pairs are interleaved: components `(2j, 2j+1)` are rotated by
//! `position · θ_j` with `θ_j = base^(-2j/dim)`. De-roping rotates a vector
//! back to position 0.

use crate::error::{Result, SaapError};
use crate::tensor::TensorBlock;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeConfig {
    pub dim: usize,
    pub base_theta: f64,
}

impl RopeConfig {
    pub fn new(dim: usize, base_theta: f64) -> Result<Self> {
        let cfg = Self { dim, base_theta };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `dim` with the conventional base of 10000.
    pub fn with_dim(dim: usize) -> Result<Self> {
        Self::new(dim, 10_000.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim % 2 != 0 {
            return Err(SaapError::invalid(format!("rope dimension must be even, got {}", self.dim)));
        }
        if !(self.base_theta > 0.0 && self.base_theta.is_finite()) {
            return Err(SaapError::invalid(format!("rope base must be positive, got {}", self.base_theta)));
        }
        Ok(())
    }

    /// Rotation frequency of pair `j`.
    pub fn frequency(&self, j: usize) -> f64 {
        self.base_theta.powf(-2.0 * j as f64 / self.dim as f64)
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.dim / 2).map(|j| self.frequency(j)).collect()
    }
}

fn check(x_len: usize, cfg: &RopeConfig) -> Result<()> {
    cfg.validate()?;
    if x_len != cfg.dim {
        return Err(SaapError::shape(format!("vector of length {x_len}"), format!("rope dim {}", cfg.dim)));
    }
    Ok(())
}

fn rotate_in_place(x: &mut [f64], position: f64, cfg: &RopeConfig, sign: f64) {
    for j in 0..cfg.dim / 2 {
        let angle = sign * position * cfg.frequency(j);
        let (s, c) = angle.sin_cos();
        let (a, b) = (x[2 * j], x[2 * j + 1]);
        x[2 * j] = a * c - b * s;
        x[2 * j + 1] = a * s + b * c;
    }
}

/// Rotates `x` to `position`.
pub fn rope_apply(x: &[f32], position: usize, cfg: &RopeConfig) -> Result<Vec<f32>> {
    check(x.len(), cfg)?;
    let mut v: Vec<f64> = x.iter().map(|&a| a as f64).collect();
    rotate_in_place(&mut v, position as f64, cfg, 1.0);
    Ok(v.into_iter().map(|a| a as f32).collect())
}

/// Undoes [`rope_apply`] at the same position.
pub fn rope_remove(x: &[f32], position: usize, cfg: &RopeConfig) -> Result<Vec<f32>> {
    check(x.len(), cfg)?;
    let mut v: Vec<f64> = x.iter().map(|&a| a as f64).collect();
    rotate_in_place(&mut v, position as f64, cfg, -1.0);
    Ok(v.into_iter().map(|a| a as f32).collect())
}

/// f64 variant of [`rope_apply`], in place.
pub fn rope_apply_f64(x: &mut [f64], position: usize, cfg: &RopeConfig) -> Result<()> {
    check(x.len(), cfg)?;
    rotate_in_place(x, position as f64, cfg, 1.0);
    Ok(())
}

/// f64 variant of [`rope_remove`], in place.
pub fn rope_remove_f64(x: &mut [f64], position: usize, cfg: &RopeConfig) -> Result<()> {
    check(x.len(), cfg)?;
    rotate_in_place(x, position as f64, cfg, -1.0);
    Ok(())
}

/// Applies rope to each row at its own position.
pub fn rope_apply_block(block: &TensorBlock, positions: &[usize], cfg: &RopeConfig) -> Result<TensorBlock> {
    map_block(block, positions, cfg, rope_apply)
}

/// Removes rope from each row at its own position.
pub fn rope_remove_block(block: &TensorBlock, positions: &[usize], cfg: &RopeConfig) -> Result<TensorBlock> {
    map_block(block, positions, cfg, rope_remove)
}

fn map_block(
    block: &TensorBlock,
    positions: &[usize],
    cfg: &RopeConfig,
    f: fn(&[f32], usize, &RopeConfig) -> Result<Vec<f32>>,
) -> Result<TensorBlock> {
    if positions.len() != block.rows() {
        return Err(SaapError::shape(format!("{} rows", block.rows()), format!("{} positions", positions.len())));
    }
    let mut data = Vec::with_capacity(block.as_slice().len());
    for (row, &p) in block.iter_rows().zip(positions) {
        data.extend(f(row, p, cfg)?);
    }
    TensorBlock::new(block.rows(), block.dim(), data)
}
