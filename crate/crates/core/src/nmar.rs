//! Metal segmentation, mask dilation and normalized projection completion.

use rayon::prelude::*;
use thiserror::Error;

use crate::raster::{Image, MetalMask, MetalTrace, Sinogram};

#[derive(Debug, Error, PartialEq)]
pub enum NmarError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("metal trace is empty")]
    EmptyTrace,
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NmarConfig {
    /// Segmentation threshold in 1/mm.
    pub threshold: f64,
    pub dilation_radius: usize,
    /// Floor on the prior projection before division.
    pub eps_floor: f64,
}

impl Default for NmarConfig {
    fn default() -> Self {
        Self { threshold: 0.12, dilation_radius: 2, eps_floor: 1e-4 }
    }
}

impl NmarConfig {
    pub fn validate(&self) -> Result<(), NmarError> {
        if !(self.threshold > 0.0) {
            return Err(NmarError::Config("threshold must be positive".into()));
        }
        if !(self.eps_floor > 0.0) {
            return Err(NmarError::Config("eps_floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ErrorNorm {
    #[default]
    L2,
    LInf,
}

impl ErrorNorm {
    pub fn name(self) -> &'static str {
        match self {
            ErrorNorm::L2 => "L2",
            ErrorNorm::LInf => "Linf",
        }
    }
}

pub fn segment_metal(mu: &Image, threshold: f64) -> MetalMask {
    MetalMask {
        geometry: mu.geometry,
        bits: mu.values.iter().map(|&v| v as f64 > threshold).collect(),
    }
}

/// Dilation by the lattice disk dx² + dy² ≤ radius².
pub fn dilate(mask: &MetalMask, radius: usize) -> MetalMask {
    if radius == 0 {
        return mask.clone();
    }
    let (nr, nc) = (mask.geometry.n_rows as isize, mask.geometry.n_cols as isize);
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let mut out = vec![false; mask.bits.len()];
    for row in 0..nr {
        for col in 0..nc {
            if !mask.bits[(row * nc + col) as usize] {
                continue;
            }
            for (dy, dx) in &offsets {
                let (y, x) = (row + dy, col + dx);
                if y >= 0 && y < nr && x >= 0 && x < nc {
                    out[(y * nc + x) as usize] = true;
                }
            }
        }
    }
    MetalMask { geometry: mask.geometry, bits: out }
}

fn check(p: &Sinogram, prior: &Sinogram, trace: &MetalTrace) -> Result<(), NmarError> {
    if p.geometry != prior.geometry || p.geometry != trace.geometry {
        return Err(NmarError::Shape("sinogram, prior and trace geometries differ".into()));
    }
    Ok(())
}

/// Fills the traced entries of one row by linear interpolation between the
/// nearest untraced neighbours. Runs touching an edge hold the nearest value;
/// a fully traced row becomes 1.
fn complete_row(q: &mut [f64], traced: &[bool]) {
    let n = q.len();
    let mut i = 0;
    while i < n {
        if !traced[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && traced[i] {
            i += 1;
        }
        let left = start.checked_sub(1).map(|j| q[j]);
        let right = (i < n).then(|| q[i]);
        match (left, right) {
            (Some(a), Some(b)) => {
                let span = (i - start + 1) as f64;
                for (k, v) in q[start..i].iter_mut().enumerate() {
                    let t = (k + 1) as f64 / span;
                    *v = a + t * (b - a);
                }
            }
            (Some(a), None) => q[start..i].iter_mut().for_each(|v| *v = a),
            (None, Some(b)) => q[start..i].iter_mut().for_each(|v| *v = b),
            (None, None) => q[start..i].iter_mut().for_each(|v| *v = 1.0),
        }
    }
}

/// Normalized ratio P / max(P_prior, ε) with traced entries interpolated per view.
pub fn completed_ratio(p: &Sinogram, prior: &Sinogram, trace: &MetalTrace, eps_floor: f64) -> Result<Vec<f64>, NmarError> {
    check(p, prior, trace)?;
    let nb = p.geometry.n_bins;
    let mut q: Vec<f64> = p
        .values
        .iter()
        .zip(&prior.values)
        .map(|(&a, &b)| a as f64 / (b as f64).max(eps_floor))
        .collect();
    q.par_chunks_mut(nb)
        .zip(trace.bits.par_chunks(nb))
        .for_each(|(row, t)| complete_row(row, t));
    Ok(q)
}

/// P_NMAR: the measured sinogram off the trace, Q·P_prior on it.
pub fn nmar_complete(p: &Sinogram, prior: &Sinogram, trace: &MetalTrace, eps_floor: f64) -> Result<Sinogram, NmarError> {
    let q = completed_ratio(p, prior, trace, eps_floor)?;
    let values = (0..q.len())
        .map(|i| {
            if trace.bits[i] {
                (q[i] * (prior.values[i] as f64).max(eps_floor)) as f32
            } else {
                p.values[i]
            }
        })
        .collect();
    Ok(Sinogram { geometry: p.geometry, values })
}

/// Norm of (completed Q − 1) over the traced entries.
pub fn interpolation_error(
    p: &Sinogram,
    prior: &Sinogram,
    trace: &MetalTrace,
    eps_floor: f64,
    norm: ErrorNorm,
) -> Result<f64, NmarError> {
    check(p, prior, trace)?;
    if trace.is_empty() {
        return Err(NmarError::EmptyTrace);
    }
    let q = completed_ratio(p, prior, trace, eps_floor)?;
    let dev = q.iter().zip(&trace.bits).filter(|(_, &t)| t).map(|(v, _)| (v - 1.0).abs());
    Ok(match norm {
        ErrorNorm::L2 => dev.map(|d| d * d).sum::<f64>().sqrt(),
        ErrorNorm::LInf => dev.fold(0.0, f64::max),
    })
}
