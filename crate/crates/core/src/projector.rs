//! Ray-driven forward projection, its exact transpose, filtered
//! backprojection and metal-trace computation.
//!
//! Rays are clipped to the disk inscribed in the field of view and sampled at
//! equispaced midpoints; each sample reads the image by bilinear
//! interpolation (zero outside the grid).

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::raster::{DetectorMode, Image, ImageGeometry, MetalMask, MetalTrace, Sinogram, SinogramGeometry};
use crate::real::Real;

/// Default sample spacing along a ray, as a fraction of the pixel spacing.
pub const DEFAULT_STEP_FRAC: f64 = 0.5;
/// Minimum projected metal path length (mm) for a bin to count as trace.
pub const DEFAULT_TRACE_TAU: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ProjectorError {
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("detector has {0} bins, which the FFT length policy cannot pad")]
    FftLength(usize),
    #[error("index out of range: view {view}, bin {bin}")]
    Index { view: usize, bin: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FilterWindow {
    #[default]
    RamLak,
    /// Ram-Lak multiplied by a cosine roll-off towards Nyquist.
    Cosine,
}

/// One sampled ray: positions in mm and the step length carried by each sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ray {
    pub samples: Vec<(f64, f64, f64)>,
}

impl Ray {
    pub fn total_weight(&self) -> f64 {
        self.samples.iter().map(|s| s.2).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
struct RayLine {
    x0: f64,
    y0: f64,
    dx: f64,
    dy: f64,
    n: usize,
    h: f64,
}

/// Geometric chord of one (view, bin) through the FOV disk: start point,
/// unit direction and length. `None` when the ray misses the disk.
fn chord(img: &ImageGeometry, sino: &SinogramGeometry, view: usize, bin: usize) -> Option<((f64, f64), (f64, f64), f64)> {
    let r = img.fov_radius();
    let phi = sino.view_angle(view);
    let s = sino.bin_center(bin);
    let (cphi, sphi) = (phi.cos(), phi.sin());
    match sino.mode {
        DetectorMode::Parallel => {
            if s.abs() >= r {
                return None;
            }
            let half = (r * r - s * s).sqrt();
            let (dx, dy) = (-sphi, cphi);
            let (px, py) = (s * cphi, s * sphi);
            Some(((px - half * dx, py - half * dy), (dx, dy), 2.0 * half))
        }
        DetectorMode::FanCurved { source_to_iso_mm, .. } => {
            let (sx, sy) = (source_to_iso_mm * cphi, source_to_iso_mm * sphi);
            let (cx, cy) = (-cphi, -sphi);
            let (cg, sg) = (s.cos(), s.sin());
            let (dx, dy) = (cx * cg - cy * sg, cx * sg + cy * cg);
            let b = sx * dx + sy * dy;
            let c = sx * sx + sy * sy - r * r;
            let disc = b * b - c;
            if disc <= 0.0 {
                return None;
            }
            let root = disc.sqrt();
            let t0 = -b - root;
            Some(((sx + t0 * dx, sy + t0 * dy), (dx, dy), 2.0 * root))
        }
    }
}

/// Samples a single ray; weights sum to the chord length through the FOV disk.
pub fn build_ray(
    img: &ImageGeometry,
    sino: &SinogramGeometry,
    view: usize,
    bin: usize,
    step_frac: f64,
) -> Result<Ray, ProjectorError> {
    if view >= sino.n_views || bin >= sino.n_bins {
        return Err(ProjectorError::Index { view, bin });
    }
    if !(step_frac > 0.0 && step_frac <= 1.0) {
        return Err(ProjectorError::Geometry(format!("step_frac must lie in (0, 1], got {step_frac}")));
    }
    let Some(line) = ray_line(img, sino, view, bin, step_frac) else {
        return Ok(Ray::default());
    };
    let samples = (0..line.n)
        .map(|k| {
            let t = (k as f64 + 0.5) * line.h;
            (line.x0 + t * line.dx, line.y0 + t * line.dy, line.h)
        })
        .collect();
    Ok(Ray { samples })
}

fn ray_line(img: &ImageGeometry, sino: &SinogramGeometry, view: usize, bin: usize, step_frac: f64) -> Option<RayLine> {
    let ((x0, y0), (dx, dy), len) = chord(img, sino, view, bin)?;
    let step = step_frac * img.pixel_spacing();
    let n = (len / step).ceil().max(1.0) as usize;
    Some(RayLine { x0, y0, dx, dy, n, h: len / n as f64 })
}

/// Bilinear stencil of a physical point: up to four (flat index, weight) pairs.
#[inline]
fn stencil(img: &ImageGeometry, x: f64, y: f64) -> [(usize, f64); 4] {
    let (r, c) = img.to_index(x, y);
    let (r0, c0) = (r.floor(), c.floor());
    let (fr, fc) = (r - r0, c - c0);
    let (r0, c0) = (r0 as isize, c0 as isize);
    let (nr, nc) = (img.n_rows as isize, img.n_cols as isize);
    let mut out = [(0usize, 0.0f64); 4];
    let corners = [
        (r0, c0, (1.0 - fr) * (1.0 - fc)),
        (r0, c0 + 1, (1.0 - fr) * fc),
        (r0 + 1, c0, fr * (1.0 - fc)),
        (r0 + 1, c0 + 1, fr * fc),
    ];
    for (slot, &(rr, cc, w)) in out.iter_mut().zip(&corners) {
        if rr >= 0 && rr < nr && cc >= 0 && cc < nc {
            *slot = ((rr * nc + cc) as usize, w);
        }
    }
    out
}

/// Forward projector with precomputed ray lines and FBP filter.
#[derive(Clone)]
pub struct Projector {
    pub img: ImageGeometry,
    pub sino: SinogramGeometry,
    pub step_frac: f64,
    lines: Vec<Option<RayLine>>,
}

impl std::fmt::Debug for Projector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Projector")
            .field("img", &self.img)
            .field("sino", &self.sino)
            .field("step_frac", &self.step_frac)
            .finish()
    }
}

impl Projector {
    pub fn new(img: ImageGeometry, sino: SinogramGeometry) -> Result<Self, ProjectorError> {
        Self::with_step(img, sino, DEFAULT_STEP_FRAC)
    }

    pub fn with_step(img: ImageGeometry, sino: SinogramGeometry, step_frac: f64) -> Result<Self, ProjectorError> {
        img.validate().map_err(|e| ProjectorError::Geometry(e.to_string()))?;
        sino.validate(&img).map_err(|e| ProjectorError::Geometry(e.to_string()))?;
        if !(step_frac > 0.0 && step_frac <= 1.0) {
            return Err(ProjectorError::Geometry(format!("step_frac must lie in (0, 1], got {step_frac}")));
        }
        let lines = (0..sino.len())
            .map(|i| ray_line(&img, &sino, i / sino.n_bins, i % sino.n_bins, step_frac))
            .collect();
        Ok(Self { img, sino, step_frac, lines })
    }

    pub fn n_rays(&self) -> usize {
        self.lines.len()
    }

    /// Whether ray `idx` intersects the field of view.
    pub fn crosses(&self, idx: usize) -> bool {
        self.lines[idx].is_some()
    }

    /// Line integral of a row-major pixel field along ray `idx` (view-major index).
    #[inline]
    pub fn ray_integral<T: Real>(&self, values: &[T], idx: usize) -> T {
        let Some(line) = self.lines[idx] else {
            return T::zero();
        };
        let mut acc = 0.0f64;
        for k in 0..line.n {
            let t = (k as f64 + 0.5) * line.h;
            for (p, w) in stencil(&self.img, line.x0 + t * line.dx, line.y0 + t * line.dy) {
                if w != 0.0 {
                    acc += w * values[p].as_f64();
                }
            }
        }
        T::of(acc * line.h)
    }

    /// Scatters `weight` along ray `idx` into `out` (transpose of `ray_integral`).
    #[inline]
    pub fn ray_scatter<T: Real>(&self, weight: T, idx: usize, out: &mut [T]) {
        let Some(line) = self.lines[idx] else {
            return;
        };
        let wh = weight.as_f64() * line.h;
        if wh == 0.0 {
            return;
        }
        for k in 0..line.n {
            let t = (k as f64 + 0.5) * line.h;
            for (p, w) in stencil(&self.img, line.x0 + t * line.dx, line.y0 + t * line.dy) {
                if w != 0.0 {
                    out[p] = out[p] + T::of(w * wh);
                }
            }
        }
    }

    /// Projects a pixel field onto every ray.
    pub fn project_values<T: Real>(&self, values: &[T]) -> Vec<T> {
        assert_eq!(values.len(), self.img.len());
        (0..self.n_rays()).into_par_iter().map(|i| self.ray_integral(values, i)).collect()
    }

    /// Projects onto a subset of rays.
    pub fn project_subset<T: Real>(&self, values: &[T], rays: &[usize]) -> Vec<T> {
        rays.par_iter().map(|&i| self.ray_integral(values, i)).collect()
    }

    /// Exact transpose of `project_subset`: Σ_i weights[i] · (ray i sample footprint).
    pub fn adjoint_subset<T: Real>(&self, weights: &[T], rays: &[usize]) -> Vec<T> {
        let mut out = vec![T::zero(); self.img.len()];
        for (&i, &w) in rays.iter().zip(weights) {
            self.ray_scatter(w, i, &mut out);
        }
        out
    }

    /// Exact transpose of `project_values`.
    pub fn adjoint_values<T: Real>(&self, sino: &[T]) -> Vec<T> {
        assert_eq!(sino.len(), self.n_rays());
        let mut out = vec![T::zero(); self.img.len()];
        for (i, &w) in sino.iter().enumerate() {
            self.ray_scatter(w, i, &mut out);
        }
        out
    }

    pub fn forward_project(&self, img: &Image) -> Result<Sinogram, ProjectorError> {
        self.check_image(&img.geometry)?;
        let values = self.project_values(&img.values);
        Ok(Sinogram { geometry: self.sino, values })
    }

    fn check_image(&self, geom: &ImageGeometry) -> Result<(), ProjectorError> {
        if *geom != self.img {
            return Err(ProjectorError::Geometry(format!("image {:?} vs projector {:?}", geom, self.img)));
        }
        Ok(())
    }

    fn check_sino(&self, geom: &SinogramGeometry) -> Result<(), ProjectorError> {
        if *geom != self.sino {
            return Err(ProjectorError::Geometry(format!("sinogram {:?} vs projector {:?}", geom, self.sino)));
        }
        Ok(())
    }

    /// Metal trace: bins whose projected mask path length exceeds `tau` mm.
    pub fn metal_trace(&self, mask: &MetalMask, tau: f64) -> Result<MetalTrace, ProjectorError> {
        self.check_image(&mask.geometry)?;
        if mask.is_empty() {
            return Ok(MetalTrace::empty(self.sino));
        }
        let proj = self.project_values(&mask.to_image().values);
        Ok(MetalTrace { geometry: self.sino, bits: proj.iter().map(|&v| (v as f64) > tau).collect() })
    }

    /// Filtered backprojection with the default Ram-Lak filter.
    pub fn fbp(&self, sino: &Sinogram) -> Result<Image, ProjectorError> {
        self.fbp_with(sino, FilterWindow::RamLak)
    }

    pub fn fbp_with(&self, sino: &Sinogram, window: FilterWindow) -> Result<Image, ProjectorError> {
        self.check_sino(&sino.geometry)?;
        let filtered = self.filter(&sino.values, window)?;
        let mut values = self.backproject_filtered(&filtered);
        // outside the inscribed circle some views miss the pixel
        let r2 = self.img.fov_radius().powi(2);
        for (p, v) in values.iter_mut().enumerate() {
            let (x, y) = self.img.pixel_center(p / self.img.n_cols, p % self.img.n_cols);
            if x * x + y * y > r2 {
                *v = 0.0;
            }
        }
        Ok(Image { geometry: self.img, values })
    }

    /// Pixel-driven backprojection without filtering, scaled as the discrete
    /// adjoint of the line-integral operator (pixel area over local ray spacing).
    pub fn unfiltered_backproject(&self, sino: &Sinogram) -> Result<Image, ProjectorError> {
        self.check_sino(&sino.geometry)?;
        let area = self.img.pixel_spacing().powi(2);
        let values = self.pixel_driven(&sino.values, |_, l| match self.sino.mode {
            DetectorMode::Parallel => area / self.sino.pitch,
            DetectorMode::FanCurved { .. } => area / (l * self.sino.pitch),
        });
        Ok(Image { geometry: self.img, values })
    }

    fn filter(&self, values: &[f32], window: FilterWindow) -> Result<Vec<f64>, ProjectorError> {
        let nb = self.sino.n_bins;
        let len = nb
            .checked_mul(2)
            .and_then(usize::checked_next_power_of_two)
            .ok_or(ProjectorError::FftLength(nb))?;
        let pitch = self.sino.pitch;
        let fan = self.sino.is_fan();
        // Band-limited Ram-Lak kernel sampled on the detector grid; in fan mode
        // the equiangular variant ½(γ/sin γ)² h(γ).
        let kernel_at = |n: i64| -> f64 {
            if n == 0 {
                if fan {
                    1.0 / (8.0 * pitch * pitch)
                } else {
                    1.0 / (4.0 * pitch * pitch)
                }
            } else if n % 2 == 0 {
                0.0
            } else if fan {
                let s = (n as f64 * pitch).sin();
                -1.0 / (2.0 * PI * PI * s * s)
            } else {
                let nf = n as f64 * pitch;
                -1.0 / (PI * PI * nf * nf)
            }
        };
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(len);
        let inv = planner.plan_fft_inverse(len);
        let mut kernel = vec![Complex::new(0.0, 0.0); len];
        for n in -(nb as i64 - 1)..(nb as i64) {
            kernel[n.rem_euclid(len as i64) as usize] = Complex::new(kernel_at(n) * pitch, 0.0);
        }
        fwd.process(&mut kernel);
        if window == FilterWindow::Cosine {
            for (k, v) in kernel.iter_mut().enumerate() {
                let f = k.min(len - k) as f64 / len as f64;
                *v *= (PI * f).cos();
            }
        }
        let kernel = Arc::new(kernel);
        let src_iso = match self.sino.mode {
            DetectorMode::FanCurved { source_to_iso_mm, .. } => source_to_iso_mm,
            DetectorMode::Parallel => 0.0,
        };
        let rows: Vec<Vec<f64>> = (0..self.sino.n_views)
            .into_par_iter()
            .map_init(
                || vec![Complex::new(0.0, 0.0); len],
                |buf, view| {
                    buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
                    for b in 0..nb {
                        let mut v = values[view * nb + b] as f64;
                        if fan {
                            v *= src_iso * self.sino.bin_center(b).cos();
                        }
                        buf[b] = Complex::new(v, 0.0);
                    }
                    fwd.process(buf);
                    for (c, k) in buf.iter_mut().zip(kernel.iter()) {
                        *c *= *k;
                    }
                    inv.process(buf);
                    buf[..nb].iter().map(|c| c.re / len as f64).collect()
                },
            )
            .collect();
        Ok(rows.concat())
    }

    fn backproject_filtered(&self, filtered: &[f64]) -> Vec<f32> {
        let dphi = 2.0 * PI / self.sino.n_views as f64;
        match self.sino.mode {
            DetectorMode::Parallel => self.pixel_driven(filtered, |_, _| 0.5 * dphi),
            DetectorMode::FanCurved { .. } => self.pixel_driven(filtered, |_, l| dphi / (l * l)),
        }
    }

    /// Σ_views weight(view, L) · q_view(s(x)) with linear interpolation on the
    /// detector; L is the source-to-pixel distance in fan mode.
    fn pixel_driven<S: Copy + Into<f64> + Sync>(&self, rows: &[S], weight: impl Fn(usize, f64) -> f64 + Sync) -> Vec<f32> {
        let nb = self.sino.n_bins;
        let nv = self.sino.n_views;
        let trig: Vec<(f64, f64)> = (0..nv).map(|v| {
            let a = self.sino.view_angle(v);
            (a.cos(), a.sin())
        }).collect();
        let center = 0.5 * (nb as f64 - 1.0);
        let pitch = self.sino.pitch;
        (0..self.img.len())
            .into_par_iter()
            .map(|p| {
                let (x, y) = self.img.pixel_center(p / self.img.n_cols, p % self.img.n_cols);
                let mut acc = 0.0f64;
                for (v, &(c, s)) in trig.iter().enumerate() {
                    let (coord, l) = match self.sino.mode {
                        DetectorMode::Parallel => (x * c + y * s, 1.0),
                        DetectorMode::FanCurved { source_to_iso_mm, .. } => {
                            let (vx, vy) = (x - source_to_iso_mm * c, y - source_to_iso_mm * s);
                            // central ray direction is (-c, -s)
                            let dot = -c * vx - s * vy;
                            let cross = -c * vy + s * vx;
                            (cross.atan2(dot), (vx * vx + vy * vy).sqrt())
                        }
                    };
                    let u = coord / pitch + center;
                    if u < 0.0 || u > (nb - 1) as f64 {
                        continue;
                    }
                    let i0 = (u.floor() as usize).min(nb - 2);
                    let f = u - i0 as f64;
                    let row = &rows[v * nb..(v + 1) * nb];
                    let q = (1.0 - f) * row[i0].into() + f * row[i0 + 1].into();
                    acc += weight(v, l) * q;
                }
                acc as f32
            })
            .collect()
    }
}

/// Convenience wrapper around [`Projector::forward_project`].
pub fn forward_project(img: &Image, geom_sino: &SinogramGeometry) -> Result<Sinogram, ProjectorError> {
    Projector::new(img.geometry, *geom_sino)?.forward_project(img)
}

/// Convenience wrapper around [`Projector::fbp`].
pub fn fbp(sino: &Sinogram, geom_img: &ImageGeometry) -> Result<Image, ProjectorError> {
    Projector::new(*geom_img, sino.geometry)?.fbp(sino)
}

/// Convenience wrapper around [`Projector::metal_trace`] with the default threshold.
pub fn metal_trace(mask: &MetalMask, geom_sino: &SinogramGeometry) -> Result<MetalTrace, ProjectorError> {
    Projector::new(mask.geometry, *geom_sino)?.metal_trace(mask, DEFAULT_TRACE_TAU)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn disk_image(geom: ImageGeometry, radius: f64, value: f32, supersample: usize) -> Image {
        let d = geom.pixel_spacing();
        let mut values = vec![0.0f32; geom.len()];
        for r in 0..geom.n_rows {
            for c in 0..geom.n_cols {
                let (x, y) = geom.pixel_center(r, c);
                let mut inside = 0usize;
                for i in 0..supersample {
                    for j in 0..supersample {
                        let sx = x + ((i as f64 + 0.5) / supersample as f64 - 0.5) * d;
                        let sy = y + ((j as f64 + 0.5) / supersample as f64 - 0.5) * d;
                        if sx * sx + sy * sy <= radius * radius {
                            inside += 1;
                        }
                    }
                }
                values[r * geom.n_cols + c] = value * inside as f32 / (supersample * supersample) as f32;
            }
        }
        Image::from_values(geom, values).unwrap()
    }

    #[test]
    fn central_parallel_ray_spans_fov() {
        let img = ImageGeometry::new(32, 100.0).unwrap();
        let sino = SinogramGeometry::parallel(12, 33, &img).unwrap();
        for view in 0..12 {
            let ray = build_ray(&img, &sino, view, 16, 0.5).unwrap();
            assert!((ray.total_weight() - 100.0).abs() / 100.0 < 1e-6);
        }
    }

    #[test]
    fn off_center_chord_matches_analytic() {
        let img = ImageGeometry::new(32, 100.0).unwrap();
        let sino = SinogramGeometry::parallel(8, 40, &img).unwrap();
        for bin in [3usize, 10, 25, 37] {
            let d = sino.bin_center(bin);
            let expect = 2.0 * (50.0f64 * 50.0 - d * d).sqrt();
            let ray = build_ray(&img, &sino, 3, bin, 0.3).unwrap();
            assert!((ray.total_weight() - expect).abs() / expect < 1e-9, "bin {bin}");
        }
    }

    #[test]
    fn fan_edge_ray_can_miss() {
        let img = ImageGeometry::new(16, 100.0).unwrap();
        let mut sino = SinogramGeometry::fan(8, 16, &img).unwrap();
        sino.pitch *= 3.0;
        let ray = build_ray(&img, &sino, 0, 0, 0.5).unwrap();
        assert!(ray.is_empty());
        assert_eq!(ray.total_weight(), 0.0);
        assert!(build_ray(&img, &sino, 8, 0, 0.5).is_err());
    }

    #[test]
    fn uniform_disk_central_ray() {
        let img = ImageGeometry::new(64, 128.0).unwrap();
        let sino = SinogramGeometry::parallel(16, 65, &img).unwrap();
        let disk = disk_image(img, 40.0, 0.02, 8);
        let proj = Projector::new(img, sino).unwrap().forward_project(&disk).unwrap();
        for v in 0..16 {
            let got = proj.values[v * 65 + 32] as f64;
            assert!((got - 2.0 * 40.0 * 0.02).abs() / 1.6 < 0.01, "view {v}: {got}");
        }
    }

    #[test]
    fn single_pixel_matches_dense_refinement() {
        let img = ImageGeometry::new(16, 64.0).unwrap();
        let sino = SinogramGeometry::parallel(10, 24, &img).unwrap();
        let coarse = Projector::with_step(img, sino, 0.5).unwrap();
        let mut values = vec![0.0f64; img.len()];
        values[7 * 16 + 9] = 1.0;
        let got = coarse.project_values(&values);
        // Oracle: integrate the bilinear hat of the pixel along each ray with a
        // ten times finer step, evaluated directly from the hat formula.
        let (cx, cy) = img.pixel_center(7, 9);
        let d = img.pixel_spacing();
        for view in 0..10 {
            for bin in 0..24 {
                let ray = build_ray(&img, &sino, view, bin, 0.05).unwrap();
                let oracle: f64 = ray
                    .samples
                    .iter()
                    .map(|&(x, y, w)| {
                        let hx = (1.0 - (x - cx).abs() / d).max(0.0);
                        let hy = (1.0 - (y - cy).abs() / d).max(0.0);
                        hx * hy * w
                    })
                    .sum();
                let g = got[view * 24 + bin];
                assert!((g - oracle).abs() < 0.02 * d, "view {view} bin {bin}: {g} vs {oracle}");
            }
        }
    }

    #[test]
    fn adjoint_is_exact_transpose() {
        let img = ImageGeometry::new(12, 50.0).unwrap();
        let sino = SinogramGeometry::fan(9, 14, &img).unwrap();
        let p = Projector::new(img, sino).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u: Vec<f64> = (0..img.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..sino.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = p.project_values(&u).iter().zip(&v).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(p.adjoint_values(&v)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn fbp_of_zero_is_zero() {
        let img = ImageGeometry::new(16, 64.0).unwrap();
        let sino = SinogramGeometry::fan(16, 24, &img).unwrap();
        let rec = fbp(&Sinogram::zeros(sino), &img).unwrap();
        assert!(rec.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fbp_is_zero_outside_the_scan_circle() {
        let img = ImageGeometry::new(32, 100.0).unwrap();
        let p = Projector::new(img, SinogramGeometry::fan(60, 48, &img).unwrap()).unwrap();
        let rec = p.fbp(&p.forward_project(&disk_image(img, 40.0, 0.02, 4)).unwrap()).unwrap();
        let corner = rec.values[0];
        assert_eq!(corner, 0.0);
        let centre = rec.values[16 * 32 + 16];
        assert!((centre - 0.02).abs() < 2e-3, "{centre}");
    }

    #[test]
    fn disk_interior_mean_within_three_percent() {
        let img = ImageGeometry::new(64, 200.0).unwrap();
        for sino in [SinogramGeometry::parallel(180, 96, &img).unwrap(), SinogramGeometry::fan(180, 96, &img).unwrap()] {
            let disk = disk_image(img, 70.0, 0.02, 8);
            let p = Projector::new(img, sino).unwrap();
            let rec = p.fbp(&p.forward_project(&disk).unwrap()).unwrap();
            let mut sum = 0.0;
            let mut n = 0;
            for r in 0..64 {
                for c in 0..64 {
                    let (x, y) = img.pixel_center(r, c);
                    if (x * x + y * y).sqrt() < 50.0 {
                        sum += rec.get(r, c) as f64;
                        n += 1;
                    }
                }
            }
            let mean = sum / n as f64;
            assert!((mean - 0.02).abs() / 0.02 < 0.03, "{:?}: mean {mean}", sino.mode);
        }
    }

    #[test]
    fn trace_of_empty_and_full_masks() {
        let img = ImageGeometry::new(16, 64.0).unwrap();
        let sino = SinogramGeometry::parallel(8, 16, &img).unwrap();
        assert!(metal_trace(&MetalMask::empty(img), &sino).unwrap().is_empty());
        let full = MetalMask { geometry: img, bits: vec![true; img.len()] };
        let trace = metal_trace(&full, &sino).unwrap();
        // the detector is wider than the field of view: every ray that
        // crosses the disk is traced, the outermost bins are not
        for bin in 0..sino.n_bins {
            let crosses = sino.bin_center(bin).abs() < img.fov_radius() - img.pixel_spacing();
            if crosses {
                assert!((0..sino.n_views).all(|v| trace.bits[v * sino.n_bins + bin]));
            }
        }
        assert!(trace.count() < sino.len());
        assert!(trace.count() >= sino.n_views * 12);
    }

    #[test]
    fn trace_of_center_pixel_matches_ray_test() {
        let img = ImageGeometry::new(16, 64.0).unwrap();
        let sino = SinogramGeometry::parallel(24, 32, &img).unwrap();
        let mut mask = MetalMask::empty(img);
        mask.bits[8 * 16 + 8] = true;
        let trace = metal_trace(&mask, &sino).unwrap();
        let (cx, cy) = img.pixel_center(8, 8);
        let d = img.pixel_spacing();
        for view in 0..24 {
            let phi = sino.view_angle(view);
            for bin in 0..32 {
                // signed distance from the pixel centre to the ray line
                let dist = (cx * phi.cos() + cy * phi.sin() - sino.bin_center(bin)).abs();
                let bit = trace.bits[view * 32 + bin];
                // the bilinear hat covers a square of half-width d
                if dist < 0.95 * d {
                    assert!(bit, "view {view} bin {bin} dist {dist}");
                }
                if dist >= d * std::f64::consts::SQRT_2 {
                    assert!(!bit, "view {view} bin {bin} dist {dist}");
                }
            }
        }
    }
}
