//! Grid types for images, sinograms and binary masks, and the `MGMR`
//! binary raster format every other module persists through.
//!
//! Layout on disk:
//!
//! ```text
//! "MGMR" | version u16 LE (=1) | dtype u8 (0=f32, 1=u8) | ndim u8 | dims u32 LE * ndim | payload LE row-major
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"MGMR";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U8: u8 = 1;

/// Attenuation of water at roughly 60 keV, in 1/mm.
pub const DEFAULT_MU_WATER: f64 = 0.0192;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected \"MGMR\"")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("truncated header")]
    TruncatedHeader,
    #[error("dimension {0} does not fit in u32")]
    DimsOverflow(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid geometry: {0}")]
    Geometry(String),
}

pub type Result<T> = std::result::Result<T, RasterError>;

/// Square pixel grid covering a field of view of `fov_mm` millimetres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageGeometry {
    pub n_rows: usize,
    pub n_cols: usize,
    pub fov_mm: f64,
}

impl ImageGeometry {
    pub fn new(n: usize, fov_mm: f64) -> Result<Self> {
        let geom = Self { n_rows: n, n_cols: n, fov_mm };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rows == 0 || self.n_rows != self.n_cols {
            return Err(RasterError::Geometry(format!(
                "image grid must be square and nonempty, got {}x{}",
                self.n_rows, self.n_cols
            )));
        }
        if !(self.fov_mm > 0.0 && self.fov_mm.is_finite()) {
            return Err(RasterError::Geometry(format!("fov_mm must be positive, got {}", self.fov_mm)));
        }
        Ok(())
    }

    pub fn pixel_spacing(&self) -> f64 {
        self.fov_mm / self.n_cols as f64
    }

    pub fn len(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Radius of the disk inscribed in the field of view.
    pub fn fov_radius(&self) -> f64 {
        0.5 * self.fov_mm
    }

    /// Physical position (mm) of a pixel centre. Row 0 is the top row (+y).
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let d = self.pixel_spacing();
        let half = 0.5 * self.fov_mm;
        ((col as f64 + 0.5) * d - half, half - (row as f64 + 0.5) * d)
    }

    /// Continuous (row, col) index of a physical position, pixel centres at integers.
    pub fn to_index(&self, x: f64, y: f64) -> (f64, f64) {
        let d = self.pixel_spacing();
        let half = 0.5 * self.fov_mm;
        ((half - y) / d - 0.5, (x + half) / d - 0.5)
    }

    /// Pixel centre mapped to normalized coordinates in [-1, 1]^2.
    pub fn normalized_center(&self, row: usize, col: usize) -> (f64, f64) {
        let (x, y) = self.pixel_center(row, col);
        let half = 0.5 * self.fov_mm;
        (x / half, y / half)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DetectorMode {
    /// Equiangular curved detector; `pitch` is the angular bin pitch in radians.
    FanCurved { source_to_iso_mm: f64, source_to_det_mm: f64 },
    /// Parallel beam; `pitch` is the bin pitch in mm.
    Parallel,
}

/// Acquisition geometry. Views are uniformly spaced over [0, 2π); detector
/// bin centres are symmetric about the central ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinogramGeometry {
    pub n_views: usize,
    pub n_bins: usize,
    pub mode: DetectorMode,
    /// Radians per bin in fan mode, millimetres per bin in parallel mode.
    pub pitch: f64,
}

impl SinogramGeometry {
    /// Parallel geometry whose detector spans the FOV with a 10% margin.
    pub fn parallel(n_views: usize, n_bins: usize, img: &ImageGeometry) -> Result<Self> {
        let geom = Self {
            n_views,
            n_bins,
            mode: DetectorMode::Parallel,
            pitch: img.fov_mm * 1.1 / n_bins as f64,
        };
        geom.validate(img)?;
        Ok(geom)
    }

    /// Fan geometry with source-to-isocentre 2·FOV and source-to-detector 4·FOV;
    /// the fan covers the FOV disk with a 10% angular margin.
    pub fn fan(n_views: usize, n_bins: usize, img: &ImageGeometry) -> Result<Self> {
        let src_iso = 2.0 * img.fov_mm;
        let src_det = 4.0 * img.fov_mm;
        let half_fan = (img.fov_radius() / src_iso).asin();
        let geom = Self {
            n_views,
            n_bins,
            mode: DetectorMode::FanCurved { source_to_iso_mm: src_iso, source_to_det_mm: src_det },
            pitch: 2.0 * half_fan * 1.1 / n_bins as f64,
        };
        geom.validate(img)?;
        Ok(geom)
    }

    pub fn validate(&self, img: &ImageGeometry) -> Result<()> {
        if self.n_views < 4 || self.n_bins < 8 {
            return Err(RasterError::Geometry(format!(
                "need n_views >= 4 and n_bins >= 8, got {} x {}",
                self.n_views, self.n_bins
            )));
        }
        if !(self.pitch > 0.0 && self.pitch.is_finite()) {
            return Err(RasterError::Geometry("detector pitch must be positive".into()));
        }
        if let DetectorMode::FanCurved { source_to_iso_mm, source_to_det_mm } = self.mode {
            if !(source_to_det_mm > source_to_iso_mm && source_to_iso_mm > img.fov_radius()) {
                return Err(RasterError::Geometry(
                    "fan mode requires source_to_det > source_to_iso > fov radius".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_views * self.n_bins
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn view_angle(&self, view: usize) -> f64 {
        2.0 * std::f64::consts::PI * view as f64 / self.n_views as f64
    }

    /// Detector coordinate of a bin centre (radians in fan mode, mm in parallel mode).
    pub fn bin_center(&self, bin: usize) -> f64 {
        (bin as f64 - 0.5 * (self.n_bins as f64 - 1.0)) * self.pitch
    }

    pub fn is_fan(&self) -> bool {
        matches!(self.mode, DetectorMode::FanCurved { .. })
    }
}

/// Scalar attenuation image (1/mm), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub geometry: ImageGeometry,
    pub values: Vec<f32>,
}

impl Image {
    pub fn zeros(geometry: ImageGeometry) -> Self {
        Self { geometry, values: vec![0.0; geometry.len()] }
    }

    pub fn from_values(geometry: ImageGeometry, values: Vec<f32>) -> Result<Self> {
        if values.len() != geometry.len() {
            return Err(RasterError::Shape(format!(
                "image needs {} values, got {}",
                geometry.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RasterError::Shape("image values must be finite".into()));
        }
        Ok(Self { geometry, values })
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.geometry.n_cols + col]
    }

    pub fn to_raster(&self) -> Raster {
        Raster::f32(vec![self.geometry.n_rows, self.geometry.n_cols], self.values.clone())
    }

    pub fn from_raster(raster: Raster, geometry: ImageGeometry) -> Result<Self> {
        raster.expect_dims(&[geometry.n_rows, geometry.n_cols])?;
        Self::from_values(geometry, raster.into_f32()?)
    }

    /// Hounsfield units: 1000 (μ − μ_water) / μ_water.
    pub fn to_hu(&self, mu_water: f64) -> Image {
        let values = self
            .values
            .iter()
            .map(|&v| (1000.0 * (v as f64 - mu_water) / mu_water) as f32)
            .collect();
        Image { geometry: self.geometry, values }
    }

    pub fn from_hu(hu: &Image, mu_water: f64) -> Image {
        let values = hu
            .values
            .iter()
            .map(|&h| (mu_water * (1.0 + h as f64 / 1000.0)) as f32)
            .collect();
        Image { geometry: hu.geometry, values }
    }

    pub fn sub(&self, other: &Image) -> Image {
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Image { geometry: self.geometry, values }
    }

    /// Negative attenuation set to zero.
    pub fn nonnegative(&self) -> Image {
        Image { geometry: self.geometry, values: self.values.iter().map(|v| v.max(0.0)).collect() }
    }
}

/// Line-integral measurements, view-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub geometry: SinogramGeometry,
    pub values: Vec<f32>,
}

impl Sinogram {
    pub fn zeros(geometry: SinogramGeometry) -> Self {
        Self { geometry, values: vec![0.0; geometry.len()] }
    }

    pub fn from_values(geometry: SinogramGeometry, values: Vec<f32>) -> Result<Self> {
        if values.len() != geometry.len() {
            return Err(RasterError::Shape(format!(
                "sinogram needs {} values, got {}",
                geometry.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RasterError::Shape("sinogram values must be finite".into()));
        }
        Ok(Self { geometry, values })
    }

    pub fn row(&self, view: usize) -> &[f32] {
        let n = self.geometry.n_bins;
        &self.values[view * n..(view + 1) * n]
    }

    pub fn to_raster(&self) -> Raster {
        Raster::f32(vec![self.geometry.n_views, self.geometry.n_bins], self.values.clone())
    }

    pub fn from_raster(raster: Raster, geometry: SinogramGeometry) -> Result<Self> {
        raster.expect_dims(&[geometry.n_views, geometry.n_bins])?;
        Self::from_values(geometry, raster.into_f32()?)
    }

    pub fn sub(&self, other: &Sinogram) -> Sinogram {
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Sinogram { geometry: self.geometry, values }
    }

    /// Entries outside the trace set to zero, i.e. χ_T · P.
    pub fn masked(&self, trace: &MetalTrace) -> Sinogram {
        let values = self
            .values
            .iter()
            .zip(&trace.bits)
            .map(|(&v, &b)| if b { v } else { 0.0 })
            .collect();
        Sinogram { geometry: self.geometry, values }
    }
}

/// Characteristic function χ_D of the metal region on the image grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MetalMask {
    pub geometry: ImageGeometry,
    pub bits: Vec<bool>,
}

impl MetalMask {
    pub fn empty(geometry: ImageGeometry) -> Self {
        Self { geometry, bits: vec![false; geometry.len()] }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.geometry.n_cols + col]
    }

    pub fn to_image(&self) -> Image {
        let values = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Image { geometry: self.geometry, values }
    }

    pub fn to_raster(&self) -> Raster {
        Raster::u8(
            vec![self.geometry.n_rows, self.geometry.n_cols],
            self.bits.iter().map(|&b| b as u8).collect(),
        )
    }

    pub fn from_raster(raster: Raster, geometry: ImageGeometry) -> Result<Self> {
        raster.expect_dims(&[geometry.n_rows, geometry.n_cols])?;
        Ok(Self { geometry, bits: raster.into_u8()?.into_iter().map(|b| b != 0).collect() })
    }
}

/// Characteristic function χ_T of the metal trace on the sinogram grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MetalTrace {
    pub geometry: SinogramGeometry,
    pub bits: Vec<bool>,
}

impl MetalTrace {
    pub fn empty(geometry: SinogramGeometry) -> Self {
        Self { geometry, bits: vec![false; geometry.len()] }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn row(&self, view: usize) -> &[bool] {
        let n = self.geometry.n_bins;
        &self.bits[view * n..(view + 1) * n]
    }

    pub fn to_raster(&self) -> Raster {
        Raster::u8(
            vec![self.geometry.n_views, self.geometry.n_bins],
            self.bits.iter().map(|&b| b as u8).collect(),
        )
    }

    pub fn from_raster(raster: Raster, geometry: SinogramGeometry) -> Result<Self> {
        raster.expect_dims(&[geometry.n_views, geometry.n_bins])?;
        Ok(Self { geometry, bits: raster.into_u8()?.into_iter().map(|b| b != 0).collect() })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RasterData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

/// Generic n-d array as stored in an `MGMR` file.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub dims: Vec<usize>,
    pub data: RasterData,
}

impl Raster {
    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data: RasterData::F32(data) }
    }

    pub fn u8(dims: Vec<usize>, data: Vec<u8>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data: RasterData::U8(data) }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn expect_dims(&self, dims: &[usize]) -> Result<()> {
        if self.dims != dims {
            return Err(RasterError::Shape(format!("expected dims {:?}, file has {:?}", dims, self.dims)));
        }
        Ok(())
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            RasterData::F32(v) => Ok(v),
            RasterData::U8(_) => Err(RasterError::Shape("expected f32 payload, found u8".into())),
        }
    }

    pub fn into_u8(self) -> Result<Vec<u8>> {
        match self.data {
            RasterData::U8(v) => Ok(v),
            RasterData::F32(_) => Err(RasterError::Shape("expected u8 payload, found f32".into())),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.dims.len() > u8::MAX as usize {
            return Err(RasterError::Shape("too many dimensions".into()));
        }
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match self.data {
            RasterData::F32(_) => DTYPE_F32,
            RasterData::U8(_) => DTYPE_U8,
        });
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            let d32 = u32::try_from(d).map_err(|_| RasterError::DimsOverflow(d))?;
            out.extend_from_slice(&d32.to_le_bytes());
        }
        match &self.data {
            RasterData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RasterData::U8(v) => out.extend_from_slice(v),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(RasterError::TruncatedHeader);
        }
        if &bytes[..4] != MAGIC {
            return Err(RasterError::BadMagic);
        }
        if bytes.len() < 8 {
            return Err(RasterError::TruncatedHeader);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(RasterError::UnsupportedVersion(version));
        }
        let dtype = bytes[6];
        if dtype != DTYPE_F32 && dtype != DTYPE_U8 {
            return Err(RasterError::UnsupportedDtype(dtype));
        }
        let ndim = bytes[7] as usize;
        let header_len = 8 + 4 * ndim;
        if bytes.len() < header_len {
            return Err(RasterError::TruncatedHeader);
        }
        let dims: Vec<usize> = bytes[8..header_len]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(RasterError::Shape("element count overflows".into()))?;
        let elem = if dtype == DTYPE_F32 { 4 } else { 1 };
        let expected = count
            .checked_mul(elem)
            .ok_or(RasterError::Shape("payload size overflows".into()))?;
        let payload = &bytes[header_len..];
        if payload.len() < expected {
            return Err(RasterError::TruncatedPayload { expected, found: payload.len() });
        }
        let payload = &payload[..expected];
        let data = if dtype == DTYPE_F32 {
            RasterData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        } else {
            RasterData::U8(payload.to_vec())
        };
        Ok(Self { dims, data })
    }
}

pub fn write_raster(path: impl AsRef<Path>, raster: &Raster) -> Result<()> {
    let bytes = raster.encode()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    Raster::decode(&bytes)
}

/// 8-bit binary PGM (P5) of an image in HU with window width/level applied.
pub fn write_pgm(path: impl AsRef<Path>, img: &Image, mu_water: f64, window: f64, level: f64) -> Result<()> {
    let hu = img.to_hu(mu_water);
    let lo = level - 0.5 * window;
    let mut out = format!("P5\n{} {}\n255\n", img.geometry.n_cols, img.geometry.n_rows).into_bytes();
    out.extend(hu.values.iter().map(|&h| {
        let t = ((h as f64 - lo) / window).clamp(0.0, 1.0);
        (t * 255.0).round() as u8
    }));
    std::fs::write(path, out)?;
    Ok(())
}
