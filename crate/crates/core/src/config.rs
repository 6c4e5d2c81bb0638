//! Run configuration: named presets plus flat `section.key = value` overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::inr::{InrConfig, MetaConfig};
use crate::nmar::NmarConfig;
use crate::raster::{ImageGeometry, RasterError, SinogramGeometry};
use crate::residual::ResidualConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("unknown preset `{0}` (expected desk or paper)")]
    Preset(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(ConfigError::Preset(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Detector {
    Fan,
    Parallel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub cases: usize,
    pub val_cases: usize,
    /// Incident photons per ray; zero disables noise.
    pub photons: f64,
    pub spectrum: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSettings {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorSettings {
    pub k: usize,
    pub lambda: f64,
    pub n_iter: usize,
    pub lr_refine: f64,
    pub ray_batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualSettings {
    pub net: ResidualConfig,
    pub epochs: usize,
    pub patches: usize,
    pub cases_per_step: usize,
    pub lr: f64,
    /// Upper bound on training cases used to build the residual dataset.
    pub max_cases: usize,
    /// Refinement iterations for the priors behind the residual dataset.
    pub prior_niter: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineSettings {
    pub random_seeds: usize,
    pub spread_cases: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out: PathBuf,
    pub image_size: usize,
    pub fov_mm: f64,
    pub views: usize,
    pub bins: usize,
    pub mode: Detector,
    pub data: DataConfig,
    pub inr: InrConfig,
    pub pretrain: PretrainSettings,
    pub prior: PriorSettings,
    pub nmar: NmarConfig,
    /// Minimum metal path length (mm) for a bin to join the trace.
    pub trace_tau: f64,
    pub residual: ResidualSettings,
    pub meta: MetaConfig,
    pub baseline: BaselineSettings,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            seed: 0,
            out: PathBuf::from("out"),
            image_size: 64,
            fov_mm: 200.0,
            views: 180,
            bins: 96,
            mode: Detector::Fan,
            data: DataConfig { cases: 64, val_cases: 20, photons: 1e5, spectrum: None },
            inr: InrConfig::desk(),
            pretrain: PretrainSettings { epochs: 60, batch: 4, lr: 1e-3 },
            prior: PriorSettings { k: 2, lambda: 10.0, n_iter: 200, lr_refine: 2e-5, ray_batch: 4096 },
            nmar: NmarConfig::default(),
            trace_tau: 0.0,
            residual: ResidualSettings {
                net: ResidualConfig::desk(),
                epochs: 40,
                patches: 16,
                cases_per_step: 4,
                lr: 1e-3,
                max_cases: 64,
                prior_niter: 200,
            },
            meta: MetaConfig { epochs: 4, inner_steps: 16, inner_lr: 1e-3, outer_lr: 5e-4, ray_batch: 4096, seed: 0 },
            baseline: BaselineSettings { random_seeds: 3, spread_cases: 5 },
        }
    }

    pub fn paper() -> Self {
        let desk = Self::desk();
        Self {
            preset: Preset::Paper,
            image_size: 512,
            fov_mm: 400.0,
            views: 720,
            bins: 768,
            data: DataConfig { cases: 5000, val_cases: 500, ..desk.data },
            inr: InrConfig::paper(),
            pretrain: PretrainSettings { epochs: 1000, batch: 4, lr: 1e-4 },
            prior: PriorSettings { k: 2, lambda: 10.0, n_iter: 1000, lr_refine: 5e-6, ray_batch: 4096 },
            residual: ResidualSettings {
                net: ResidualConfig::paper(),
                epochs: 200,
                patches: 16,
                cases_per_step: 1,
                lr: 1e-4,
                max_cases: 5000,
                prior_niter: 1000,
            },
            meta: MetaConfig { epochs: 1, inner_steps: 16, inner_lr: 1e-4, outer_lr: 5e-4, ray_batch: 4096, seed: 0 },
            ..desk
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Parses a config file body. `preset_override` wins over a `preset` key.
    pub fn parse(text: &str, preset_override: Option<Preset>) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat);
        let mut preset = Preset::Desk;
        for (k, v) in &flat {
            if k == "preset" {
                preset = Preset::parse(v.as_str().ok_or_else(|| bad(k, "expected a string"))?)?;
            }
        }
        let mut cfg = Self::preset(preset_override.unwrap_or(preset));
        for (k, v) in &flat {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset_override: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text, preset_override)
    }

    /// Applies one `section.key` override.
    pub fn set(&mut self, key: &str, v: &toml::Value) -> Result<()> {
        let u = || as_usize(key, v);
        let f = || as_f64(key, v);
        match key {
            "run.seed" => self.seed = as_u64(key, v)?,
            "run.out" => self.out = PathBuf::from(as_str(key, v)?),
            "image.size" => self.image_size = u()?,
            "image.fov_mm" => self.fov_mm = f()?,
            "sino.views" => self.views = u()?,
            "sino.bins" => self.bins = u()?,
            "sino.mode" => {
                self.mode = match as_str(key, v)? {
                    "fan" => Detector::Fan,
                    "parallel" => Detector::Parallel,
                    other => return Err(bad(key, &format!("unknown mode {other}"))),
                }
            }
            "data.cases" => self.data.cases = u()?,
            "data.val_cases" => self.data.val_cases = u()?,
            "data.photons" => self.data.photons = f()?,
            "data.spectrum" => self.data.spectrum = Some(PathBuf::from(as_str(key, v)?)),
            "inr.width" => self.inr.mlp_width = u()?,
            "inr.layers" => self.inr.mlp_layers = u()?,
            "inr.enc_channels" => self.inr.enc_channels = u()?,
            "inr.enc_blocks" => self.inr.enc_blocks = u()?,
            "inr.latent" => self.inr.latent = u()?,
            "inr.mu_scale" => self.inr.mu_scale = f()?,
            "inr.fourier" => self.inr.fourier = u()?,
            "pretrain.epochs" => self.pretrain.epochs = u()?,
            "pretrain.batch" => self.pretrain.batch = u()?,
            "pretrain.lr" => self.pretrain.lr = f()?,
            "prior.k" => self.prior.k = u()?,
            "prior.lambda" => self.prior.lambda = f()?,
            "prior.n_iter" => self.prior.n_iter = u()?,
            "prior.lr_refine" => self.prior.lr_refine = f()?,
            "prior.ray_batch" => self.prior.ray_batch = u()?,
            "nmar.threshold" => self.nmar.threshold = f()?,
            "nmar.dilation" => self.nmar.dilation_radius = u()?,
            "nmar.eps_floor" => self.nmar.eps_floor = f()?,
            "nmar.trace_tau" => self.trace_tau = f()?,
            "residual.channels" => {
                let arr = v.as_array().ok_or_else(|| bad(key, "expected an array"))?;
                self.residual.net.channels = arr.iter().map(|x| as_usize(key, x)).collect::<Result<_>>()?;
            }
            "residual.bottleneck" => self.residual.net.bottleneck = u()?,
            "residual.patch" => self.residual.net.patch = u()?,
            "residual.branch_width" => self.residual.net.branch_width = u()?,
            "residual.trunk_input" => self.residual.net.trunk_input = u()?,
            "residual.epochs" => self.residual.epochs = u()?,
            "residual.patches" => self.residual.patches = u()?,
            "residual.cases_per_step" => self.residual.cases_per_step = u()?,
            "residual.lr" => self.residual.lr = f()?,
            "residual.max_cases" => self.residual.max_cases = u()?,
            "residual.prior_niter" => self.residual.prior_niter = u()?,
            "meta.epochs" => self.meta.epochs = u()?,
            "meta.inner_steps" => self.meta.inner_steps = u()?,
            "meta.inner_lr" => self.meta.inner_lr = f()?,
            "meta.outer_lr" => self.meta.outer_lr = f()?,
            "meta.ray_batch" => self.meta.ray_batch = u()?,
            "baseline.random_seeds" => self.baseline.random_seeds = u()?,
            "baseline.spread_cases" => self.baseline.spread_cases = u()?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Parses `key=value` (value in config syntax) and applies it.
    pub fn set_str(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| ConfigError::Parse(format!("expected key=value, got {assignment}")))?;
        // bare words are taken as strings
        let value = match format!("v = {}", v.trim()).parse::<toml::Table>() {
            Ok(t) => t["v"].clone(),
            Err(_) => toml::Value::String(v.trim().to_string()),
        };
        self.set(k.trim(), &value)
    }

    pub fn validate(&self) -> Result<()> {
        let inv = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.image_size < 8 || self.fov_mm <= 0.0 || self.views == 0 || self.bins < 2 {
            return inv("geometry sizes out of range");
        }
        if self.data.cases == 0 || self.data.val_cases >= self.data.cases {
            return inv("data.val_cases must be below data.cases");
        }
        if self.data.photons < 0.0 {
            return inv("data.photons must be nonnegative");
        }
        if self.pretrain.batch == 0 || self.prior.ray_batch == 0 || self.meta.ray_batch == 0 {
            return inv("batch sizes must be positive");
        }
        if !(self.prior.lambda >= 0.0) || self.trace_tau < 0.0 {
            return inv("prior.lambda and nmar.trace_tau must be nonnegative");
        }
        self.inr.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.nmar.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.residual.net.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.residual.net.patch > self.image_size {
            return inv("residual.patch exceeds image.size");
        }
        if self.residual.patches == 0 || self.residual.cases_per_step == 0 || self.residual.max_cases == 0 {
            return inv("residual batch settings must be positive");
        }
        Ok(())
    }

    pub fn geometry(&self) -> std::result::Result<(ImageGeometry, SinogramGeometry), RasterError> {
        let img = ImageGeometry::new(self.image_size, self.fov_mm)?;
        let sino = match self.mode {
            Detector::Fan => SinogramGeometry::fan(self.views, self.bins, &img)?,
            Detector::Parallel => SinogramGeometry::parallel(self.views, self.bins, &img)?,
        };
        Ok((img, sino))
    }

    pub fn photons(&self) -> Option<f64> {
        (self.data.photons > 0.0).then_some(self.data.photons)
    }

    /// Fully resolved config in the file syntax; parsing it reproduces `self`.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let q = |p: &Path| format!("{:?}", p.to_string_lossy());
        let f = |x: f64| format!("{x:?}");
        kv("preset", format!("\"{}\"", self.preset.name()));
        kv("run.seed", self.seed.to_string());
        kv("run.out", q(&self.out));
        kv("image.size", self.image_size.to_string());
        kv("image.fov_mm", f(self.fov_mm));
        kv("sino.views", self.views.to_string());
        kv("sino.bins", self.bins.to_string());
        kv("sino.mode", if self.mode == Detector::Fan { "\"fan\"".into() } else { "\"parallel\"".into() });
        kv("data.cases", self.data.cases.to_string());
        kv("data.val_cases", self.data.val_cases.to_string());
        kv("data.photons", f(self.data.photons));
        if let Some(p) = &self.data.spectrum {
            kv("data.spectrum", q(p));
        }
        kv("inr.width", self.inr.mlp_width.to_string());
        kv("inr.layers", self.inr.mlp_layers.to_string());
        kv("inr.enc_channels", self.inr.enc_channels.to_string());
        kv("inr.enc_blocks", self.inr.enc_blocks.to_string());
        kv("inr.latent", self.inr.latent.to_string());
        kv("inr.mu_scale", f(self.inr.mu_scale));
        kv("inr.fourier", self.inr.fourier.to_string());
        kv("pretrain.epochs", self.pretrain.epochs.to_string());
        kv("pretrain.batch", self.pretrain.batch.to_string());
        kv("pretrain.lr", f(self.pretrain.lr));
        kv("prior.k", self.prior.k.to_string());
        kv("prior.lambda", f(self.prior.lambda));
        kv("prior.n_iter", self.prior.n_iter.to_string());
        kv("prior.lr_refine", f(self.prior.lr_refine));
        kv("prior.ray_batch", self.prior.ray_batch.to_string());
        kv("nmar.threshold", f(self.nmar.threshold));
        kv("nmar.dilation", self.nmar.dilation_radius.to_string());
        kv("nmar.eps_floor", f(self.nmar.eps_floor));
        kv("nmar.trace_tau", f(self.trace_tau));
        let r = &self.residual;
        kv("residual.channels", format!("{:?}", r.net.channels));
        kv("residual.bottleneck", r.net.bottleneck.to_string());
        kv("residual.patch", r.net.patch.to_string());
        kv("residual.branch_width", r.net.branch_width.to_string());
        kv("residual.trunk_input", r.net.trunk_input.to_string());
        kv("residual.epochs", r.epochs.to_string());
        kv("residual.patches", r.patches.to_string());
        kv("residual.cases_per_step", r.cases_per_step.to_string());
        kv("residual.lr", f(r.lr));
        kv("residual.max_cases", r.max_cases.to_string());
        kv("residual.prior_niter", r.prior_niter.to_string());
        kv("meta.epochs", self.meta.epochs.to_string());
        kv("meta.inner_steps", self.meta.inner_steps.to_string());
        kv("meta.inner_lr", f(self.meta.inner_lr));
        kv("meta.outer_lr", f(self.meta.outer_lr));
        kv("meta.ray_batch", self.meta.ray_batch.to_string());
        kv("baseline.random_seeds", self.baseline.random_seeds.to_string());
        kv("baseline.spread_cases", self.baseline.spread_cases.to_string());
        s
    }
}

fn flatten(prefix: &str, t: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(inner) => flatten(&key, inner, out),
            other => out.push((key, other.clone())),
        }
    }
}

fn bad(key: &str, msg: &str) -> ConfigError {
    ConfigError::Value { key: key.to_string(), msg: msg.to_string() }
}

fn as_str<'a>(key: &str, v: &'a toml::Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| bad(key, "expected a string"))
}

fn as_u64(key: &str, v: &toml::Value) -> Result<u64> {
    v.as_integer().and_then(|i| u64::try_from(i).ok()).ok_or_else(|| bad(key, "expected a nonnegative integer"))
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    as_u64(key, v).map(|x| x as usize)
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    v.as_float().or_else(|| v.as_integer().map(|i| i as f64)).ok_or_else(|| bad(key, "expected a number"))
}
