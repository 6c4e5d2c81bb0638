//! Command implementations behind the CLI: dataset generation, offline
//! training, per-case inference, evaluation, ablations and the self-test.
//!
//! Everything lives under one output directory:
//!
//! ```text
//! <out>/data/      manifest.txt, spectrum.txt, case_NNNN/*.mgmr
//! <out>/models/    stages.txt, stage_k.enc, stage_k.inr, resnet.w, branch.w, meta.inr, logs
//! <out>/runs/      <case>/ stage outputs, refine_log.csv, timing.txt
//! <out>/eval/      metrics.csv, report.md
//! <out>/ablate/    <which>/ metrics.csv, deltas.csv, summary.md
//! ```

mod ablate;
mod selftest;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use ablate::{Ablation, AblationOutcome, RANDOM_SPREAD_FLOOR};
pub use selftest::{adain_checks, gradient_checks, haar_checks, nmar_checks, projector_checks, selftest, Check};

use crate::config::{ConfigError, RunConfig};
use crate::eval::{self, EvalError, MetricRow, OrderingFlag, StageSummary};
use crate::inr::{
    generate_prior, pretrain_stage, recursion_step, CaseData, InrError, InrNet, InrWeights, PretrainConfig,
    PriorConfig, PriorResult, StageBundle, TrainSample,
};
use crate::neural::{load_bundle, save_bundle, NeuralError, ParamStore};
use crate::nmar::{dilate, nmar_complete, segment_metal, NmarError};
use crate::phantom::{build_dataset, case_seed, DatasetManifest, PairedCase, PhantomError, SpectrumModel, Split, MANIFEST_FILE};
use crate::projector::{Projector, ProjectorError};
use crate::raster::{read_raster, write_pgm, write_raster, Image, MetalMask, MetalTrace, RasterError, DEFAULT_MU_WATER};
use crate::residual::{
    correct, train_residual, ResidualError, ResidualNet, ResidualSample, ResidualTrainConfig, ResidualWeights,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("strict check failed: {0}")]
    Strict(String),
    #[error("unknown ablation `{0}` (expected mu_ma, mask_cond or init)")]
    UnknownAblation(String),
    #[error("unknown stage `{0}` (expected prior, nmar or residual)")]
    UnknownStage(String),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Inr(#[from] InrError),
    #[error(transparent)]
    Residual(#[from] ResidualError),
    #[error(transparent)]
    Nmar(#[from] NmarError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Projector(#[from] ProjectorError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::UnknownAblation(_) | PipelineError::UnknownStage(_) => 2,
            PipelineError::Missing(_) => 3,
            PipelineError::Strict(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, contents).map_err(io_err(path))
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(PipelineError::Missing(path.display().to_string()));
    }
    std::fs::read_to_string(path).map_err(io_err(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(PipelineError::Missing(path.display().to_string()));
    }
    Ok(sha256_hex(&std::fs::read(path).map_err(io_err(path))?))
}

/// Stable per-purpose seed derived from the run seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let h = tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    case_seed(seed, h)
}

/// Ordered `key = value` text file used for the model manifest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues(pub Vec<(String, String)>);

impl KeyValues {
    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .filter(|l| !l.starts_with('#'))
                .filter_map(|l| l.split_once('='))
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .collect(),
        )
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.0.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.0.push((key.to_string(), value)),
        }
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.0.retain(|(k, _)| !k.starts_with(prefix));
    }

    pub fn render(&self, title: &str) -> String {
        let mut s = format!("# {title}\n");
        for (k, v) in &self.0 {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn run(&self, case: &str) -> PathBuf {
        self.runs().join(case)
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn ablate(&self, which: &str) -> PathBuf {
        self.root.join("ablate").join(which)
    }

    pub fn stage_manifest(&self) -> PathBuf {
        self.models().join("stages.txt")
    }

    pub fn stage_files(&self, k: usize) -> (PathBuf, PathBuf) {
        (self.models().join(format!("stage_{k}.enc")), self.models().join(format!("stage_{k}.inr")))
    }

    pub fn residual_files(&self) -> (PathBuf, PathBuf) {
        (self.models().join("resnet.w"), self.models().join("branch.w"))
    }

    pub fn s_res(&self) -> PathBuf {
        self.models().join("s_res")
    }
}

/// A dataset case with the segmentation and trace used by the pipeline.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub id: String,
    pub seed: u64,
    pub case: PairedCase,
    /// Thresholded metal, before dilation; conditions the residual network.
    pub segmented: MetalMask,
    pub trace: MetalTrace,
}

impl PreparedCase {
    pub fn data(&self) -> CaseData<'_> {
        CaseData { mu: &self.case.mu, sino: &self.case.sino_corrupt, trace: &self.trace }
    }
}

/// Which post-prior stages `run` executes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSet {
    pub nmar: bool,
    pub residual: bool,
}

impl StageSet {
    pub const ALL: StageSet = StageSet { nmar: true, residual: true };

    /// Comma-separated list out of prior, nmar, residual; later stages pull
    /// in the earlier ones.
    pub fn parse(list: &str) -> Result<Self> {
        let mut out = StageSet { nmar: false, residual: false };
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "prior" => {}
                "nmar" => out.nmar = true,
                "residual" => {
                    out.nmar = true;
                    out.residual = true;
                }
                other => return Err(PipelineError::UnknownStage(other.to_string())),
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub stages: StageSet,
    pub n_iter: Option<usize>,
    /// Restrict to one case directory name; default is the validation split.
    pub case: Option<String>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { stages: StageSet::ALL, n_iter: None, case: None }
    }
}

#[derive(Clone, Debug)]
pub struct CaseOutputs {
    pub id: String,
    pub prior: PriorResult,
    pub nmar: Option<Image>,
    pub corrected: Option<Image>,
    pub timing: Vec<(String, f64)>,
}

#[derive(Clone, Debug, Default)]
pub struct PretrainSummary {
    pub stage_losses: Vec<Vec<f64>>,
    pub reused_stages: Vec<usize>,
    pub residual_losses: Option<Vec<f64>>,
    pub meta_trained: bool,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub rows: Vec<MetricRow>,
    pub summary: Vec<StageSummary>,
    pub flags: Vec<OrderingFlag>,
    pub prior_gain: Option<f64>,
    /// Mean RMSE(μ_MA^(k), μ − μ*) for k = 0..=K.
    pub mu_ma_trend: Vec<f64>,
    pub failures: Vec<String>,
    pub report: String,
}

pub const PRIOR_GAIN_MIN: f64 = 2.0;

pub struct Pipeline {
    pub cfg: RunConfig,
    pub projector: Projector,
    pub spectrum: SpectrumModel,
    pub layout: Layout,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (img, sino) = cfg.geometry().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let projector = Projector::new(img, sino)?;
        let spectrum = match &cfg.data.spectrum {
            Some(path) => {
                if !path.exists() {
                    return Err(ConfigError::Invalid(format!("spectrum file {} not found", path.display())).into());
                }
                SpectrumModel::load(path).map_err(|e| ConfigError::Invalid(format!("spectrum {}: {e}", path.display())))?
            }
            None => SpectrumModel::default(),
        };
        let layout = Layout { root: cfg.out.clone() };
        Ok(Self { cfg, projector, spectrum, layout })
    }

    fn seed(&self, tag: &str) -> u64 {
        derive_seed(self.cfg.seed, tag)
    }

    pub fn gen_data(&self) -> Result<DatasetManifest> {
        let dir = self.layout.data();
        let c = &self.cfg.data;
        info!("generating {} cases ({} validation) in {}", c.cases, c.val_cases, dir.display());
        let manifest = build_dataset(&dir, c.cases, c.val_cases, &self.projector, &self.spectrum, self.cfg.photons(), self.cfg.seed)?;
        write_file(&dir.join("spectrum.txt"), self.spectrum.to_config_string())?;
        Ok(manifest)
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        let dir = self.layout.data();
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(PipelineError::Missing(format!("dataset in {} (run gen-data first)", dir.display())));
        }
        Ok(DatasetManifest::read(&dir)?)
    }

    pub fn prepare(&self, manifest: &DatasetManifest, split: Split) -> Result<Vec<PreparedCase>> {
        let entries: Vec<_> = manifest.split(split).collect();
        entries
            .par_iter()
            .map(|e| {
                let case = manifest.load_case(e, &self.projector)?;
                self.prepare_case(&e.dir, e.seed, case)
            })
            .collect()
    }

    /// Threshold, dilate and project the metal of the corrupted image.
    pub fn prepare_case(&self, id: &str, seed: u64, case: PairedCase) -> Result<PreparedCase> {
        let segmented = segment_metal(&case.mu, self.cfg.nmar.threshold);
        let dilated = dilate(&segmented, self.cfg.nmar.dilation_radius);
        let trace = self.projector.metal_trace(&dilated, self.cfg.trace_tau)?;
        Ok(PreparedCase { id: id.to_string(), seed, case, segmented, trace })
    }

    fn cfg_lines(&self, prefixes: &[&str]) -> String {
        self.cfg
            .to_config_string()
            .lines()
            .filter(|l| prefixes.iter().any(|p| l.starts_with(p)))
            .fold(String::new(), |mut s, l| {
                s.push_str(l);
                s.push('\n');
                s
            })
    }

    /// Hash of everything a pretrained stage depends on.
    fn stage_config_hash(&self) -> String {
        let mut s = self.cfg_lines(&["preset", "run.seed", "image.", "sino.", "data.", "inr.", "pretrain.", "nmar."]);
        s.push_str(&self.spectrum.to_config_string());
        sha256_hex(s.as_bytes())
    }

    fn residual_config_hash(&self, stages: &KeyValues) -> String {
        let mut s = self.cfg_lines(&["prior.", "residual."]);
        for (k, v) in &stages.0 {
            if k.starts_with("stage_") {
                let _ = writeln!(s, "{k}={v}");
            }
        }
        sha256_hex(s.as_bytes())
    }

    fn prior_config(&self, seed: u64, n_iter: usize) -> PriorConfig {
        let p = &self.cfg.prior;
        PriorConfig { k: p.k, lambda: p.lambda, n_iter, lr_refine: p.lr_refine, ray_batch: p.ray_batch, seed: derive_seed(seed, "refine") }
    }

    pub fn pretrain(&self, meta: bool) -> Result<PretrainSummary> {
        let manifest = self.manifest()?;
        let train = self.prepare(&manifest, Split::Train)?;
        let mut summary = PretrainSummary::default();
        let bundle = self.pretrain_stages(&train, &mut summary)?;
        summary.residual_losses = self.pretrain_residual(&bundle, &train)?;
        if meta {
            self.train_meta(&train)?;
            summary.meta_trained = true;
        }
        Ok(summary)
    }

    fn read_model_manifest(&self) -> KeyValues {
        std::fs::read_to_string(self.layout.stage_manifest()).map(|t| KeyValues::parse(&t)).unwrap_or_default()
    }

    fn write_model_manifest(&self, kv: &KeyValues) -> Result<()> {
        write_file(&self.layout.stage_manifest(), kv.render("mgmar model manifest"))
    }

    fn save_stage(&self, net: &InrNet, k: usize, w: &InrWeights) -> Result<(String, String)> {
        let (enc, inr) = self.layout.stage_files(k);
        std::fs::create_dir_all(self.layout.models()).map_err(io_err(&self.layout.models()))?;
        let mut header = net.header();
        header.push(("stage".into(), k.to_string()));
        save_bundle(&enc, &header, &w.psi)?;
        save_bundle(&inr, &header, &w.theta)?;
        Ok((file_hash(&enc)?, file_hash(&inr)?))
    }

    fn load_stage(&self, k: usize, template: &InrWeights, kv: &KeyValues) -> Result<InrWeights> {
        let (enc, inr) = self.layout.stage_files(k);
        for (path, key) in [(&enc, format!("stage_{k}.enc")), (&inr, format!("stage_{k}.inr"))] {
            let h = file_hash(path)?;
            if kv.get(&key) != Some(h.as_str()) {
                return Err(PipelineError::Missing(format!("{} does not match the model manifest", path.display())));
            }
        }
        let mut w = template.clone();
        load_bundle(&enc, &mut w.psi)?;
        load_bundle(&inr, &mut w.theta)?;
        Ok(w)
    }

    fn pretrain_stages(&self, train: &[PreparedCase], summary: &mut PretrainSummary) -> Result<StageBundle> {
        let (net, init) = InrNet::build(&self.cfg.inr, self.seed("inr"))?;
        let old = self.read_model_manifest();
        let cfg_hash = self.stage_config_hash();
        let mut reusable = old.get("config") == Some(cfg_hash.as_str());
        let mut kv = KeyValues::default();
        kv.set("k", self.cfg.prior.k.to_string());
        kv.set("config", cfg_hash);
        let eps = self.cfg.nmar.eps_floor;
        let mut mu_ma: Vec<Image> = train
            .par_iter()
            .map(|c| self.projector.fbp(&c.case.sino_corrupt.masked(&c.trace)))
            .collect::<std::result::Result<_, _>>()?;
        let mut w = init;
        let mut stages = Vec::new();
        let two = self.cfg.inr.in_channels == 2;
        for k in 0..=self.cfg.prior.k {
            let loaded = if reusable { self.load_stage(k, &w, &old).ok() } else { None };
            match loaded {
                Some(wk) => {
                    info!("stage {k}: reusing trained weights");
                    summary.reused_stages.push(k);
                    w = wk;
                }
                None => {
                    reusable = false;
                    let samples = train
                        .iter()
                        .zip(&mu_ma)
                        .map(|(c, ma)| {
                            Ok(TrainSample {
                                input: net.encoder_input(&c.case.mu, two.then_some(ma))?,
                                target: c.case.mu_star.values.clone(),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let pc = PretrainConfig {
                        epochs: self.cfg.pretrain.epochs,
                        batch: self.cfg.pretrain.batch,
                        lr: self.cfg.pretrain.lr,
                        seed: self.seed(&format!("pretrain{k}")),
                    };
                    let start = Instant::now();
                    let (wk, log) = pretrain_stage(&net, &w, &samples, &self.projector.img, &pc)?;
                    info!(
                        "stage {k}: {} epochs in {:.1}s, loss {:.3e} -> {:.3e}",
                        log.len(),
                        start.elapsed().as_secs_f64(),
                        log.first().copied().unwrap_or(f64::NAN),
                        log.last().copied().unwrap_or(f64::NAN)
                    );
                    write_file(&self.layout.models().join(format!("stage_{k}_log.csv")), loss_csv("epoch", &log))?;
                    summary.stage_losses.push(log);
                    w = wk;
                }
            }
            let (he, hi) = self.save_stage(&net, k, &w)?;
            kv.set(&format!("stage_{k}.enc"), he);
            kv.set(&format!("stage_{k}.inr"), hi);
            // keep residual entries only while they still describe these stages
            let mut merged = kv.clone();
            for (key, v) in &old.0 {
                if key.starts_with("residual") || key.starts_with("s_res") || key == "resnet.w" || key == "branch.w" {
                    merged.set(key, v.clone());
                }
            }
            self.write_model_manifest(&merged)?;
            stages.push(w.clone());
            if k < self.cfg.prior.k {
                mu_ma = train
                    .par_iter()
                    .zip(mu_ma.par_iter())
                    .map(|(c, ma)| recursion_step(&net, &w, &c.data(), ma, &self.projector, eps).map(|(_, next)| next))
                    .collect::<std::result::Result<_, _>>()?;
            }
        }
        Ok(StageBundle { net, stages })
    }

    pub fn load_stages(&self) -> Result<StageBundle> {
        let path = self.layout.stage_manifest();
        let kv = KeyValues::parse(&read_text(&path)?);
        let have: usize = kv.get("k").and_then(|v| v.parse().ok()).ok_or_else(|| PipelineError::Missing(format!("K in {}", path.display())))?;
        if have < self.cfg.prior.k {
            return Err(PipelineError::Missing(format!("{} trained stages, config needs {}", have + 1, self.cfg.prior.k + 1)));
        }
        let (net, mut w) = InrNet::build(&self.cfg.inr, self.seed("inr"))?;
        let mut stages = Vec::new();
        for k in 0..=self.cfg.prior.k {
            w = self.load_stage(k, &w, &kv)?;
            stages.push(w.clone());
        }
        Ok(StageBundle { net, stages })
    }

    /// NMAR completion with the prior and the reconstruction of the result.
    pub fn nmar_image(&self, c: &PreparedCase, prior: &Image) -> Result<Image> {
        let p_prior = self.projector.forward_project(&prior.nonnegative())?;
        let p_nmar = nmar_complete(&c.case.sino_corrupt, &p_prior, &c.trace, self.cfg.nmar.eps_floor)?;
        Ok(self.projector.fbp(&p_nmar)?)
    }

    fn residual_net(&self) -> Result<(ResidualNet, ResidualWeights)> {
        Ok(ResidualNet::build(&self.cfg.residual.net, self.seed("residual"))?)
    }

    pub fn residual_train_config(&self, zero_mask: bool) -> ResidualTrainConfig {
        let r = &self.cfg.residual;
        ResidualTrainConfig {
            epochs: r.epochs,
            patches_per_step: r.patches,
            cases_per_step: r.cases_per_step,
            lr: r.lr,
            seed: self.seed("residual-train"),
            zero_mask,
        }
    }

    /// Residual dataset: NMAR outputs of the first training cases, cached
    /// under models/s_res.
    fn residual_samples(&self, bundle: &StageBundle, train: &[PreparedCase], kv: &mut KeyValues, hash: &str) -> Result<Vec<ResidualSample>> {
        let n = self.cfg.residual.max_cases.min(train.len());
        let cases = &train[..n];
        let dir = self.layout.s_res();
        if kv.get("s_res.config") == Some(hash) {
            if let Ok(samples) = self.load_residual_samples(cases) {
                info!("residual dataset: reusing {} cached cases", samples.len());
                return Ok(samples);
            }
        }
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let start = Instant::now();
        let samples = cases
            .par_iter()
            .map(|c| {
                let cfg = self.prior_config(c.seed, self.cfg.residual.prior_niter);
                let prior = generate_prior(bundle, &c.data(), &cfg, &self.projector, self.cfg.nmar.eps_floor)?;
                let nmar = self.nmar_image(c, &prior.prior)?;
                write_raster(dir.join(format!("{}.mgmr", c.id)), &nmar.to_raster())?;
                Ok(ResidualSample::new(&nmar, &c.case.mu_star, &c.segmented))
            })
            .collect::<Result<Vec<_>>>()?;
        info!("residual dataset: {} cases in {:.1}s", samples.len(), start.elapsed().as_secs_f64());
        kv.set("s_res.config", hash);
        kv.set("s_res.cases", n.to_string());
        Ok(samples)
    }

    pub fn load_residual_samples(&self, cases: &[PreparedCase]) -> Result<Vec<ResidualSample>> {
        let dir = self.layout.s_res();
        cases
            .iter()
            .map(|c| {
                let path = dir.join(format!("{}.mgmr", c.id));
                if !path.exists() {
                    return Err(PipelineError::Missing(path.display().to_string()));
                }
                let nmar = Image::from_raster(read_raster(&path)?, self.projector.img)?;
                Ok(ResidualSample::new(&nmar, &c.case.mu_star, &c.segmented))
            })
            .collect()
    }

    /// Cached residual dataset for the configured number of training cases.
    pub fn cached_residual_samples(&self, train: &[PreparedCase]) -> Result<Vec<ResidualSample>> {
        let kv = self.read_model_manifest();
        let n: usize = kv
            .get("s_res.cases")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| PipelineError::Missing("residual dataset (run pretrain first)".into()))?;
        self.load_residual_samples(&train[..n.min(train.len())])
    }

    fn pretrain_residual(&self, bundle: &StageBundle, train: &[PreparedCase]) -> Result<Option<Vec<f64>>> {
        let mut kv = self.read_model_manifest();
        let hash = self.residual_config_hash(&kv);
        let (resnet, branch) = self.layout.residual_files();
        let reusable = kv.get("residual.config") == Some(hash.as_str())
            && [(&resnet, "resnet.w"), (&branch, "branch.w")]
                .iter()
                .all(|(p, key)| file_hash(p).ok().as_deref() == kv.get(key));
        if reusable {
            info!("residual network: reusing trained weights");
            return Ok(None);
        }
        let samples = self.residual_samples(bundle, train, &mut kv, &hash)?;
        self.write_model_manifest(&kv)?;
        let (net, init) = self.residual_net()?;
        let start = Instant::now();
        let (w, log) = train_residual(&net, &init, &samples, &self.residual_train_config(false))?;
        info!(
            "residual network: {} epochs in {:.1}s, loss {:.3e} -> {:.3e}",
            log.len(),
            start.elapsed().as_secs_f64(),
            log.first().copied().unwrap_or(f64::NAN),
            log.last().copied().unwrap_or(f64::NAN)
        );
        self.save_residual(&net, &w, &resnet, &branch)?;
        write_file(&self.layout.models().join("residual_log.csv"), loss_csv("epoch", &log))?;
        kv.set("residual.config", hash);
        kv.set("resnet.w", file_hash(&resnet)?);
        kv.set("branch.w", file_hash(&branch)?);
        self.write_model_manifest(&kv)?;
        Ok(Some(log))
    }

    pub fn save_residual(&self, net: &ResidualNet, w: &ResidualWeights, resnet: &Path, branch: &Path) -> Result<()> {
        if let Some(parent) = resnet.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        save_bundle(resnet, &net.header(), &w.phi)?;
        save_bundle(branch, &net.header(), &w.zeta)?;
        Ok(())
    }

    pub fn load_residual_from(&self, resnet: &Path, branch: &Path) -> Result<(ResidualNet, ResidualWeights)> {
        for p in [resnet, branch] {
            if !p.exists() {
                return Err(PipelineError::Missing(format!("{} (run pretrain first)", p.display())));
            }
        }
        let (net, mut w) = self.residual_net()?;
        load_bundle(resnet, &mut w.phi)?;
        load_bundle(branch, &mut w.zeta)?;
        Ok((net, w))
    }

    pub fn load_residual(&self) -> Result<(ResidualNet, ResidualWeights)> {
        let (resnet, branch) = self.layout.residual_files();
        self.load_residual_from(&resnet, &branch)
    }

    pub fn meta_path(&self) -> PathBuf {
        self.layout.models().join("meta.inr")
    }

    /// Reptile-style initialization of an unconditioned MLP on the clean
    /// projections of the training cases.
    pub fn train_meta(&self, train: &[PreparedCase]) -> Result<ParamStore<f32>> {
        let (net, w0) = InrNet::build(&self.cfg.inr.unconditioned(), self.seed("meta-init"))?;
        let sinos: Vec<_> = train.iter().map(|c| c.case.sino_clean.clone()).collect();
        let mc = crate::inr::MetaConfig { seed: self.seed("meta"), ..self.cfg.meta };
        let start = Instant::now();
        let theta = crate::inr::meta_init(&net, &w0.theta, &sinos, &self.projector, &mc)?;
        info!("meta initialization: {} epochs in {:.1}s", mc.epochs, start.elapsed().as_secs_f64());
        std::fs::create_dir_all(self.layout.models()).map_err(io_err(&self.layout.models()))?;
        save_bundle(self.meta_path(), &net.header(), &theta)?;
        Ok(theta)
    }

    pub fn load_meta(&self) -> Result<Option<ParamStore<f32>>> {
        let path = self.meta_path();
        if !path.exists() {
            return Ok(None);
        }
        let (_, mut w) = InrNet::build(&self.cfg.inr.unconditioned(), self.seed("meta-init"))?;
        load_bundle(&path, &mut w.theta)?;
        Ok(Some(w.theta))
    }

    fn selected_cases(&self, manifest: &DatasetManifest, case: Option<&str>) -> Result<Vec<PreparedCase>> {
        match case {
            Some(id) => {
                let entry = manifest
                    .cases
                    .iter()
                    .find(|e| e.dir == id)
                    .ok_or_else(|| PipelineError::Missing(format!("case {id} in {}", manifest.root.display())))?;
                let case = manifest.load_case(entry, &self.projector)?;
                Ok(vec![self.prepare_case(&entry.dir, entry.seed, case)?])
            }
            None => self.prepare(manifest, Split::Validation),
        }
    }

    pub fn run(&self, opts: &RunOptions) -> Result<Vec<CaseOutputs>> {
        let manifest = self.manifest()?;
        let bundle = self.load_stages()?;
        let residual = if opts.stages.residual { Some(self.load_residual()?) } else { None };
        let cases = self.selected_cases(&manifest, opts.case.as_deref())?;
        let n_iter = opts.n_iter.unwrap_or(self.cfg.prior.n_iter);
        let mut out = Vec::with_capacity(cases.len());
        for c in &cases {
            let start = Instant::now();
            let res = self.run_case(&bundle, residual.as_ref(), c, n_iter, opts.stages)?;
            self.write_case(&res, c)?;
            info!("{}: done in {:.2}s", c.id, start.elapsed().as_secs_f64());
            out.push(res);
        }
        Ok(out)
    }

    pub fn run_case(
        &self,
        bundle: &StageBundle,
        residual: Option<&(ResidualNet, ResidualWeights)>,
        c: &PreparedCase,
        n_iter: usize,
        stages: StageSet,
    ) -> Result<CaseOutputs> {
        let mut timing = Vec::new();
        let start = Instant::now();
        self.projector.fbp(&c.case.sino_corrupt)?;
        timing.push(("uncorrected".to_string(), start.elapsed().as_secs_f64()));
        let prior = generate_prior(bundle, &c.data(), &self.prior_config(c.seed, n_iter), &self.projector, self.cfg.nmar.eps_floor)?;
        timing.push(("prior@0".to_string(), prior.seconds_init));
        timing.push(("prior@refined".to_string(), prior.seconds_init + prior.seconds_refine));
        let mut elapsed = prior.seconds_init + prior.seconds_refine;
        let nmar = if stages.nmar {
            let start = Instant::now();
            let img = self.nmar_image(c, &prior.prior)?;
            elapsed += start.elapsed().as_secs_f64();
            timing.push(("nmar".to_string(), elapsed));
            Some(img)
        } else {
            None
        };
        let corrected = match (residual, &nmar) {
            (Some((net, w)), Some(img)) => {
                let start = Instant::now();
                let out = correct(net, w, img, &c.segmented, false)?;
                elapsed += start.elapsed().as_secs_f64();
                timing.push(("residual".to_string(), elapsed));
                Some(out)
            }
            _ => None,
        };
        Ok(CaseOutputs { id: c.id.clone(), prior, nmar, corrected, timing })
    }

    fn write_case(&self, res: &CaseOutputs, c: &PreparedCase) -> Result<()> {
        let dir = self.layout.run(&res.id);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let save = |name: &str, img: &Image| -> Result<()> {
            write_raster(dir.join(format!("{name}.mgmr")), &img.to_raster())?;
            write_pgm(dir.join(format!("{name}.pgm")), img, DEFAULT_MU_WATER, PGM_WINDOW, PGM_LEVEL)?;
            Ok(())
        };
        save("uncorrected", &c.case.mu)?;
        for (k, ma) in res.prior.mu_ma.iter().enumerate() {
            write_raster(dir.join(format!("mu_ma_{k}.mgmr")), &ma.to_raster())?;
        }
        save("prior_init", &res.prior.prior_init)?;
        save("prior", &res.prior.prior)?;
        if let Some(img) = &res.nmar {
            save("nmar", img)?;
        }
        if let Some(img) = &res.corrected {
            save("corrected", img)?;
        }
        write_file(&dir.join("refine_log.csv"), loss_csv("iter", &res.prior.losses))?;
        let mut t = String::from("# wall-clock seconds, cumulative from the start of prior generation\n");
        for (stage, secs) in &res.timing {
            let _ = writeln!(t, "{stage} {secs:.6}");
        }
        write_file(&dir.join(TIMING_FILE), t)
    }

    fn load_output(&self, case: &str, name: &str) -> Result<Option<Image>> {
        let path = self.layout.run(case).join(format!("{name}.mgmr"));
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(Image::from_raster(read_raster(&path)?, self.projector.img)?))
    }

    pub fn require_output(&self, case: &str, name: &str) -> Result<Image> {
        self.load_output(case, name)?
            .ok_or_else(|| PipelineError::Missing(format!("{}/{name}.mgmr (run `run` first)", self.layout.run(case).display())))
    }

    fn timings(&self, case: &str) -> Vec<(String, f64)> {
        std::fs::read_to_string(self.layout.run(case).join(TIMING_FILE))
            .map(|t| {
                t.lines()
                    .filter(|l| !l.starts_with('#'))
                    .filter_map(|l| l.split_once(' '))
                    .filter_map(|(k, v)| Some((k.to_string(), v.trim().parse().ok()?)))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn eval(&self, strict: bool) -> Result<EvalOutcome> {
        let manifest = self.manifest()?;
        let entries: Vec<_> = manifest.split(Split::Validation).cloned().collect();
        if entries.is_empty() {
            return Err(PipelineError::Missing("validation cases".into()));
        }
        let stage_files = [("uncorrected", "uncorrected"), ("prior@0", "prior_init"), ("prior@refined", "prior"), ("nmar", "nmar"), ("residual", "corrected")];
        let first = &entries[0].dir;
        if !self.layout.run(first).exists() {
            return Err(PipelineError::Missing(format!("{} (run `run` first)", self.layout.run(first).display())));
        }
        let present: Vec<(&str, &str)> =
            stage_files.iter().copied().filter(|(_, f)| self.layout.run(first).join(format!("{f}.mgmr")).exists()).collect();
        let k = self.cfg.prior.k;
        let per_case = entries
            .par_iter()
            .map(|e| {
                let case = manifest.load_case(e, &self.projector)?;
                let times = self.timings(&e.dir);
                let mut rows = Vec::new();
                for (stage, file) in &present {
                    let img = self.require_output(&e.dir, file)?;
                    let t = times.iter().find(|(s, _)| s == stage).map(|p| p.1).unwrap_or(0.0);
                    rows.push(MetricRow::compute(&e.dir, stage, &img, &case.mu_star, t)?);
                }
                let target = case.mu.sub(&case.mu_star);
                let trend = (0..=k)
                    .map(|j| {
                        let ma = self.require_output(&e.dir, &format!("mu_ma_{j}"))?;
                        Ok(eval::rmse(&ma, &target, None)?)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Ok((rows, trend))
            })
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<MetricRow> = per_case.iter().flat_map(|(r, _)| r.iter().cloned()).collect();
        let mut mu_ma_trend = vec![0.0; k + 1];
        for (_, t) in &per_case {
            mu_ma_trend.iter_mut().zip(t).for_each(|(a, b)| *a += b / per_case.len() as f64);
        }
        let summary = eval::summarize(&rows);
        let flags = eval::ordering_flags(&summary);
        let prior_gain = eval::prior_gain(&summary);
        let mut failures = Vec::new();
        for f in flags.iter().filter(|f| !f.holds) {
            failures.push(format!("mean RMSE does not decrease from {} to {}", f.from, f.to));
        }
        if let Some(g) = prior_gain.filter(|&g| g < PRIOR_GAIN_MIN) {
            failures.push(format!("uncorrected/prior@0 RMSE ratio {g:.3} below {PRIOR_GAIN_MIN}"));
        }
        for w in mu_ma_trend.windows(2) {
            if w[1] > w[0] {
                failures.push(format!("mu_ma RMSE increases ({:.5} -> {:.5})", w[0], w[1]));
            }
        }
        let mut extra = vec![mu_ma_section(&mu_ma_trend)];
        for which in Ablation::ALL {
            let path = self.layout.ablate(which.name()).join("summary.md");
            if let Ok(text) = std::fs::read_to_string(&path) {
                extra.push(text);
            }
        }
        if !failures.is_empty() {
            let mut s = String::from("## Failed checks\n\n");
            for f in &failures {
                let _ = writeln!(s, "- {f}");
            }
            extra.push(s);
        }
        let report = eval::render_markdown("MGMAR evaluation", &rows, &extra);
        let dir = self.layout.eval();
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        eval::write_csv(&dir.join("metrics.csv"), &rows)?;
        write_file(&dir.join("report.md"), &report)?;
        let outcome = EvalOutcome { rows, summary, flags, prior_gain, mu_ma_trend, failures, report };
        if strict && !outcome.failures.is_empty() {
            return Err(PipelineError::Strict(outcome.failures.join("; ")));
        }
        Ok(outcome)
    }

    pub fn ablate(&self, which: Ablation) -> Result<AblationOutcome> {
        ablate::run(self, which)
    }
}

pub const TIMING_FILE: &str = "timing.txt";
const PGM_WINDOW: f64 = 1000.0;
const PGM_LEVEL: f64 = 0.0;

fn loss_csv(index: &str, losses: &[f64]) -> String {
    let mut s = format!("{index},loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l:?}");
    }
    s
}

fn mu_ma_section(trend: &[f64]) -> String {
    let mut s = String::from("## Metal-artifact image recursion\n\n| k | mean RMSE(mu_ma_k, mu - mu*) |\n|---|---|\n");
    for (k, v) in trend.iter().enumerate() {
        let _ = writeln!(s, "| {k} | {v:.6} |");
    }
    s
}
